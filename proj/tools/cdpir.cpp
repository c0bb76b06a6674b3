// cdpir command-line tool: dataset creation, training, reconstruction,
// evaluation and parameter sweeps. Exit codes: 0 success, 1 usage,
// 2 data error, 3 numerical failure.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cdpir/config.hpp"
#include "cdpir/metrics.hpp"
#include "cdpir/parallel.hpp"

using namespace cdpir;
namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::string out;
};

void add_common(CLI::App* cmd, Common& c, bool config_required = false) {
  auto* opt = cmd->add_option("--config", c.config, "run configuration (JSON)");
  if (config_required) opt->required();
  cmd->add_option("--out", c.out, "output directory")->required();
}

RunConfig load_config(const Common& c) { return c.config.empty() ? RunConfig{} : read_run_config(c.config); }

// Re-validates after flag overrides and echoes the resolved configuration.
void finish_config(RunConfig& rc, const Common& c, const std::string& command, const Json& invocation) {
  try {
    rc.cdpir.schedule = rc.schedule;
    rc.validate();
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  fs::create_directories(c.out);
  write_resolved_config(rc, c.out);
  Json inv = invocation;
  inv["command"] = command;
  detail::write_file(fs::path(c.out) / "invocation.json", inv.dump(2) + "\n");
}

fs::path require_file(const std::string& path, const std::string& what) {
  if (path.empty()) throw UsageError(what + " is required");
  if (!fs::exists(path)) throw DataError(what + " not found: " + path);
  return path;
}

int parse_label(const std::string& s) {
  if (s == "null") return kNullLabel;
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used == s.size()) return v;
  } catch (const std::logic_error&) {
  }
  throw UsageError("--label must be an integer or 'null'");
}

std::string case_id(const DatasetEntry& e) { return fs::path(e.phantom).stem().string(); }

Image load_image(const fs::path& path, const ImageGrid& grid) { return image_from_tensor(read_tensor(path), grid); }

Checkpoint load_model_checkpoint(const std::string& path) { return load_checkpoint(require_file(path, "--ckpt")); }

double preview_max(const Image& img) {
  double hi = 0.0;
  for (double v : img.values) hi = std::max(hi, v);
  return hi > 0.0 ? hi : 1.0;
}

// ---------------------------------------------------------------- phantom

struct PhantomArgs {
  Common common;
  std::optional<std::uint64_t> seed;
};

void run_phantom(const PhantomArgs& a) {
  RunConfig rc = load_config(a.common);
  if (a.seed) rc.dataset.seed = *a.seed;
  finish_config(rc, a.common, "phantom", Json::object());
  const auto m = build_dataset(rc.dataset_config(), a.common.out);
  std::cout << "wrote " << m.entries.size() << " entries to " << (fs::path(a.common.out) / "manifest.json") << "\n";
}

// ---------------------------------------------------------------- simulate

struct SimulateArgs {
  Common common;
  std::string data;
  std::optional<int> views;
  std::string noise;
  std::optional<double> i0;
  std::optional<double> sigma_e;
};

void run_simulate(const SimulateArgs& a) {
  RunConfig rc = load_config(a.common);
  if (a.views) rc.acquisition.views = *a.views;
  if (!a.noise.empty()) rc.noise.kind = noise_kind_from_string(a.noise);
  if (a.i0) rc.noise.i0 = *a.i0;
  if (a.sigma_e) rc.noise.sigma_e = *a.sigma_e;
  const fs::path src = require_file(a.data, "--data");
  const auto input = read_manifest(src);
  const fs::path root = src.parent_path();
  if (input.grid.nx != rc.grid.nx || input.grid.ny != rc.grid.ny)
    throw DataError("simulate: manifest grid does not match the configured grid");
  rc.grid = input.grid;
  finish_config(rc, a.common, "simulate",
                Json{{"data", a.data}, {"views", rc.acquisition.views}, {"noise", to_json(rc.noise)}});

  const fs::path out = a.common.out;
  DatasetManifest m{input.grid, rc.acquisition.sparse(), rc.noise, input.entries};
  const Projector projector(m.geometry, m.grid);
  fs::create_directories(out / "phantoms");
  fs::create_directories(out / "sinograms");
  for (auto& e : m.entries) e.sinogram = "sinograms/" + fs::path(e.phantom).filename().string();
  parallel_for(int(m.entries.size()), [&](int i) {
    const auto& e = m.entries[std::size_t(i)];
    const Tensor phantom = read_tensor(root / input.entries[std::size_t(i)].phantom);
    write_tensor(out / e.phantom, phantom);
    const Sinogram y = simulate_sinogram(image_from_tensor(phantom, m.grid), projector, m.noise, mix_seed(e.seed, 0x51));
    write_tensor(out / e.sinogram, to_tensor(y));
  });
  write_manifest(out / "manifest.json", m);
  std::cout << "simulated " << m.entries.size() << " sinograms with " << m.geometry.n_views() << " views\n";
}

// ---------------------------------------------------------------- train

struct TrainArgs {
  Common common;
  std::string data;
  std::string model;
  std::optional<int> iters;
  std::optional<int> single_domain;
  std::optional<std::uint64_t> seed;
  std::optional<double> lr;
  std::optional<int> batch;
};

void run_train(const TrainArgs& a) {
  RunConfig rc = load_config(a.common);
  const fs::path src = require_file(a.data, "--data");
  const auto manifest = read_manifest(src);
  if (manifest.grid.nx != rc.grid.nx || manifest.grid.ny != rc.grid.ny)
    throw DataError("train: manifest grid does not match the configured grid");
  if (!a.model.empty()) {
    const auto v = model_variant_from_string(a.model);
    rc.model = ModelConfig::preset(v, rc.model.image_size, rc.model.patch_size, rc.model.n_labels);
  }
  if (a.iters) rc.train.n_iters = *a.iters;
  if (a.seed) rc.train.seed = *a.seed;
  if (a.lr) rc.train.learning_rate = *a.lr;
  if (a.batch) rc.train.batch_size = *a.batch;
  Json inv{{"data", a.data}};
  if (a.single_domain) inv["single_domain"] = *a.single_domain;
  finish_config(rc, a.common, "train", inv);

  std::vector<TrainingExample> examples;
  for (const auto& e : manifest.split("train"))
    if (!a.single_domain || e.domain_id == *a.single_domain)
      examples.push_back({read_tensor(src.parent_path() / e.phantom).data, e.domain_id});
  if (examples.empty()) throw DataError("train: no training entries selected");
  const auto result = train(examples, rc.model, rc.train, rc.schedule, fs::path(a.common.out));
  if (!result.losses.empty()) {
    const auto [head, tail] = smoothed_endpoints(result.losses, 100);
    std::cout << "trained on " << examples.size() << " phantoms, smoothed loss " << head << " -> " << tail << "\n";
  }
}

// ---------------------------------------------------------------- reconstruct

struct ReconstructArgs {
  Common common;
  std::string sino;
  std::string ckpt;
  std::string gt;
  std::string method = "cdpir";
  std::optional<int> steps;
  std::optional<double> mu;
  std::string label;
  std::optional<int> iters;
  std::optional<int> cadence;
  std::optional<std::uint64_t> seed;
  bool no_renoise = false;
};

void run_reconstruct(const ReconstructArgs& a) {
  RunConfig rc = load_config(a.common);
  if (a.steps) rc.cdpir.n_steps = *a.steps;
  if (a.mu) rc.cdpir.mu = *a.mu;
  if (!a.label.empty()) rc.cdpir.label = parse_label(a.label);
  if (a.cadence) rc.cdpir.dc_cadence = *a.cadence;
  if (a.seed) rc.cdpir.seed = *a.seed;
  if (a.no_renoise) rc.cdpir.renoise = false;
  if (a.method != "cdpir" && a.method != "asdpocs" && a.method != "ossart")
    throw UsageError("--method must be cdpir, asdpocs or ossart");
  if (a.method == "cdpir" && a.ckpt.empty()) throw UsageError("--ckpt is required for method cdpir");
  std::optional<Checkpoint> ckpt;
  if (a.method == "cdpir") {
    ckpt = load_model_checkpoint(a.ckpt);
    rc.schedule = ckpt->schedule;
  }
  Json inv{{"sino", a.sino}, {"method", a.method}};
  if (!a.ckpt.empty()) inv["ckpt"] = a.ckpt;
  if (!a.gt.empty()) inv["gt"] = a.gt;
  if (a.iters) inv["iters"] = *a.iters;
  finish_config(rc, a.common, "reconstruct", inv);

  const Projector projector(rc.acquisition.sparse(), rc.grid);
  const Sinogram y = sinogram_from_tensor(read_tensor(require_file(a.sino, "--sino")), projector.geometry());
  std::optional<Image> gt;
  if (!a.gt.empty()) gt = load_image(require_file(a.gt, "--gt"), rc.grid);

  ReconstructionReport report;
  if (a.method == "cdpir") {
    report = cdpir_reconstruct(y, projector, model_from_checkpoint(*ckpt), rc.cdpir, gt);
  } else {
    BaselineConfig b;
    b.method = a.method == "asdpocs" ? BaselineMethod::AsdPocs : BaselineMethod::OsSart;
    b.iterations = a.iters.value_or(rc.cdpir.sweep_budget());
    b.solver = rc.cdpir.dc_config;
    report = reconstruct_baselines(y, projector, b, gt);
  }
  const fs::path out = a.common.out;
  write_tensor(out / "image.ten", to_tensor(report.image));
  Json j = to_json(report);
  if (gt) {
    const auto m = evaluate(report.image, *gt);
    j["metrics"] = Json{{"psnr", format_metric(m.psnr_db)}, {"ssim", format_metric(m.ssim)}};
    std::cout << a.method << " psnr " << format_metric(m.psnr_db) << " ssim " << format_metric(m.ssim) << "\n";
  }
  detail::write_file(out / "report.json", j.dump(2) + "\n");
  export_preview(report.image, out / "preview.pgm", 0.0, gt ? preview_max(*gt) : preview_max(report.image));
}

// ---------------------------------------------------------------- eval

struct EvalArgs {
  Common common;
  std::string data;
  std::string recon;
  std::string method = "recon";
  std::string split = "test";
};

// A reconstruction for a case is <recon>/<case>.ten or <recon>/<case>/image.ten.
fs::path recon_path(const fs::path& dir, const std::string& id) {
  if (fs::exists(dir / (id + ".ten"))) return dir / (id + ".ten");
  if (fs::exists(dir / id / "image.ten")) return dir / id / "image.ten";
  throw DataError("eval: no reconstruction for case " + id + " in " + dir.string());
}

void run_eval(const EvalArgs& a) {
  RunConfig rc = load_config(a.common);
  const fs::path src = require_file(a.data, "--data");
  const fs::path recon = require_file(a.recon, "--recon");
  finish_config(rc, a.common, "eval", Json{{"data", a.data}, {"recon", a.recon}, {"method", a.method}, {"split", a.split}});
  const auto manifest = read_manifest(src);
  const auto entries = manifest.split(a.split);
  if (entries.empty()) throw DataError("eval: split '" + a.split + "' is empty");
  std::vector<MetricRow> rows(entries.size());
  parallel_for(int(entries.size()), [&](int i) {
    const auto& e = entries[std::size_t(i)];
    const Image gt = load_image(src.parent_path() / e.phantom, manifest.grid);
    const Image x = load_image(recon_path(recon, case_id(e)), manifest.grid);
    const auto m = evaluate(x, gt);
    rows[std::size_t(i)] = {case_id(e), a.method, m.psnr_db, m.ssim};
  });
  detail::write_file(fs::path(a.common.out) / "metrics.csv", encode_metric_csv(rows));
  std::cout << "evaluated " << rows.size() << " cases\n";
}

// ---------------------------------------------------------------- sweep

struct SweepArgs {
  Common common;
  std::string data;
  std::vector<std::string> ckpts;
  std::vector<int> steps{100, 200, 500, 1000};
  std::vector<double> mus{1.0};
  std::string label;
  std::string split = "test";
  std::optional<int> domain;
  std::optional<int> limit;
  bool baseline = false;
};

void run_sweep(const SweepArgs& a) {
  RunConfig rc = load_config(a.common);
  if (!a.label.empty()) rc.cdpir.label = parse_label(a.label);
  const fs::path src = require_file(a.data, "--data");
  if (a.ckpts.empty() && !a.baseline) throw UsageError("sweep: give at least one --ckpt or --baseline");
  Json inv{{"data", a.data}, {"ckpts", a.ckpts}, {"steps", a.steps}, {"mu", a.mus}, {"split", a.split},
           {"baseline", a.baseline}};
  if (a.domain) inv["domain"] = *a.domain;
  if (a.limit) inv["limit"] = *a.limit;
  finish_config(rc, a.common, "sweep", inv);

  const auto manifest = read_manifest(src);
  std::vector<DatasetEntry> cases;
  for (const auto& e : manifest.split(a.split))
    if ((!a.domain || e.domain_id == *a.domain) && (!a.limit || int(cases.size()) < *a.limit)) cases.push_back(e);
  if (cases.empty()) throw DataError("sweep: no cases selected");
  const Projector projector(manifest.geometry, manifest.grid);
  std::vector<Image> truth;
  std::vector<Sinogram> sinos;
  for (const auto& e : cases) {
    truth.push_back(load_image(src.parent_path() / e.phantom, manifest.grid));
    sinos.push_back(sinogram_from_tensor(read_tensor(src.parent_path() / e.sinogram), manifest.geometry));
  }

  std::vector<MetricRow> per_case;
  std::string summary = "method,checkpoint,steps,mu,cases,psnr,ssim\n";
  auto run_setting = [&](const std::string& method, const std::string& ckpt_name, int steps, double mu,
                         const std::function<Image(std::size_t)>& reconstruct) {
    std::vector<MetricRow> rows(cases.size());
    parallel_for(int(cases.size()), [&](int i) {
      const auto m = evaluate(reconstruct(std::size_t(i)), truth[std::size_t(i)]);
      rows[std::size_t(i)] = {case_id(cases[std::size_t(i)]), method, m.psnr_db, m.ssim};
    });
    double p = 0.0, s = 0.0;
    for (const auto& r : rows) p += r.psnr_db / double(rows.size()), s += r.ssim / double(rows.size());
    per_case.insert(per_case.end(), rows.begin(), rows.end());
    summary += method + "," + ckpt_name + "," + std::to_string(steps) + "," + format_metric(mu) + "," +
               std::to_string(rows.size()) + "," + format_metric(p) + "," + format_metric(s) + "\n";
    std::cout << method << " psnr " << p << " ssim " << s << "\n";
  };

  for (const auto& path : a.ckpts) {
    const Checkpoint ckpt = load_model_checkpoint(path);
    const auto net = model_from_checkpoint(ckpt);
    const std::string name = fs::path(path).parent_path().filename().string() + "/" + fs::path(path).filename().string();
    for (int steps : a.steps)
      for (double mu : a.mus) {
        CdpirConfig c = rc.cdpir;
        c.schedule = ckpt.schedule;
        c.n_steps = steps;
        c.mu = mu;
        const std::string method = "cdpir[" + name + ";steps=" + std::to_string(steps) + ";mu=" + format_metric(mu) + "]";
        run_setting(method, name, steps, mu,
                    [&](std::size_t i) { return cdpir_reconstruct(sinos[i], projector, net, c).image; });
      }
  }
  if (a.baseline)
    for (int steps : a.steps) {
      CdpirConfig c = rc.cdpir;
      c.n_steps = steps;
      BaselineConfig b;
      b.iterations = c.sweep_budget();
      b.solver = c.dc_config;
      run_setting("asdpocs[budget=" + std::to_string(b.iterations) + "]", "", steps, 0.0,
                  [&](std::size_t i) { return reconstruct_baselines(sinos[i], projector, b).image; });
    }
  detail::write_file(fs::path(a.common.out) / "sweep.csv", summary);
  detail::write_file(fs::path(a.common.out) / "metrics.csv", encode_metric_csv(per_case));
}

template <class Args>
CLI::App* subcommand(CLI::App& app, const char* name, const char* help, Args& args,
                     std::function<void()>& action, void (*run)(const Args&)) {
  auto* cmd = app.add_subcommand(name, help);
  cmd->callback([&action, &args, run] { action = [&args, run] { run(args); }; });
  return cmd;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"CDPIR sparse-view CT reconstruction"};
  app.require_subcommand(1);
  std::function<void()> action;

  PhantomArgs phantom;
  auto* c_phantom = subcommand(app, "phantom", "build a phantom dataset", phantom, action, run_phantom);
  add_common(c_phantom, phantom.common, true);
  c_phantom->add_option("--seed", phantom.seed, "dataset seed");

  SimulateArgs sim;
  auto* c_sim = subcommand(app, "simulate", "simulate sparse-view sinograms for existing phantoms", sim, action,
                           run_simulate);
  add_common(c_sim, sim.common);
  c_sim->add_option("--data", sim.data, "input manifest.json")->required();
  c_sim->add_option("--views", sim.views, "number of uniformly kept views");
  c_sim->add_option("--noise", sim.noise, "none | poisson | gaussian | poisson_gaussian");
  c_sim->add_option("--i0", sim.i0, "incident photons per ray");
  c_sim->add_option("--sigma-e", sim.sigma_e, "post-log Gaussian std");

  TrainArgs tr;
  auto* c_train = subcommand(app, "train", "train the velocity model", tr, action, run_train);
  add_common(c_train, tr.common);
  c_train->add_option("--data", tr.data, "dataset manifest.json")->required();
  c_train->add_option("--model", tr.model, "tiny | small | big");
  c_train->add_option("--iters", tr.iters, "training iterations");
  c_train->add_option("--single-domain", tr.single_domain, "train only on this domain");
  c_train->add_option("--seed", tr.seed, "training seed");
  c_train->add_option("--lr", tr.lr, "learning rate");
  c_train->add_option("--batch", tr.batch, "batch size");

  ReconstructArgs rec;
  auto* c_rec = subcommand(app, "reconstruct", "reconstruct one sinogram", rec, action, run_reconstruct);
  add_common(c_rec, rec.common);
  c_rec->add_option("--sino", rec.sino, "sinogram tensor")->required();
  c_rec->add_option("--ckpt", rec.ckpt, "model checkpoint (cdpir only)");
  c_rec->add_option("--gt", rec.gt, "reference image tensor for metrics");
  c_rec->add_option("--method", rec.method, "cdpir | asdpocs | ossart");
  c_rec->add_option("--steps", rec.steps, "diffusion steps");
  c_rec->add_option("--mu", rec.mu, "guidance scale");
  c_rec->add_option("--label", rec.label, "domain label or null");
  c_rec->add_option("--iters", rec.iters, "baseline iterations (default: the CDPIR sweep budget)");
  c_rec->add_option("--cadence", rec.cadence, "data-consistency cadence");
  c_rec->add_option("--seed", rec.seed, "sampling seed");
  c_rec->add_flag("--no-renoise", rec.no_renoise, "continue from the consistent image without re-noising");

  EvalArgs ev;
  auto* c_eval = subcommand(app, "eval", "PSNR/SSIM of reconstructions over a split", ev, action, run_eval);
  add_common(c_eval, ev.common);
  c_eval->add_option("--data", ev.data, "dataset manifest.json")->required();
  c_eval->add_option("--recon", ev.recon, "directory of reconstructions")->required();
  c_eval->add_option("--method", ev.method, "method name for the CSV");
  c_eval->add_option("--split", ev.split, "train | test");

  SweepArgs sw;
  auto* c_sweep = subcommand(app, "sweep", "grid of CDPIR settings over a split", sw, action, run_sweep);
  add_common(c_sweep, sw.common);
  c_sweep->add_option("--data", sw.data, "dataset manifest.json")->required();
  c_sweep->add_option("--ckpt", sw.ckpts, "checkpoints (repeatable)");
  c_sweep->add_option("--steps", sw.steps, "step counts")->capture_default_str();
  c_sweep->add_option("--mu", sw.mus, "guidance scales")->capture_default_str();
  c_sweep->add_option("--label", sw.label, "domain label or null");
  c_sweep->add_option("--split", sw.split, "train | test");
  c_sweep->add_option("--domain", sw.domain, "restrict to one domain");
  c_sweep->add_option("--limit", sw.limit, "maximum number of cases");
  c_sweep->add_flag("--baseline", sw.baseline, "add matched-budget ASD-POCS rows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 1;
  }
  try {
    action();
    return 0;
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const std::invalid_argument& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return 1;
  } catch (const NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  }
}
