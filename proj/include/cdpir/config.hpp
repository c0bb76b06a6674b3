#pragma once

// Run configuration shared by the command-line tool: one JSON document with a
// section per module. Every reader is strict, and to_json(from_json(j))
// reproduces a resolved configuration exactly.

#include <cmath>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "cdpir/errors.hpp"
#include "cdpir/geometry.hpp"
#include "cdpir/interpolant.hpp"
#include "cdpir/json_io.hpp"
#include "cdpir/model.hpp"
#include "cdpir/reconstruction.hpp"
#include "cdpir/simulate.hpp"
#include "cdpir/solver.hpp"
#include "cdpir/training.hpp"

namespace cdpir {

inline constexpr double kDeskFieldMm = 88.0;
inline constexpr int kDeskFullViews = 246;
inline constexpr int kDeskSparseViews = 55;

/// Desk-scale grid covering an 88 mm field.
inline ImageGrid desk_grid(int size) {
  require(size >= 1, "desk_grid: size must be >= 1");
  return ImageGrid{size, size, kDeskFieldMm / size};
}

/// Acquisition: a full circular scan of full_views views, of which `views`
/// uniformly spaced views are kept.
struct AcquisitionConfig {
  DetectorKind kind = DetectorKind::FanFlat;
  double sid = 156.4025;
  double sdd = 274.4;
  int n_det = 256;
  double det_spacing = 0.936;
  int full_views = kDeskFullViews;
  int views = kDeskSparseViews;

  /// Detector sampling scaled so the fan angle stays fixed: 2 cells per pixel.
  static AcquisitionConfig desk(int grid_size) {
    AcquisitionConfig a;
    a.n_det = 2 * grid_size;
    a.det_spacing = 0.936 * 256.0 / a.n_det;
    return a;
  }

  ScanGeometry full() const {
    ScanGeometry g;
    g.kind = kind;
    g.sid = sid;
    g.sdd = sdd;
    g.n_det = n_det;
    g.det_spacing = det_spacing;
    g.angles = uniform_angles(full_views);
    g.validate();
    return g;
  }

  ScanGeometry sparse() const { return subsample_views(full(), views); }

  void validate() const {
    require(full_views >= 1 && views >= 1 && views <= full_views, "acquisition: need 1 <= views <= full_views");
    full().validate();
  }

  bool operator==(const AcquisitionConfig&) const = default;
};

inline Json to_json(const AcquisitionConfig& a) {
  return Json{{"kind", to_string(a.kind)}, {"sid", a.sid},       {"sdd", a.sdd},
              {"n_det", a.n_det},          {"det_spacing", a.det_spacing}, {"full_views", a.full_views},
              {"views", a.views}};
}

inline AcquisitionConfig acquisition_from_json(const Json& j, AcquisitionConfig a = {}) {
  check_keys(j, {"kind", "sid", "sdd", "n_det", "det_spacing", "full_views", "views"}, "acquisition");
  try {
    if (j.contains("kind")) a.kind = detector_kind_from_string(j.at("kind").get<std::string>());
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  read_opt(j, "sid", a.sid);
  read_opt(j, "sdd", a.sdd);
  read_opt(j, "n_det", a.n_det);
  read_opt(j, "det_spacing", a.det_spacing);
  read_opt(j, "full_views", a.full_views);
  read_opt(j, "views", a.views);
  a.validate();
  return a;
}

struct DatasetSection {
  std::vector<int> domains{0, 1};
  int n_train = 100;  // per domain
  int n_test = 10;    // per domain
  std::optional<int> ood_domain = 2;
  int n_test_ood = 10;
  std::uint64_t seed = 1;

  bool operator==(const DatasetSection&) const = default;
};

inline Json to_json(const DatasetSection& d) {
  return Json{{"domains", d.domains},   {"n_train", d.n_train},
              {"n_test", d.n_test},     {"ood_domain", d.ood_domain ? Json(*d.ood_domain) : Json(nullptr)},
              {"n_test_ood", d.n_test_ood}, {"seed", d.seed}};
}

inline DatasetSection dataset_section_from_json(const Json& j, DatasetSection d = {}) {
  check_keys(j, {"domains", "n_train", "n_test", "ood_domain", "n_test_ood", "seed"}, "dataset");
  read_opt(j, "domains", d.domains);
  read_opt(j, "n_train", d.n_train);
  read_opt(j, "n_test", d.n_test);
  if (auto it = j.find("ood_domain"); it != j.end()) {
    if (it->is_null())
      d.ood_domain.reset();
    else
      d.ood_domain = it->get<int>();
  }
  read_opt(j, "n_test_ood", d.n_test_ood);
  read_opt(j, "seed", d.seed);
  require(!d.domains.empty() && d.n_train >= 0 && d.n_test >= 0 && d.n_test_ood >= 0, "dataset: invalid counts");
  return d;
}

struct RunConfig {
  ImageGrid grid = desk_grid(64);
  AcquisitionConfig acquisition = AcquisitionConfig::desk(64);
  NoiseModel noise{NoiseKind::Poisson};  // I0 = 1e5
  DatasetSection dataset{};
  ModelConfig model = ModelConfig::preset(ModelVariant::Tiny, 64, 4, 2);
  TrainConfig train{};
  InterpolantSchedule schedule{};
  CdpirConfig cdpir{};

  /// Desk defaults for a size x size grid.
  static RunConfig desk(int size = 64) {
    RunConfig c;
    c.grid = desk_grid(size);
    c.acquisition = AcquisitionConfig::desk(size);
    c.model = ModelConfig::preset(ModelVariant::Tiny, size, size >= 64 ? 4 : 2, 2);
    return c;
  }

  DatasetConfig dataset_config() const {
    DatasetConfig d;
    d.grid = grid;
    d.geometry = acquisition.sparse();
    d.noise = noise;
    d.domains = dataset.domains;
    d.n_train = dataset.n_train;
    d.n_test = dataset.n_test;
    d.ood_domain = dataset.ood_domain;
    d.n_test_ood = dataset.n_test_ood;
    d.seed = dataset.seed;
    return d;
  }

  void validate() const {
    grid.validate();
    acquisition.validate();
    noise.validate();
    model.validate();
    train.validate();
    cdpir.validate();
    require(model.image_size == grid.nx && grid.nx == grid.ny, "config: model.image_size must match a square grid");
    require(int(dataset.domains.size()) <= model.n_labels, "config: more training domains than model labels");
  }
};

inline Json to_json(const RunConfig& c) {
  Json cd = to_json(c.cdpir);
  cd.erase("schedule");
  return Json{{"grid", to_json(c.grid)},   {"acquisition", to_json(c.acquisition)},
              {"noise", to_json(c.noise)}, {"dataset", to_json(c.dataset)},
              {"model", to_json(c.model)}, {"train", to_json(c.train)},
              {"schedule", to_json(c.schedule)}, {"cdpir", cd}};
}

/// Parses a run configuration. The grid size, when given, re-derives the desk
/// defaults of the other sections before they are overlaid.
inline RunConfig run_config_from_json(const Json& j) {
  check_keys(j, {"grid", "acquisition", "noise", "dataset", "model", "train", "schedule", "cdpir"}, "config");
  RunConfig c;
  try {
    if (j.contains("grid")) {
      const ImageGrid g = grid_from_json(j.at("grid"));
      c = RunConfig::desk(g.nx);
      c.grid = g;
    }
    if (j.contains("acquisition")) c.acquisition = acquisition_from_json(j.at("acquisition"), c.acquisition);
    if (j.contains("noise")) c.noise = noise_from_json(j.at("noise"));
    if (j.contains("dataset")) c.dataset = dataset_section_from_json(j.at("dataset"), c.dataset);
    if (j.contains("model")) {
      Json m = to_json(c.model);
      m.update(j.at("model"));
      if (j.at("model").contains("variant") && !j.at("model").contains("depth")) {
        const auto v = model_variant_from_string(j.at("model").at("variant").get<std::string>());
        const auto p = ModelConfig::preset(v, m.at("image_size"), m.at("patch_size"), m.at("n_labels"));
        m["depth"] = p.depth;
        m["hidden_size"] = p.hidden_size;
        m["n_heads"] = p.n_heads;
      }
      check_keys(j.at("model"), {"variant", "image_size", "patch_size", "depth", "hidden_size", "n_heads", "n_labels",
                                 "mlp_ratio", "freq_dim", "data_offset", "data_scale"},
                 "model");
      c.model = model_config_from_json(m);
    }
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("schedule")) c.schedule = schedule_from_json(j.at("schedule"));
    if (j.contains("cdpir")) {
      if (j.at("cdpir").contains("schedule")) throw UsageError("cdpir: the schedule is set by the top-level section");
      c.cdpir = cdpir_config_from_json(j.at("cdpir"));
    }
    c.cdpir.schedule = c.schedule;
    c.validate();
  } catch (const Json::exception& e) {
    throw UsageError(std::string("config: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("config: ") + e.what());
  }
  return c;
}

inline RunConfig read_run_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw UsageError("config file not found: " + path.string());
  try {
    return run_config_from_json(Json::parse(detail::read_file(path)));
  } catch (const Json::parse_error& e) {
    throw UsageError(path.string() + ": " + e.what());
  }
}

inline void write_resolved_config(const RunConfig& c, const std::filesystem::path& dir) {
  detail::write_file(dir / "resolved_config.json", to_json(c).dump(2) + "\n");
}

}  // namespace cdpir
