#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "cdpir/errors.hpp"
#include "cdpir/geometry.hpp"
#include "cdpir/tensor_io.hpp"

namespace cdpir {

struct MetricResult {
  double psnr_db = 0.0;
  double ssim = 0.0;
  double data_range = 1.0;
};

/// Peak signal-to-noise ratio in dB. Identical inputs give +infinity.
inline double psnr(std::span<const double> x, std::span<const double> ref, double data_range) {
  require(x.size() == ref.size() && !x.empty(), "psnr: shape mismatch");
  require(data_range > 0.0, "psnr: data_range must be > 0");
  double sse = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double e = x[i] - ref[i];
    sse += e * e;
  }
  const double mse = sse / static_cast<double>(x.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 20.0 * std::log10(data_range) - 10.0 * std::log10(mse);
}

inline double psnr(const Image& x, const Image& ref, double data_range) {
  require(x.grid == ref.grid, "psnr: grid mismatch");
  return psnr(x.values, ref.values, data_range);
}

/// Default data range: max - min of the reference (1 if the reference is flat).
inline double default_data_range(std::span<const double> ref) {
  const auto [lo, hi] = std::minmax_element(ref.begin(), ref.end());
  return *hi > *lo ? *hi - *lo : 1.0;
}

namespace detail {

inline std::array<double, 11> ssim_window() {
  std::array<double, 11> w{};
  double sum = 0.0;
  for (int i = 0; i < 11; ++i) {
    const double d = i - 5;
    w[i] = std::exp(-d * d / (2.0 * 1.5 * 1.5));
    sum += w[i];
  }
  for (double& v : w) v /= sum;
  return w;
}

// Separable "valid" Gaussian filtering of a row-major image.
inline std::vector<double> filter_valid(std::span<const double> img, int nx, int ny) {
  static const auto w = ssim_window();
  const int ox = nx - 10, oy = ny - 10;
  std::vector<double> rows(std::size_t(ny) * ox, 0.0);
  for (int y = 0; y < ny; ++y)
    for (int x = 0; x < ox; ++x) {
      double acc = 0.0;
      for (int k = 0; k < 11; ++k) acc += w[k] * img[std::size_t(y) * nx + x + k];
      rows[std::size_t(y) * ox + x] = acc;
    }
  std::vector<double> out(std::size_t(oy) * ox, 0.0);
  for (int y = 0; y < oy; ++y)
    for (int x = 0; x < ox; ++x) {
      double acc = 0.0;
      for (int k = 0; k < 11; ++k) acc += w[k] * rows[std::size_t(y + k) * ox + x];
      out[std::size_t(y) * ox + x] = acc;
    }
  return out;
}

}  // namespace detail

/// Mean structural similarity over all 11x11 Gaussian (sigma 1.5) windows that
/// fit inside the image.
inline double ssim(std::span<const double> x, std::span<const double> ref, int nx, int ny, double data_range) {
  require(x.size() == ref.size() && x.size() == std::size_t(nx) * ny, "ssim: shape mismatch");
  require(nx >= 11 && ny >= 11, "ssim: images must be at least 11x11");
  require(data_range > 0.0, "ssim: data_range must be > 0");
  const double c1 = (0.01 * data_range) * (0.01 * data_range);
  const double c2 = (0.03 * data_range) * (0.03 * data_range);

  std::vector<double> xx(x.size()), yy(x.size()), xy(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    xx[i] = x[i] * x[i];
    yy[i] = ref[i] * ref[i];
    xy[i] = x[i] * ref[i];
  }
  const auto mx = detail::filter_valid(x, nx, ny);
  const auto my = detail::filter_valid(ref, nx, ny);
  const auto sxx = detail::filter_valid(xx, nx, ny);
  const auto syy = detail::filter_valid(yy, nx, ny);
  const auto sxy = detail::filter_valid(xy, nx, ny);

  double total = 0.0;
  for (std::size_t i = 0; i < mx.size(); ++i) {
    const double vx = sxx[i] - mx[i] * mx[i];
    const double vy = syy[i] - my[i] * my[i];
    const double cov = sxy[i] - mx[i] * my[i];
    const double num = (2.0 * mx[i] * my[i] + c1) * (2.0 * cov + c2);
    const double den = (mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2);
    total += num / den;
  }
  return total / static_cast<double>(mx.size());
}

inline double ssim(const Image& x, const Image& ref, double data_range) {
  require(x.grid == ref.grid, "ssim: grid mismatch");
  return ssim(x.values, ref.values, x.grid.nx, x.grid.ny, data_range);
}

inline MetricResult evaluate(const Image& x, const Image& ref, double data_range) {
  return MetricResult{psnr(x, ref, data_range), ssim(x, ref, data_range), data_range};
}

inline MetricResult evaluate(const Image& x, const Image& ref) {
  return evaluate(x, ref, default_data_range(ref.values));
}

/// Formats a metric value for CSV output; +infinity becomes "inf".
inline std::string format_metric(double v) {
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline double parse_metric(const std::string& s) {
  if (s == "inf") return std::numeric_limits<double>::infinity();
  if (s == "-inf") return -std::numeric_limits<double>::infinity();
  return std::stod(s);
}

struct MetricRow {
  std::string case_id;
  std::string method;
  double psnr_db = 0.0;
  double ssim = 0.0;

  bool operator==(const MetricRow&) const = default;
};

/// CSV with header case,method,psnr,ssim. Case and method must not contain commas.
inline std::string encode_metric_csv(const std::vector<MetricRow>& rows) {
  std::string out = "case,method,psnr,ssim\n";
  for (const auto& r : rows) {
    require(r.case_id.find(',') == std::string::npos && r.method.find(',') == std::string::npos,
            "metric csv: fields must not contain commas");
    out += r.case_id + "," + r.method + "," + format_metric(r.psnr_db) + "," + format_metric(r.ssim) + "\n";
  }
  return out;
}

inline std::vector<MetricRow> decode_metric_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "case,method,psnr,ssim") throw DataError("metric csv: bad header");
  std::vector<MetricRow> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
    if (f.size() != 4) throw DataError("metric csv: expected 4 fields in '" + line + "'");
    try {
      rows.push_back({f[0], f[1], parse_metric(f[2]), parse_metric(f[3])});
    } catch (const std::logic_error&) {
      throw DataError("metric csv: bad number in '" + line + "'");
    }
  }
  return rows;
}

/// Linear display window to a 16-bit binary PGM (P5, maxval 65535, big-endian samples).
inline std::string encode_preview(const Image& image, double lo, double hi) {
  require(lo < hi, "export_preview: window requires lo < hi");
  std::string out = "P5\n" + std::to_string(image.grid.nx) + " " + std::to_string(image.grid.ny) + "\n65535\n";
  out.reserve(out.size() + 2 * image.values.size());
  for (double v : image.values) {
    const double u = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
    const auto q = static_cast<std::uint16_t>(std::lround(u * 65535.0));
    out.push_back(static_cast<char>(q >> 8));
    out.push_back(static_cast<char>(q & 0xFF));
  }
  return out;
}

inline void export_preview(const Image& image, const std::filesystem::path& path, double lo, double hi) {
  detail::write_file(path, encode_preview(image, lo, hi));
}

}  // namespace cdpir
