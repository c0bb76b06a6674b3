#pragma once

// JSON mapping for the shared domain types. Readers are strict: unknown keys
// are rejected so that a typo in a config file never silently falls back to a
// default.

#include <initializer_list>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "cdpir/errors.hpp"
#include "cdpir/geometry.hpp"

namespace cdpir {

using Json = nlohmann::json;

inline void check_keys(const Json& j, std::initializer_list<const char*> allowed, const std::string& context) {
  if (!j.is_object()) throw UsageError(context + ": expected a JSON object");
  std::set<std::string> ok(allowed.begin(), allowed.end());
  for (const auto& item : j.items())
    if (!ok.count(item.key())) throw UsageError(context + ": unknown key '" + item.key() + "'");
}

/// Reads j[key] into out when present.
template <class T>
void read_opt(const Json& j, const char* key, T& out) {
  if (auto it = j.find(key); it != j.end()) out = it->get<T>();
}

inline Json to_json(const ImageGrid& g) { return Json{{"nx", g.nx}, {"ny", g.ny}, {"pixel_size", g.pixel_size}}; }

inline ImageGrid grid_from_json(const Json& j) {
  check_keys(j, {"nx", "ny", "pixel_size"}, "grid");
  ImageGrid g;
  read_opt(j, "nx", g.nx);
  read_opt(j, "ny", g.ny);
  read_opt(j, "pixel_size", g.pixel_size);
  g.validate();
  return g;
}

inline Json to_json(const ScanGeometry& g) {
  return Json{{"kind", to_string(g.kind)}, {"sid", g.sid},       {"sdd", g.sdd},
              {"n_det", g.n_det},          {"det_spacing", g.det_spacing}, {"angles", g.angles}};
}

inline ScanGeometry scan_geometry_from_json(const Json& j) {
  check_keys(j, {"kind", "sid", "sdd", "n_det", "det_spacing", "angles"}, "scan geometry");
  ScanGeometry g;
  if (j.contains("kind")) g.kind = detector_kind_from_string(j.at("kind").get<std::string>());
  read_opt(j, "sid", g.sid);
  read_opt(j, "sdd", g.sdd);
  read_opt(j, "n_det", g.n_det);
  read_opt(j, "det_spacing", g.det_spacing);
  read_opt(j, "angles", g.angles);
  g.validate();
  return g;
}

}  // namespace cdpir
