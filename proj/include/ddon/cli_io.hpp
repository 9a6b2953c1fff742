#pragma once

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Core>
#include "json.hpp"

#include "ddon/pipeline_apps.hpp"

namespace ddon {

// ---------------------------------------------------------------------------
// run configuration

struct GeometryConfig {
  /// laplace_strip | linear | lshape | tshape | multimedium
  std::string problem = "laplace_strip";
  /// Nodes per axis of each learned subdomain grid.
  int grid = 32;
  /// Sensors per axis of every branch face.
  int sensors = 32;
  /// Half-width of the strip overlap used by overlapping classical schemes.
  double overlap = 0.0;
  /// linear: domain [0, length] x [0, 1] cut along x.
  double length = 2.0;
  /// Grid spacing (linear, and the classical resistance grids); 0 = problem default.
  double spacing = 0.0;
  std::vector<std::array<double, 2>> subdomains;
  double reference_spacing = 0.125;
  std::size_t shapes = 3;
  double lower_size = 1.0;
  double upper_size = 0.4;
  std::array<double, 2> offset{0.3, 0.3};
  std::array<double, 2> permittivity{10.0, 0.1};
  int lower_n = 11;
  int upper_n = 5;
};

struct SolverConfig {
  /// schwarz | framework1 | framework2 | iteration_free
  std::string scheme = "framework2";
  /// classical | neural
  std::string binding = "classical";
  double theta = 0.5;
  double epsilon = 1e-6;
  std::size_t max_iterations = 200;
  double initial_value = 0.0;
  /// dirichlet_dirichlet | dirichlet_robin (framework 1)
  std::string transmission = "dirichlet_robin";
  std::size_t instances = 10;
  std::size_t divergence_window = 10;
  std::vector<std::size_t> solve_order;
};

struct NetworkConfig {
  std::string preset;
  std::string global_preset;
  std::vector<std::vector<int>> branches;
  std::vector<int> trunk;
  int width = 64;
  int depth = 3;
  int global_width = 128;
  int global_depth = 3;
  std::string fusion = "product";
  std::size_t iterations = 1000;
  std::size_t batch_size = 64;
  double lr_init = 1e-3;
  double lr_final = 1e-5;
  std::size_t points_per_step = 256;
  std::size_t log_interval = 100;
  std::string loss = "ml2re";
};

struct DataConfig {
  /// gp | interpolation
  std::string method = "gp";
  std::size_t count = 100;
  double train_fraction = 0.8;
  double correlation_length = 0.5;
  double variance = 1.0;
  /// Also generate a whole-domain dataset for a single global net.
  bool global = false;
};

struct OutputConfig {
  std::string dir = "ddon_out";
  bool vtk = false;
  bool fields = true;
};

struct RunConfig {
  std::uint64_t seed = 0;
  GeometryConfig geometry;
  SolverConfig solver;
  NetworkConfig network;
  DataConfig data;
  OutputConfig output;

  nlohmann::json to_json() const;
};

namespace detail {

inline std::size_t edit_distance(const std::string& a, const std::string& b) {
  std::vector<std::size_t> prev(b.size() + 1), cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j)
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

/// Lower-case key with separators removed and common abbreviations spelled out.
inline std::string canonical_key(const std::string& key) {
  static const std::map<std::string, std::string> abbrev{{"lr", "learningrate"}, {"iters", "iterations"},
                                                         {"bs", "batchsize"},    {"eps", "epsilon"},
                                                         {"dir", "directory"},   {"n", "count"}};
  std::string out, token;
  auto flush = [&] {
    const auto it = abbrev.find(token);
    out += it == abbrev.end() ? token : it->second;
    token.clear();
  };
  for (char c : key) {
    if (c == '_' || c == '-' || c == ' ' || c == '.') {
      flush();
      continue;
    }
    token += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  flush();
  return out;
}

/// 1-based line of the first quoted occurrence of `key` in `text` (0 if absent).
inline std::size_t line_of(const std::string& text, const std::string& key) {
  const auto pos = text.find("\"" + key + "\"");
  if (pos == std::string::npos) return 0;
  return 1 + static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<std::ptrdiff_t>(pos), '\n'));
}

}  // namespace detail

/// Closest candidate to an unrecognised name, or "" when nothing is close.
inline std::string suggest_key(const std::string& key, const std::vector<std::string>& candidates) {
  const std::string k = detail::canonical_key(key);
  std::string best;
  std::size_t best_len = 0;
  for (const auto& c : candidates) {
    const std::string cc = detail::canonical_key(c);
    if (cc == k) return c;
    if (!k.empty() && (cc.find(k) != std::string::npos || k.find(cc) != std::string::npos))
      if (best.empty() || cc.size() < best_len) {
        best = c;
        best_len = cc.size();
      }
  }
  if (!best.empty()) return best;
  std::size_t best_d = std::max<std::size_t>(2, k.size() / 3) + 1;
  for (const auto& c : candidates) {
    const auto d = detail::edit_distance(k, detail::canonical_key(c));
    if (d < best_d) {
      best_d = d;
      best = c;
    }
  }
  return best;
}

namespace detail {

/// Reads one block of the config, rejecting keys outside `allowed`.
class BlockReader {
 public:
  BlockReader(const nlohmann::json& j, std::string name, const std::string& text, std::vector<std::string> allowed)
      : j_(j), name_(std::move(name)), text_(text), allowed_(std::move(allowed)) {
    if (!j_.is_object()) throw ConfigError(where(name_) + "'" + name_ + "' must be a table");
    for (const auto& [key, value] : j_.items()) {
      if (std::find(allowed_.begin(), allowed_.end(), key) != allowed_.end()) continue;
      std::string msg = where(key) + "unknown key '" + prefix() + key + "'";
      const auto s = suggest_key(key, allowed_);
      if (!s.empty()) msg += "; did you mean '" + prefix() + s + "'?";
      throw ConfigError(msg);
    }
  }

  template <class T>
  void get(const std::string& key, T& out) const {
    if (!j_.contains(key)) return;
    try {
      out = j_.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
      throw ConfigError(where(key) + "key '" + prefix() + key + "' has the wrong type");
    }
  }

  std::string where(const std::string& key) const {
    const auto line = line_of(text_, key);
    return line ? "line " + std::to_string(line) + ": " : std::string();
  }

  std::string prefix() const { return name_.empty() ? std::string() : name_ + "."; }

 private:
  const nlohmann::json& j_;
  std::string name_;
  const std::string& text_;
  std::vector<std::string> allowed_;
};

inline void require_one_of(const std::string& key, const std::string& value, const std::vector<std::string>& options) {
  if (std::find(options.begin(), options.end(), value) != options.end()) return;
  std::string msg = "key '" + key + "' has unknown value '" + value + "'";
  const auto s = suggest_key(value, options);
  if (!s.empty()) msg += "; did you mean '" + s + "'?";
  throw ConfigError(msg);
}

inline void require_preset(const std::string& key, const std::string& name) {
  if (name.empty()) return;
  std::vector<std::string> names;
  for (const auto& [n, a] : architecture_presets()) names.push_back(n);
  if (architecture_presets().count(name)) return;
  std::string msg = "key '" + key + "' names unknown preset '" + name + "'";
  const auto s = suggest_key(name, names);
  if (!s.empty()) msg += "; did you mean '" + s + "'?";
  throw ConfigError(msg);
}

}  // namespace detail

/// Parse and validate a JSON run configuration; unknown keys are errors.
inline RunConfig parse_config(const std::string& text) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  RunConfig c;
  detail::BlockReader top(j, "", text, {"seed", "geometry", "solver", "network", "data", "output"});
  top.get("seed", c.seed);
  const nlohmann::json empty = nlohmann::json::object();
  auto block = [&](const char* name) -> const nlohmann::json& { return j.contains(name) ? j.at(name) : empty; };

  auto& g = c.geometry;
  detail::BlockReader gr(block("geometry"), "geometry", text,
                         {"problem", "grid", "sensors", "overlap", "length", "spacing", "subdomains",
                          "reference_spacing", "shapes", "lower_size", "upper_size", "offset", "permittivity",
                          "lower_n", "upper_n"});
  gr.get("problem", g.problem);
  gr.get("grid", g.grid);
  gr.get("sensors", g.sensors);
  gr.get("overlap", g.overlap);
  gr.get("length", g.length);
  gr.get("spacing", g.spacing);
  gr.get("subdomains", g.subdomains);
  gr.get("reference_spacing", g.reference_spacing);
  gr.get("shapes", g.shapes);
  gr.get("lower_size", g.lower_size);
  gr.get("upper_size", g.upper_size);
  gr.get("offset", g.offset);
  gr.get("permittivity", g.permittivity);
  gr.get("lower_n", g.lower_n);
  gr.get("upper_n", g.upper_n);

  auto& s = c.solver;
  detail::BlockReader sr(block("solver"), "solver", text,
                         {"scheme", "binding", "theta", "epsilon", "max_iterations", "initial_value", "transmission",
                          "instances", "divergence_window", "solve_order"});
  sr.get("scheme", s.scheme);
  sr.get("binding", s.binding);
  sr.get("theta", s.theta);
  sr.get("epsilon", s.epsilon);
  sr.get("max_iterations", s.max_iterations);
  sr.get("initial_value", s.initial_value);
  sr.get("transmission", s.transmission);
  sr.get("instances", s.instances);
  sr.get("divergence_window", s.divergence_window);
  sr.get("solve_order", s.solve_order);

  auto& n = c.network;
  detail::BlockReader nr(block("network"), "network", text,
                         {"preset", "global_preset", "branches", "trunk", "width", "depth", "global_width",
                          "global_depth", "fusion", "iterations", "batch_size", "lr_init", "lr_final",
                          "points_per_step", "log_interval", "loss"});
  nr.get("preset", n.preset);
  nr.get("global_preset", n.global_preset);
  nr.get("branches", n.branches);
  nr.get("trunk", n.trunk);
  nr.get("width", n.width);
  nr.get("depth", n.depth);
  nr.get("global_width", n.global_width);
  nr.get("global_depth", n.global_depth);
  nr.get("fusion", n.fusion);
  nr.get("iterations", n.iterations);
  nr.get("batch_size", n.batch_size);
  nr.get("lr_init", n.lr_init);
  nr.get("lr_final", n.lr_final);
  nr.get("points_per_step", n.points_per_step);
  nr.get("log_interval", n.log_interval);
  nr.get("loss", n.loss);

  auto& d = c.data;
  detail::BlockReader dr(block("data"), "data", text,
                         {"method", "count", "train_fraction", "correlation_length", "variance", "global"});
  dr.get("method", d.method);
  dr.get("count", d.count);
  dr.get("train_fraction", d.train_fraction);
  dr.get("correlation_length", d.correlation_length);
  dr.get("variance", d.variance);
  dr.get("global", d.global);

  auto& o = c.output;
  detail::BlockReader orr(block("output"), "output", text, {"dir", "vtk", "fields"});
  orr.get("dir", o.dir);
  orr.get("vtk", o.vtk);
  orr.get("fields", o.fields);

  detail::require_one_of("geometry.problem", g.problem, {"laplace_strip", "linear", "lshape", "tshape", "multimedium"});
  detail::require_one_of("solver.scheme", s.scheme, {"schwarz", "framework1", "framework2", "iteration_free"});
  detail::require_one_of("solver.binding", s.binding, {"classical", "neural"});
  detail::require_one_of("solver.transmission", s.transmission, {"dirichlet_dirichlet", "dirichlet_robin"});
  detail::require_one_of("network.fusion", n.fusion, {"product", "sum"});
  detail::require_one_of("network.loss", n.loss, {"ml2re", "mse"});
  detail::require_one_of("data.method", d.method, {"gp", "interpolation"});
  detail::require_preset("network.preset", n.preset);
  detail::require_preset("network.global_preset", n.global_preset);
  if (!(s.theta >= 0 && s.theta <= 1)) throw ConfigError("solver.theta must lie in [0, 1]");
  if (g.grid < 3) throw ConfigError("geometry.grid must be at least 3");
  if (g.sensors < 1) throw ConfigError("geometry.sensors must be at least 1");
  if (g.overlap < 0) throw ConfigError("geometry.overlap must be non-negative");
  if (d.count < 1) throw ConfigError("data.count must be at least 1");
  if (!(d.train_fraction > 0 && d.train_fraction <= 1)) throw ConfigError("data.train_fraction must lie in (0, 1]");
  if (!(n.lr_init >= 0 && n.lr_final > 0)) throw ConfigError("network learning rates must be positive");
  if (n.log_interval < 1) throw ConfigError("network.log_interval must be at least 1");
  if (n.batch_size < 1) throw ConfigError("network.batch_size must be at least 1");
  return c;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

inline nlohmann::json RunConfig::to_json() const {
  const auto& g = geometry;
  const auto& s = solver;
  const auto& n = network;
  const auto& d = data;
  return {{"seed", seed},
          {"geometry",
           {{"problem", g.problem},       {"grid", g.grid},
            {"sensors", g.sensors},       {"overlap", g.overlap},
            {"length", g.length},         {"spacing", g.spacing},
            {"subdomains", g.subdomains}, {"reference_spacing", g.reference_spacing},
            {"shapes", g.shapes},         {"lower_size", g.lower_size},
            {"upper_size", g.upper_size}, {"offset", g.offset},
            {"permittivity", g.permittivity}, {"lower_n", g.lower_n},
            {"upper_n", g.upper_n}}},
          {"solver",
           {{"scheme", s.scheme},
            {"binding", s.binding},
            {"theta", s.theta},
            {"epsilon", s.epsilon},
            {"max_iterations", s.max_iterations},
            {"initial_value", s.initial_value},
            {"transmission", s.transmission},
            {"instances", s.instances},
            {"divergence_window", s.divergence_window},
            {"solve_order", s.solve_order}}},
          {"network",
           {{"preset", n.preset},
            {"global_preset", n.global_preset},
            {"branches", n.branches},
            {"trunk", n.trunk},
            {"width", n.width},
            {"depth", n.depth},
            {"global_width", n.global_width},
            {"global_depth", n.global_depth},
            {"fusion", n.fusion},
            {"iterations", n.iterations},
            {"batch_size", n.batch_size},
            {"lr_init", n.lr_init},
            {"lr_final", n.lr_final},
            {"points_per_step", n.points_per_step},
            {"log_interval", n.log_interval},
            {"loss", n.loss}}},
          {"data",
           {{"method", d.method},
            {"count", d.count},
            {"train_fraction", d.train_fraction},
            {"correlation_length", d.correlation_length},
            {"variance", d.variance},
            {"global", d.global}}},
          {"output", {{"dir", output.dir}, {"vtk", output.vtk}, {"fields", output.fields}}}};
}

// ---------------------------------------------------------------------------
// metrics report

/// Build facts that do not vary between runs on the same toolchain.
inline nlohmann::json environment_stamp(int threads) {
  nlohmann::json e;
#if defined(__clang__)
  e["compiler"] = std::string("clang ") + __clang_version__;
#elif defined(__GNUC__)
  e["compiler"] = std::string("gcc ") + __VERSION__;
#else
  e["compiler"] = "unknown";
#endif
  e["eigen"] = std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) + "." +
               std::to_string(EIGEN_MINOR_VERSION);
  e["threads"] = threads;
  e["memory_note"] = "CPU run; no device memory is measured";
  return e;
}

struct MetricsReport {
  std::string command;
  std::string problem;
  nlohmann::json metrics = nlohmann::json::object();
  std::map<std::string, std::vector<double>> residual_histories;
  /// Wall-clock seconds per phase; the only non-deterministic part.
  std::map<std::string, double> timing;
  nlohmann::json environment = nlohmann::json::object();

  nlohmann::json to_json(bool with_timing = true) const {
    nlohmann::json j;
    j["command"] = command;
    j["problem"] = problem;
    j["metrics"] = metrics;
    j["residual_histories"] = residual_histories;
    j["environment"] = environment;
    if (with_timing) j["timing"] = timing;
    return j;
  }

  static MetricsReport from_json(const nlohmann::json& j) {
    MetricsReport r;
    try {
      r.command = j.at("command").get<std::string>();
      r.problem = j.at("problem").get<std::string>();
      r.metrics = j.at("metrics");
      r.residual_histories = j.at("residual_histories").get<std::map<std::string, std::vector<double>>>();
      r.environment = j.at("environment");
      if (j.contains("timing")) r.timing = j.at("timing").get<std::map<std::string, double>>();
    } catch (const nlohmann::json::exception& e) {
      throw FormatError(std::string("malformed report: ") + e.what());
    }
    return r;
  }

  std::string dump(bool with_timing = true) const { return to_json(with_timing).dump(2) + "\n"; }
};

inline void save_report(const MetricsReport& r, const std::filesystem::path& path) {
  std::filesystem::create_directories(path.parent_path());
  detail::write_file(path, r.dump());
}

inline MetricsReport load_report(const std::filesystem::path& path) {
  const auto text = detail::read_bytes(path);
  try {
    return MetricsReport::from_json(nlohmann::json::parse(text));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

/// Copy of a JSON document with every "timing" member removed (recursively).
inline nlohmann::json without_timing(nlohmann::json j) {
  if (j.is_object()) {
    j.erase("timing");
    for (auto& [k, v] : j.items()) v = without_timing(v);
  } else if (j.is_array()) {
    for (auto& v : j) v = without_timing(v);
  }
  return j;
}

// ---------------------------------------------------------------------------
// VTK legacy export

/// Legacy ASCII STRUCTURED_POINTS text of a nodal field (x varies fastest).
inline std::string vtk_text(const Field& f, const std::string& name, const std::string& title = "ddon field") {
  const auto& g = f.grid;
  std::array<int, 3> n{1, 1, 1};
  std::array<double, 3> origin{0, 0, 0}, spacing{1, 1, 1};
  for (int k = 0; k < g.dim(); ++k) {
    n[k] = g.n(k);
    origin[k] = g.box().lo[k];
    spacing[k] = g.spacing(k);
  }
  std::ostringstream os;
  os.precision(17);
  os << "# vtk DataFile Version 3.0\n" << title << "\nASCII\nDATASET STRUCTURED_POINTS\n";
  os << "DIMENSIONS " << n[0] << ' ' << n[1] << ' ' << n[2] << '\n';
  os << "ORIGIN " << origin[0] << ' ' << origin[1] << ' ' << origin[2] << '\n';
  os << "SPACING " << spacing[0] << ' ' << spacing[1] << ' ' << spacing[2] << '\n';
  os << "POINT_DATA " << g.size() << '\n';
  os << "SCALARS " << name << " double 1\nLOOKUP_TABLE default\n";
  for (int k = 0; k < n[2]; ++k)
    for (int j = 0; j < n[1]; ++j)
      for (int i = 0; i < n[0]; ++i) os << f.at({i, j, k}) << '\n';
  return os.str();
}

inline void write_vtk(const Field& f, const std::filesystem::path& path, const std::string& name = "u") {
  if (!path.parent_path().empty()) std::filesystem::create_directories(path.parent_path());
  detail::write_file(path, vtk_text(f, name));
}

struct VtkInfo {
  std::array<int, 3> dimensions{1, 1, 1};
  std::array<double, 3> origin{0, 0, 0};
  std::array<double, 3> spacing{1, 1, 1};
  std::string scalar_name;
  std::vector<double> values;
};

/// Structural check of a legacy STRUCTURED_POINTS file; throws FormatError on the first violation.
inline VtkInfo validate_vtk(const std::filesystem::path& path) {
  std::istringstream in(detail::read_bytes(path));
  std::string line;
  auto next = [&](const char* what) {
    if (!std::getline(in, line)) throw FormatError(path.string() + ": missing " + what);
    return line;
  };
  if (next("header") != "# vtk DataFile Version 3.0") throw FormatError(path.string() + ": bad header line");
  next("title");
  if (next("format") != "ASCII") throw FormatError(path.string() + ": only ASCII files are accepted");
  if (next("dataset") != "DATASET STRUCTURED_POINTS") throw FormatError(path.string() + ": not STRUCTURED_POINTS");
  VtkInfo info;
  std::string tag;
  {
    std::istringstream ls(next("DIMENSIONS"));
    if (!(ls >> tag >> info.dimensions[0] >> info.dimensions[1] >> info.dimensions[2]) || tag != "DIMENSIONS")
      throw FormatError(path.string() + ": bad DIMENSIONS line");
  }
  {
    std::istringstream ls(next("ORIGIN"));
    if (!(ls >> tag >> info.origin[0] >> info.origin[1] >> info.origin[2]) || tag != "ORIGIN")
      throw FormatError(path.string() + ": bad ORIGIN line");
  }
  {
    std::istringstream ls(next("SPACING"));
    if (!(ls >> tag >> info.spacing[0] >> info.spacing[1] >> info.spacing[2]) || tag != "SPACING")
      throw FormatError(path.string() + ": bad SPACING line");
  }
  std::size_t expect = 1;
  for (int k = 0; k < 3; ++k) {
    if (info.dimensions[k] < 1) throw FormatError(path.string() + ": non-positive dimension");
    if (!(info.spacing[k] > 0) || !std::isfinite(info.spacing[k]) || !std::isfinite(info.origin[k]))
      throw FormatError(path.string() + ": spacing must be positive and finite");
    expect *= static_cast<std::size_t>(info.dimensions[k]);
  }
  std::size_t count = 0;
  {
    std::istringstream ls(next("POINT_DATA"));
    if (!(ls >> tag >> count) || tag != "POINT_DATA") throw FormatError(path.string() + ": bad POINT_DATA line");
  }
  if (count != expect)
    throw FormatError(path.string() + ": POINT_DATA " + std::to_string(count) + " does not match " +
                      std::to_string(expect) + " nodes");
  {
    std::istringstream ls(next("SCALARS"));
    std::string type;
    if (!(ls >> tag >> info.scalar_name >> type) || tag != "SCALARS") throw FormatError(path.string() + ": bad SCALARS line");
    if (type != "double" && type != "float") throw FormatError(path.string() + ": unsupported scalar type " + type);
  }
  if (next("LOOKUP_TABLE").rfind("LOOKUP_TABLE", 0) != 0) throw FormatError(path.string() + ": missing LOOKUP_TABLE");
  double v;
  while (in >> v) {
    if (!std::isfinite(v)) throw FormatError(path.string() + ": non-finite scalar");
    info.values.push_back(v);
  }
  if (!in.eof()) throw FormatError(path.string() + ": unparsable scalar after " + std::to_string(info.values.size()));
  if (info.values.size() != count)
    throw FormatError(path.string() + ": " + std::to_string(info.values.size()) + " scalars for " +
                      std::to_string(count) + " nodes");
  return info;
}

// ---------------------------------------------------------------------------
// field files

inline void save_fields(const std::vector<Field>& fields, const std::vector<std::string>& labels,
                        const std::filesystem::path& dir) {
  if (fields.size() != labels.size()) throw ShapeError("one label per field required");
  std::filesystem::create_directories(dir);
  nlohmann::json index = nlohmann::json::array();
  for (std::size_t i = 0; i < fields.size(); ++i) {
    const auto& g = fields[i].grid;
    std::vector<std::uint64_t> shape;
    for (int k = 0; k < g.dim(); ++k) shape.push_back(static_cast<std::uint64_t>(g.n(k)));
    const std::string file = labels[i] + ".ddat";
    detail::write_file(dir / file, detail::encode_blob(shape, fields[i].values));
    index.push_back({{"label", labels[i]}, {"file", file}, {"box", detail::box_json(g.box())}});
  }
  detail::write_file(dir / "fields.json", index.dump(2) + "\n");
}

inline std::vector<std::pair<std::string, Field>> load_fields(const std::filesystem::path& dir) {
  nlohmann::json index;
  try {
    index = nlohmann::json::parse(detail::read_bytes(dir / "fields.json"));
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError((dir / "fields.json").string() + ": " + e.what());
  }
  std::vector<std::pair<std::string, Field>> out;
  for (const auto& e : index) {
    std::vector<std::uint64_t> shape;
    const auto file = e.at("file").get<std::string>();
    auto values = detail::decode_blob(detail::read_bytes(dir / file), shape, file);
    const Box box = detail::box_from_json(e.at("box"));
    if (static_cast<int>(shape.size()) != box.dim) throw FormatError(file + ": shape rank does not match box");
    GridCounts n{1, 1, 1};
    for (int k = 0; k < box.dim; ++k) n[k] = static_cast<int>(shape[k]);
    out.emplace_back(e.at("label").get<std::string>(), Field(StructuredGrid(box, n), std::move(values)));
  }
  return out;
}

// ---------------------------------------------------------------------------
// commands

struct CliContext {
  RunConfig config;
  std::filesystem::path out;
  int threads = 1;
  std::ostream* log = &std::cout;

  std::filesystem::path root() const { return out.empty() ? std::filesystem::path(config.output.dir) : out; }
  std::ostream& os() const { return *log; }
};

namespace detail {

using clock = std::chrono::steady_clock;

inline double seconds_since(clock::time_point t) {
  return std::chrono::duration<double>(clock::now() - t).count();
}

inline GpSpec gp_of(const RunConfig& c) {
  GpSpec gp;
  gp.correlation_length = c.data.correlation_length;
  gp.variance = c.data.variance;
  return gp;
}

inline std::uint64_t label_hash(const std::string& s) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : s) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

inline bool is_resistance(const RunConfig& c) { return c.geometry.problem == "lshape" || c.geometry.problem == "tshape"; }

inline ShapeKind shape_kind(const RunConfig& c) { return c.geometry.problem == "tshape" ? ShapeKind::T : ShapeKind::L; }

inline LaplaceStrip strip_of(const RunConfig& c) { return laplace_strip(c.geometry.grid, c.geometry.sensors, gp_of(c)); }

/// Whole-strip target whose branches read both Dirichlet ends.
inline SubdomainTarget strip_global_target(const LaplaceStrip& s, int sensors) {
  auto t = s.global_input_halves(sensors).front();
  t.label = "global";
  t.box = s.base.box;
  t.n = s.global_n;
  t.trunk_map = AffineMap::centering(t.box);
  return t;
}

inline std::vector<std::string> resistance_labels(ShapeKind k) {
  return decompose_shape(k, ShapeParams{2, 2, 2, 5, 6, 3}).decomposition.geometry.labels;
}

inline DdmSchedule schedule_of(const RunConfig& c, int threads) {
  DdmSchedule s;
  const auto& sc = c.solver;
  s.scheme = sc.scheme == "schwarz"      ? Scheme::Schwarz
             : sc.scheme == "framework1" ? Scheme::Framework1
             : sc.scheme == "framework2" ? Scheme::Framework2
                                         : Scheme::IterationFree;
  s.theta = sc.theta;
  s.epsilon = sc.epsilon;
  s.max_iterations = sc.max_iterations;
  s.initial_value = sc.initial_value;
  s.transmission = sc.transmission == "dirichlet_dirichlet" ? TransmissionRule::dirichlet_dirichlet()
                                                            : TransmissionRule::dirichlet_robin();
  s.threads = static_cast<std::size_t>(std::max(1, threads));
  s.solve_order = sc.solve_order;
  s.divergence_window = sc.divergence_window;
  return s;
}

inline DdmResult run_scheme(const SolverList& solvers, const DdmSchedule& s) {
  switch (s.scheme) {
    case Scheme::Schwarz: return run_schwarz(solvers, s);
    case Scheme::Framework1: return run_framework1(solvers, s);
    case Scheme::Framework2: return run_framework2(solvers, s);
    case Scheme::IterationFree: break;
  }
  throw ConfigError("the iteration-free scheme needs neural subdomain solvers");
}

inline std::filesystem::path checkpoint_path(const CliContext& ctx, const std::string& label) {
  return ctx.root() / "checkpoints" / (label + ".ckpt");
}

inline std::shared_ptr<const OperatorNet> load_net(const CliContext& ctx, const std::string& label) {
  const auto p = checkpoint_path(ctx, label);
  if (!std::filesystem::exists(p)) throw CheckpointNotFoundError("no checkpoint at '" + p.string() + "'");
  return std::make_shared<const OperatorNet>(load_checkpoint(p));
}

inline NetArchitecture architecture_for(const RunConfig& c, const Dataset& d, const std::string& label) {
  const auto& n = c.network;
  const auto widths = d.branch_widths();
  const bool global = label == "global";
  const std::string preset = global ? n.global_preset : n.preset;
  NetArchitecture a;
  if (!preset.empty()) {
    a = architecture_preset(preset);
  } else if (!global && !n.branches.empty()) {
    a.branches = n.branches;
    a.trunk = n.trunk;
  } else {
    const int w = global ? n.global_width : n.width;
    const int depth = global ? n.global_depth : n.depth;
    for (auto bw : widths) a.branches.push_back(layers(static_cast<int>(bw), w, depth));
    a.trunk = layers(static_cast<int>(d.trunk_dim()), w, depth);
  }
  a.fusion = fusion_from_string(n.fusion);
  a.validate();
  if (a.branches.size() != widths.size())
    throw ShapeError(label + ": architecture has " + std::to_string(a.branches.size()) + " branches, dataset has " +
                     std::to_string(widths.size()));
  for (std::size_t b = 0; b < widths.size(); ++b)
    if (a.branches[b].front() != static_cast<int>(widths[b]))
      throw ShapeError(label + ": branch " + std::to_string(b) + " takes " + std::to_string(a.branches[b].front()) +
                       " inputs, dataset provides " + std::to_string(widths[b]));
  if (a.trunk.front() != static_cast<int>(d.trunk_dim()))
    throw ShapeError(label + ": trunk takes " + std::to_string(a.trunk.front()) + " coordinates, dataset has " +
                     std::to_string(d.trunk_dim()));
  return a;
}

/// Strip halves extended by `overlap` on each side of the cut, aligned with the global grid.
inline std::vector<std::pair<Box, GridCounts>> strip_boxes(const LaplaceStrip& s, double overlap) {
  const double h = s.base.box.extent(1) / (s.global_n[1] - 1);
  const double steps = overlap / h;
  if (std::abs(steps - std::round(steps)) > 1e-9) throw ConfigError("geometry.overlap must be a multiple of the grid spacing");
  const int m = static_cast<int>(std::round(steps));
  const int half = (s.global_n[1] - 1) / 2;
  const double cut = s.base.box.lo[1] + half * h;
  if (m >= half) throw ConfigError("geometry.overlap is wider than a half strip");
  const double x0 = s.base.box.lo[0], x1 = s.base.box.hi[0];
  const Box lo = make_box({x0, s.base.box.lo[1]}, {x1, cut + m * h});
  const Box hi = make_box({x0, cut - m * h}, {x1, s.base.box.hi[1]});
  return {{lo, {s.global_n[0], half + m + 1, 1}}, {hi, {s.global_n[0], half + m + 1, 1}}};
}

/// Test instance `i` of the strip and its monolithic solution.
inline std::pair<PdeProblem, Field> strip_instance(const LaplaceStrip& s, std::uint64_t seed, std::size_t i) {
  Rng rng(derive_seed(seed, i));
  auto p = s.generator()(i, rng);
  auto u = solve_elliptic(p, s.global_n);
  return {std::move(p), std::move(u)};
}

inline SolverList strip_classical(const LaplaceStrip& s, const PdeProblem& p, double overlap) {
  SolverList out;
  const char* labels[2] = {"lower", "upper"};
  const auto boxes = strip_boxes(s, overlap);
  for (std::size_t k = 0; k < 2; ++k) {
    const auto sp = subdomain_problem(p, s.global_n, boxes[k].first, boxes[k].second);
    out.push_back(std::make_shared<ClassicalSolver>(labels[k], sp.problem, boxes[k].second, sp.open));
  }
  return out;
}

inline std::vector<std::shared_ptr<NeuralSolver>> strip_neural(const LaplaceStrip& s, const Field& oracle,
                                                               const std::array<std::shared_ptr<const OperatorNet>, 2>& nets,
                                                               int sensors) {
  std::vector<std::shared_ptr<NeuralSolver>> out;
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& h = s.halves[k];
    const Face cut{1, k == 0 ? Side::High : Side::Low};
    out.push_back(std::make_shared<NeuralSolver>(
        h.label, nets[k], StructuredGrid(h.box, h.n), std::vector<OpenFace>{{cut, BcKind::Robin, 1.0, 1.0}},
        std::vector<BranchSource>{BranchSource::constant(read_sensors(oracle, *h.branches[0].sensor)),
                                  BranchSource::face(0, {sensors, 1, 1})},
        h.trunk_map));
  }
  return out;
}

inline std::vector<std::shared_ptr<NeuralSolver>> strip_iteration_free(
    const LaplaceStrip& s, const std::array<std::shared_ptr<const OperatorNet>, 2>& nets, int sensors,
    std::vector<std::vector<std::vector<double>>>& inputs, const Field& oracle) {
  const auto targets = s.global_input_halves(sensors);
  std::vector<std::shared_ptr<NeuralSolver>> out;
  inputs.clear();
  for (std::size_t k = 0; k < 2; ++k) {
    const auto& t = targets[k];
    std::vector<std::vector<double>> in;
    std::vector<BranchSource> src;
    for (const auto& b : t.branches) {
      in.push_back(read_sensors(oracle, *b.sensor));
      src.push_back(BranchSource::constant(in.back()));
    }
    inputs.push_back(in);
    out.push_back(std::make_shared<NeuralSolver>(t.label, nets[k], StructuredGrid(t.box, t.n), std::vector<OpenFace>{},
                                                 src, t.trunk_map));
  }
  return out;
}

/// Direct prediction: each net fed with the exact traces of the oracle.
inline double strip_direct_prediction(const std::vector<std::shared_ptr<NeuralSolver>>& solvers, const LaplaceStrip& s,
                                      const Field& oracle) {
  std::vector<Field> pred;
  for (std::size_t k = 0; k < solvers.size(); ++k) {
    std::vector<std::vector<double>> in;
    for (const auto& b : s.halves[k].branches) in.push_back(read_sensors(oracle, *b.sensor));
    pred.push_back(solvers[k]->predict(in));
  }
  return compare_fields(pred, oracle).ml2re;
}

inline PdeProblem linear_problem(double length) {
  PdeProblem p;
  p.box = make_box({0, 0}, {length, 1});
  p.bcs = {BoundaryCondition::dirichlet({0, Side::Low}, 0.0), BoundaryCondition::dirichlet({0, Side::High}, length),
           BoundaryCondition::neumann({1, Side::Low}), BoundaryCondition::neumann({1, Side::High})};
  return p;
}

inline int nodes_for(double extent, double h, const std::string& what) {
  const double m = extent / h;
  if (std::abs(m - std::round(m)) > 1e-9) throw ConfigError(what + " is not a multiple of geometry.spacing");
  return static_cast<int>(std::round(m)) + 1;
}

struct LinearSetup {
  PdeProblem problem;
  GridCounts global_n;
  SolverList solvers;
  Field exact;
};

inline LinearSetup linear_setup(const RunConfig& c) {
  const auto& g = c.geometry;
  const double h = g.spacing > 0 ? g.spacing : 0.0625;
  LinearSetup s;
  s.problem = linear_problem(g.length);
  s.global_n = {nodes_for(g.length, h, "geometry.length"), nodes_for(1.0, h, "the unit height"), 1};
  auto subs = g.subdomains;
  if (subs.empty()) subs = {{0.0, g.length / 2}, {g.length / 2, g.length}};
  for (std::size_t k = 0; k < subs.size(); ++k) {
    const Box b = make_box({subs[k][0], 0}, {subs[k][1], 1});
    const GridCounts n{nodes_for(subs[k][1] - subs[k][0], h, "subdomain " + std::to_string(k)), s.global_n[1], 1};
    const auto sp = subdomain_problem(s.problem, s.global_n, b, n);
    s.solvers.push_back(std::make_shared<ClassicalSolver>("D" + std::to_string(k + 1), sp.problem, n, sp.open));
  }
  s.exact = Field(StructuredGrid(s.problem.box, s.global_n));
  for (std::size_t i = 0; i < s.exact.values.size(); ++i) s.exact.values[i] = s.exact.grid.node(i)[0];
  return s;
}

struct MultimediumSetup {
  MaterialStack stack;
  GridCounts nl, nu;
  SolverList solvers;
};

inline MultimediumSetup multimedium_setup(const RunConfig& c) {
  const auto& g = c.geometry;
  MultimediumSetup s;
  s.stack = MaterialStack::cubes(g.lower_size, g.upper_size, g.offset[0], g.offset[1], g.permittivity[0],
                                 g.permittivity[1]);
  s.nl = {g.lower_n, g.lower_n, g.lower_n};
  s.nu = {g.upper_n, g.upper_n, g.upper_n};
  const auto blocks = multimedium_blocks(s.stack, s.nl, s.nu);
  SolverOptions opts;
  opts.default_neumann = true;
  auto to_problem = [](const Block& b) {
    PdeProblem p;
    p.box = b.grid.box();
    p.diffusion = b.diffusion;
    p.source = b.source;
    p.bcs = b.bcs;
    return p;
  };
  const Box footprint = intersect(s.stack.lower, s.stack.upper);
  s.solvers = {std::make_shared<ClassicalSolver>("lower", to_problem(blocks[0]), s.nl,
                                                 std::vector<OpenBoundary>{{{2, Side::High}, footprint}}, opts),
               std::make_shared<ClassicalSolver>("upper", to_problem(blocks[1]), s.nu,
                                                 std::vector<OpenBoundary>{{{2, Side::Low}}}, opts)};
  return s;
}

inline nlohmann::json mean_of(const std::vector<double>& v) {
  if (v.empty()) return nullptr;
  double s = 0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline ResistanceSetup resistance_setup(const CliContext& ctx, Binding binding) {
  const auto& c = ctx.config;
  ResistanceSetup r;
  r.shape = shape_kind(c);
  r.binding = binding;
  r.spacing = c.geometry.spacing > 0 ? c.geometry.spacing : 0.25;
  r.reference_spacing = c.geometry.reference_spacing;
  r.neural_counts = {c.geometry.grid, c.geometry.grid, c.geometry.grid};
  r.sensors = {c.geometry.sensors, c.geometry.sensors, c.geometry.sensors};
  r.schedule = schedule_of(c, ctx.threads);
  if (binding == Binding::Neural)
    for (const auto& l : resistance_labels(r.shape)) r.nets[l] = load_net(ctx, l);
  return r;
}

inline void emit_fields(const CliContext& ctx, const std::filesystem::path& dir, const std::vector<Field>& fields,
                        const std::vector<std::string>& labels) {
  const auto& o = ctx.config.output;
  if (o.fields) save_fields(fields, labels, dir / "fields");
  if (o.vtk)
    for (std::size_t i = 0; i < fields.size(); ++i) write_vtk(fields[i], dir / "vtk" / (labels[i] + ".vtk"));
}

inline std::vector<std::string> labels_of(const DdmResult& r, const SolverList& s) {
  std::vector<std::string> l;
  for (std::size_t i = 0; i < r.fields.size(); ++i) l.push_back(s[i]->label());
  return l;
}

}  // namespace detail

/// Generate subdomain training data under <out>/data/<label>; returns the fingerprints by label.
inline std::map<std::string, std::string> cli_gen_data(const CliContext& ctx) {
  const auto& c = ctx.config;
  const auto t0 = detail::clock::now();
  std::vector<Dataset> sets;
  const auto& g = c.geometry;
  if (g.problem == "laplace_strip") {
    const auto strip = detail::strip_of(c);
    const bool iter_free = c.solver.scheme == "iteration_free";
    if (iter_free && c.data.method != "interpolation")
      throw ConfigError("iteration-free subnets take global inputs; set data.method to \"interpolation\"");
    if (c.data.method == "interpolation") {
      auto targets = iter_free ? strip.global_input_halves(g.sensors) : strip.halves;
      if (c.data.global) targets.push_back(detail::strip_global_target(strip, g.sensors));
      sets = gen_dataset_interpolation(strip.generator(), strip.global_n, targets, c.data.count,
                                       derive_seed(c.seed, 0xd0), ctx.threads);
      for (std::size_t k = 0; k < sets.size(); ++k) sets[k].manifest["label"] = targets[k].label;
    } else {
      for (std::size_t k = 0; k < 2; ++k) {
        const auto& h = strip.halves[k];
        GpDatasetSpec spec;
        spec.label = h.label;
        spec.problem.box = h.box;
        spec.problem.bcs = strip.base.bcs;
        spec.n = h.n;
        spec.trunk_map = h.trunk_map;
        const Side own = k == 0 ? Side::Low : Side::High;
        const Side cut = k == 0 ? Side::High : Side::Low;
        const GridCounts sc{g.sensors, 1, 1};
        spec.open = {{{1, own}, BcKind::Dirichlet, 1.0, 1.0, sc}, {{1, cut}, BcKind::Robin, 1.0, 1.0, sc}};
        spec.gp = detail::gp_of(c);
        spec.count = c.data.count;
        spec.seed = derive_seed(c.seed, 0xd1 + k);
        spec.threads = ctx.threads;
        sets.push_back(gen_dataset_gp(spec));
        sets.back().manifest["label"] = h.label;
      }
      if (c.data.global) {
        auto gl = gen_dataset_interpolation(strip.generator(), strip.global_n,
                                            {detail::strip_global_target(strip, g.sensors)}, c.data.count,
                                            derive_seed(c.seed, 0xd0), ctx.threads);
        gl[0].manifest["label"] = "global";
        sets.push_back(std::move(gl[0]));
      }
    }
  } else if (detail::is_resistance(c)) {
    const auto kind = detail::shape_kind(c);
    const auto labels = detail::resistance_labels(kind);
    for (std::size_t b = 0; b < labels.size(); ++b) {
      auto spec = resistance_subdomain_spec(kind, labels[b], {g.grid, g.grid, g.grid},
                                            {g.sensors, g.sensors, g.sensors}, detail::gp_of(c), c.data.count,
                                            derive_seed(c.seed, 0xd2 + b));
      spec.threads = ctx.threads;
      sets.push_back(gen_dataset_gp(spec));
      sets.back().manifest["label"] = labels[b];
    }
  } else {
    throw ConfigError("problem '" + g.problem + "' has no learned subdomains");
  }
  std::map<std::string, std::string> prints;
  for (auto& d : sets) {
    const auto label = d.manifest.at("label").get<std::string>();
    d.manifest["config_seed"] = c.seed;
    save_dataset(d, ctx.root() / "data" / label);
    prints[label] = d.fingerprint();
    ctx.os() << "dataset " << label << " count " << d.size() << " fingerprint " << prints[label] << '\n';
  }
  ctx.os() << "data phase " << detail::seconds_since(t0) << " s\n";
  return prints;
}

struct TrainSummary {
  std::string label;
  std::size_t parameter_count = 0;
  double final_test_ml2re = 0;
  std::vector<LossRecord> history;
};

/// Train one net per dataset under <out>/data; checkpoints and loss histories go to <out>/checkpoints.
inline std::vector<TrainSummary> cli_train(const CliContext& ctx) {
  const auto& c = ctx.config;
  const auto& n = c.network;
  const auto data_dir = ctx.root() / "data";
  if (!std::filesystem::is_directory(data_dir)) throw IoError("no datasets under '" + data_dir.string() + "'; run gen-data first");
  std::vector<std::string> labels;
  for (const auto& e : std::filesystem::directory_iterator(data_dir))
    if (e.is_directory()) labels.push_back(e.path().filename().string());
  std::sort(labels.begin(), labels.end());
  if (labels.empty()) throw IoError("no datasets under '" + data_dir.string() + "'");
  std::vector<TrainSummary> out;
  for (const auto& label : labels) {
    const auto d = load_dataset(data_dir / label);
    const auto arch = detail::architecture_for(c, d, label);
    const auto split = split_dataset(d, derive_seed(c.seed, 0x7a), c.data.train_fraction);
    const auto seed = derive_seed(c.seed, detail::label_hash(label));
    TrainConfig tc;
    tc.batch_size = n.batch_size;
    tc.lr_init = n.lr_init;
    tc.iterations = n.iterations;
    tc.lr_decay_per_step = n.iterations > 0 ? std::pow(n.lr_final / std::max(n.lr_init, 1e-300), 1.0 / static_cast<double>(n.iterations)) : 1.0;
    tc.lr_decay_per_step = std::min(1.0, tc.lr_decay_per_step);
    tc.seed = derive_seed(seed, 0x7c);
    tc.loss = n.loss == "mse" ? LossKind::Mse : LossKind::Ml2re;
    tc.log_interval = n.log_interval;
    tc.points_per_step = n.points_per_step;
    const auto t0 = detail::clock::now();
    auto result = train(OperatorNet::create(arch, seed), split.train.samples, tc, split.test.samples,
                        [&](const LossRecord& r) {
                          ctx.os() << label << " step " << r.step << " train " << r.train_loss << " test " << r.test_loss
                                   << '\n';
                        });
    const double secs = detail::seconds_since(t0);
    result.net.metadata = {{"label", label}, {"dataset_fingerprint", d.fingerprint()}, {"seed", seed}};
    const auto& eval_set = split.test.samples.empty() ? split.train.samples : split.test.samples;
    TrainSummary s{label, result.net.parameter_count(), evaluate_loss(result.net, eval_set, LossKind::Ml2re), result.history};
    const auto ckpt = detail::checkpoint_path(ctx, label);
    std::filesystem::create_directories(ckpt.parent_path());
    save_checkpoint(result.net, ckpt);
    nlohmann::json h;
    h["label"] = label;
    h["parameter_count"] = s.parameter_count;
    h["final_test_ml2re"] = s.final_test_ml2re;
    h["test_samples"] = split.test.size();
    h["records"] = nlohmann::json::array();
    for (const auto& r : result.history)
      h["records"].push_back({{"step", r.step}, {"train", r.train_loss}, {"test", r.test_loss}});
    h["timing"] = {{"train", secs}};
    detail::write_file(ckpt.parent_path() / (label + ".loss.json"), h.dump(2) + "\n");
    ctx.os() << "checkpoint " << label << " parameters " << s.parameter_count << " test_ml2re " << s.final_test_ml2re
             << " (" << secs << " s)\n";
    out.push_back(std::move(s));
  }
  return out;
}

namespace detail {

/// Per-instance scheme run on the strip under the configured binding.
inline nlohmann::json strip_solve(const CliContext& ctx, MetricsReport& rep, const std::string& variant,
                                  const DdmSchedule& sched, bool neural, double overlap, bool keep_fields) {
  const auto& c = ctx.config;
  const auto strip = strip_of(c);
  std::array<std::shared_ptr<const OperatorNet>, 2> nets;
  if (neural) {
    if (sched.scheme != Scheme::Framework2 && sched.scheme != Scheme::IterationFree)
      throw ConfigError("neural strip subnets support framework2 and iteration_free");
    nets = {load_net(ctx, "lower"), load_net(ctx, "upper")};
  }
  std::vector<double> ml2re, mae, dp, gap, its;
  std::size_t converged = 0;
  double solve_secs = 0;
  const auto seed = derive_seed(c.seed, 0x5e);
  for (std::size_t i = 0; i < c.solver.instances; ++i) {
    const auto [p, oracle] = strip_instance(strip, seed, i);
    DdmResult r;
    SolverList list;
    const auto t0 = clock::now();
    if (!neural) {
      list = strip_classical(strip, p, overlap);
      r = run_scheme(list, sched);
    } else if (sched.scheme == Scheme::IterationFree) {
      std::vector<std::vector<std::vector<double>>> inputs;
      const auto s = strip_iteration_free(strip, nets, c.geometry.sensors, inputs, oracle);
      r = run_iteration_free(s, inputs);
      list.assign(s.begin(), s.end());
    } else {
      const auto s = strip_neural(strip, oracle, nets, c.geometry.sensors);
      list.assign(s.begin(), s.end());
      r = run_framework2(list, sched);
      dp.push_back(strip_direct_prediction(s, strip, oracle));
    }
    solve_secs += seconds_since(t0);
    const auto e = compare_fields(r.fields, oracle);
    ml2re.push_back(e.ml2re);
    mae.push_back(e.mae);
    its.push_back(static_cast<double>(r.iterations_used));
    converged += r.converged ? 1 : 0;
    if (overlap == 0) gap.push_back(interface_gap(r.fields[0], r.fields[1]));
    if (i == 0) {
      rep.residual_histories[variant] = r.residual_history;
      if (keep_fields) {
        auto labels = labels_of(r, list);
        auto fields = r.fields;
        fields.push_back(oracle);
        labels.push_back("oracle");
        emit_fields(ctx, ctx.root() / "solve", fields, labels);
      }
    }
  }
  rep.timing[variant + "_solve"] = solve_secs;
  nlohmann::json m;
  m["scheme"] = to_string(sched.scheme);
  m["binding"] = neural ? "neural" : "classical";
  m["instances"] = c.solver.instances;
  m["ml2re"] = ml2re;
  m["ml2re_mean"] = mean_of(ml2re);
  m["mae_mean"] = mean_of(mae);
  m["iterations"] = its;
  m["iterations_mean"] = mean_of(its);
  m["converged"] = converged;
  if (!gap.empty()) m["interface_gap_max"] = *std::max_element(gap.begin(), gap.end());
  if (!dp.empty()) {
    m["direct_prediction_ml2re"] = dp;
    m["direct_prediction_ml2re_mean"] = mean_of(dp);
  }
  if (neural) {
    std::size_t params = 0;
    for (const auto& n : nets) params = std::max(params, n->parameter_count());
    m["subnet_parameter_count_max"] = params;
  }
  return m;
}

inline nlohmann::json field_metrics(const DdmResult& r, std::span<const Field> ref) {
  const auto e = compare_fields(r.fields, ref);
  return {{"ml2re", e.ml2re},         {"mae", e.mae}, {"max_abs", e.max_abs}, {"iterations", r.iterations_used},
          {"converged", r.converged}};
}

}  // namespace detail

/// Run the configured scheme and write <out>/solve/report.json (plus fields and optional VTK).
inline MetricsReport cli_solve(const CliContext& ctx) {
  const auto& c = ctx.config;
  const auto& g = c.geometry;
  MetricsReport rep;
  rep.command = "solve";
  rep.problem = g.problem;
  rep.environment = environment_stamp(ctx.threads);
  const auto sched = detail::schedule_of(c, ctx.threads);
  const bool neural = c.solver.binding == "neural";
  if (g.problem == "laplace_strip") {
    rep.metrics = detail::strip_solve(ctx, rep, c.solver.scheme, sched, neural, neural ? 0.0 : g.overlap, true);
  } else if (g.problem == "linear") {
    if (neural) throw ConfigError("problem 'linear' only has classical subdomain solvers");
    auto s = detail::linear_setup(c);
    auto t0 = detail::clock::now();
    const auto oracle = solve_elliptic(s.problem, s.global_n);
    rep.timing["monolithic"] = detail::seconds_since(t0);
    t0 = detail::clock::now();
    const auto r = detail::run_scheme(s.solvers, sched);
    rep.timing["ddm"] = detail::seconds_since(t0);
    rep.metrics = detail::field_metrics(r, std::span<const Field>(&oracle, 1));
    rep.metrics["scheme"] = c.solver.scheme;
    rep.metrics["exact_ml2re"] = compare_fields(r.fields, s.exact).ml2re;
    rep.residual_histories[c.solver.scheme] = r.residual_history;
    detail::emit_fields(ctx, ctx.root() / "solve", r.fields, detail::labels_of(r, s.solvers));
  } else if (detail::is_resistance(c)) {
    if (c.solver.scheme != "framework2") throw ConfigError("resistance shapes are coupled with framework2");
    const auto setup = detail::resistance_setup(ctx, neural ? Binding::Neural : Binding::Classical);
    const auto rr = resistance_experiment(sample_shapes(g.shapes, derive_seed(c.seed, 0x5a)), setup);
    rep.metrics = rr.to_json(false);
    rep.metrics["binding"] = c.solver.binding;
    rep.timing["reference"] = rr.seconds_reference;
    rep.timing["solve"] = rr.seconds_solve;
  } else {
    if (neural) throw ConfigError("problem 'multimedium' is solved with classical subdomain solvers here");
    if (c.solver.scheme != "framework2") throw ConfigError("the multimedium stack is coupled with framework2");
    auto s = detail::multimedium_setup(c);
    auto t0 = detail::clock::now();
    const auto [lo, up] = solve_multimedium(s.stack, s.nl, s.nu);
    rep.timing["monolithic"] = detail::seconds_since(t0);
    t0 = detail::clock::now();
    const auto r = run_framework2(s.solvers, sched);
    rep.timing["ddm"] = detail::seconds_since(t0);
    const std::vector<Field> ref{lo, up};
    rep.metrics = detail::field_metrics(r, ref);
    rep.residual_histories["framework2"] = r.residual_history;
    detail::emit_fields(ctx, ctx.root() / "solve", r.fields, detail::labels_of(r, s.solvers));
  }
  const auto path = ctx.root() / "solve" / "report.json";
  save_report(rep, path);
  ctx.os() << "report " << path.string() << '\n';
  return rep;
}

/// Matched non-DDM and DDM variants on the same instances; writes <out>/bench/report.json.
inline MetricsReport cli_bench(const CliContext& ctx) {
  const auto& c = ctx.config;
  const auto& g = c.geometry;
  MetricsReport rep;
  rep.command = "bench";
  rep.problem = g.problem;
  rep.environment = environment_stamp(ctx.threads);
  auto sched = detail::schedule_of(c, ctx.threads);
  nlohmann::json variants = nlohmann::json::object();
  if (g.problem == "linear") {
    auto s = detail::linear_setup(c);
    auto t0 = detail::clock::now();
    const auto mono = solve_elliptic(s.problem, s.global_n);
    rep.timing["monolithic"] = detail::seconds_since(t0);
    variants["monolithic"] = {{"ml2re", compare_fields(std::span<const Field>(&mono, 1), s.exact).ml2re},
                              {"mae", compare_fields(std::span<const Field>(&mono, 1), s.exact).mae}};
    t0 = detail::clock::now();
    const auto r = detail::run_scheme(s.solvers, sched);
    rep.timing["ddm"] = detail::seconds_since(t0);
    variants["ddm"] = detail::field_metrics(r, std::span<const Field>(&s.exact, 1));
    variants["ddm"]["scheme"] = c.solver.scheme;
    rep.residual_histories["ddm"] = r.residual_history;
  } else if (g.problem == "laplace_strip") {
    if (c.solver.binding == "classical") {
      const auto strip = detail::strip_of(c);
      const double h = strip.base.box.extent(1) / (strip.global_n[1] - 1);
      const double overlap = g.overlap > 0 ? g.overlap : h * std::max(1.0, std::round(0.125 / h));
      auto dd = sched;
      dd.scheme = Scheme::Framework1;
      dd.transmission = TransmissionRule::dirichlet_dirichlet();
      variants["framework1_dd"] = detail::strip_solve(ctx, rep, "framework1_dd", dd, false, overlap, false);
      variants["framework1_dd"]["overlap"] = overlap;
      auto dr = dd;
      dr.transmission = TransmissionRule::dirichlet_robin();
      variants["framework1_dr"] = detail::strip_solve(ctx, rep, "framework1_dr", dr, false, 0.0, false);
      auto f2 = sched;
      f2.scheme = Scheme::Framework2;
      variants["framework2"] = detail::strip_solve(ctx, rep, "framework2", f2, false, 0.0, false);
      double mono = 0;
      for (std::size_t i = 0; i < c.solver.instances; ++i) {
        const auto t0 = detail::clock::now();
        detail::strip_instance(strip, derive_seed(c.seed, 0x5e), i);
        mono += detail::seconds_since(t0);
      }
      rep.timing["monolithic_solve"] = mono;
      variants["monolithic"] = {{"ml2re_mean", 0.0}, {"note", "the monolithic solve is the reference"}};
    } else {
      variants["ddm"] = detail::strip_solve(ctx, rep, "ddm", sched, true, 0.0, false);
      const auto gpath = detail::checkpoint_path(ctx, "global");
      if (std::filesystem::exists(gpath)) {
        const auto strip = detail::strip_of(c);
        const auto net = detail::load_net(ctx, "global");
        const auto target = detail::strip_global_target(strip, g.sensors);
        auto pts = StructuredGrid(target.box, target.n).nodes();
        for (auto& q : pts) q = target.trunk_map.apply(q);
        std::vector<double> e;
        double secs = 0;
        for (std::size_t i = 0; i < c.solver.instances; ++i) {
          const auto [p, oracle] = detail::strip_instance(strip, derive_seed(c.seed, 0x5e), i);
          std::vector<std::vector<double>> in;
          for (const auto& b : target.branches) in.push_back(read_sensors(oracle, *b.sensor));
          const auto t0 = detail::clock::now();
          const Field pred(oracle.grid, net->forward(in, pts));
          secs += detail::seconds_since(t0);
          e.push_back(compare_fields(std::span<const Field>(&pred, 1), oracle).ml2re);
        }
        rep.timing["global_net_solve"] = secs;
        variants["global_net"] = {{"ml2re", e}, {"ml2re_mean", detail::mean_of(e)}, {"parameter_count", net->parameter_count()}};
        variants["parameter_ratio_subnet_to_global"] =
            static_cast<double>(variants["ddm"]["subnet_parameter_count_max"].get<std::size_t>()) /
            static_cast<double>(net->parameter_count());
      } else {
        variants["global_net"] = {{"note", "no global checkpoint; set data.global and rerun gen-data and train"}};
      }
    }
  } else if (detail::is_resistance(c)) {
    const auto shapes = sample_shapes(g.shapes, derive_seed(c.seed, 0x5a));
    const auto cr = resistance_experiment(shapes, detail::resistance_setup(ctx, Binding::Classical));
    variants["classical"] = cr.to_json(false);
    rep.timing["reference"] = cr.seconds_reference;
    rep.timing["classical_solve"] = cr.seconds_solve;
    if (c.solver.binding == "neural") {
      const auto nr = resistance_experiment(shapes, detail::resistance_setup(ctx, Binding::Neural));
      variants["neural"] = nr.to_json(false);
      rep.timing["neural_solve"] = nr.seconds_solve;
    }
  } else {
    auto s = detail::multimedium_setup(c);
    auto t0 = detail::clock::now();
    const auto [lo, up] = solve_multimedium(s.stack, s.nl, s.nu);
    rep.timing["monolithic"] = detail::seconds_since(t0);
    t0 = detail::clock::now();
    const auto r = run_framework2(s.solvers, sched);
    rep.timing["ddm"] = detail::seconds_since(t0);
    const std::vector<Field> ref{lo, up};
    variants["monolithic"] = {{"ml2re", 0.0}, {"note", "the monolithic solve is the reference"}};
    variants["ddm"] = detail::field_metrics(r, ref);
    rep.residual_histories["ddm"] = r.residual_history;
  }
  rep.metrics["variants"] = variants;
  const auto path = ctx.root() / "bench" / "report.json";
  save_report(rep, path);
  ctx.os() << "report " << path.string() << '\n';
  return rep;
}

/// Convert the fields saved by solve into <out>/vtk/<label>.vtk; returns the files written.
inline std::vector<std::filesystem::path> cli_export_vtk(const CliContext& ctx) {
  const auto dir = ctx.root() / "solve" / "fields";
  if (!std::filesystem::exists(dir / "fields.json")) throw IoError("no saved fields under '" + dir.string() + "'; run solve first");
  std::vector<std::filesystem::path> out;
  for (const auto& [label, f] : load_fields(dir)) {
    const auto path = ctx.root() / "vtk" / (label + ".vtk");
    write_vtk(f, path);
    validate_vtk(path);
    ctx.os() << "vtk " << path.string() << '\n';
    out.push_back(path);
  }
  return out;
}

}  // namespace ddon
