#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"

#include "ddon/ddm_engine.hpp"
#include "ddon/gp_boundary.hpp"

namespace ddon {

// ---------------------------------------------------------------------------
// dataset container

/**
 * @brief Operator-learning samples for one subdomain plus provenance.
 *
 * `domain` is the box of the trunk coordinate frame.
 */
struct Dataset {
  std::vector<OperatorSample> samples;
  nlohmann::json manifest = nlohmann::json::object();
  Box domain;

  std::size_t size() const { return samples.size(); }
  int trunk_dim() const { return domain.dim; }

  std::vector<std::size_t> branch_widths() const {
    std::vector<std::size_t> w;
    if (!samples.empty())
      for (const auto& b : samples.front().branch_inputs) w.push_back(b.size());
    return w;
  }

  void validate() const {
    const auto w = branch_widths();
    for (std::size_t i = 0; i < samples.size(); ++i) {
      const auto& s = samples[i];
      if (s.branch_inputs.size() != w.size()) throw ShapeError("sample " + std::to_string(i) + ": branch count differs");
      for (std::size_t b = 0; b < w.size(); ++b)
        if (s.branch_inputs[b].size() != w[b])
          throw ShapeError("sample " + std::to_string(i) + ": branch " + std::to_string(b) + " width differs");
      if (!s.trunk_points) throw ShapeError("sample " + std::to_string(i) + " has no trunk points");
      if (s.trunk_points->size() != s.targets.size())
        throw ShapeError("sample " + std::to_string(i) + ": target count differs from trunk point count");
    }
  }

  /// 16-hex-digit FNV-1a hash of the canonical little-endian sample bytes.
  std::string fingerprint() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto byte = [&](unsigned char c) {
      h ^= c;
      h *= 0x100000001b3ULL;
    };
    auto u64 = [&](std::uint64_t v) {
      for (int i = 0; i < 8; ++i) byte(static_cast<unsigned char>(v >> (8 * i)));
    };
    auto f64 = [&](double v) { u64(std::bit_cast<std::uint64_t>(v)); };
    u64(static_cast<std::uint64_t>(domain.dim));
    u64(samples.size());
    for (const auto& s : samples) {
      u64(s.branch_inputs.size());
      for (const auto& b : s.branch_inputs) {
        u64(b.size());
        for (double v : b) f64(v);
      }
      const auto& pts = *s.trunk_points;
      u64(pts.size());
      for (const auto& p : pts)
        for (int k = 0; k < domain.dim; ++k) f64(p[static_cast<std::size_t>(k)]);
      for (double v : s.targets) f64(v);
    }
    std::ostringstream os;
    os << std::hex;
    os.width(16);
    os.fill('0');
    os << h;
    return os.str();
  }
};

namespace detail {

inline nlohmann::json box_json(const Box& b) {
  std::vector<double> lo(b.lo.begin(), b.lo.begin() + b.dim), hi(b.hi.begin(), b.hi.begin() + b.dim);
  return {{"lo", lo}, {"hi", hi}};
}

inline Box box_from_json(const nlohmann::json& j) {
  const auto lo = j.at("lo").get<std::vector<double>>();
  const auto hi = j.at("hi").get<std::vector<double>>();
  return make_box(std::span<const double>(lo), std::span<const double>(hi));
}

inline constexpr std::uint32_t kBlobVersion = 1;
inline constexpr std::uint32_t kDtypeF64 = 1;

/// "DDAT", u32 version, u32 dtype, u32 ndim, u64 shape[ndim], LE f64 row-major.
inline std::string encode_blob(const std::vector<std::uint64_t>& shape, std::span<const double> values) {
  std::string out = "DDAT";
  put_u32(out, kBlobVersion);
  put_u32(out, kDtypeF64);
  put_u32(out, static_cast<std::uint32_t>(shape.size()));
  for (auto s : shape) put_u64(out, s);
  for (double v : values) put_f64(out, v);
  return out;
}

inline std::vector<double> decode_blob(const std::string& buf, std::vector<std::uint64_t>& shape, const std::string& name) {
  Reader r{buf};
  r.need(4, "magic");
  if (buf.compare(0, 4, "DDAT") != 0) throw FormatError(name + ": bad magic at byte offset 0");
  r.pos = 4;
  const auto version = r.uint(4, "version");
  if (version != kBlobVersion) throw VersionError(name + ": unsupported blob version " + std::to_string(version));
  const auto dtype = r.uint(4, "dtype");
  if (dtype != kDtypeF64) throw FormatError(name + ": unsupported dtype tag " + std::to_string(dtype) + " at byte offset 8");
  const auto ndim = r.uint(4, "ndim");
  shape.assign(ndim, 0);
  std::uint64_t total = 1;
  for (auto& s : shape) {
    s = r.uint(8, "shape");
    total *= s;
  }
  if (buf.size() - r.pos != total * 8)
    throw FormatError(name + ": payload size mismatch at byte offset " + std::to_string(r.pos));
  std::vector<double> v(total);
  for (auto& x : v) x = r.f64("values");
  return v;
}

inline std::string read_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace detail

/**
 * Write `dir/manifest.json` plus one DDAT blob per array: branch_<k>, points_<s>
 * (one per distinct trunk point set), point_index and targets (flattened).
 */
inline void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
  d.validate();
  std::filesystem::create_directories(dir);
  const auto n = d.size();
  const auto widths = d.branch_widths();
  std::vector<const std::vector<Point>*> sets;
  std::vector<double> index(n);
  std::vector<double> targets;
  for (std::size_t i = 0; i < n; ++i) {
    const auto* p = d.samples[i].trunk_points.get();
    auto it = std::find(sets.begin(), sets.end(), p);
    if (it == sets.end()) {
      sets.push_back(p);
      it = sets.end() - 1;
    }
    index[i] = static_cast<double>(it - sets.begin());
    targets.insert(targets.end(), d.samples[i].targets.begin(), d.samples[i].targets.end());
  }
  for (std::size_t b = 0; b < widths.size(); ++b) {
    std::vector<double> flat;
    flat.reserve(n * widths[b]);
    for (const auto& s : d.samples) flat.insert(flat.end(), s.branch_inputs[b].begin(), s.branch_inputs[b].end());
    detail::write_file(dir / ("branch_" + std::to_string(b) + ".ddat"), detail::encode_blob({n, widths[b]}, flat));
  }
  const auto dim = static_cast<std::size_t>(d.domain.dim);
  for (std::size_t s = 0; s < sets.size(); ++s) {
    std::vector<double> flat;
    for (const auto& p : *sets[s])
      for (std::size_t k = 0; k < dim; ++k) flat.push_back(p[k]);
    detail::write_file(dir / ("points_" + std::to_string(s) + ".ddat"), detail::encode_blob({sets[s]->size(), dim}, flat));
  }
  detail::write_file(dir / "point_index.ddat", detail::encode_blob({n}, index));
  detail::write_file(dir / "targets.ddat", detail::encode_blob({targets.size()}, targets));
  nlohmann::json m;
  m["format"] = "ddat-dataset";
  m["version"] = detail::kBlobVersion;
  m["count"] = n;
  m["branch_widths"] = widths;
  m["trunk_dim"] = d.domain.dim;
  m["domain"] = detail::box_json(d.domain);
  m["point_sets"] = sets.size();
  m["fingerprint"] = d.fingerprint();
  m["provenance"] = d.manifest;
  detail::write_file(dir / "manifest.json", m.dump(2) + "\n");
}

inline Dataset load_dataset(const std::filesystem::path& dir) {
  nlohmann::json m;
  try {
    m = nlohmann::json::parse(detail::read_bytes(dir / "manifest.json"));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("malformed dataset manifest: " + std::string(e.what()));
  }
  Dataset d;
  try {
    if (m.at("format") != "ddat-dataset") throw FormatError("not a dataset manifest");
    if (m.at("version").get<std::uint32_t>() != detail::kBlobVersion)
      throw VersionError("unsupported dataset version " + m.at("version").dump());
    d.domain = detail::box_from_json(m.at("domain"));
    d.manifest = m.value("provenance", nlohmann::json::object());
    const auto n = m.at("count").get<std::size_t>();
    const auto widths = m.at("branch_widths").get<std::vector<std::size_t>>();
    const auto nsets = m.at("point_sets").get<std::size_t>();
    const auto dim = static_cast<std::size_t>(d.domain.dim);
    std::vector<std::uint64_t> shape;
    std::vector<std::shared_ptr<const std::vector<Point>>> sets;
    for (std::size_t s = 0; s < nsets; ++s) {
      const std::string name = "points_" + std::to_string(s) + ".ddat";
      const auto v = detail::decode_blob(detail::read_bytes(dir / name), shape, name);
      if (shape.size() != 2 || shape[1] != dim) throw FormatError(name + ": unexpected shape");
      auto pts = std::make_shared<std::vector<Point>>(shape[0], Point{0, 0, 0});
      for (std::size_t i = 0; i < shape[0]; ++i)
        for (std::size_t k = 0; k < dim; ++k) (*pts)[i][k] = v[i * dim + k];
      sets.push_back(std::move(pts));
    }
    const auto index = detail::decode_blob(detail::read_bytes(dir / "point_index.ddat"), shape, "point_index.ddat");
    if (index.size() != n) throw FormatError("point_index.ddat: unexpected shape");
    const auto targets = detail::decode_blob(detail::read_bytes(dir / "targets.ddat"), shape, "targets.ddat");
    d.samples.resize(n);
    std::size_t off = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto s = static_cast<std::size_t>(index[i]);
      if (s >= sets.size()) throw FormatError("point_index.ddat: set index out of range for sample " + std::to_string(i));
      d.samples[i].trunk_points = sets[s];
      const auto m_i = sets[s]->size();
      if (off + m_i > targets.size()) throw FormatError("targets.ddat: too few values");
      d.samples[i].targets.assign(targets.begin() + static_cast<std::ptrdiff_t>(off),
                                  targets.begin() + static_cast<std::ptrdiff_t>(off + m_i));
      off += m_i;
    }
    if (off != targets.size()) throw FormatError("targets.ddat: too many values");
    for (std::size_t b = 0; b < widths.size(); ++b) {
      const std::string name = "branch_" + std::to_string(b) + ".ddat";
      const auto v = detail::decode_blob(detail::read_bytes(dir / name), shape, name);
      if (shape.size() != 2 || shape[0] != n || shape[1] != widths[b]) throw FormatError(name + ": unexpected shape");
      for (std::size_t i = 0; i < n; ++i)
        d.samples[i].branch_inputs.emplace_back(v.begin() + static_cast<std::ptrdiff_t>(i * widths[b]),
                                                v.begin() + static_cast<std::ptrdiff_t>((i + 1) * widths[b]));
    }
    if (d.fingerprint() != m.at("fingerprint").get<std::string>())
      throw FormatError("dataset fingerprint mismatch in '" + dir.string() + "'");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("incomplete dataset manifest: " + std::string(e.what()));
  }
  return d;
}

struct DatasetSplit {
  Dataset train;
  Dataset test;
  Dataset generalization;
};

/// Seeded shuffle, then `generalization` samples set aside and the rest split train:test.
inline DatasetSplit split_dataset(const Dataset& d, std::uint64_t seed, double train_fraction = 0.8,
                                  std::size_t generalization = 0) {
  if (!(train_fraction > 0 && train_fraction <= 1)) throw RangeError("train fraction must lie in (0, 1]");
  if (generalization >= d.size() && d.size() > 0) throw RangeError("generalization set would take every sample");
  std::vector<std::size_t> idx(d.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  Rng rng(derive_seed(seed, 0x5b17));
  shuffle(idx, rng);
  DatasetSplit out;
  for (auto* part : {&out.train, &out.test, &out.generalization}) {
    part->domain = d.domain;
    part->manifest = d.manifest;
  }
  const std::size_t rest = d.size() - generalization;
  const auto ntrain = static_cast<std::size_t>(std::llround(train_fraction * static_cast<double>(rest)));
  for (std::size_t k = 0; k < idx.size(); ++k) {
    auto& part = k < generalization ? out.generalization : (k - generalization < ntrain ? out.train : out.test);
    part.samples.push_back(d.samples[idx[k]]);
  }
  out.train.manifest["split"] = "train";
  out.test.manifest["split"] = "test";
  out.generalization.manifest["split"] = "generalization";
  return out;
}

/**
 * Concatenate `b` onto `a` after mapping b's trunk points by `alignment`.
 * Mapped points must stay inside a's domain.
 */
inline Dataset merge_datasets(const Dataset& a, const Dataset& b, const AffineMap& alignment) {
  a.validate();
  b.validate();
  if (a.trunk_dim() != b.trunk_dim()) throw ShapeError("trunk dimensions differ");
  if (!a.samples.empty() && !b.samples.empty() && a.branch_widths() != b.branch_widths())
    throw ShapeError("branch widths differ");
  AffineMap map = alignment;
  if (map.dim == 0) map = AffineMap::identity(a.trunk_dim());
  map.validate();
  Dataset out = a;
  std::map<const std::vector<Point>*, std::shared_ptr<const std::vector<Point>>> mapped;
  for (const auto& s : b.samples) {
    auto& m = mapped[s.trunk_points.get()];
    if (!m) {
      auto pts = std::make_shared<std::vector<Point>>(*s.trunk_points);
      for (auto& p : *pts) {
        p = map.apply(p);
        if (!a.domain.contains(p, 1e-9))
          throw AlignmentError("mapped trunk point leaves " + to_string(a.domain));
      }
      m = std::move(pts);
    }
    OperatorSample t = s;
    t.trunk_points = m;
    out.samples.push_back(std::move(t));
  }
  out.manifest = {{"generator", "merge"},
                  {"parents", {a.manifest, b.manifest}},
                  {"alignment", {{"scale", map.scale}, {"shift", map.shift}}}};
  return out;
}

// ---------------------------------------------------------------------------
// transforms

enum class TransformKind { Log10Shift, Log10, ZScore };

inline std::string to_string(TransformKind k) {
  switch (k) {
    case TransformKind::Log10Shift: return "log10_shift";
    case TransformKind::Log10: return "log10";
    case TransformKind::ZScore: return "zscore";
  }
  return "?";
}

inline TransformKind transform_from_string(const std::string& s) {
  if (s == "log10_shift") return TransformKind::Log10Shift;
  if (s == "log10") return TransformKind::Log10;
  if (s == "zscore") return TransformKind::ZScore;
  throw PreconditionError("unknown transform '" + s + "'");
}

/// Elementwise transform; z-score keeps per-feature (column) statistics.
struct Transform {
  TransformKind kind = TransformKind::Log10Shift;
  std::vector<double> mean;
  std::vector<double> stdev;

  static Transform fit(TransformKind kind, const std::vector<std::vector<double>>& rows) {
    Transform t;
    t.kind = kind;
    if (kind != TransformKind::ZScore) return t;
    if (rows.empty()) throw PreconditionError("z-score needs at least one row to fit");
    const std::size_t m = rows.front().size();
    t.mean.assign(m, 0.0);
    t.stdev.assign(m, 0.0);
    for (const auto& r : rows) {
      if (r.size() != m) throw ShapeError("z-score rows differ in width");
      for (std::size_t j = 0; j < m; ++j) t.mean[j] += r[j];
    }
    for (auto& v : t.mean) v /= static_cast<double>(rows.size());
    for (const auto& r : rows)
      for (std::size_t j = 0; j < m; ++j) t.stdev[j] += (r[j] - t.mean[j]) * (r[j] - t.mean[j]);
    for (auto& v : t.stdev) {
      v = std::sqrt(v / static_cast<double>(rows.size()));
      if (!(v > 0)) v = 1.0;
    }
    return t;
  }

  nlohmann::json to_json() const { return {{"kind", to_string(kind)}, {"mean", mean}, {"std", stdev}}; }

  static Transform from_json(const nlohmann::json& j) {
    Transform t;
    t.kind = transform_from_string(j.at("kind").get<std::string>());
    t.mean = j.value("mean", std::vector<double>{});
    t.stdev = j.value("std", std::vector<double>{});
    return t;
  }
};

namespace detail {

inline std::string value_text(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline double forward_one(const Transform& t, double x, std::size_t j) {
  switch (t.kind) {
    case TransformKind::Log10Shift:
      if (!(x > -1)) throw DomainError("log10_shift needs values > -1, got " + value_text(x));
      return std::log10(x + 1);
    case TransformKind::Log10:
      if (!(x > 0)) throw DomainError("log10 needs positive values, got " + value_text(x));
      return std::log10(x);
    case TransformKind::ZScore:
      return (x - t.mean[j]) / t.stdev[j];
  }
  return x;
}

inline double inverse_one(const Transform& t, double y, std::size_t j) {
  switch (t.kind) {
    case TransformKind::Log10Shift: return std::pow(10.0, y) - 1;
    case TransformKind::Log10: return std::pow(10.0, y);
    case TransformKind::ZScore: return y * t.stdev[j] + t.mean[j];
  }
  return y;
}

template <typename F>
std::vector<std::vector<double>> map_rows(const Transform& t, std::vector<std::vector<double>> rows, F f) {
  for (auto& r : rows) {
    if (t.kind == TransformKind::ZScore && r.size() != t.mean.size())
      throw ShapeError("row width " + std::to_string(r.size()) + " does not match fitted width " +
                       std::to_string(t.mean.size()));
    for (std::size_t j = 0; j < r.size(); ++j) r[j] = f(t, r[j], j);
  }
  return rows;
}

}  // namespace detail

inline std::vector<std::vector<double>> apply_transform(const Transform& t, std::vector<std::vector<double>> rows) {
  return detail::map_rows(t, std::move(rows), detail::forward_one);
}

inline std::vector<std::vector<double>> invert_transform(const Transform& t, std::vector<std::vector<double>> rows) {
  return detail::map_rows(t, std::move(rows), detail::inverse_one);
}

inline double apply_transform(const Transform& t, double x) { return detail::forward_one(t, x, 0); }
inline double invert_transform(const Transform& t, double y) { return detail::inverse_one(t, y, 0); }

/**
 * Fit and apply a transform to one branch (`branch` >= 0) or to the targets
 * (`branch` = -1) of every sample, verify the round trip to 1e-10 relative,
 * and record it in the manifest.
 */
inline Transform transform_dataset(Dataset& d, int branch, TransformKind kind) {
  d.validate();
  auto column = [&](OperatorSample& s) -> std::vector<double>& {
    return branch < 0 ? s.targets : s.branch_inputs.at(static_cast<std::size_t>(branch));
  };
  std::vector<std::vector<double>> rows;
  for (auto& s : d.samples) rows.push_back(column(s));
  const auto t = Transform::fit(kind, rows);
  const auto fwd = apply_transform(t, rows);
  const auto back = invert_transform(t, fwd);
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      if (std::abs(back[i][j] - rows[i][j]) > 1e-10 * std::max(1.0, std::abs(rows[i][j])))
        throw DomainError("transform round trip failed for value " + detail::value_text(rows[i][j]));
  for (std::size_t i = 0; i < rows.size(); ++i) column(d.samples[i]) = fwd[i];
  auto rec = t.to_json();
  rec["target"] = branch < 0 ? std::string("targets") : "branch_" + std::to_string(branch);
  d.manifest["transforms"].push_back(rec);
  return t;
}

// ---------------------------------------------------------------------------
// dataset generation

namespace detail {

/// Run f(i) for i in [0, n) on `threads` workers; rethrows the lowest-index failure.
template <typename F>
void parallel_for(std::size_t n, int threads, F f) {
  const auto workers = static_cast<std::size_t>(std::max(1, threads));
  std::vector<std::exception_ptr> errors(n);
  if (workers == 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) {
      try {
        f(i);
      } catch (...) {
        errors[i] = std::current_exception();
        break;
      }
    }
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < std::min(workers, n); ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) {
          try {
            f(i);
          } catch (...) {
            errors[i] = std::current_exception();
          }
        }
      });
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline std::shared_ptr<const std::vector<Point>> mapped_nodes(const StructuredGrid& g, const AffineMap& map) {
  auto pts = std::make_shared<std::vector<Point>>(g.nodes());
  if (map.dim > 0)
    for (auto& p : *pts) p = map.apply(p);
  return pts;
}

inline void set_face_condition(PdeProblem& p, BoundaryCondition bc) {
  std::erase_if(p.bcs, [&](const BoundaryCondition& b) { return b.face == bc.face && !b.patch; });
  p.bcs.push_back(std::move(bc));
}

}  // namespace detail

/// Problem for sample `index`; the stream is derived from the generation seed and the index.
using ProblemGenerator = std::function<PdeProblem(std::size_t index, Rng& rng)>;

/**
 * Copies of `base` with independent GP Dirichlet data on each face in `faces`,
 * sampled at the face nodes of an `n`-node grid in face-local coordinates.
 */
inline ProblemGenerator gp_dirichlet_problems(PdeProblem base, GridCounts n, std::vector<Face> faces, GpSpec gp) {
  gp.validate();
  return [base = std::move(base), n, faces = std::move(faces), gp](std::size_t, Rng& rng) {
    PdeProblem p = base;
    const StructuredGrid g(p.box, n);
    for (const auto& f : faces) {
      GpSpec s = gp;
      s.seed = rng.next();
      const auto local = detail::patch_offsets(g.box().face_patch(f), n);
      const auto draw = sample_gp(s, local, 1);
      std::vector<double> v(local.size());
      for (std::size_t j = 0; j < v.size(); ++j) v[j] = draw(0, static_cast<Eigen::Index>(j));
      detail::set_face_condition(p, BoundaryCondition::dirichlet(f, std::move(v)));
    }
    return p;
  };
}

enum class TraceKind { Value, NormalDerivative, Robin };

/**
 * Sensors on a face patch: `n` nodes per tangential axis. Derivatives are
 * taken along the outward normal of `face`; Robin is value + kappa * derivative.
 */
struct SensorSpec {
  Box patch;
  Face face;
  TraceKind kind = TraceKind::Value;
  GridCounts n{1, 1, 1};
  double kappa = 1.0;
};

/// One branch input: sensor readings of the global solution, or parameters of the problem.
struct BranchSpec {
  std::optional<SensorSpec> sensor;
  std::function<std::vector<double>(const PdeProblem&)> parameters;

  static BranchSpec sensors(SensorSpec s) { return {std::move(s), {}}; }
  static BranchSpec params(std::function<std::vector<double>(const PdeProblem&)> f) { return {std::nullopt, std::move(f)}; }
};

/// A subdomain extracted from global solutions; trunk points are its nodes mapped by `trunk_map`.
struct SubdomainTarget {
  std::string label;
  Box box;
  GridCounts n{1, 1, 1};
  std::vector<BranchSpec> branches;
  AffineMap trunk_map;
};

inline std::vector<double> read_sensors(const Field& u, const SensorSpec& s) {
  const auto pts = patch_points(s.patch, s.n);
  if (s.kind == TraceKind::Value) return trace_values(u, pts);
  const double sign = s.face.side == Side::High ? 1.0 : -1.0;
  auto d = trace_derivative(u, pts, s.face.axis, sign);
  if (s.kind == TraceKind::NormalDerivative) return d;
  const auto v = trace_values(u, pts);
  for (std::size_t i = 0; i < d.size(); ++i) d[i] = v[i] + s.kappa * d[i];
  return d;
}

/**
 * Interpolation method: solve `count` global problems on an `global_n` grid and
 * cut each solution into per-subdomain samples.
 */
inline std::vector<Dataset> gen_dataset_interpolation(const ProblemGenerator& problems, const GridCounts& global_n,
                                                      const std::vector<SubdomainTarget>& subdomains, std::size_t count,
                                                      std::uint64_t seed, int threads = 1, SolverOptions opts = {}) {
  if (count < 1) throw PreconditionError("sample count must be at least 1");
  if (subdomains.empty()) throw PreconditionError("no subdomains requested");
  std::vector<std::shared_ptr<const std::vector<Point>>> nodes;
  std::vector<Dataset> out(subdomains.size());
  for (std::size_t k = 0; k < subdomains.size(); ++k) {
    const auto& t = subdomains[k];
    const StructuredGrid g(t.box, t.n);
    nodes.push_back(detail::mapped_nodes(g, t.trunk_map));
    out[k].domain = t.trunk_map.dim > 0 ? t.trunk_map.apply(t.box) : t.box;
    out[k].samples.resize(count);
    out[k].manifest = {{"generator", "interpolation"},
                       {"seed", seed},
                       {"count", count},
                       {"subdomain", t.label},
                       {"box", detail::box_json(t.box)},
                       {"grid", std::vector<int>(t.n.begin(), t.n.begin() + t.box.dim)},
                       {"global_grid", std::vector<int>(global_n.begin(), global_n.end())}};
  }
  detail::parallel_for(count, threads, [&](std::size_t i) {
    Rng rng(derive_seed(seed, i));
    Field u;
    PdeProblem p;
    try {
      p = problems(i, rng);
      u = solve_elliptic(p, global_n, opts);
    } catch (const Error& e) {
      throw SolverError("sample " + std::to_string(i) + ": " + e.what());
    }
    for (std::size_t k = 0; k < subdomains.size(); ++k) {
      const auto& t = subdomains[k];
      auto& s = out[k].samples[i];
      for (const auto& b : t.branches) s.branch_inputs.push_back(b.sensor ? read_sensors(u, *b.sensor) : b.parameters(p));
      s.trunk_points = nodes[k];
      s.targets = restrict(u, t.box, t.n).values;
    }
  });
  for (auto& d : out) d.validate();
  return out;
}

/// An open face of a GP-method subdomain: its condition type and branch sensor layout.
struct GpOpenFace {
  Face face;
  BcKind kind = BcKind::Dirichlet;
  double robin_alpha = 1.0;
  double robin_beta = 1.0;
  GridCounts sensors{1, 1, 1};
};

/**
 * GP method: the subdomain problem `problem` (box, coefficients, fixed BCs) is
 * completed with GP data on each open face. `vary`, when set, may change the
 * problem per sample (box, coefficients, BC data) and returns a parameter
 * branch placed first. With `unit_trunk` trunk points are the unit-box nodes.
 */
struct GpDatasetSpec {
  std::string label = "D1";
  PdeProblem problem;
  GridCounts n{1, 1, 1};
  std::vector<GpOpenFace> open;
  GpSpec gp;
  std::size_t count = 1;
  std::uint64_t seed = 0;
  AffineMap trunk_map;
  bool unit_trunk = false;
  bool stretch = false;
  SolverOptions opts;
  int threads = 1;
  std::function<std::vector<double>(std::size_t index, Rng& rng, PdeProblem& problem)> vary;
};

inline Dataset gen_dataset_gp(const GpDatasetSpec& spec) {
  if (spec.count < 1) throw PreconditionError("sample count must be at least 1");
  spec.gp.validate();
  const auto& box = spec.problem.box;
  for (int k = 0; k < box.dim; ++k)
    for (Side side : {Side::Low, Side::High}) {
      const Face f{k, side};
      const bool fixed = std::any_of(spec.problem.bcs.begin(), spec.problem.bcs.end(),
                                     [&](const BoundaryCondition& b) { return b.face == f && !b.patch; });
      const bool open = std::any_of(spec.open.begin(), spec.open.end(), [&](const GpOpenFace& o) { return o.face == f; });
      if (fixed && open) throw PreconditionError("face " + to_string(f) + " is both fixed and open");
      if (!fixed && !open && !spec.opts.default_neumann)
        throw PreconditionError("face " + to_string(f) + " has neither a fixed condition nor GP data");
    }
  std::vector<OpenBoundary> open;
  std::vector<OpenFace> conditions;
  for (const auto& o : spec.open) {
    open.push_back(o.face);
    conditions.push_back({o.face, o.kind, o.robin_alpha, o.robin_beta});
  }
  auto make_solver = [&](const PdeProblem& p) {
    auto s = std::make_shared<ClassicalSolver>(spec.label, p, spec.n, open, spec.opts, spec.stretch);
    s->prepare(conditions);
    return s;
  };
  std::shared_ptr<ClassicalSolver> shared = spec.vary ? nullptr : make_solver(spec.problem);
  std::shared_ptr<const std::vector<Point>> fixed_nodes;
  if (spec.unit_trunk)
    fixed_nodes = std::make_shared<std::vector<Point>>(StructuredGrid(unit_box(box.dim), spec.n).nodes());
  else if (!spec.vary)
    fixed_nodes = detail::mapped_nodes(shared->grid(), spec.trunk_map);

  Dataset d;
  d.domain = spec.unit_trunk ? unit_box(box.dim) : (spec.trunk_map.dim > 0 ? spec.trunk_map.apply(box) : box);
  d.samples.resize(spec.count);
  detail::parallel_for(spec.count, spec.threads, [&](std::size_t i) {
    Rng rng(derive_seed(spec.seed, i));
    PdeProblem p = spec.problem;
    std::vector<double> params;
    if (spec.vary) params = spec.vary(i, rng, p);
    try {
      const auto solver = shared ? shared : make_solver(p);
      const auto& g = solver->grid();
      std::vector<std::vector<double>> data;
      auto& s = d.samples[i];
      if (!params.empty()) s.branch_inputs.push_back(params);
      for (std::size_t f = 0; f < spec.open.size(); ++f) {
        GpSpec gs = spec.gp;
        gs.seed = derive_seed(derive_seed(spec.seed, 0x9000 + f), i);
        const auto local = detail::patch_offsets(g.box().face_patch(spec.open[f].face), g.counts());
        const auto draw = sample_gp(gs, local, 1);
        std::vector<double> v(local.size());
        for (std::size_t j = 0; j < v.size(); ++j) v[j] = draw(0, static_cast<Eigen::Index>(j));
        std::vector<double> sensors;
        for (const auto& q : patch_points(g.box().face_patch(spec.open[f].face), spec.open[f].sensors))
          sensors.push_back(interpolate_on_face(g, spec.open[f].face, v, q));
        s.branch_inputs.push_back(std::move(sensors));
        data.push_back(std::move(v));
      }
      auto u = solver->solve(data);
      s.targets = std::move(u.values);
      s.trunk_points = fixed_nodes ? fixed_nodes : detail::mapped_nodes(g, spec.trunk_map);
    } catch (const Error& e) {
      throw SolverError("sample " + std::to_string(i) + ": " + e.what());
    }
  });
  d.manifest = {{"generator", "gp"},
                {"seed", spec.seed},
                {"count", spec.count},
                {"subdomain", spec.label},
                {"box", detail::box_json(box)},
                {"grid", std::vector<int>(spec.n.begin(), spec.n.begin() + box.dim)},
                {"gp", {{"correlation_length", spec.gp.correlation_length}, {"variance", spec.gp.variance}}}};
  d.validate();
  return d;
}

// ---------------------------------------------------------------------------
// toy Laplace strip

/**
 * 2D Laplace on [0,1] x [0,2] with GP Dirichlet data on y=0 and y=2, zero flux
 * on x=0 and x=1, split at y=1. Each half gets a branch for its own Dirichlet
 * face and one for the conormal Robin trace u + du/dn on the cut, both read
 * at `sensors` points, and trunk points on its `sub_n` nodes mapped onto [-1, 1]^2.
 */
struct LaplaceStrip {
  PdeProblem base;
  GridCounts global_n;
  GpSpec gp;
  std::vector<SubdomainTarget> halves;

  ProblemGenerator generator() const {
    return gp_dirichlet_problems(base, global_n, {{1, Side::Low}, {1, Side::High}}, gp);
  }

  /// Branches holding the global Dirichlet data of both ends, for iteration-free assembly.
  std::vector<SubdomainTarget> global_input_halves(int sensors) const {
    auto out = halves;
    for (auto& h : out) {
      h.branches.clear();
      for (Side s : {Side::Low, Side::High})
        h.branches.push_back(BranchSpec::sensors({base.box.face_patch({1, s}), {1, s}, TraceKind::Value, {sensors, 1, 1}}));
    }
    return out;
  }
};

inline LaplaceStrip laplace_strip(int sub_n, int sensors, GpSpec gp) {
  LaplaceStrip s;
  s.base.box = make_box({0, 0}, {1, 2});
  s.base.bcs = {BoundaryCondition::neumann({0, Side::Low}), BoundaryCondition::neumann({0, Side::High})};
  s.global_n = {sub_n, 2 * sub_n - 1, 1};
  s.gp = gp;
  const Box lower = make_box({0, 0}, {1, 1});
  const Box upper = make_box({0, 1}, {1, 2});
  const GridCounts sn{sub_n, sub_n, 1};
  const GridCounts sc{sensors, 1, 1};
  s.halves.push_back({"lower",
                      lower,
                      sn,
                      {BranchSpec::sensors({lower.face_patch({1, Side::Low}), {1, Side::Low}, TraceKind::Value, sc}),
                       BranchSpec::sensors({lower.face_patch({1, Side::High}), {1, Side::High}, TraceKind::Robin, sc})},
                      AffineMap::centering(lower)});
  s.halves.push_back({"upper",
                      upper,
                      sn,
                      {BranchSpec::sensors({upper.face_patch({1, Side::High}), {1, Side::High}, TraceKind::Value, sc}),
                       BranchSpec::sensors({upper.face_patch({1, Side::Low}), {1, Side::Low}, TraceKind::Robin, sc})},
                      AffineMap::centering(upper)});
  return s;
}

// ---------------------------------------------------------------------------
// resistance

namespace detail {

/// Composite-trapezoid weights of the face nodes of `g` lying in `patch` (zero outside).
inline std::vector<double> trapezoid_weights(const StructuredGrid& g, const Face& face, const Box& patch) {
  const auto pts = face_points(g, face);
  std::vector<double> w(pts.size(), 0.0);
  for (std::size_t i = 0; i < pts.size(); ++i) {
    if (!patch.contains(pts[i])) continue;
    double wi = 1.0;
    for (int k = 0; k < g.dim(); ++k) {
      if (k == face.axis) continue;
      const double h = g.spacing(k);
      const double x = pts[i][static_cast<std::size_t>(k)];
      const bool end = std::abs(x - patch.lo[k]) < 1e-9 * h || std::abs(x - patch.hi[k]) < 1e-9 * h;
      wi *= end ? h / 2 : h;
    }
    w[i] = wi;
  }
  return w;
}

}  // namespace detail

/**
 * 1 / |integral of sigma_n du/dn| over the port patch, with the one-sided
 * second-order normal derivative and composite-trapezoid quadrature.
 * `sigma` holds one conductivity per axis (a mapped tensor on stretched boxes).
 */
inline double extract_resistance(std::span<const Field> fields, const Box& port, const Point& sigma) {
  for (const auto& u : fields) {
    const auto face = face_containing(u.grid.box(), port);
    if (!face) continue;
    const auto d = normal_derivative(u, *face);
    const auto w = detail::trapezoid_weights(u.grid, *face, port);
    double flux = 0;
    for (std::size_t i = 0; i < w.size(); ++i) flux += w[i] * d.values[i];
    flux *= sigma[static_cast<std::size_t>(face->axis)];
    if (!(std::abs(flux) >= 1e-14)) throw ZeroFluxError("port flux vanishes on " + to_string(port));
    return 1.0 / std::abs(flux);
  }
  throw PortError("port " + to_string(port) + " lies on no field's box face");
}

inline double extract_resistance(std::span<const Field> fields, const Box& port, double sigma) {
  return extract_resistance(fields, port, Point{sigma, sigma, sigma});
}

inline double extract_resistance(const Field& field, const Box& port, double sigma) {
  return extract_resistance(std::span<const Field>(&field, 1), port, sigma);
}

/// Mean relative error and the per-sample relative errors |true - pred| / |true|.
inline std::pair<double, std::vector<double>> mre_re(std::span<const double> truth, std::span<const double> pred) {
  if (truth.size() != pred.size()) throw ShapeError("true and predicted value counts differ");
  if (truth.empty()) throw PreconditionError("no values to compare");
  std::vector<double> re(truth.size());
  double sum = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] == 0.0) throw ZeroTrueValueError("true value at index " + std::to_string(i) + " is zero");
    re[i] = std::abs(truth[i] - pred[i]) / std::abs(truth[i]);
    sum += re[i];
  }
  return {sum / static_cast<double>(truth.size()), std::move(re)};
}

enum class ShapeKind { L, T };

inline ConductorShape decompose_shape(ShapeKind k, const ShapeParams& p) {
  return k == ShapeKind::L ? decompose_L_shape(p) : decompose_T_shape(p);
}

/// Shape parameters uniform in their nominal ranges.
inline std::vector<ShapeParams> sample_shapes(std::size_t count, std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0x5a9e));
  std::vector<ShapeParams> out(count);
  for (auto& p : out) {
    p.h = rng.uniform(1, 3);
    p.w1 = rng.uniform(1, 3);
    p.w2 = rng.uniform(1, 3);
    p.l1 = rng.uniform(4, 6);
    p.l2 = rng.uniform(5, 8);
    p.l3 = rng.uniform(2, 5);
  }
  return out;
}

/// Port patch of a shape (the full face of its box).
inline Box port_patch(const ConductorShape& s, const Port& port) {
  return s.decomposition.geometry.boxes[s.decomposition.geometry.index_of(port.box_label)].face_patch(port.face);
}

/// Faces of box `b` carrying an interface, in interface order.
inline std::vector<Face> interface_faces(const Decomposition& d, std::size_t b) {
  std::vector<Face> out;
  const auto& label = d.geometry.labels[b];
  for (const auto& itf : d.interfaces) {
    if (itf.owner_a == label) out.push_back(itf.face_of_a());
    if (itf.owner_b == label) out.push_back({itf.normal_axis, itf.orientation_from_a > 0 ? Side::Low : Side::High});
  }
  return out;
}

/// Potential problem of one box: u=1 / u=0 on the ports it owns, other faces left to the caller.
inline PdeProblem port_problem(const ConductorShape& s, std::size_t b) {
  PdeProblem p;
  p.box = s.decomposition.geometry.boxes[b];
  const auto& label = s.decomposition.geometry.labels[b];
  if (s.in_port.box_label == label) p.bcs.push_back(BoundaryCondition::dirichlet(s.in_port.face, 1.0));
  if (s.out_port.box_label == label) p.bcs.push_back(BoundaryCondition::dirichlet(s.out_port.face, 0.0));
  return p;
}

/// Branch parameters of a box: edge lengths then stretched diffusion coefficients.
inline std::vector<double> shape_parameters(const Box& box) {
  const auto st = stretching_map(box);
  std::vector<double> v;
  for (int k = 0; k < box.dim; ++k) v.push_back(box.extent(k));
  for (int k = 0; k < box.dim; ++k) v.push_back(st.coefficients[k]);
  return v;
}

/**
 * GP-method dataset spec for box `label` of a shape family: the box varies
 * with sampled shape parameters and is stretched to the unit cube, ports keep
 * their Dirichlet data, interface faces get GP conormal Robin data.
 */
inline GpDatasetSpec resistance_subdomain_spec(ShapeKind kind, const std::string& label, const GridCounts& n,
                                               const GridCounts& sensors, const GpSpec& gp, std::size_t count,
                                               std::uint64_t seed) {
  const auto ref = decompose_shape(kind, ShapeParams{2, 2, 2, 5, 6, 3});
  const auto b = ref.decomposition.geometry.index_of(label);
  GpDatasetSpec spec;
  spec.label = label;
  spec.problem = port_problem(ref, b);
  spec.n = n;
  for (const auto& f : interface_faces(ref.decomposition, b)) spec.open.push_back({f, BcKind::Robin, 1.0, 1.0, sensors});
  spec.gp = gp;
  spec.count = count;
  spec.seed = seed;
  spec.unit_trunk = true;
  spec.stretch = true;
  spec.opts.default_neumann = true;
  spec.vary = [kind, b](std::size_t, Rng& rng, PdeProblem& p) {
    const auto shape = decompose_shape(kind, sample_shapes(1, rng.next()).front());
    p.box = shape.decomposition.geometry.boxes[b];
    return shape_parameters(p.box);
  };
  return spec;
}

enum class Binding { Classical, Neural };

struct ResistanceSetup {
  ShapeKind shape = ShapeKind::L;
  Binding binding = Binding::Classical;
  /// Target spacing of the classical subdomain grids.
  double spacing = 0.25;
  /// Target spacing of the monolithic reference solve.
  double reference_spacing = 0.125;
  /// Per-box node counts and interface sensors of the neural binding.
  GridCounts neural_counts{9, 9, 9};
  GridCounts sensors{6, 6, 6};
  std::map<std::string, std::shared_ptr<const OperatorNet>> nets;
  DdmSchedule schedule;
  double sigma = 1.0;
  SolverOptions opts;
};

struct ResistanceSample {
  ShapeParams shape;
  double r_true = std::numeric_limits<double>::quiet_NaN();
  double r_pred = std::numeric_limits<double>::quiet_NaN();
  double re = std::numeric_limits<double>::quiet_NaN();
  double ml2re = std::numeric_limits<double>::quiet_NaN();
  double mae = std::numeric_limits<double>::quiet_NaN();
  std::size_t iterations = 0;
  bool converged = false;
  bool ok = false;
  std::string error;
};

struct ResistanceReport {
  std::vector<ResistanceSample> samples;
  double mre = std::numeric_limits<double>::quiet_NaN();
  double fraction_within_5pct = 0;
  double ml2re = std::numeric_limits<double>::quiet_NaN();
  double mae = std::numeric_limits<double>::quiet_NaN();
  std::size_t failures = 0;
  double seconds_reference = 0;
  double seconds_solve = 0;

  nlohmann::json to_json(bool timings = true) const {
    nlohmann::json j;
    j["mre"] = mre;
    j["fraction_re_le_5pct"] = fraction_within_5pct;
    j["potential_ml2re"] = ml2re;
    j["potential_mae"] = mae;
    j["failures"] = failures;
    if (timings) j["seconds"] = {{"reference", seconds_reference}, {"solve", seconds_solve}};
    j["samples"] = nlohmann::json::array();
    for (const auto& s : samples)
      j["samples"].push_back({{"shape", {s.shape.h, s.shape.w1, s.shape.w2, s.shape.l1, s.shape.l2, s.shape.l3}},
                              {"r_true", s.r_true},
                              {"r_pred", s.r_pred},
                              {"re", s.re},
                              {"ml2re", s.ml2re},
                              {"mae", s.mae},
                              {"iterations", s.iterations},
                              {"converged", s.converged},
                              {"ok", s.ok},
                              {"error", s.error}});
    return j;
  }
};

/// Subdomain solvers of one shape under the chosen binding.
inline SolverList resistance_solvers(const ConductorShape& s, const ResistanceSetup& setup) {
  const auto& geom = s.decomposition.geometry;
  const auto counts = counts_for_spacing(geom, setup.spacing);
  SolverOptions opts = setup.opts;
  opts.default_neumann = true;
  SolverList out;
  for (std::size_t b = 0; b < geom.size(); ++b) {
    const auto faces = interface_faces(s.decomposition, b);
    const auto& label = geom.labels[b];
    if (setup.binding == Binding::Classical) {
      out.push_back(std::make_shared<ClassicalSolver>(label, port_problem(s, b), counts[b],
                                                      std::vector<OpenBoundary>(faces.begin(), faces.end()), opts, true));
      continue;
    }
    const auto it = setup.nets.find(label);
    if (it == setup.nets.end()) throw CheckpointNotFoundError("no trained net for subdomain '" + label + "'");
    std::vector<OpenFace> cond;
    std::vector<BranchSource> src{BranchSource::constant(shape_parameters(geom.boxes[b]))};
    for (std::size_t f = 0; f < faces.size(); ++f) {
      cond.push_back({faces[f], BcKind::Robin, 1.0, 1.0});
      src.push_back(BranchSource::face(static_cast<int>(f), setup.sensors));
    }
    out.push_back(std::make_shared<NeuralSolver>(label, it->second, StructuredGrid(geom.boxes[b], setup.neural_counts),
                                                 cond, src, stretching_map(geom.boxes[b]).map));
  }
  return out;
}

/**
 * Per shape: monolithic refined reference resistance, framework-2 solve under
 * the binding, resistance from the out port, and potential errors against a
 * monolithic solve on the binding's grids. Per-shape failures are recorded.
 */
inline ResistanceReport resistance_experiment(const std::vector<ShapeParams>& shapes, const ResistanceSetup& setup) {
  using clock = std::chrono::steady_clock;
  ResistanceReport rep;
  for (const auto& params : shapes) {
    ResistanceSample rs;
    rs.shape = params;
    try {
      const auto s = decompose_shape(setup.shape, params);
      const auto& geom = s.decomposition.geometry;
      const Box out_patch = port_patch(s, s.out_port);
      auto t0 = clock::now();
      const auto ref_counts = counts_for_spacing(geom, setup.reference_spacing);
      const auto ref = solve_resistance_potential(geom, s.in_port, s.out_port, setup.sigma, ref_counts, setup.opts);
      rs.r_true = extract_resistance(ref, out_patch, setup.sigma);
      auto t1 = clock::now();
      const auto solvers = resistance_solvers(s, setup);
      auto sched = setup.schedule;
      sched.scheme = Scheme::Framework2;
      const auto r = run_framework2(solvers, sched);
      rs.iterations = r.iterations_used;
      rs.converged = r.converged;
      rs.r_pred = extract_resistance(r.fields, out_patch, setup.sigma);
      auto t2 = clock::now();
      std::vector<GridCounts> counts;
      for (const auto& f : r.fields) counts.push_back(f.grid.counts());
      const auto same = solve_resistance_potential(geom, s.in_port, s.out_port, setup.sigma, counts, setup.opts);
      const auto err = compare_fields(r.fields, same);
      rs.ml2re = err.ml2re;
      rs.mae = err.mae;
      rs.re = std::abs(rs.r_true - rs.r_pred) / std::abs(rs.r_true);
      rs.ok = true;
      rep.seconds_reference += std::chrono::duration<double>(t1 - t0).count();
      rep.seconds_solve += std::chrono::duration<double>(t2 - t1).count();
    } catch (const std::exception& e) {
      rs.error = e.what();
      ++rep.failures;
    }
    rep.samples.push_back(std::move(rs));
  }
  std::vector<double> truth, pred, ml2, mae;
  for (const auto& s : rep.samples)
    if (s.ok) {
      truth.push_back(s.r_true);
      pred.push_back(s.r_pred);
      ml2.push_back(s.ml2re);
      mae.push_back(s.mae);
    }
  if (!truth.empty()) {
    const auto [m, re] = mre_re(truth, pred);
    rep.mre = m;
    rep.fraction_within_5pct =
        static_cast<double>(std::count_if(re.begin(), re.end(), [](double v) { return v <= 0.05; })) /
        static_cast<double>(rep.samples.size());
    std::sort(ml2.begin(), ml2.end());
    std::sort(mae.begin(), mae.end());
    rep.ml2re = std::accumulate(ml2.begin(), ml2.end(), 0.0) / static_cast<double>(ml2.size());
    rep.mae = std::accumulate(mae.begin(), mae.end(), 0.0) / static_cast<double>(mae.size());
  }
  return rep;
}

}  // namespace ddon
