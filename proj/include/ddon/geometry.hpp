#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "ddon/errors.hpp"

namespace ddon {

/// Coordinates are stored in a fixed 3-array; components beyond `dim` are 0.
using Point = std::array<double, 3>;

inline constexpr double kGeomTol = 1e-12;

inline bool near(double a, double b, double scale = 1.0) {
  return std::abs(a - b) <= kGeomTol * std::max(1.0, scale);
}

enum class Side { Low, High };

/// One face of an axis-aligned box: the `side` end of axis `axis`.
struct Face {
  int axis = 0;
  Side side = Side::Low;

  /// Sign of the outward normal along `axis`.
  int sign() const { return side == Side::High ? 1 : -1; }
  Face opposite() const { return {axis, side == Side::High ? Side::Low : Side::High}; }
  bool operator==(const Face&) const = default;
};

inline std::string to_string(const Face& f) {
  static constexpr const char* names[] = {"x", "y", "z"};
  return std::string(f.side == Side::Low ? "-" : "+") + names[f.axis];
}

/**
 * @brief Axis-aligned box in 1, 2 or 3 dimensions.
 *
 * Solid boxes have strictly positive extent on every axis (`validate`). The
 * same type also describes face patches, which have zero extent on exactly
 * one axis (`validate_patch`).
 */
struct Box {
  int dim = 0;
  Point lo{0, 0, 0};
  Point hi{0, 0, 0};

  double extent(int k) const { return hi[k] - lo[k]; }

  double scale() const {
    double s = 0;
    for (int k = 0; k < dim; ++k) s = std::max({s, std::abs(lo[k]), std::abs(hi[k])});
    return s;
  }

  double volume() const {
    double v = 1;
    for (int k = 0; k < dim; ++k) v *= extent(k);
    return v;
  }

  /// (d-1)-measure of a patch, i.e. the product of the non-zero extents.
  double face_measure() const {
    double v = 1;
    for (int k = 0; k < dim; ++k)
      if (extent(k) > 0) v *= extent(k);
    return v;
  }

  Point center() const {
    Point c{0, 0, 0};
    for (int k = 0; k < dim; ++k) c[k] = 0.5 * (lo[k] + hi[k]);
    return c;
  }

  bool contains(const Point& p, double tol = kGeomTol) const {
    const double t = tol * std::max(1.0, scale());
    for (int k = 0; k < dim; ++k)
      if (p[k] < lo[k] - t || p[k] > hi[k] + t) return false;
    return true;
  }

  bool contains(const Box& other, double tol = kGeomTol) const {
    const double t = tol * std::max({1.0, scale(), other.scale()});
    for (int k = 0; k < dim; ++k)
      if (other.lo[k] < lo[k] - t || other.hi[k] > hi[k] + t) return false;
    return true;
  }

  /// The face as a degenerate patch box.
  Box face_patch(const Face& f) const {
    Box p = *this;
    const double c = f.side == Side::Low ? lo[f.axis] : hi[f.axis];
    p.lo[f.axis] = c;
    p.hi[f.axis] = c;
    return p;
  }

  /// Axis with zero extent, or -1 for a solid box.
  int flat_axis() const {
    for (int k = 0; k < dim; ++k)
      if (extent(k) == 0) return k;
    return -1;
  }

  void validate() const {
    if (dim < 1 || dim > 3) throw GeometryError("box dimension must be 1, 2 or 3, got " + std::to_string(dim));
    for (int k = 0; k < dim; ++k)
      if (!(hi[k] > lo[k]))
        throw GeometryError("box has non-positive extent on axis " + std::to_string(k));
  }

  void validate_patch() const {
    int flat = 0;
    for (int k = 0; k < dim; ++k) {
      if (hi[k] < lo[k]) throw GeometryError("patch has negative extent on axis " + std::to_string(k));
      if (hi[k] == lo[k]) ++flat;
    }
    if (flat != 1) throw GeometryError("patch must have zero extent on exactly one axis");
  }

  bool operator==(const Box&) const = default;
};

inline Box make_box(std::span<const double> lo, std::span<const double> hi) {
  if (lo.size() != hi.size()) throw GeometryError("box corner dimensions differ");
  Box b;
  b.dim = static_cast<int>(lo.size());
  if (b.dim < 1 || b.dim > 3) throw GeometryError("box dimension must be 1, 2 or 3");
  std::copy(lo.begin(), lo.end(), b.lo.begin());
  std::copy(hi.begin(), hi.end(), b.hi.begin());
  b.validate();
  return b;
}

inline Box make_box(std::initializer_list<double> lo, std::initializer_list<double> hi) {
  return make_box(std::span<const double>(lo.begin(), lo.size()),
                  std::span<const double>(hi.begin(), hi.size()));
}

/// Face patch: a box with zero extent on exactly one axis.
inline Box make_patch(std::initializer_list<double> lo, std::initializer_list<double> hi) {
  if (lo.size() != hi.size() || lo.size() < 1 || lo.size() > 3) throw GeometryError("bad patch corners");
  Box b;
  b.dim = static_cast<int>(lo.size());
  std::copy(lo.begin(), lo.end(), b.lo.begin());
  std::copy(hi.begin(), hi.end(), b.hi.begin());
  b.validate_patch();
  return b;
}

inline std::string to_string(const Box& b) {
  std::ostringstream os;
  os << "[";
  for (int k = 0; k < b.dim; ++k) os << (k ? "x" : "") << "[" << b.lo[k] << "," << b.hi[k] << "]";
  os << "]";
  return os.str();
}

/// Intersection of two boxes (possibly empty: check `hi >= lo`).
inline Box intersect(const Box& a, const Box& b) {
  Box r;
  r.dim = a.dim;
  for (int k = 0; k < a.dim; ++k) {
    r.lo[k] = std::max(a.lo[k], b.lo[k]);
    r.hi[k] = std::min(a.hi[k], b.hi[k]);
  }
  return r;
}

/// Face of `box` that `patch` lies on, if any.
inline std::optional<Face> face_containing(const Box& box, const Box& patch) {
  const int axis = patch.flat_axis();
  if (axis < 0) return std::nullopt;
  const double s = std::max(box.scale(), patch.scale());
  for (Side side : {Side::Low, Side::High}) {
    const Face f{axis, side};
    const double c = side == Side::Low ? box.lo[axis] : box.hi[axis];
    if (near(c, patch.lo[axis], s) && box.face_patch(f).contains(patch)) return f;
  }
  return std::nullopt;
}

/**
 * @brief Ordered union of labelled boxes.
 *
 * The union must be connected: boxes are adjacent when they share a face
 * region of positive (d-1)-measure or overlap with positive volume.
 */
struct CompositeGeometry {
  std::vector<Box> boxes;
  std::vector<std::string> labels;

  std::size_t size() const { return boxes.size(); }

  std::size_t index_of(const std::string& label) const {
    auto it = std::find(labels.begin(), labels.end(), label);
    if (it == labels.end()) throw GeometryError("unknown box label '" + label + "'");
    return static_cast<std::size_t>(it - labels.begin());
  }

  const Box& box(const std::string& label) const { return boxes[index_of(label)]; }

  double volume_sum() const {
    double v = 0;
    for (const auto& b : boxes) v += b.volume();
    return v;
  }
};

namespace detail {

enum class Contact { None, Face, Volume };

inline Contact contact(const Box& a, const Box& b) {
  const double s = std::max(a.scale(), b.scale());
  int touching = 0;
  for (int k = 0; k < a.dim; ++k) {
    const double lo = std::max(a.lo[k], b.lo[k]);
    const double hi = std::min(a.hi[k], b.hi[k]);
    if (hi < lo && !near(hi, lo, s)) return Contact::None;
    if (near(hi, lo, s)) ++touching;
  }
  if (touching == 0) return Contact::Volume;
  return touching == 1 ? Contact::Face : Contact::None;
}

}  // namespace detail

inline CompositeGeometry make_composite(std::vector<Box> boxes, std::vector<std::string> labels) {
  if (boxes.empty()) throw GeometryError("composite geometry needs at least one box");
  if (boxes.size() != labels.size()) throw GeometryError("one label per box required");
  for (const auto& b : boxes) {
    b.validate();
    if (b.dim != boxes.front().dim) throw GeometryError("boxes of mixed dimension");
  }
  for (std::size_t i = 0; i < labels.size(); ++i)
    for (std::size_t j = i + 1; j < labels.size(); ++j)
      if (labels[i] == labels[j]) throw GeometryError("duplicate label '" + labels[i] + "'");

  // connectivity by flood fill over the contact graph
  std::vector<bool> seen(boxes.size(), false);
  std::vector<std::size_t> stack{0};
  seen[0] = true;
  while (!stack.empty()) {
    const auto i = stack.back();
    stack.pop_back();
    for (std::size_t j = 0; j < boxes.size(); ++j) {
      if (seen[j] || detail::contact(boxes[i], boxes[j]) == detail::Contact::None) continue;
      seen[j] = true;
      stack.push_back(j);
    }
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end())
    throw GeometryError("composite geometry is not connected");
  return {std::move(boxes), std::move(labels)};
}

/**
 * @brief A face patch through which two subdomains exchange data.
 *
 * `patch` lies on a face of `owner_a` and inside the closure of `owner_b`.
 * `orientation_from_a` is the sign of owner_a's outward normal on the patch.
 */
struct Interface {
  std::string owner_a;
  std::string owner_b;
  Box patch;
  int normal_axis = 0;
  int orientation_from_a = 1;

  /// The face of owner_a this interface sits on.
  Face face_of_a() const { return {normal_axis, orientation_from_a > 0 ? Side::High : Side::Low}; }
};

struct Decomposition {
  CompositeGeometry geometry;
  std::vector<Interface> interfaces;
  std::vector<std::string> warnings;
};

/**
 * Face-matched interfaces of a non-overlapping composite. Each shared face is
 * reported once with owner_a the lower-indexed box. Contact that does not
 * cover a full face of both boxes raises GeometryError.
 */
inline std::vector<Interface> find_interfaces(const CompositeGeometry& g) {
  std::vector<Interface> out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    for (std::size_t j = i + 1; j < g.size(); ++j) {
      const Box& a = g.boxes[i];
      const Box& b = g.boxes[j];
      const auto c = detail::contact(a, b);
      if (c == detail::Contact::Volume)
        throw GeometryError("boxes '" + g.labels[i] + "' and '" + g.labels[j] + "' overlap");
      if (c == detail::Contact::None) continue;
      const Box patch = intersect(a, b);
      const int axis = [&] {
        for (int k = 0; k < a.dim; ++k)
          if (near(patch.lo[k], patch.hi[k], a.scale())) return k;
        return -1;
      }();
      Box p = patch;
      p.hi[axis] = p.lo[axis];
      const auto fa = face_containing(a, p);
      const auto fb = face_containing(b, p);
      if (!fa || !fb || !(p.contains(a.face_patch(*fa)) && p.contains(b.face_patch(*fb))))
        throw GeometryError("partial-face contact between '" + g.labels[i] + "' and '" + g.labels[j] + "'");
      out.push_back({g.labels[i], g.labels[j], p, axis, fa->sign()});
    }
  }
  return out;
}

/**
 * Overlapping two-way split along `axis`: A spans [lo, cut_hi], B spans
 * [cut_lo, hi]. The interfaces are A's fictitious boundary at cut_hi and B's
 * at cut_lo.
 */
inline Decomposition make_overlap_partition(const Box& domain, int axis, double cut_lo, double cut_hi) {
  domain.validate();
  if (axis < 0 || axis >= domain.dim) throw RangeError("axis out of range");
  if (!(cut_lo < cut_hi)) throw OrderingError("overlap cuts must satisfy cut_lo < cut_hi");
  if (!(domain.lo[axis] < cut_lo && cut_hi < domain.hi[axis]))
    throw RangeError("overlap cuts must lie strictly inside the domain");
  Box a = domain;
  Box b = domain;
  a.hi[axis] = cut_hi;
  b.lo[axis] = cut_lo;
  Decomposition d;
  d.geometry = make_composite({a, b}, {"D1", "D2"});
  d.interfaces.push_back({"D1", "D2", a.face_patch({axis, Side::High}), axis, +1});
  d.interfaces.push_back({"D2", "D1", b.face_patch({axis, Side::Low}), axis, -1});
  return d;
}

/// Non-overlapping tiling along `axis` at strictly ascending interior cuts.
inline Decomposition make_nonoverlap_partition(const Box& domain, int axis, std::span<const double> cuts) {
  domain.validate();
  if (axis < 0 || axis >= domain.dim) throw RangeError("axis out of range");
  for (std::size_t i = 1; i < cuts.size(); ++i)
    if (!(cuts[i - 1] < cuts[i])) throw OrderingError("cuts must be strictly ascending");
  for (double c : cuts)
    if (!(domain.lo[axis] < c && c < domain.hi[axis])) throw RangeError("cut outside the domain");
  std::vector<Box> boxes;
  std::vector<std::string> labels;
  double start = domain.lo[axis];
  for (std::size_t i = 0; i <= cuts.size(); ++i) {
    Box b = domain;
    b.lo[axis] = start;
    b.hi[axis] = i < cuts.size() ? cuts[i] : domain.hi[axis];
    start = b.hi[axis];
    boxes.push_back(b);
    labels.push_back("D" + std::to_string(i + 1));
  }
  Decomposition d;
  d.geometry = make_composite(std::move(boxes), std::move(labels));
  d.interfaces = find_interfaces(d.geometry);
  return d;
}

inline Decomposition make_nonoverlap_partition(const Box& domain, int axis, std::initializer_list<double> cuts) {
  return make_nonoverlap_partition(domain, axis, std::span<const double>(cuts.begin(), cuts.size()));
}

/// An exterior face of one box of a composite, used as a current port.
struct Port {
  std::string box_label;
  Face face;
};

struct ShapeParams {
  double h = 0, w1 = 0, w2 = 0, l1 = 0, l2 = 0, l3 = 0;
};

struct ConductorShape {
  Decomposition decomposition;
  Port in_port;
  Port out_port;
};

namespace detail {

inline std::vector<std::string> check_shape_params(const ShapeParams& p) {
  const std::array<std::pair<const char*, double>, 6> vals{
      {{"h", p.h}, {"w1", p.w1}, {"w2", p.w2}, {"l1", p.l1}, {"l2", p.l2}, {"l3", p.l3}}};
  const std::array<std::pair<double, double>, 6> ranges{{{1, 3}, {1, 3}, {1, 3}, {4, 6}, {5, 8}, {2, 5}}};
  std::vector<std::string> warnings;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    if (!(vals[i].second > 0)) throw NonPositiveError(std::string("shape parameter ") + vals[i].first + " must be positive");
    if (vals[i].second < ranges[i].first || vals[i].second > ranges[i].second)
      warnings.push_back(std::string("shape parameter ") + vals[i].first + " outside its nominal range");
  }
  return warnings;
}

}  // namespace detail

/*
 * L-shape (top view, z in [0,h]):
 *
 *        y
 *        ^
 *   w1+l2+----+
 *        |sub3|   arm along +y, width w2, length l2     <- out port (y = w1+l2)
 *        |    |
 *     w1 +----+--------------------+
 *        |sub2|        sub1        |  arm along +x, width w1, length l1+l3
 *      0 +----+--------------------+--> x              <- in port (x = w2+l1+l3)
 *        0    w2               w2+l1+l3
 *
 * sub2 is the w2 x w1 x h corner cuboid adjacent to both arms.
 */
inline ConductorShape decompose_L_shape(const ShapeParams& p) {
  auto warnings = detail::check_shape_params(p);
  const double xe = p.w2 + p.l1 + p.l3;
  Box arm_x = make_box({p.w2, 0, 0}, {xe, p.w1, p.h});
  Box corner = make_box({0, 0, 0}, {p.w2, p.w1, p.h});
  Box arm_y = make_box({0, p.w1, 0}, {p.w2, p.w1 + p.l2, p.h});
  ConductorShape s;
  s.decomposition.geometry = make_composite({arm_x, corner, arm_y}, {"sub1", "sub2", "sub3"});
  s.decomposition.interfaces = find_interfaces(s.decomposition.geometry);
  s.decomposition.warnings = std::move(warnings);
  s.in_port = {"sub1", {0, Side::High}};
  s.out_port = {"sub3", {1, Side::High}};
  return s;
}

/*
 * T-shape (top view, z in [0,h]):
 *
 *            l1        w2        l3
 *      +----------+--------+----------+  y = l2+w1
 *      |   sub1   |  sub2  |   sub3   |  bar, width w1     <- out port: sub3 at +x
 *      +----------+--------+----------+  y = l2
 *                 |  sub4  |             stem, width w2, length l2
 *                 |        |
 *                 +--------+             y = 0             <- in port: sub4 at -y
 *                 l1      l1+w2
 *
 * sub2 is the junction cuboid; every contact is a full shared face.
 */
inline ConductorShape decompose_T_shape(const ShapeParams& p) {
  auto warnings = detail::check_shape_params(p);
  const double yb = p.l2;
  const double yt = p.l2 + p.w1;
  Box left = make_box({0, yb, 0}, {p.l1, yt, p.h});
  Box junction = make_box({p.l1, yb, 0}, {p.l1 + p.w2, yt, p.h});
  Box right = make_box({p.l1 + p.w2, yb, 0}, {p.l1 + p.w2 + p.l3, yt, p.h});
  Box stem = make_box({p.l1, 0, 0}, {p.l1 + p.w2, yb, p.h});
  ConductorShape s;
  s.decomposition.geometry = make_composite({left, junction, right, stem}, {"sub1", "sub2", "sub3", "sub4"});
  s.decomposition.interfaces = find_interfaces(s.decomposition.geometry);
  s.decomposition.warnings = std::move(warnings);
  s.in_port = {"sub4", {1, Side::Low}};
  s.out_port = {"sub3", {0, Side::High}};
  return s;
}

/**
 * @brief Per-axis affine map x -> scale * (x + shift).
 */
struct AffineMap {
  int dim = 0;
  Point scale{1, 1, 1};
  Point shift{0, 0, 0};

  static AffineMap identity(int dim) { return {dim, {1, 1, 1}, {0, 0, 0}}; }
  static AffineMap translation(int dim, const Point& shift) { return {dim, {1, 1, 1}, shift}; }
  /// Map of `b` onto [-1, 1]^dim.
  static AffineMap centering(const Box& b) {
    AffineMap m{b.dim, {1, 1, 1}, {0, 0, 0}};
    for (int k = 0; k < b.dim; ++k) {
      m.shift[k] = -0.5 * (b.lo[k] + b.hi[k]);
      m.scale[k] = 2.0 / b.extent(k);
    }
    return m;
  }

  Point apply(const Point& x) const {
    Point r{0, 0, 0};
    for (int k = 0; k < dim; ++k) r[k] = scale[k] * (x[k] + shift[k]);
    return r;
  }

  Point invert(const Point& y) const {
    Point r{0, 0, 0};
    for (int k = 0; k < dim; ++k) r[k] = y[k] / scale[k] - shift[k];
    return r;
  }

  AffineMap inverse() const {
    AffineMap m{dim, {1, 1, 1}, {0, 0, 0}};
    for (int k = 0; k < dim; ++k) {
      m.scale[k] = 1.0 / scale[k];
      m.shift[k] = -scale[k] * shift[k];
    }
    return m;
  }

  Box apply(const Box& b) const {
    Box r = b;
    r.lo = apply(b.lo);
    r.hi = apply(b.hi);
    return r;
  }

  void validate() const {
    for (int k = 0; k < dim; ++k)
      if (!(scale[k] > 0)) throw GeometryError("affine map scale must be positive");
  }
};

struct Stretching {
  AffineMap map;
  /// c[k] = 1/len_k^2: the Laplacian on the box equals sum_k c[k] d^2/dxi_k^2 on the unit box.
  Point coefficients{1, 1, 1};
};

inline Stretching stretching_map(const Box& box) {
  box.validate();
  Stretching s;
  s.map.dim = box.dim;
  for (int k = 0; k < box.dim; ++k) {
    const double len = box.extent(k);
    s.map.scale[k] = 1.0 / len;
    s.map.shift[k] = -box.lo[k];
    s.coefficients[k] = 1.0 / (len * len);
  }
  return s;
}

inline Box unit_box(int dim) {
  Box b;
  b.dim = dim;
  for (int k = 0; k < dim; ++k) b.hi[k] = 1.0;
  return b;
}

}  // namespace ddon
