#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ddon/errors.hpp"
#include "ddon/geometry.hpp"

namespace ddon {

/// Per-axis node counts; unused axes hold 1.
using GridCounts = std::array<int, 3>;
using MultiIndex = std::array<int, 3>;

/**
 * @brief Node-centred tensor-product grid on a box, boundary nodes included.
 *
 * Flat indices are row-major with the last axis fastest.
 */
class StructuredGrid {
 public:
  StructuredGrid() = default;

  StructuredGrid(const Box& box, std::span<const int> n) : box_(box) {
    box.validate();
    if (static_cast<int>(n.size()) != box.dim)
      throw GeometryError("grid needs one node count per axis");
    for (int k = 0; k < box.dim; ++k) {
      if (n[k] < 3) throw RangeError("grid needs at least 3 nodes per axis");
      n_[k] = n[k];
      h_[k] = box.extent(k) / (n[k] - 1);
    }
    size_ = static_cast<std::size_t>(n_[0]) * n_[1] * n_[2];
    stride_ = {static_cast<std::size_t>(n_[1]) * n_[2], static_cast<std::size_t>(n_[2]), 1};
  }

  StructuredGrid(const Box& box, std::initializer_list<int> n)
      : StructuredGrid(box, std::span<const int>(n.begin(), n.size())) {}

  StructuredGrid(const Box& box, const GridCounts& n)
      : StructuredGrid(box, std::span<const int>(n.data(), static_cast<std::size_t>(box.dim))) {}

  const Box& box() const { return box_; }
  int dim() const { return box_.dim; }
  int n(int k) const { return n_[k]; }
  const GridCounts& counts() const { return n_; }
  double spacing(int k) const { return h_[k]; }
  std::size_t size() const { return size_; }
  std::size_t stride(int k) const { return stride_[k]; }

  std::size_t flat(const MultiIndex& i) const {
    return static_cast<std::size_t>(i[0]) * stride_[0] + static_cast<std::size_t>(i[1]) * stride_[1] +
           static_cast<std::size_t>(i[2]);
  }

  MultiIndex multi(std::size_t f) const {
    MultiIndex i{0, 0, 0};
    i[0] = static_cast<int>(f / stride_[0]);
    f %= stride_[0];
    i[1] = static_cast<int>(f / stride_[1]);
    i[2] = static_cast<int>(f % stride_[1]);
    return i;
  }

  double coord(int k, int i) const { return i == n_[k] - 1 ? box_.hi[k] : box_.lo[k] + i * h_[k]; }

  Point node(const MultiIndex& i) const {
    Point p{0, 0, 0};
    for (int k = 0; k < dim(); ++k) p[k] = coord(k, i[k]);
    return p;
  }

  Point node(std::size_t f) const { return node(multi(f)); }

  std::vector<Point> nodes() const {
    std::vector<Point> out(size_);
    for (std::size_t f = 0; f < size_; ++f) out[f] = node(f);
    return out;
  }

  /// Tangential axes of a face, ascending.
  std::vector<int> tangential_axes(int normal_axis) const {
    std::vector<int> t;
    for (int k = 0; k < dim(); ++k)
      if (k != normal_axis) t.push_back(k);
    return t;
  }

  /// Flat indices of the nodes on a face, row-major over the tangential axes.
  std::vector<std::size_t> face_nodes(const Face& f) const {
    std::vector<std::size_t> out;
    out.reserve(face_node_count(f));
    MultiIndex lo{0, 0, 0};
    MultiIndex hi{n_[0], n_[1], n_[2]};
    const int fixed = f.side == Side::Low ? 0 : n_[f.axis] - 1;
    lo[f.axis] = fixed;
    hi[f.axis] = fixed + 1;
    for (int a = lo[0]; a < hi[0]; ++a)
      for (int b = lo[1]; b < hi[1]; ++b)
        for (int c = lo[2]; c < hi[2]; ++c) out.push_back(flat({a, b, c}));
    return out;
  }

  std::size_t face_node_count(const Face& f) const { return size_ / static_cast<std::size_t>(n_[f.axis]); }

  bool operator==(const StructuredGrid& o) const { return box_ == o.box_ && n_ == o.n_; }

 private:
  Box box_;
  GridCounts n_{1, 1, 1};
  std::array<double, 3> h_{0, 0, 0};
  std::array<std::size_t, 3> stride_{1, 1, 1};
  std::size_t size_ = 0;
};

/// Nodal scalar field on a structured grid.
struct Field {
  StructuredGrid grid;
  std::vector<double> values;

  Field() = default;
  explicit Field(StructuredGrid g, double fill = 0.0) : grid(std::move(g)), values(grid.size(), fill) {}
  Field(StructuredGrid g, std::vector<double> v) : grid(std::move(g)), values(std::move(v)) {
    if (values.size() != grid.size()) throw ShapeError("field value count does not match grid");
  }

  double& operator[](std::size_t i) { return values[i]; }
  double operator[](std::size_t i) const { return values[i]; }
  double at(const MultiIndex& i) const { return values[grid.flat(i)]; }

  bool all_finite() const {
    for (double v : values)
      if (!std::isfinite(v)) return false;
    return true;
  }
};

/// Samples of data on an interface or face patch.
struct FaceTrace {
  Box patch;
  std::vector<Point> points;
  std::vector<double> values;
};

namespace detail {

struct AxisWeight {
  int i0 = 0;
  double t = 0;
};

/// Cell index and local coordinate along one axis, snapping to nodes.
inline AxisWeight locate(const StructuredGrid& g, int k, double x) {
  const int n = g.n(k);
  double s = (x - g.box().lo[k]) / g.spacing(k);
  const double r = std::round(s);
  if (std::abs(s - r) < 1e-9) s = r;
  s = std::clamp(s, 0.0, static_cast<double>(n - 1));
  int i0 = static_cast<int>(std::floor(s));
  if (i0 >= n - 1) i0 = n - 2;
  return {i0, s - i0};
}

}  // namespace detail

inline double interpolate_point(const Field& field, const Point& p) {
  const auto& g = field.grid;
  const int d = g.dim();
  std::array<detail::AxisWeight, 3> w{};
  for (int k = 0; k < d; ++k) w[k] = detail::locate(g, k, p[k]);
  double acc = 0;
  const int corners = 1 << d;
  for (int c = 0; c < corners; ++c) {
    double wt = 1;
    MultiIndex idx{0, 0, 0};
    for (int k = 0; k < d; ++k) {
      const int bit = (c >> k) & 1;
      idx[k] = w[k].i0 + bit;
      wt *= bit ? w[k].t : 1.0 - w[k].t;
    }
    if (wt != 0.0) acc += wt * field.at(idx);
  }
  return acc;
}

/**
 * Multilinear interpolation at arbitrary points inside the field's box
 * (1e-12 relative slack). Exact at nodes.
 */
inline std::vector<double> interpolate(const Field& field, std::span<const Point> points) {
  std::vector<double> out(points.size());
  const Box& b = field.grid.box();
  for (std::size_t i = 0; i < points.size(); ++i) {
    if (!b.contains(points[i]))
      throw OutOfDomainError("interpolation point " + std::to_string(i) + " lies outside " + to_string(b));
    out[i] = interpolate_point(field, points[i]);
  }
  return out;
}

/**
 * Multilinear interpolation of data stored at the nodes of one face of `grid`
 * (ordering as `StructuredGrid::face_nodes`).
 */
inline double interpolate_on_face(const StructuredGrid& grid, const Face& face, std::span<const double> values,
                                  const Point& p) {
  const auto axes = grid.tangential_axes(face.axis);
  std::array<detail::AxisWeight, 2> w{};
  std::array<std::size_t, 2> stride{0, 0};
  std::size_t s = 1;
  for (int a = static_cast<int>(axes.size()) - 1; a >= 0; --a) {
    w[a] = detail::locate(grid, axes[a], p[axes[a]]);
    stride[a] = s;
    s *= static_cast<std::size_t>(grid.n(axes[a]));
  }
  if (axes.empty()) return values[0];
  double acc = 0;
  const int corners = 1 << axes.size();
  for (int c = 0; c < corners; ++c) {
    double wt = 1;
    std::size_t off = 0;
    for (std::size_t a = 0; a < axes.size(); ++a) {
      const int bit = (c >> a) & 1;
      off += static_cast<std::size_t>(w[a].i0 + bit) * stride[a];
      wt *= bit ? w[a].t : 1.0 - w[a].t;
    }
    if (wt != 0.0) acc += wt * values[off];
  }
  return acc;
}

/// Nodal values on a face, in face-node order.
inline std::vector<double> face_values(const Field& field, const Face& face) {
  const auto idx = field.grid.face_nodes(face);
  std::vector<double> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = field.values[idx[i]];
  return out;
}

inline std::vector<Point> face_points(const StructuredGrid& grid, const Face& face) {
  const auto idx = grid.face_nodes(face);
  std::vector<Point> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = grid.node(idx[i]);
  return out;
}

/**
 * Derivative d/dx_axis on the node plane `plane` using the second-order
 * one-sided stencil (3u(x) - 4u(x-h) + u(x-2h)) / 2h, where the stencil
 * reaches toward lower indices when `backward` is true and toward higher
 * indices otherwise. Values are returned in plane-node order (same ordering
 * as a face on that axis).
 */
inline std::vector<double> one_sided_derivative(const Field& field, int axis, int plane, bool backward) {
  const auto& g = field.grid;
  const int n = g.n(axis);
  if (n < 3) throw DerivativeUnavailableError("one-sided stencil needs 3 nodes along the normal axis");
  if (backward ? plane < 2 : plane > n - 3)
    throw DerivativeUnavailableError("one-sided stencil leaves the grid at plane " + std::to_string(plane));
  const double h = g.spacing(axis);
  const auto step = static_cast<std::ptrdiff_t>(g.stride(axis));
  const std::ptrdiff_t dir = backward ? -step : step;
  const double sgn = backward ? 1.0 : -1.0;
  auto base = g.face_nodes({axis, Side::Low});
  std::vector<double> out(base.size());
  for (std::size_t i = 0; i < base.size(); ++i) {
    const auto f0 = static_cast<std::ptrdiff_t>(base[i]) + plane * step;
    const double u0 = field.values[static_cast<std::size_t>(f0)];
    const double u1 = field.values[static_cast<std::size_t>(f0 + dir)];
    const double u2 = field.values[static_cast<std::size_t>(f0 + 2 * dir)];
    out[i] = sgn * (-4.0 * u1 + u2 + 3.0 * u0) / (2.0 * h);
  }
  return out;
}

/// Outward normal derivative du/dn on a full face of the field's box.
inline FaceTrace normal_derivative(const Field& field, const Face& face) {
  const auto& g = field.grid;
  if (g.n(face.axis) < 3) throw DerivativeUnavailableError("normal axis has fewer than 3 nodes");
  const bool high = face.side == Side::High;
  auto d = one_sided_derivative(field, face.axis, high ? g.n(face.axis) - 1 : 0, high);
  if (!high)
    for (auto& v : d) v = -v;
  return {g.box().face_patch(face), face_points(g, face), std::move(d)};
}

/// Outward normal derivative on an interface patch lying on a face of the field's box.
inline FaceTrace normal_derivative(const Field& field, const Interface& iface) {
  const auto face = face_containing(field.grid.box(), iface.patch);
  if (!face) throw GeometryError("interface patch does not lie on a face of " + to_string(field.grid.box()));
  auto full = normal_derivative(field, *face);
  FaceTrace out;
  out.patch = iface.patch;
  for (std::size_t i = 0; i < full.points.size(); ++i) {
    if (!iface.patch.contains(full.points[i])) continue;
    out.points.push_back(full.points[i]);
    out.values.push_back(full.values[i]);
  }
  return out;
}

/// Resample a field onto a grid over a sub-box.
inline Field restrict(const Field& field, const Box& subbox, std::span<const int> subgrid_n) {
  if (!field.grid.box().contains(subbox))
    throw OutOfDomainError("sub-box " + to_string(subbox) + " is not inside " + to_string(field.grid.box()));
  StructuredGrid sub(subbox, subgrid_n);
  Field out(sub);
  const auto pts = sub.nodes();
  out.values = interpolate(field, pts);
  return out;
}

inline Field restrict(const Field& field, const Box& subbox, const GridCounts& n) {
  return restrict(field, subbox, std::span<const int>(n.data(), static_cast<std::size_t>(subbox.dim)));
}

/// Grid on `sub` with the same spacing as `g` (sub must be aligned to g's nodes).
inline StructuredGrid aligned_subgrid(const StructuredGrid& g, const Box& sub) {
  GridCounts n{1, 1, 1};
  for (int k = 0; k < g.dim(); ++k) {
    const double cells = sub.extent(k) / g.spacing(k);
    const double r = std::round(cells);
    if (std::abs(cells - r) > 1e-8) throw GridMismatchError("sub-box is not aligned with the grid spacing");
    n[k] = static_cast<int>(r) + 1;
  }
  return StructuredGrid(sub, n);
}

}  // namespace ddon
