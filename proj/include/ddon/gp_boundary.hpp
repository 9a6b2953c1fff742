#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "ddon/errors.hpp"
#include "ddon/geometry.hpp"
#include "ddon/grid.hpp"
#include "ddon/rng.hpp"

namespace ddon {

/// Zero-mean Gaussian process with a squared-exponential kernel.
struct GpSpec {
  double correlation_length = 0.5;
  double variance = 1.0;
  /// Added to the covariance diagonal; negative selects the default 1e-10 * variance.
  double jitter = -1.0;
  std::uint64_t seed = 0;

  double effective_jitter() const { return jitter < 0 ? 1e-10 * variance : jitter; }

  void validate() const {
    if (!(correlation_length > 0)) throw PreconditionError("GP correlation length must be positive");
    if (!(variance > 0)) throw PreconditionError("GP variance must be positive");
  }
};

/// k(x, x') = variance * exp(-|x - x'|^2 / (2 l^2)), without jitter.
inline Eigen::MatrixXd gp_covariance(const GpSpec& spec, std::span<const Point> points) {
  const auto m = static_cast<Eigen::Index>(points.size());
  Eigen::MatrixXd k(m, m);
  const double inv = 1.0 / (2.0 * spec.correlation_length * spec.correlation_length);
  for (Eigen::Index i = 0; i < m; ++i) {
    for (Eigen::Index j = 0; j <= i; ++j) {
      double d2 = 0;
      for (int a = 0; a < 3; ++a) {
        const double d = points[i][a] - points[j][a];
        d2 += d * d;
      }
      const double v = spec.variance * std::exp(-d2 * inv);
      k(i, j) = v;
      k(j, i) = v;
    }
  }
  return k;
}

/**
 * @brief Cholesky-factored GP over a fixed point set; draws are L z, z ~ N(0, I).
 */
class GpSampler {
 public:
  GpSampler(const GpSpec& spec, std::span<const Point> points) : spec_(spec) {
    spec.validate();
    if (points.empty()) throw PreconditionError("GP needs at least one point");
    for (std::size_t i = 0; i < points.size(); ++i)
      for (std::size_t j = 0; j < i; ++j)
        if (points[i] == points[j])
          throw PreconditionError("GP points " + std::to_string(j) + " and " + std::to_string(i) + " coincide");
    Eigen::MatrixXd k = gp_covariance(spec, points);
    k.diagonal().array() += spec.effective_jitter();
    Eigen::LLT<Eigen::MatrixXd> llt(k);
    if (llt.info() != Eigen::Success || !llt.matrixL().toDenseMatrix().allFinite())
      throw FactorizationError("covariance is not positive definite; increase the jitter");
    l_ = llt.matrixL();
    for (Eigen::Index i = 0; i < l_.rows(); ++i)
      if (!(l_(i, i) > 0)) throw FactorizationError("covariance is not positive definite; increase the jitter");
  }

  std::size_t size() const { return static_cast<std::size_t>(l_.rows()); }

  std::vector<double> draw(Rng& rng) const {
    Eigen::VectorXd z(l_.rows());
    for (Eigen::Index i = 0; i < z.size(); ++i) z[i] = rng.normal();
    Eigen::VectorXd x = l_.triangularView<Eigen::Lower>() * z;
    return {x.data(), x.data() + x.size()};
  }

 private:
  GpSpec spec_;
  Eigen::MatrixXd l_;
};

/// `count` draws at `points`; row i is draw i. Deterministic given spec.seed.
inline Eigen::MatrixXd sample_gp(const GpSpec& spec, std::span<const Point> points, std::size_t count) {
  if (count < 1) throw PreconditionError("GP sample count must be at least 1");
  GpSampler s(spec, points);
  Rng rng(spec.seed);
  Eigen::MatrixXd out(static_cast<Eigen::Index>(count), static_cast<Eigen::Index>(points.size()));
  for (std::size_t i = 0; i < count; ++i) {
    const auto v = s.draw(rng);
    for (std::size_t j = 0; j < v.size(); ++j) out(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = v[j];
  }
  return out;
}

namespace detail {

/// Patch-local offsets of the face nodes (flat axis gets one node).
inline std::vector<Point> patch_offsets(const Box& patch, const GridCounts& n) {
  patch.validate_patch();
  const int flat = patch.flat_axis();
  GridCounts c = n;
  c[flat] = 1;
  std::vector<Point> pts;
  MultiIndex i{0, 0, 0};
  const int d = patch.dim;
  for (i[0] = 0; i[0] < (d > 0 ? c[0] : 1); ++i[0])
    for (i[1] = 0; i[1] < (d > 1 ? c[1] : 1); ++i[1])
      for (i[2] = 0; i[2] < (d > 2 ? c[2] : 1); ++i[2]) {
        Point p{0, 0, 0};
        for (int k = 0; k < d; ++k)
          if (k != flat) p[k] = i[k] == c[k] - 1 ? patch.extent(k) : i[k] * patch.extent(k) / (c[k] - 1);
        pts.push_back(p);
      }
  return pts;
}

}  // namespace detail

/// Node points of a face patch on an n-node grid (flat axis gets one node).
inline std::vector<Point> patch_points(const Box& patch, const GridCounts& n) {
  auto pts = detail::patch_offsets(patch, n);
  for (auto& p : pts)
    for (int k = 0; k < patch.dim; ++k) p[k] = k == patch.flat_axis() ? patch.lo[k] : (p[k] == patch.extent(k) ? patch.hi[k] : patch.lo[k] + p[k]);
  return pts;
}

/**
 * Synthetic interface data: `count` GP traces on the interface's node grid
 * (counts per axis; the normal axis is ignored). Distances are measured in
 * patch-local coordinates.
 */
inline std::vector<FaceTrace> sample_interface_space(const GpSpec& spec, const Interface& iface, const GridCounts& grid_n,
                                                     std::size_t count) {
  const auto pts = patch_points(iface.patch, grid_n);
  const auto local = detail::patch_offsets(iface.patch, grid_n);
  const auto draws = sample_gp(spec, local, count);
  std::vector<FaceTrace> out(count);
  for (std::size_t s = 0; s < count; ++s) {
    out[s].patch = iface.patch;
    out[s].points = pts;
    out[s].values.resize(pts.size());
    for (std::size_t j = 0; j < pts.size(); ++j)
      out[s].values[j] = draws(static_cast<Eigen::Index>(s), static_cast<Eigen::Index>(j));
  }
  return out;
}

}  // namespace ddon
