#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "ddon/errors.hpp"
#include "ddon/geometry.hpp"
#include "ddon/rng.hpp"

namespace ddon {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

// ---------------------------------------------------------------------------
// metrics

/// Mean over samples of |pred_i - true_i|_2 / |true_i|_2.
inline double ml2re(const std::vector<std::vector<double>>& pred, const std::vector<std::vector<double>>& truth) {
  if (pred.size() != truth.size() || pred.empty()) throw ShapeError("ml2re needs equal, non-empty sample lists");
  double acc = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].size() != truth[i].size()) throw ShapeError("ml2re sample " + std::to_string(i) + " length mismatch");
    double num = 0, den = 0;
    for (std::size_t j = 0; j < pred[i].size(); ++j) {
      const double d = pred[i][j] - truth[i][j];
      num += d * d;
      den += truth[i][j] * truth[i][j];
    }
    if (den == 0.0) throw ZeroNormError("true values of sample " + std::to_string(i) + " have zero norm");
    acc += std::sqrt(num) / std::sqrt(den);
  }
  return acc / static_cast<double>(pred.size());
}

inline double ml2re(std::span<const double> pred, std::span<const double> truth) {
  return ml2re(std::vector<std::vector<double>>{{pred.begin(), pred.end()}},
               std::vector<std::vector<double>>{{truth.begin(), truth.end()}});
}

/// Mean absolute error over all samples and points.
inline double mae(const std::vector<std::vector<double>>& pred, const std::vector<std::vector<double>>& truth) {
  if (pred.size() != truth.size() || pred.empty()) throw ShapeError("mae needs equal, non-empty sample lists");
  double acc = 0;
  std::size_t count = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    if (pred[i].size() != truth[i].size()) throw ShapeError("mae sample " + std::to_string(i) + " length mismatch");
    for (std::size_t j = 0; j < pred[i].size(); ++j) acc += std::abs(truth[i][j] - pred[i][j]);
    count += pred[i].size();
  }
  return count ? acc / static_cast<double>(count) : 0.0;
}

inline double mae(std::span<const double> pred, std::span<const double> truth) {
  return mae(std::vector<std::vector<double>>{{pred.begin(), pred.end()}},
             std::vector<std::vector<double>>{{truth.begin(), truth.end()}});
}

// ---------------------------------------------------------------------------
// networks

/**
 * @brief Fully connected ReLU network, identity on the output layer.
 *
 * Activations are column-major batches: one column per input.
 */
struct Mlp {
  std::vector<int> sizes;
  std::vector<Matrix> weights;  // weights[l] is sizes[l+1] x sizes[l]
  std::vector<Vector> biases;

  Mlp() = default;

  explicit Mlp(std::vector<int> layer_sizes) : sizes(std::move(layer_sizes)) {
    if (sizes.size() < 2) throw ShapeError("an MLP needs at least input and output sizes");
    for (int s : sizes)
      if (s < 1) throw ShapeError("layer sizes must be positive");
    for (std::size_t l = 0; l + 1 < sizes.size(); ++l) {
      weights.push_back(Matrix::Zero(sizes[l + 1], sizes[l]));
      biases.push_back(Vector::Zero(sizes[l + 1]));
    }
  }

  /// Xavier-normal weights (std sqrt(2/(fan_in+fan_out))), zero biases.
  static Mlp xavier(std::vector<int> layer_sizes, Rng& rng) {
    Mlp m(std::move(layer_sizes));
    for (auto& w : m.weights) {
      const double sd = std::sqrt(2.0 / static_cast<double>(w.rows() + w.cols()));
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = sd * rng.normal();
    }
    return m;
  }

  int input_width() const { return sizes.front(); }
  int output_width() const { return sizes.back(); }
  std::size_t layers() const { return weights.size(); }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < weights.size(); ++l) n += static_cast<std::size_t>(weights[l].size() + biases[l].size());
    return n;
  }

  /// Forward pass; when `tape` is given, stores the input and every layer output.
  Matrix forward(const Matrix& x, std::vector<Matrix>* tape = nullptr) const {
    if (x.rows() != input_width())
      throw ShapeError("MLP expects input width " + std::to_string(input_width()) + ", got " + std::to_string(x.rows()));
    if (tape) {
      tape->clear();
      tape->push_back(x);
    }
    Matrix a = x;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      Matrix z = weights[l] * a;
      z.colwise() += biases[l];
      if (l + 1 < weights.size()) z = z.cwiseMax(0.0);
      a = std::move(z);
      if (tape) tape->push_back(a);
    }
    return a;
  }

  /**
   * Backward pass from d(loss)/d(output); accumulates parameter gradients
   * into `grad` (same shapes) and returns d(loss)/d(input) when requested.
   * ReLU'(0) = 0.
   */
  void backward(const std::vector<Matrix>& tape, Matrix dout, Mlp& grad, Matrix* dinput = nullptr) const {
    for (std::size_t l = weights.size(); l-- > 0;) {
      if (l + 1 < weights.size()) dout = dout.cwiseProduct((tape[l + 1].array() > 0.0).cast<double>().matrix());
      grad.weights[l].noalias() += dout * tape[l].transpose();
      grad.biases[l] += dout.rowwise().sum();
      if (l > 0 || dinput) {
        Matrix next = weights[l].transpose() * dout;
        dout = std::move(next);
      }
    }
    if (dinput) *dinput = std::move(dout);
  }

  Mlp zeros_like() const {
    Mlp g;
    g.sizes = sizes;
    for (std::size_t l = 0; l < weights.size(); ++l) {
      g.weights.push_back(Matrix::Zero(weights[l].rows(), weights[l].cols()));
      g.biases.push_back(Vector::Zero(biases[l].size()));
    }
    return g;
  }
};

enum class Fusion { Product, Sum };

inline std::string to_string(Fusion f) { return f == Fusion::Product ? "product" : "sum"; }

inline Fusion fusion_from_string(const std::string& s) {
  if (s == "product") return Fusion::Product;
  if (s == "sum") return Fusion::Sum;
  throw FormatError("unknown fusion rule '" + s + "'");
}

/// Layer sizes of an operator net.
struct NetArchitecture {
  std::vector<std::vector<int>> branches;
  std::vector<int> trunk;
  Fusion fusion = Fusion::Product;

  int latent_dim() const { return trunk.empty() ? 0 : trunk.back(); }

  void validate() const {
    if (branches.empty()) throw ShapeError("an operator net needs at least one branch");
    if (trunk.size() < 2) throw ShapeError("trunk needs input and output sizes");
    for (const auto& b : branches)
      if (b.size() < 2 || b.back() != latent_dim())
        throw ShapeError("every branch must end at the latent width " + std::to_string(latent_dim()));
  }
};

/**
 * @brief Branch/trunk operator network.
 *
 * G(u)(x_j) = < fuse_b(branch_b(u_b)), trunk(x_j) >, where fuse is the
 * elementwise product (default) or sum over branches.
 */
struct OperatorNet {
  std::vector<Mlp> branches;
  Mlp trunk;
  Fusion fusion = Fusion::Product;
  std::uint64_t seed = 0;
  nlohmann::json metadata = nlohmann::json::object();

  static OperatorNet create(const NetArchitecture& arch, std::uint64_t seed) {
    arch.validate();
    OperatorNet net;
    net.fusion = arch.fusion;
    net.seed = seed;
    Rng rng(derive_seed(seed, 0x1a17));
    for (const auto& b : arch.branches) net.branches.push_back(Mlp::xavier(b, rng));
    net.trunk = Mlp::xavier(arch.trunk, rng);
    return net;
  }

  NetArchitecture architecture() const {
    NetArchitecture a;
    for (const auto& b : branches) a.branches.push_back(b.sizes);
    a.trunk = trunk.sizes;
    a.fusion = fusion;
    return a;
  }

  int latent_dim() const { return trunk.output_width(); }
  int trunk_dim() const { return trunk.input_width(); }

  std::size_t parameter_count() const {
    std::size_t n = trunk.parameter_count();
    for (const auto& b : branches) n += b.parameter_count();
    return n;
  }

  void validate() const {
    if (branches.empty()) throw ShapeError("an operator net needs at least one branch");
    for (const auto& b : branches)
      if (b.output_width() != latent_dim()) throw ShapeError("branch and trunk latent widths differ");
  }

  /// Trunk input matrix (dim x M) from points.
  Matrix trunk_input(std::span<const Point> pts) const {
    Matrix x(trunk_dim(), static_cast<Eigen::Index>(pts.size()));
    for (std::size_t j = 0; j < pts.size(); ++j)
      for (int k = 0; k < trunk_dim(); ++k) x(k, static_cast<Eigen::Index>(j)) = pts[j][k];
    return x;
  }

  /// Fused branch embedding (latent x N) from per-branch input matrices (width_b x N).
  Matrix fuse(const std::vector<Matrix>& outs) const {
    Matrix f = outs[0];
    for (std::size_t b = 1; b < outs.size(); ++b) {
      if (fusion == Fusion::Product)
        f = f.cwiseProduct(outs[b]);
      else
        f += outs[b];
    }
    return f;
  }

  /// Batched evaluation: N samples sharing one trunk point set; returns N x M.
  Matrix forward_batch(const std::vector<Matrix>& branch_inputs, const Matrix& trunk_in) const {
    if (branch_inputs.size() != branches.size())
      throw ShapeError("expected " + std::to_string(branches.size()) + " branch inputs, got " +
                       std::to_string(branch_inputs.size()));
    std::vector<Matrix> outs;
    for (std::size_t b = 0; b < branches.size(); ++b) {
      if (branch_inputs[b].rows() != branches[b].input_width())
        throw ShapeError("branch " + std::to_string(b) + " expects width " + std::to_string(branches[b].input_width()) +
                         ", got " + std::to_string(branch_inputs[b].rows()));
      outs.push_back(branches[b].forward(branch_inputs[b]));
    }
    const Matrix t = trunk.forward(trunk_in);
    return fuse(outs).transpose() * t;
  }

  std::vector<double> forward(const std::vector<std::vector<double>>& branch_inputs, std::span<const Point> pts) const {
    std::vector<Matrix> in;
    for (const auto& v : branch_inputs) in.push_back(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
    const Matrix y = forward_batch(in, trunk_input(pts));
    return {y.data(), y.data() + y.size()};
  }

  OperatorNet zeros_like() const {
    OperatorNet g;
    for (const auto& b : branches) g.branches.push_back(b.zeros_like());
    g.trunk = trunk.zeros_like();
    g.fusion = fusion;
    return g;
  }

  /// Visit every parameter block in canonical order: branches, then trunk; per layer W then b.
  template <typename F>
  void for_each_block(F&& f) {
    auto visit = [&](Mlp& m) {
      for (std::size_t l = 0; l < m.layers(); ++l) {
        f(m.weights[l].data(), static_cast<std::size_t>(m.weights[l].size()));
        f(m.biases[l].data(), static_cast<std::size_t>(m.biases[l].size()));
      }
    };
    for (auto& b : branches) visit(b);
    visit(trunk);
  }
};

// ---------------------------------------------------------------------------
// training

/// One training example: branch sensor vectors, query points and target values.
struct OperatorSample {
  std::vector<std::vector<double>> branch_inputs;
  std::shared_ptr<const std::vector<Point>> trunk_points;
  std::vector<double> targets;
};

enum class LossKind { Ml2re, Mse };

struct TrainConfig {
  std::size_t batch_size = 64;
  double lr_init = 2e-4;
  double lr_decay_per_step = 1.0;
  std::size_t iterations = 1000;
  std::uint64_t seed = 0;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  LossKind loss = LossKind::Ml2re;
  std::size_t log_interval = 100;
  /// Query points per step drawn from each sample's point set (0 = all).
  std::size_t points_per_step = 0;

  void validate() const {
    if (batch_size < 1) throw PreconditionError("batch_size must be at least 1");
    if (!(lr_init >= 0)) throw PreconditionError("lr_init must be non-negative");
    if (!(lr_decay_per_step > 0 && lr_decay_per_step <= 1)) throw PreconditionError("lr_decay_per_step must be in (0, 1]");
    if (log_interval < 1) throw PreconditionError("log_interval must be at least 1");
  }
};

struct LossRecord {
  std::size_t step = 0;
  double train_loss = 0;
  double test_loss = -1;  // negative when no test set
};

namespace detail {

/// Samples grouped by shared trunk point set, with the trunk input precomputed.
struct PointGroup {
  const std::vector<Point>* points = nullptr;
  Matrix trunk_in;
};

inline void check_sample(const OperatorNet& net, const OperatorSample& s, std::size_t index) {
  if (s.branch_inputs.size() != net.branches.size())
    throw ShapeError("sample " + std::to_string(index) + " has " + std::to_string(s.branch_inputs.size()) +
                     " branch inputs, net expects " + std::to_string(net.branches.size()));
  for (std::size_t b = 0; b < net.branches.size(); ++b)
    if (static_cast<int>(s.branch_inputs[b].size()) != net.branches[b].input_width())
      throw ShapeError("sample " + std::to_string(index) + " branch " + std::to_string(b) + " has width " +
                       std::to_string(s.branch_inputs[b].size()) + ", expected " +
                       std::to_string(net.branches[b].input_width()));
  if (!s.trunk_points) throw ShapeError("sample " + std::to_string(index) + " has no trunk points");
  if (s.targets.size() != s.trunk_points->size())
    throw ShapeError("sample " + std::to_string(index) + " has mismatched targets and trunk points");
}

/// Loss over rows of y vs t and its gradient.
inline double loss_and_grad(LossKind kind, const Matrix& y, const Matrix& t, double weight, Matrix* dy) {
  const Matrix e = y - t;
  double total = 0;
  if (dy) dy->resize(y.rows(), y.cols());
  for (Eigen::Index i = 0; i < y.rows(); ++i) {
    if (kind == LossKind::Ml2re) {
      const double tn = t.row(i).norm();
      if (tn == 0.0) throw ZeroNormError("target of batch row " + std::to_string(i) + " has zero norm");
      const double en = e.row(i).norm();
      total += en / tn;
      if (dy) {
        if (en > 0)
          dy->row(i) = e.row(i) * (weight / (en * tn));
        else
          dy->row(i).setZero();
      }
    } else {
      const double m = static_cast<double>(y.cols());
      total += e.row(i).squaredNorm() / m;
      if (dy) dy->row(i) = e.row(i) * (2.0 * weight / m);
    }
  }
  return total;
}

}  // namespace detail

/**
 * Loss of `net` on samples `idx` (all sharing `points`) and, when `grad` is
 * non-null, its gradient scaled by `weight` accumulated into `grad`.
 * `cols` optionally restricts the query points used.
 */
inline double batch_loss(const OperatorNet& net, std::span<const OperatorSample> data, std::span<const std::size_t> idx,
                         const Matrix& trunk_in, LossKind kind, double weight, OperatorNet* grad,
                         std::span<const Eigen::Index> cols = {}) {
  const auto n = static_cast<Eigen::Index>(idx.size());
  const Matrix tin = cols.empty() ? trunk_in : trunk_in(Eigen::all, std::vector<Eigen::Index>(cols.begin(), cols.end()));
  const Eigen::Index m = tin.cols();
  std::vector<Matrix> bin(net.branches.size());
  for (std::size_t b = 0; b < net.branches.size(); ++b) {
    bin[b].resize(net.branches[b].input_width(), n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const auto& v = data[idx[static_cast<std::size_t>(i)]].branch_inputs[b];
      bin[b].col(i) = Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
    }
  }
  Matrix target(n, m);
  for (Eigen::Index i = 0; i < n; ++i) {
    const auto& t = data[idx[static_cast<std::size_t>(i)]].targets;
    if (cols.empty())
      target.row(i) = Eigen::Map<const Eigen::RowVectorXd>(t.data(), m);
    else
      for (Eigen::Index j = 0; j < m; ++j) target(i, j) = t[static_cast<std::size_t>(cols[static_cast<std::size_t>(j)])];
  }

  std::vector<std::vector<Matrix>> btape(net.branches.size());
  std::vector<Matrix> bout(net.branches.size());
  for (std::size_t b = 0; b < net.branches.size(); ++b)
    bout[b] = net.branches[b].forward(bin[b], grad ? &btape[b] : nullptr);
  std::vector<Matrix> ttape;
  const Matrix t = net.trunk.forward(tin, grad ? &ttape : nullptr);
  const Matrix fused = net.fuse(bout);
  const Matrix y = fused.transpose() * t;
  Matrix dy;
  const double loss = detail::loss_and_grad(kind, y, target, weight, grad ? &dy : nullptr);
  if (!grad) return loss;

  const Matrix dfused = t * dy.transpose();  // latent x N
  const Matrix dt = fused * dy;              // latent x M
  net.trunk.backward(ttape, dt, grad->trunk);
  for (std::size_t b = 0; b < net.branches.size(); ++b) {
    Matrix db = dfused;
    if (net.fusion == Fusion::Product)
      for (std::size_t c = 0; c < net.branches.size(); ++c)
        if (c != b) db = db.cwiseProduct(bout[c]);
    net.branches[b].backward(btape[b], db, grad->branches[b]);
  }
  return loss;
}

/// Mean loss over a dataset (no gradient).
inline double evaluate_loss(const OperatorNet& net, std::span<const OperatorSample> data, LossKind kind = LossKind::Ml2re) {
  if (data.empty()) throw PreconditionError("empty dataset");
  std::map<const std::vector<Point>*, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < data.size(); ++i) {
    detail::check_sample(net, data[i], i);
    groups[data[i].trunk_points.get()].push_back(i);
  }
  double total = 0;
  for (const auto& [pts, idx] : groups) {
    const Matrix tin = net.trunk_input(*pts);
    for (std::size_t s = 0; s < idx.size(); s += 256) {
      const std::size_t e = std::min(idx.size(), s + 256);
      total += batch_loss(net, data, std::span<const std::size_t>(idx).subspan(s, e - s), tin, kind, 0.0, nullptr);
    }
  }
  return total / static_cast<double>(data.size());
}

/// Predictions for every sample of a dataset.
inline std::vector<std::vector<double>> predict(const OperatorNet& net, std::span<const OperatorSample> data) {
  std::vector<std::vector<double>> out(data.size());
  for (std::size_t i = 0; i < data.size(); ++i) {
    detail::check_sample(net, data[i], i);
    out[i] = net.forward(data[i].branch_inputs, *data[i].trunk_points);
  }
  return out;
}

struct TrainResult {
  OperatorNet net;
  std::vector<LossRecord> history;
};

/**
 * Adam on minibatches of the chosen loss with lr = lr_init * decay^step.
 * Batches walk a seeded permutation of the dataset (reshuffled per epoch);
 * samples of one batch are grouped by trunk point set in index order so the
 * gradient accumulation order is fixed.
 */
inline TrainResult train(OperatorNet net, std::span<const OperatorSample> data, const TrainConfig& cfg,
                         std::span<const OperatorSample> test = {},
                         const std::function<void(const LossRecord&)>& on_log = {}) {
  cfg.validate();
  net.validate();
  if (data.empty()) throw PreconditionError("training needs a non-empty dataset");
  for (std::size_t i = 0; i < data.size(); ++i) detail::check_sample(net, data[i], i);
  for (std::size_t i = 0; i < test.size(); ++i) detail::check_sample(net, test[i], i);

  std::map<const std::vector<Point>*, Matrix> trunk_inputs;
  for (const auto& s : data)
    if (!trunk_inputs.count(s.trunk_points.get())) trunk_inputs[s.trunk_points.get()] = net.trunk_input(*s.trunk_points);

  OperatorNet m1 = net.zeros_like(), m2 = net.zeros_like(), grad = net.zeros_like();
  Rng order_rng(derive_seed(cfg.seed, 0x5u));
  Rng point_rng(derive_seed(cfg.seed, 0x9u));
  std::vector<std::size_t> perm(data.size());
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  shuffle(perm, order_rng);
  std::size_t cursor = 0;

  TrainResult result;
  double window = 0;
  std::size_t window_n = 0;
  double lr = cfg.lr_init;
  double b1t = 1, b2t = 1;
  const std::size_t bs = std::min(cfg.batch_size, data.size());

  for (std::size_t step = 0; step < cfg.iterations; ++step) {
    std::vector<std::size_t> batch;
    batch.reserve(bs);
    for (std::size_t k = 0; k < bs; ++k) {
      if (cursor == perm.size()) {
        shuffle(perm, order_rng);
        cursor = 0;
      }
      batch.push_back(perm[cursor++]);
    }
    std::sort(batch.begin(), batch.end());
    std::map<const std::vector<Point>*, std::vector<std::size_t>> groups;
    for (auto i : batch) groups[data[i].trunk_points.get()].push_back(i);
    // deterministic group order: by first sample index
    std::vector<std::pair<std::size_t, const std::vector<Point>*>> order;
    for (const auto& [p, idx] : groups) order.emplace_back(idx.front(), p);
    std::sort(order.begin(), order.end());

    grad.for_each_block([](double* p, std::size_t n) { std::fill_n(p, n, 0.0); });
    double loss = 0;
    const double w = 1.0 / static_cast<double>(bs);
    for (const auto& [first, pts] : order) {
      const auto& idx = groups[pts];
      std::vector<Eigen::Index> cols;
      if (cfg.points_per_step > 0 && cfg.points_per_step < pts->size()) {
        std::vector<Eigen::Index> all(pts->size());
        std::iota(all.begin(), all.end(), Eigen::Index{0});
        for (std::size_t k = 0; k < cfg.points_per_step; ++k) {
          const auto j = k + static_cast<std::size_t>(point_rng.below(all.size() - k));
          std::swap(all[k], all[j]);
        }
        cols.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(cfg.points_per_step));
        std::sort(cols.begin(), cols.end());
      }
      loss += batch_loss(net, data, idx, trunk_inputs.at(pts), cfg.loss, w, &grad, cols);
    }
    loss *= w;
    if (!std::isfinite(loss)) throw DivergenceError("training loss became non-finite at step " + std::to_string(step));
    window += loss;
    ++window_n;

    // Adam
    b1t *= cfg.adam_beta1;
    b2t *= cfg.adam_beta2;
    if (lr != 0.0) {
      std::vector<std::pair<double*, std::size_t>> gp, m1p, m2p, pp;
      grad.for_each_block([&](double* p, std::size_t n) { gp.emplace_back(p, n); });
      m1.for_each_block([&](double* p, std::size_t n) { m1p.emplace_back(p, n); });
      m2.for_each_block([&](double* p, std::size_t n) { m2p.emplace_back(p, n); });
      net.for_each_block([&](double* p, std::size_t n) { pp.emplace_back(p, n); });
      const double c1 = 1.0 / (1.0 - b1t), c2 = 1.0 / (1.0 - b2t);
      for (std::size_t blk = 0; blk < gp.size(); ++blk) {
        double* g = gp[blk].first;
        double* a = m1p[blk].first;
        double* v = m2p[blk].first;
        double* p = pp[blk].first;
        for (std::size_t k = 0; k < gp[blk].second; ++k) {
          a[k] = cfg.adam_beta1 * a[k] + (1 - cfg.adam_beta1) * g[k];
          v[k] = cfg.adam_beta2 * v[k] + (1 - cfg.adam_beta2) * g[k] * g[k];
          p[k] -= lr * (a[k] * c1) / (std::sqrt(v[k] * c2) + cfg.adam_eps);
        }
      }
    }
    lr *= cfg.lr_decay_per_step;

    if ((step + 1) % cfg.log_interval == 0 || step + 1 == cfg.iterations) {
      LossRecord r{step + 1, window / static_cast<double>(window_n), -1};
      if (!test.empty()) r.test_loss = evaluate_loss(net, test, cfg.loss);
      if (!std::isfinite(r.train_loss)) throw DivergenceError("training loss became non-finite at step " + std::to_string(step));
      result.history.push_back(r);
      if (on_log) on_log(r);
      window = 0;
      window_n = 0;
    }
  }
  result.net = std::move(net);
  return result;
}

// ---------------------------------------------------------------------------
// gradient check

namespace detail {

using MatrixL = Eigen::Matrix<long double, Eigen::Dynamic, Eigen::Dynamic>;
using VectorL = Eigen::Matrix<long double, Eigen::Dynamic, 1>;

/// Extended-precision loss of a single sample with parameter `flat` shifted by `delta`.
/// Also records the sign pattern of every hidden pre-activation.
inline long double extended_loss(const OperatorNet& net, const OperatorSample& s, LossKind kind, std::size_t flat,
                                 long double delta, std::vector<bool>& pattern) {
  pattern.clear();
  std::size_t counter = 0;
  auto run = [&](const Mlp& m, MatrixL a) {
    for (std::size_t l = 0; l < m.layers(); ++l) {
      MatrixL w = m.weights[l].cast<long double>();
      VectorL b = m.biases[l].cast<long double>();
      if (flat >= counter && flat < counter + static_cast<std::size_t>(w.size())) w.data()[flat - counter] += delta;
      counter += static_cast<std::size_t>(w.size());
      if (flat >= counter && flat < counter + static_cast<std::size_t>(b.size())) b[static_cast<Eigen::Index>(flat - counter)] += delta;
      counter += static_cast<std::size_t>(b.size());
      MatrixL z = w * a;
      z.colwise() += b;
      if (l + 1 < m.layers()) {
        for (Eigen::Index i = 0; i < z.size(); ++i) pattern.push_back(z.data()[i] > 0);
        z = z.cwiseMax(0.0L);
      }
      a = std::move(z);
    }
    return a;
  };
  MatrixL fused;
  for (std::size_t b = 0; b < net.branches.size(); ++b) {
    const auto& v = s.branch_inputs[b];
    MatrixL in(static_cast<Eigen::Index>(v.size()), 1);
    for (std::size_t k = 0; k < v.size(); ++k) in(static_cast<Eigen::Index>(k), 0) = v[k];
    MatrixL out = run(net.branches[b], in);
    if (b == 0)
      fused = out;
    else if (net.fusion == Fusion::Product)
      fused = fused.cwiseProduct(out);
    else
      fused += out;
  }
  const MatrixL t = run(net.trunk, net.trunk_input(*s.trunk_points).cast<long double>());
  const MatrixL y = fused.transpose() * t;
  long double num = 0, den = 0;
  for (Eigen::Index j = 0; j < y.cols(); ++j) {
    const long double tj = s.targets[static_cast<std::size_t>(j)];
    num += (y(0, j) - tj) * (y(0, j) - tj);
    den += tj * tj;
  }
  return kind == LossKind::Ml2re ? std::sqrt(num) / std::sqrt(den) : num / static_cast<long double>(y.cols());
}

}  // namespace detail

struct GradientCheckResult {
  double max_relative_error = 0;
  std::size_t checked = 0;
  std::size_t step_reductions = 0;
};

/**
 * Backprop gradient of the single-sample loss against central differences
 * on `count` random parameters; the difference quotients are evaluated in
 * extended precision. Relative error is |a-b| / max(|a|, |b|, f) with floor
 * f = 1e-3 * max|grad|. When a perturbation flips a ReLU the step is shrunk
 * (down to 1e-10) so the quotient stays on one side of the kink.
 */
inline GradientCheckResult gradient_check(const OperatorNet& net, const OperatorSample& sample, std::size_t count = 100,
                                          double step = 1e-6, std::uint64_t seed = 7, LossKind kind = LossKind::Ml2re) {
  detail::check_sample(net, sample, 0);
  std::vector<OperatorSample> one{sample};
  const std::vector<std::size_t> idx{0};
  OperatorNet grad = net.zeros_like();
  batch_loss(net, one, idx, net.trunk_input(*sample.trunk_points), kind, 1.0, &grad);
  std::vector<double> g;
  grad.for_each_block([&](double* p, std::size_t n) { g.insert(g.end(), p, p + n); });
  double gmax = 0;
  for (double v : g) gmax = std::max(gmax, std::abs(v));
  const double floor = std::max(1e-3 * gmax, 1e-300);

  std::vector<bool> base, plus, minus;
  detail::extended_loss(net, sample, kind, g.size(), 0, base);
  GradientCheckResult res;
  Rng rng(seed);
  for (std::size_t c = 0; c < count && !g.empty(); ++c) {
    const auto flat = static_cast<std::size_t>(rng.below(g.size()));
    long double h = step;
    double fd = 0;
    while (true) {
      const long double lp = detail::extended_loss(net, sample, kind, flat, h, plus);
      const long double lm = detail::extended_loss(net, sample, kind, flat, -h, minus);
      fd = static_cast<double>((lp - lm) / (2 * h));
      if ((plus == base && minus == base) || h <= 1e-10L) break;
      h *= 0.1L;
      ++res.step_reductions;
    }
    const double denom = std::max({std::abs(g[flat]), std::abs(fd), floor});
    res.max_relative_error = std::max(res.max_relative_error, std::abs(g[flat] - fd) / denom);
    ++res.checked;
  }
  return res;
}

// ---------------------------------------------------------------------------
// checkpoints

inline constexpr std::uint32_t kCheckpointVersion = 1;

namespace detail {

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
inline void put_f64(std::string& out, double d) { put_u64(out, std::bit_cast<std::uint64_t>(d)); }

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;

  void need(std::size_t n, const char* what) const {
    if (pos + n > buf.size())
      throw FormatError(std::string("truncated ") + what + " at byte offset " + std::to_string(pos));
  }
  std::uint64_t uint(int bytes, const char* what) {
    need(static_cast<std::size_t>(bytes), what);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + i])) << (8 * i);
    pos += static_cast<std::size_t>(bytes);
    return v;
  }
  double f64(const char* what) { return std::bit_cast<double>(uint(8, what)); }
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointNotFoundError("cannot open '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write '" + path.string() + "'");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

}  // namespace detail

/// Serialise: "DDON", u32 version, u64 header length, JSON header, LE f64 parameters.
inline std::string serialize_checkpoint(const OperatorNet& net) {
  nlohmann::json h;
  h["latent_dim"] = net.latent_dim();
  h["fusion"] = to_string(net.fusion);
  h["branches"] = nlohmann::json::array();
  for (const auto& b : net.branches) h["branches"].push_back(b.sizes);
  h["trunk"] = net.trunk.sizes;
  h["seed"] = net.seed;
  h["metadata"] = net.metadata;
  const std::string header = h.dump();
  std::string out = "DDON";
  detail::put_u32(out, kCheckpointVersion);
  detail::put_u64(out, header.size());
  out += header;
  auto emit = [&](const Mlp& m) {
    for (std::size_t l = 0; l < m.layers(); ++l) {
      const auto& w = m.weights[l];
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) detail::put_f64(out, w(i, j));
      for (Eigen::Index i = 0; i < m.biases[l].size(); ++i) detail::put_f64(out, m.biases[l][i]);
    }
  };
  for (const auto& b : net.branches) emit(b);
  emit(net.trunk);
  return out;
}

inline OperatorNet deserialize_checkpoint(const std::string& buf) {
  detail::Reader r{buf};
  r.need(4, "magic");
  if (buf.compare(0, 4, "DDON") != 0) throw FormatError("bad magic at byte offset 0");
  r.pos = 4;
  const auto version = static_cast<std::uint32_t>(r.uint(4, "version"));
  if (version != kCheckpointVersion) throw VersionError("unsupported checkpoint version " + std::to_string(version));
  const auto hlen = r.uint(8, "header length");
  r.need(hlen, "header");
  nlohmann::json h;
  try {
    h = nlohmann::json::parse(buf.substr(r.pos, hlen));
  } catch (const std::exception& e) {
    throw FormatError("malformed header at byte offset " + std::to_string(r.pos) + ": " + e.what());
  }
  r.pos += hlen;
  OperatorNet net;
  try {
    net.fusion = fusion_from_string(h.at("fusion").get<std::string>());
    for (const auto& b : h.at("branches")) net.branches.emplace_back(b.get<std::vector<int>>());
    net.trunk = Mlp(h.at("trunk").get<std::vector<int>>());
    net.seed = h.at("seed").get<std::uint64_t>();
    net.metadata = h.value("metadata", nlohmann::json::object());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("incomplete header: ") + e.what());
  } catch (const ShapeError& e) {
    throw FormatError(std::string("invalid layer sizes in header: ") + e.what());
  }
  auto fill = [&](Mlp& m) {
    for (std::size_t l = 0; l < m.layers(); ++l) {
      auto& w = m.weights[l];
      for (Eigen::Index i = 0; i < w.rows(); ++i)
        for (Eigen::Index j = 0; j < w.cols(); ++j) w(i, j) = r.f64("weights");
      for (Eigen::Index i = 0; i < m.biases[l].size(); ++i) m.biases[l][i] = r.f64("biases");
    }
  };
  for (auto& b : net.branches) fill(b);
  fill(net.trunk);
  if (r.pos != buf.size()) throw FormatError("trailing bytes at byte offset " + std::to_string(r.pos));
  try {
    net.validate();
  } catch (const ShapeError& e) {
    throw FormatError(e.what());
  }
  return net;
}

inline void save_checkpoint(const OperatorNet& net, const std::filesystem::path& path) {
  detail::write_file(path, serialize_checkpoint(net));
}

inline OperatorNet load_checkpoint(const std::filesystem::path& path) {
  return deserialize_checkpoint(detail::read_file(path));
}

// ---------------------------------------------------------------------------
// presets

namespace detail {

inline std::vector<int> layers(int in, int width, int depth) {
  std::vector<int> v{in};
  for (int i = 0; i < depth; ++i) v.push_back(width);
  return v;
}

}  // namespace detail

/**
 * Named architectures. Hidden widths are the reference widths divided by 16
 * and face-sensor grids are coarsened (25x25 -> 7x7, 21x21 -> 6x6,
 * 37x37 -> 10x10); the "-desk" suffix marks the scaling.
 */
inline const std::map<std::string, NetArchitecture>& architecture_presets() {
  using detail::layers;
  static const std::map<std::string, NetArchitecture> presets = [] {
    std::map<std::string, NetArchitecture> m;
    auto two = [](std::vector<int> b, std::vector<int> t) { return NetArchitecture{{b, b}, t, Fusion::Product}; };
    // unit cube, two sensor branches (interface g and, for D-R, the fixed face)
    m["cube-5k-desk"] = two(layers(49, 16, 4), layers(3, 16, 4));
    m["cube-desk"] = two(layers(49, 32, 4), layers(3, 32, 4));
    m["cube-iteration-free-desk"] = two(layers(100, 64, 4), layers(3, 64, 4));
    // resistance: shape/coefficient branch plus one branch per interface
    m["resistance-end-desk"] = NetArchitecture{{layers(6, 32, 1), layers(36, 32, 4)}, layers(3, 32, 4), Fusion::Product};
    m["resistance-corner-desk"] =
        NetArchitecture{{layers(6, 32, 1), layers(36, 32, 4), layers(36, 32, 4)}, layers(3, 32, 4), Fusion::Product};
    m["resistance-junction-desk"] = NetArchitecture{
        {layers(6, 64, 1), layers(36, 64, 4), layers(36, 64, 4), layers(36, 64, 4)}, layers(3, 64, 4), Fusion::Product};
    // pipe flow and drift-diffusion (architectures only)
    m["pipe-flow-desk"] =
        NetArchitecture{{layers(6, 8, 1), layers(40, 8, 3), layers(40, 8, 3)}, layers(2, 8, 3), Fusion::Product};
    m["pipe-flow-outlet-desk"] =
        NetArchitecture{{layers(6, 32, 3), layers(40, 32, 3), layers(1, 32, 3)}, layers(2, 32, 3), Fusion::Product};
    m["drift-diffusion-desk"] =
        NetArchitecture{{layers(9, 32, 3), layers(11, 32, 3), layers(2, 32, 3)}, layers(2, 32, 3), Fusion::Product};
    // 2D Laplace strip halves (32 sensors per branch) and the single-net baseline on the whole strip
    m["laplace-strip-desk"] = two(layers(32, 64, 3), layers(2, 64, 3));
    m["laplace-strip-global-desk"] = two(layers(32, 128, 3), layers(2, 128, 3));
    // multimedium
    m["multimedium-lower-desk"] =
        NetArchitecture{{layers(5, 16, 3), layers(49, 16, 3)}, layers(3, 16, 3), Fusion::Product};
    m["multimedium-upper-desk"] =
        NetArchitecture{{layers(2, 16, 3), layers(4, 16, 3)}, layers(3, 16, 3), Fusion::Product};
    return m;
  }();
  return presets;
}

inline NetArchitecture architecture_preset(const std::string& name) {
  const auto& m = architecture_presets();
  const auto it = m.find(name);
  if (it == m.end()) throw PreconditionError("unknown architecture preset '" + name + "'");
  return it->second;
}

}  // namespace ddon
