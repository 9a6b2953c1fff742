#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "ddon/errors.hpp"
#include "ddon/geometry.hpp"
#include "ddon/grid.hpp"
#include "ddon/neuralop.hpp"
#include "ddon/oracle_solver.hpp"

namespace ddon {

/// Condition imposed on an open (interface) face: Dirichlet u = data or Robin alpha u + beta du/dn = data.
struct OpenFace {
  Face face;
  BcKind kind = BcKind::Dirichlet;
  double robin_alpha = 1.0;
  double robin_beta = 1.0;
};

/// A face, or a patch of it, whose data comes from a neighbouring subdomain.
struct OpenBoundary {
  Face face;
  std::optional<Box> patch;

  OpenBoundary(Face f, std::optional<Box> p = std::nullopt) : face(f), patch(std::move(p)) {}
};

/**
 * @brief Solver of one subdomain whose open faces receive data each iteration.
 *
 * Data for open face i is given at the face nodes of `grid()` in
 * StructuredGrid::face_nodes order.
 */
class SubdomainSolver {
 public:
  virtual ~SubdomainSolver() = default;

  virtual const std::string& label() const = 0;
  virtual const StructuredGrid& grid() const = 0;
  virtual bool is_neural() const = 0;
  /// Diffusion coefficient along `axis` (used for the conormal Robin weight).
  virtual double diffusion(int axis) const = 0;

  /// Faces whose data is supplied by the coupling scheme.
  virtual std::vector<Face> open_faces() const = 0;
  /// Part of open face i that is coupled (the whole face unless a patch was given).
  virtual Box open_patch(std::size_t i) const { return box().face_patch(open_faces().at(i)); }
  /// Select the condition type of every open face (same order as open_faces()).
  virtual void prepare(const std::vector<OpenFace>& conditions) = 0;
  virtual Field solve(const std::vector<std::vector<double>>& face_data) const = 0;

  const Box& box() const { return grid().box(); }
};

/**
 * @brief Oracle solver on a subdomain: fixed BCs from a template problem,
 * open faces filled per iteration. The factorisation is built once in
 * prepare() and reused for every solve. With `stretch` the problem is solved
 * on the unit box and relabelled.
 */
class ClassicalSolver : public SubdomainSolver {
 public:
  ClassicalSolver(std::string label, PdeProblem problem, const GridCounts& n, std::vector<OpenBoundary> open,
                  SolverOptions opts = {}, bool stretch = false)
      : label_(std::move(label)),
        problem_(std::move(problem)),
        grid_(problem_.box, n),
        open_(std::move(open)),
        opts_(opts),
        stretch_(stretch) {
    for (const auto& o : open_) {
      if (o.patch && !grid_.box().face_patch(o.face).contains(*o.patch))
        throw GeometryError("open patch of " + label_ + " is not on face " + to_string(o.face));
      for (const auto& bc : problem_.bcs)
        if (bc.face == o.face && !bc.patch && !o.patch)
          throw PreconditionError("open face of " + label_ + " also carries a fixed condition");
    }
    std::vector<OpenFace> dirichlet;
    for (const auto& o : open_) dirichlet.push_back({o.face, BcKind::Dirichlet});
    prepare(dirichlet);
  }

  const std::string& label() const override { return label_; }
  const StructuredGrid& grid() const override { return grid_; }
  bool is_neural() const override { return false; }
  double diffusion(int axis) const override { return problem_.diffusion[axis]; }
  std::vector<Face> open_faces() const override {
    std::vector<Face> f;
    for (const auto& o : open_) f.push_back(o.face);
    return f;
  }
  Box open_patch(std::size_t i) const override {
    const auto& o = open_.at(i);
    return o.patch ? *o.patch : grid_.box().face_patch(o.face);
  }
  const std::vector<OpenFace>& conditions() const { return cond_; }

  /// Open-face data for which `u` is the discrete solution (Dirichlet: nodal values; Robin: consistent g).
  std::vector<std::vector<double>> consistent_data(const Field& u) const {
    if (!(u.grid == grid_)) throw GridMismatchError(label_ + ": field is not on the solver grid");
    const Field local = stretch_ ? relabel(u, op_->blocks().front().grid.box()) : u;
    const std::vector<Field> fields{local};
    std::vector<std::vector<double>> out;
    for (std::size_t i = 0; i < open_.size(); ++i) {
      if (cond_[i].kind == BcKind::Dirichlet)
        out.push_back(face_values(u, open_[i].face));
      else
        out.push_back(op_->consistent_robin_data(fields, op_->default_data(), 0, first_open_ + i));
    }
    return out;
  }

  void prepare(const std::vector<OpenFace>& conditions) override {
    if (conditions.size() != open_.size()) throw PreconditionError("one condition per open face of " + label_);
    PdeProblem p = problem_;
    first_open_ = p.bcs.size();
    for (std::size_t i = 0; i < conditions.size(); ++i) {
      const auto& c = conditions[i];
      if (!(c.face == open_[i].face)) throw PreconditionError("conditions must follow the open-face order of " + label_);
      if (c.kind == BcKind::Neumann) throw PreconditionError("open faces take Dirichlet or Robin data");
      if (c.kind == BcKind::Robin && !(c.robin_beta != 0.0))
        throw PreconditionError("Robin weight on the derivative must be non-zero");
      const std::vector<double> zeros(grid_.face_node_count(c.face), 0.0);
      auto bc = BoundaryCondition::make(c.face, c.kind, zeros, c.robin_alpha, c.robin_beta);
      bc.patch = open_[i].patch;
      p.bcs.push_back(std::move(bc));
    }
    if (stretch_) p = stretch_problem(p);
    StructuredGrid g(p.box, grid_.counts());
    op_ = std::make_shared<EllipticOperator>(std::vector<Block>{block_from_problem(p, g, label_)}, opts_);
    cond_ = conditions;
  }

  Field solve(const std::vector<std::vector<double>>& face_data) const override {
    if (face_data.size() != open_.size())
      throw SolverError(label_ + ": expected data for " + std::to_string(open_.size()) + " open faces");
    auto data = op_->default_data();
    try {
      for (std::size_t i = 0; i < open_.size(); ++i) op_->write_slot(data, 0, first_open_ + i, face_data[i]);
      auto f = op_->solve(data);
      return stretch_ ? relabel(f.front(), grid_.box()) : std::move(f.front());
    } catch (const Error& e) {
      throw SolverError(label_ + ": " + e.what());
    }
  }

 private:
  std::string label_;
  PdeProblem problem_;
  StructuredGrid grid_;
  std::vector<OpenBoundary> open_;
  SolverOptions opts_;
  bool stretch_ = false;
  std::vector<OpenFace> cond_;
  std::size_t first_open_ = 0;
  std::shared_ptr<const EllipticOperator> op_;
};

/// Where a branch of a neural subdomain solver reads its input.
struct BranchSource {
  /// Index into the solver's open faces, or -1 for a fixed input vector.
  int open_face = -1;
  /// Sensor node counts on that face (normal axis ignored); the trace is resampled onto them.
  GridCounts sensors{1, 1, 1};
  std::vector<double> fixed;

  static BranchSource face(int index, const GridCounts& sensors) { return {index, sensors, {}}; }
  static BranchSource constant(std::vector<double> v) { return {-1, {1, 1, 1}, std::move(v)}; }
};

/**
 * @brief Subdomain solved by a trained operator net evaluated at the grid nodes.
 *
 * `trunk_map` takes grid coordinates to the coordinates the net was trained
 * in. `conditions` fixes the condition type each open face was trained for.
 */
class NeuralSolver : public SubdomainSolver {
 public:
  NeuralSolver(std::string label, std::shared_ptr<const OperatorNet> net, StructuredGrid grid,
               std::vector<OpenFace> conditions, std::vector<BranchSource> sources, AffineMap trunk_map = {},
               Point diffusion = {1, 1, 1})
      : label_(std::move(label)),
        net_(std::move(net)),
        grid_(std::move(grid)),
        cond_(std::move(conditions)),
        sources_(std::move(sources)),
        diffusion_(diffusion) {
    if (!net_) throw PreconditionError("neural solver " + label_ + " needs a network");
    if (sources_.size() != net_->branches.size())
      throw ShapeError(label_ + ": " + std::to_string(sources_.size()) + " branch sources for " +
                       std::to_string(net_->branches.size()) + " branches");
    if (trunk_map.dim == 0) trunk_map = AffineMap::identity(grid_.dim());
    points_ = grid_.nodes();
    for (auto& p : points_) p = trunk_map.apply(p);
    trunk_in_ = net_->trunk_input(points_);
    for (std::size_t b = 0; b < sources_.size(); ++b) {
      const auto& s = sources_[b];
      std::size_t width = s.fixed.size();
      if (s.open_face >= 0) {
        if (static_cast<std::size_t>(s.open_face) >= cond_.size())
          throw ShapeError(label_ + ": branch " + std::to_string(b) + " reads a missing open face");
        width = sensor_points(static_cast<std::size_t>(s.open_face)).size();
      }
      if (static_cast<int>(width) != net_->branches[b].input_width())
        throw ShapeError(label_ + ": branch " + std::to_string(b) + " expects width " +
                         std::to_string(net_->branches[b].input_width()) + ", sensor layout gives " +
                         std::to_string(width));
    }
  }

  const std::string& label() const override { return label_; }
  const StructuredGrid& grid() const override { return grid_; }
  bool is_neural() const override { return true; }
  double diffusion(int axis) const override { return diffusion_[axis]; }
  const OperatorNet& net() const { return *net_; }

  std::vector<Face> open_faces() const override {
    std::vector<Face> f;
    for (const auto& c : cond_) f.push_back(c.face);
    return f;
  }

  void prepare(const std::vector<OpenFace>& conditions) override {
    if (conditions.size() != cond_.size()) throw PreconditionError(label_ + ": wrong number of open-face conditions");
    for (std::size_t i = 0; i < cond_.size(); ++i) {
      const auto& a = conditions[i];
      const auto& b = cond_[i];
      if (!(a.face == b.face) || a.kind != b.kind ||
          (a.kind == BcKind::Robin && (a.robin_alpha != b.robin_alpha || a.robin_beta != b.robin_beta)))
        throw PreconditionError(label_ + ": the network was trained for a different condition on open face " +
                                std::to_string(i));
    }
  }

  /// Sensor node coordinates of open face i.
  std::vector<Point> sensor_points(std::size_t i) const {
    for (const auto& s : sources_)
      if (s.open_face == static_cast<int>(i)) {
        StructuredGrid sg = sensor_grid(i, s.sensors);
        return face_points(sg, cond_[i].face);
      }
    return {};
  }

  /// Branch inputs assembled from open-face data (grid face-node order).
  std::vector<std::vector<double>> branch_inputs(const std::vector<std::vector<double>>& face_data) const {
    if (face_data.size() != cond_.size())
      throw SolverError(label_ + ": expected data for " + std::to_string(cond_.size()) + " open faces");
    std::vector<std::vector<double>> in;
    for (const auto& s : sources_) {
      if (s.open_face < 0) {
        in.push_back(s.fixed);
        continue;
      }
      const auto i = static_cast<std::size_t>(s.open_face);
      const auto& data = face_data[i];
      if (data.size() != grid_.face_node_count(cond_[i].face))
        throw ShapeError(label_ + ": open face " + std::to_string(i) + " data has the wrong length");
      const auto pts = face_points(sensor_grid(i, s.sensors), cond_[i].face);
      std::vector<double> v(pts.size());
      for (std::size_t k = 0; k < pts.size(); ++k) v[k] = interpolate_on_face(grid_, cond_[i].face, data, pts[k]);
      in.push_back(std::move(v));
    }
    return in;
  }

  /// Forward pass from complete branch inputs (iteration-free use).
  Field predict(const std::vector<std::vector<double>>& inputs) const {
    std::vector<Matrix> in;
    for (const auto& v : inputs) in.push_back(Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size())));
    const Matrix y = net_->forward_batch(in, trunk_in_);
    Field f(grid_);
    for (std::size_t j = 0; j < f.values.size(); ++j) f.values[j] = y(0, static_cast<Eigen::Index>(j));
    return f;
  }

  Field solve(const std::vector<std::vector<double>>& face_data) const override {
    return predict(branch_inputs(face_data));
  }

 private:
  StructuredGrid sensor_grid(std::size_t i, const GridCounts& sensors) const {
    GridCounts c = sensors;
    c[cond_[i].face.axis] = 3;
    for (int k = 0; k < grid_.dim(); ++k)
      if (c[k] < 3) c[k] = 3;
    return StructuredGrid(grid_.box(), c);
  }

  std::string label_;
  std::shared_ptr<const OperatorNet> net_;
  StructuredGrid grid_;
  std::vector<OpenFace> cond_;
  std::vector<BranchSource> sources_;
  Point diffusion_;
  std::vector<Point> points_;
  Matrix trunk_in_;
};

// ---------------------------------------------------------------------------
// traces

/// Ordinals (face-node order) of the nodes of `face` of `grid` that lie in `patch`.
inline std::vector<std::size_t> patch_ordinals(const StructuredGrid& grid, const Face& face, const Box& patch) {
  const auto pts = face_points(grid, face);
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < pts.size(); ++i)
    if (patch.contains(pts[i])) out.push_back(i);
  return out;
}

/// Values of `src` at points.
inline std::vector<double> trace_values(const Field& src, std::span<const Point> pts) { return interpolate(src, pts); }

/**
 * Derivative of `src` along direction `sign` * e_axis at points lying on one
 * node plane of `src`: a boundary plane uses the second-order one-sided
 * stencil reaching into `src`, an interior plane the central difference.
 */
inline std::vector<double> trace_derivative(const Field& src, std::span<const Point> pts, int axis, double sign) {
  if (pts.empty()) return {};
  const auto& g = src.grid;
  const int a = axis;
  const double pos = (pts[0][a] - g.box().lo[a]) / g.spacing(a);
  const long plane = std::lround(pos);
  if (std::abs(pos - static_cast<double>(plane)) > 1e-8 || plane < 0 || plane > g.n(a) - 1)
    throw GridMismatchError("trace plane is not a node plane of " + to_string(g.box()));
  if (g.n(a) < 3) throw DerivativeUnavailableError("fewer than 3 nodes along the normal axis");
  const int p = static_cast<int>(plane);
  std::vector<double> d;
  if (p == 0) {
    d = one_sided_derivative(src, a, 0, false);
  } else if (p == g.n(a) - 1) {
    d = one_sided_derivative(src, a, p, true);
  } else {
    const auto base = g.face_nodes({a, Side::Low});
    const auto step = g.stride(a);
    d.assign(base.size(), 0.0);
    for (std::size_t i = 0; i < base.size(); ++i) {
      const auto f0 = base[i] + static_cast<std::size_t>(p) * step;
      d[i] = (src.values[f0 + step] - src.values[f0 - step]) / (2 * g.spacing(a));
    }
  }
  std::vector<double> out(pts.size());
  for (std::size_t i = 0; i < pts.size(); ++i) out[i] = sign * interpolate_on_face(g, {a, Side::Low}, d, pts[i]);
  return out;
}

// ---------------------------------------------------------------------------
// schedules and results

enum class Scheme { Schwarz, Framework1, Framework2, IterationFree };

inline std::string to_string(Scheme s) {
  switch (s) {
    case Scheme::Schwarz: return "schwarz";
    case Scheme::Framework1: return "framework1";
    case Scheme::Framework2: return "framework2";
    case Scheme::IterationFree: return "iteration_free";
  }
  return "?";
}

/// Q = a1 u + a2 T sent to the second subdomain, P = b1 u + b2 T sent back to the first.
struct TransmissionRule {
  double a1 = 1, a2 = 0, b1 = 1, b2 = 0;

  static TransmissionRule dirichlet_dirichlet() { return {1, 0, 1, 0}; }
  static TransmissionRule dirichlet_robin() { return {1, 1, 1, 0}; }

  void validate() const {
    if (a1 == 0 && a2 == 0) throw PreconditionError("transmission weights (a1, a2) are both zero");
    if (b1 == 0 && b2 == 0) throw PreconditionError("transmission weights (b1, b2) are both zero");
  }
};

struct DdmSchedule {
  Scheme scheme = Scheme::Framework2;
  double theta = 0.5;
  std::size_t max_iterations = 200;
  double epsilon = 1e-6;
  /// Constant initial interface data (ignored when initial_traces is set).
  double initial_value = 0.0;
  /// Optional initial data per solver and open face (grid face-node order).
  std::optional<std::vector<std::vector<std::vector<double>>>> initial_traces;
  TransmissionRule transmission;
  /// Concurrent subdomain solves in framework 2.
  std::size_t threads = 1;
  /// Framework-2 solve order (permutation of solver indices); empty = natural order.
  std::vector<std::size_t> solve_order;
  /// Consecutive residual increases that abort the run.
  std::size_t divergence_window = 10;

  void validate() const {
    if (!(theta >= 0 && theta <= 1)) throw PreconditionError("theta must lie in [0, 1]");
    if (!(epsilon > 0) && max_iterations == 0) throw PreconditionError("no termination criterion is active");
    transmission.validate();
  }
};

struct IterationRecord {
  std::size_t iteration = 0;
  double residual = 0;
  std::vector<double> subdomain_mae;
  std::vector<double> interface_max_change;
};

struct DdmResult {
  std::vector<Field> fields;
  std::size_t iterations_used = 0;
  std::vector<double> residual_history;
  bool converged = false;
  std::vector<IterationRecord> records;
  /// Interface data of the final iteration, per solver and open face.
  std::vector<std::vector<std::vector<double>>> traces;
};

// ---------------------------------------------------------------------------
// coupling

namespace detail {

/// Which solver feeds each open face.
struct Link {
  std::size_t solver = 0;
  std::size_t face = 0;
  std::size_t neighbor = 0;
  std::size_t neighbor_face = static_cast<std::size_t>(-1);  // matching open face of the neighbour (non-overlap)
  std::vector<std::size_t> ordinals;                          // coupled face nodes
  std::vector<Point> points;
};

inline std::vector<std::vector<Link>> link_faces(const std::vector<SubdomainSolver*>& s) {
  std::vector<std::vector<Link>> links(s.size());
  for (std::size_t i = 0; i < s.size(); ++i) {
    const auto faces = s[i]->open_faces();
    for (std::size_t f = 0; f < faces.size(); ++f) {
      const Box patch = s[i]->open_patch(f);
      std::optional<Link> found;
      for (std::size_t j = 0; j < s.size() && !found; ++j) {
        if (j == i || !s[j]->box().contains(patch)) continue;
        Link l;
        l.solver = i;
        l.face = f;
        l.neighbor = j;
        l.ordinals = patch_ordinals(s[i]->grid(), faces[f], patch);
        const auto all = face_points(s[i]->grid(), faces[f]);
        for (auto o : l.ordinals) l.points.push_back(all[o]);
        const auto nf = s[j]->open_faces();
        for (std::size_t k = 0; k < nf.size(); ++k)
          if (s[j]->open_patch(k).contains(patch) && nf[k].axis == faces[f].axis && nf[k].side != faces[f].side)
            l.neighbor_face = k;
        found = l;
      }
      if (!found)
        throw PreconditionError("open face " + std::to_string(f) + " of " + s[i]->label() + " has no neighbouring subdomain");
      links[i].push_back(*found);
    }
  }
  return links;
}

inline std::vector<std::vector<std::vector<double>>> initial_data(const std::vector<SubdomainSolver*>& s,
                                                                  const DdmSchedule& sched) {
  std::vector<std::vector<std::vector<double>>> d(s.size());
  for (std::size_t i = 0; i < s.size(); ++i)
    for (const auto& f : s[i]->open_faces()) d[i].push_back(std::vector<double>(s[i]->grid().face_node_count(f), sched.initial_value));
  if (sched.initial_traces) {
    const auto& t = *sched.initial_traces;
    if (t.size() != s.size()) throw ShapeError("initial traces need one entry per subdomain");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (t[i].size() != d[i].size()) throw ShapeError("initial traces of " + s[i]->label() + " need one entry per open face");
      for (std::size_t f = 0; f < d[i].size(); ++f) {
        if (t[i][f].size() != d[i][f].size())
          throw ShapeError("initial trace " + std::to_string(f) + " of " + s[i]->label() + " has the wrong length");
        d[i][f] = t[i][f];
      }
    }
  }
  return d;
}

inline double mean_abs_diff(const Field& a, const Field& b) {
  double acc = 0;
  for (std::size_t k = 0; k < a.values.size(); ++k) acc += std::abs(a.values[k] - b.values[k]);
  return a.values.empty() ? 0.0 : acc / static_cast<double>(a.values.size());
}

/// Residual bookkeeping shared by all iterative schemes; returns true when converged.
struct Monitor {
  const DdmSchedule& sched;
  DdmResult& result;
  std::size_t increases = 0;

  bool record(std::size_t iteration, const std::vector<Field>& prev, const std::vector<Field>& next,
              std::vector<double> iface_change) {
    IterationRecord r;
    r.iteration = iteration;
    double total = 0;
    std::size_t count = 0;
    for (std::size_t i = 0; i < next.size(); ++i) {
      const double m = mean_abs_diff(prev[i], next[i]);
      r.subdomain_mae.push_back(m);
      total += m * static_cast<double>(next[i].values.size());
      count += next[i].values.size();
    }
    r.residual = count ? total / static_cast<double>(count) : 0.0;
    r.interface_max_change = std::move(iface_change);
    if (!std::isfinite(r.residual))
      throw DivergenceError("interface iteration became non-finite at iteration " + std::to_string(iteration));
    if (!result.residual_history.empty() && r.residual > result.residual_history.back())
      ++increases;
    else
      increases = 0;
    result.residual_history.push_back(r.residual);
    result.records.push_back(std::move(r));
    result.iterations_used = iteration;
    if (increases >= sched.divergence_window)
      throw DivergenceError("residual grew for " + std::to_string(increases) + " consecutive iterations (iteration " +
                            std::to_string(iteration) + ")");
    return result.residual_history.back() < sched.epsilon;
  }
};

inline std::vector<Field> zero_fields(const std::vector<SubdomainSolver*>& s) {
  std::vector<Field> f;
  for (auto* x : s) f.emplace_back(x->grid());
  return f;
}

inline double max_change(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t k = 0; k < a.size(); ++k) m = std::max(m, std::abs(a[k] - b[k]));
  return m;
}

/// Alternating sweep shared by Schwarz and framework 1.
inline DdmResult sweep(const std::vector<SubdomainSolver*>& s, const DdmSchedule& sched, bool schwarz) {
  const auto links = link_faces(s);
  const auto& tr = sched.transmission;
  // condition types: faces fed by an earlier solver in the sweep get Q, the others P
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::vector<OpenFace> c;
    for (const auto& l : links[i]) {
      const auto f = s[i]->open_faces()[l.face];
      const bool forward = l.neighbor < i;
      const double w1 = schwarz ? 1.0 : (forward ? tr.a1 : tr.b1);
      const double w2 = schwarz ? 0.0 : (forward ? tr.a2 : tr.b2);
      if (w2 == 0.0)
        c.push_back({f, BcKind::Dirichlet});
      else
        c.push_back({f, BcKind::Robin, w1, w2});
    }
    s[i]->prepare(c);
  }
  auto data = initial_data(s, sched);
  DdmResult result;
  Monitor mon{sched, result};
  auto fields = zero_fields(s);
  for (std::size_t it = 1; it <= sched.max_iterations; ++it) {
    const auto prev = fields;
    std::vector<double> change;
    for (std::size_t i = 0; i < s.size(); ++i) {
      fields[i] = s[i]->solve(data[i]);
      // pass information from solver i to the open faces it feeds
      for (std::size_t j = 0; j < s.size(); ++j) {
        if (j == i) continue;
        for (const auto& l : links[j]) {
          if (l.neighbor != i) continue;
          const auto f = s[j]->open_faces()[l.face];
          const bool forward = i < j;
          const double w1 = schwarz ? 1.0 : (forward ? tr.a1 : tr.b1);
          const double w2 = schwarz ? 0.0 : (forward ? tr.a2 : tr.b2);
          std::vector<double> fresh = trace_values(fields[i], l.points);
          for (auto& v : fresh) v *= w1;
          if (w2 != 0.0) {
            const auto d = trace_derivative(fields[i], l.points, f.axis, f.side == Side::High ? 1.0 : -1.0);
            for (std::size_t k = 0; k < fresh.size(); ++k) fresh[k] += w2 * d[k];
          }
          auto& old = data[j][l.face];
          std::vector<double> next = old;
          for (std::size_t k = 0; k < fresh.size(); ++k) {
            const auto o = l.ordinals[k];
            if (schwarz)
              next[o] = (1 - sched.theta) * old[o] + sched.theta * fresh[k];
            else if (forward)
              next[o] = fresh[k];
            else
              next[o] = (1 - sched.theta) * fresh[k] + sched.theta * old[o];
          }
          change.push_back(max_change(old, next));
          old = std::move(next);
        }
      }
    }
    if (mon.record(it, prev, fields, change)) {
      result.converged = true;
      break;
    }
  }
  result.fields = std::move(fields);
  result.traces = std::move(data);
  return result;
}

inline std::vector<SubdomainSolver*> pointers(std::span<const std::shared_ptr<SubdomainSolver>> s) {
  std::vector<SubdomainSolver*> p;
  for (const auto& x : s) {
    if (!x) throw PreconditionError("null subdomain solver");
    p.push_back(x.get());
  }
  return p;
}

}  // namespace detail

using SolverList = std::vector<std::shared_ptr<SubdomainSolver>>;

/**
 * Schwarz alternating method: each subdomain takes Dirichlet data from the
 * latest field of its neighbour, relaxed as (1 - theta) old + theta new.
 */
inline DdmResult run_schwarz(const SolverList& solvers, const DdmSchedule& sched) {
  sched.validate();
  if (solvers.size() != 2) throw PreconditionError("the Schwarz method couples exactly two subdomains");
  const auto s = detail::pointers(solvers);
  for (auto* x : s)
    if (x->is_neural()) throw PreconditionError("the Schwarz method uses classical solvers");
  const Box ov = intersect(s[0]->box(), s[1]->box());
  for (int k = 0; k < ov.dim; ++k)
    if (!(ov.hi[k] - ov.lo[k] > 1e-12 * std::max(1.0, s[0]->box().extent(k))))
      throw NotOverlappingError(s[0]->label() + " and " + s[1]->label() + " do not overlap");
  return detail::sweep(s, sched, true);
}

/**
 * Coupling framework 1: solvers are swept in order; a face fed by an
 * earlier solver receives Q = a1 u + a2 T, a face fed by a later solver
 * receives P = (1 - theta) P_hat + theta P_old with P_hat = b1 u + b2 T.
 * T is the derivative along the receiving subdomain's outward normal.
 */
inline DdmResult run_framework1(const SolverList& solvers, const DdmSchedule& sched) {
  sched.validate();
  if (solvers.size() < 2) throw PreconditionError("framework 1 needs at least two subdomains");
  return detail::sweep(detail::pointers(solvers), sched, false);
}

/**
 * Coupling framework 2 (Lions): every open face carries Robin data
 * g = u + kappa du/dn with kappa the subdomain's diffusion normal to the
 * face; after concurrent solves each interface updates
 * g_a <- (1 - theta) g_a + theta (2 u_b - g_b) and symmetrically.
 */
inline DdmResult run_framework2(const SolverList& solvers, const DdmSchedule& sched) {
  sched.validate();
  const auto s = detail::pointers(solvers);
  for (std::size_t i = 0; i < s.size(); ++i)
    for (std::size_t j = i + 1; j < s.size(); ++j)
      if (detail::contact(s[i]->box(), s[j]->box()) == detail::Contact::Volume)
        throw OverlapError(s[i]->label() + " and " + s[j]->label() + " overlap");
  const auto links = detail::link_faces(s);
  for (const auto& ls : links)
    for (const auto& l : ls)
      if (l.neighbor_face == static_cast<std::size_t>(-1))
        throw PreconditionError("interface of " + s[l.solver]->label() + " is not open on " + s[l.neighbor]->label());
  for (std::size_t i = 0; i < s.size(); ++i) {
    std::vector<OpenFace> c;
    for (const auto& f : s[i]->open_faces()) c.push_back({f, BcKind::Robin, 1.0, s[i]->diffusion(f.axis)});
    s[i]->prepare(c);
  }
  std::vector<std::size_t> order = sched.solve_order;
  if (order.empty())
    for (std::size_t i = 0; i < s.size(); ++i) order.push_back(i);
  {
    auto sorted = order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i)
      if (sorted.size() != s.size() || sorted[i] != i) throw PreconditionError("solve_order must permute the subdomains");
  }

  auto g = detail::initial_data(s, sched);
  DdmResult result;
  detail::Monitor mon{sched, result};
  auto fields = detail::zero_fields(s);
  for (std::size_t it = 1; it <= sched.max_iterations; ++it) {
    const auto prev = fields;
    std::vector<Field> next(s.size());
    std::vector<std::exception_ptr> errors(s.size());
    auto work = [&](std::size_t begin, std::size_t step) {
      for (std::size_t k = begin; k < order.size(); k += step) {
        const auto i = order[k];
        try {
          next[i] = s[i]->solve(g[i]);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    };
    const std::size_t nt = std::max<std::size_t>(1, std::min(sched.threads, s.size()));
    if (nt == 1) {
      work(0, 1);
    } else {
      std::vector<std::thread> pool;
      for (std::size_t t = 0; t < nt; ++t) pool.emplace_back(work, t, nt);
      for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
      if (e) std::rethrow_exception(e);
    fields = std::move(next);

    auto g_new = g;
    std::vector<double> change;
    for (std::size_t i = 0; i < s.size(); ++i)
      for (const auto& l : links[i]) {
        const auto j = l.neighbor;
        const auto fj = s[j]->open_faces()[l.neighbor_face];
        const auto uj = trace_values(fields[j], l.points);
        auto& out = g_new[i][l.face];
        for (std::size_t k = 0; k < l.points.size(); ++k) {
          const auto o = l.ordinals[k];
          const double gj = interpolate_on_face(s[j]->grid(), fj, g[j][l.neighbor_face], l.points[k]);
          out[o] = (1 - sched.theta) * g[i][l.face][o] + sched.theta * (2 * uj[k] - gj);
        }
        change.push_back(detail::max_change(g[i][l.face], out));
      }
    g = std::move(g_new);
    if (mon.record(it, prev, fields, change)) {
      result.converged = true;
      break;
    }
  }
  result.fields = std::move(fields);
  result.traces = std::move(g);
  return result;
}

/// One forward pass per subdomain with global branch inputs; no exchange.
inline DdmResult run_iteration_free(const std::vector<std::shared_ptr<NeuralSolver>>& solvers,
                                    const std::vector<std::vector<std::vector<double>>>& global_inputs) {
  if (global_inputs.size() != solvers.size()) throw ShapeError("one input set per subdomain network required");
  DdmResult r;
  for (std::size_t i = 0; i < solvers.size(); ++i) r.fields.push_back(solvers[i]->predict(global_inputs[i]));
  r.converged = true;
  return r;
}

/// Subdomain problem cut from a global one plus the faces left open.
struct SubProblem {
  PdeProblem problem;
  std::vector<OpenBoundary> open;
};

/**
 * Restrict a global problem to `sub`: faces of `sub` on the global boundary
 * keep the global condition (per-node data is interpolated from the global
 * face nodes of `global_grid`), every other face becomes open.
 */
inline SubProblem subdomain_problem(const PdeProblem& global, const GridCounts& global_n, const Box& sub,
                                    const GridCounts& sub_n) {
  if (!global.box.contains(sub)) throw OutOfDomainError(to_string(sub) + " is not inside " + to_string(global.box));
  if (global.source_field) throw PreconditionError("nodal sources cannot be restricted; use a constant source");
  const StructuredGrid gg(global.box, global_n);
  const StructuredGrid sg(sub, sub_n);
  SubProblem out;
  out.problem.box = sub;
  out.problem.diffusion = global.diffusion;
  out.problem.source = global.source;
  out.problem.equation_coeffs = global.equation_coeffs;
  for (int axis = 0; axis < sub.dim; ++axis)
    for (Side side : {Side::Low, Side::High}) {
      const Face f{axis, side};
      const double x = side == Side::Low ? sub.lo[axis] : sub.hi[axis];
      const double gx = side == Side::Low ? global.box.lo[axis] : global.box.hi[axis];
      if (std::abs(x - gx) > kGeomTol * std::max(1.0, global.box.extent(axis))) {
        out.open.emplace_back(f);
        continue;
      }
      bool any = false;
      for (const auto& bc : global.bcs) {
        if (!(bc.face == f)) continue;
        any = true;
        auto c = bc;
        if (bc.data.size() > 1) {
          const auto pts = face_points(sg, f);
          c.data.resize(pts.size());
          for (std::size_t k = 0; k < pts.size(); ++k) c.data[k] = interpolate_on_face(gg, f, bc.data, pts[k]);
        }
        out.problem.bcs.push_back(std::move(c));
      }
      if (!any) throw PreconditionError("global face " + to_string(f) + " has no boundary condition");
    }
  return out;
}

// ---------------------------------------------------------------------------
// comparison against a reference

struct FieldError {
  double ml2re = 0;
  double mae = 0;
  double max_abs = 0;
};

/**
 * Error of subdomain fields against reference fields, pooled over every
 * subdomain node; each node is compared with the first reference whose box
 * contains it.
 */
inline FieldError compare_fields(std::span<const Field> fields, std::span<const Field> reference) {
  double num = 0, den = 0, abs_sum = 0, mx = 0;
  std::size_t count = 0;
  for (const auto& f : fields)
    for (std::size_t k = 0; k < f.values.size(); ++k) {
      const Point p = f.grid.node(k);
      const Field* ref = nullptr;
      for (const auto& r : reference)
        if (r.grid.box().contains(p)) {
          ref = &r;
          break;
        }
      if (!ref) throw OutOfDomainError("node " + std::to_string(k) + " of " + to_string(f.grid.box()) + " lies outside the reference");
      const double t = interpolate_point(*ref, p);
      const double e = f.values[k] - t;
      num += e * e;
      den += t * t;
      abs_sum += std::abs(e);
      mx = std::max(mx, std::abs(e));
      ++count;
    }
  if (den == 0.0) throw ZeroNormError("reference values have zero norm");
  return {std::sqrt(num / den), count ? abs_sum / static_cast<double>(count) : 0.0, mx};
}

inline FieldError compare_fields(std::span<const Field> fields, const Field& reference) {
  return compare_fields(fields, std::span<const Field>(&reference, 1));
}

/// Largest |u_a - u_b| over nodes shared by two touching subdomain fields.
inline double interface_gap(const Field& a, const Field& b) {
  const auto c = detail::contact(a.grid.box(), b.grid.box());
  if (c != detail::Contact::Face) throw GeometryError("fields do not share a face");
  const Box patch = intersect(a.grid.box(), b.grid.box());
  double gap = 0;
  for (std::size_t k = 0; k < a.values.size(); ++k) {
    const Point p = a.grid.node(k);
    if (!patch.contains(p)) continue;
    gap = std::max(gap, std::abs(a.values[k] - interpolate_point(b, p)));
  }
  return gap;
}

}  // namespace ddon
