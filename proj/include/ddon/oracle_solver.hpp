#pragma once

#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ddon/errors.hpp"
#include "ddon/geometry.hpp"
#include "ddon/grid.hpp"

namespace ddon {

enum class BcKind { Dirichlet, Neumann, Robin };

inline std::string to_string(BcKind k) {
  switch (k) {
    case BcKind::Dirichlet: return "dirichlet";
    case BcKind::Neumann: return "neumann";
    case BcKind::Robin: return "robin";
  }
  return "?";
}

/**
 * @brief Boundary condition on one face (or a patch of it).
 *
 * Dirichlet: u = data. Neumann: du/dn = data. Robin: alpha*u + beta*du/dn =
 * data. du/dn is the outward derivative in the problem's own coordinates;
 * the flux through the face is diffusion[normal] * du/dn.
 *
 * `data` holds either one value per face node (StructuredGrid::face_nodes
 * order) or a single constant.
 */
struct BoundaryCondition {
  Face face;
  BcKind kind = BcKind::Dirichlet;
  std::vector<double> data{0.0};
  double robin_alpha = 1.0;
  double robin_beta = 1.0;
  std::optional<Box> patch;

  static BoundaryCondition make(Face f, BcKind kind, std::vector<double> data, double alpha = 1.0, double beta = 1.0) {
    BoundaryCondition b;
    b.face = f;
    b.kind = kind;
    b.data = std::move(data);
    b.robin_alpha = alpha;
    b.robin_beta = beta;
    return b;
  }
  static BoundaryCondition dirichlet(Face f, double v) { return make(f, BcKind::Dirichlet, {v}); }
  static BoundaryCondition dirichlet(Face f, std::vector<double> v) { return make(f, BcKind::Dirichlet, std::move(v)); }
  static BoundaryCondition neumann(Face f, double g = 0.0) { return make(f, BcKind::Neumann, {g}); }
  static BoundaryCondition neumann(Face f, std::vector<double> g) { return make(f, BcKind::Neumann, std::move(g)); }
  static BoundaryCondition robin(Face f, double alpha, double beta, std::vector<double> g) {
    return make(f, BcKind::Robin, std::move(g), alpha, beta);
  }
  static BoundaryCondition robin(Face f, double alpha, double beta, double g) {
    return robin(f, alpha, beta, std::vector<double>{g});
  }
};

/**
 * @brief -sum_k diffusion[k] d^2u/dx_k^2 = source on a box, mixed BCs.
 */
struct PdeProblem {
  Box box;
  Point diffusion{1, 1, 1};
  double source = 0.0;
  /// Optional nodal source on the solve grid; overrides `source`.
  std::optional<std::vector<double>> source_field;
  std::vector<BoundaryCondition> bcs;
  /// Reserved coefficients of parameterised operators; unused by the FD operator.
  std::array<double, 2> equation_coeffs{0, 0};
};

struct SolverOptions {
  double rel_tol = 1e-10;
  /// Unknown count above which preconditioned CG replaces the sparse LDL^T.
  std::size_t direct_threshold = 40000;
  int max_cg_iterations = 20000;
  /// Exterior face cells with no condition become homogeneous Neumann.
  bool default_neumann = false;
};

/// One box of a composite solve with its own grid, conductivity and BCs.
struct Block {
  std::string label;
  StructuredGrid grid;
  Point diffusion{1, 1, 1};
  double source = 0.0;
  std::optional<std::vector<double>> source_field;
  std::vector<BoundaryCondition> bcs;
};

/**
 * @brief Assembled and factorised vertex-centred discretisation.
 *
 * Every grid cell contributes V*c_k/h_k^2 / 2^(d-1) to each of its edges
 * along axis k and V/2^d of the source to each corner; Neumann/Robin data
 * enter through face cells. On a single box this is exactly the
 * second-order central-difference scheme with ghost-node elimination (rows
 * scaled by the control-volume fraction, which keeps the matrix symmetric).
 * Coincident nodes of touching blocks are merged into single unknowns.
 *
 * Boundary data are kept as a separate vector so the same factorisation can
 * be reused with new data (`solve(data)`), which is what the DDM loops do.
 */
class EllipticOperator {
 public:
  struct Slot {
    std::size_t block = 0;
    std::size_t bc = 0;
    std::size_t offset = 0;
    std::size_t length = 0;
  };

  explicit EllipticOperator(std::vector<Block> blocks, SolverOptions opts = {})
      : blocks_(std::move(blocks)), opts_(opts) {
    if (blocks_.empty()) throw PreconditionError("at least one block required");
    build();
  }

  const std::vector<Block>& blocks() const { return blocks_; }
  const SolverOptions& options() const { return opts_; }
  std::size_t unknowns() const { return free_count_; }
  std::size_t node_count() const { return node_count_; }

  /// Boundary data vector holding every block's BC data (constants expanded).
  const std::vector<double>& default_data() const { return default_data_; }
  const Slot& slot(std::size_t block, std::size_t bc) const { return slots_[slot_index_.at({block, bc})]; }

  void write_slot(std::vector<double>& data, std::size_t block, std::size_t bc, std::span<const double> values) const {
    const auto& s = slot(block, bc);
    if (values.size() == 1) {
      std::fill_n(data.begin() + static_cast<std::ptrdiff_t>(s.offset), s.length, values[0]);
      return;
    }
    if (values.size() != s.length)
      throw ShapeError("boundary data has " + std::to_string(values.size()) + " values, face has " +
                       std::to_string(s.length) + " nodes");
    std::copy(values.begin(), values.end(), data.begin() + static_cast<std::ptrdiff_t>(s.offset));
  }

  std::vector<Field> solve() const { return solve(default_data_); }

  std::vector<Field> solve(std::span<const double> data) const {
    if (data.size() != default_data_.size()) throw ShapeError("boundary data vector has the wrong length");
    Eigen::Map<const Eigen::VectorXd> d(data.data(), static_cast<Eigen::Index>(data.size()));
    Eigen::VectorXd ud = dirichlet_select_ * d;
    Eigen::VectorXd x;
    if (free_count_ > 0) {
      Eigen::VectorXd rhs = src_free_ + data_to_rhs_ * d;
      x = linear_solve(rhs);
    }
    std::vector<double> nodal(node_count_);
    for (std::size_t g = 0; g < node_count_; ++g) {
      const auto r = reduced_[g];
      nodal[g] = r.dirichlet ? ud[r.index] : x[r.index];
    }
    return scatter(nodal);
  }

  /// Global nodal vector from per-block fields (the first block owning a node wins).
  std::vector<double> gather(std::span<const Field> fields) const {
    if (fields.size() != blocks_.size()) throw ShapeError("one field per block required");
    std::vector<double> u(node_count_, 0.0);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      if (!(fields[b].grid == blocks_[b].grid)) throw GridMismatchError("field grid differs from block grid");
      for (std::size_t i = 0; i < fields[b].values.size(); ++i) u[node_of_[b][i]] = fields[b].values[i];
    }
    return u;
  }

  /**
   * Discrete outward boundary flux (c du/dn integrated over each node's share
   * of the boundary), i.e. the residual of the interior operator. Zero at
   * interior nodes of an exact discrete solution.
   */
  std::vector<double> nodal_flux(std::span<const Field> fields) const {
    const auto u = gather(fields);
    Eigen::Map<const Eigen::VectorXd> uv(u.data(), static_cast<Eigen::Index>(u.size()));
    Eigen::VectorXd r = interior_ * uv - src_all_;
    return {r.data(), r.data() + r.size()};
  }

  /// Flux contribution of one BC slot at each node it touches, given data.
  std::vector<std::pair<std::size_t, double>> slot_flux(std::size_t slot_id, std::span<const double> data,
                                                        std::span<const double> u) const {
    std::map<std::size_t, double> acc;
    for (const auto& e : boundary_terms_[slot_id]) acc[e.node] += e.coef_g * data[e.column] - e.coef_u * u[e.node];
    return {acc.begin(), acc.end()};
  }

  /**
   * Robin data g on (block, bc) that makes `fields` satisfy the discrete
   * equations at that face's nodes, with every other slot at `data`. Entries
   * at Dirichlet nodes hold alpha*u.
   */
  std::vector<double> consistent_robin_data(std::span<const Field> fields, std::span<const double> data,
                                            std::size_t block, std::size_t bc) const {
    const auto& bcond = blocks_[block].bcs[bc];
    if (bcond.kind != BcKind::Robin) throw PreconditionError("consistent_robin_data needs a Robin slot");
    const std::size_t sid = slot_index_.at({block, bc});
    const auto u = gather(fields);
    const auto r = nodal_flux(fields);
    std::vector<double> other(node_count_, 0.0);
    for (std::size_t s = 0; s < boundary_terms_.size(); ++s) {
      if (s == sid) continue;
      for (const auto& e : boundary_terms_[s]) other[e.node] += e.coef_g * data[e.column] - e.coef_u * u[e.node];
    }
    std::map<std::size_t, std::pair<double, double>> coef;  // node -> (coef_g, coef_u)
    for (const auto& e : boundary_terms_[sid]) {
      coef[e.node].first += e.coef_g;
      coef[e.node].second += e.coef_u;
    }
    const auto& s = slots_[sid];
    const auto face_idx = blocks_[block].grid.face_nodes(bcond.face);
    std::vector<double> g(s.length, 0.0);
    for (std::size_t i = 0; i < face_idx.size(); ++i) {
      const auto node = node_of_[block][face_idx[i]];
      auto it = coef.find(node);
      if (it == coef.end() || reduced_[node].dirichlet || it->second.first == 0.0) {
        g[i] = bcond.robin_alpha * u[node];
        continue;
      }
      const double contribution = r[node] - other[node];
      g[i] = (contribution + it->second.second * u[node]) / it->second.first;
    }
    return g;
  }

  /// Global node id of a block-local flat index.
  std::size_t global_node(std::size_t block, std::size_t local) const { return node_of_[block][local]; }
  bool is_dirichlet(std::size_t global) const { return reduced_[global].dirichlet; }

  /// Nodes of block `b`'s face `f` whose face cells are covered by another block.
  std::vector<std::size_t> interior_face_nodes(std::size_t b, const Face& f) const {
    std::vector<std::size_t> out;
    for (const auto& fc : face_cells(b, f))
      if (fc.covered)
        for (auto n : fc.nodes) out.push_back(n);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }

  /// True when every face cell of (block, face) is exterior.
  bool face_is_exterior(std::size_t b, const Face& f) const {
    for (const auto& fc : face_cells(b, f))
      if (fc.covered) return false;
    return true;
  }

 private:
  struct Reduced {
    bool dirichlet = false;
    std::size_t index = 0;
  };

  struct BoundaryTerm {
    std::size_t node;
    std::size_t column;
    double coef_g;
    double coef_u;
  };

  struct FaceCell {
    Point center;
    double area = 1.0;
    bool covered = false;
    std::vector<std::size_t> nodes;  // global ids of the corner nodes
    std::vector<std::size_t> ordinals;  // face-node ordinals of the corners
  };

  std::vector<FaceCell> face_cells(std::size_t b, const Face& f) const {
    const auto& g = blocks_[b].grid;
    const auto axes = g.tangential_axes(f.axis);
    const int fixed = f.side == Side::Low ? 0 : g.n(f.axis) - 1;
    std::array<int, 2> cn{1, 1};
    std::array<std::size_t, 2> ostride{0, 0};
    std::size_t s = 1;
    for (int a = static_cast<int>(axes.size()) - 1; a >= 0; --a) {
      cn[a] = g.n(axes[a]) - 1;
      ostride[a] = s;
      s *= static_cast<std::size_t>(g.n(axes[a]));
    }
    const double probe = 1e-7 * std::max(1.0, g.box().scale());
    std::vector<FaceCell> out;
    for (int c0 = 0; c0 < cn[0]; ++c0) {
      for (int c1 = 0; c1 < cn[1]; ++c1) {
        FaceCell fc;
        MultiIndex base{0, 0, 0};
        base[f.axis] = fixed;
        const std::array<int, 2> cc{c0, c1};
        for (std::size_t a = 0; a < axes.size(); ++a) base[axes[a]] = cc[a];
        fc.center = g.node(base);
        fc.center[f.axis] = f.side == Side::Low ? g.box().lo[f.axis] : g.box().hi[f.axis];
        for (std::size_t a = 0; a < axes.size(); ++a) {
          fc.center[axes[a]] += 0.5 * g.spacing(axes[a]);
          fc.area *= g.spacing(axes[a]);
        }
        const int corners = 1 << axes.size();
        for (int c = 0; c < corners; ++c) {
          MultiIndex idx = base;
          std::size_t ord = 0;
          for (std::size_t a = 0; a < axes.size(); ++a) {
            const int bit = (c >> a) & 1;
            idx[axes[a]] += bit;
            ord += static_cast<std::size_t>(idx[axes[a]]) * ostride[a];
          }
          fc.nodes.push_back(node_of_[b][g.flat(idx)]);
          fc.ordinals.push_back(ord);
        }
        Point pr = fc.center;
        pr[f.axis] += f.sign() * probe;
        for (std::size_t o = 0; o < blocks_.size(); ++o)
          if (o != b && blocks_[o].grid.box().contains(pr, 0.0)) fc.covered = true;
        out.push_back(std::move(fc));
      }
    }
    return out;
  }

  void number_nodes() {
    node_of_.resize(blocks_.size());
    if (blocks_.size() == 1) {
      const auto n = blocks_[0].grid.size();
      node_of_[0].resize(n);
      for (std::size_t i = 0; i < n; ++i) node_of_[0][i] = i;
      node_count_ = n;
      block_count_.assign(n, 1);
      return;
    }
    double scale = 1.0;
    for (const auto& b : blocks_) scale = std::max(scale, b.grid.box().scale());
    const double q = 1e-9 * scale;
    std::map<std::array<long long, 3>, std::size_t> ids;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const auto& g = blocks_[b].grid;
      node_of_[b].resize(g.size());
      for (std::size_t i = 0; i < g.size(); ++i) {
        const Point p = g.node(i);
        const std::array<long long, 3> key{std::llround(p[0] / q), std::llround(p[1] / q), std::llround(p[2] / q)};
        auto [it, inserted] = ids.emplace(key, ids.size());
        node_of_[b][i] = it->second;
        if (inserted) block_count_.push_back(0);
        ++block_count_[it->second];
      }
    }
    node_count_ = ids.size();
  }

  void build() {
    const int dim = blocks_.front().grid.dim();
    for (const auto& b : blocks_)
      if (b.grid.dim() != dim) throw GeometryError("blocks of mixed dimension");
    number_nodes();

    // boundary data slots
    std::size_t offset = 0;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      for (std::size_t c = 0; c < blocks_[b].bcs.size(); ++c) {
        const auto& bc = blocks_[b].bcs[c];
        if (bc.face.axis < 0 || bc.face.axis >= dim) throw GeometryError("boundary condition on a missing axis");
        if (bc.kind == BcKind::Robin && bc.robin_alpha == 0.0 && bc.robin_beta == 0.0)
          throw PreconditionError("Robin condition needs alpha or beta non-zero");
        if (bc.kind == BcKind::Robin && bc.robin_beta == 0.0)
          throw PreconditionError("Robin condition with beta = 0 is a Dirichlet condition; declare it as such");
        const std::size_t len = blocks_[b].grid.face_node_count(bc.face);
        if (bc.data.size() != 1 && bc.data.size() != len)
          throw ShapeError("boundary data on " + to_string(bc.face) + " has " + std::to_string(bc.data.size()) +
                           " values, face has " + std::to_string(len) + " nodes");
        slot_index_[{b, c}] = slots_.size();
        slots_.push_back({b, c, offset, len});
        for (std::size_t i = 0; i < len; ++i) default_data_.push_back(bc.data.size() == 1 ? bc.data[0] : bc.data[i]);
        offset += len;
      }
    }
    boundary_terms_.resize(slots_.size());

    // classify exterior face cells
    struct DirichletHit {
      std::size_t column;
    };
    std::vector<std::optional<DirichletHit>> dirichlet(node_count_);
    bool any_robin_u = false;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const auto& blk = blocks_[b];
      for (int axis = 0; axis < dim; ++axis) {
        for (Side side : {Side::Low, Side::High}) {
          const Face f{axis, side};
          const double cn = blk.diffusion[axis];
          for (const auto& fc : face_cells(b, f)) {
            if (fc.covered) {
              for (auto n : fc.nodes)
                if (block_count_[n] < 2)
                  throw GridMismatchError("interface nodes of block '" + blk.label + "' do not coincide with a neighbour");
              continue;
            }
            std::optional<std::size_t> owner;
            for (std::size_t c = 0; c < blk.bcs.size(); ++c) {
              const auto& bc = blk.bcs[c];
              if (!(bc.face == f)) continue;
              if (bc.patch && !bc.patch->contains(fc.center)) continue;
              if (owner) throw PreconditionError("face " + to_string(f) + " of '" + blk.label + "' covered twice");
              owner = c;
            }
            if (!owner) {
              if (opts_.default_neumann) continue;
              throw PreconditionError("face " + to_string(f) + " of '" + blk.label + "' has uncovered cells");
            }
            const auto& bc = blk.bcs[*owner];
            const auto& sl = slots_[slot_index_.at({b, *owner})];
            const double share = fc.area / static_cast<double>(fc.nodes.size());
            for (std::size_t k = 0; k < fc.nodes.size(); ++k) {
              const auto node = fc.nodes[k];
              const auto col = sl.offset + fc.ordinals[k];
              switch (bc.kind) {
                case BcKind::Dirichlet:
                  if (!dirichlet[node]) dirichlet[node] = DirichletHit{col};
                  break;
                case BcKind::Neumann:
                  boundary_terms_[slot_index_.at({b, *owner})].push_back({node, col, share * cn, 0.0});
                  break;
                case BcKind::Robin: {
                  const double cu = share * cn * bc.robin_alpha / bc.robin_beta;
                  if (cu != 0.0) any_robin_u = true;
                  boundary_terms_[slot_index_.at({b, *owner})].push_back({node, col, share * cn / bc.robin_beta, cu});
                  break;
                }
              }
            }
          }
        }
      }
    }

    // reduced numbering
    reduced_.resize(node_count_);
    std::size_t nf = 0, nd = 0;
    for (std::size_t g = 0; g < node_count_; ++g) reduced_[g] = dirichlet[g] ? Reduced{true, nd++} : Reduced{false, nf++};
    free_count_ = nf;
    if (nd == 0 && !any_robin_u) throw SingularSystemError("pure Neumann problem: no Dirichlet or Robin condition");

    // interior operator and source over all nodes
    std::vector<Eigen::Triplet<double>> tri;
    src_all_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(node_count_));
    diag_.assign(node_count_, 0.0);
    for (std::size_t b = 0; b < blocks_.size(); ++b) assemble_block(b, tri);
    for (std::size_t gnode = 0; gnode < node_count_; ++gnode)
      tri.emplace_back(static_cast<Eigen::Index>(gnode), static_cast<Eigen::Index>(gnode), diag_[gnode]);
    diag_.clear();
    diag_.shrink_to_fit();
    interior_.resize(static_cast<Eigen::Index>(node_count_), static_cast<Eigen::Index>(node_count_));
    interior_.setFromTriplets(tri.begin(), tri.end());

    // reduced system
    const auto ncols = static_cast<Eigen::Index>(default_data_.size());
    std::vector<Eigen::Triplet<double>> aff, mdat, sel;
    for (int k = 0; k < interior_.outerSize(); ++k) {
      for (Eigen::SparseMatrix<double>::InnerIterator it(interior_, k); it; ++it) {
        const auto r = reduced_[static_cast<std::size_t>(it.row())];
        const auto c = reduced_[static_cast<std::size_t>(it.col())];
        if (r.dirichlet) continue;
        if (!c.dirichlet)
          aff.emplace_back(r.index, c.index, it.value());
        else
          mdat.emplace_back(r.index, dirichlet[static_cast<std::size_t>(it.col())]->column, -it.value());
      }
    }
    for (const auto& terms : boundary_terms_) {
      for (const auto& e : terms) {
        const auto r = reduced_[e.node];
        if (r.dirichlet) continue;
        mdat.emplace_back(r.index, e.column, e.coef_g);
        if (e.coef_u != 0.0) aff.emplace_back(r.index, r.index, e.coef_u);
      }
    }
    for (std::size_t g = 0; g < node_count_; ++g)
      if (reduced_[g].dirichlet) sel.emplace_back(reduced_[g].index, dirichlet[g]->column, 1.0);

    a_ff_.resize(static_cast<Eigen::Index>(nf), static_cast<Eigen::Index>(nf));
    a_ff_.setFromTriplets(aff.begin(), aff.end());
    data_to_rhs_.resize(static_cast<Eigen::Index>(nf), ncols);
    data_to_rhs_.setFromTriplets(mdat.begin(), mdat.end());
    dirichlet_select_.resize(static_cast<Eigen::Index>(nd), ncols);
    dirichlet_select_.setFromTriplets(sel.begin(), sel.end());
    src_free_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(nf));
    for (std::size_t g = 0; g < node_count_; ++g)
      if (!reduced_[g].dirichlet) src_free_[static_cast<Eigen::Index>(reduced_[g].index)] = src_all_[static_cast<Eigen::Index>(g)];

    if (nf == 0) return;
    if (nf <= opts_.direct_threshold) {
      auto ldlt = std::make_shared<Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>>();
      ldlt->compute(a_ff_);
      if (ldlt->info() != Eigen::Success) throw SingularSystemError("sparse factorisation failed");
      ldlt_ = std::move(ldlt);
    } else {
      auto cg = std::make_shared<Cg>();
      cg->setTolerance(opts_.rel_tol * 0.1);
      cg->setMaxIterations(opts_.max_cg_iterations);
      cg->compute(a_ff_);
      if (cg->info() != Eigen::Success) throw SingularSystemError("preconditioner setup failed");
      cg_ = std::move(cg);
    }
  }

  void assemble_block(std::size_t b, std::vector<Eigen::Triplet<double>>& tri) {
    const auto& blk = blocks_[b];
    const auto& g = blk.grid;
    const int d = g.dim();
    if (blk.source_field && blk.source_field->size() != g.size())
      throw ShapeError("source field does not match the block grid");
    for (int k = 0; k < d; ++k)
      if (!(blk.diffusion[k] > 0)) throw PreconditionError("diffusion coefficients must be positive");
    double vol = 1;
    for (int k = 0; k < d; ++k) vol *= g.spacing(k);
    const double edges_per_axis = static_cast<double>(1 << (d - 1));
    std::array<double, 3> w{0, 0, 0};
    for (int k = 0; k < d; ++k) w[k] = vol * blk.diffusion[k] / (g.spacing(k) * g.spacing(k)) / edges_per_axis;
    // a node or edge touches 2 cells per axis in the interior, 1 on the boundary
    auto mult = [&](const MultiIndex& p, int skip) {
      double m = 1;
      for (int j = 0; j < d; ++j)
        if (j != skip && p[j] > 0 && p[j] < g.n(j) - 1) m *= 2;
      return m;
    };
    for (std::size_t lp = 0; lp < g.size(); ++lp) {
      const MultiIndex p = g.multi(lp);
      const auto gp = static_cast<Eigen::Index>(node_of_[b][lp]);
      const double s = blk.source_field ? (*blk.source_field)[lp] : blk.source;
      src_all_[gp] += vol / (1 << d) * mult(p, -1) * s;
      for (int k = 0; k < d; ++k) {
        if (p[k] == g.n(k) - 1) continue;
        const double wk = w[k] * mult(p, k);
        const auto gq = static_cast<Eigen::Index>(node_of_[b][lp + g.stride(k)]);
        diag_[gp] += wk;
        diag_[gq] += wk;
        tri.emplace_back(gp, gq, -wk);
        tri.emplace_back(gq, gp, -wk);
      }
    }
  }

  Eigen::VectorXd linear_solve(const Eigen::VectorXd& rhs) const {
    const double bnorm = rhs.norm();
    if (bnorm == 0.0) return Eigen::VectorXd::Zero(rhs.size());
    Eigen::VectorXd x;
    if (ldlt_) {
      x = ldlt_->solve(rhs);
      for (int refine = 0; refine < 3; ++refine) {
        Eigen::VectorXd r = rhs - a_ff_ * x;
        if (r.norm() <= opts_.rel_tol * bnorm) break;
        x += ldlt_->solve(r);
      }
    } else {
      x = cg_->solve(rhs);
    }
    const double res = (rhs - a_ff_ * x).norm() / bnorm;
    if (!(res <= opts_.rel_tol) || !x.allFinite())
      throw ConvergenceError("linear solve stalled at relative residual " + std::to_string(res));
    return x;
  }

  std::vector<Field> scatter(const std::vector<double>& nodal) const {
    std::vector<Field> out;
    out.reserve(blocks_.size());
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      Field f(blocks_[b].grid);
      for (std::size_t i = 0; i < f.values.size(); ++i) f.values[i] = nodal[node_of_[b][i]];
      out.push_back(std::move(f));
    }
    return out;
  }

  using Cg = Eigen::ConjugateGradient<Eigen::SparseMatrix<double>, Eigen::Lower | Eigen::Upper,
                                      Eigen::IncompleteCholesky<double>>;

  std::vector<Block> blocks_;
  SolverOptions opts_;
  std::vector<std::vector<std::size_t>> node_of_;
  std::vector<int> block_count_;
  std::size_t node_count_ = 0;
  std::size_t free_count_ = 0;
  std::vector<Slot> slots_;
  std::map<std::pair<std::size_t, std::size_t>, std::size_t> slot_index_;
  std::vector<double> default_data_;
  std::vector<std::vector<BoundaryTerm>> boundary_terms_;
  std::vector<Reduced> reduced_;
  Eigen::SparseMatrix<double> interior_;
  Eigen::VectorXd src_all_;
  std::vector<double> diag_;
  Eigen::SparseMatrix<double> a_ff_;
  Eigen::SparseMatrix<double> data_to_rhs_;
  Eigen::SparseMatrix<double> dirichlet_select_;
  Eigen::VectorXd src_free_;
  std::shared_ptr<const Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>>> ldlt_;
  std::shared_ptr<const Cg> cg_;
};

inline Block block_from_problem(const PdeProblem& p, const StructuredGrid& grid, std::string label = "D1") {
  Block b;
  b.label = std::move(label);
  b.grid = grid;
  b.diffusion = p.diffusion;
  b.source = p.source;
  b.source_field = p.source_field;
  b.bcs = p.bcs;
  return b;
}

/// Second-order FD solve of a single-box problem on an n-node grid.
inline Field solve_elliptic(const PdeProblem& problem, const GridCounts& n, SolverOptions opts = {}) {
  opts.default_neumann = false;
  StructuredGrid grid(problem.box, n);
  EllipticOperator op({block_from_problem(problem, grid)}, opts);
  auto fields = op.solve();
  return std::move(fields.front());
}

inline Field solve_elliptic(const PdeProblem& problem, std::initializer_list<int> n, SolverOptions opts = {}) {
  GridCounts c{1, 1, 1};
  std::copy(n.begin(), n.end(), c.begin());
  return solve_elliptic(problem, c, opts);
}

/**
 * Same problem posed on the unit box: diffusion scaled by the stretching
 * coefficients, Neumann data and Robin beta rescaled by the normal length.
 * The solution on the unit grid, relabelled onto the original box, is the
 * direct solution.
 */
inline PdeProblem stretch_problem(const PdeProblem& p) {
  const auto s = stretching_map(p.box);
  PdeProblem q = p;
  q.box = unit_box(p.box.dim);
  for (int k = 0; k < p.box.dim; ++k) q.diffusion[k] = p.diffusion[k] * s.coefficients[k];
  for (auto& bc : q.bcs) {
    const double len = p.box.extent(bc.face.axis);
    if (bc.kind == BcKind::Neumann)
      for (auto& v : bc.data) v *= len;
    if (bc.kind == BcKind::Robin) bc.robin_beta /= len;
    if (bc.patch) bc.patch = s.map.apply(*bc.patch);
  }
  return q;
}

/// Relabel a field's grid onto another box with identical node counts.
inline Field relabel(const Field& f, const Box& box) {
  return Field(StructuredGrid(box, f.grid.counts()), f.values);
}

/**
 * @brief Two stacked boxes with different conductivities.
 *
 * The upper box sits on the lower box's top face (last axis) at `placement`
 * (offset of its lower corner within that face).
 */
struct MaterialStack {
  Box lower;
  Box upper;
  double eps_lower = 1.0;
  double eps_upper = 1.0;

  static MaterialStack cubes(double lower_len, double upper_len, double ox, double oy, double eps1, double eps2) {
    MaterialStack s;
    s.lower = make_box({0, 0, 0}, {lower_len, lower_len, lower_len});
    s.upper = make_box({ox, oy, lower_len}, {ox + upper_len, oy + upper_len, lower_len + upper_len});
    s.eps_lower = eps1;
    s.eps_upper = eps2;
    return s;
  }

  void validate() const {
    lower.validate();
    upper.validate();
    if (!(eps_lower > 0 && eps_upper > 0)) throw PreconditionError("conductivities must be positive");
    const int top = lower.dim - 1;
    if (!near(upper.lo[top], lower.hi[top], lower.scale()))
      throw PreconditionError("upper box must rest on the lower box's top face");
    for (int k = 0; k < top; ++k)
      if (upper.lo[k] < lower.lo[k] - kGeomTol || upper.hi[k] > lower.hi[k] + kGeomTol)
        throw PreconditionError("upper footprint exceeds the lower top face");
  }
};

/// Blocks of the two-layer problem: u=1 on top, eps du/dn = 1-u on the bottom, insulated sides.
inline std::vector<Block> multimedium_blocks(const MaterialStack& s, const GridCounts& n_lower, const GridCounts& n_upper) {
  s.validate();
  const int top = s.lower.dim - 1;
  Block lo;
  lo.label = "lower";
  lo.grid = StructuredGrid(s.lower, n_lower);
  lo.diffusion = {s.eps_lower, s.eps_lower, s.eps_lower};
  lo.source = 1.0;
  lo.bcs.push_back(BoundaryCondition::robin({top, Side::Low}, 1.0, s.eps_lower, 1.0));
  Block up;
  up.label = "upper";
  up.grid = StructuredGrid(s.upper, n_upper);
  up.diffusion = {s.eps_upper, s.eps_upper, s.eps_upper};
  up.source = 1.0;
  up.bcs.push_back(BoundaryCondition::dirichlet({top, Side::High}, 1.0));
  return {lo, up};
}

/// Monolithic two-layer solve; returns {lower, upper} fields.
inline std::pair<Field, Field> solve_multimedium(const MaterialStack& s, const GridCounts& n_lower,
                                                 const GridCounts& n_upper, SolverOptions opts = {}) {
  opts.default_neumann = true;
  EllipticOperator op(multimedium_blocks(s, n_lower, n_upper), opts);
  auto f = op.solve();
  return {std::move(f[0]), std::move(f[1])};
}

/// Blocks for a unit-conductivity potential solve with u=1 / u=0 ports.
inline std::vector<Block> resistance_blocks(const CompositeGeometry& geom, const Port& in_port, const Port& out_port,
                                            std::span<const GridCounts> grid_n) {
  if (grid_n.size() != geom.size()) throw ShapeError("one grid per box required");
  std::vector<Block> blocks;
  for (std::size_t b = 0; b < geom.size(); ++b) {
    Block blk;
    blk.label = geom.labels[b];
    blk.grid = StructuredGrid(geom.boxes[b], grid_n[b]);
    blocks.push_back(std::move(blk));
  }
  blocks[geom.index_of(in_port.box_label)].bcs.push_back(BoundaryCondition::dirichlet(in_port.face, 1.0));
  blocks[geom.index_of(out_port.box_label)].bcs.push_back(BoundaryCondition::dirichlet(out_port.face, 0.0));
  return blocks;
}

/**
 * Laplace potential over a face-matched composite: u=1 on the entry port,
 * u=0 on the exit port, insulated elsewhere. sigma scales currents only.
 */
inline std::vector<Field> solve_resistance_potential(const CompositeGeometry& geom, const Port& in_port,
                                                     const Port& out_port, double sigma,
                                                     std::span<const GridCounts> grid_n, SolverOptions opts = {}) {
  if (!(sigma > 0)) throw PreconditionError("conductivity sigma must be positive");
  opts.default_neumann = true;
  auto blocks = resistance_blocks(geom, in_port, out_port, grid_n);
  // validated on a throwaway operator-free check: ports must be exterior faces
  EllipticOperator op(blocks, opts);
  for (const auto* port : {&in_port, &out_port}) {
    const auto b = geom.index_of(port->box_label);
    if (!op.face_is_exterior(b, port->face))
      throw PortError("port " + to_string(port->face) + " of '" + port->box_label + "' is not an exterior face");
  }
  return op.solve();
}

/// Grid counts giving spacing close to `h` on every axis of every box.
inline std::vector<GridCounts> counts_for_spacing(const CompositeGeometry& geom, double h) {
  std::vector<GridCounts> out;
  for (const auto& b : geom.boxes) {
    GridCounts n{1, 1, 1};
    for (int k = 0; k < b.dim; ++k) n[k] = std::max(3, static_cast<int>(std::lround(b.extent(k) / h)) + 1);
    out.push_back(n);
  }
  return out;
}

}  // namespace ddon
