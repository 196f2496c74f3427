#pragma once

#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "d3lmpc/datalog.hpp"
#include "d3lmpc/densesolve.hpp"
#include "d3lmpc/errors.hpp"
#include "d3lmpc/response.hpp"
#include "d3lmpc/topology.hpp"

namespace d3lmpc {

/// Index sets of the augmented d-localized subsystem that owns column i of
/// the system response. Column i may touch states within d hops downstream of
/// i (`core`) and inputs within d + 1 hops (`state_region`). Upstream
/// neighbours of the state region that lie outside it form the boundary: their
/// states enter the local dynamics as exogenous signals. On symmetric graphs
/// these are in_i(d), in_i(d+1) and ring_set(i, d+2).
struct AugmentedRegion {
  int center = 0;
  int d = 0;
  NodeSet core;             // allowed state rows of column i
  NodeSet state_region;     // allowed input rows of column i
  NodeSet boundary;         // exogenous neighbours of state_region
  NodeSet data_region;      // state_region + boundary
  NodeSet state_zero_ring;  // data_region \ core: states pinned to zero
  NodeSet input_zero_ring;  // boundary: inputs pinned to zero
};

inline AugmentedRegion augmented_region(const Topology& topo, int i, int d) {
  if (d < 0) throw ArgumentError("augmented_region: d must be >= 0");
  AugmentedRegion r;
  r.center = i;
  r.d = d;
  r.core = topo.out_set(i, d);
  r.state_region = topo.out_set(i, d + 1);
  NodeSet upstream;
  for (int k : r.state_region) upstream = set_union(upstream, topo.incoming(k));
  r.boundary = set_difference(upstream, r.state_region);
  r.data_region = set_union(r.state_region, r.boundary);
  r.state_zero_ring = set_difference(r.data_region, r.core);
  r.input_zero_ring = r.boundary;
  return r;
}

/// Minimum excitation length for the data region of node i.
inline int required_local_length(const Topology& topo, int i, int d, int horizon) {
  const AugmentedRegion r = augmented_region(topo, i, d);
  return min_data_length(topo.input_dim(r.data_region), topo.state_dim(r.data_region), horizon + 1);
}

/// Length a centralized (unlocalized-data) parametrization needs.
inline int required_global_length(const Topology& topo, int horizon) {
  return min_data_length(topo.total_input_dim(), topo.total_state_dim(), horizon + 1);
}

/// A block of the kept response rows: states of `node` at time t (or inputs).
struct KeptBlock {
  bool input = false;
  int t = 0;
  int node = 0;
  int dim = 0;
  int row = 0;  // first row inside the kept matrix
};

struct ProgramDiagnostics {
  int hankel_columns = 0;
  int data_length = 0;
  int required_length = 0;
  int equality_rows = 0;
  int kept_rows = 0;
  int behaviour_rank = 0;
  int expected_behaviour_rank = 0;
  double feasibility_residual = 0.0;
  double condition = 1.0;
  PeReport pe;

  std::string describe() const {
    std::ostringstream os;
    os << "K=" << hankel_columns << " T_data=" << data_length << " required=" << required_length
       << " eq_rows=" << equality_rows << " kept_rows=" << kept_rows << " rank=" << behaviour_rank << "/"
       << expected_behaviour_rank << " feas_res=" << feasibility_residual << " " << pe.describe();
    return os.str();
  }
};

/// Data-driven constraint system for column i: Psi^i = H_kept G with
/// E_eq G = rhs. Owns a reusable factorization of the projection onto
/// { H_kept G : E_eq G = rhs } so a psi-update is two small matrix products.
class LocalProgram {
 public:
  LocalProgram() = default;

  const AugmentedRegion& region() const { return region_; }
  int center() const { return region_.center; }
  int horizon() const { return horizon_; }
  int depth() const { return horizon_ + 1; }
  int columns() const { return static_cast<int>(h_kept_.cols()); }
  int center_dim() const { return center_dim_; }
  const std::vector<KeptBlock>& kept_blocks() const { return kept_; }
  const Eigen::MatrixXd& hankel_kept() const { return h_kept_; }
  const Eigen::MatrixXd& equality_operator() const { return e_eq_; }
  const Eigen::MatrixXd& equality_rhs() const { return rhs_; }
  const HankelStack& hankel_stack() const { return stack_; }
  const ProgramDiagnostics& diagnostics() const { return diag_; }
  int kept_rows() const { return static_cast<int>(h_kept_.rows()); }

  /// Euclidean projection of target (kept_rows x n_i) onto the feasible set.
  /// Returns Psi; G is written to *g when given.
  Eigen::MatrixXd project(const Eigen::MatrixXd& target, Eigen::MatrixXd* g = nullptr) const {
    if (target.rows() != kept_rows() || target.cols() != center_dim_)
      throw ArgumentError("LocalProgram::project: target has wrong shape");
    Eigen::MatrixXd delta = target - psi_offset_;
    if (g) *g = g_offset_ + gain_ * delta;
    return psi_offset_ + projector_ * delta;
  }

  /// Least-squares G for a target response and its fit residual ||H_kept G - target||_F.
  double fit(const Eigen::MatrixXd& target, Eigen::MatrixXd* g = nullptr) const {
    Eigen::MatrixXd gg;
    project(target, &gg);
    if (g) *g = gg;
    return (h_kept_ * gg - target).norm();
  }

  /// Any feasible G (the minimum-norm one).
  const Eigen::MatrixXd& feasible_g() const { return g_particular_; }

  friend LocalProgram build_local_program(const AugmentedRegion&, const TrajectoryData&, int);

 private:
  AugmentedRegion region_;
  int horizon_ = 0;
  int center_dim_ = 0;
  HankelStack stack_;
  std::vector<KeptBlock> kept_;
  Eigen::MatrixXd h_kept_, e_eq_, rhs_;
  Eigen::MatrixXd g_particular_, g_offset_, gain_, psi_offset_, projector_;
  ProgramDiagnostics diag_;
};

namespace detail {

// Rows of the equality system shared by the local and global programs:
// identity on the t = 0 states of `id_nodes`, zeros on the listed state and
// input rows.
inline void append_rows(const Eigen::MatrixXd& src, int first, int count, std::vector<Eigen::VectorXd>& rows) {
  for (int r = 0; r < count; ++r) rows.push_back(src.row(first + r).transpose());
}

inline Eigen::MatrixXd stack_rows(const std::vector<Eigen::VectorXd>& rows, Eigen::Index cols) {
  Eigen::MatrixXd m(static_cast<Eigen::Index>(rows.size()), cols);
  for (std::size_t k = 0; k < rows.size(); ++k) m.row(static_cast<Eigen::Index>(k)) = rows[k].transpose();
  return m;
}

}  // namespace detail

/// Builds and certifies the local program for region.center from data
/// recorded over exactly region.data_region.
inline LocalProgram build_local_program(const AugmentedRegion& region, const TrajectoryData& local_traj, int horizon) {
  if (horizon < 1) throw ArgumentError("build_local_program: horizon must be >= 1");
  local_traj.validate();
  if (local_traj.nodes != region.data_region)
    throw ArgumentError("build_local_program: trajectory must cover exactly the data region");
  const int depth = horizon + 1;
  LocalProgram prog;
  prog.region_ = region;
  prog.horizon_ = horizon;
  const int i = region.center;
  auto& diag = prog.diag_;
  diag.data_length = local_traj.length();
  int n_r = 0, m_r = 0;
  for (std::size_t k = 0; k < local_traj.nodes.size(); ++k) {
    n_r += local_traj.state_dims[k];
    m_r += local_traj.input_dims[k];
  }
  diag.required_length = min_data_length(m_r, n_r, depth);
  if (local_traj.length() < diag.required_length) {
    std::ostringstream os;
    os << "PE: local record for node " << i + 1 << " has length " << local_traj.length() << ", needs at least "
       << diag.required_length;
    throw DataError(os.str());
  }

  // Stated excitation test: inputs of the state region, order n_core + L.
  {
    TrajectoryData s_view = local_view(local_traj, region.state_region);
    int n_core = 0;
    for (int v : region.core) n_core += local_traj.state_dim_of(v);
    if (s_view.inputs.rows() > 0) {
      diag.pe = check_pe(s_view.inputs, n_core + depth);
      if (!diag.pe.ok)
        throw DataError("build_local_program: node " + std::to_string(i + 1) + " inputs not exciting; " +
                        diag.pe.describe());
    }
  }

  prog.stack_ = build_hankel_stack(local_traj, depth);
  const HankelStack& h = prog.stack_;
  const Eigen::Index k_cols = h.columns();
  diag.hankel_columns = static_cast<int>(k_cols);
  prog.center_dim_ = h.state_dim_of(i);

  // Kept rows: core states for t = 0..T, state-region inputs for t = 0..T-1.
  std::vector<Eigen::VectorXd> kept_rows;
  for (int t = 0; t <= horizon; ++t)
    for (int v : region.core) {
      const int dim = h.state_dim_of(v);
      prog.kept_.push_back({false, t, v, dim, static_cast<int>(kept_rows.size())});
      detail::append_rows(h.state_part, h.state_row(v, t), dim, kept_rows);
    }
  for (int t = 0; t < horizon; ++t)
    for (int v : region.state_region) {
      const int dim = h.input_dim_of(v);
      if (dim == 0) continue;
      prog.kept_.push_back({true, t, v, dim, static_cast<int>(kept_rows.size())});
      detail::append_rows(h.input_part, h.input_row(v, t), dim, kept_rows);
    }
  prog.h_kept_ = detail::stack_rows(kept_rows, k_cols);

  // Equalities: identity over all region states at t = 0, zero states on the
  // zero ring for t >= 1, zero boundary inputs at every depth.
  std::vector<Eigen::VectorXd> eq_rows;
  std::vector<Eigen::VectorXd> rhs_rows;
  for (int v : region.data_region) {
    const int dim = h.state_dim_of(v);
    for (int r = 0; r < dim; ++r) {
      eq_rows.push_back(h.state_part.row(h.state_row(v, 0) + r).transpose());
      Eigen::VectorXd e = Eigen::VectorXd::Zero(prog.center_dim_);
      if (v == i) e(r) = 1.0;
      rhs_rows.push_back(e);
    }
  }
  for (int t = 1; t < depth; ++t)
    for (int v : region.state_zero_ring) detail::append_rows(h.state_part, h.state_row(v, t), h.state_dim_of(v), eq_rows);
  for (int t = 0; t < depth; ++t)
    for (int v : region.input_zero_ring) detail::append_rows(h.input_part, h.input_row(v, t), h.input_dim_of(v), eq_rows);
  while (rhs_rows.size() < eq_rows.size()) rhs_rows.push_back(Eigen::VectorXd::Zero(prog.center_dim_));
  prog.e_eq_ = detail::stack_rows(eq_rows, k_cols);
  prog.rhs_ = detail::stack_rows(rhs_rows, prog.center_dim_);
  diag.equality_rows = static_cast<int>(prog.e_eq_.rows());
  diag.kept_rows = static_cast<int>(prog.h_kept_.rows());

  // Rank of the full region behaviour, logged next to the loose upper bound
  // n_S + (n_B + m_R) L of the augmented subsystem.
  {
    Eigen::MatrixXd full(h.state_part.rows() + h.input_part.rows(), k_cols);
    full << h.state_part, h.input_part;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(full);
    diag.behaviour_rank = numerical_rank(svd.singularValues());
    int n_s = 0, n_b = 0;
    for (int v : region.state_region) n_s += h.state_dim_of(v);
    for (int v : region.boundary) n_b += h.state_dim_of(v);
    diag.expected_behaviour_rank = std::min<int>(n_s + (n_b + m_r) * depth, static_cast<int>(full.rows()));
  }

  EqLsFactor factor(prog.h_kept_, prog.e_eq_);
  diag.condition = factor.condition();
  Eigen::MatrixXd gp;
  try {
    gp = factor.particular(prog.rhs_);
  } catch (const InfeasibleError&) {
    gp = Eigen::MatrixXd::Zero(k_cols, prog.center_dim_);
  }
  diag.feasibility_residual = prog.e_eq_.rows() > 0 ? (prog.e_eq_ * gp - prog.rhs_).norm() : 0.0;
  if (diag.feasibility_residual > 1e-8)
    throw DataError("build_local_program: constraint system for node " + std::to_string(i + 1) +
                    " is infeasible (not localizable or data insufficient); " + diag.describe());
  prog.g_particular_ = gp;
  prog.gain_ = factor.gain();
  prog.g_offset_ = gp - prog.gain_ * (prog.h_kept_ * gp);
  prog.psi_offset_ = prog.h_kept_ * prog.g_offset_;
  prog.projector_ = prog.h_kept_ * prog.gain_;
  return prog;
}

/// Zero-pads per-column local solutions into a global response. Entry k of
/// `psi` is the kept-row matrix of programs[k]; inputs at t = T are never
/// stored.
inline SystemResponse assemble_response(const Topology& topo, const std::vector<const LocalProgram*>& programs,
                                        const std::vector<Eigen::MatrixXd>& psi) {
  if (programs.size() != psi.size()) throw ArgumentError("assemble_response: one solution per program required");
  std::vector<bool> seen(static_cast<std::size_t>(topo.node_count()), false);
  SystemResponse phi;
  phi.horizon = -1;
  for (std::size_t k = 0; k < programs.size(); ++k) {
    const LocalProgram& p = *programs[k];
    if (phi.horizon < 0) phi.horizon = p.horizon();
    if (p.horizon() != phi.horizon) throw ArgumentError("assemble_response: inconsistent horizons");
    if (psi[k].rows() != p.kept_rows() || psi[k].cols() != p.center_dim())
      throw ArgumentError("assemble_response: solution shape mismatch");
    seen[p.center()] = true;
    for (const KeptBlock& b : p.kept_blocks()) {
      Eigen::MatrixXd blk = psi[k].middleRows(b.row, b.dim);
      if (b.input) {
        phi.phi_u[{b.t, b.node, p.center()}] = blk;
      } else {
        phi.phi_x[{b.t, b.node, p.center()}] = blk;
      }
    }
  }
  for (int j = 0; j < topo.node_count(); ++j)
    if (!seen[j]) throw ArgumentError("assemble_response: missing solution for node " + std::to_string(j + 1));
  return phi;
}

/// Kept-row matrix of column `center` of an existing response (inverse of assembly).
inline Eigen::MatrixXd kept_slice(const Topology& topo, const LocalProgram& prog, const SystemResponse& phi) {
  Eigen::MatrixXd m(prog.kept_rows(), prog.center_dim());
  for (const KeptBlock& b : prog.kept_blocks())
    m.middleRows(b.row, b.dim) =
        b.input ? phi.u_block(topo, b.t, b.node, prog.center()) : phi.x_block(topo, b.t, b.node, prog.center());
  return m;
}

/// Centralized localized parametrization over global data: for each column j,
/// H_1(x) G^j = I^j, zero states outside out_j(d), zero inputs outside
/// out_j(d+1).
struct GlobalProgram {
  int horizon = 0;
  int d = 0;
  HankelStack stack;
  Eigen::MatrixXd h_traj;  // rows: x_0..x_T stacked, then u_0..u_{T-1}
  std::vector<Eigen::MatrixXd> e_eq;  // per column node
  std::vector<Eigen::MatrixXd> rhs;
  PeReport pe;
};

inline GlobalProgram build_global_program(const TrajectoryData& traj, const Topology& topo, int d, int horizon) {
  if (horizon < 1) throw ArgumentError("build_global_program: horizon must be >= 1");
  if (d < 0) throw ArgumentError("build_global_program: d must be >= 0");
  traj.validate();
  if (static_cast<int>(traj.nodes.size()) != topo.node_count())
    throw ArgumentError("build_global_program: trajectory must cover all nodes");
  const int depth = horizon + 1;
  GlobalProgram g;
  g.horizon = horizon;
  g.d = d;
  g.pe = check_pe(traj.inputs, topo.total_state_dim() + depth);
  if (!g.pe.ok) throw DataError("build_global_program: global input not exciting; " + g.pe.describe());
  g.stack = build_hankel_stack(traj, depth);
  const HankelStack& h = g.stack;
  const int n = topo.total_state_dim(), p = topo.total_input_dim();
  g.h_traj.resize(static_cast<Eigen::Index>(n) * depth + static_cast<Eigen::Index>(p) * horizon, h.columns());
  g.h_traj.topRows(static_cast<Eigen::Index>(n) * depth) = h.state_part;
  if (p > 0) g.h_traj.bottomRows(static_cast<Eigen::Index>(p) * horizon) = h.input_part.topRows(p * horizon);
  for (int j = 0; j < topo.node_count(); ++j) {
    const int nj = topo.state_dim(j);
    std::vector<Eigen::VectorXd> rows;
    Eigen::MatrixXd id_rhs = Eigen::MatrixXd::Zero(n, nj);
    id_rhs.middleRows(topo.state_offset(j), nj).setIdentity();
    detail::append_rows(h.state_part, 0, n, rows);
    for (int t = 1; t < depth; ++t)
      for (int v = 0; v < topo.node_count(); ++v) {
        const int dist = topo.dist(j, v);
        if (dist == Topology::kUnreachable || dist > d)
          detail::append_rows(h.state_part, h.state_row(v, t), topo.state_dim(v), rows);
      }
    for (int t = 0; t < depth; ++t)
      for (int v = 0; v < topo.node_count(); ++v) {
        const int dist = topo.dist(j, v);
        if ((dist == Topology::kUnreachable || dist > d + 1) && topo.input_dim(v) > 0)
          detail::append_rows(h.input_part, h.input_row(v, t), topo.input_dim(v), rows);
      }
    Eigen::MatrixXd e = detail::stack_rows(rows, h.columns());
    Eigen::MatrixXd r = Eigen::MatrixXd::Zero(e.rows(), nj);
    r.topRows(n) = id_rhs;
    g.e_eq.push_back(std::move(e));
    g.rhs.push_back(std::move(r));
  }
  return g;
}

/// Per-node constraint dimensions, for the scaling experiment.
inline void write_program_dims_csv(std::ostream& os, const std::vector<const LocalProgram*>& programs) {
  os << "node,data_region,hankel_columns,equality_rows,kept_rows,behaviour_rank,expected_rank\n";
  for (const LocalProgram* p : programs) {
    const auto& dg = p->diagnostics();
    os << p->center() + 1 << "," << p->region().data_region.size() << "," << dg.hankel_columns << ","
       << dg.equality_rows << "," << dg.kept_rows << "," << dg.behaviour_rank << "," << dg.expected_behaviour_rank
       << "\n";
  }
}

}  // namespace d3lmpc
