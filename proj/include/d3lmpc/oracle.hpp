#pragma once

#include <cmath>
#include <limits>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "d3lmpc/densesolve.hpp"
#include "d3lmpc/errors.hpp"
#include "d3lmpc/localsls.hpp"
#include "d3lmpc/plant.hpp"
#include "d3lmpc/response.hpp"

namespace d3lmpc {

struct OracleSolution {
  SystemResponse phi;
  Rollout trajectory;
  double cost = 0.0;
};

/// Centralized solver over a fixed family of achievable localized responses.
/// Column j of the response ranges over Base_j + Range_j * W (W free); the
/// predicted trajectory Phi x0 is therefore affine in one stacked vector and
/// the MPC subproblem becomes a small QP in trajectory coordinates
/// y = [x_0; ...; x_T; u_0; ...; u_{T-1}].
class TrajectoryQp {
 public:
  TrajectoryQp() = default;

  TrajectoryQp(Topology topo, int d, int horizon, CostSpec cost, ConstraintSpec cons)
      : topo_(std::move(topo)), d_(d), horizon_(horizon), cost_(std::move(cost)), cons_(std::move(cons)) {
    cons_.validate(topo_);
    const int n = topo_.total_state_dim(), p = topo_.total_input_dim();
    ny_ = n * (horizon_ + 1) + p * horizon_;
    Eigen::MatrixXd q = cost_.dense_q(topo_, false), qt = cost_.dense_q(topo_, true), r = cost_.dense_r(topo_);
    weight_ = Eigen::MatrixXd::Zero(ny_, ny_);
    for (int t = 0; t <= horizon_; ++t) weight_.block(t * n, t * n, n, n) = t == horizon_ ? qt : q;
    for (int t = 0; t < horizon_; ++t)
      weight_.block(n * (horizon_ + 1) + t * p, n * (horizon_ + 1) + t * p, p, p) = r;
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(weight_);
    weight_root_ = es.eigenvectors() * es.eigenvalues().cwiseMax(0.0).cwiseSqrt().asDiagonal() *
                   es.eigenvectors().transpose();
    mask_ = locality_mask(topo_, d_, horizon_);
  }

  const Topology& topology() const { return topo_; }
  int horizon() const { return horizon_; }
  int d() const { return d_; }

  int x_row(int t, int node) const { return t * topo_.total_state_dim() + topo_.state_offset(node); }
  int u_row(int t, int node) const {
    return topo_.total_state_dim() * (horizon_ + 1) + t * topo_.total_input_dim() + topo_.input_offset(node);
  }

  OracleSolution solve(const Eigen::VectorXd& x0) const {
    const int n_nodes = topo_.node_count();
    if (x0.size() != topo_.total_state_dim()) throw ArgumentError("oracle: x0 dimension mismatch");
    Eigen::VectorXd c = Eigen::VectorXd::Zero(ny_);
    std::vector<int> active;
    int width = 0;
    for (int j = 0; j < n_nodes; ++j) {
      Eigen::VectorXd xj = x0.segment(topo_.state_offset(j), topo_.state_dim(j));
      c += base_[j] * xj;
      if (xj.squaredNorm() > 0 && range_[j].cols() > 0) {
        active.push_back(j);
        width += static_cast<int>(range_[j].cols());
      }
    }
    Eigen::MatrixXd stacked(ny_, width);
    for (int col = 0; int j : active) {
      stacked.middleCols(col, range_[j].cols()) = range_[j];
      col += static_cast<int>(range_[j].cols());
    }
    Eigen::MatrixXd basis = Eigen::MatrixXd::Zero(ny_, 0);
    if (width > 0) {
      Eigen::JacobiSVD<Eigen::MatrixXd> svd(stacked, Eigen::ComputeThinU);
      int r = numerical_rank(svd.singularValues(), 1e-10);
      basis = svd.matrixU().leftCols(r);
    }

    Eigen::VectorXd v;
    if (cons_.empty() || basis.cols() == 0) {
      EqLsProblem ls{weight_root_ * basis, -weight_root_ * c, Eigen::MatrixXd(0, basis.cols()), Eigen::MatrixXd(0, 1)};
      v = basis.cols() > 0 ? Eigen::VectorXd(solve_eq_ls(ls).x.col(0)) : Eigen::VectorXd(0);
    } else {
      v = solve_boxed(c, basis);
    }
    Eigen::VectorXd y = c + basis * v;
    if (!cons_.empty()) check_bounds(y);

    // Split y back into per-column responses with the minimum-norm weights.
    Eigen::VectorXd w = Eigen::VectorXd::Zero(width);
    if (width > 0) w = stacked.completeOrthogonalDecomposition().solve(y - c);
    OracleSolution sol;
    sol.phi.horizon = horizon_;
    for (int j = 0; j < n_nodes; ++j) {
      Eigen::MatrixXd col = base_[j];
      auto it = std::find(active.begin(), active.end(), j);
      if (it != active.end()) {
        int off = 0;
        for (auto k = active.begin(); k != it; ++k) off += static_cast<int>(range_[*k].cols());
        Eigen::VectorXd xj = x0.segment(topo_.state_offset(j), topo_.state_dim(j));
        col += range_[j] * w.segment(off, range_[j].cols()) * xj.transpose() / xj.squaredNorm();
      }
      store_column(sol.phi, j, col);
    }
    sol.trajectory = unpack(y);
    sol.cost = y.dot(weight_ * y);
    return sol;
  }

 protected:
  // Registers the affine family for column j (ny x n_j base, ny x r range).
  void set_family(int j, Eigen::MatrixXd base, const Eigen::MatrixXd& span) {
    if (base_.empty()) {
      base_.resize(topo_.node_count());
      range_.resize(topo_.node_count());
    }
    base_[j] = std::move(base);
    if (span.cols() == 0) {
      range_[j] = Eigen::MatrixXd::Zero(ny_, 0);
      return;
    }
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(span, Eigen::ComputeThinU);
    int r = numerical_rank(svd.singularValues(), 1e-10);
    range_[j] = svd.matrixU().leftCols(r);
  }

  int ny_ = 0;
  Topology topo_;
  int d_ = 0;
  int horizon_ = 0;
  CostSpec cost_;
  ConstraintSpec cons_;
  LocalityMask mask_;

 private:
  Rollout unpack(const Eigen::VectorXd& y) const {
    const int n = topo_.total_state_dim(), p = topo_.total_input_dim();
    Rollout r;
    r.states = Eigen::Map<const Eigen::MatrixXd>(y.data(), n, horizon_ + 1);
    r.inputs = Eigen::Map<const Eigen::MatrixXd>(y.data() + n * (horizon_ + 1), p, horizon_);
    return r;
  }

  void store_column(SystemResponse& phi, int j, const Eigen::MatrixXd& col) const {
    for (int t = 0; t <= horizon_; ++t)
      for (int k : mask_.state_rows[j])
        phi.phi_x[{t, k, j}] = col.middleRows(x_row(t, k), topo_.state_dim(k));
    for (int t = 0; t < horizon_; ++t)
      for (int k : mask_.input_rows[j])
        if (topo_.input_dim(k) > 0) phi.phi_u[{t, k, j}] = col.middleRows(u_row(t, k), topo_.input_dim(k));
  }

  // Bounds on trajectory coordinates; x_0 is never bounded.
  void bounds(Eigen::VectorXd& lo, Eigen::VectorXd& hi) const {
    const double inf = std::numeric_limits<double>::infinity();
    lo = Eigen::VectorXd::Constant(ny_, -inf);
    hi = Eigen::VectorXd::Constant(ny_, inf);
    for (int k = 0; k < topo_.node_count(); ++k) {
      if (cons_.state[k])
        for (int t = 1; t <= horizon_; ++t) {
          lo.segment(x_row(t, k), topo_.state_dim(k)) = cons_.state[k]->lo;
          hi.segment(x_row(t, k), topo_.state_dim(k)) = cons_.state[k]->hi;
        }
      if (cons_.input[k])
        for (int t = 0; t < horizon_; ++t) {
          lo.segment(u_row(t, k), topo_.input_dim(k)) = cons_.input[k]->lo;
          hi.segment(u_row(t, k), topo_.input_dim(k)) = cons_.input[k]->hi;
        }
    }
  }

  void check_bounds(const Eigen::VectorXd& y) const {
    Eigen::VectorXd lo, hi;
    bounds(lo, hi);
    for (int k = 0; k < ny_; ++k)
      if (y(k) < lo(k) - 1e-6 || y(k) > hi(k) + 1e-6) throw InfeasibleError("oracle: constraints infeasible");
  }

  // Variables (v, y) with y - basis v = c, box on y, cost y'Wy.
  Eigen::VectorXd solve_boxed(const Eigen::VectorXd& c, const Eigen::MatrixXd& basis) const {
    const Eigen::Index r = basis.cols();
    BoxQpProblem qp;
    qp.p = Eigen::MatrixXd::Zero(r + ny_, r + ny_);
    qp.p.bottomRightCorner(ny_, ny_) = 2.0 * weight_;
    qp.q = Eigen::VectorXd::Zero(r + ny_);
    Eigen::VectorXd lo, hi;
    bounds(lo, hi);
    const double inf = std::numeric_limits<double>::infinity();
    qp.lo = Eigen::VectorXd::Constant(r + ny_, -inf);
    qp.hi = Eigen::VectorXd::Constant(r + ny_, inf);
    qp.lo->tail(ny_) = lo;
    qp.hi->tail(ny_) = hi;
    qp.a_eq.resize(ny_, r + ny_);
    qp.a_eq << -basis, Eigen::MatrixXd::Identity(ny_, ny_);
    qp.b_eq = c;
    QpResult res;
    try {
      res = solve_box_qp(qp);
    } catch (const SolverError&) {
      throw InfeasibleError("oracle: constrained subproblem did not converge (likely infeasible)");
    }
    return res.x.head(r);
  }

  std::vector<Eigen::MatrixXd> base_;
  std::vector<Eigen::MatrixXd> range_;
  Eigen::MatrixXd weight_, weight_root_;
};

/// Model-based DLMPC: Phi_x[0] = I, Phi_x[t+1] = A Phi_x[t] + B Phi_u[t],
/// Phi in the d-locality mask. Throws InfeasibleError when (A, B) is not
/// d-localizable at this horizon.
class ModelBasedDlmpc : public TrajectoryQp {
 public:
  ModelBasedDlmpc(const LtiSystem& sys, int d, int horizon, CostSpec cost, ConstraintSpec cons)
      : TrajectoryQp(sys.topology(), d, horizon, std::move(cost), std::move(cons)) {
    const Topology& topo = topo_;
    const Eigen::MatrixXd a = sys.dense_a(), b = sys.dense_b();
    const int n = topo.total_state_dim();
    for (int j = 0; j < topo.node_count(); ++j) {
      const int nj = topo.state_dim(j);
      // Free input entries of column j.
      std::vector<std::pair<int, int>> vars;  // (t, global input row)
      for (int t = 0; t < horizon_; ++t)
        for (int k : mask_.input_rows[j])
          for (int r = 0; r < topo.input_dim(k); ++r) vars.emplace_back(t, topo.input_offset(k) + r);
      Eigen::MatrixXd base = Eigen::MatrixXd::Zero(ny_, nj);
      Eigen::MatrixXd x = Eigen::MatrixXd::Zero(n, nj);
      x.middleRows(topo.state_offset(j), nj).setIdentity();
      for (int t = 0; t <= horizon_; ++t) {
        base.middleRows(t * n, n) = x;
        x = a * x;
      }
      Eigen::MatrixXd map = Eigen::MatrixXd::Zero(ny_, static_cast<Eigen::Index>(vars.size()));
      for (std::size_t v = 0; v < vars.size(); ++v) {
        auto [t0, row] = vars[v];
        map(u_row(t0, 0) + row, v) = 1.0;
        Eigen::VectorXd xs = b.col(row);
        for (int t = t0 + 1; t <= horizon_; ++t) {
          map.col(v).segment(t * n, n) = xs;
          xs = a * xs;
        }
      }
      // Locality: states outside out_j(d) vanish for t >= 1.
      std::vector<int> zero_rows;
      for (int t = 1; t <= horizon_; ++t)
        for (int k = 0; k < topo.node_count(); ++k)
          if (!mask_.state_allowed(k, j))
            for (int r = 0; r < topo.state_dim(k); ++r) zero_rows.push_back(x_row(t, k) + r);
      Eigen::MatrixXd s_map(zero_rows.size(), map.cols()), s_base(zero_rows.size(), nj);
      for (std::size_t k = 0; k < zero_rows.size(); ++k) {
        s_map.row(k) = map.row(zero_rows[k]);
        s_base.row(k) = base.row(zero_rows[k]);
      }
      EqLsFactor f(Eigen::MatrixXd::Zero(0, map.cols()), s_map);
      Eigen::MatrixXd vp;
      try {
        vp = f.particular(-s_base);
      } catch (const InfeasibleError&) {
        throw InfeasibleError("model-based DLMPC: system is not " + std::to_string(d) + "-localizable (column " +
                              std::to_string(j + 1) + ")");
      }
      set_family(j, base + map * vp, map * f.null_basis());
    }
  }
};

/// Centralized data-driven DLMPC over the global localized parametrization.
class DataDrivenCentralized : public TrajectoryQp {
 public:
  DataDrivenCentralized(const GlobalProgram& prog, const Topology& topo, CostSpec cost, ConstraintSpec cons)
      : TrajectoryQp(topo, prog.d, prog.horizon, std::move(cost), std::move(cons)) {
    for (int j = 0; j < topo.node_count(); ++j) {
      EqLsFactor f(Eigen::MatrixXd::Zero(0, prog.stack.columns()), prog.e_eq[j]);
      Eigen::MatrixXd gp;
      try {
        gp = f.particular(prog.rhs[j]);
      } catch (const InfeasibleError&) {
        throw InfeasibleError("data-driven DLMPC: localized parametrization infeasible for column " +
                              std::to_string(j + 1));
      }
      set_family(j, prog.h_traj * gp, prog.h_traj * f.null_basis());
    }
  }
};

inline OracleSolution solve_dlmpc_centralized(const LtiSystem& sys, const Eigen::VectorXd& x0, int d, int horizon,
                                              const CostSpec& cost, const ConstraintSpec& cons) {
  return ModelBasedDlmpc(sys, d, horizon, cost, cons).solve(x0);
}

inline OracleSolution solve_dd_centralized(const GlobalProgram& prog, const Topology& topo, const Eigen::VectorXd& x0,
                                           const CostSpec& cost, const ConstraintSpec& cons) {
  return DataDrivenCentralized(prog, topo, cost, cons).solve(x0);
}

/// Finite-horizon LQR by backward Riccati recursion; u_t = -K_t x_t.
struct LqrSolution {
  std::vector<Eigen::MatrixXd> gains;  // K_0 .. K_{T-1}
  std::vector<Eigen::MatrixXd> cost_to_go;  // P_0 .. P_T
};

inline LqrSolution lqr_dp(const Eigen::MatrixXd& a, const Eigen::MatrixXd& b, const Eigen::MatrixXd& q,
                          const Eigen::MatrixXd& r, const Eigen::MatrixXd& q_terminal, int horizon) {
  if (horizon < 0) throw ArgumentError("lqr_dp: horizon must be >= 0");
  LqrSolution sol;
  sol.gains.resize(horizon);
  sol.cost_to_go.resize(horizon + 1);
  sol.cost_to_go[horizon] = q_terminal;
  for (int t = horizon - 1; t >= 0; --t) {
    const Eigen::MatrixXd& p = sol.cost_to_go[t + 1];
    Eigen::MatrixXd s = r + b.transpose() * p * b;
    Eigen::MatrixXd k = s.ldlt().solve(b.transpose() * p * a);
    sol.gains[t] = k;
    Eigen::MatrixXd pn = q + a.transpose() * p * a - a.transpose() * p * b * k;
    sol.cost_to_go[t] = 0.5 * (pn + pn.transpose());
  }
  return sol;
}

inline LqrSolution lqr_dp(const LtiSystem& sys, int horizon, const CostSpec& cost) {
  const Topology& topo = sys.topology();
  return lqr_dp(sys.dense_a(), sys.dense_b(), cost.dense_q(topo, false), cost.dense_r(topo),
                cost.dense_q(topo, true), horizon);
}

}  // namespace d3lmpc
