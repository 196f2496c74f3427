#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <optional>
#include <ostream>
#include <tuple>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "d3lmpc/errors.hpp"
#include "d3lmpc/plant.hpp"
#include "d3lmpc/topology.hpp"

namespace d3lmpc {

/// (t, row node, column node)
struct BlockIndex {
  int t = 0;
  int row = 0;
  int col = 0;
  auto operator<=>(const BlockIndex&) const = default;
};

/// First block column of (Phi_x, Phi_u) over horizon T, stored sparsely.
/// Column node j indexes the initial condition [x0]_j. Absent blocks are zero.
struct SystemResponse {
  int horizon = 0;
  std::map<BlockIndex, Eigen::MatrixXd> phi_x;  // t = 0..T, n_i x n_j
  std::map<BlockIndex, Eigen::MatrixXd> phi_u;  // t = 0..T-1, m_i x n_j

  Eigen::MatrixXd x_block(const Topology& topo, int t, int i, int j) const {
    auto it = phi_x.find({t, i, j});
    if (it != phi_x.end()) return it->second;
    return Eigen::MatrixXd::Zero(topo.state_dim(i), topo.state_dim(j));
  }
  Eigen::MatrixXd u_block(const Topology& topo, int t, int i, int j) const {
    auto it = phi_u.find({t, i, j});
    if (it != phi_u.end()) return it->second;
    return Eigen::MatrixXd::Zero(topo.input_dim(i), topo.state_dim(j));
  }
};

/// Allowed block pairs for a d-localized response: state block (i, j) iff
/// dist(j -> i) <= d, input block (i, j) iff dist(j -> i) <= d + 1.
struct LocalityMask {
  int d = 0;
  int horizon = 0;
  std::vector<NodeSet> state_rows;  // per column j: out_set(j, d)
  std::vector<NodeSet> input_rows;  // per column j: out_set(j, d + 1)

  bool state_allowed(int i, int j) const { return contains(state_rows.at(j), i); }
  bool input_allowed(int i, int j) const { return contains(input_rows.at(j), i); }
};

inline LocalityMask locality_mask(const Topology& topo, int d, int horizon) {
  if (d < 0) throw ArgumentError("locality_mask: d must be >= 0");
  LocalityMask m;
  m.d = d;
  m.horizon = horizon;
  for (int j = 0; j < topo.node_count(); ++j) {
    m.state_rows.push_back(topo.out_set(j, d));
    m.input_rows.push_back(topo.out_set(j, d + 1));
  }
  return m;
}

/// True iff every stored block lies inside the mask.
inline bool respects_mask(const SystemResponse& phi, const LocalityMask& mask) {
  for (const auto& [k, blk] : phi.phi_x)
    if (!mask.state_allowed(k.row, k.col)) return false;
  for (const auto& [k, blk] : phi.phi_u)
    if (!mask.input_allowed(k.row, k.col)) return false;
  return true;
}

namespace detail {

inline Eigen::MatrixXd dense_x_column(const Topology& topo, const SystemResponse& phi, int t, int j) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(topo.total_state_dim(), topo.state_dim(j));
  for (auto it = phi.phi_x.lower_bound({t, 0, 0}); it != phi.phi_x.end() && it->first.t == t; ++it)
    if (it->first.col == j) c.middleRows(topo.state_offset(it->first.row), it->second.rows()) = it->second;
  return c;
}

inline Eigen::MatrixXd dense_u_column(const Topology& topo, const SystemResponse& phi, int t, int j) {
  Eigen::MatrixXd c = Eigen::MatrixXd::Zero(topo.total_input_dim(), topo.state_dim(j));
  for (auto it = phi.phi_u.lower_bound({t, 0, 0}); it != phi.phi_u.end() && it->first.t == t; ++it)
    if (it->first.col == j && it->second.rows() > 0)
      c.middleRows(topo.input_offset(it->first.row), it->second.rows()) = it->second;
  return c;
}

}  // namespace detail

/// max_t ||Phi_x[t+1] - A Phi_x[t] - B Phi_u[t]||_F + ||Phi_x[0] - I||_F.
/// Zero means the response is achievable.
inline double achievability_residual(const LtiSystem& sys, const SystemResponse& phi) {
  const Topology& topo = sys.topology();
  const int n = topo.node_count();
  for (const auto& [k, blk] : phi.phi_x)
    if (k.t < 0 || k.t > phi.horizon || k.row >= n || k.col >= n || blk.rows() != topo.state_dim(k.row) ||
        blk.cols() != topo.state_dim(k.col))
      throw ArgumentError("achievability_residual: Phi_x block has wrong index or shape");
  for (const auto& [k, blk] : phi.phi_u)
    if (k.t < 0 || k.t >= phi.horizon || k.row >= n || k.col >= n || blk.rows() != topo.input_dim(k.row) ||
        blk.cols() != topo.state_dim(k.col))
      throw ArgumentError("achievability_residual: Phi_u block has wrong index or shape");

  const Eigen::MatrixXd a = sys.dense_a(), b = sys.dense_b();
  double init = 0.0;
  std::vector<double> per_t(static_cast<std::size_t>(phi.horizon), 0.0);
  for (int j = 0; j < n; ++j) {
    Eigen::MatrixXd x0 = detail::dense_x_column(topo, phi, 0, j);
    x0.middleRows(topo.state_offset(j), topo.state_dim(j)) -= Eigen::MatrixXd::Identity(topo.state_dim(j), topo.state_dim(j));
    init += x0.squaredNorm();
    Eigen::MatrixXd cur = detail::dense_x_column(topo, phi, 0, j);
    for (int t = 0; t < phi.horizon; ++t) {
      Eigen::MatrixXd next = detail::dense_x_column(topo, phi, t + 1, j);
      Eigen::MatrixXd r = next - a * cur - b * detail::dense_u_column(topo, phi, t, j);
      per_t[t] += r.squaredNorm();
      cur = std::move(next);
    }
  }
  double worst = 0.0;
  for (double v : per_t) worst = std::max(worst, std::sqrt(v));
  return worst + std::sqrt(init);
}

/// Predicted trajectory x_t = Phi_x[t] x0, u_t = Phi_u[t] x0.
struct Rollout {
  Eigen::MatrixXd states;  // n x (T+1)
  Eigen::MatrixXd inputs;  // p x T
};

inline Rollout rollout(const Topology& topo, const SystemResponse& phi, const Eigen::VectorXd& x0) {
  if (x0.size() != topo.total_state_dim()) throw ArgumentError("rollout: x0 dimension mismatch");
  Rollout r;
  r.states = Eigen::MatrixXd::Zero(topo.total_state_dim(), phi.horizon + 1);
  r.inputs = Eigen::MatrixXd::Zero(topo.total_input_dim(), phi.horizon);
  for (const auto& [k, blk] : phi.phi_x)
    r.states.col(k.t).segment(topo.state_offset(k.row), blk.rows()) +=
        blk * x0.segment(topo.state_offset(k.col), blk.cols());
  for (const auto& [k, blk] : phi.phi_u)
    if (blk.rows() > 0)
      r.inputs.col(k.t).segment(topo.input_offset(k.row), blk.rows()) +=
          blk * x0.segment(topo.state_offset(k.col), blk.cols());
  return r;
}

/// [u_0]_i from the Phi_u[0] row blocks of node i, reading only the x0 entries
/// those blocks touch.
inline Eigen::VectorXd extract_u0(const Topology& topo, const SystemResponse& phi, const Eigen::VectorXd& x0, int i) {
  Eigen::VectorXd u = Eigen::VectorXd::Zero(topo.input_dim(i));
  for (auto it = phi.phi_u.lower_bound({0, i, 0}); it != phi.phi_u.end() && it->first.t == 0 && it->first.row == i;
       ++it)
    u += it->second * x0.segment(topo.state_offset(it->first.col), it->second.cols());
  return u;
}

/// Separable quadratic stage and terminal costs.
struct CostSpec {
  std::vector<Eigen::MatrixXd> q;
  std::vector<Eigen::MatrixXd> r;
  std::vector<Eigen::MatrixXd> q_terminal;

  CostSpec() = default;
  CostSpec(std::vector<Eigen::MatrixXd> q_, std::vector<Eigen::MatrixXd> r_,
           std::optional<std::vector<Eigen::MatrixXd>> qt = std::nullopt)
      : q(std::move(q_)), r(std::move(r_)), q_terminal(qt ? std::move(*qt) : q) {
    if (q.size() != r.size() || q.size() != q_terminal.size()) throw ArgumentError("CostSpec: size mismatch");
    for (std::size_t i = 0; i < q.size(); ++i) {
      check_psd(q[i], false, "Q");
      check_psd(q_terminal[i], false, "Q_T");
      check_psd(r[i], true, "R");
    }
  }

  /// Q = I, R = I on every node.
  static CostSpec identity(const Topology& topo) {
    std::vector<Eigen::MatrixXd> q, r;
    for (int i = 0; i < topo.node_count(); ++i) {
      q.push_back(Eigen::MatrixXd::Identity(topo.state_dim(i), topo.state_dim(i)));
      r.push_back(Eigen::MatrixXd::Identity(topo.input_dim(i), topo.input_dim(i)));
    }
    return CostSpec(q, r);
  }

  Eigen::MatrixXd dense_q(const Topology& topo, bool terminal) const {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(topo.total_state_dim(), topo.total_state_dim());
    for (int i = 0; i < topo.node_count(); ++i)
      m.block(topo.state_offset(i), topo.state_offset(i), topo.state_dim(i), topo.state_dim(i)) =
          terminal ? q_terminal[i] : q[i];
    return m;
  }
  Eigen::MatrixXd dense_r(const Topology& topo) const {
    Eigen::MatrixXd m = Eigen::MatrixXd::Zero(topo.total_input_dim(), topo.total_input_dim());
    for (int i = 0; i < topo.node_count(); ++i)
      if (topo.input_dim(i) > 0)
        m.block(topo.input_offset(i), topo.input_offset(i), topo.input_dim(i), topo.input_dim(i)) = r[i];
    return m;
  }

 private:
  static void check_psd(const Eigen::MatrixXd& m, bool strict, const char* name) {
    if (m.rows() != m.cols()) throw ArgumentError(std::string("CostSpec: ") + name + " must be square");
    if (m.size() == 0) return;
    if ((m - m.transpose()).norm() > 1e-12 * (1.0 + m.norm()))
      throw ArgumentError(std::string("CostSpec: ") + name + " must be symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
    double lo = es.eigenvalues().minCoeff();
    if (strict ? !(lo > 0) : lo < -1e-12)
      throw ArgumentError(std::string("CostSpec: ") + name + (strict ? " must be positive definite" : " must be PSD"));
  }
};

/// Per-node box bounds, identical at every time step. An absent box means
/// unconstrained. x_0 is pinned by the measurement and never bounded.
struct Box {
  Eigen::VectorXd lo;
  Eigen::VectorXd hi;
};

struct ConstraintSpec {
  std::vector<std::optional<Box>> state;  // per node
  std::vector<std::optional<Box>> input;  // per node

  static ConstraintSpec none(const Topology& topo) {
    ConstraintSpec c;
    c.state.resize(topo.node_count());
    c.input.resize(topo.node_count());
    return c;
  }

  /// |u_i| <= bound on every input channel.
  static ConstraintSpec input_box(const Topology& topo, double bound) {
    ConstraintSpec c = none(topo);
    for (int i = 0; i < topo.node_count(); ++i)
      if (topo.input_dim(i) > 0)
        c.input[i] = Box{Eigen::VectorXd::Constant(topo.input_dim(i), -bound),
                         Eigen::VectorXd::Constant(topo.input_dim(i), bound)};
    c.validate(topo);
    return c;
  }

  bool empty() const {
    for (const auto& b : state) if (b) return false;
    for (const auto& b : input) if (b) return false;
    return true;
  }

  void validate(const Topology& topo) const {
    if (static_cast<int>(state.size()) != topo.node_count() || static_cast<int>(input.size()) != topo.node_count())
      throw ArgumentError("ConstraintSpec: need one entry per node");
    auto check = [](const Box& b, int dim) {
      if (b.lo.size() != dim || b.hi.size() != dim) throw ArgumentError("ConstraintSpec: box dimension mismatch");
      for (int k = 0; k < dim; ++k) {
        if (b.lo(k) > b.hi(k)) throw ArgumentError("ConstraintSpec: lower bound exceeds upper bound");
        if (b.lo(k) > 0 || b.hi(k) < 0) throw ArgumentError("ConstraintSpec: box must contain the origin");
      }
    };
    for (int i = 0; i < topo.node_count(); ++i) {
      if (state[i]) check(*state[i], topo.state_dim(i));
      if (input[i]) check(*input[i], topo.input_dim(i));
    }
  }
};

/// sum_{t<T} x_t'Q x_t + u_t'R u_t + x_T'Q_T x_T, accumulated per node.
inline double eval_cost(const Topology& topo, const Eigen::MatrixXd& states, const Eigen::MatrixXd& inputs,
                        const CostSpec& cost) {
  const Eigen::Index horizon = inputs.cols();
  if (states.cols() != horizon + 1 || states.rows() != topo.total_state_dim() || inputs.rows() != topo.total_input_dim())
    throw ArgumentError("eval_cost: dimension mismatch");
  double total = 0.0;
  for (int i = 0; i < topo.node_count(); ++i) {
    const int ox = topo.state_offset(i), nx = topo.state_dim(i);
    const int ou = topo.input_offset(i), nu = topo.input_dim(i);
    for (Eigen::Index t = 0; t <= horizon; ++t) {
      Eigen::VectorXd x = states.col(t).segment(ox, nx);
      total += x.dot((t == horizon ? cost.q_terminal[i] : cost.q[i]) * x);
      if (t < horizon && nu > 0) {
        Eigen::VectorXd u = inputs.col(t).segment(ou, nu);
        total += u.dot(cost.r[i] * u);
      }
    }
  }
  return total;
}

inline double eval_cost(const Topology& topo, const SystemResponse& phi, const Eigen::VectorXd& x0, const CostSpec& cost) {
  Rollout r = rollout(topo, phi, x0);
  return eval_cost(topo, r.states, r.inputs, cost);
}

/// CSV dump: kind,t,i,j,row,col,value with 1-based node labels.
inline void write_response_csv(std::ostream& os, const SystemResponse& phi) {
  os << "kind,t,i,j,row,col,value\n";
  os.precision(std::numeric_limits<double>::max_digits10);
  auto dump = [&](const char* kind, const std::map<BlockIndex, Eigen::MatrixXd>& blocks) {
    for (const auto& [k, blk] : blocks)
      for (Eigen::Index r = 0; r < blk.rows(); ++r)
        for (Eigen::Index c = 0; c < blk.cols(); ++c)
          os << kind << "," << k.t << "," << k.row + 1 << "," << k.col + 1 << "," << r << "," << c << "," << blk(r, c)
             << "\n";
  };
  dump("x", phi.phi_x);
  dump("u", phi.phi_u);
}

}  // namespace d3lmpc
