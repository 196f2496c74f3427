#pragma once

#include <algorithm>
#include <chrono>
#include <exception>
#include <cmath>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <tuple>
#include <vector>

#include <Eigen/Dense>

#include "d3lmpc/datalog.hpp"
#include "d3lmpc/densesolve.hpp"
#include "d3lmpc/errors.hpp"
#include "d3lmpc/localsls.hpp"
#include "d3lmpc/plant.hpp"
#include "d3lmpc/response.hpp"
#include "d3lmpc/topology.hpp"

namespace d3lmpc {

enum class Tag : int { Measurement = 0, Phi = 1, Psi = 2, Stop = 3 };

inline const char* tag_name(Tag t) {
  switch (t) {
    case Tag::Measurement: return "x0";
    case Tag::Phi: return "phi";
    case Tag::Psi: return "psi";
    case Tag::Stop: return "stop";
  }
  return "?";
}

/// One response block in transit.
struct Piece {
  BlockIndex key;
  bool input = false;
  Eigen::MatrixXd value;
};

struct Message {
  int sender = 0;
  int receiver = 0;
  Tag tag = Tag::Phi;
  std::vector<Piece> blocks;
  Eigen::VectorXd values;

  std::size_t doubles() const {
    std::size_t n = static_cast<std::size_t>(values.size());
    for (const Piece& b : blocks) n += static_cast<std::size_t>(b.value.size());
    return n;
  }
};

/// Synchronous in-process message bus. Each agent posts into its own outbox
/// during a compute phase; deliver() is the barrier. Every message is checked
/// against the hop radius allowed for its tag.
class RoundBus {
 public:
  RoundBus() = default;
  RoundBus(const Topology& topo, int d) : topo_(&topo), d_(d), outbox_(static_cast<std::size_t>(topo.node_count())) {}

  int d() const { return d_; }

  /// Allowed hop count for a tag, measured in the direction information flows
  /// through the dynamics.
  int radius(Tag t) const { return t == Tag::Stop ? std::max(d_, 1) : d_ + 1; }

  void post(Message m) {
    if (!topo_) throw ArgumentError("RoundBus: not attached to a topology");
    outbox_.at(static_cast<std::size_t>(m.sender)).push_back(std::move(m));
  }

  /// Barrier: audits, counts and hands every message to its receiver, sorted
  /// by (sender, receiver, tag).
  std::vector<std::vector<Message>> deliver() {
    std::vector<Message> all;
    for (auto& box : outbox_) {
      for (auto& m : box) all.push_back(std::move(m));
      box.clear();
    }
    std::stable_sort(all.begin(), all.end(), [](const Message& a, const Message& b) {
      return std::tie(a.sender, a.receiver, a.tag) < std::tie(b.sender, b.receiver, b.tag);
    });
    std::vector<std::vector<Message>> inbox(outbox_.size());
    round_messages_ = 0;
    round_bytes_ = 0;
    for (auto& m : all) {
      audit(m);
      ++round_messages_;
      round_bytes_ += m.doubles() * sizeof(double);
      inbox.at(static_cast<std::size_t>(m.receiver)).push_back(std::move(m));
    }
    messages_ += round_messages_;
    bytes_ += round_bytes_;
    ++rounds_;
    return inbox;
  }

  std::size_t messages() const { return messages_; }
  std::size_t bytes() const { return bytes_; }
  std::size_t rounds() const { return rounds_; }
  std::size_t round_messages() const { return round_messages_; }
  void reset_counters() { messages_ = bytes_ = rounds_ = round_messages_ = round_bytes_ = 0; }

 private:
  void audit(const Message& m) const {
    if (m.sender == m.receiver) throw ArgumentError("RoundBus: self-addressed message");
    // Phi pieces travel from a row owner back to the column owner upstream.
    int h = m.tag == Tag::Phi ? topo_->dist(m.receiver, m.sender) : topo_->dist(m.sender, m.receiver);
    if (h == Topology::kUnreachable || h > radius(m.tag)) {
      std::ostringstream os;
      os << "RoundBus: " << tag_name(m.tag) << " message " << m.sender + 1 << "->" << m.receiver + 1 << " spans "
         << h << " hops, limit " << radius(m.tag);
      throw ArgumentError(os.str());
    }
  }

  const Topology* topo_ = nullptr;
  int d_ = 0;
  std::vector<std::vector<Message>> outbox_;
  std::size_t messages_ = 0, bytes_ = 0, rounds_ = 0, round_messages_ = 0, round_bytes_ = 0;
};

struct ConsensusSettings {
  double rho = 1.0;
  double eps_p = 1e-6;
  double eps_d = 1e-6;
  int max_iter = 5000;
  bool parallel = false;
};

/// Everything node i holds. As row owner it keeps row i of Phi, Psi and
/// Lambda over the columns that reach it; as column owner it keeps the kept
/// rows of column i together with its local data program.
struct AgentState {
  int node = 0;
  int horizon = 0;
  LocalProgram program;

  // Row layout: state rows over in_i(d), input rows over in_i(d+1).
  NodeSet cols_x, cols_u;
  std::vector<int> off_x, off_u;  // column offsets inside the row blocks
  int state_dim = 0, input_dim = 0;
  std::vector<Eigen::MatrixXd> phi_x, psi_x, lam_x;  // t = 0..T, n_i x sum n_j
  std::vector<Eigen::MatrixXd> phi_u, psi_u, lam_u;  // t = 0..T-1, m_i x sum n_j
  std::vector<Eigen::MatrixXd> phi_x_prev, phi_u_prev;

  // Column layout (kept rows of column i).
  Eigen::MatrixXd phi_col, psi_col, lam_col, psi_col_prev, g;
  NodeSet row_owners;  // out_i(d+1) \ {i}

  // Local cost and constraints of row i.
  Eigen::MatrixXd q, q_terminal, r;
  std::optional<Box> state_box, input_box;

  // Measurements of in_i(d+1), aligned with cols_u.
  std::vector<Eigen::VectorXd> x0;

  bool local_done = false;
  bool flooded_done = false;
  double primal = 0.0;
  double dual = 0.0;
  double compute_ms = 0.0;
};

inline AgentState make_agent(const Topology& topo, int i, int d, LocalProgram program, const CostSpec& cost,
                             const ConstraintSpec& cons) {
  AgentState a;
  a.node = i;
  a.horizon = program.horizon();
  a.state_dim = topo.state_dim(i);
  a.input_dim = topo.input_dim(i);
  a.cols_x = topo.in_set(i, d);
  a.cols_u = topo.in_set(i, d + 1);
  int w = 0;
  for (int j : a.cols_x) { a.off_x.push_back(w); w += topo.state_dim(j); }
  const int wx = w;
  w = 0;
  for (int j : a.cols_u) { a.off_u.push_back(w); w += topo.state_dim(j); }
  const int wu = w;
  a.phi_x.assign(a.horizon + 1, Eigen::MatrixXd::Zero(a.state_dim, wx));
  a.phi_u.assign(a.horizon, Eigen::MatrixXd::Zero(a.input_dim, wu));
  a.psi_x = a.lam_x = a.phi_x_prev = a.phi_x;
  a.psi_u = a.lam_u = a.phi_u_prev = a.phi_u;
  a.phi_col = Eigen::MatrixXd::Zero(program.kept_rows(), program.center_dim());
  a.psi_col = a.lam_col = a.psi_col_prev = a.phi_col;
  a.g = program.feasible_g();
  a.row_owners = set_difference(topo.out_set(i, d + 1), {i});
  a.q = cost.q.at(i);
  a.q_terminal = cost.q_terminal.at(i);
  a.r = cost.r.at(i);
  a.state_box = cons.state.at(i);
  a.input_box = cons.input.at(i);
  for (int j : a.cols_u) a.x0.push_back(Eigen::VectorXd::Zero(topo.state_dim(j)));
  a.program = std::move(program);
  return a;
}

/// Builds one agent per node from a global excitation record; each program
/// only sees local_view(traj, data_region).
inline std::vector<AgentState> build_agents(const Topology& topo, const TrajectoryData& traj, int d, int horizon,
                                            const CostSpec& cost, const ConstraintSpec& cons) {
  cons.validate(topo);
  std::vector<AgentState> agents;
  agents.reserve(topo.node_count());
  for (int i = 0; i < topo.node_count(); ++i) {
    AugmentedRegion reg = augmented_region(topo, i, d);
    agents.push_back(make_agent(topo, i, d, build_local_program(reg, local_view(traj, reg.data_region), horizon),
                                cost, cons));
  }
  return agents;
}

namespace detail {

inline int position(const NodeSet& s, int v) {
  auto it = std::lower_bound(s.begin(), s.end(), v);
  if (it == s.end() || *it != v) return -1;
  return static_cast<int>(it - s.begin());
}

// Local x0 vector restricted to the given columns.
inline Eigen::VectorXd stacked_x0(const AgentState& a, const NodeSet& cols) {
  int n = 0;
  for (int j : cols) n += static_cast<int>(a.x0[position(a.cols_u, j)].size());
  Eigen::VectorXd v(n);
  int o = 0;
  for (int j : cols) {
    const Eigen::VectorXd& x = a.x0[position(a.cols_u, j)];
    v.segment(o, x.size()) = x;
    o += static_cast<int>(x.size());
  }
  return v;
}

inline bool is_diagonal(const Eigen::MatrixXd& m) {
  return (m - Eigen::MatrixXd(m.diagonal().asDiagonal())).cwiseAbs().maxCoeff() == 0.0;
}

// argmin_Phi y'Qy + rho/2 ||Phi - V||^2 with y = Phi a, optional box on y.
inline Eigen::MatrixXd row_block_prox(const Eigen::MatrixXd& v, const Eigen::VectorXd& a, const Eigen::MatrixXd& q,
                                      const std::optional<Box>& box, double rho, int agent, int iter) {
  if (v.rows() == 0) return v;
  const double s = a.squaredNorm();
  if (s == 0.0) return v;
  const Eigen::VectorXd z = v * a;
  const double k = rho / s;
  if (is_diagonal(q)) {
    if (!box) {
      Eigen::MatrixXd out(v.rows(), v.cols());
      for (Eigen::Index r = 0; r < v.rows(); ++r)
        out.row(r) = rank1_prox(q(r, r), a, v.row(r).transpose(), rho).transpose();
      return out;
    }
    Eigen::VectorXd y(z.size());
    for (Eigen::Index r = 0; r < z.size(); ++r)
      y(r) = std::clamp(k * z(r) / (2.0 * q(r, r) + k), box->lo(r), box->hi(r));
    return v + (y - z) * a.transpose() / s;
  }
  Eigen::MatrixXd p = 2.0 * q + k * Eigen::MatrixXd::Identity(q.rows(), q.cols());
  Eigen::VectorXd y;
  if (!box) {
    y = p.llt().solve(k * z);
  } else {
    BoxQpProblem qp{p, -k * z, box->lo, box->hi, Eigen::MatrixXd(0, z.size()), Eigen::VectorXd(0)};
    try {
      y = solve_box_qp(qp).x;
    } catch (const SolverError& e) {
      throw SolverError("agent " + std::to_string(agent + 1) + ", iteration " + std::to_string(iter) + ": " + e.what());
    }
  }
  return v + (y - z) * a.transpose() / s;
}

}  // namespace detail

/// Row-wise proximal step on [Phi]_i with target Psi_row - Lambda_row.
inline void phi_update(AgentState& a, double rho, int iter = 0) {
  const Eigen::VectorXd ax = detail::stacked_x0(a, a.cols_x);
  const Eigen::VectorXd au = detail::stacked_x0(a, a.cols_u);
  for (int t = 0; t <= a.horizon; ++t) {
    a.phi_x_prev[t] = a.phi_x[t];
    const Eigen::MatrixXd& q = t == a.horizon ? a.q_terminal : a.q;
    a.phi_x[t] = detail::row_block_prox(a.psi_x[t] - a.lam_x[t], ax, q, t >= 1 ? a.state_box : std::nullopt, rho,
                                        a.node, iter);
  }
  for (int t = 0; t < a.horizon; ++t) {
    a.phi_u_prev[t] = a.phi_u[t];
    a.phi_u[t] = detail::row_block_prox(a.psi_u[t] - a.lam_u[t], au, a.r, a.input_box, rho, a.node, iter);
  }
}

/// Projection of Phi_col + Lambda_col onto the data-consistent localized set.
inline void psi_update(AgentState& a) {
  a.psi_col_prev = a.psi_col;
  a.psi_col = a.program.project(a.phi_col + a.lam_col);
}

/// A data coefficient G with H_kept G = Psi_col. Only Psi drives the
/// iteration, so G is recovered on demand.
inline void refresh_g(AgentState& a) { a.program.project(a.psi_col, &a.g); }

inline void lambda_update(AgentState& a) {
  for (std::size_t t = 0; t < a.phi_x.size(); ++t) a.lam_x[t] += a.phi_x[t] - a.psi_x[t];
  for (std::size_t t = 0; t < a.phi_u.size(); ++t) a.lam_u[t] += a.phi_u[t] - a.psi_u[t];
  a.lam_col += a.phi_col - a.psi_col;
}

namespace detail {

// Row owner -> column owners: the Phi pieces of row i in each column.
inline void send_phi(const AgentState& a, RoundBus& bus) {
  for (std::size_t c = 0; c < a.cols_u.size(); ++c) {
    const int j = a.cols_u[c];
    if (j == a.node) continue;
    Message m{a.node, j, Tag::Phi, {}, {}};
    const int nj = static_cast<int>(a.x0[c].size());
    const int px = position(a.cols_x, j);
    if (px >= 0)
      for (int t = 0; t <= a.horizon; ++t) m.blocks.push_back({{t, a.node, j}, false, a.phi_x[t].middleCols(a.off_x[px], nj)});
    if (a.input_dim > 0)
      for (int t = 0; t < a.horizon; ++t) m.blocks.push_back({{t, a.node, j}, true, a.phi_u[t].middleCols(a.off_u[c], nj)});
    bus.post(std::move(m));
  }
}

// Writes a (t, row, col) block into the column-layout matrix.
inline void put_col(AgentState& a, Eigen::MatrixXd& col, bool input, const BlockIndex& k, const Eigen::MatrixXd& blk) {
  for (const KeptBlock& b : a.program.kept_blocks())
    if (b.input == input && b.t == k.t && b.node == k.row) {
      col.middleRows(b.row, b.dim) = blk;
      return;
    }
  throw ArgumentError("consensus: block outside the kept rows of column " + std::to_string(a.node + 1));
}

// Column owner assembles Phi_col from its own row and received pieces.
inline void gather_phi(AgentState& a, const std::vector<Message>& inbox) {
  for (const KeptBlock& b : a.program.kept_blocks()) {
    if (b.node != a.node) continue;
    if (b.input) {
      a.phi_col.middleRows(b.row, b.dim) = a.phi_u[b.t].middleCols(a.off_u[position(a.cols_u, a.node)], a.state_dim);
    } else {
      a.phi_col.middleRows(b.row, b.dim) = a.phi_x[b.t].middleCols(a.off_x[position(a.cols_x, a.node)], a.state_dim);
    }
  }
  for (const Message& m : inbox)
    if (m.tag == Tag::Phi)
      for (const Piece& b : m.blocks) put_col(a, a.phi_col, b.input, b.key, b.value);
}

// Column owner -> row owners: the Psi pieces of column i in each row.
inline void send_psi(const AgentState& a, RoundBus& bus) {
  for (int k : a.row_owners) {
    Message m{a.node, k, Tag::Psi, {}, {}};
    for (const KeptBlock& b : a.program.kept_blocks())
      if (b.node == k) m.blocks.push_back({{b.t, k, a.node}, b.input, a.psi_col.middleRows(b.row, b.dim)});
    bus.post(std::move(m));
  }
}

// Row owner assembles Psi_row.
inline void gather_psi(AgentState& a, const std::vector<Message>& inbox) {
  auto place = [&](int col_node, int t, bool input, const Eigen::MatrixXd& blk) {
    if (input) {
      a.psi_u[t].middleCols(a.off_u[position(a.cols_u, col_node)], blk.cols()) = blk;
    } else {
      a.psi_x[t].middleCols(a.off_x[position(a.cols_x, col_node)], blk.cols()) = blk;
    }
  };
  for (const KeptBlock& b : a.program.kept_blocks())
    if (b.node == a.node) place(a.node, b.t, b.input, a.psi_col.middleRows(b.row, b.dim));
  for (const Message& m : inbox)
    if (m.tag == Tag::Psi)
      for (const Piece& b : m.blocks) place(m.sender, b.key.t, b.input, b.value);
}

inline double row_norm(const std::vector<Eigen::MatrixXd>& a, const std::vector<Eigen::MatrixXd>& b,
                       const std::vector<Eigen::MatrixXd>& c, const std::vector<Eigen::MatrixXd>& d) {
  double s = 0.0;
  for (std::size_t t = 0; t < a.size(); ++t) s += (a[t] - b[t]).squaredNorm();
  for (std::size_t t = 0; t < c.size(); ++t) s += (c[t] - d[t]).squaredNorm();
  return std::sqrt(s);
}

template <class F>
void for_each_agent(std::vector<AgentState>& agents, bool parallel, F&& f) {
  const int n = static_cast<int>(agents.size());
  if (parallel) {
    std::vector<std::exception_ptr> errs(agents.size());
#ifdef D3LMPC_HAVE_OPENMP
#pragma omp parallel for schedule(static)
#endif
    for (int k = 0; k < n; ++k) {
      try {
        f(agents[k]);
      } catch (...) {
        errs[k] = std::current_exception();
      }
    }
    for (auto& e : errs)
      if (e) std::rethrow_exception(e);
  } else {
    for (int k = 0; k < n; ++k) f(agents[k]);
  }
}

template <class F>
void timed(AgentState& a, F&& f) {
  auto t0 = std::chrono::steady_clock::now();
  f();
  a.compute_ms += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace detail

/// Raised when ADMM hits max_iter; carries the residual histories.
class ConsensusNonconvergence : public SolverError {
 public:
  ConsensusNonconvergence(const std::string& what, std::vector<double> p, std::vector<double> d)
      : SolverError(what), primal_history(std::move(p)), dual_history(std::move(d)) {}
  std::vector<double> primal_history;
  std::vector<double> dual_history;
};

struct ConsensusResult {
  int iterations = 0;
  double primal = 0.0;  // max_i ||Psi_i - Phi_i||_F
  double dual = 0.0;    // max_i max(||Phi_i^{k+1} - Phi_i^k||_F, rho ||Psi^{k+1} - Psi^k||_F)
  std::size_t messages = 0;
  std::size_t bytes = 0;
  double wall_ms_per_agent = 0.0;
  std::vector<double> primal_history, dual_history;
};

/// Each agent measures [x]_i and shares it with out_i(d+1).
inline void share_measurements(std::vector<AgentState>& agents, RoundBus& bus, const Topology& topo,
                               const Eigen::VectorXd& x) {
  if (x.size() != topo.total_state_dim()) throw ArgumentError("consensus: state dimension mismatch");
  for (AgentState& a : agents) {
    Eigen::VectorXd xi = x.segment(topo.state_offset(a.node), a.state_dim);
    a.x0[detail::position(a.cols_u, a.node)] = xi;
    for (int k : a.row_owners) bus.post(Message{a.node, k, Tag::Measurement, {}, xi});
  }
  auto inbox = bus.deliver();
  for (AgentState& a : agents)
    for (const Message& m : inbox[a.node]) a.x0[detail::position(a.cols_u, m.sender)] = m.values;
}

/// Synchronous ADMM over all agents from measurement x. Warm starts from
/// whatever (Phi, Psi, Lambda) the agents hold.
inline ConsensusResult solve_consensus(std::vector<AgentState>& agents, RoundBus& bus, const Topology& topo,
                                       const Eigen::VectorXd& x, const ConsensusSettings& s = {}) {
  if (!(s.rho > 0)) throw ArgumentError("solve_consensus: rho must be positive");
  if (s.max_iter < 1) throw ArgumentError("solve_consensus: max_iter must be >= 1");
  if (static_cast<int>(agents.size()) != topo.node_count()) throw ArgumentError("solve_consensus: one agent per node");
  ConsensusResult res;
  const std::size_t msg0 = bus.messages(), bytes0 = bus.bytes();
  for (AgentState& a : agents) a.compute_ms = 0.0;
  share_measurements(agents, bus, topo, x);
  const int hop = std::max(bus.d(), 1);
  const int flood_rounds = std::max(1, (topo.diameter() + hop - 1) / hop);

  for (int iter = 1; iter <= s.max_iter; ++iter) {
    detail::for_each_agent(agents, s.parallel, [&](AgentState& a) { detail::timed(a, [&] { phi_update(a, s.rho, iter); }); });
    for (AgentState& a : agents) detail::send_phi(a, bus);
    auto inbox = bus.deliver();
    detail::for_each_agent(agents, s.parallel, [&](AgentState& a) {
      detail::timed(a, [&] {
        detail::gather_phi(a, inbox[a.node]);
        psi_update(a);
      });
    });
    for (AgentState& a : agents) detail::send_psi(a, bus);
    inbox = bus.deliver();
    detail::for_each_agent(agents, s.parallel, [&](AgentState& a) {
      detail::timed(a, [&] {
        std::vector<Eigen::MatrixXd> old_x = a.psi_x, old_u = a.psi_u;
        detail::gather_psi(a, inbox[a.node]);
        lambda_update(a);
        a.primal = detail::row_norm(a.psi_x, a.phi_x, a.psi_u, a.phi_u);
        const double dphi = detail::row_norm(a.phi_x, a.phi_x_prev, a.phi_u, a.phi_u_prev);
        const double dpsi = s.rho * detail::row_norm(a.psi_x, old_x, a.psi_u, old_u);
        a.dual = std::max(dphi, dpsi);
        a.local_done = a.primal <= s.eps_p && dphi <= s.eps_d && dpsi <= s.eps_d;
        a.flooded_done = a.local_done;
      });
    });
    double pmax = 0.0, dmax = 0.0;
    for (const AgentState& a : agents) {
      pmax = std::max(pmax, a.primal);
      dmax = std::max(dmax, a.dual);
    }
    res.primal_history.push_back(pmax);
    res.dual_history.push_back(dmax);

    // AND-reduce the stop flags by flooding.
    for (int r = 0; r < flood_rounds; ++r) {
      for (const AgentState& a : agents)
        for (int k : set_difference(topo.out_set(a.node, hop), {a.node}))
          bus.post(Message{a.node, k, Tag::Stop, {}, Eigen::VectorXd::Constant(1, a.flooded_done ? 1.0 : 0.0)});
      inbox = bus.deliver();
      for (AgentState& a : agents)
        for (const Message& m : inbox[a.node]) a.flooded_done = a.flooded_done && m.values(0) > 0.5;
    }
    bool all = true;
    for (const AgentState& a : agents) all = all && a.flooded_done;
    res.iterations = iter;
    res.primal = pmax;
    res.dual = dmax;
    if (all) break;
    if (iter == s.max_iter) {
      std::ostringstream os;
      os << "consensus: no convergence after " << s.max_iter << " iterations (primal " << pmax << ", dual " << dmax
         << ")";
      throw ConsensusNonconvergence(os.str(), res.primal_history, res.dual_history);
    }
  }
  for (AgentState& a : agents) detail::timed(a, [&] { refresh_g(a); });
  res.messages = bus.messages() - msg0;
  res.bytes = bus.bytes() - bytes0;
  double total = 0.0;
  for (const AgentState& a : agents) total += a.compute_ms;
  res.wall_ms_per_agent = agents.empty() ? 0.0 : total / static_cast<double>(agents.size());
  return res;
}

/// [u_0]_i from the agent's own Phi_u[0] row and its local measurements.
inline Eigen::VectorXd agent_u0(const AgentState& a) {
  if (a.horizon == 0 || a.input_dim == 0) return Eigen::VectorXd::Zero(a.input_dim);
  return a.phi_u[0] * detail::stacked_x0(a, a.cols_u);
}

/// Response assembled from the column owners' Psi (data-consistent copy).
inline SystemResponse assembled_psi(const Topology& topo, const std::vector<AgentState>& agents) {
  std::vector<const LocalProgram*> progs;
  std::vector<Eigen::MatrixXd> psi;
  for (const AgentState& a : agents) {
    progs.push_back(&a.program);
    psi.push_back(a.psi_col);
  }
  return assemble_response(topo, progs, psi);
}

/// Response assembled from the row owners' Phi.
inline SystemResponse assembled_phi(const Topology& topo, const std::vector<AgentState>& agents) {
  SystemResponse phi;
  phi.horizon = agents.empty() ? 0 : agents.front().horizon;
  for (const AgentState& a : agents) {
    for (std::size_t c = 0; c < a.cols_x.size(); ++c)
      for (int t = 0; t <= a.horizon; ++t)
        phi.phi_x[{t, a.node, a.cols_x[c]}] = a.phi_x[t].middleCols(a.off_x[c], topo.state_dim(a.cols_x[c]));
    if (a.input_dim > 0)
      for (std::size_t c = 0; c < a.cols_u.size(); ++c)
        for (int t = 0; t < a.horizon; ++t)
          phi.phi_u[{t, a.node, a.cols_u[c]}] = a.phi_u[t].middleCols(a.off_u[c], topo.state_dim(a.cols_u[c]));
  }
  return phi;
}

/// Clears (Phi, Psi, Lambda) to cold-start the next solve.
inline void reset_iterates(std::vector<AgentState>& agents) {
  for (AgentState& a : agents) {
    for (auto* v : {&a.phi_x, &a.psi_x, &a.lam_x, &a.phi_x_prev, &a.phi_u, &a.psi_u, &a.lam_u, &a.phi_u_prev})
      for (auto& m : *v) m.setZero();
    a.phi_col.setZero();
    a.psi_col.setZero();
    a.lam_col.setZero();
    a.psi_col_prev.setZero();
  }
}

struct StepStats {
  int step = 0;
  int admm_iters = 0;
  double wall_ms_per_agent_avg = 0.0;
  std::size_t messages = 0;
  std::size_t bytes = 0;
  double primal_res = 0.0;
  double dual_res = 0.0;
};

struct StepResult {
  Eigen::VectorXd u;
  Eigen::VectorXd x_next;
  StepStats stats;
};

/// One receding-horizon step: solve, actuate [u_0]_i at every node, advance
/// the plant.
inline StepResult mpc_step(std::vector<AgentState>& agents, RoundBus& bus, const LtiSystem& plant,
                           const Eigen::VectorXd& x, const ConsensusSettings& s = {}, bool warm_start = true) {
  const Topology& topo = plant.topology();
  if (!warm_start) reset_iterates(agents);
  ConsensusResult cr = solve_consensus(agents, bus, topo, x, s);
  StepResult out;
  out.u = Eigen::VectorXd::Zero(topo.total_input_dim());
  for (const AgentState& a : agents)
    if (a.input_dim > 0) out.u.segment(topo.input_offset(a.node), a.input_dim) = agent_u0(a);
  out.x_next = plant.step(x, out.u);
  out.stats.admm_iters = cr.iterations;
  out.stats.wall_ms_per_agent_avg = cr.wall_ms_per_agent;
  out.stats.messages = cr.messages;
  out.stats.bytes = cr.bytes;
  out.stats.primal_res = cr.primal;
  out.stats.dual_res = cr.dual;
  return out;
}

struct ClosedLoop {
  TrajectoryData trajectory;
  double cost = 0.0;  // realized stage costs sum_t x_t'Qx_t + u_t'Ru_t over applied steps
  std::vector<StepStats> stats;
};

/// Realized stage cost of a closed-loop record (no terminal weight).
inline double stage_cost_sum(const Topology& topo, const TrajectoryData& traj, const CostSpec& cost) {
  double total = 0.0;
  for (int t = 0; t < traj.length(); ++t)
    for (int i = 0; i < topo.node_count(); ++i) {
      Eigen::VectorXd x = traj.states.col(t).segment(topo.state_offset(i), topo.state_dim(i));
      total += x.dot(cost.q[i] * x);
      if (topo.input_dim(i) > 0) {
        Eigen::VectorXd u = traj.inputs.col(t).segment(topo.input_offset(i), topo.input_dim(i));
        total += u.dot(cost.r[i] * u);
      }
    }
  return total;
}

/// Recorded closed loop; zero applied steps leave just x0.
inline TrajectoryData closed_loop_record(const LtiSystem& plant, const Eigen::VectorXd& x0,
                                         const Eigen::MatrixXd& inputs) {
  if (inputs.cols() > 0) return plant.simulate(x0, inputs);
  TrajectoryData t = TrajectoryData::empty_for(plant.topology());
  t.states = x0;
  t.inputs = inputs;
  return t;
}

inline ClosedLoop run_receding_horizon(std::vector<AgentState>& agents, RoundBus& bus, const LtiSystem& plant,
                                       const CostSpec& cost, const Eigen::VectorXd& x0, int steps,
                                       const ConsensusSettings& s = {}) {
  if (steps < 0) throw ArgumentError("run_receding_horizon: steps must be >= 0");
  const Topology& topo = plant.topology();
  ClosedLoop cl;
  Eigen::MatrixXd inputs(topo.total_input_dim(), steps);
  Eigen::VectorXd x = x0;
  for (int k = 0; k < steps; ++k) {
    StepResult r = mpc_step(agents, bus, plant, x, s);
    r.stats.step = k;
    cl.stats.push_back(r.stats);
    inputs.col(k) = r.u;
    x = r.x_next;
  }
  cl.trajectory = closed_loop_record(plant, x0, inputs);
  cl.cost = stage_cost_sum(topo, cl.trajectory, cost);
  return cl;
}

inline void write_stats_csv(std::ostream& os, const std::vector<StepStats>& stats) {
  os << "step,admm_iters,wall_ms_per_agent_avg,messages,bytes,primal_res,dual_res\n";
  for (const StepStats& s : stats)
    os << s.step << "," << s.admm_iters << "," << s.wall_ms_per_agent_avg << "," << s.messages << "," << s.bytes << ","
       << s.primal_res << "," << s.dual_res << "\n";
}

}  // namespace d3lmpc
