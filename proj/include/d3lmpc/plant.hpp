#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <random>
#include <utility>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "d3lmpc/errors.hpp"
#include "d3lmpc/topology.hpp"
#include "d3lmpc/trajectory.hpp"

namespace d3lmpc {

/// Parameters drawn for the swing-equation chain benchmark.
struct ChainParams {
  std::vector<double> inertia;   // m_i
  std::vector<double> damping;   // d_i
  std::vector<double> coupling;  // k_{i,i+1}, one per undirected edge
  double dt = 0.2;
  std::uint64_t seed = 0;
};

/// Networked LTI plant x(t+1) = A x(t) + B u(t) with A block-sparse on the
/// topology and B block-diagonal. Ground truth for simulation and oracles;
/// never handed to agents.
class LtiSystem {
 public:
  using BlockKey = std::pair<int, int>;

  LtiSystem() = default;

  LtiSystem(Topology topo, std::map<BlockKey, Eigen::MatrixXd> a_blocks, std::vector<Eigen::MatrixXd> b_blocks)
      : topo_(std::move(topo)), a_(std::move(a_blocks)), b_(std::move(b_blocks)) {
    const int n = topo_.node_count();
    if (static_cast<int>(b_.size()) != n) throw ArgumentError("LtiSystem: need one B block per node");
    for (const auto& [key, blk] : a_) {
      auto [i, j] = key;
      if (i < 0 || i >= n || j < 0 || j >= n) throw ArgumentError("LtiSystem: A block index out of range");
      if (i != j && !contains(topo_.incoming(i), j))
        throw ArgumentError("LtiSystem: A block (" + std::to_string(i) + "," + std::to_string(j) +
                            ") not on a topology edge");
      if (blk.rows() != topo_.state_dim(i) || blk.cols() != topo_.state_dim(j))
        throw ArgumentError("LtiSystem: A block has wrong shape");
    }
    for (int i = 0; i < n; ++i)
      if (b_[i].rows() != topo_.state_dim(i) || b_[i].cols() != topo_.input_dim(i))
        throw ArgumentError("LtiSystem: B block has wrong shape");
  }

  const Topology& topology() const { return topo_; }
  int state_dim() const { return topo_.total_state_dim(); }
  int input_dim() const { return topo_.total_input_dim(); }

  /// [A]_ij, or a zero block when absent.
  Eigen::MatrixXd a_block(int i, int j) const {
    auto it = a_.find({i, j});
    if (it != a_.end()) return it->second;
    return Eigen::MatrixXd::Zero(topo_.state_dim(i), topo_.state_dim(j));
  }
  const Eigen::MatrixXd& b_block(int i) const { return b_.at(static_cast<std::size_t>(i)); }
  const std::map<BlockKey, Eigen::MatrixXd>& a_blocks() const { return a_; }

  Eigen::VectorXd step(const Eigen::VectorXd& x, const Eigen::VectorXd& u) const {
    if (x.size() != state_dim() || u.size() != input_dim())
      throw ArgumentError("step: dimension mismatch");
    Eigen::VectorXd next = Eigen::VectorXd::Zero(state_dim());
    const int n = topo_.node_count();
    for (int i = 0; i < n; ++i) {
      const int oi = topo_.state_offset(i), ni = topo_.state_dim(i);
      auto xi = next.segment(oi, ni);
      auto self = a_.find({i, i});
      if (self != a_.end()) xi.noalias() += self->second * x.segment(oi, ni);
      for (int j : topo_.incoming(i)) {
        auto it = a_.find({i, j});
        if (it != a_.end()) xi.noalias() += it->second * x.segment(topo_.state_offset(j), topo_.state_dim(j));
      }
      if (topo_.input_dim(i) > 0) xi.noalias() += b_[i] * u.segment(topo_.input_offset(i), topo_.input_dim(i));
    }
    return next;
  }

  TrajectoryData simulate(const Eigen::VectorXd& x0, const Eigen::MatrixXd& inputs) const {
    if (inputs.cols() < 1) throw ArgumentError("simulate: need at least one input sample");
    if (x0.size() != state_dim() || inputs.rows() != input_dim())
      throw ArgumentError("simulate: dimension mismatch");
    TrajectoryData traj = TrajectoryData::empty_for(topo_);
    traj.states.resize(state_dim(), inputs.cols() + 1);
    traj.inputs = inputs;
    traj.states.col(0) = x0;
    for (Eigen::Index t = 0; t < inputs.cols(); ++t)
      traj.states.col(t + 1) = step(traj.states.col(t), inputs.col(t));
    return traj;
  }

  // Dense assembly, for oracles and tests only.
  Eigen::MatrixXd dense_a() const {
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(state_dim(), state_dim());
    for (const auto& [key, blk] : a_)
      a.block(topo_.state_offset(key.first), topo_.state_offset(key.second), blk.rows(), blk.cols()) = blk;
    return a;
  }
  Eigen::MatrixXd dense_b() const {
    Eigen::MatrixXd b = Eigen::MatrixXd::Zero(state_dim(), input_dim());
    for (int i = 0; i < topo_.node_count(); ++i)
      b.block(topo_.state_offset(i), topo_.input_offset(i), b_[i].rows(), b_[i].cols()) = b_[i];
    return b;
  }

  nlohmann::json to_json() const {
    auto mat = [](const Eigen::MatrixXd& m) {
      nlohmann::json rows = nlohmann::json::array();
      for (Eigen::Index r = 0; r < m.rows(); ++r) {
        nlohmann::json row = nlohmann::json::array();
        for (Eigen::Index c = 0; c < m.cols(); ++c) row.push_back(m(r, c));
        rows.push_back(row);
      }
      return rows;
    };
    nlohmann::json a = nlohmann::json::array();
    for (const auto& [key, blk] : a_) a.push_back({{"i", key.first + 1}, {"j", key.second + 1}, {"block", mat(blk)}});
    nlohmann::json b = nlohmann::json::array();
    for (const auto& blk : b_) b.push_back(mat(blk));
    return {{"topology", topo_.to_json()}, {"A", a}, {"B", b}};
  }

  static LtiSystem from_json(const nlohmann::json& doc) {
    try {
      Topology topo = Topology::from_json(doc.at("topology"));
      auto mat = [](const nlohmann::json& rows, int nr, int nc) {
        Eigen::MatrixXd m(nr, nc);
        if (static_cast<int>(rows.size()) != nr) throw ArgumentError("system json: bad block row count");
        for (int r = 0; r < nr; ++r) {
          if (static_cast<int>(rows[r].size()) != nc) throw ArgumentError("system json: bad block column count");
          for (int c = 0; c < nc; ++c) m(r, c) = rows[r][c].get<double>();
        }
        return m;
      };
      std::map<BlockKey, Eigen::MatrixXd> a;
      for (const auto& e : doc.at("A")) {
        int i = e.at("i").get<int>() - 1, j = e.at("j").get<int>() - 1;
        if (i < 0 || j < 0 || i >= topo.node_count() || j >= topo.node_count())
          throw ArgumentError("system json: A block index out of range");
        const auto& rows = e.at("block");
        a[{i, j}] = mat(rows, topo.state_dim(i), topo.state_dim(j));
      }
      std::vector<Eigen::MatrixXd> b;
      const auto& bj = doc.at("B");
      if (static_cast<int>(bj.size()) != topo.node_count()) throw ArgumentError("system json: need one B block per node");
      for (int i = 0; i < topo.node_count(); ++i) {
        if (topo.input_dim(i) == 0) {
          b.push_back(Eigen::MatrixXd::Zero(topo.state_dim(i), 0));
          continue;
        }
        b.push_back(mat(bj[i], topo.state_dim(i), topo.input_dim(i)));
      }
      return LtiSystem(std::move(topo), std::move(a), std::move(b));
    } catch (const nlohmann::json::exception& e) {
      throw ArgumentError(std::string("system json: ") + e.what());
    }
  }

 private:
  Topology topo_;
  std::map<BlockKey, Eigen::MatrixXd> a_;
  std::vector<Eigen::MatrixXd> b_;
};

/// Draws the chain parameters: m_i ~ U[0,2], d_i ~ U[0.5,1], k_ij ~ U[1,1.5]
/// (one draw per undirected edge), in that order.
inline ChainParams sample_chain_params(int n, std::uint64_t seed, double dt = 0.2) {
  if (n < 1) throw ArgumentError("make_chain_system: N must be >= 1");
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> um(0.0, 2.0), ud(0.5, 1.0), uk(1.0, 1.5);
  ChainParams p;
  p.dt = dt;
  p.seed = seed;
  for (int i = 0; i < n; ++i) p.inertia.push_back(um(rng));
  for (int i = 0; i < n; ++i) p.damping.push_back(ud(rng));
  for (int i = 0; i + 1 < n; ++i) p.coupling.push_back(uk(rng));
  return p;
}

inline LtiSystem make_chain_system(const ChainParams& p) {
  const int n = static_cast<int>(p.inertia.size());
  if (n < 1) throw ArgumentError("make_chain_system: N must be >= 1");
  if (static_cast<int>(p.damping.size()) != n || static_cast<int>(p.coupling.size()) != n - 1)
    throw ArgumentError("make_chain_system: inconsistent parameter lengths");
  if (p.dt <= 0) throw ArgumentError("make_chain_system: dt must be positive");
  Topology topo = Topology::chain(n, 2, 1);
  const double dt = p.dt;
  std::map<LtiSystem::BlockKey, Eigen::MatrixXd> a;
  std::vector<Eigen::MatrixXd> b;
  for (int i = 0; i < n; ++i) {
    const double m = p.inertia[i];
    if (!(m > 0)) throw ArgumentError("make_chain_system: inertia must be positive");
    // k_i sums the couplings of true neighbours only.
    double ki = 0.0;
    if (i > 0) ki += p.coupling[i - 1];
    if (i + 1 < n) ki += p.coupling[i];
    Eigen::MatrixXd aii(2, 2);
    aii << 1.0, dt, -(ki / m) * dt, 1.0 - (p.damping[i] / m) * dt;
    a[{i, i}] = aii;
    for (int j : {i - 1, i + 1}) {
      if (j < 0 || j >= n) continue;
      const double kij = p.coupling[std::min(i, j)];
      Eigen::MatrixXd aij = Eigen::MatrixXd::Zero(2, 2);
      aij(1, 0) = (kij / m) * dt;
      a[{i, j}] = aij;
    }
    Eigen::MatrixXd bi(2, 1);
    bi << 0.0, 1.0;
    b.push_back(bi);
  }
  return LtiSystem(std::move(topo), std::move(a), std::move(b));
}

inline LtiSystem make_chain_system(int n, std::uint64_t seed) {
  return make_chain_system(sample_chain_params(n, seed));
}

/// Smallest sampled inertia for (n, seed).
inline double min_inertia(int n, std::uint64_t seed) {
  auto p = sample_chain_params(n, seed);
  return *std::min_element(p.inertia.begin(), p.inertia.end());
}

/// First `count` seeds >= start whose chain has every m_i >= floor. Near-zero
/// inertia makes A badly scaled and long excitation records blow up.
inline std::vector<std::uint64_t> pinned_chain_seeds(int n, int count, std::uint64_t start = 0, double floor = 0.1) {
  std::vector<std::uint64_t> out;
  for (std::uint64_t s = start; static_cast<int>(out.size()) < count; ++s)
    if (min_inertia(n, s) >= floor) out.push_back(s);
  return out;
}

}  // namespace d3lmpc
