#pragma once

#include <cstdint>
#include <random>

#include <Eigen/Dense>

#include "d3lmpc/d3lmpc.hpp"

namespace d3lmpc::testing {

inline Eigen::MatrixXd random_matrix(Eigen::Index r, Eigen::Index c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 1.0);
  Eigen::MatrixXd m(r, c);
  for (Eigen::Index j = 0; j < c; ++j)
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = n(rng);
  return m;
}

// Directed chain 0 -> 1 -> ... -> n-1 (j -> i means j enters i's dynamics).
inline Topology directed_chain(int n) {
  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i + 1 < n; ++i) edges.emplace_back(i + 1, i);
  return Topology(n, edges, std::vector<int>(n, 1), std::vector<int>(n, 1));
}

// Random directed graph with roughly `density` of the ordered pairs as edges.
inline Topology random_graph(int n, double density, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution coin(density);
  std::vector<std::pair<int, int>> edges;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j)
      if (i != j && coin(rng)) edges.emplace_back(i, j);
  return Topology(n, edges, std::vector<int>(n, 1), std::vector<int>(n, 1));
}

// Chain instance with a data record long enough for every local program at d.
struct ChainCase {
  LtiSystem sys;
  TrajectoryData data;
  CostSpec cost;
  Eigen::VectorXd x0;
};

inline ChainCase chain_case(int n, std::uint64_t seed, int d, int horizon, int extra = 10, int length = 0) {
  LtiSystem sys = make_chain_system(n, seed);
  const Topology& topo = sys.topology();
  const int len = length > 0 ? length : local_data_length(topo, d, horizon) + extra;
  TrajectoryData data = collect_excited_data(sys, len, 1.0, seed);
  return ChainCase{sys, data, CostSpec::identity(topo), initial_state(topo, seed, 1.0)};
}

}  // namespace d3lmpc::testing
