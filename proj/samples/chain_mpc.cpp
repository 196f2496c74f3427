// Minimal end-to-end use: record data on a 9-node chain, build one agent per
// node, and run 10 steps of distributed MPC from a random state.

#include <iostream>

#include <d3lmpc/d3lmpc.hpp>

int main() {
  using namespace d3lmpc;
  const int n = 9, d = 1, horizon = 4;
  LtiSystem sys = make_chain_system(n, pinned_chain_seeds(n, 1).front());
  const Topology& topo = sys.topology();

  // Offline: one excitation experiment long enough for every local program.
  TrajectoryData data = collect_excited_data(sys, local_data_length(topo, d, horizon) + 10, 1.0, 3);
  CostSpec cost = CostSpec::identity(topo);
  std::vector<AgentState> agents = build_agents(topo, data, d, horizon, cost, ConstraintSpec::none(topo));

  // Online: receding horizon.
  RoundBus bus(topo, d);
  Eigen::VectorXd x0 = initial_state(topo, 3, 1.0);
  ClosedLoop cl = run_receding_horizon(agents, bus, sys, cost, x0, 10);
  for (const StepStats& s : cl.stats)
    std::cout << "step " << s.step << ": " << s.admm_iters << " ADMM iterations, " << s.messages << " messages\n";
  std::cout << "closed-loop cost " << cl.cost << "\n";
  return 0;
}
