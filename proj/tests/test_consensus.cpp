#include <gtest/gtest.h>

#ifdef D3LMPC_HAVE_OPENMP
#include <omp.h>
#endif

#include <sstream>

#include "support.hpp"

using namespace d3lmpc;
using d3lmpc::testing::chain_case;
using d3lmpc::testing::random_matrix;

namespace {

LtiSystem scalar_plant() {
  Topology topo(1, {}, {1}, {1});
  return LtiSystem(topo, {{{0, 0}, Eigen::MatrixXd::Constant(1, 1, 0.9)}}, {Eigen::MatrixXd::Ones(1, 1)});
}

AgentState scalar_agent(const LtiSystem& sys, int horizon) {
  TrajectoryData data = collect_excited_data(sys, 20, 1.0, 1);
  AugmentedRegion r = augmented_region(sys.topology(), 0, 0);
  return make_agent(sys.topology(), 0, 0, build_local_program(r, data, horizon), CostSpec::identity(sys.topology()),
                    ConstraintSpec::none(sys.topology()));
}

void fill(std::vector<Eigen::MatrixXd>& v, std::uint64_t seed) {
  for (std::size_t t = 0; t < v.size(); ++t) v[t] = random_matrix(v[t].rows(), v[t].cols(), seed + t);
}

struct Rig {
  LtiSystem sys;
  CostSpec cost;
  Eigen::VectorXd x0;
  std::vector<AgentState> agents;
  int d;
};

Rig rig(int n, std::uint64_t seed, int d, int horizon, std::optional<double> u_max = std::nullopt) {
  auto c = chain_case(n, seed, d, horizon);
  const Topology& topo = c.sys.topology();
  ConstraintSpec cons = u_max ? ConstraintSpec::input_box(topo, *u_max) : ConstraintSpec::none(topo);
  auto agents = build_agents(topo, c.data, d, horizon, c.cost, cons);
  return Rig{c.sys, c.cost, c.x0, std::move(agents), d};
}

}  // namespace

TEST(PhiUpdateTest, ScalarHandKkt) {
  LtiSystem sys = scalar_plant();
  AgentState a = scalar_agent(sys, 1);
  a.x0[0] = Eigen::VectorXd::Ones(1);
  fill(a.psi_x, 1);
  fill(a.psi_u, 5);
  fill(a.lam_x, 9);
  fill(a.lam_u, 13);
  phi_update(a, 2.0);
  // min (phi x0)^2 + (phi - v)^2 with x0 = 1  =>  phi = v / 2 for every block.
  for (int t = 0; t <= 1; ++t) EXPECT_NEAR(a.phi_x[t](0, 0), 0.5 * (a.psi_x[t] - a.lam_x[t])(0, 0), 1e-15);
  EXPECT_NEAR(a.phi_u[0](0, 0), 0.5 * (a.psi_u[0] - a.lam_u[0])(0, 0), 1e-15);
}

TEST(PhiUpdateTest, ZeroMeasurementAndLargeRho) {
  Rig r = rig(5, pinned_chain_seeds(5, 1)[0], 1, 3);
  AgentState a = r.agents[2];
  fill(a.psi_x, 3);
  fill(a.psi_u, 7);
  fill(a.lam_x, 11);
  fill(a.lam_u, 17);
  phi_update(a, 1.0);
  for (std::size_t t = 0; t < a.phi_x.size(); ++t) EXPECT_EQ(a.phi_x[t], a.psi_x[t] - a.lam_x[t]);
  for (std::size_t t = 0; t < a.phi_u.size(); ++t) EXPECT_EQ(a.phi_u[t], a.psi_u[t] - a.lam_u[t]);

  for (auto& x : a.x0) x = random_matrix(x.size(), 1, 99);
  double prev = 1e300;
  for (double rho : {1e2, 1e4, 1e6}) {
    phi_update(a, rho);
    std::vector<Eigen::MatrixXd> vx = a.psi_x, vu = a.psi_u;
    for (std::size_t t = 0; t < vx.size(); ++t) vx[t] -= a.lam_x[t];
    for (std::size_t t = 0; t < vu.size(); ++t) vu[t] -= a.lam_u[t];
    double dev = detail::row_norm(a.phi_x, vx, a.phi_u, vu);
    EXPECT_LT(dev, prev);
    EXPECT_LE(dev, 1e3 / rho);
    prev = dev;
  }
}

TEST(PhiUpdateTest, BoxIsRespected) {
  Rig r = rig(5, pinned_chain_seeds(5, 1)[0], 1, 3, 0.2);
  AgentState a = r.agents[1];
  for (auto& x : a.x0) x = random_matrix(x.size(), 1, 5);
  fill(a.psi_u, 21);
  for (auto& m : a.psi_u) m *= 10.0;
  phi_update(a, 1.0);
  Eigen::VectorXd xu = detail::stacked_x0(a, a.cols_u);
  for (const auto& m : a.phi_u) EXPECT_LE((m * xu).cwiseAbs().maxCoeff(), 0.2 + 1e-12);
}

TEST(PsiUpdateTest, ProjectionMatchesNullSpaceOracle) {
  Rig r = rig(5, pinned_chain_seeds(5, 1)[0], 1, 3);
  AgentState a = r.agents[2];
  const LocalProgram& p = a.program;
  a.phi_col = random_matrix(p.kept_rows(), 2, 4);
  a.lam_col = random_matrix(p.kept_rows(), 2, 5);
  psi_update(a);
  // Oracle: G = G_p + N w with N a kernel basis of E from a full-pivot LU.
  const Eigen::MatrixXd& h = p.hankel_kept();
  const Eigen::MatrixXd& e = p.equality_operator();
  Eigen::MatrixXd gp = e.completeOrthogonalDecomposition().solve(p.equality_rhs());
  Eigen::FullPivLU<Eigen::MatrixXd> lu(e);
  lu.setThreshold(1e-10);
  Eigen::MatrixXd ker = lu.kernel();
  Eigen::MatrixXd target = a.phi_col + a.lam_col - h * gp;
  Eigen::MatrixXd w = (h * ker).completeOrthogonalDecomposition().solve(target);
  Eigen::MatrixXd psi = h * (gp + ker * w);
  EXPECT_LE((a.psi_col - psi).norm(), 1e-7 * (1.0 + psi.norm()));
  refresh_g(a);
  EXPECT_LE((h * a.g - a.psi_col).norm(), 1e-8);
}

TEST(PsiUpdateTest, MembersAreFixedPoints) {
  Rig r = rig(5, pinned_chain_seeds(5, 1)[0], 1, 3);
  AgentState a = r.agents[0];
  Eigen::MatrixXd member = a.program.project(random_matrix(a.program.kept_rows(), 2, 8));
  a.phi_col = member;
  a.lam_col.setZero();
  psi_update(a);
  EXPECT_LE((a.psi_col - member).norm(), 1e-9);
}

TEST(LambdaUpdateTest, Algebra) {
  Rig r = rig(5, pinned_chain_seeds(5, 1)[0], 1, 3);
  AgentState a = r.agents[2];
  fill(a.phi_x, 1);
  fill(a.phi_u, 2);
  a.psi_x = a.phi_x;
  a.psi_u = a.phi_u;
  a.phi_col = random_matrix(a.phi_col.rows(), 2, 3);
  a.psi_col = a.phi_col;
  lambda_update(a);
  for (const auto& m : a.lam_x) EXPECT_TRUE(m.isZero(0.0));
  for (const auto& m : a.lam_u) EXPECT_TRUE(m.isZero(0.0));
  EXPECT_TRUE(a.lam_col.isZero(0.0));

  // Constant disagreement delta accumulates.
  std::vector<Eigen::MatrixXd> delta = a.phi_x;
  fill(delta, 40);
  for (std::size_t t = 0; t < delta.size(); ++t) a.phi_x[t] = a.psi_x[t] + delta[t];
  lambda_update(a);
  lambda_update(a);
  for (std::size_t t = 0; t < delta.size(); ++t) EXPECT_LE((a.lam_x[t] - 2.0 * delta[t]).norm(), 1e-14);
}

TEST(RoundBusTest, AuditsHopRadius) {
  Topology topo = Topology::chain(6);
  RoundBus bus(topo, 1);
  EXPECT_EQ(bus.radius(Tag::Phi), 2);
  EXPECT_EQ(bus.radius(Tag::Stop), 1);
  bus.post(Message{0, 2, Tag::Psi, {}, Eigen::VectorXd::Ones(3)});
  auto inbox = bus.deliver();
  EXPECT_EQ(inbox[2].size(), 1u);
  EXPECT_EQ(bus.bytes(), 3 * sizeof(double));
  bus.post(Message{0, 3, Tag::Psi, {}, {}});
  EXPECT_THROW(bus.deliver(), ArgumentError);
  RoundBus b2(topo, 1);
  b2.post(Message{0, 2, Tag::Stop, {}, {}});
  EXPECT_THROW(b2.deliver(), ArgumentError);
  RoundBus b3(topo, 1);
  b3.post(Message{4, 4, Tag::Phi, {}, {}});
  EXPECT_THROW(b3.deliver(), ArgumentError);
}

TEST(RoundBusTest, DeliveryOrderIsSorted) {
  Topology topo = Topology::chain(4);
  RoundBus bus(topo, 2);
  bus.post(Message{2, 1, Tag::Psi, {}, {}});
  bus.post(Message{0, 1, Tag::Psi, {}, {}});
  bus.post(Message{0, 1, Tag::Measurement, {}, {}});
  auto inbox = bus.deliver();
  ASSERT_EQ(inbox[1].size(), 3u);
  EXPECT_EQ(inbox[1][0].tag, Tag::Measurement);
  EXPECT_EQ(inbox[1][1].sender, 0);
  EXPECT_EQ(inbox[1][2].sender, 2);
}

TEST(ConsensusTest, MessagePatternPerRound) {
  Rig r = rig(7, pinned_chain_seeds(7, 1)[0], 1, 3);
  const Topology& topo = r.sys.topology();
  RoundBus bus(topo, 1);
  share_measurements(r.agents, bus, topo, r.x0);
  std::size_t expected = 0;
  for (int i = 0; i < 7; ++i) expected += topo.out_set(i, 2).size() - 1;
  EXPECT_EQ(bus.round_messages(), expected);
  for (auto& a : r.agents) phi_update(a, 1.0);
  for (auto& a : r.agents) detail::send_phi(a, bus);
  bus.deliver();
  EXPECT_EQ(bus.round_messages(), expected);
  for (auto& a : r.agents) detail::send_psi(a, bus);
  bus.deliver();
  EXPECT_EQ(bus.round_messages(), expected);
}

TEST(ConsensusTest, SingleAgentMatchesOracle) {
  LtiSystem sys = make_chain_system(1, 4);
  const Topology& topo = sys.topology();
  TrajectoryData data = collect_excited_data(sys, 30, 1.0, 2);
  CostSpec cost = CostSpec::identity(topo);
  auto agents = build_agents(topo, data, 0, 4, cost, ConstraintSpec::none(topo));
  RoundBus bus(topo, 0);
  Eigen::Vector2d x(0.7, -0.4);
  ConsensusResult res = solve_consensus(agents, bus, topo, x);
  EXPECT_LE(res.primal, 1e-6);
  OracleSolution sol = solve_dlmpc_centralized(sys, x, 0, 4, cost, ConstraintSpec::none(topo));
  Rollout dist = rollout(topo, assembled_phi(topo, agents), x);
  EXPECT_LE((dist.states - sol.trajectory.states).norm(), 1e-5);
  EXPECT_LE((dist.inputs - sol.trajectory.inputs).norm(), 1e-5);
}

TEST(ConsensusTest, TwoNodeChainMatchesModelBased) {
  auto c = chain_case(2, pinned_chain_seeds(2, 1)[0], 1, 2);
  const Topology& topo = c.sys.topology();
  auto agents = build_agents(topo, c.data, 1, 2, c.cost, ConstraintSpec::none(topo));
  RoundBus bus(topo, 1);
  solve_consensus(agents, bus, topo, c.x0);
  OracleSolution sol = solve_dlmpc_centralized(c.sys, c.x0, 1, 2, c.cost, ConstraintSpec::none(topo));
  Rollout dist = rollout(topo, assembled_psi(topo, agents), c.x0);
  EXPECT_LE((dist.states - sol.trajectory.states).norm(), 1e-4);
  EXPECT_LE((dist.inputs - sol.trajectory.inputs).norm(), 1e-4);
  EXPECT_LE(achievability_residual(c.sys, assembled_psi(topo, agents)), 1e-8);
}

TEST(ConsensusTest, NonconvergenceCarriesHistory) {
  Rig r = rig(5, pinned_chain_seeds(5, 1)[0], 1, 3);
  const Topology& topo = r.sys.topology();
  RoundBus bus(topo, 1);
  ConsensusSettings s;
  s.max_iter = 3;
  try {
    solve_consensus(r.agents, bus, topo, r.x0, s);
    FAIL() << "expected nonconvergence";
  } catch (const ConsensusNonconvergence& e) {
    EXPECT_EQ(e.primal_history.size(), 3u);
    EXPECT_EQ(e.dual_history.size(), 3u);
  }
  s.rho = 0.0;
  EXPECT_THROW(solve_consensus(r.agents, bus, topo, r.x0, s), ArgumentError);
}

TEST(MpcStepTest, OriginStaysAtOrigin) {
  Rig r = rig(5, pinned_chain_seeds(5, 1)[0], 1, 3);
  RoundBus bus(r.sys.topology(), 1);
  StepResult s = mpc_step(r.agents, bus, r.sys, Eigen::VectorXd::Zero(10));
  EXPECT_TRUE(s.u.isZero(0.0));
  EXPECT_TRUE(s.x_next.isZero(0.0));
}

TEST(MpcStepTest, WarmStartChangesIterationsNotTrajectory) {
  Rig warm = rig(6, pinned_chain_seeds(6, 1)[0], 1, 3);
  Rig cold = rig(6, pinned_chain_seeds(6, 1)[0], 1, 3);
  const Topology& topo = warm.sys.topology();
  RoundBus bw(topo, 1), bc(topo, 1);
  Eigen::VectorXd xw = warm.x0, xc = cold.x0;
  int iw = 0, ic = 0;
  for (int k = 0; k < 4; ++k) {
    StepResult a = mpc_step(warm.agents, bw, warm.sys, xw, {}, true);
    StepResult b = mpc_step(cold.agents, bc, cold.sys, xc, {}, false);
    if (k > 0) {
      iw += a.stats.admm_iters;
      ic += b.stats.admm_iters;
    }
    EXPECT_LE((a.u - b.u).cwiseAbs().maxCoeff(), 2e-5);
    xw = a.x_next;
    xc = b.x_next;
  }
  EXPECT_NE(iw, ic);
}

TEST(RecedingHorizonTest, ZeroStepsAndDeterminism) {
  Rig r = rig(5, pinned_chain_seeds(5, 1)[0], 1, 3);
  const Topology& topo = r.sys.topology();
  RoundBus bus(topo, 1);
  ClosedLoop empty = run_receding_horizon(r.agents, bus, r.sys, r.cost, r.x0, 0);
  EXPECT_EQ(empty.trajectory.length(), 0);
  EXPECT_EQ(empty.cost, 0.0);

  auto csv = [&]() {
    Rig fresh = rig(5, pinned_chain_seeds(5, 1)[0], 1, 3);
    RoundBus b(topo, 1);
    ClosedLoop cl = run_receding_horizon(fresh.agents, b, fresh.sys, fresh.cost, fresh.x0, 5);
    std::ostringstream os;
    write_trajectory_csv(os, cl.trajectory);
    return os.str();
  };
  EXPECT_EQ(csv(), csv());
}

TEST(RecedingHorizonTest, TailIsContracting) {
  Rig r = rig(8, pinned_chain_seeds(8, 1)[0], 1, 4);
  RoundBus bus(r.sys.topology(), 1);
  ClosedLoop cl = run_receding_horizon(r.agents, bus, r.sys, r.cost, r.x0, 20);
  EXPECT_TRUE(std::isfinite(cl.cost));
  const Eigen::MatrixXd& x = cl.trajectory.states;
  EXPECT_LT(x.col(20).norm(), x.col(0).norm());
  for (int t = 15; t < 20; ++t) EXPECT_LE(x.col(t + 1).norm(), x.col(t).norm() + 1e-9);
}

TEST(SchedulingTest, ParallelEqualsSequentialBitwise) {
#ifdef D3LMPC_HAVE_OPENMP
  omp_set_num_threads(4);
#endif
  Rig seq = rig(7, pinned_chain_seeds(7, 1)[0], 1, 3, 0.5);
  Rig par = rig(7, pinned_chain_seeds(7, 1)[0], 1, 3, 0.5);
  const Topology& topo = seq.sys.topology();
  RoundBus bs(topo, 1), bp(topo, 1);
  ConsensusSettings s;
  s.parallel = false;
  ConsensusSettings p = s;
  p.parallel = true;
  ClosedLoop a = run_receding_horizon(seq.agents, bs, seq.sys, seq.cost, seq.x0, 4, s);
  ClosedLoop b = run_receding_horizon(par.agents, bp, par.sys, par.cost, par.x0, 4, p);
  EXPECT_EQ(a.trajectory.states, b.trajectory.states);
  EXPECT_EQ(a.trajectory.inputs, b.trajectory.inputs);
  for (std::size_t k = 0; k < a.stats.size(); ++k) {
    EXPECT_EQ(a.stats[k].admm_iters, b.stats[k].admm_iters);
    EXPECT_EQ(a.stats[k].primal_res, b.stats[k].primal_res);
  }
  SystemResponse pa = assembled_psi(topo, seq.agents), pb = assembled_psi(topo, par.agents);
  for (const auto& [k, blk] : pa.phi_x) EXPECT_EQ(blk, pb.phi_x.at(k));
}

TEST(StatsCsvTest, Header) {
  std::ostringstream os;
  write_stats_csv(os, {StepStats{0, 12, 0.5, 40, 320, 1e-7, 2e-7}});
  EXPECT_EQ(os.str().substr(0, os.str().find('\n')),
            "step,admm_iters,wall_ms_per_agent_avg,messages,bytes,primal_res,dual_res");
}
