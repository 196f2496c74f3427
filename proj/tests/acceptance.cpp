// One line per acceptance criterion; exit status is nonzero when a hard one fails.
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <sstream>

#ifdef D3LMPC_HAVE_OPENMP
#include <omp.h>
#endif

#include "support.hpp"

using namespace d3lmpc;
using d3lmpc::testing::random_graph;
using d3lmpc::testing::random_matrix;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double a, double b = 0, double c = 0, double d = 0) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, a, b, c, d);
  return buf;
}

BenchConfig base_config() {
  BenchConfig c;
  c.n = 16;
  c.d = 2;
  c.horizon = 5;
  c.steps = 30;
  c.rho = 1.0;
  c.eps = 1e-6;
  return c;
}

Outcome optimality() {
  BenchConfig c = base_config();
  std::ostringstream csv;
  if (min_inertia(c.n, c.seed) < 0.1) return {false, "default seed is not a pinned seed"};
  OptimalityResult r = exp_optimality(c, csv);
  bool ok = r.max_state_diff <= 1e-3 && r.rel_cost_gap <= 1e-4 && r.seconds <= 120.0;
  return {ok, fmt("max|dx|=%.3g rel_gap=%.3g runtime=%.1fs", r.max_state_diff, r.rel_cost_gap, r.seconds)};
}

Outcome locality() {
  BenchConfig c = base_config();
  c.d_list = {1, 2, 3, 4};
  std::ostringstream csv;
  auto rows = exp_locality_sweep(c, csv);
  bool mono = true;
  for (std::size_t k = 1; k < rows.size(); ++k) mono &= rows[k].subproblem_cost <= rows[k - 1].subproblem_cost + 1e-8;
  const LocalityRow& last = rows.back();
  const double gap = rel_gap(last.subproblem_cost, last.unlocalized_cost);
  const double riccati = std::abs(last.unlocalized_cost - last.lqr_cost) / std::max(1.0, last.lqr_cost);
  bool ok = mono && gap <= 1e-3 && riccati <= 1e-8;
  return {ok, std::string(mono ? "nonincreasing" : "NOT monotone") +
                  fmt(" cost(1)=%.10g cost(4)=%.10g gap_to_unlocalized=%.3g unlocalized_vs_riccati=%.3g",
                      rows.front().subproblem_cost, last.subproblem_cost, gap, riccati)};
}

Outcome data_length() {
  const Topology t16 = Topology::chain(16, 2, 1), t121 = Topology::chain(121, 2, 1);
  const int l16 = required_local_length(t16, interior_node(t16), 2, 5);
  const int l121 = required_local_length(t121, interior_node(t121), 2, 5);
  const int g121 = required_global_length(t121, 5);
  bool ok = l16 == l121 && g121 >= 5 * l121;
  return {ok, fmt("local N=16: %.0f, N=121: %.0f; centralized N=121: %.0f (%.1fx)", l16, l121, g121,
                  static_cast<double>(g121) / l121)};
}

struct Combo {
  int n;
  std::uint64_t seed;
  int d;
};

double spectral_radius(const LtiSystem& sys) {
  return Eigen::EigenSolver<Eigen::MatrixXd>(sys.dense_a()).eigenvalues().cwiseAbs().maxCoeff();
}

// (seed, N, d) grid. With `marginal` only pinned seeds whose open loop does not
// grow are kept: the centralized oracle needs a single record of O(N^2)
// samples, which diverges numerically on unstable draws.
std::vector<Combo> combos(bool marginal) {
  std::vector<Combo> out;
  for (auto [n, count] : {std::pair{5, 4}, std::pair{8, 4}, std::pair{16, 2}}) {
    int taken = 0;
    for (std::uint64_t s = 100; taken < count; ++s) {
      if (min_inertia(n, s) < 0.1) continue;
      if (marginal && spectral_radius(make_chain_system(n, s)) > 1.0 + 1e-9) continue;
      ++taken;
      for (int d : {1, 2}) out.push_back({n, s, d});
    }
  }
  return out;
}

constexpr int kHorizon = 5;

Outcome assembly() {
  int count = 0, bad = 0;
  double worst_res = 0.0, worst_fit = 0.0;
  for (const Combo& c : combos(false)) {
    LtiSystem sys = make_chain_system(c.n, c.seed);
    const Topology& topo = sys.topology();
    TrajectoryData data = collect_excited_data(sys, local_data_length(topo, c.d, kHorizon) + 20, 1.0, c.seed);
    std::vector<LocalProgram> progs;
    for (int i = 0; i < c.n; ++i) {
      AugmentedRegion r = augmented_region(topo, i, c.d);
      progs.push_back(build_local_program(r, local_view(data, r.data_region), kHorizon));
    }
    std::vector<const LocalProgram*> ptrs;
    std::vector<Eigen::MatrixXd> psi;
    for (const auto& p : progs) {
      ptrs.push_back(&p);
      psi.push_back(p.hankel_kept() * p.feasible_g());
    }
    SystemResponse phi = assemble_response(topo, ptrs, psi);
    const double res = achievability_residual(sys, phi);
    const bool masked = respects_mask(phi, locality_mask(topo, c.d, kHorizon));

    OracleSolution mb = solve_dlmpc_centralized(sys, initial_state(topo, c.seed, 1.0), c.d, kHorizon,
                                                CostSpec::identity(topo), ConstraintSpec::none(topo));
    double fit = 0.0;
    for (const auto& p : progs) fit = std::max(fit, p.fit(kept_slice(topo, p, mb.phi)));
    worst_res = std::max(worst_res, res);
    worst_fit = std::max(worst_fit, fit);
    bad += !(res <= 1e-8 && masked && fit <= 1e-8);
    ++count;
  }
  return {count >= 20 && bad == 0,
          fmt("%.0f combos, %.0f failing, worst dynamics residual %.3g, worst fit %.3g", count, bad, worst_res,
              worst_fit)};
}

Outcome convergence() {
  int count = 0, bad = 0, worst_iter = 0;
  double worst_diff = 0.0, worst_res = 0.0;
  const double eps = 1e-6;
  for (const Combo& c : combos(true)) {
    LtiSystem sys = make_chain_system(c.n, c.seed);
    const Topology& topo = sys.topology();
    // Long enough for the centralized data-driven oracle too.
    TrajectoryData data = collect_excited_data(sys, required_global_length(topo, kHorizon) + 20, 1.0, c.seed);
    CostSpec cost = CostSpec::identity(topo);
    ConstraintSpec none = ConstraintSpec::none(topo);
    Eigen::VectorXd x0 = initial_state(topo, c.seed, 1.0);
    auto agents = build_agents(topo, data, c.d, kHorizon, cost, none);
    RoundBus bus(topo, c.d);
    ConsensusSettings s;
    s.eps_p = s.eps_d = eps;
    s.max_iter = 5000;
    ConsensusResult cr;
    try {
      cr = solve_consensus(agents, bus, topo, x0, s);
    } catch (const ConsensusNonconvergence&) {
      ++bad;
      ++count;
      worst_iter = 5000;
      continue;
    }
    OracleSolution dd = solve_dd_centralized(build_global_program(data, topo, c.d, kHorizon), topo, x0, cost, none);
    Rollout r = rollout(topo, assembled_phi(topo, agents), x0);
    const double diff = std::sqrt((r.states - dd.trajectory.states).squaredNorm() +
                                  (r.inputs - dd.trajectory.inputs).squaredNorm());
    worst_diff = std::max(worst_diff, diff);
    worst_res = std::max({worst_res, cr.primal, cr.dual});
    worst_iter = std::max(worst_iter, cr.iterations);
    bad += !(cr.primal <= eps && cr.dual <= eps && diff <= 10 * eps);
    ++count;
  }
  return {bad == 0, fmt("%.0f scenarios, %.0f failing, max iters %.0f, worst trajectory gap %.3g", count, bad,
                        worst_iter, worst_diff)};
}

Outcome constrained() {
  BenchConfig c = base_config();
  c.u_max = 0.5;
  std::ostringstream csv;
  OptimalityResult r = exp_optimality(c, csv);
  const Eigen::MatrixXd& u = r.distributed.trajectory.inputs;
  const double umax = u.cwiseAbs().maxCoeff();
  const bool active = r.centralized.trajectory.inputs.cwiseAbs().maxCoeff() >= 0.5 - 1e-6;
  bool ok = active && umax <= 0.5 + 1e-6 && r.max_state_diff <= 1e-3;
  return {ok, std::string(active ? "box active" : "box NEVER active") +
                  fmt(", max|u|=%.8f max|dx| vs box baseline=%.3g", umax, r.max_state_diff)};
}

Outcome scaling(bool& dims_ok) {
  BenchConfig c = base_config();
  c.n_list = {9, 121};
  c.instances = 1;
  c.scaling_steps = 10;
  std::ostringstream csv;
  auto rows = exp_scalability(c, csv);
  const double ratio = rows[1].avg_ms_per_step_per_agent / rows[0].avg_ms_per_step_per_agent;
  dims_ok = rows[0].interior == rows[1].interior;
  return {ratio <= 2.5, fmt("per-agent ms N=9: %.3f, N=121: %.3f, ratio %.2f", rows[0].avg_ms_per_step_per_agent,
                            rows[1].avg_ms_per_step_per_agent, ratio)};
}

Outcome properties() {
  std::vector<std::string> failed;
  // Topology duality / monotonicity on random graphs.
  for (std::uint64_t s = 0; s < 5; ++s) {
    Topology g = random_graph(12, 0.2, s);
    for (int i = 0; i < 12; ++i)
      for (int d = 0; d <= 4; ++d) {
        for (int j : g.in_set(i, d))
          if (!contains(g.out_set(j, d), i)) failed.push_back("duality");
        const NodeSet a = g.in_set(i, d), b = g.in_set(i, d + 1);
        if (!std::includes(b.begin(), b.end(), a.begin(), a.end())) failed.push_back("monotonicity");
      }
  }
  // Hankel shift and rank.
  {
    Eigen::MatrixXd w = random_matrix(3, 40, 5);
    Eigen::MatrixXd h = hankel(w, 4);
    for (int k = 0; k + 1 < 4; ++k)
      if (h.block(3 * (k + 1), 0, 3, h.cols() - 1) != h.block(3 * k, 1, 3, h.cols() - 1)) failed.push_back("shift");
    LtiSystem sys = make_chain_system(3, pinned_chain_seeds(3, 1)[0]);
    TrajectoryData data = collect_excited_data(sys, min_data_length(3, 6, 4) + 5, 1.0, 3, 10);
    HankelStack st = build_hankel_stack(data, 4);
    Eigen::MatrixXd full(st.state_part.rows() + st.input_part.rows(), st.columns());
    full << st.state_part, st.input_part;
    Eigen::FullPivLU<Eigen::MatrixXd> lu(full);
    lu.setThreshold(1e-9);
    if (lu.rank() != 6 + 3 * 4) failed.push_back("rank");
  }
  // KKT stationarity.
  for (std::uint64_t s = 0; s < 10; ++s) {
    EqLsProblem p{random_matrix(12, 8, s), random_matrix(12, 1, s + 50), random_matrix(3, 8, s + 100),
                  random_matrix(3, 1, s + 150)};
    EqLsResult r = solve_eq_ls(p);
    Eigen::MatrixXd grad = p.c.transpose() * (p.c * r.x - p.d) + p.a_eq.transpose() * r.multipliers;
    if (grad.norm() > 1e-8 || r.equality_residual > 1e-10) failed.push_back("kkt");
  }
  // rank1_prox against a direct solve of (2 q aa' + rho I) phi = rho v.
  for (std::uint64_t s = 0; s < 10; ++s) {
    Eigen::VectorXd v = random_matrix(6, 1, s), a = random_matrix(6, 1, s + 7);
    const double qw = 0.1 + s, rho = 1.5;
    Eigen::MatrixXd k = 2.0 * qw * a * a.transpose() + rho * Eigen::MatrixXd::Identity(6, 6);
    Eigen::VectorXd ref = k.llt().solve(rho * v);
    if ((rank1_prox(qw, a, v, rho) - ref).norm() > 1e-10) failed.push_back("rank1_prox");
  }
  // Scheduling-order determinism.
  {
#ifdef D3LMPC_HAVE_OPENMP
    omp_set_num_threads(4);
#endif
    const int n = 6;
    LtiSystem sys = make_chain_system(n, pinned_chain_seeds(n, 1)[0]);
    const Topology& topo = sys.topology();
    TrajectoryData data = collect_excited_data(sys, local_data_length(topo, 1, 3) + 10, 1.0, 1);
    CostSpec cost = CostSpec::identity(topo);
    ConstraintSpec box = ConstraintSpec::input_box(topo, 0.5);
    Eigen::VectorXd x0 = initial_state(topo, 1, 1.0);
    auto run = [&](bool parallel) {
      auto agents = build_agents(topo, data, 1, 3, cost, box);
      RoundBus bus(topo, 1);
      ConsensusSettings s;
      s.parallel = parallel;
      return run_receding_horizon(agents, bus, sys, cost, x0, 3, s).trajectory;
    };
    TrajectoryData a = run(false), b = run(true);
    if (a.states != b.states || a.inputs != b.inputs) failed.push_back("determinism");
  }
  std::sort(failed.begin(), failed.end());
  failed.erase(std::unique(failed.begin(), failed.end()), failed.end());
  std::string d = "duality, monotonicity, hankel shift/rank, KKT, rank1_prox, determinism";
  if (!failed.empty()) {
    d = "failed:";
    for (const auto& f : failed) d += " " + f;
  }
  return {failed.empty(), d};
}

}  // namespace

int main() {
  bool hard_fail = false;
  auto report = [&](int id, const char* name, const std::function<Outcome()>& f, bool soft = false) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = f();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::cout << "criterion " << id << " (" << name << "): " << (o.pass ? "PASS" : "FAIL") << (soft ? " [soft]" : "")
              << " -- " << o.detail << fmt(" [%.1fs]", s) << std::endl;
    if (!o.pass && !soft) hard_fail = true;
  };
  report(1, "closed-loop equivalence", optimality);
  report(2, "locality monotonicity", locality);
  report(3, "data-length scaling", data_length);
  report(4, "local feasibility assembles", assembly);
  report(5, "consensus convergence", convergence);
  report(6, "input box", constrained);
  bool dims_ok = false;
  report(7, "per-agent runtime ratio", [&] { return scaling(dims_ok); }, true);
  report(7, "interior dimensions N-invariant", [&] { return Outcome{dims_ok, dims_ok ? "identical" : "differ"}; });
  report(8, "property suites", properties);
  return hard_fail ? 1 : 0;
}
