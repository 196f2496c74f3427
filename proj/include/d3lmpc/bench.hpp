#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "d3lmpc/consensus.hpp"
#include "d3lmpc/datalog.hpp"
#include "d3lmpc/errors.hpp"
#include "d3lmpc/localsls.hpp"
#include "d3lmpc/oracle.hpp"
#include "d3lmpc/plant.hpp"
#include "d3lmpc/response.hpp"

namespace d3lmpc {

struct BenchConfig {
  int n = 16;
  int d = 2;
  int horizon = 5;
  int steps = 30;
  std::uint64_t seed = 15;
  double rho = 1.0;
  double eps = 1e-6;
  int max_iter = 5000;
  double amplitude = 1.0;     // excitation input / initial state range
  double x0_amplitude = 1.0;  // closed-loop initial state range
  int data_margin = 10;       // samples beyond the local minimum
  std::optional<int> data_length;
  std::optional<double> u_max;
  std::vector<int> d_list{1, 2, 3, 4};
  std::vector<int> n_list{9, 16, 36, 64, 81, 100, 121};
  int instances = 3;
  int scaling_steps = 10;
  bool parallel = true;

  ConsensusSettings consensus() const {
    ConsensusSettings s;
    s.rho = rho;
    s.eps_p = eps;
    s.eps_d = eps;
    s.max_iter = max_iter;
    s.parallel = parallel;
    return s;
  }

  void validate() const {
    if (n < 1) throw ArgumentError("config: n must be >= 1");
    if (d < 0) throw ArgumentError("config: d must be >= 0");
    if (horizon < 1) throw ArgumentError("config: horizon must be >= 1");
    if (steps < 0) throw ArgumentError("config: steps must be >= 0");
    if (!(rho > 0)) throw ArgumentError("config: rho must be positive");
    if (!(eps > 0)) throw ArgumentError("config: eps must be positive");
    if (max_iter < 1) throw ArgumentError("config: max_iter must be >= 1");
    if (!(amplitude > 0) || !(x0_amplitude >= 0)) throw ArgumentError("config: amplitudes must be positive");
    if (data_margin < 0) throw ArgumentError("config: data_margin must be >= 0");
    if (data_length && *data_length < 1) throw ArgumentError("config: data_length must be >= 1");
    if (u_max && !(*u_max > 0)) throw ArgumentError("config: u_max must be positive");
    if (instances < 1) throw ArgumentError("config: instances must be >= 1");
    if (scaling_steps < 2) throw ArgumentError("config: scaling_steps must be >= 2");
    for (int v : d_list)
      if (v < 0) throw ArgumentError("config: d_list entries must be >= 0");
    for (int v : n_list)
      if (v < 1) throw ArgumentError("config: n_list entries must be >= 1");
  }

  /// Keys present in the JSON object override the current values.
  void apply_json(const nlohmann::json& j) {
    if (!j.is_object()) throw ArgumentError("config: top level must be a JSON object");
    static const std::vector<std::string> known{"n", "d", "horizon", "steps", "seed", "rho", "eps", "max_iter",
                                                "amplitude", "x0_amplitude", "data_margin", "data_length", "u_max",
                                                "d_list", "n_list", "instances", "scaling_steps", "parallel"};
    for (auto it = j.begin(); it != j.end(); ++it)
      if (std::find(known.begin(), known.end(), it.key()) == known.end())
        throw ArgumentError("config: unknown key '" + it.key() + "'");
    try {
      auto get = [&](const char* k, auto& dst) {
        if (j.contains(k)) dst = j.at(k).get<std::decay_t<decltype(dst)>>();
      };
      get("n", n);
      get("d", d);
      get("horizon", horizon);
      get("steps", steps);
      get("seed", seed);
      get("rho", rho);
      get("eps", eps);
      get("max_iter", max_iter);
      get("amplitude", amplitude);
      get("x0_amplitude", x0_amplitude);
      get("data_margin", data_margin);
      if (j.contains("data_length")) data_length = j.at("data_length").get<int>();
      if (j.contains("u_max")) u_max = j.at("u_max").get<double>();
      get("d_list", d_list);
      get("n_list", n_list);
      get("instances", instances);
      get("scaling_steps", scaling_steps);
      get("parallel", parallel);
    } catch (const nlohmann::json::exception& e) {
      throw ArgumentError(std::string("config: ") + e.what());
    }
  }
};

/// Closed-loop initial state, drawn from a stream separate from the data.
inline Eigen::VectorXd initial_state(const Topology& topo, std::uint64_t seed, double amplitude) {
  std::mt19937_64 rng(seed ^ 0x5851F42D4C957F2DULL);
  std::uniform_real_distribution<double> u(-amplitude, amplitude);
  Eigen::VectorXd x(topo.total_state_dim());
  for (Eigen::Index k = 0; k < x.size(); ++k) x(k) = amplitude > 0 ? u(rng) : 0.0;
  return x;
}

/// Longest local requirement over all nodes.
inline int local_data_length(const Topology& topo, int d, int horizon) {
  int len = 0;
  for (int i = 0; i < topo.node_count(); ++i) len = std::max(len, required_local_length(topo, i, d, horizon));
  return len;
}

inline int interior_node(const Topology& topo) { return topo.node_count() / 2; }

struct Scenario {
  LtiSystem sys;
  CostSpec cost;
  ConstraintSpec cons;
  TrajectoryData data;
  Eigen::VectorXd x0;
};

inline Scenario make_scenario(const BenchConfig& cfg, int n, std::uint64_t seed, int d) {
  LtiSystem sys = make_chain_system(n, seed);
  const Topology& topo = sys.topology();
  const int len = cfg.data_length ? *cfg.data_length : local_data_length(topo, d, cfg.horizon) + cfg.data_margin;
  TrajectoryData data = collect_excited_data(sys, len, cfg.amplitude, seed);
  CostSpec cost = CostSpec::identity(topo);
  ConstraintSpec cons = cfg.u_max ? ConstraintSpec::input_box(topo, *cfg.u_max) : ConstraintSpec::none(topo);
  Eigen::VectorXd x0 = initial_state(topo, seed, cfg.x0_amplitude);
  return Scenario{std::move(sys), std::move(cost), std::move(cons), std::move(data), std::move(x0)};
}

/// Receding-horizon loop driven by a centralized solver.
inline ClosedLoop centralized_closed_loop(const TrajectoryQp& solver, const LtiSystem& plant, const CostSpec& cost,
                                          const Eigen::VectorXd& x0, int steps) {
  const Topology& topo = plant.topology();
  Eigen::MatrixXd inputs(topo.total_input_dim(), steps);
  Eigen::VectorXd x = x0;
  for (int k = 0; k < steps; ++k) {
    inputs.col(k) = solver.solve(x).trajectory.inputs.col(0);
    x = plant.step(x, inputs.col(k));
  }
  ClosedLoop cl;
  cl.trajectory = closed_loop_record(plant, x0, inputs);
  cl.cost = stage_cost_sum(topo, cl.trajectory, cost);
  return cl;
}

/// Stage cost accrued at sample t of a closed-loop record.
inline double stage_cost_at(const Topology& topo, const TrajectoryData& traj, const CostSpec& cost, int t) {
  double c = 0.0;
  for (int i = 0; i < topo.node_count(); ++i) {
    Eigen::VectorXd x = traj.states.col(t).segment(topo.state_offset(i), topo.state_dim(i));
    c += x.dot(cost.q[i] * x);
    if (topo.input_dim(i) > 0) {
      Eigen::VectorXd u = traj.inputs.col(t).segment(topo.input_offset(i), topo.input_dim(i));
      c += u.dot(cost.r[i] * u);
    }
  }
  return c;
}

struct OptimalityResult {
  ClosedLoop distributed;
  ClosedLoop centralized;
  double max_state_diff = 0.0;
  double max_input_diff = 0.0;
  double rel_cost_gap = 0.0;
  double seconds = 0.0;
};

inline double rel_gap(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1e-300); }

/// Distributed vs centralized model-based closed loop on the same plant.
inline OptimalityResult exp_optimality(const BenchConfig& cfg, std::ostream& csv, std::ostream* stats_csv = nullptr) {
  cfg.validate();
  const auto t0 = std::chrono::steady_clock::now();
  Scenario sc = make_scenario(cfg, cfg.n, cfg.seed, cfg.d);
  const Topology& topo = sc.sys.topology();
  std::vector<AgentState> agents = build_agents(topo, sc.data, cfg.d, cfg.horizon, sc.cost, sc.cons);
  RoundBus bus(topo, cfg.d);
  OptimalityResult res;
  res.distributed = run_receding_horizon(agents, bus, sc.sys, sc.cost, sc.x0, cfg.steps, cfg.consensus());
  ModelBasedDlmpc central(sc.sys, cfg.d, cfg.horizon, sc.cost, sc.cons);
  res.centralized = centralized_closed_loop(central, sc.sys, sc.cost, sc.x0, cfg.steps);
  res.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  const Eigen::MatrixXd& xd = res.distributed.trajectory.states;
  const Eigen::MatrixXd& xc = res.centralized.trajectory.states;
  res.max_state_diff = cfg.steps > 0 ? (xd - xc).cwiseAbs().maxCoeff() : 0.0;
  res.max_input_diff =
      cfg.steps > 0 ? (res.distributed.trajectory.inputs - res.centralized.trajectory.inputs).cwiseAbs().maxCoeff() : 0.0;
  res.rel_cost_gap = cfg.steps > 0 ? rel_gap(res.distributed.cost, res.centralized.cost) : 0.0;

  csv << "t,x_d3lmpc_theta1,x_d3lmpc_omega1,x_centralized_theta1,x_centralized_omega1,abs_diff,cum_cost_d3lmpc,"
         "cum_cost_centralized,rel_cost_gap\n";
  csv << std::setprecision(12);
  if (cfg.steps > 0) {
    double cd = 0.0, cc = 0.0;
    for (int t = 0; t <= cfg.steps; ++t) {
      if (t > 0) {
        cd += stage_cost_at(topo, res.distributed.trajectory, sc.cost, t - 1);
        cc += stage_cost_at(topo, res.centralized.trajectory, sc.cost, t - 1);
      }
      csv << t << "," << xd(0, t) << "," << xd(1, t) << "," << xc(0, t) << "," << xc(1, t) << ","
          << (xd.col(t) - xc.col(t)).cwiseAbs().maxCoeff() << "," << cd << "," << cc << ",\n";
    }
    csv << "summary,,,,," << res.max_state_diff << "," << res.distributed.cost << "," << res.centralized.cost << ","
        << res.rel_cost_gap << "\n";
  }
  if (stats_csv) write_stats_csv(*stats_csv, res.distributed.stats);
  return res;
}

struct LocalityRow {
  int d = 0;
  double closed_loop_cost = 0.0;     // distributed data-driven closed loop
  double centralized_cost = 0.0;     // unlocalized centralized closed loop
  double subproblem_cost = 0.0;      // optimal MPC cost at x0 under d-locality
  double unlocalized_cost = 0.0;     // optimal MPC cost at x0 without locality
  double lqr_cost = 0.0;             // Riccati cost-to-go at x0
  int required_local_length = 0;     // interior node
  int iterations_first_step = 0;
};

inline std::vector<LocalityRow> exp_locality_sweep(const BenchConfig& cfg, std::ostream& csv) {
  cfg.validate();
  if (cfg.d_list.empty()) throw ArgumentError("exp-locality: d_list is empty");
  LtiSystem sys = make_chain_system(cfg.n, cfg.seed);
  const Topology& topo = sys.topology();
  const CostSpec cost = CostSpec::identity(topo);
  const ConstraintSpec cons = cfg.u_max ? ConstraintSpec::input_box(topo, *cfg.u_max) : ConstraintSpec::none(topo);
  const Eigen::VectorXd x0 = initial_state(topo, cfg.seed, cfg.x0_amplitude);
  const int d_full = std::max(topo.diameter(), 0);
  ModelBasedDlmpc full(sys, d_full, cfg.horizon, cost, cons);
  const double unlocalized = full.solve(x0).cost;
  const double centralized = centralized_closed_loop(full, sys, cost, x0, cfg.steps).cost;
  LqrSolution lqr = lqr_dp(sys, cfg.horizon, cost);
  const double lqr_cost = x0.dot(lqr.cost_to_go[0] * x0);

  std::vector<LocalityRow> rows;
  for (int d : cfg.d_list) {
    Scenario sc = make_scenario(cfg, cfg.n, cfg.seed, d);
    std::vector<AgentState> agents = build_agents(topo, sc.data, d, cfg.horizon, sc.cost, sc.cons);
    RoundBus bus(topo, d);
    ClosedLoop cl = run_receding_horizon(agents, bus, sc.sys, sc.cost, x0, cfg.steps, cfg.consensus());
    LocalityRow r;
    r.d = d;
    r.closed_loop_cost = cl.cost;
    r.centralized_cost = centralized;
    r.subproblem_cost = ModelBasedDlmpc(sys, d, cfg.horizon, cost, cons).solve(x0).cost;
    r.unlocalized_cost = unlocalized;
    r.lqr_cost = lqr_cost;
    r.required_local_length = required_local_length(topo, interior_node(topo), d, cfg.horizon);
    r.iterations_first_step = cl.stats.empty() ? 0 : cl.stats.front().admm_iters;
    rows.push_back(r);
  }
  csv << "d,closed_loop_cost,centralized_cost,subproblem_cost,unlocalized_cost,lqr_cost,required_local_length\n";
  csv << std::setprecision(15);
  for (const LocalityRow& r : rows)
    csv << r.d << "," << r.closed_loop_cost << "," << r.centralized_cost << "," << r.subproblem_cost << ","
        << r.unlocalized_cost << "," << r.lqr_cost << "," << r.required_local_length << "\n";
  return rows;
}

/// Sizes of the matrices an agent allocates.
struct AgentDims {
  int data_region = 0;
  int hankel_columns = 0;
  int equality_rows = 0;
  int kept_rows = 0;
  int row_width_x = 0;
  int row_width_u = 0;
  bool operator==(const AgentDims&) const = default;
};

inline AgentDims agent_dims(const AgentState& a) {
  AgentDims d;
  d.data_region = static_cast<int>(a.program.region().data_region.size());
  d.hankel_columns = a.program.columns();
  d.equality_rows = static_cast<int>(a.program.equality_operator().rows());
  d.kept_rows = a.program.kept_rows();
  d.row_width_x = a.phi_x.empty() ? 0 : static_cast<int>(a.phi_x.front().cols());
  d.row_width_u = a.phi_u.empty() ? 0 : static_cast<int>(a.phi_u.front().cols());
  return d;
}

struct ScalingRow {
  int n = 0;
  int instance = 0;
  std::uint64_t seed = 0;
  double avg_ms_per_step_per_agent = 0.0;
  double admm_iters_avg = 0.0;
  int local_data_len = 0;
  int centralized_data_len = 0;
  double messages_per_step = 0.0;
  AgentDims interior;
};

/// Runtime and data-length scaling over chain sizes. Instances are the first
/// pinned seeds at or after cfg.seed. Timing skips the first (cold) MPC step.
inline std::vector<ScalingRow> exp_scalability(const BenchConfig& cfg, std::ostream& csv) {
  cfg.validate();
  if (cfg.n_list.empty()) throw ArgumentError("exp-scaling: n_list is empty");
  std::vector<ScalingRow> rows;
  csv << "N,instance,seed,avg_ms_per_step_per_agent,admm_iters_avg,local_data_len,centralized_data_len,"
         "messages_per_step,interior_data_region,interior_hankel_cols,interior_eq_rows,interior_kept_rows\n";
  for (int n : cfg.n_list) {
    const auto seeds = pinned_chain_seeds(n, cfg.instances, cfg.seed);
    for (int inst = 0; inst < cfg.instances; ++inst) {
      Scenario sc = make_scenario(cfg, n, seeds[inst], cfg.d);
      const Topology& topo = sc.sys.topology();
      std::vector<AgentState> agents = build_agents(topo, sc.data, cfg.d, cfg.horizon, sc.cost, sc.cons);
      RoundBus bus(topo, cfg.d);
      ClosedLoop cl = run_receding_horizon(agents, bus, sc.sys, sc.cost, sc.x0, cfg.scaling_steps, cfg.consensus());
      ScalingRow r;
      r.n = n;
      r.instance = inst;
      r.seed = seeds[inst];
      double ms = 0.0, it = 0.0, msg = 0.0;
      for (std::size_t k = 1; k < cl.stats.size(); ++k) {
        ms += cl.stats[k].wall_ms_per_agent_avg;
        it += cl.stats[k].admm_iters;
        msg += static_cast<double>(cl.stats[k].messages);
      }
      const double cnt = static_cast<double>(cl.stats.size() - 1);
      r.avg_ms_per_step_per_agent = ms / cnt;
      r.admm_iters_avg = it / cnt;
      r.messages_per_step = msg / cnt;
      r.local_data_len = required_local_length(topo, interior_node(topo), cfg.d, cfg.horizon);
      r.centralized_data_len = required_global_length(topo, cfg.horizon);
      r.interior = agent_dims(agents[interior_node(topo)]);
      rows.push_back(r);
      csv << r.n << "," << r.instance << "," << r.seed << "," << r.avg_ms_per_step_per_agent << "," << r.admm_iters_avg
          << "," << r.local_data_len << "," << r.centralized_data_len << "," << r.messages_per_step << ","
          << r.interior.data_region << "," << r.interior.hankel_columns << "," << r.interior.equality_rows << ","
          << r.interior.kept_rows << "\n";
    }
  }
  return rows;
}

// ---------------------------------------------------------------------------
// Plotting

struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  int column(const std::string& name) const {
    auto it = std::find(header.begin(), header.end(), name);
    if (it == header.end()) throw ArgumentError("plot: no column '" + name + "'");
    return static_cast<int>(it - header.begin());
  }
};

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream is(line);
  while (std::getline(is, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

inline CsvTable read_csv_table(std::istream& is) {
  CsvTable t;
  std::string line;
  if (!std::getline(is, line)) throw ArgumentError("plot: empty CSV");
  t.header = split_csv_line(line);
  while (std::getline(is, line))
    if (!line.empty()) t.rows.push_back(split_csv_line(line));
  return t;
}

inline std::optional<double> parse_number(const std::string& s) {
  if (s.empty()) return std::nullopt;
  std::size_t used = 0;
  try {
    double v = std::stod(s, &used);
    if (used != s.size()) return std::nullopt;
    return v;
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

struct PlotSpec {
  std::string x;
  std::vector<std::string> y;
  std::string title;
  bool log_y = false;
};

/// Static SVG line chart; rows whose x or y cell is not numeric are skipped.
inline std::string render_svg(const CsvTable& table, const PlotSpec& spec) {
  if (spec.y.empty()) throw ArgumentError("plot: no y columns");
  const int xc = table.column(spec.x);
  struct Series {
    std::string name;
    std::vector<std::pair<double, double>> pts;
  };
  std::vector<Series> series;
  double xmin = std::numeric_limits<double>::infinity(), xmax = -xmin, ymin = xmin, ymax = -xmin;
  for (const std::string& name : spec.y) {
    const int yc = table.column(name);
    Series s{name, {}};
    for (const auto& row : table.rows) {
      if (static_cast<int>(row.size()) <= std::max(xc, yc)) continue;
      auto xv = parse_number(row[xc]);
      auto yv = parse_number(row[yc]);
      if (!xv || !yv) continue;
      double y = *yv;
      if (spec.log_y) {
        if (!(y > 0)) continue;
        y = std::log10(y);
      }
      s.pts.emplace_back(*xv, y);
      xmin = std::min(xmin, *xv);
      xmax = std::max(xmax, *xv);
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
    series.push_back(std::move(s));
  }
  if (!(xmin <= xmax)) throw ArgumentError("plot: no numeric data");
  if (xmax == xmin) xmax = xmin + 1.0;
  if (ymax == ymin) {
    ymax += 0.5;
    ymin -= 0.5;
  }
  const double w = 640, h = 400, ml = 70, mr = 150, mt = 40, mb = 50;
  auto px = [&](double x) { return ml + (x - xmin) / (xmax - xmin) * (w - ml - mr); };
  auto py = [&](double y) { return h - mb - (y - ymin) / (ymax - ymin) * (h - mt - mb); };
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  std::ostringstream os;
  os << std::setprecision(6);
  os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  os << "<text x=\"" << w / 2 << "\" y=\"20\" text-anchor=\"middle\" font-size=\"14\">" << spec.title << "</text>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << h - mb << "\" x2=\"" << w - mr << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
  os << "<line x1=\"" << ml << "\" y1=\"" << mt << "\" x2=\"" << ml << "\" y2=\"" << h - mb << "\" stroke=\"black\"/>\n";
  for (int k = 0; k <= 4; ++k) {
    const double xv = xmin + (xmax - xmin) * k / 4.0, yv = ymin + (ymax - ymin) * k / 4.0;
    os << "<text x=\"" << px(xv) << "\" y=\"" << h - mb + 16 << "\" text-anchor=\"middle\">" << xv << "</text>\n";
    os << "<text x=\"" << ml - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">"
       << (spec.log_y ? std::pow(10.0, yv) : yv) << "</text>\n";
  }
  os << "<text x=\"" << (ml + w - mr) / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\">" << spec.x << "</text>\n";
  for (std::size_t s = 0; s < series.size(); ++s) {
    const char* c = colors[s % 6];
    os << "<polyline fill=\"none\" stroke=\"" << c << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& [x, y] : series[s].pts) os << px(x) << "," << py(y) << " ";
    os << "\"/>\n";
    for (const auto& [x, y] : series[s].pts)
      os << "<circle cx=\"" << px(x) << "\" cy=\"" << py(y) << "\" r=\"2\" fill=\"" << c << "\"/>\n";
    os << "<text x=\"" << w - mr + 10 << "\" y=\"" << mt + 16 * (s + 1) << "\" fill=\"" << c << "\">" << series[s].name
       << "</text>\n";
  }
  os << "</svg>\n";
  return os.str();
}

/// Default chart for each CSV the experiments write, keyed by file stem.
inline std::vector<PlotSpec> default_plots(const std::string& stem) {
  if (stem == "optimality")
    return {{"t", {"x_d3lmpc_theta1", "x_centralized_theta1"}, "Node 1 angle: distributed vs centralized", false},
            {"t", {"abs_diff"}, "Max state difference", true}};
  if (stem == "locality")
    return {{"d", {"closed_loop_cost", "subproblem_cost", "centralized_cost"}, "Cost vs locality", false},
            {"d", {"required_local_length"}, "Required data length vs locality", false}};
  if (stem == "scaling")
    return {{"N", {"avg_ms_per_step_per_agent"}, "Per-agent time per MPC step (ms)", false},
            {"N", {"local_data_len", "centralized_data_len"}, "Required data length vs N", true}};
  if (stem == "stats") return {{"step", {"admm_iters"}, "ADMM iterations per step", false}};
  return {};
}

}  // namespace d3lmpc
