// Command-line front end for the toolkit: system generation, data collection,
// closed-loop runs, the three experiments and SVG plotting.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "d3lmpc/bench.hpp"

namespace fs = std::filesystem;
using namespace d3lmpc;

namespace {

enum ExitCode { kOk = 0, kOther = 1, kArgument = 2, kData = 3, kSolver = 4 };

int report(const char* kind, int code, const std::string& msg) {
  nlohmann::json j{{"error", kind}, {"exit_code", code}, {"message", msg}};
  std::cerr << j.dump() << "\n";
  return code;
}

struct Options {
  BenchConfig cfg;
  std::string out = ".";
  std::string config_file;
  std::string system_file;
  std::string data_file;
  int data_length = 0;
  double u_max = 0.0;
  bool sequential = false;
  std::string d_list, n_list;
  // plot
  std::string csv, x, y, svg;
  bool log_y = false;
};

std::vector<int> parse_int_list(const std::string& s) {
  std::vector<int> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t used = 0;
    int v = 0;
    try {
      v = std::stoi(item, &used);
    } catch (const std::exception&) {
      throw ArgumentError("bad integer list '" + s + "'");
    }
    if (used != item.size()) throw ArgumentError("bad integer list '" + s + "'");
    out.push_back(v);
  }
  if (out.empty()) throw ArgumentError("empty integer list");
  return out;
}

void add_common(CLI::App* sub, Options& o) {
  sub->add_option("--n", o.cfg.n, "Number of subsystems in the chain");
  sub->add_option("--d", o.cfg.d, "Locality radius (hops)");
  sub->add_option("--horizon", o.cfg.horizon, "MPC horizon T");
  sub->add_option("--steps", o.cfg.steps, "Closed-loop steps");
  sub->add_option("--seed", o.cfg.seed, "Plant / data seed");
  sub->add_option("--rho", o.cfg.rho, "ADMM penalty");
  sub->add_option("--eps", o.cfg.eps, "ADMM primal and dual tolerance");
  sub->add_option("--max-iter", o.cfg.max_iter, "ADMM iteration cap");
  sub->add_option("--out", o.out, "Output directory");
  sub->add_option("--config", o.config_file, "JSON file whose keys override flags");
  sub->add_option("--length", o.data_length, "Excitation record length (default: local minimum + margin)");
  sub->add_option("--u-max", o.u_max, "Input box |u| <= u_max");
  sub->add_flag("--sequential", o.sequential, "Run agents sequentially");
}

// Applies the derived flags and the JSON file on top of the parsed flags.
void finalize(Options& o) {
  if (o.data_length > 0) o.cfg.data_length = o.data_length;
  if (o.u_max > 0) o.cfg.u_max = o.u_max;
  if (o.sequential) o.cfg.parallel = false;
  if (!o.d_list.empty()) o.cfg.d_list = parse_int_list(o.d_list);
  if (!o.n_list.empty()) o.cfg.n_list = parse_int_list(o.n_list);
  if (!o.config_file.empty()) {
    std::ifstream in(o.config_file);
    if (!in) throw ArgumentError("cannot open config file " + o.config_file);
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw ArgumentError(std::string("config file: ") + e.what());
    }
    if (j.contains("out")) {
      o.out = j.at("out").get<std::string>();
      j.erase("out");
    }
    o.cfg.apply_json(j);
  }
  o.cfg.validate();
  fs::create_directories(o.out);
}

std::ofstream open_out(const Options& o, const std::string& name) {
  fs::path p = fs::path(o.out) / name;
  std::ofstream f(p);
  if (!f) throw ArgumentError("cannot write " + p.string());
  return f;
}

LtiSystem load_system(const Options& o) {
  if (o.system_file.empty()) return make_chain_system(o.cfg.n, o.cfg.seed);
  std::ifstream in(o.system_file);
  if (!in) throw ArgumentError("cannot open system file " + o.system_file);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ArgumentError(std::string("system file: ") + e.what());
  }
  return LtiSystem::from_json(j);
}

int data_length_for(const Options& o, const Topology& topo) {
  return o.cfg.data_length ? *o.cfg.data_length : local_data_length(topo, o.cfg.d, o.cfg.horizon) + o.cfg.data_margin;
}

int cmd_gen_system(Options& o) {
  LtiSystem sys = load_system(o);
  auto f = open_out(o, "system.json");
  f << sys.to_json().dump(2) << "\n";
  std::cout << "wrote " << (fs::path(o.out) / "system.json").string() << "\n";
  return kOk;
}

int cmd_collect_data(Options& o) {
  LtiSystem sys = load_system(o);
  const int len = data_length_for(o, sys.topology());
  TrajectoryData data = collect_excited_data(sys, len, o.cfg.amplitude, o.cfg.seed);
  auto f = open_out(o, "data.csv");
  write_trajectory_csv(f, data);
  std::cout << "wrote " << (fs::path(o.out) / "data.csv").string() << " (T_data=" << len << ")\n";
  return kOk;
}

int cmd_run_mpc(Options& o) {
  LtiSystem sys = load_system(o);
  const Topology& topo = sys.topology();
  TrajectoryData data;
  if (!o.data_file.empty()) {
    std::ifstream in(o.data_file);
    if (!in) throw ArgumentError("cannot open data file " + o.data_file);
    data = read_trajectory_csv(in, TrajectoryData::empty_for(topo));
  } else {
    data = collect_excited_data(sys, data_length_for(o, topo), o.cfg.amplitude, o.cfg.seed);
  }
  CostSpec cost = CostSpec::identity(topo);
  ConstraintSpec cons = o.cfg.u_max ? ConstraintSpec::input_box(topo, *o.cfg.u_max) : ConstraintSpec::none(topo);
  std::vector<AgentState> agents = build_agents(topo, data, o.cfg.d, o.cfg.horizon, cost, cons);
  RoundBus bus(topo, o.cfg.d);
  Eigen::VectorXd x0 = initial_state(topo, o.cfg.seed, o.cfg.x0_amplitude);
  ClosedLoop cl = run_receding_horizon(agents, bus, sys, cost, x0, o.cfg.steps, o.cfg.consensus());
  {
    auto f = open_out(o, "closed_loop.csv");
    write_trajectory_csv(f, cl.trajectory);
  }
  {
    auto f = open_out(o, "stats.csv");
    write_stats_csv(f, cl.stats);
  }
  std::cout << "closed-loop cost " << cl.cost << " over " << o.cfg.steps << " steps\n";
  return kOk;
}

int cmd_exp_optimality(Options& o) {
  auto f = open_out(o, "optimality.csv");
  auto s = open_out(o, "optimality_stats.csv");
  OptimalityResult r = exp_optimality(o.cfg, f, &s);
  std::cout << "max state diff " << r.max_state_diff << ", relative cost gap " << r.rel_cost_gap << ", " << r.seconds
            << " s\n";
  return kOk;
}

int cmd_exp_locality(Options& o) {
  auto f = open_out(o, "locality.csv");
  auto rows = exp_locality_sweep(o.cfg, f);
  for (const auto& r : rows)
    std::cout << "d=" << r.d << " closed-loop " << r.closed_loop_cost << " subproblem " << r.subproblem_cost
              << " T_data>=" << r.required_local_length << "\n";
  return kOk;
}

int cmd_exp_scaling(Options& o) {
  auto f = open_out(o, "scaling.csv");
  auto rows = exp_scalability(o.cfg, f);
  for (const auto& r : rows)
    std::cout << "N=" << r.n << " #" << r.instance << " " << r.avg_ms_per_step_per_agent << " ms/agent/step, "
              << r.admm_iters_avg << " iters\n";
  return kOk;
}

int cmd_plot(Options& o) {
  auto render = [&](const fs::path& csv, const PlotSpec& spec, const fs::path& svg) {
    std::ifstream in(csv);
    if (!in) throw ArgumentError("cannot open " + csv.string());
    CsvTable t = read_csv_table(in);
    std::ofstream out(svg);
    if (!out) throw ArgumentError("cannot write " + svg.string());
    out << render_svg(t, spec);
    std::cout << "wrote " << svg.string() << "\n";
  };
  if (!o.csv.empty()) {
    if (o.x.empty() || o.y.empty()) throw ArgumentError("plot: --x and --y are required with --csv");
    PlotSpec spec{o.x, {}, fs::path(o.csv).stem().string(), o.log_y};
    std::stringstream ss(o.y);
    std::string col;
    while (std::getline(ss, col, ',')) spec.y.push_back(col);
    fs::path svg = o.svg.empty() ? fs::path(o.csv).replace_extension(".svg") : fs::path(o.svg);
    render(o.csv, spec, svg);
    return kOk;
  }
  int count = 0;
  for (const char* stem : {"optimality", "locality", "scaling", "stats"}) {
    fs::path csv = fs::path(o.out) / (std::string(stem) + ".csv");
    if (!fs::exists(csv)) continue;
    auto specs = default_plots(stem);
    for (std::size_t k = 0; k < specs.size(); ++k) {
      render(csv, specs[k], fs::path(o.out) / (std::string(stem) + (k ? "_" + std::to_string(k) : "") + ".svg"));
      ++count;
    }
  }
  if (count == 0) throw ArgumentError("plot: no known CSV files in " + o.out);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Data-driven distributed localized MPC toolkit"};
  app.require_subcommand(1);
  Options o;

  auto* gen = app.add_subcommand("gen-system", "Write a random chain system to system.json");
  add_common(gen, o);
  auto* collect = app.add_subcommand("collect-data", "Record an excitation trajectory to data.csv");
  add_common(collect, o);
  collect->add_option("--system", o.system_file, "System JSON (default: chain from --n/--seed)");
  auto* run = app.add_subcommand("run-mpc", "Closed-loop distributed MPC; writes closed_loop.csv and stats.csv");
  add_common(run, o);
  run->add_option("--system", o.system_file, "System JSON (default: chain from --n/--seed)");
  run->add_option("--data", o.data_file, "Trajectory CSV from collect-data");
  auto* opt = app.add_subcommand("exp-optimality", "Distributed vs centralized closed loop");
  add_common(opt, o);
  auto* loc = app.add_subcommand("exp-locality", "Cost and data length across locality radii");
  add_common(loc, o);
  loc->add_option("--d-list", o.d_list, "Comma-separated radii");
  auto* scl = app.add_subcommand("exp-scaling", "Per-agent runtime and data length across chain sizes");
  add_common(scl, o);
  scl->add_option("--n-list", o.n_list, "Comma-separated chain sizes");
  scl->add_option("--instances", o.cfg.instances, "Systems per size");
  scl->add_option("--scaling-steps", o.cfg.scaling_steps, "MPC steps per instance");
  auto* plot = app.add_subcommand("plot", "Render experiment CSVs in --out to SVG");
  add_common(plot, o);
  plot->add_option("--csv", o.csv, "Single CSV to plot");
  plot->add_option("--x", o.x, "x column");
  plot->add_option("--y", o.y, "Comma-separated y columns");
  plot->add_option("--svg", o.svg, "Output SVG path");
  plot->add_flag("--logy", o.log_y, "Logarithmic y axis");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return report("argument", kArgument, e.what());
  }

  try {
    finalize(o);
    if (gen->parsed()) return cmd_gen_system(o);
    if (collect->parsed()) return cmd_collect_data(o);
    if (run->parsed()) return cmd_run_mpc(o);
    if (opt->parsed()) return cmd_exp_optimality(o);
    if (loc->parsed()) return cmd_exp_locality(o);
    if (scl->parsed()) return cmd_exp_scaling(o);
    if (plot->parsed()) return cmd_plot(o);
  } catch (const ArgumentError& e) {
    return report("argument", kArgument, e.what());
  } catch (const DataError& e) {
    return report("data", kData, e.what());
  } catch (const InfeasibleError& e) {
    return report("infeasible", kSolver, e.what());
  } catch (const SolverError& e) {
    return report("nonconvergence", kSolver, e.what());
  } catch (const std::exception& e) {
    return report("internal", kOther, e.what());
  }
  return kOther;
}
