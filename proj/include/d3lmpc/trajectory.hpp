#pragma once

#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "d3lmpc/errors.hpp"
#include "d3lmpc/topology.hpp"

namespace d3lmpc {

/// Recorded state/input signals of a set of subsystems. Columns are time
/// steps; rows are the stacked per-node blocks in `nodes` order.
struct TrajectoryData {
  NodeSet nodes;
  std::vector<int> state_dims;  // per entry of `nodes`
  std::vector<int> input_dims;
  Eigen::MatrixXd states;  // n x (T_data + 1)
  Eigen::MatrixXd inputs;  // p x T_data

  int length() const { return static_cast<int>(inputs.cols()); }

  int state_row(int node) const { return block_row(node, state_dims); }
  int input_row(int node) const { return block_row(node, input_dims); }
  int state_dim_of(int node) const { return state_dims[position(node)]; }
  int input_dim_of(int node) const { return input_dims[position(node)]; }

  void validate() const {
    if (state_dims.size() != nodes.size() || input_dims.size() != nodes.size())
      throw ArgumentError("trajectory: per-node dims do not match node list");
    int n = 0, p = 0;
    for (int v : state_dims) n += v;
    for (int v : input_dims) p += v;
    if (states.rows() != n || inputs.rows() != p)
      throw ArgumentError("trajectory: row counts do not match node dims");
    if (states.cols() != inputs.cols() + 1)
      throw ArgumentError("trajectory: expected one more state sample than input samples");
  }

  static TrajectoryData empty_for(const Topology& topo) {
    TrajectoryData t;
    for (int i = 0; i < topo.node_count(); ++i) t.nodes.push_back(i);
    t.state_dims = topo.state_dims();
    t.input_dims = topo.input_dims();
    t.states = Eigen::MatrixXd::Zero(topo.total_state_dim(), 1);
    t.inputs = Eigen::MatrixXd::Zero(topo.total_input_dim(), 0);
    return t;
  }

 private:
  int position(int node) const {
    auto it = std::lower_bound(nodes.begin(), nodes.end(), node);
    if (it == nodes.end() || *it != node)
      throw ArgumentError("trajectory: node " + std::to_string(node) + " not recorded");
    return static_cast<int>(it - nodes.begin());
  }
  int block_row(int node, const std::vector<int>& dims) const {
    int pos = position(node), r = 0;
    for (int k = 0; k < pos; ++k) r += dims[k];
    return r;
  }
};

/// CSV: one row per time step; columns are state entries then input entries.
/// The final row (time T_data) has empty input cells.
inline void write_trajectory_csv(std::ostream& os, const TrajectoryData& traj) {
  traj.validate();
  os << "t";
  for (std::size_t k = 0; k < traj.nodes.size(); ++k)
    for (int r = 0; r < traj.state_dims[k]; ++r) os << ",x" << traj.nodes[k] + 1 << "_" << r;
  for (std::size_t k = 0; k < traj.nodes.size(); ++k)
    for (int r = 0; r < traj.input_dims[k]; ++r) os << ",u" << traj.nodes[k] + 1 << "_" << r;
  os << "\n" << std::setprecision(std::numeric_limits<double>::max_digits10);
  for (Eigen::Index t = 0; t < traj.states.cols(); ++t) {
    os << t;
    for (Eigen::Index r = 0; r < traj.states.rows(); ++r) os << "," << traj.states(r, t);
    for (Eigen::Index r = 0; r < traj.inputs.rows(); ++r) {
      os << ",";
      if (t < traj.inputs.cols()) os << traj.inputs(r, t);
    }
    os << "\n";
  }
}

/// Reads a CSV produced by write_trajectory_csv; the column layout must match
/// `templ` (nodes and dims).
inline TrajectoryData read_trajectory_csv(std::istream& is, const TrajectoryData& templ) {
  std::string line;
  if (!std::getline(is, line)) throw ArgumentError("trajectory csv: empty input");
  int n = 0, p = 0;
  for (int v : templ.state_dims) n += v;
  for (int v : templ.input_dims) p += v;
  std::vector<std::vector<double>> xs, us;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (static_cast<int>(cells.size()) != 1 + n + p)
      throw ArgumentError("trajectory csv: wrong column count");
    std::vector<double> x(n), u;
    for (int r = 0; r < n; ++r) x[r] = std::stod(cells[1 + r]);
    bool has_u = p > 0 && !cells[1 + n].empty();
    if (has_u) {
      u.resize(p);
      for (int r = 0; r < p; ++r) u[r] = std::stod(cells[1 + n + r]);
    }
    xs.push_back(std::move(x));
    if (has_u) us.push_back(std::move(u));
  }
  if (xs.empty()) throw ArgumentError("trajectory csv: no samples");
  TrajectoryData t;
  t.nodes = templ.nodes;
  t.state_dims = templ.state_dims;
  t.input_dims = templ.input_dims;
  t.states.resize(n, static_cast<Eigen::Index>(xs.size()));
  t.inputs.resize(p, static_cast<Eigen::Index>(xs.size()) - 1);
  for (std::size_t k = 0; k < xs.size(); ++k)
    for (int r = 0; r < n; ++r) t.states(r, k) = xs[k][r];
  if (p > 0 && us.size() != xs.size() - 1) throw ArgumentError("trajectory csv: missing input samples");
  for (std::size_t k = 0; k < us.size(); ++k)
    for (int r = 0; r < p; ++r) t.inputs(r, k) = us[k][r];
  t.validate();
  return t;
}

}  // namespace d3lmpc
