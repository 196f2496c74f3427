#pragma once

#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include <Eigen/Dense>

#include "d3lmpc/errors.hpp"
#include "d3lmpc/plant.hpp"
#include "d3lmpc/topology.hpp"
#include "d3lmpc/trajectory.hpp"

namespace d3lmpc {

/// Relative singular-value threshold for all rank decisions on recorded data.
inline constexpr double kRankTol = 1e-9;

/// Depth-L block Hankel matrix: block row t, column k holds signal column k + t.
inline Eigen::MatrixXd hankel(const Eigen::MatrixXd& signal, int depth) {
  if (depth < 1) throw ArgumentError("hankel: depth must be >= 1");
  const Eigen::Index s = signal.rows(), len = signal.cols();
  if (len < depth) throw ArgumentError("hankel: signal shorter than depth");
  const Eigen::Index cols = len - depth + 1;
  Eigen::MatrixXd h(s * depth, cols);
  for (int t = 0; t < depth; ++t) h.middleRows(t * s, s) = signal.middleCols(t, cols);
  return h;
}

/// Outcome of a persistency-of-excitation test.
struct PeReport {
  bool ok = false;
  bool too_short = false;
  int rank = 0;
  int rows = 0;
  double sigma_min = 0.0;
  double sigma_max = 0.0;

  explicit operator bool() const { return ok; }

  std::string describe() const {
    std::ostringstream os;
    if (too_short) {
      os << "PE: signal too short for requested order";
    } else {
      os << "PE: rank " << rank << " of " << rows << " (sigma_min=" << sigma_min << ", sigma_max=" << sigma_max
         << ")";
    }
    return os.str();
  }
};

inline int numerical_rank(const Eigen::VectorXd& sv, double rel_tol = kRankTol) {
  if (sv.size() == 0 || sv(0) <= 0.0) return 0;
  int r = 0;
  for (Eigen::Index k = 0; k < sv.size(); ++k)
    if (sv(k) > rel_tol * sv(0)) ++r;
  return r;
}

/// Full-row-rank test on hankel(signal, order).
inline PeReport check_pe(const Eigen::MatrixXd& signal, int order) {
  PeReport rep;
  if (order < 1) throw ArgumentError("check_pe: order must be >= 1");
  rep.rows = static_cast<int>(signal.rows()) * order;
  if (signal.cols() < order) {
    rep.too_short = true;
    return rep;
  }
  Eigen::MatrixXd h = hankel(signal, order);
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(h);
  const Eigen::VectorXd& sv = svd.singularValues();
  rep.rank = numerical_rank(sv);
  rep.sigma_max = sv.size() ? sv(0) : 0.0;
  // Missing singular values (more rows than columns) count as zeros.
  rep.sigma_min = (h.rows() <= h.cols() && sv.size()) ? sv(sv.size() - 1) : 0.0;
  rep.ok = rep.rows > 0 && rep.rank == rep.rows;
  return rep;
}

/// Shortest record for which an m_loc-channel input can be PE of order n_loc + L.
inline int min_data_length(int m_loc, int n_loc, int depth) {
  return (m_loc + 1) * (n_loc + depth) - 1;
}

/// Restriction of a trajectory to the block rows of `region`.
inline TrajectoryData local_view(const TrajectoryData& traj, const NodeSet& region) {
  if (region.empty()) throw ArgumentError("local_view: empty region");
  TrajectoryData out;
  out.nodes = region;
  int n = 0, p = 0;
  for (int v : region) {
    if (!contains(traj.nodes, v)) throw ArgumentError("local_view: node " + std::to_string(v) + " not in trajectory");
    out.state_dims.push_back(traj.state_dim_of(v));
    out.input_dims.push_back(traj.input_dim_of(v));
    n += out.state_dims.back();
    p += out.input_dims.back();
  }
  out.states.resize(n, traj.states.cols());
  out.inputs.resize(p, traj.inputs.cols());
  int rs = 0, ru = 0;
  for (std::size_t k = 0; k < region.size(); ++k) {
    out.states.middleRows(rs, out.state_dims[k]) = traj.states.middleRows(traj.state_row(region[k]), out.state_dims[k]);
    if (out.input_dims[k] > 0)
      out.inputs.middleRows(ru, out.input_dims[k]) = traj.inputs.middleRows(traj.input_row(region[k]), out.input_dims[k]);
    rs += out.state_dims[k];
    ru += out.input_dims[k];
  }
  return out;
}

/// Hankel matrices of depth L over a recorded region, with row lookup by
/// (node, time offset).
struct HankelStack {
  int depth = 0;
  NodeSet nodes;
  std::vector<int> state_dims, input_dims;
  Eigen::MatrixXd state_part;  // (n_loc * L) x K
  Eigen::MatrixXd input_part;  // (m_loc * L) x K

  int columns() const { return static_cast<int>(state_part.cols()); }
  int n_loc() const { return static_cast<int>(state_part.rows()) / depth; }
  int m_loc() const { return static_cast<int>(input_part.rows()) / depth; }

  int state_row(int node, int t) const { return t * n_loc() + offset(node, state_dims); }
  int input_row(int node, int t) const { return t * m_loc() + offset(node, input_dims); }
  int state_dim_of(int node) const { return state_dims[position(node)]; }
  int input_dim_of(int node) const { return input_dims[position(node)]; }

 private:
  int position(int node) const {
    auto it = std::lower_bound(nodes.begin(), nodes.end(), node);
    if (it == nodes.end() || *it != node) throw ArgumentError("hankel stack: node not in region");
    return static_cast<int>(it - nodes.begin());
  }
  int offset(int node, const std::vector<int>& dims) const {
    int pos = position(node), r = 0;
    for (int k = 0; k < pos; ++k) r += dims[k];
    return r;
  }
};

/// Uses states x(0..T_data-1) so both parts have T_data - L + 1 columns.
inline HankelStack build_hankel_stack(const TrajectoryData& traj, int depth) {
  traj.validate();
  if (traj.length() < depth) throw ArgumentError("hankel stack: trajectory shorter than depth");
  HankelStack h;
  h.depth = depth;
  h.nodes = traj.nodes;
  h.state_dims = traj.state_dims;
  h.input_dims = traj.input_dims;
  h.state_part = hankel(traj.states.leftCols(traj.length()), depth);
  if (traj.inputs.rows() > 0) {
    h.input_part = hankel(traj.inputs, depth);
  } else {
    h.input_part.resize(0, h.state_part.cols());
  }
  return h;
}

/// Open-loop excitation experiment: x0 and inputs i.i.d. U[-amplitude, amplitude].
/// When pe_order > 0 the input record must pass check_pe at that order; up to
/// 10 draws are attempted from derived seeds.
inline TrajectoryData collect_excited_data(const LtiSystem& sys, int t_data, double amplitude, std::uint64_t seed,
                                           int pe_order = 0) {
  if (t_data < 1) throw ArgumentError("collect_excited_data: T_data must be >= 1");
  if (amplitude < 0) throw ArgumentError("collect_excited_data: amplitude must be >= 0");
  PeReport last;
  for (int attempt = 0; attempt < 10; ++attempt) {
    std::mt19937_64 rng(seed + 0x9E3779B97F4A7C15ULL * static_cast<std::uint64_t>(attempt));
    std::uniform_real_distribution<double> dist(-amplitude, amplitude);
    auto draw = [&](Eigen::Index r, Eigen::Index c) {
      Eigen::MatrixXd m(r, c);
      for (Eigen::Index j = 0; j < c; ++j)
        for (Eigen::Index i = 0; i < r; ++i) m(i, j) = amplitude > 0 ? dist(rng) : 0.0;
      return m;
    };
    Eigen::VectorXd x0 = draw(sys.state_dim(), 1);
    Eigen::MatrixXd u = draw(sys.input_dim(), t_data);
    if (pe_order > 0) {
      last = check_pe(u, pe_order);
      if (!last.ok) continue;
    }
    return sys.simulate(x0, u);
  }
  throw DataError("collect_excited_data: excitation failed after 10 attempts; " + last.describe());
}

}  // namespace d3lmpc
