#pragma once

#include <algorithm>
#include <cstddef>
#include <deque>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "d3lmpc/errors.hpp"

namespace d3lmpc {

using NodeSet = std::vector<int>;  // sorted, unique, 0-based

/// Directed interconnection graph. An edge (i <- j) means subsystem j enters
/// the dynamics of subsystem i, i.e. [A]_ij may be nonzero. Self loops are
/// implicit. All pairwise hop distances are computed once at construction, so
/// the object is immutable and safe to share across agents.
class Topology {
 public:
  static constexpr int kUnreachable = -1;

  Topology() = default;

  Topology(int node_count, const std::vector<std::pair<int, int>>& edges,
           std::vector<int> state_dims, std::vector<int> input_dims)
      : n_(node_count), incoming_(static_cast<std::size_t>(std::max(node_count, 0))),
        outgoing_(static_cast<std::size_t>(std::max(node_count, 0))),
        state_dims_(std::move(state_dims)), input_dims_(std::move(input_dims)) {
    if (n_ < 1) throw ArgumentError("topology: node_count must be positive");
    if (static_cast<int>(state_dims_.size()) != n_ || static_cast<int>(input_dims_.size()) != n_)
      throw ArgumentError("topology: state_dims/input_dims must have one entry per node");
    for (int i = 0; i < n_; ++i) {
      if (state_dims_[i] < 1) throw ArgumentError("topology: state_dims must be >= 1");
      if (input_dims_[i] < 0) throw ArgumentError("topology: input_dims must be >= 0");
    }
    std::vector<std::set<int>> in(n_), out(n_);
    for (auto [i, j] : edges) {
      check_node(i);
      check_node(j);
      if (i == j) continue;
      in[i].insert(j);
      out[j].insert(i);
    }
    for (int i = 0; i < n_; ++i) {
      incoming_[i].assign(in[i].begin(), in[i].end());
      outgoing_[i].assign(out[i].begin(), out[i].end());
    }
    dist_.assign(static_cast<std::size_t>(n_) * n_, kUnreachable);
    // BFS from every node along outgoing edges gives dist(src -> *).
    for (int src = 0; src < n_; ++src) {
      std::deque<int> queue{src};
      dist_[idx(src, src)] = 0;
      while (!queue.empty()) {
        int v = queue.front();
        queue.pop_front();
        for (int w : outgoing_[v]) {
          if (dist_[idx(src, w)] == kUnreachable) {
            dist_[idx(src, w)] = dist_[idx(src, v)] + 1;
            queue.push_back(w);
          }
        }
      }
    }
  }

  /// Bidirectional chain 0 - 1 - ... - (n-1).
  static Topology chain(int n, int state_dim = 2, int input_dim = 1) {
    if (n < 1) throw ArgumentError("chain: n must be >= 1");
    std::vector<std::pair<int, int>> edges;
    for (int i = 0; i + 1 < n; ++i) {
      edges.emplace_back(i, i + 1);
      edges.emplace_back(i + 1, i);
    }
    return Topology(n, edges, std::vector<int>(n, state_dim), std::vector<int>(n, input_dim));
  }

  int node_count() const { return n_; }
  int state_dim(int i) const { check_node(i); return state_dims_[i]; }
  int input_dim(int i) const { check_node(i); return input_dims_[i]; }
  const std::vector<int>& state_dims() const { return state_dims_; }
  const std::vector<int>& input_dims() const { return input_dims_; }
  const NodeSet& incoming(int i) const { check_node(i); return incoming_[i]; }
  const NodeSet& outgoing(int i) const { check_node(i); return outgoing_[i]; }

  int total_state_dim() const { return sum(state_dims_); }
  int total_input_dim() const { return sum(input_dims_); }
  int state_dim(const NodeSet& s) const { int r = 0; for (int v : s) r += state_dim(v); return r; }
  int input_dim(const NodeSet& s) const { int r = 0; for (int v : s) r += input_dim(v); return r; }

  /// Offset of node i's block in the stacked global state / input vector.
  int state_offset(int i) const { check_node(i); return prefix(state_dims_, i); }
  int input_offset(int i) const { check_node(i); return prefix(input_dims_, i); }

  /// Hops on the shortest path from `from` to `to`, or kUnreachable.
  int dist(int from, int to) const {
    check_node(from);
    check_node(to);
    return dist_[idx(from, to)];
  }

  /// { j : dist(j -> i) <= d }
  NodeSet in_set(int i, int d) const {
    check_node(i);
    if (d < 0) throw ArgumentError("in_set: d must be >= 0");
    NodeSet r;
    for (int j = 0; j < n_; ++j) {
      int h = dist_[idx(j, i)];
      if (h != kUnreachable && h <= d) r.push_back(j);
    }
    return r;
  }

  /// { j : dist(i -> j) <= d }
  NodeSet out_set(int i, int d) const {
    check_node(i);
    if (d < 0) throw ArgumentError("out_set: d must be >= 0");
    NodeSet r;
    for (int j = 0; j < n_; ++j) {
      int h = dist_[idx(i, j)];
      if (h != kUnreachable && h <= d) r.push_back(j);
    }
    return r;
  }

  /// Complement of in_set(i, d).
  NodeSet ext_set(int i, int d) const {
    NodeSet in = in_set(i, d), r;
    for (int j = 0; j < n_; ++j)
      if (!std::binary_search(in.begin(), in.end(), j)) r.push_back(j);
    return r;
  }

  /// Nodes at incoming distance exactly d (d >= 1).
  NodeSet ring_set(int i, int d) const {
    check_node(i);
    if (d < 1) throw ArgumentError("ring_set: d must be >= 1 (use in_set for d = 0)");
    NodeSet r;
    for (int j = 0; j < n_; ++j)
      if (dist_[idx(j, i)] == d) r.push_back(j);
    return r;
  }

  /// Longest finite shortest-path length.
  int diameter() const {
    int best = 0;
    for (int h : dist_) best = std::max(best, h);
    return best;
  }

  bool symmetric() const {
    for (int i = 0; i < n_; ++i)
      if (incoming_[i] != outgoing_[i]) return false;
    return true;
  }

  // JSON uses 1-based node labels; an edge [i, j] means j influences i.
  nlohmann::json to_json() const {
    nlohmann::json edges = nlohmann::json::array();
    for (int i = 0; i < n_; ++i)
      for (int j : incoming_[i]) edges.push_back({i + 1, j + 1});
    return {{"nodes", n_}, {"edges", edges}, {"state_dims", state_dims_}, {"input_dims", input_dims_}};
  }

  static Topology from_json(const nlohmann::json& doc) {
    try {
      int n = doc.at("nodes").get<int>();
      std::vector<std::pair<int, int>> edges;
      for (const auto& e : doc.at("edges")) {
        if (!e.is_array() || e.size() != 2) throw ArgumentError("topology json: edge must be [i, j]");
        edges.emplace_back(e[0].get<int>() - 1, e[1].get<int>() - 1);
      }
      auto sd = doc.contains("state_dims") ? doc.at("state_dims").get<std::vector<int>>() : std::vector<int>(n, 1);
      auto id = doc.contains("input_dims") ? doc.at("input_dims").get<std::vector<int>>() : std::vector<int>(n, 1);
      return Topology(n, edges, std::move(sd), std::move(id));
    } catch (const nlohmann::json::exception& e) {
      throw ArgumentError(std::string("topology json: ") + e.what());
    }
  }

  bool operator==(const Topology& o) const {
    return n_ == o.n_ && incoming_ == o.incoming_ && state_dims_ == o.state_dims_ && input_dims_ == o.input_dims_;
  }

 private:
  std::size_t idx(int from, int to) const { return static_cast<std::size_t>(from) * n_ + to; }
  void check_node(int i) const {
    if (i < 0 || i >= n_) throw ArgumentError("invalid node index " + std::to_string(i));
  }
  static int sum(const std::vector<int>& v) { int s = 0; for (int x : v) s += x; return s; }
  static int prefix(const std::vector<int>& v, int i) { int s = 0; for (int k = 0; k < i; ++k) s += v[k]; return s; }

  int n_ = 0;
  std::vector<NodeSet> incoming_;
  std::vector<NodeSet> outgoing_;
  std::vector<int> state_dims_;
  std::vector<int> input_dims_;
  std::vector<int> dist_;  // dist_[from * n + to]
};

inline NodeSet set_union(const NodeSet& a, const NodeSet& b) {
  NodeSet r;
  std::set_union(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(r));
  return r;
}

inline NodeSet set_difference(const NodeSet& a, const NodeSet& b) {
  NodeSet r;
  std::set_difference(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(r));
  return r;
}

inline NodeSet set_intersection(const NodeSet& a, const NodeSet& b) {
  NodeSet r;
  std::set_intersection(a.begin(), a.end(), b.begin(), b.end(), std::back_inserter(r));
  return r;
}

inline bool contains(const NodeSet& s, int v) { return std::binary_search(s.begin(), s.end(), v); }

}  // namespace d3lmpc
