#pragma once

#include <algorithm>
#include <cstddef>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "hicon/common.hpp"
#include "hicon/graph.hpp"

namespace hicon {

// A node-kind sequence such as UIEIU. Parsing validates that every
// consecutive kind pair admits at least one edge category in the unified
// graph: U-I via the interaction relation, and I-E / E-I / I-I / E-E via KG
// triplets. U-U and U-E pairs have no edge category.
struct MetaPath {
  std::string name;
  std::vector<NodeKind> type_sequence;

  int length() const { return static_cast<int>(type_sequence.size()) - 1; }
};

namespace detail {

inline bool kinds_adjacent(NodeKind a, NodeKind b) {
  const bool a_user = a == NodeKind::User;
  const bool b_user = b == NodeKind::User;
  if (a_user && b_user) return false;
  if (a_user) return b == NodeKind::Item;
  if (b_user) return a == NodeKind::Item;
  return true;  // item/entity pairs all reachable through KG triplets
}

}  // namespace detail

inline MetaPath parse_metapath(const std::string& spec) {
  if (spec.size() < 2) {
    throw ParseError("metapath '" + spec + "': length < 2");
  }
  MetaPath m;
  m.name = spec;
  m.type_sequence.reserve(spec.size());
  for (std::size_t i = 0; i < spec.size(); ++i) {
    NodeKind k;
    switch (spec[i]) {
      case 'U': k = NodeKind::User; break;
      case 'I': k = NodeKind::Item; break;
      case 'E': k = NodeKind::Entity; break;
      default:
        throw ParseError("metapath '" + spec + "': unknown kind '" + std::string(1, spec[i]) +
                         "' at position " + std::to_string(i + 1));
    }
    if (!m.type_sequence.empty() && !detail::kinds_adjacent(m.type_sequence.back(), k)) {
      throw ParseError("metapath '" + spec + "': no admissible edge between positions " +
                       std::to_string(i) + " and " + std::to_string(i + 1));
    }
    m.type_sequence.push_back(k);
  }
  return m;
}

struct PathInstance {
  std::vector<NodeRef> nodes;

  bool operator==(const PathInstance&) const = default;
  bool operator<(const PathInstance& o) const { return nodes < o.nodes; }
};

inline constexpr std::size_t kDefaultInstanceBudget = 10'000'000;

namespace detail {

// Distinct neighbors of `from` with the requested kind, ascending by index.
inline std::vector<NodeRef> neighbors_of_kind(const UnifiedGraph& g, NodeRef from, NodeKind kind) {
  std::vector<NodeRef> out;
  if (kind == NodeKind::User) {
    if (from.kind != NodeKind::Item) return out;
    for (int u : g.bipartite.item_adjacency[from.index]) out.push_back({NodeKind::User, u});
    return out;  // already sorted, unique
  }
  if (from.kind == NodeKind::User) {
    if (kind != NodeKind::Item) return out;
    for (int i : g.bipartite.user_adjacency[from.index]) out.push_back({NodeKind::Item, i});
    return out;
  }
  // item/entity source stepping into the item/entity space via KG
  int last = -1;
  for (auto [r, t] : g.kg.head_adjacency[from.index]) {
    if (t == last) continue;  // adjacency sorted by (relation, tail); dedup via set below
    NodeRef nb = g.entity_node(t);
    if (nb.kind == kind) out.push_back(nb);
    last = -2;  // sorted by relation first, so duplicates are not adjacent; dedup after
  }
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

template <typename Visit>
void walk_instances(const UnifiedGraph& g, const MetaPath& m, NodeRef anchor,
                    std::size_t budget, Visit&& visit) {
  if (anchor.kind != m.type_sequence.front()) {
    throw ContractError("enumerate_instances: anchor kind does not match metapath '" + m.name +
                        "'");
  }
  if (!g.valid(anchor)) {
    throw StructuralError("enumerate_instances: invalid anchor index " +
                          std::to_string(anchor.index));
  }
  std::vector<NodeRef> walk{anchor};
  std::size_t expansions = 0;
  // Depth-first over kind-matching neighbors in ascending index order.
  // Node revisits are allowed; stepping straight back to the previous node
  // (re-traversing the edge just used) is not.
  auto dfs = [&](auto&& self, std::size_t depth) -> void {
    if (depth + 1 == m.type_sequence.size()) {
      visit(walk);
      return;
    }
    for (NodeRef nb : neighbors_of_kind(g, walk.back(), m.type_sequence[depth + 1])) {
      if (depth > 0 && nb == walk[depth - 1]) continue;  // no instant backtrack
      if (++expansions > budget) {
        throw ResourceError("metapath '" + m.name + "': instance budget " +
                            std::to_string(budget) + " exceeded");
      }
      walk.push_back(nb);
      self(self, depth + 1);
      walk.pop_back();
    }
  };
  dfs(dfs, 0);
}

}  // namespace detail

// All walks from `anchor` matching the kind sequence, in lexicographic node
// order. Aborts with a resource error past `budget` walk extensions.
inline std::vector<PathInstance> enumerate_instances(const UnifiedGraph& g, const MetaPath& m,
                                                     NodeRef anchor,
                                                     std::size_t budget = kDefaultInstanceBudget) {
  std::vector<PathInstance> out;
  detail::walk_instances(g, m, anchor, budget,
                         [&](const std::vector<NodeRef>& walk) { out.push_back({walk}); });
  return out;
}

// Union of all path instances of one meta-path: undirected deduplicated
// edges over global node ids, with symmetric sorted neighbor lists.
struct MetaPathSubgraph {
  MetaPath metapath;
  int node_count = 0;
  std::vector<std::pair<int, int>> edges;  // a < b, sorted
  std::vector<std::vector<int>> neighbor_lists;
  std::vector<int> degrees;

  long long edge_count() const { return static_cast<long long>(edges.size()); }
};

inline MetaPathSubgraph build_subgraph(const UnifiedGraph& g, const MetaPath& m,
                                       std::vector<NodeRef> anchors = {},
                                       std::size_t budget = kDefaultInstanceBudget) {
  if (anchors.empty()) {
    const NodeKind k = m.type_sequence.front();
    int count = 0;
    switch (k) {
      case NodeKind::User: count = g.user_count(); break;
      case NodeKind::Item: count = g.item_count(); break;
      case NodeKind::Entity: count = g.entity_count(); break;
    }
    const int lo = k == NodeKind::Entity ? g.item_count() : 0;
    for (int i = lo; i < count; ++i) anchors.push_back({k, i});
  }
  std::set<std::pair<int, int>> edge_set;
  for (NodeRef anchor : anchors) {
    detail::walk_instances(g, m, anchor, budget, [&](const std::vector<NodeRef>& walk) {
      for (std::size_t s = 0; s + 1 < walk.size(); ++s) {
        int a = g.global_id(walk[s]);
        int b = g.global_id(walk[s + 1]);
        edge_set.insert({std::min(a, b), std::max(a, b)});
      }
    });
  }
  MetaPathSubgraph sub;
  sub.metapath = m;
  sub.node_count = g.node_count();
  sub.edges.assign(edge_set.begin(), edge_set.end());
  sub.neighbor_lists.resize(sub.node_count);
  for (auto [a, b] : sub.edges) {
    sub.neighbor_lists[a].push_back(b);
    sub.neighbor_lists[b].push_back(a);
  }
  for (auto& nl : sub.neighbor_lists) std::sort(nl.begin(), nl.end());
  sub.degrees.resize(sub.node_count);
  for (int i = 0; i < sub.node_count; ++i) {
    sub.degrees[i] = static_cast<int>(sub.neighbor_lists[i].size());
  }
  return sub;
}

}  // namespace hicon
