#pragma once

#include <algorithm>
#include <cstdint>
#include <queue>
#include <string>
#include <utility>
#include <vector>

#include "hicon/common.hpp"

namespace hicon {

enum class NodeKind : std::uint8_t { User, Item, Entity };

inline char kind_letter(NodeKind k) {
  switch (k) {
    case NodeKind::User: return 'u';
    case NodeKind::Item: return 'i';
    default: return 'e';
  }
}

struct NodeRef {
  NodeKind kind;
  int index;

  bool operator==(const NodeRef&) const = default;
  bool operator<(const NodeRef& o) const {
    if (kind != o.kind) return kind < o.kind;
    return index < o.index;
  }
};

// head/tail are indices into the shared item/entity space.
struct Triplet {
  int head;
  int relation;
  int tail;

  bool operator==(const Triplet&) const = default;
  bool operator<(const Triplet& o) const {
    if (head != o.head) return head < o.head;
    if (relation != o.relation) return relation < o.relation;
    return tail < o.tail;
  }
};

// User-item interactions with both adjacency directions kept as exact
// transposes of each other. Lists are sorted and deduplicated.
struct BipartiteGraph {
  int user_count = 0;
  int item_count = 0;
  std::vector<std::vector<int>> user_adjacency;
  std::vector<std::vector<int>> item_adjacency;

  static BipartiteGraph from_edges(int users, int items,
                                   const std::vector<std::pair<int, int>>& edges) {
    if (users < 0 || items < 0) throw ContractError("BipartiteGraph: negative node count");
    BipartiteGraph g;
    g.user_count = users;
    g.item_count = items;
    g.user_adjacency.resize(users);
    g.item_adjacency.resize(items);
    for (auto [u, i] : edges) {
      if (u < 0 || u >= users) {
        throw StructuralError("BipartiteGraph: user index " + std::to_string(u) + " out of range");
      }
      if (i < 0 || i >= items) {
        throw StructuralError("BipartiteGraph: item index " + std::to_string(i) + " out of range");
      }
      g.user_adjacency[u].push_back(i);
      g.item_adjacency[i].push_back(u);
    }
    for (auto& a : g.user_adjacency) {
      std::sort(a.begin(), a.end());
      a.erase(std::unique(a.begin(), a.end()), a.end());
    }
    for (auto& a : g.item_adjacency) {
      std::sort(a.begin(), a.end());
      a.erase(std::unique(a.begin(), a.end()), a.end());
    }
    return g;
  }

  long long interaction_count() const {
    long long n = 0;
    for (const auto& a : user_adjacency) n += static_cast<long long>(a.size());
    return n;
  }
};

// Directed triplet store over the shared item/entity index space. Items
// occupy [0, item_count); pure entities follow. Relations come in pairs:
// the relation at even ordinal 2k has its inverse at 2k+1, and the stored
// edge multiset is closed under (h, r, t) -> (t, inv(r), h).
struct KnowledgeGraph {
  int entity_count = 0;
  int item_count = 0;
  int relation_count = 0;  // always even
  std::vector<std::vector<std::pair<int, int>>> head_adjacency;  // (relation, tail)

  // Builds from forward triplets whose relation ordinals are in
  // [0, forward_relations); inverses are synthesized.
  static KnowledgeGraph from_triplets(int entity_count, int item_count, int forward_relations,
                                      const std::vector<Triplet>& triplets) {
    if (entity_count < 0 || item_count < 0 || item_count > entity_count) {
      throw ContractError("KnowledgeGraph: invalid entity/item counts");
    }
    KnowledgeGraph g;
    g.entity_count = entity_count;
    g.item_count = item_count;
    g.relation_count = 2 * forward_relations;
    g.head_adjacency.resize(entity_count);
    for (const Triplet& t : triplets) {
      if (t.head < 0 || t.head >= entity_count || t.tail < 0 || t.tail >= entity_count) {
        throw StructuralError("KnowledgeGraph: triplet node out of entity range: head " +
                              std::to_string(t.head) + " tail " + std::to_string(t.tail));
      }
      if (t.relation < 0 || t.relation >= forward_relations) {
        throw StructuralError("KnowledgeGraph: relation ordinal " + std::to_string(t.relation) +
                              " outside [0, " + std::to_string(forward_relations) + ")");
      }
      g.head_adjacency[t.head].emplace_back(2 * t.relation, t.tail);
      g.head_adjacency[t.tail].emplace_back(2 * t.relation + 1, t.head);
    }
    for (auto& a : g.head_adjacency) {
      std::sort(a.begin(), a.end());
      a.erase(std::unique(a.begin(), a.end()), a.end());
    }
    return g;
  }

  long long edge_count() const {
    long long n = 0;
    for (const auto& a : head_adjacency) n += static_cast<long long>(a.size());
    return n;
  }
};

inline int inverse_relation(int r) { return r ^ 1; }

// Merge of the bipartite graph and the knowledge graph. Items are shared
// between the item set and the entity set (low index range); interaction
// edges carry the reserved relation ordinal kg.relation_count in both
// directions.
struct UnifiedGraph {
  BipartiteGraph bipartite;
  KnowledgeGraph kg;
  int interaction_relation = 0;

  int user_count() const { return bipartite.user_count; }
  int item_count() const { return bipartite.item_count; }
  int entity_count() const { return kg.entity_count; }

  // Canonical node for an index in the shared item/entity space.
  NodeRef entity_node(int e) const {
    return NodeRef{e < item_count() ? NodeKind::Item : NodeKind::Entity, e};
  }

  // Global dense node ids: users first, then the item/entity space.
  int node_count() const { return user_count() + entity_count(); }
  int global_id(NodeRef n) const {
    return n.kind == NodeKind::User ? n.index : user_count() + n.index;
  }
  NodeRef from_global(int id) const {
    if (id < user_count()) return NodeRef{NodeKind::User, id};
    return entity_node(id - user_count());
  }

  bool valid(NodeRef n) const {
    if (n.index < 0) return false;
    switch (n.kind) {
      case NodeKind::User: return n.index < user_count();
      case NodeKind::Item: return n.index < item_count();
      case NodeKind::Entity: return n.index >= item_count() && n.index < entity_count();
    }
    return false;
  }
};

inline UnifiedGraph build_unified(BipartiteGraph bipartite, KnowledgeGraph kg) {
  if (kg.item_count != bipartite.item_count) {
    throw StructuralError("build_unified: bipartite item count " +
                          std::to_string(bipartite.item_count) + " != kg item range " +
                          std::to_string(kg.item_count));
  }
  if (bipartite.item_count > kg.entity_count) {
    throw StructuralError("build_unified: item index range " +
                          std::to_string(bipartite.item_count) + " exceeds entity range " +
                          std::to_string(kg.entity_count));
  }
  UnifiedGraph g;
  g.interaction_relation = kg.relation_count;
  g.bipartite = std::move(bipartite);
  g.kg = std::move(kg);
  return g;
}

// All out-edges of n as (relation, neighbor): interaction edges for users,
// interaction plus KG edges for items, KG edges for pure entities.
inline std::vector<std::pair<int, NodeRef>> typed_neighbors(const UnifiedGraph& g, NodeRef n) {
  if (!g.valid(n)) {
    throw StructuralError("typed_neighbors: invalid node " + std::string(1, kind_letter(n.kind)) +
                          std::to_string(n.index));
  }
  std::vector<std::pair<int, NodeRef>> out;
  if (n.kind == NodeKind::User) {
    for (int i : g.bipartite.user_adjacency[n.index]) {
      out.emplace_back(g.interaction_relation, NodeRef{NodeKind::Item, i});
    }
    return out;
  }
  if (n.kind == NodeKind::Item) {
    for (int u : g.bipartite.item_adjacency[n.index]) {
      out.emplace_back(g.interaction_relation, NodeRef{NodeKind::User, u});
    }
  }
  for (auto [r, t] : g.kg.head_adjacency[n.index]) {
    out.emplace_back(r, g.entity_node(t));
  }
  return out;
}

enum class HopCountMode {
  Distinct,  // nodes at shortest-path distance exactly k (default)
  Walks,     // endpoints of length-k walks, counted with multiplicity
};

// Per-hop average reachable-node counts over users, Fig-1a style.
inline std::vector<double> hop_neighbor_stats(const UnifiedGraph& g, int max_hop,
                                              HopCountMode mode = HopCountMode::Distinct) {
  if (max_hop < 1) throw ContractError("hop_neighbor_stats: max_hop must be >= 1");
  const int n = g.node_count();
  std::vector<std::vector<int>> adj(n);
  for (int id = 0; id < n; ++id) {
    for (auto& [r, nb] : typed_neighbors(g, g.from_global(id))) {
      adj[id].push_back(g.global_id(nb));
    }
    std::sort(adj[id].begin(), adj[id].end());
    if (mode == HopCountMode::Distinct) {
      adj[id].erase(std::unique(adj[id].begin(), adj[id].end()), adj[id].end());
    }
  }

  std::vector<double> totals(max_hop, 0.0);
  const int users = g.user_count();
  if (users == 0) return totals;

  if (mode == HopCountMode::Distinct) {
    std::vector<int> dist(n);
    for (int u = 0; u < users; ++u) {
      std::fill(dist.begin(), dist.end(), -1);
      std::queue<int> q;
      dist[u] = 0;
      q.push(u);
      while (!q.empty()) {
        int x = q.front();
        q.pop();
        if (dist[x] >= max_hop) continue;
        for (int nb : adj[x]) {
          if (dist[nb] < 0) {
            dist[nb] = dist[x] + 1;
            totals[dist[nb] - 1] += 1.0;
            q.push(nb);
          }
        }
      }
    }
  } else {
    std::vector<double> w(n), next(n);
    for (int u = 0; u < users; ++u) {
      std::fill(w.begin(), w.end(), 0.0);
      w[u] = 1.0;
      for (int hop = 1; hop <= max_hop; ++hop) {
        std::fill(next.begin(), next.end(), 0.0);
        for (int x = 0; x < n; ++x) {
          if (w[x] == 0.0) continue;
          for (int nb : adj[x]) next[nb] += w[x];
        }
        std::swap(w, next);
        double total = 0.0;
        for (double x : w) total += x;
        totals[hop - 1] += total;
      }
    }
  }
  for (double& t : totals) t /= static_cast<double>(users);
  return totals;
}

}  // namespace hicon
