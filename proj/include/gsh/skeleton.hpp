#pragma once

// Three-scale human skeletal hierarchy: 16 joints pooled pairwise to 8 and
// again to 4. Coarse edge sets are the quotients of the fine edges under the
// pair maps; every scale carries a symmetric self-loop-normalized adjacency
// shared by all graph convolution kinds.

#include <algorithm>
#include <array>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "gsh/errors.hpp"
#include "gsh/tensor.hpp"

namespace gsh {

using Edge = std::pair<std::size_t, std::size_t>;
using EdgeList = std::vector<Edge>;

/// Disjoint fine-node pairs in coarse-node order.
struct GroupMap {
  GroupPairs pairs;
};

struct GraphScale {
  std::size_t node_count = 0;
  EdgeList edges;                       // unordered pairs, no self-loops
  Tensor adjacency_normalized;          // [K,K], D^-1/2 (A+I) D^-1/2
  std::vector<std::uint8_t> support;    // binary A+I, for masked softmax
};

struct SkeletonSpec {
  std::array<GraphScale, 3> scales;     // 16, 8, 4 nodes
  std::array<GroupMap, 2> pool_maps;    // 16->8, 8->4
  std::vector<std::string> joint_names; // 16 labels

  const GraphScale& fine() const { return scales[0]; }
  const GraphScale& mid() const { return scales[1]; }
  const GraphScale& coarse() const { return scales[2]; }
};

namespace detail {

inline Edge canonical_edge(std::size_t a, std::size_t b) {
  return a < b ? Edge{a, b} : Edge{b, a};
}

inline EdgeList canonicalize(EdgeList edges) {
  for (auto& e : edges) e = canonical_edge(e.first, e.second);
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

}  // namespace detail

/// Symmetric self-loop normalization of a binary adjacency.
inline Tensor normalize_adjacency(const EdgeList& edges,
                                  std::size_t node_count) {
  std::vector<double> a(node_count * node_count, 0.0);
  for (std::size_t i = 0; i < node_count; ++i) a[i * node_count + i] = 1.0;
  for (const auto& [u, v] : edges) {
    if (u >= node_count || v >= node_count)
      throw ValidationError("normalize_adjacency: edge (" + std::to_string(u) +
                            "," + std::to_string(v) + ") out of range for " +
                            std::to_string(node_count) + " nodes");
    if (u == v)
      throw ValidationError("normalize_adjacency: self-loop at node " +
                            std::to_string(u));
    a[u * node_count + v] = 1.0;
    a[v * node_count + u] = 1.0;
  }
  std::vector<double> inv_sqrt_deg(node_count);
  for (std::size_t i = 0; i < node_count; ++i) {
    double deg = 0.0;
    for (std::size_t j = 0; j < node_count; ++j) deg += a[i * node_count + j];
    inv_sqrt_deg[i] = 1.0 / std::sqrt(deg);
  }
  for (std::size_t i = 0; i < node_count; ++i)
    for (std::size_t j = 0; j < node_count; ++j)
      a[i * node_count + j] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
  return Tensor::from({node_count, node_count}, std::move(a));
}

/// Coarse nodes g != h are adjacent iff some fine edge crosses between their
/// member sets; edges inside a group vanish.
inline EdgeList quotient_graph(const EdgeList& fine_edges,
                               const GroupMap& map) {
  const std::size_t fine_count = map.pairs.size() * 2;
  std::vector<std::size_t> group_of(fine_count, fine_count);
  for (std::size_t g = 0; g < map.pairs.size(); ++g) {
    const auto& [a, b] = map.pairs[g];
    if (a >= fine_count || b >= fine_count || a == b ||
        group_of[a] != fine_count || group_of[b] != fine_count)
      throw ValidationError("quotient_graph: group map is not a pairing");
    group_of[a] = g;
    group_of[b] = g;
  }
  std::set<Edge> coarse;
  for (const auto& [u, v] : fine_edges) {
    if (u >= fine_count || v >= fine_count)
      throw ValidationError("quotient_graph: edge index out of range");
    const std::size_t gu = group_of[u], gv = group_of[v];
    if (gu != gv) coarse.insert(detail::canonical_edge(gu, gv));
  }
  return EdgeList(coarse.begin(), coarse.end());
}

inline GraphScale make_graph_scale(std::size_t node_count, EdgeList edges) {
  GraphScale s;
  s.node_count = node_count;
  s.edges = detail::canonicalize(std::move(edges));
  s.adjacency_normalized = normalize_adjacency(s.edges, node_count);
  s.support.assign(node_count * node_count, 0);
  for (std::size_t i = 0; i < node_count; ++i)
    s.support[i * node_count + i] = 1;
  for (const auto& [u, v] : s.edges) {
    s.support[u * node_count + v] = 1;
    s.support[v * node_count + u] = 1;
  }
  return s;
}

/// Assembles the full hierarchy from the fine scale: coarse edges are derived
/// with quotient_graph, never supplied by hand.
inline SkeletonSpec build_skeleton(std::vector<std::string> joint_names,
                                   EdgeList fine_edges, GroupMap map_16_to_8,
                                   GroupMap map_8_to_4) {
  SkeletonSpec spec;
  spec.joint_names = std::move(joint_names);
  const std::size_t k = spec.joint_names.size();
  spec.scales[0] = make_graph_scale(k, std::move(fine_edges));
  spec.pool_maps[0] = std::move(map_16_to_8);
  spec.pool_maps[1] = std::move(map_8_to_4);
  spec.scales[1] = make_graph_scale(
      spec.pool_maps[0].pairs.size(),
      quotient_graph(spec.scales[0].edges, spec.pool_maps[0]));
  spec.scales[2] = make_graph_scale(
      spec.pool_maps[1].pairs.size(),
      quotient_graph(spec.scales[1].edges, spec.pool_maps[1]));
  return spec;
}

// Default hierarchy: a standard 16-joint Human3.6M-style skeleton. The pair
// maps fuse kinematically coherent joints (limb segments, torso halves) and
// stay configurable through the skeleton config file.
inline SkeletonSpec build_default_skeleton() {
  std::vector<std::string> names = {
      "Pelvis", "RHip",      "RKnee",  "RAnkle", "LHip",      "LKnee",
      "LAnkle", "Spine",     "Thorax", "Head",   "LShoulder", "LElbow",
      "LWrist", "RShoulder", "RElbow", "RWrist"};
  EdgeList edges = {{0, 1},  {1, 2},   {2, 3},   {0, 4},  {4, 5},
                    {5, 6},  {0, 7},   {7, 8},   {8, 9},  {8, 10},
                    {10, 11}, {11, 12}, {8, 13}, {13, 14}, {14, 15}};
  GroupMap pool16_8{{{0, 7},    // lower torso
                     {8, 9},    // upper torso
                     {1, 4},    // hips
                     {2, 3},    // right lower leg
                     {5, 6},    // left lower leg
                     {10, 13},  // shoulders
                     {11, 12},  // left arm
                     {14, 15}}};  // right arm
  GroupMap pool8_4{{{0, 2},   // lower torso + hips
                    {1, 5},   // upper torso + shoulders
                    {3, 4},   // legs
                    {6, 7}}};  // arms
  return build_skeleton(std::move(names), std::move(edges),
                        std::move(pool16_8), std::move(pool8_4));
}

namespace detail {

inline bool connected(std::size_t node_count, const EdgeList& edges) {
  if (node_count == 0) return true;
  std::vector<std::size_t> parent(node_count);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<std::size_t(std::size_t)> find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  std::size_t components = node_count;
  for (const auto& [u, v] : edges) {
    const std::size_t ru = find(u), rv = find(v);
    if (ru != rv) {
      parent[ru] = rv;
      --components;
    }
  }
  return components == 1;
}

inline void check_group_map(const GroupMap& map, std::size_t fine_count,
                            const std::string& label,
                            std::vector<std::string>& out) {
  if (map.pairs.size() * 2 != fine_count) {
    out.push_back(label + ": " + std::to_string(map.pairs.size()) +
                  " pairs cannot cover " + std::to_string(fine_count) +
                  " nodes");
    return;
  }
  std::vector<std::size_t> uses(fine_count, 0);
  for (const auto& [a, b] : map.pairs) {
    if (a >= fine_count || b >= fine_count) {
      out.push_back(label + ": index out of range");
      return;
    }
    ++uses[a];
    ++uses[b];
    if (a == b) out.push_back(label + ": degenerate pair (" +
                              std::to_string(a) + "," + std::to_string(b) + ")");
  }
  for (std::size_t i = 0; i < fine_count; ++i) {
    if (uses[i] > 1) {
      out.push_back(label + ": non-disjoint groups");
      return;
    }
    if (uses[i] == 0) {
      out.push_back(label + ": node " + std::to_string(i) + " uncovered");
      return;
    }
  }
}

}  // namespace detail

/// Checks every SkeletonSpec invariant; returns all violations, not just the
/// first. An empty result means the spec is valid.
inline std::vector<std::string> validate_skeleton(const SkeletonSpec& spec) {
  std::vector<std::string> v;
  const std::array<std::size_t, 3> want_counts = {16, 8, 4};
  for (std::size_t s = 0; s < 3; ++s) {
    if (spec.scales[s].node_count != want_counts[s])
      v.push_back("scale " + std::to_string(s) + ": expected " +
                  std::to_string(want_counts[s]) + " nodes, got " +
                  std::to_string(spec.scales[s].node_count));
    for (const auto& [a, b] : spec.scales[s].edges) {
      if (a == b)
        v.push_back("scale " + std::to_string(s) + ": self-loop at node " +
                    std::to_string(a));
      if (a >= spec.scales[s].node_count || b >= spec.scales[s].node_count)
        v.push_back("scale " + std::to_string(s) + ": edge (" +
                    std::to_string(a) + "," + std::to_string(b) +
                    ") out of range");
    }
    if (!detail::connected(spec.scales[s].node_count, spec.scales[s].edges))
      v.push_back("scale " + std::to_string(s) + ": graph is not connected");
  }
  if (spec.joint_names.size() != spec.scales[0].node_count)
    v.push_back("joint_names: expected " +
                std::to_string(spec.scales[0].node_count) + " labels, got " +
                std::to_string(spec.joint_names.size()));

  detail::check_group_map(spec.pool_maps[0], spec.scales[0].node_count,
                          "pool map 16->8", v);
  detail::check_group_map(spec.pool_maps[1], spec.scales[1].node_count,
                          "pool map 8->4", v);

  // Coarse edge sets must equal the quotient of the finer scale.
  for (std::size_t m = 0; m < 2; ++m) {
    if (spec.pool_maps[m].pairs.size() * 2 != spec.scales[m].node_count)
      continue;  // already reported above
    EdgeList want;
    try {
      want = quotient_graph(spec.scales[m].edges, spec.pool_maps[m]);
    } catch (const ValidationError&) {
      continue;
    }
    const EdgeList got = detail::canonicalize(spec.scales[m + 1].edges);
    for (const auto& e : got)
      if (!std::binary_search(want.begin(), want.end(), e))
        v.push_back("scale " + std::to_string(m + 1) + ": edge (" +
                    std::to_string(e.first) + "," + std::to_string(e.second) +
                    ") is not in the quotient of scale " + std::to_string(m));
    for (const auto& e : want)
      if (!std::binary_search(got.begin(), got.end(), e))
        v.push_back("scale " + std::to_string(m + 1) + ": missing quotient edge (" +
                    std::to_string(e.first) + "," + std::to_string(e.second) +
                    ")");
  }
  return v;
}

/// FNV-1a over the canonical structure; identifies a skeleton in model files.
inline std::uint64_t skeleton_hash(const SkeletonSpec& spec) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto fold = [&h](std::uint64_t v) {
    for (int byte = 0; byte < 8; ++byte) {
      h ^= (v >> (8 * byte)) & 0xff;
      h *= 0x100000001b3ull;
    }
  };
  for (const auto& name : spec.joint_names) {
    for (unsigned char c : name) {
      h ^= c;
      h *= 0x100000001b3ull;
    }
    fold(0x1f);
  }
  for (const auto& scale : spec.scales) {
    fold(scale.node_count);
    for (const auto& [a, b] : detail::canonicalize(scale.edges)) {
      fold(a);
      fold(b);
    }
  }
  for (const auto& map : spec.pool_maps)
    for (const auto& [a, b] : map.pairs) {
      fold(a);
      fold(b);
    }
  return h;
}

// --------------------------------------------------------------------------
// Config file (JSON): joint names, fine edge list, the two pair maps.
// --------------------------------------------------------------------------

inline nlohmann::json skeleton_to_json(const SkeletonSpec& spec) {
  nlohmann::json j;
  j["joint_names"] = spec.joint_names;
  auto edges = nlohmann::json::array();
  for (const auto& [a, b] : spec.fine().edges)
    edges.push_back(nlohmann::json::array({a, b}));
  j["edges"] = std::move(edges);
  auto dump_map = [](const GroupMap& m) {
    auto arr = nlohmann::json::array();
    for (const auto& [a, b] : m.pairs)
      arr.push_back(nlohmann::json::array({a, b}));
    return arr;
  };
  j["pool_16_to_8"] = dump_map(spec.pool_maps[0]);
  j["pool_8_to_4"] = dump_map(spec.pool_maps[1]);
  return j;
}

inline SkeletonSpec skeleton_from_json(const nlohmann::json& j) {
  try {
    std::vector<std::string> names =
        j.at("joint_names").get<std::vector<std::string>>();
    auto parse_pairs = [&](const char* key) {
      GroupPairs pairs;
      for (const auto& e : j.at(key))
        pairs.emplace_back(e.at(0).get<std::size_t>(),
                           e.at(1).get<std::size_t>());
      return pairs;
    };
    EdgeList edges;
    for (const auto& e : j.at("edges"))
      edges.emplace_back(e.at(0).get<std::size_t>(),
                         e.at(1).get<std::size_t>());
    SkeletonSpec spec =
        build_skeleton(std::move(names), std::move(edges),
                       GroupMap{parse_pairs("pool_16_to_8")},
                       GroupMap{parse_pairs("pool_8_to_4")});
    auto violations = validate_skeleton(spec);
    if (!violations.empty()) {
      std::ostringstream os;
      os << "invalid skeleton config (" << violations.size() << " violations):";
      for (const auto& m : violations) os << "\n  - " << m;
      throw ValidationError(os.str());
    }
    return spec;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("skeleton config: ") + e.what());
  }
}

inline SkeletonSpec load_skeleton(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError(IoErrorCode::io_failure,
                         "cannot open skeleton config " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("skeleton config " + path + ": " + e.what());
  }
  return skeleton_from_json(j);
}

inline void save_skeleton(const SkeletonSpec& spec, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError(IoErrorCode::io_failure,
                          "cannot write skeleton config " + path);
  out << skeleton_to_json(spec).dump(2) << "\n";
}

}  // namespace gsh
