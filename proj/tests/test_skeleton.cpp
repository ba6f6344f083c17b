#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <set>

#include "gsh/skeleton.hpp"

using namespace gsh;

TEST_CASE("default skeleton has the 16/8/4 hierarchy", "[skeleton]") {
  auto spec = build_default_skeleton();
  REQUIRE(spec.scales[0].node_count == 16);
  REQUIRE(spec.scales[1].node_count == 8);
  REQUIRE(spec.scales[2].node_count == 4);
  REQUIRE(spec.fine().edges.size() == 15);  // tree over 16 nodes
  REQUIRE(spec.mid().edges.size() == 7);    // quotient stays a tree
  REQUIRE(spec.coarse().edges.size() == 3);
  REQUIRE(validate_skeleton(spec).empty());
}

TEST_CASE("disconnected scales are reported", "[skeleton]") {
  auto spec = build_default_skeleton();
  auto broken = spec;
  broken.scales[1].edges.clear();
  auto violations = validate_skeleton(broken);
  bool mentioned = false;
  for (const auto& v : violations)
    if (v.find("not connected") != std::string::npos) mentioned = true;
  REQUIRE(mentioned);
}

TEST_CASE("pool maps compose into four blocks of four", "[skeleton]") {
  auto spec = build_default_skeleton();
  std::vector<std::set<std::size_t>> blocks(4);
  for (std::size_t g4 = 0; g4 < 4; ++g4) {
    for (std::size_t mid : {spec.pool_maps[1].pairs[g4].first,
                            spec.pool_maps[1].pairs[g4].second}) {
      blocks[g4].insert(spec.pool_maps[0].pairs[mid].first);
      blocks[g4].insert(spec.pool_maps[0].pairs[mid].second);
    }
  }
  std::set<std::size_t> all;
  for (const auto& b : blocks) {
    REQUIRE(b.size() == 4);
    all.insert(b.begin(), b.end());
  }
  REQUIRE(all.size() == 16);
}

TEST_CASE("normalize_adjacency hand-computed cases", "[skeleton]") {
  auto two = normalize_adjacency({{0, 1}}, 2);
  for (double v : two.data()) REQUIRE(v == Catch::Approx(0.5));

  auto lone = normalize_adjacency({}, 1);
  REQUIRE(lone.data() == std::vector<double>{1.0});

  REQUIRE_THROWS_AS(normalize_adjacency({{0, 3}}, 2), ValidationError);
  REQUIRE_THROWS_AS(normalize_adjacency({{1, 1}}, 2), ValidationError);
}

TEST_CASE("normalized adjacency is symmetric with positive diagonal", "[skeleton]") {
  auto spec = build_default_skeleton();
  for (const auto& scale : spec.scales) {
    const auto& a = scale.adjacency_normalized;
    const std::size_t k = scale.node_count;
    for (std::size_t i = 0; i < k; ++i) {
      REQUIRE(a.at({i, i}) > 0.0);
      for (std::size_t j = 0; j < k; ++j) {
        REQUIRE(a.at({i, j}) == a.at({j, i}));
        REQUIRE(a.at({i, j}) >= 0.0);
      }
    }
  }
}

TEST_CASE("quotient_graph crossing rules", "[skeleton]") {
  // path a-b-c-d, pairs {a,b},{c,d} -> one coarse edge
  EdgeList path = {{0, 1}, {1, 2}, {2, 3}};
  auto q = quotient_graph(path, GroupMap{{{0, 1}, {2, 3}}});
  REQUIRE(q == EdgeList{{0, 1}});

  // edges only inside groups vanish
  EdgeList inner = {{0, 1}, {2, 3}};
  REQUIRE(quotient_graph(inner, GroupMap{{{0, 1}, {2, 3}}}).empty());
}

TEST_CASE("validate_skeleton reports every violation", "[skeleton]") {
  auto spec = build_default_skeleton();
  REQUIRE(validate_skeleton(spec).empty());

  auto bad = spec;
  bad.pool_maps[0].pairs[1] = {0, 9};  // node 0 appears twice, 8 uncovered
  auto v1 = validate_skeleton(bad);
  bool nondisjoint = false;
  for (const auto& m : v1)
    if (m.find("non-disjoint") != std::string::npos) nondisjoint = true;
  REQUIRE(nondisjoint);

  auto drift = spec;
  drift.scales[1].edges.push_back({0, 3});  // not a quotient edge
  auto v2 = validate_skeleton(drift);
  bool named = false;
  for (const auto& m : v2)
    if (m.find("(0,3)") != std::string::npos &&
        m.find("not in the quotient") != std::string::npos)
      named = true;
  REQUIRE(named);

  // Two independent faults are both reported.
  auto both = drift;
  both.joint_names.pop_back();
  REQUIRE(validate_skeleton(both).size() >= 2);
}

TEST_CASE("skeleton json round trip and invalid file reporting", "[skeleton]") {
  auto spec = build_default_skeleton();
  auto dir = std::filesystem::temp_directory_path() / "gsh_skel_test";
  std::filesystem::create_directories(dir);
  const auto path = (dir / "skeleton.json").string();
  save_skeleton(spec, path);
  auto loaded = load_skeleton(path);
  REQUIRE(loaded.fine().edges == spec.fine().edges);
  REQUIRE(loaded.joint_names == spec.joint_names);
  REQUIRE(skeleton_hash(loaded) == skeleton_hash(spec));

  // Invalid pairing: loader reports the violations instead of crashing.
  auto j = skeleton_to_json(spec);
  j["pool_16_to_8"][0] = {0, 0};
  const auto bad_path = (dir / "bad.json").string();
  std::ofstream(bad_path) << j.dump();
  REQUIRE_THROWS_AS(load_skeleton(bad_path), ValidationError);

  REQUIRE_THROWS_AS(load_skeleton((dir / "missing.json").string()), IoError);
}

TEST_CASE("skeleton hash distinguishes structures", "[skeleton]") {
  auto spec = build_default_skeleton();
  auto other = spec;
  std::swap(other.pool_maps[0].pairs[0], other.pool_maps[0].pairs[1]);
  REQUIRE(skeleton_hash(other) != skeleton_hash(spec));
}
