#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "gsh/gradcheck.hpp"
#include "gsh/layers.hpp"

#include "helpers.hpp"

using namespace gsh;
using gsh_test::random_tensor;

namespace {

GraphConv tied_preaggr_from(const GraphConv& vanilla, std::size_t k) {
  GraphConv c;
  c.kind = ConvKind::preaggr;
  c.in_channels = vanilla.in_channels;
  c.out_channels = vanilla.out_channels;
  for (std::size_t j = 0; j < k; ++j) c.node_weights.push_back(vanilla.weight);
  c.self_weight = vanilla.weight;
  c.bias = vanilla.bias;
  return c;
}

}  // namespace

TEST_CASE("vanilla gconv on trivial graphs", "[layers]") {
  CounterRng rng(1);
  auto one = make_graph_scale(1, {});
  auto conv = GraphConv::init(ConvKind::vanilla, 1, 3, 2, rng);
  auto x = random_tensor({2, 1, 3}, 7);
  // Single node: A_hat = [[1]], so output is the bare linear map.
  auto got = conv.forward(x, one);
  auto want = add(matmul(x, conv.weight), conv.bias);
  REQUIRE(gsh_test::max_abs_diff(got.data(), want.data()) < 1e-15);

  // Two nodes, one edge: rows become 0.5/0.5 mixtures.
  auto two = make_graph_scale(2, {{0, 1}});
  GraphConv id_conv;
  id_conv.kind = ConvKind::vanilla;
  id_conv.in_channels = id_conv.out_channels = 2;
  id_conv.weight = Tensor::from({2, 2}, {1, 0, 0, 1}, true);
  id_conv.bias = Tensor::zeros({2}, true);
  auto x2 = Tensor::from({1, 2, 2}, {2, 4, 6, 8});
  auto mixed = id_conv.forward(x2, two);
  REQUIRE(mixed.at({0, 0, 0}) == Catch::Approx(0.5 * 2 + 0.5 * 6));
  REQUIRE(mixed.at({0, 1, 1}) == Catch::Approx(0.5 * 4 + 0.5 * 8));
}

TEST_CASE("vanilla gconv is permutation equivariant", "[layers]") {
  CounterRng rng(2);
  const std::size_t k = 5;
  EdgeList edges = {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {0, 4}, {1, 3}};
  auto scale = make_graph_scale(k, edges);
  auto conv = GraphConv::init(ConvKind::vanilla, k, 3, 4, rng);
  auto x = random_tensor({2, k, 3}, 8);

  // Permutation p: node i of the permuted graph is node p[i] of the original.
  const std::vector<std::size_t> p = {3, 0, 4, 1, 2};
  EdgeList permuted_edges;
  std::vector<std::size_t> inv(k);
  for (std::size_t i = 0; i < k; ++i) inv[p[i]] = i;
  for (auto [u, v] : edges) permuted_edges.push_back({inv[u], inv[v]});
  auto permuted_scale = make_graph_scale(k, permuted_edges);

  std::vector<double> px(x.size());
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t c = 0; c < 3; ++c)
        px[(b * k + i) * 3 + c] = x.at({b, p[i], c});
  auto out = conv.forward(x, scale);
  auto pout = conv.forward(Tensor::from({2, k, 3}, std::move(px)),
                           permuted_scale);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t i = 0; i < k; ++i)
      for (std::size_t c = 0; c < 4; ++c)
        REQUIRE(pout.at({b, i, c}) ==
                Catch::Approx(out.at({b, p[i], c})).margin(1e-12));
}

TEST_CASE("semantic gconv softmax adjacency", "[layers]") {
  CounterRng rng(3);
  auto spec = build_default_skeleton();
  auto conv = GraphConv::init(ConvKind::semantic, 16, 2, 4, rng);

  // M is zero at init: effective adjacency is uniform over each support row,
  // so a constant input column stays constant.
  auto x = Tensor::constant({1, 16, 2}, 1.0);
  auto out = conv.forward(x, spec.fine());
  for (std::size_t i = 1; i < 16; ++i)
    for (std::size_t c = 0; c < 4; ++c)
      REQUIRE(out.at({0, i, c}) == Catch::Approx(out.at({0, 0, c})));

  // Single-node graph: effective adjacency is [[1]] regardless of M.
  auto one = make_graph_scale(1, {});
  auto conv1 = GraphConv::init(ConvKind::semantic, 1, 2, 2, rng);
  conv1.mask_logits.leaf_data()[0] = -4.2;
  auto x1 = random_tensor({1, 1, 2}, 9);
  auto y1 = conv1.forward(x1, one);
  auto bare = add(matmul(x1, conv1.weight), conv1.bias);
  REQUIRE(gsh_test::max_abs_diff(y1.data(), bare.data()) < 1e-15);

  // Gradient with respect to the learnable adjacency logits.
  auto xg = random_tensor({2, 16, 2}, 10);
  auto f = [&](const Tensor&) {
    auto o = conv.forward(xg, spec.fine());
    return sum_all(multiply(o, o));
  };
  REQUIRE(finite_difference_gradcheck(f, conv.mask_logits) < 1e-4);
}

TEST_CASE("preaggr with tied weights degenerates to vanilla", "[layers]") {
  CounterRng rng(4);
  auto spec = build_default_skeleton();
  auto vanilla = GraphConv::init(ConvKind::vanilla, 16, 3, 5, rng);
  auto tied = tied_preaggr_from(vanilla, 16);
  for (std::uint64_t t = 0; t < 20; ++t) {
    auto x = random_tensor({2, 16, 3}, 100 + t);
    auto a = vanilla.forward(x, spec.fine());
    auto b = tied.forward(x, spec.fine());
    REQUIRE(gsh_test::max_abs_diff(a.data(), b.data()) < 1e-12);
  }
}

TEST_CASE("preaggr single node uses only the self weight", "[layers]") {
  CounterRng rng(5);
  auto one = make_graph_scale(1, {});
  auto conv = GraphConv::init(ConvKind::preaggr, 1, 3, 2, rng);
  auto x = random_tensor({2, 1, 3}, 11);
  auto got = conv.forward(x, one);
  // A_hat[0,0] = 1 for an isolated node.
  auto want = add(matmul(x, conv.self_weight), conv.bias);
  REQUIRE(gsh_test::max_abs_diff(got.data(), want.data()) < 1e-15);
}

TEST_CASE("preaggr per-node weight gradients match finite differences", "[layers]") {
  CounterRng rng(6);
  auto spec = build_default_skeleton();
  auto conv = GraphConv::init(ConvKind::preaggr, 8, 3, 4, rng);
  auto x = random_tensor({2, 8, 3}, 12);
  auto f = [&](const Tensor&) {
    auto o = conv.forward(x, spec.mid());
    return sum_all(multiply(o, o));
  };
  for (std::size_t j : {std::size_t{0}, std::size_t{3}, std::size_t{7}})
    REQUIRE(finite_difference_gradcheck(f, conv.node_weights[j]) < 1e-4);
  REQUIRE(finite_difference_gradcheck(f, conv.self_weight) < 1e-4);
  REQUIRE(finite_difference_gradcheck(f, conv.bias) < 1e-4);
}

TEST_CASE("node_linear identity, head shape, node independence", "[layers]") {
  NodeLinear id;
  id.weight = Tensor::from({2, 2}, {1, 0, 0, 1}, true);
  id.bias = Tensor::zeros({2}, true);
  auto x = random_tensor({3, 4, 2}, 13);
  REQUIRE(id.forward(x).data() == x.data());

  CounterRng rng(7);
  auto head = NodeLinear::init(64, 3, rng);
  auto f = random_tensor({2, 16, 64}, 14);
  REQUIRE(head.forward(f).shape() == Shape{2, 16, 3});

  // Permuting nodes permutes outputs identically.
  auto perm = random_tensor({1, 4, 2}, 15);
  std::vector<double> swapped(perm.data());
  for (std::size_t c = 0; c < 2; ++c)
    std::swap(swapped[0 * 2 + c], swapped[3 * 2 + c]);
  auto out_a = head.forward(f);
  NodeLinear lin = NodeLinear::init(2, 3, rng);
  auto ya = lin.forward(perm);
  auto yb = lin.forward(Tensor::from({1, 4, 2}, std::move(swapped)));
  for (std::size_t c = 0; c < 3; ++c) {
    REQUIRE(ya.at({0, 0, c}) == yb.at({0, 3, c}));
    REQUIRE(ya.at({0, 3, c}) == yb.at({0, 0, c}));
  }
}

TEST_CASE("conv_block composition and dropout placement", "[layers]") {
  CounterRng rng(8);
  auto spec = build_default_skeleton();
  auto block = ConvBlock::init(ConvKind::vanilla, 16, 3, 4, 0.25, rng);

  // Identity-configured BN in infer mode: block equals relu(gconv) up to eps.
  auto x = random_tensor({2, 16, 3}, 16);
  auto ctx = ForwardCtx::inference();
  auto got = block.forward(x, spec.fine(), ctx);
  auto want = relu(block.conv.forward(x, spec.fine()));
  REQUIRE(gsh_test::max_abs_diff(got.data(), want.data()) < 1e-4);
  for (double v : got.data()) REQUIRE(v >= 0.0);

  // Train mode with p = 0.25 produces zeroed entries.
  auto train_ctx = ForwardCtx::train_step(1234, 0);
  auto y = block.forward(x, spec.fine(), train_ctx);
  std::size_t zeroed = 0;
  for (double v : y.data()) zeroed += v == 0.0;
  REQUIRE(zeroed > 0);

  // Same seed and step reproduce the same masks.
  auto ctx_a = ForwardCtx::train_step(77, 5);
  auto ctx_b = ForwardCtx::train_step(77, 5);
  REQUIRE(block.forward(x, spec.fine(), ctx_a).data() ==
          block.forward(x, spec.fine(), ctx_b).data());
}

TEST_CASE("se block gates channels", "[layers]") {
  CounterRng rng(9);
  auto se = SEBlock::init(16, 8, rng);
  auto f = random_tensor({2, 4, 16}, 17);

  // Zero gate weights: s = sigmoid(0) = 0.5 exactly.
  auto zeroed = se;
  zeroed.w1 = Tensor::zeros({2, 16}, true);
  zeroed.w2 = Tensor::zeros({16, 2}, true);
  auto half = zeroed.forward(f);
  for (std::size_t i = 0; i < f.size(); ++i)
    REQUIRE(half.data()[i] == 0.5 * f.data()[i]);

  // Sigmoid range: |out| <= |F| entrywise, per-channel scaling.
  auto out = se.forward(f);
  for (std::size_t i = 0; i < f.size(); ++i)
    REQUIRE(std::abs(out.data()[i]) <= std::abs(f.data()[i]));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 16; ++c) {
      // out[:,k,c] = s[c] * f[:,k,c] with one s per (sample, channel)
      double ratio0 = 0.0;
      bool have = false;
      for (std::size_t k = 0; k < 4; ++k) {
        if (f.at({b, k, c}) == 0.0) continue;
        const double r = out.at({b, k, c}) / f.at({b, k, c});
        if (!have) {
          ratio0 = r;
          have = true;
        } else {
          REQUIRE(r == Catch::Approx(ratio0));
        }
        REQUIRE(r > 0.0);
        REQUIRE(r < 1.0);
      }
    }

  // Gradient through z, s and the product.
  auto fg = random_tensor({2, 4, 16}, 18, true);
  auto loss = [&](const Tensor& t) {
    auto o = se.forward(t);
    return sum_all(multiply(o, o));
  };
  REQUIRE(finite_difference_gradcheck(loss, fg) < 1e-4);
  auto loss_w = [&](const Tensor&) {
    auto o = se.forward(fg);
    return sum_all(multiply(o, o));
  };
  REQUIRE(finite_difference_gradcheck(loss_w, se.w1) < 1e-4);
  REQUIRE(finite_difference_gradcheck(loss_w, se.w2) < 1e-4);

  REQUIRE_THROWS_AS(SEBlock::init(12, 8, rng), ConfigError);
}

TEST_CASE("layer forwards preserve node counts", "[layers]") {
  CounterRng rng(10);
  auto spec = build_default_skeleton();
  auto x = random_tensor({3, 16, 5}, 19);
  for (auto kind : {ConvKind::vanilla, ConvKind::semantic, ConvKind::preaggr}) {
    auto conv = GraphConv::init(kind, 16, 5, 9, rng);
    auto y = conv.forward(x, spec.fine());
    REQUIRE(y.shape() == Shape{3, 16, 9});
  }
}
