#include <catch2/catch_amalgamated.hpp>

#include <vector>

#include "gsh/gradcheck.hpp"
#include "gsh/hourglass.hpp"

#include "helpers.hpp"

using namespace gsh;
using gsh_test::random_tensor;

namespace {

// Ordered list of every learnable tensor in the module.
std::vector<Tensor> hourglass_params(const HourglassParams& p) {
  std::vector<Tensor> out;
  auto add_block = [&](const ConvBlock& b) {
    switch (b.conv.kind) {
      case ConvKind::vanilla:
        out.push_back(b.conv.weight);
        break;
      case ConvKind::semantic:
        out.push_back(b.conv.weight);
        out.push_back(b.conv.mask_logits);
        break;
      case ConvKind::preaggr:
        for (const auto& w : b.conv.node_weights) out.push_back(w);
        out.push_back(b.conv.self_weight);
        break;
    }
    out.push_back(b.conv.bias);
    out.push_back(b.bn.gain);
    out.push_back(b.bn.bias);
  };
  for (const auto* chain :
       {&p.down16, &p.down8, &p.bottleneck, &p.up8, &p.up16})
    for (const auto& b : *chain) add_block(b);
  for (const auto* adapt : {&p.adapt8, &p.adapt16})
    if (*adapt) {
      out.push_back((*adapt)->weight);
      out.push_back((*adapt)->bias);
    }
  return out;
}

}  // namespace

TEST_CASE("hourglass preserves shape and walks the node ladder", "[hourglass]") {
  auto spec = build_default_skeleton();
  CounterRng rng(21);
  auto hg = hourglass_init(ConvKind::preaggr, {64, 96, 128}, spec, 0.0, 1, rng);
  auto x = random_tensor({2, 16, 64}, 100);
  auto ctx = ForwardCtx::inference();
  std::vector<std::size_t> ladder;
  auto y = hourglass_forward(hg, x, spec, ctx, &ladder);
  REQUIRE(y.shape() == Shape{2, 16, 64});
  REQUIRE(ladder == std::vector<std::size_t>{16, 8, 4, 8, 16});

  // Default config widens per the 64 -> 96 -> 128 ladder.
  REQUIRE(hg.down16[0].conv.out_channels == 64);
  REQUIRE(hg.down8[0].conv.out_channels == 96);
  REQUIRE(hg.bottleneck[0].conv.out_channels == 128);
  REQUIRE(hg.up8[0].conv.out_channels == 96);
  REQUIRE(hg.up16[0].conv.out_channels == 64);
  REQUIRE(hg.adapt8.has_value());   // 96 vs 128
  REQUIRE(hg.adapt16.has_value());  // 64 vs 96
}

TEST_CASE("hourglass init is deterministic per seed", "[hourglass]") {
  auto spec = build_default_skeleton();
  CounterRng a(33), b(33), c(34);
  auto ha = hourglass_init(ConvKind::vanilla, {8, 12, 16}, spec, 0.0, 1, a);
  auto hb = hourglass_init(ConvKind::vanilla, {8, 12, 16}, spec, 0.0, 1, b);
  auto hc = hourglass_init(ConvKind::vanilla, {8, 12, 16}, spec, 0.0, 1, c);
  auto pa = hourglass_params(ha), pb = hourglass_params(hb),
       pc = hourglass_params(hc);
  REQUIRE(pa.size() == pb.size());
  bool all_equal = true, any_diff_seed = false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    if (pa[i].data() != pb[i].data()) all_equal = false;
    if (pa[i].data() != pc[i].data()) any_diff_seed = true;
  }
  REQUIRE(all_equal);
  REQUIRE(any_diff_seed);
}

TEST_CASE("hourglass equal-width ladder needs no adapters", "[hourglass]") {
  auto spec = build_default_skeleton();
  CounterRng rng(35);
  auto hg = hourglass_init(ConvKind::vanilla, {8, 8, 8}, spec, 0.0, 1, rng);
  REQUIRE_FALSE(hg.adapt8.has_value());
  REQUIRE_FALSE(hg.adapt16.has_value());
  auto x = random_tensor({2, 16, 8}, 101);
  auto ctx = ForwardCtx::inference();
  REQUIRE(hourglass_forward(hg, x, spec, ctx).shape() == x.shape());
}

TEST_CASE("hourglass end-to-end gradient matches finite differences", "[hourglass]") {
  auto spec = build_default_skeleton();
  CounterRng rng(36);
  auto hg = hourglass_init(ConvKind::vanilla, {4, 6, 8}, spec, 0.0, 1, rng);
  auto x = random_tensor({2, 16, 4}, 102, true);
  auto w = random_tensor({2, 16, 4}, 103);
  auto f = [&](const Tensor& t) {
    auto ctx = ForwardCtx::inference();
    return sum_all(multiply(hourglass_forward(hg, t, spec, ctx), w));
  };
  REQUIRE(finite_difference_gradcheck(f, x) < 1e-4);
}

TEST_CASE("gradient reaches every hourglass parameter", "[hourglass]") {
  auto spec = build_default_skeleton();
  for (auto kind : {ConvKind::vanilla, ConvKind::semantic, ConvKind::preaggr}) {
    CounterRng rng(37);
    auto hg = hourglass_init(kind, {6, 8, 10}, spec, 0.0, 1, rng);
    auto x = random_tensor({4, 16, 6}, 104);
    auto ctx = ForwardCtx::train_step(1, 0);
    auto y = hourglass_forward(hg, x, spec, ctx);
    auto grads = backward(sum_all(multiply(y, y)));
    for (const auto& p : hourglass_params(hg)) {
      REQUIRE(grads.contains(p));
      double mx = 0.0;
      for (double g : grads.at(p)) mx = std::max(mx, std::abs(g));
      INFO("conv kind " << to_string(kind));
      REQUIRE(mx > 0.0);
    }
  }
}

TEST_CASE("hourglass infer-mode forward is deterministic", "[hourglass]") {
  auto spec = build_default_skeleton();
  CounterRng rng(38);
  auto hg = hourglass_init(ConvKind::preaggr, {6, 8, 10}, spec, 0.25, 2, rng);
  auto x = random_tensor({2, 16, 6}, 105);
  auto c1 = ForwardCtx::inference();
  auto c2 = ForwardCtx::inference();
  REQUIRE(hourglass_forward(hg, x, spec, c1).data() ==
          hourglass_forward(hg, x, spec, c2).data());
}

TEST_CASE("hourglass rejects mismatched inputs", "[hourglass]") {
  auto spec = build_default_skeleton();
  CounterRng rng(39);
  auto hg = hourglass_init(ConvKind::vanilla, {4, 6, 8}, spec, 0.0, 1, rng);
  auto ctx = ForwardCtx::inference();
  REQUIRE_THROWS_AS(
      hourglass_forward(hg, Tensor::zeros({2, 8, 4}), spec, ctx), ShapeError);
  REQUIRE_THROWS_AS(
      hourglass_forward(hg, Tensor::zeros({2, 16, 5}), spec, ctx), ShapeError);
}
