#pragma once

// Graph hourglass: encode over skeletal scales 16 -> 8 -> 4, decode back up,
// additive residual skips at each scale (node-linear adapters where channel
// widths differ), channel ladder widening toward the bottleneck. Input and
// output shapes are identical.

#include <optional>
#include <vector>

#include "gsh/layers.hpp"
#include "gsh/skeleton.hpp"
#include "gsh/tensor.hpp"

namespace gsh {

struct HourglassParams {
  // blocks_per_scale conv blocks per stage; the first block of a stage
  // changes the channel width, the rest keep it.
  std::vector<ConvBlock> down16;      // C    -> C
  std::vector<ConvBlock> down8;       // C    -> Cmid
  std::vector<ConvBlock> bottleneck;  // Cmid -> Clow
  std::vector<ConvBlock> up8;         // Clow -> Cmid
  std::vector<ConvBlock> up16;        // Cmid -> C
  std::optional<NodeLinear> adapt8;   // e2: Cmid -> Clow, when widths differ
  std::optional<NodeLinear> adapt16;  // e1: C -> Cmid, when widths differ
};

namespace detail {

inline std::vector<ConvBlock> block_chain(ConvKind kind,
                                          std::size_t node_count,
                                          std::size_t cin, std::size_t cout,
                                          double dropout_p, int count,
                                          CounterRng& rng) {
  std::vector<ConvBlock> chain;
  chain.reserve(count);
  for (int i = 0; i < count; ++i)
    chain.push_back(ConvBlock::init(kind, node_count, i == 0 ? cin : cout,
                                    cout, dropout_p, rng));
  return chain;
}

inline Tensor run_chain(const std::vector<ConvBlock>& chain, Tensor x,
                        const GraphScale& scale, ForwardCtx& ctx) {
  for (const auto& block : chain) x = block.forward(x, scale, ctx);
  return x;
}

}  // namespace detail

/// channels = (C, Cmid, Clow), the per-scale widths (64, 96, 128 by default).
inline HourglassParams hourglass_init(ConvKind kind,
                                      std::array<std::size_t, 3> channels,
                                      const SkeletonSpec& skeleton,
                                      double dropout_p, int blocks_per_scale,
                                      CounterRng& rng) {
  if (blocks_per_scale < 1)
    throw ConfigError("hourglass: blocks_per_scale must be >= 1");
  const auto [c, cmid, clow] = channels;
  if (c == 0 || cmid == 0 || clow == 0)
    throw ConfigError("hourglass: channel widths must be positive");
  HourglassParams p;
  p.down16 = detail::block_chain(kind, skeleton.fine().node_count, c, c,
                                 dropout_p, blocks_per_scale, rng);
  p.down8 = detail::block_chain(kind, skeleton.mid().node_count, c, cmid,
                                dropout_p, blocks_per_scale, rng);
  p.bottleneck = detail::block_chain(kind, skeleton.coarse().node_count, cmid,
                                     clow, dropout_p, blocks_per_scale, rng);
  p.up8 = detail::block_chain(kind, skeleton.mid().node_count, clow, cmid,
                              dropout_p, blocks_per_scale, rng);
  p.up16 = detail::block_chain(kind, skeleton.fine().node_count, cmid, c,
                               dropout_p, blocks_per_scale, rng);
  if (cmid != clow) p.adapt8 = NodeLinear::init(cmid, clow, rng);
  if (c != cmid) p.adapt16 = NodeLinear::init(c, cmid, rng);
  return p;
}

/// Forward pass; optionally records the node-count ladder the features
/// traverse (16, 8, 4, 8, 16 for the default skeleton).
inline Tensor hourglass_forward(const HourglassParams& p, const Tensor& x,
                                const SkeletonSpec& skeleton, ForwardCtx& ctx,
                                std::vector<std::size_t>* ladder = nullptr) {
  const auto& map16 = skeleton.pool_maps[0].pairs;
  const auto& map8 = skeleton.pool_maps[1].pairs;
  auto note = [&](const Tensor& t) {
    if (ladder) ladder->push_back(t.dim(1));
    return t;
  };

  auto e1 = note(detail::run_chain(p.down16, x, skeleton.fine(), ctx));
  auto p1 = group_max(e1, map16);
  auto e2 = note(detail::run_chain(p.down8, p1, skeleton.mid(), ctx));
  auto p2 = group_max(e2, map8);
  auto m = note(detail::run_chain(p.bottleneck, p2, skeleton.coarse(), ctx));
  auto u2 = duplicate_expand(m, map8);
  auto r2 = p.adapt8 ? p.adapt8->forward(e2) : e2;
  auto d2 = note(detail::run_chain(p.up8, add(u2, r2), skeleton.mid(), ctx));
  auto u1 = duplicate_expand(d2, map16);
  auto r1 = p.adapt16 ? p.adapt16->forward(e1) : e1;
  auto out = note(detail::run_chain(p.up16, add(u1, r1), skeleton.fine(), ctx));
  if (out.shape() != x.shape())
    throw ShapeError("hourglass: output shape " + shape_str(out.shape()) +
                     " does not match input " + shape_str(x.shape()));
  return out;
}

}  // namespace gsh
