#pragma once

// Graph convolution variants over a fixed skeletal scale, node-wise linear
// maps, the conv -> batch norm -> ReLU -> dropout block, and the
// squeeze-and-excitation channel gate.

#include <cstdint>
#include <string>
#include <vector>

#include "gsh/errors.hpp"
#include "gsh/rng.hpp"
#include "gsh/skeleton.hpp"
#include "gsh/tensor.hpp"

namespace gsh {

enum class ConvKind { vanilla, semantic, preaggr };

inline std::string to_string(ConvKind k) {
  switch (k) {
    case ConvKind::vanilla: return "vanilla";
    case ConvKind::semantic: return "semantic";
    case ConvKind::preaggr: return "preaggr";
  }
  return "?";
}

inline ConvKind conv_kind_from_string(const std::string& s) {
  if (s == "vanilla") return ConvKind::vanilla;
  if (s == "semantic") return ConvKind::semantic;
  if (s == "preaggr") return ConvKind::preaggr;
  throw ConfigError("unknown conv kind '" + s +
                    "' (expected vanilla, semantic or preaggr)");
}

/// Carries the execution mode and the dropout stream for one forward pass.
/// Dropout sites draw sub-streams in traversal order, so a fixed
/// (seed, step) pair reproduces every mask bit-exactly.
struct ForwardCtx {
  Mode mode = Mode::infer;
  std::uint64_t dropout_key = 0;
  std::uint64_t site = 0;

  static ForwardCtx train_step(std::uint64_t seed, std::uint64_t step) {
    return {Mode::train,
            CounterRng::from_path(seed, {rng_tag::kDropout, step}).key(), 0};
  }
  static ForwardCtx inference() { return {Mode::infer, 0, 0}; }

  CounterRng next_dropout_stream() {
    return CounterRng(mix64(dropout_key ^ mix64(++site)));
  }
};

/// Glorot-uniform fill: +-sqrt(6 / (fan_in + fan_out)), drawn sequentially.
inline Tensor glorot_uniform(std::size_t fan_in, std::size_t fan_out,
                             Shape shape, CounterRng& rng) {
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  std::vector<double> d(numel(shape));
  for (double& v : d) v = rng.uniform(-bound, bound);
  return Tensor::from(std::move(shape), std::move(d), true);
}

/// Shared linear map applied independently at every node (a 1x1 convolution).
struct NodeLinear {
  Tensor weight;  // [Cin, Cout]
  Tensor bias;    // [Cout]

  static NodeLinear init(std::size_t cin, std::size_t cout, CounterRng& rng) {
    NodeLinear l;
    l.weight = glorot_uniform(cin, cout, {cin, cout}, rng);
    l.bias = Tensor::zeros({cout}, true);
    return l;
  }

  Tensor forward(const Tensor& x) const {
    return add(matmul(x, weight), bias);
  }
};

// ---------------------------------------------------------------------------
// Graph convolutions. All kinds share the contract
//   [B,K,Cin] -> [B,K,Cout]
// over a fixed GraphScale:
//   vanilla   A_hat . X . W + b
//   semantic  softmax_rows(M | support) . X . W + b, M learnable
//   preaggr   per-node weights before aggregation, decoupled self weight
// ---------------------------------------------------------------------------
struct GraphConv {
  ConvKind kind = ConvKind::vanilla;
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  Tensor weight;                     // vanilla/semantic
  Tensor mask_logits;                // semantic: M [K,K]
  std::vector<Tensor> node_weights;  // preaggr: K of [Cin,Cout]
  Tensor self_weight;                // preaggr
  Tensor bias;                       // [Cout]

  static GraphConv init(ConvKind kind, std::size_t node_count, std::size_t cin,
                        std::size_t cout, CounterRng& rng) {
    GraphConv c;
    c.kind = kind;
    c.in_channels = cin;
    c.out_channels = cout;
    switch (kind) {
      case ConvKind::vanilla:
        c.weight = glorot_uniform(cin, cout, {cin, cout}, rng);
        break;
      case ConvKind::semantic:
        c.weight = glorot_uniform(cin, cout, {cin, cout}, rng);
        c.mask_logits = Tensor::zeros({node_count, node_count}, true);
        break;
      case ConvKind::preaggr:
        c.node_weights.reserve(node_count);
        for (std::size_t j = 0; j < node_count; ++j)
          c.node_weights.push_back(glorot_uniform(cin, cout, {cin, cout}, rng));
        c.self_weight = glorot_uniform(cin, cout, {cin, cout}, rng);
        break;
    }
    c.bias = Tensor::zeros({cout}, true);
    return c;
  }

  Tensor forward(const Tensor& x, const GraphScale& scale) const {
    const Shape& s = x.shape();
    if (s.size() != 3 || s[1] != scale.node_count || s[2] != in_channels)
      throw ShapeError("graph conv expects [B," +
                       std::to_string(scale.node_count) + "," +
                       std::to_string(in_channels) + "], got " + shape_str(s));
    switch (kind) {
      case ConvKind::vanilla:
        return add(matmul(scale.adjacency_normalized, matmul(x, weight)), bias);
      case ConvKind::semantic: {
        auto effective = masked_row_softmax(mask_logits, scale.support);
        return add(matmul(effective, matmul(x, weight)), bias);
      }
      case ConvKind::preaggr: {
        // Split A_hat into its off-diagonal part and diagonal so the self
        // path goes through the decoupled weight.
        const std::size_t k = scale.node_count;
        const auto& a = scale.adjacency_normalized.data();
        std::vector<double> off(a), diag(k * k, 0.0);
        for (std::size_t i = 0; i < k; ++i) {
          off[i * k + i] = 0.0;
          diag[i * k + i] = a[i * k + i];
        }
        auto neighbors = matmul(Tensor::from({k, k}, std::move(off)),
                                per_node_matmul(x, node_weights));
        auto self = matmul(Tensor::from({k, k}, std::move(diag)),
                           matmul(x, self_weight));
        return add(add(neighbors, self), bias);
      }
    }
    throw ConfigError("graph conv: bad kind");
  }
};

/// Graph convolution -> batch norm -> ReLU -> dropout (train mode only).
struct ConvBlock {
  GraphConv conv;
  BatchNormParams bn;
  double dropout_p = 0.0;

  static ConvBlock init(ConvKind kind, std::size_t node_count, std::size_t cin,
                        std::size_t cout, double dropout_p, CounterRng& rng) {
    ConvBlock b;
    b.conv = GraphConv::init(kind, node_count, cin, cout, rng);
    b.bn = BatchNormParams::init(cout);
    b.dropout_p = dropout_p;
    return b;
  }

  Tensor forward(const Tensor& x, const GraphScale& scale,
                 ForwardCtx& ctx) const {
    auto h = relu(batch_norm(conv.forward(x, scale), bn, ctx.mode));
    return dropout(h, dropout_p, ctx.mode, ctx.next_dropout_stream());
  }
};

/// Squeeze-and-excitation: global average over nodes, two-layer gating
/// network with reduction ratio r, channel-wise sigmoid reweighting.
struct SEBlock {
  Tensor w1;  // [C/r, C]
  Tensor w2;  // [C, C/r]
  std::size_t ratio = 8;

  static SEBlock init(std::size_t channels, std::size_t ratio,
                      CounterRng& rng) {
    if (ratio == 0 || channels % ratio != 0)
      throw ConfigError("se block: channels " + std::to_string(channels) +
                        " not divisible by reduction ratio " +
                        std::to_string(ratio));
    SEBlock se;
    se.ratio = ratio;
    const std::size_t hidden = channels / ratio;
    se.w1 = glorot_uniform(channels, hidden, {hidden, channels}, rng);
    se.w2 = glorot_uniform(hidden, channels, {channels, hidden}, rng);
    return se;
  }

  Tensor forward(const Tensor& f) const {
    auto z = mean_over_nodes(f);                       // [B,C]
    auto hidden = relu(matmul(z, transpose(w1)));      // [B,C/r]
    auto s = sigmoid(matmul(hidden, transpose(w2)));   // [B,C]
    return multiply(f, s);
  }
};

}  // namespace gsh
