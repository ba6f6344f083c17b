#pragma once

// Full network assembly: the stacked graph-hourglass lifter (pre-layer,
// n hourglasses, channel-reduced intermediate heads, SE fusion, output head)
// and the sequential-residual baseline behind the same forward contract.
// Includes the binary model format ("GSHM").

#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "gsh/data.hpp"
#include "gsh/errors.hpp"
#include "gsh/hourglass.hpp"
#include "gsh/io.hpp"
#include "gsh/layers.hpp"
#include "gsh/skeleton.hpp"
#include "gsh/tensor.hpp"

namespace gsh {

enum class Architecture { graphsh, seqres };

inline std::string to_string(Architecture a) {
  return a == Architecture::graphsh ? "graphsh" : "seqres";
}

inline Architecture architecture_from_string(const std::string& s) {
  if (s == "graphsh") return Architecture::graphsh;
  if (s == "seqres") return Architecture::seqres;
  throw ConfigError("unknown architecture '" + s +
                    "' (expected graphsh or seqres)");
}

struct NetworkConfig {
  Architecture architecture = Architecture::graphsh;
  std::uint32_t stacks = 4;    // hourglass count n
  std::uint32_t channels = 64; // latent width C
  ConvKind conv_kind = ConvKind::preaggr;
  std::uint32_t se_ratio = 8;
  double dropout_p = 0.25;
  std::uint32_t blocks_per_scale = 2;
  std::uint32_t seqres_depth = 8;     // residual blocks (2 convs each)
  std::uint32_t seqres_channels = 128;

  /// Per-scale hourglass widths: C widened by 1.5x then 2x at the coarse
  /// scales, matching the default 64 -> 96 -> 128 ladder.
  std::array<std::size_t, 3> hourglass_channels() const {
    return {channels, channels * 3 / 2, channels * 2};
  }

  void validate() const {
    if (stacks == 0 || channels == 0 || se_ratio == 0 ||
        blocks_per_scale == 0 || seqres_depth == 0 || seqres_channels == 0)
      throw ConfigError("network config: all sizes must be positive");
    if (dropout_p < 0.0 || dropout_p >= 1.0)
      throw ConfigError("network config: dropout must lie in [0, 1)");
    if (channels % stacks != 0)
      throw ConfigError("network config: channels " +
                        std::to_string(channels) +
                        " not divisible by stacks " + std::to_string(stacks));
    if (channels % se_ratio != 0)
      throw ConfigError("network config: channels " +
                        std::to_string(channels) +
                        " not divisible by se_ratio " +
                        std::to_string(se_ratio));
    if (channels % 2 != 0)
      throw ConfigError("network config: channels must be even");
  }
};

struct Model {
  NetworkConfig config;
  SkeletonSpec skeleton;
  std::optional<Normalizer> normalizer;  // attached after training

  GraphConv pre_layer;  // 2 -> C (graphsh) or 2 -> seqres_channels
  // GraphSH path.
  std::vector<HourglassParams> hourglasses;
  std::vector<NodeLinear> heads;  // C -> C/n each
  SEBlock se;
  // SeqRes path.
  std::vector<std::pair<ConvBlock, ConvBlock>> res_blocks;

  NodeLinear output_head;  // latent -> 3
};

// ---------------------------------------------------------------------------
// Parameter traversal in declaration order. The same order defines the
// serialization layout and the optimizer state layout.
// ---------------------------------------------------------------------------

struct TensorEntry {
  std::string name;
  Tensor tensor;
  bool learnable = true;
};

namespace detail {

inline void visit_conv(const GraphConv& c, const std::string& prefix,
                       std::vector<TensorEntry>& out) {
  switch (c.kind) {
    case ConvKind::vanilla:
      out.push_back({prefix + ".weight", c.weight});
      break;
    case ConvKind::semantic:
      out.push_back({prefix + ".weight", c.weight});
      out.push_back({prefix + ".mask_logits", c.mask_logits});
      break;
    case ConvKind::preaggr:
      for (std::size_t j = 0; j < c.node_weights.size(); ++j)
        out.push_back({prefix + ".node_weight" + std::to_string(j),
                       c.node_weights[j]});
      out.push_back({prefix + ".self_weight", c.self_weight});
      break;
  }
  out.push_back({prefix + ".bias", c.bias});
}

inline void visit_block(const ConvBlock& b, const std::string& prefix,
                        std::vector<TensorEntry>& out) {
  visit_conv(b.conv, prefix + ".conv", out);
  out.push_back({prefix + ".bn.gain", b.bn.gain});
  out.push_back({prefix + ".bn.bias", b.bn.bias});
  out.push_back({prefix + ".bn.running_mean", b.bn.running_mean, false});
  out.push_back({prefix + ".bn.running_var", b.bn.running_var, false});
}

inline void visit_linear(const NodeLinear& l, const std::string& prefix,
                         std::vector<TensorEntry>& out) {
  out.push_back({prefix + ".weight", l.weight});
  out.push_back({prefix + ".bias", l.bias});
}

}  // namespace detail

inline std::vector<TensorEntry> named_tensors(const Model& m) {
  std::vector<TensorEntry> out;
  detail::visit_conv(m.pre_layer, "pre_layer", out);
  if (m.config.architecture == Architecture::graphsh) {
    for (std::size_t i = 0; i < m.hourglasses.size(); ++i) {
      const auto& hg = m.hourglasses[i];
      const std::string p = "hourglass" + std::to_string(i);
      auto chain = [&](const std::vector<ConvBlock>& blocks,
                       const std::string& stage) {
        for (std::size_t b = 0; b < blocks.size(); ++b)
          detail::visit_block(blocks[b],
                              p + "." + stage + std::to_string(b), out);
      };
      chain(hg.down16, "down16_");
      chain(hg.down8, "down8_");
      chain(hg.bottleneck, "bottleneck_");
      chain(hg.up8, "up8_");
      chain(hg.up16, "up16_");
      if (hg.adapt8) detail::visit_linear(*hg.adapt8, p + ".adapt8", out);
      if (hg.adapt16) detail::visit_linear(*hg.adapt16, p + ".adapt16", out);
    }
    for (std::size_t i = 0; i < m.heads.size(); ++i)
      detail::visit_linear(m.heads[i], "head" + std::to_string(i), out);
    out.push_back({"se.w1", m.se.w1});
    out.push_back({"se.w2", m.se.w2});
  } else {
    for (std::size_t i = 0; i < m.res_blocks.size(); ++i) {
      const std::string p = "res" + std::to_string(i);
      detail::visit_block(m.res_blocks[i].first, p + ".a", out);
      detail::visit_block(m.res_blocks[i].second, p + ".b", out);
    }
  }
  detail::visit_linear(m.output_head, "output_head", out);
  return out;
}

/// Exact count of learnable scalars (weights, biases, BN gains/biases,
/// semantic adjacency logits, SE weights). Running statistics are state,
/// not parameters.
inline std::size_t count_params(const Model& m) {
  std::size_t n = 0;
  for (const auto& e : named_tensors(m))
    if (e.learnable) n += e.tensor.size();
  return n;
}

// ---------------------------------------------------------------------------
// Construction
// ---------------------------------------------------------------------------

inline Model model_init(const NetworkConfig& config,
                        const SkeletonSpec& skeleton, std::uint64_t seed) {
  config.validate();
  {
    auto violations = validate_skeleton(skeleton);
    if (!violations.empty())
      throw ValidationError("model_init: invalid skeleton: " + violations[0]);
  }
  Model m;
  m.config = config;
  m.skeleton = skeleton;
  auto rng = CounterRng::from_path(seed, {rng_tag::kInit});
  const std::size_t k = skeleton.fine().node_count;

  if (config.architecture == Architecture::graphsh) {
    const std::size_t c = config.channels;
    m.pre_layer = GraphConv::init(config.conv_kind, k, 2, c, rng);
    for (std::uint32_t i = 0; i < config.stacks; ++i)
      m.hourglasses.push_back(hourglass_init(
          config.conv_kind, config.hourglass_channels(), skeleton,
          config.dropout_p, static_cast<int>(config.blocks_per_scale), rng));
    const std::size_t head_width = c / config.stacks;
    for (std::uint32_t i = 0; i < config.stacks; ++i)
      m.heads.push_back(NodeLinear::init(c, head_width, rng));
    m.se = SEBlock::init(c, config.se_ratio, rng);
    m.output_head = NodeLinear::init(c, 3, rng);
  } else {
    const std::size_t c = config.seqres_channels;
    m.pre_layer = GraphConv::init(config.conv_kind, k, 2, c, rng);
    for (std::uint32_t i = 0; i < config.seqres_depth; ++i)
      m.res_blocks.emplace_back(
          ConvBlock::init(config.conv_kind, k, c, c, config.dropout_p, rng),
          ConvBlock::init(config.conv_kind, k, c, c, config.dropout_p, rng));
    m.output_head = NodeLinear::init(c, 3, rng);
  }
  return m;
}

// ---------------------------------------------------------------------------
// Forward
// ---------------------------------------------------------------------------

struct ForwardOut {
  Tensor pred3d;                    // [B,16,3]
  std::vector<Tensor> intermediates;  // graphsh: n of [B,16,C/n]
};

inline ForwardOut model_forward(const Model& m, const Tensor& x2d,
                                ForwardCtx& ctx) {
  const Shape& s = x2d.shape();
  if (s.size() != 3 || s[1] != m.skeleton.fine().node_count || s[2] != 2)
    throw ShapeError("model forward expects [B,16,2], got " + shape_str(s));

  ForwardOut out;
  auto h = m.pre_layer.forward(x2d, m.skeleton.fine());
  if (m.config.architecture == Architecture::graphsh) {
    std::vector<Tensor> features;
    for (std::size_t i = 0; i < m.hourglasses.size(); ++i) {
      h = hourglass_forward(m.hourglasses[i], h, m.skeleton, ctx);
      features.push_back(m.heads[i].forward(h));
    }
    out.intermediates = features;
    auto fused = m.se.forward(concat_channels(features));
    out.pred3d = m.output_head.forward(fused);
  } else {
    for (const auto& [a, b] : m.res_blocks) {
      auto inner = b.forward(a.forward(h, m.skeleton.fine(), ctx),
                             m.skeleton.fine(), ctx);
      h = add(h, inner);
    }
    out.pred3d = m.output_head.forward(h);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary model format "GSHM" v1 (little-endian):
//   magic "GSHM" | u16 version |
//   u32 config_len  | config payload (fixed field order, see below) |
//   u32 hash_len(8) | u64 skeleton hash |
//   per tensor in declaration order: u64 count | count x f64
// The config payload carries the normalizer when one is attached, since
// inference needs it to denormalize predictions.
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kModelVersion = 1;

namespace detail {

inline void write_config(std::ostream& out, const Model& m) {
  std::ostringstream payload(std::ios::binary);
  const auto& c = m.config;
  bio::write_le<std::uint8_t>(payload,
                              c.architecture == Architecture::graphsh ? 0 : 1);
  bio::write_le<std::uint8_t>(payload, static_cast<std::uint8_t>(c.conv_kind));
  bio::write_le<std::uint32_t>(payload, c.stacks);
  bio::write_le<std::uint32_t>(payload, c.channels);
  bio::write_le<std::uint32_t>(payload, c.se_ratio);
  bio::write_f64(payload, c.dropout_p);
  bio::write_le<std::uint32_t>(payload, c.blocks_per_scale);
  bio::write_le<std::uint32_t>(payload, c.seqres_depth);
  bio::write_le<std::uint32_t>(payload, c.seqres_channels);
  bio::write_le<std::uint8_t>(payload, m.normalizer.has_value() ? 1 : 0);
  if (m.normalizer) {
    const auto& n = *m.normalizer;
    for (double v : n.input_mean) bio::write_f64(payload, v);
    for (double v : n.input_std) bio::write_f64(payload, v);
    for (double v : n.target_mean) bio::write_f64(payload, v);
    for (double v : n.target_std) bio::write_f64(payload, v);
  }
  const std::string bytes = payload.str();
  bio::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(bytes.size()));
  bio::write_bytes(out, bytes.data(), bytes.size());
}

inline std::pair<NetworkConfig, std::optional<Normalizer>> read_config(
    std::istream& in) {
  const auto len = bio::read_le<std::uint32_t>(in);
  std::string bytes(len, '\0');
  bio::read_bytes(in, bytes.data(), len);
  std::istringstream payload(bytes, std::ios::binary);
  NetworkConfig c;
  const auto arch = bio::read_le<std::uint8_t>(payload);
  if (arch > 1)
    throw IoError(IoErrorCode::bad_format, "model config: bad architecture");
  c.architecture = arch == 0 ? Architecture::graphsh : Architecture::seqres;
  const auto kind = bio::read_le<std::uint8_t>(payload);
  if (kind > 2)
    throw IoError(IoErrorCode::bad_format, "model config: bad conv kind");
  c.conv_kind = static_cast<ConvKind>(kind);
  c.stacks = bio::read_le<std::uint32_t>(payload);
  c.channels = bio::read_le<std::uint32_t>(payload);
  c.se_ratio = bio::read_le<std::uint32_t>(payload);
  c.dropout_p = bio::read_f64(payload);
  c.blocks_per_scale = bio::read_le<std::uint32_t>(payload);
  c.seqres_depth = bio::read_le<std::uint32_t>(payload);
  c.seqres_channels = bio::read_le<std::uint32_t>(payload);
  std::optional<Normalizer> norm;
  if (bio::read_le<std::uint8_t>(payload) != 0) {
    Normalizer n;
    for (double& v : n.input_mean) v = bio::read_f64(payload);
    for (double& v : n.input_std) v = bio::read_f64(payload);
    for (double& v : n.target_mean) v = bio::read_f64(payload);
    for (double& v : n.target_std) v = bio::read_f64(payload);
    norm = n;
  }
  return {c, norm};
}

}  // namespace detail

inline void serialize_model(const Model& m, std::ostream& out) {
  bio::write_magic(out, "GSHM");
  bio::write_le<std::uint16_t>(out, kModelVersion);
  detail::write_config(out, m);
  bio::write_le<std::uint32_t>(out, 8);
  bio::write_le<std::uint64_t>(out, skeleton_hash(m.skeleton));
  for (const auto& e : named_tensors(m)) {
    bio::write_le<std::uint64_t>(out, e.tensor.size());
    for (double v : e.tensor.data()) bio::write_f64(out, v);
  }
}

inline std::string serialize_model(const Model& m) {
  std::ostringstream os(std::ios::binary);
  serialize_model(m, os);
  return os.str();
}

inline Model deserialize_model(std::istream& in, const SkeletonSpec& skeleton) {
  bio::expect_magic(in, "GSHM", "model");
  const auto version = bio::read_le<std::uint16_t>(in);
  if (version != kModelVersion)
    throw IoError(IoErrorCode::version_mismatch,
                  "model: unsupported format version " +
                      std::to_string(version));
  auto [config, normalizer] = detail::read_config(in);
  const auto hash_len = bio::read_le<std::uint32_t>(in);
  if (hash_len != 8)
    throw IoError(IoErrorCode::bad_format, "model: bad skeleton hash section");
  const auto stored_hash = bio::read_le<std::uint64_t>(in);
  if (stored_hash != skeleton_hash(skeleton))
    throw IoError(IoErrorCode::skeleton_mismatch,
                  "model was saved against a different skeleton");

  Model m = model_init(config, skeleton, 0);
  m.normalizer = normalizer;
  for (auto& e : named_tensors(m)) {
    const auto count = bio::read_le<std::uint64_t>(in);
    if (count != e.tensor.size())
      throw IoError(IoErrorCode::corrupted_length,
                    "model: tensor '" + e.name + "' expects " +
                        std::to_string(e.tensor.size()) + " values, found " +
                        std::to_string(count));
    auto& d = e.tensor.leaf_data();
    for (double& v : d) v = bio::read_f64(in);
  }
  return m;
}

inline Model deserialize_model(const std::string& bytes,
                               const SkeletonSpec& skeleton) {
  std::istringstream is(bytes, std::ios::binary);
  return deserialize_model(is, skeleton);
}

inline void save_model(const Model& m, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError(IoErrorCode::io_failure, "cannot open " + path + " for write");
  serialize_model(m, out);
}

inline Model load_model(const std::string& path, const SkeletonSpec& skeleton) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrorCode::io_failure, "cannot open " + path);
  return deserialize_model(in, skeleton);
}

}  // namespace gsh
