#pragma once

// Pose datasets: bit-exact binary + CSV I/O, per-axis normalization fit on
// training data, deterministic batching, and a synthetic articulated-pose
// generator with pinhole projection for desk-scale experiments.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "gsh/errors.hpp"
#include "gsh/io.hpp"
#include "gsh/rng.hpp"
#include "gsh/tensor.hpp"

namespace gsh {

inline constexpr std::size_t kJointCount = 16;

/// One pose pair; targets are millimeters, root-relative (joint 0 at origin).
struct PoseSample {
  std::array<double, kJointCount * 2> input2d{};   // pixel coordinates
  std::array<double, kJointCount * 3> target3d{};  // mm, root-aligned
  std::optional<std::uint16_t> action;
};

/// Per-axis standardization statistics, fit on a training split only.
/// Inputs pool (x, y) over joints and samples; targets pool (X, Y, Z).
struct Normalizer {
  std::array<double, 2> input_mean{}, input_std{{1, 1}};
  std::array<double, 3> target_mean{}, target_std{{1, 1, 1}};

  std::array<double, kJointCount * 2> apply_input(
      const std::array<double, kJointCount * 2>& v) const {
    auto out = v;
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = (out[i] - input_mean[i % 2]) / input_std[i % 2];
    return out;
  }
  std::array<double, kJointCount * 3> apply_target(
      const std::array<double, kJointCount * 3>& v) const {
    auto out = v;
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = (out[i] - target_mean[i % 3]) / target_std[i % 3];
    return out;
  }
  std::array<double, kJointCount * 3> invert_target(
      const std::array<double, kJointCount * 3>& v) const {
    auto out = v;
    for (std::size_t i = 0; i < out.size(); ++i)
      out[i] = out[i] * target_std[i % 3] + target_mean[i % 3];
    return out;
  }
};

struct PoseDataset {
  std::vector<PoseSample> samples;
  std::optional<Normalizer> normalizer;
  std::size_t joint_count = kJointCount;

  std::size_t size() const { return samples.size(); }
  bool has_actions() const {
    return !samples.empty() && samples.front().action.has_value();
  }
};

/// Translates targets so joint 0 sits at the origin.
inline std::array<double, kJointCount * 3> root_align(
    const std::array<double, kJointCount * 3>& t) {
  auto out = t;
  const double rx = t[0], ry = t[1], rz = t[2];
  for (std::size_t k = 0; k < kJointCount; ++k) {
    out[k * 3 + 0] -= rx;
    out[k * 3 + 1] -= ry;
    out[k * 3 + 2] -= rz;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Binary format "GSHP" v1 (little-endian):
//   magic "GSHP" | u16 version | u32 N | u32 K (= 16) | u8 has_actions |
//   N x { K*2 f32 input | K*3 f32 target | u16 action if flagged }
// Coordinates are stored as f32; in-memory doubles are narrowed on write.
// ---------------------------------------------------------------------------

inline constexpr std::uint16_t kDatasetVersion = 1;

inline void write_dataset(const PoseDataset& ds, std::ostream& out) {
  bio::write_magic(out, "GSHP");
  bio::write_le<std::uint16_t>(out, kDatasetVersion);
  bio::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.size()));
  bio::write_le<std::uint32_t>(out, static_cast<std::uint32_t>(ds.joint_count));
  const bool actions = ds.has_actions();
  bio::write_le<std::uint8_t>(out, actions ? 1 : 0);
  for (const auto& s : ds.samples) {
    for (double v : s.input2d) {
      if (!std::isfinite(v))
        throw IoError(IoErrorCode::nan_payload,
                      "dataset write: non-finite input coordinate");
      bio::write_f32(out, static_cast<float>(v));
    }
    for (double v : s.target3d) {
      if (!std::isfinite(v))
        throw IoError(IoErrorCode::nan_payload,
                      "dataset write: non-finite target coordinate");
      bio::write_f32(out, static_cast<float>(v));
    }
    if (actions) bio::write_le<std::uint16_t>(out, s.action.value_or(0));
  }
}

inline void write_dataset(const PoseDataset& ds, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out)
    throw IoError(IoErrorCode::io_failure, "cannot open " + path + " for write");
  write_dataset(ds, out);
}

inline PoseDataset load_dataset(std::istream& in) {
  bio::expect_magic(in, "GSHP", "dataset");
  const auto version = bio::read_le<std::uint16_t>(in);
  if (version != kDatasetVersion)
    throw IoError(IoErrorCode::version_mismatch,
                  "dataset: unsupported version " + std::to_string(version));
  const auto n = bio::read_le<std::uint32_t>(in);
  const auto k = bio::read_le<std::uint32_t>(in);
  if (k != kJointCount)
    throw IoError(IoErrorCode::bad_format,
                  "dataset: expected joint count 16, got " + std::to_string(k));
  const bool actions = bio::read_le<std::uint8_t>(in) != 0;
  PoseDataset ds;
  ds.samples.resize(n);
  for (auto& s : ds.samples) {
    for (double& v : s.input2d) v = bio::read_f32(in);
    for (double& v : s.target3d) v = bio::read_f32(in);
    if (actions) s.action = bio::read_le<std::uint16_t>(in);
    for (double v : s.input2d)
      if (!std::isfinite(v))
        throw IoError(IoErrorCode::nan_payload,
                      "dataset: non-finite input coordinate");
    for (double v : s.target3d)
      if (!std::isfinite(v))
        throw IoError(IoErrorCode::nan_payload,
                      "dataset: non-finite target coordinate");
  }
  return ds;
}

inline PoseDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError(IoErrorCode::io_failure, "cannot open " + path);
  return load_dataset(in);
}

// CSV fixture format, one sample per line:
//   [action,] x0,y0,...,x15,y15, X0,Y0,Z0,...,X15,Y15,Z15
// 80 columns without an action id, 81 with one (action first).
inline void export_csv(const PoseDataset& ds, std::ostream& out) {
  out.precision(17);
  for (const auto& s : ds.samples) {
    bool first = true;
    auto emit = [&](double v) {
      if (!first) out << ',';
      out << v;
      first = false;
    };
    if (s.action) {
      out << *s.action;
      first = false;
    }
    for (double v : s.input2d) emit(v);
    for (double v : s.target3d) emit(v);
    out << '\n';
  }
}

inline PoseDataset import_csv(std::istream& in) {
  PoseDataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::vector<double> cols;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        cols.push_back(std::stod(cell));
      } catch (const std::exception&) {
        throw IoError(IoErrorCode::bad_format,
                      "csv line " + std::to_string(lineno) + ": bad number '" +
                          cell + "'");
      }
    }
    const std::size_t plain = kJointCount * 5;
    if (cols.size() != plain && cols.size() != plain + 1)
      throw IoError(IoErrorCode::bad_format,
                    "csv line " + std::to_string(lineno) + ": expected " +
                        std::to_string(plain) + " or " +
                        std::to_string(plain + 1) + " columns, got " +
                        std::to_string(cols.size()));
    PoseSample s;
    std::size_t off = 0;
    if (cols.size() == plain + 1)
      s.action = static_cast<std::uint16_t>(cols[off++]);
    for (double& v : s.input2d) v = cols[off++];
    for (double& v : s.target3d) v = cols[off++];
    ds.samples.push_back(s);
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

inline Normalizer fit_normalizer(const PoseDataset& train) {
  if (train.samples.empty())
    throw ValidationError("fit_normalizer: empty training set");
  Normalizer n;
  std::array<double, 2> in_sum{}, in_sq{};
  std::array<double, 3> tg_sum{}, tg_sq{};
  for (const auto& s : train.samples) {
    for (std::size_t i = 0; i < s.input2d.size(); ++i) {
      in_sum[i % 2] += s.input2d[i];
      in_sq[i % 2] += s.input2d[i] * s.input2d[i];
    }
    const auto aligned = root_align(s.target3d);
    for (std::size_t i = 0; i < aligned.size(); ++i) {
      tg_sum[i % 3] += aligned[i];
      tg_sq[i % 3] += aligned[i] * aligned[i];
    }
  }
  const double in_n = static_cast<double>(train.size() * kJointCount);
  for (std::size_t a = 0; a < 2; ++a) {
    n.input_mean[a] = in_sum[a] / in_n;
    const double var = in_sq[a] / in_n - n.input_mean[a] * n.input_mean[a];
    n.input_std[a] = std::max(std::sqrt(std::max(var, 0.0)), 1e-8);
  }
  for (std::size_t a = 0; a < 3; ++a) {
    n.target_mean[a] = tg_sum[a] / in_n;
    const double var = tg_sq[a] / in_n - n.target_mean[a] * n.target_mean[a];
    n.target_std[a] = std::max(std::sqrt(std::max(var, 0.0)), 1e-8);
  }
  return n;
}

/// Builds normalized batch tensors: x [B,16,2], y [B,16,3].
inline std::pair<Tensor, Tensor> make_batch_tensors(
    const PoseDataset& ds, const Normalizer& n,
    const std::vector<std::size_t>& indices) {
  const std::size_t b = indices.size();
  std::vector<double> x(b * kJointCount * 2), y(b * kJointCount * 3);
  for (std::size_t i = 0; i < b; ++i) {
    const auto& s = ds.samples.at(indices[i]);
    const auto in = n.apply_input(s.input2d);
    const auto tg = n.apply_target(root_align(s.target3d));
    std::copy(in.begin(), in.end(), x.begin() + i * in.size());
    std::copy(tg.begin(), tg.end(), y.begin() + i * tg.size());
  }
  return {Tensor::from({b, kJointCount, 2}, std::move(x)),
          Tensor::from({b, kJointCount, 3}, std::move(y))};
}

// ---------------------------------------------------------------------------
// Batching: per-epoch uniform shuffle driven by (seed, epoch); the final
// short batch is included and iteration order is reproducible.
// ---------------------------------------------------------------------------

inline std::vector<std::vector<std::size_t>> epoch_batches(
    std::size_t n, std::size_t batch_size, std::uint64_t seed,
    std::uint64_t epoch) {
  if (batch_size == 0) throw ValidationError("batch size must be >= 1");
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  auto rng = CounterRng::from_path(seed, {rng_tag::kShuffle, epoch});
  for (std::size_t i = n; i > 1; --i)
    std::swap(perm[i - 1], perm[rng.next_below(i)]);
  std::vector<std::vector<std::size_t>> batches;
  for (std::size_t off = 0; off < n; off += batch_size) {
    const std::size_t end = std::min(off + batch_size, n);
    batches.emplace_back(perm.begin() + off, perm.begin() + end);
  }
  return batches;
}

class BatchIter {
 public:
  BatchIter(std::size_t n, std::size_t batch_size, std::uint64_t seed)
      : n_(n), batch_size_(batch_size), seed_(seed) {
    if (n == 0) throw ValidationError("BatchIter: empty dataset");
    refill();
  }

  std::vector<std::size_t> next() {
    if (cursor_ >= current_.size()) {
      ++epoch_;
      refill();
    }
    return current_[cursor_++];
  }

  std::uint64_t epoch() const { return epoch_; }

 private:
  void refill() {
    current_ = epoch_batches(n_, batch_size_, seed_, epoch_);
    cursor_ = 0;
  }
  std::size_t n_, batch_size_;
  std::uint64_t seed_;
  std::uint64_t epoch_ = 0;
  std::vector<std::vector<std::size_t>> current_;
  std::size_t cursor_ = 0;
};

// ---------------------------------------------------------------------------
// Synthetic data: articulated poses with fixed bone lengths and bounded
// joint-angle perturbations, projected through a pinhole camera.
// ---------------------------------------------------------------------------

struct CameraParams {
  double fx = 1150.0, fy = 1150.0;  // focal lengths, pixels
  double cx = 500.0, cy = 500.0;    // principal point
};

struct SynthResult {
  PoseDataset dataset;
  std::vector<std::array<double, 3>> root_positions;  // camera frame, mm
  CameraParams camera;
};

namespace detail {

struct Vec3 {
  double x = 0, y = 0, z = 0;
};

struct Mat3 {
  // Row-major.
  std::array<double, 9> m{1, 0, 0, 0, 1, 0, 0, 0, 1};

  Vec3 apply(const Vec3& v) const {
    return {m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z};
  }
  Mat3 compose(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0;
        for (int k = 0; k < 3; ++k) acc += m[i * 3 + k] * o.m[k * 3 + j];
        r.m[i * 3 + j] = acc;
      }
    return r;
  }
  static Mat3 euler(double rx, double ry, double rz) {
    const double cx = std::cos(rx), sx = std::sin(rx);
    const double cy = std::cos(ry), sy = std::sin(ry);
    const double cz = std::cos(rz), sz = std::sin(rz);
    Mat3 X{{1, 0, 0, 0, cx, -sx, 0, sx, cx}};
    Mat3 Y{{cy, 0, sy, 0, 1, 0, -sy, 0, cy}};
    Mat3 Z{{cz, -sz, 0, sz, cz, 0, 0, 0, 1}};
    return Z.compose(Y).compose(X);
  }
};

// Kinematic tree for the default 16-joint skeleton: parent index and rest
// offset (camera-like frame: x right, y down, z toward the camera axis).
// Bone lengths are millimeters and identical for every generated sample.
struct BoneDef {
  int parent;
  Vec3 offset;
  double max_angle;  // per-axis Euler perturbation bound, radians
};

inline const std::array<BoneDef, kJointCount>& bone_table() {
  static const std::array<BoneDef, kJointCount> table = {{
      {-1, {0, 0, 0}, 0.0},          // 0 Pelvis (root)
      {0, {-132, 0, 0}, 0.25},       // 1 RHip
      {1, {0, 442, 0}, 0.60},        // 2 RKnee
      {2, {0, 454, 0}, 0.60},        // 3 RAnkle
      {0, {132, 0, 0}, 0.25},        // 4 LHip
      {4, {0, 442, 0}, 0.60},        // 5 LKnee
      {5, {0, 454, 0}, 0.60},        // 6 LAnkle
      {0, {0, -233, 0}, 0.20},       // 7 Spine
      {7, {0, -257, 0}, 0.20},       // 8 Thorax
      {8, {0, -185, 0}, 0.35},       // 9 Head
      {8, {150, 25, 0}, 0.45},       // 10 LShoulder
      {10, {0, 279, 0}, 0.70},       // 11 LElbow
      {11, {0, 252, 0}, 0.70},       // 12 LWrist
      {8, {-150, 25, 0}, 0.45},      // 13 RShoulder
      {13, {0, 279, 0}, 0.70},       // 14 RElbow
      {14, {0, 252, 0}, 0.70},       // 15 RWrist
  }};
  return table;
}

}  // namespace detail

/// Mean bone length of the synthetic skeleton, millimeters.
inline double synth_mean_bone_length() {
  double total = 0.0;
  std::size_t bones = 0;
  for (const auto& b : detail::bone_table()) {
    if (b.parent < 0) continue;
    total += std::sqrt(b.offset.x * b.offset.x + b.offset.y * b.offset.y +
                       b.offset.z * b.offset.z);
    ++bones;
  }
  return total / static_cast<double>(bones);
}

inline SynthResult synth_generate(std::size_t n, std::uint64_t seed,
                                  const CameraParams& camera = {},
                                  std::size_t action_count = 0) {
  if (n < 1) throw ValidationError("synth_generate: n must be >= 1");
  if (camera.fx == 0.0 || camera.fy == 0.0)
    throw ConfigError("synth_generate: zero focal length");

  SynthResult result;
  result.camera = camera;
  result.dataset.samples.reserve(n);
  const auto& bones = detail::bone_table();

  for (std::size_t i = 0; i < n; ++i) {
    auto rng = CounterRng::from_path(seed, {rng_tag::kSynthPose, i});

    // Whole-body yaw plus bounded per-joint perturbations composed along
    // the kinematic chains.
    std::array<detail::Mat3, kJointCount> global;
    std::array<detail::Vec3, kJointCount> pos;
    const double yaw = rng.uniform(-3.14159265358979, 3.14159265358979);
    global[0] = detail::Mat3::euler(0, yaw, 0);
    pos[0] = {0, 0, 0};
    for (std::size_t j = 1; j < kJointCount; ++j) {
      const auto& bone = bones[j];
      const double a = bone.max_angle;
      const auto local = detail::Mat3::euler(
          rng.uniform(-a, a), rng.uniform(-a, a), rng.uniform(-a, a));
      global[j] = global[bone.parent].compose(local);
      pos[j] = pos[bone.parent];
      const auto limb = global[bone.parent].apply(bone.offset);
      pos[j].x += limb.x;
      pos[j].y += limb.y;
      pos[j].z += limb.z;
    }

    // Root translation keeps the whole body in front of the camera.
    std::array<double, 3> root = {rng.uniform(-400, 400),
                                  rng.uniform(-250, 250),
                                  rng.uniform(3500, 5500)};

    PoseSample s;
    for (std::size_t j = 0; j < kJointCount; ++j) {
      const double wx = pos[j].x + root[0];
      const double wy = pos[j].y + root[1];
      const double wz = pos[j].z + root[2];
      s.input2d[j * 2 + 0] = camera.fx * wx / wz + camera.cx;
      s.input2d[j * 2 + 1] = camera.fy * wy / wz + camera.cy;
      s.target3d[j * 3 + 0] = pos[j].x - pos[0].x;
      s.target3d[j * 3 + 1] = pos[j].y - pos[0].y;
      s.target3d[j * 3 + 2] = pos[j].z - pos[0].z;
    }
    if (action_count > 0) {
      auto arng = CounterRng::from_path(seed, {rng_tag::kSynthAction, i});
      s.action = static_cast<std::uint16_t>(arng.next_below(action_count));
    }
    result.dataset.samples.push_back(s);
    result.root_positions.push_back(root);
  }
  return result;
}

}  // namespace gsh
