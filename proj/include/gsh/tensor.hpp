#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
// The operation set is exactly what the pose-lifting network needs: matmul
// (plain and batch-broadcast), per-node matmul, a few elementwise kinds with
// limited channel broadcasting, paired node pooling/unpooling, batch norm,
// inverted dropout, channel concatenation, node averaging, masked row
// softmax and full reduction. No general broadcasting, no views, no GPU.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <utility>
#include <vector>

#include "gsh/errors.hpp"
#include "gsh/rng.hpp"

namespace gsh {

using Shape = std::vector<std::size_t>;
using GroupPairs = std::vector<std::pair<std::size_t, std::size_t>>;

enum class Mode { train, infer };

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

enum class OpKind {
  leaf,
  matmul,
  per_node_matmul,
  transpose,
  relu,
  sigmoid,
  add,
  multiply,
  scale,
  group_max,
  duplicate_expand,
  batch_norm,
  dropout,
  concat_channels,
  mean_over_nodes,
  masked_row_softmax,
  sum_all,
};

struct Node;

// Receives the node itself (for output data and inputs), the upstream
// gradient, and one accumulation buffer per input (null when that input does
// not require a gradient). Implementations add into the buffers.
using BackwardFn = std::function<void(const Node&, const std::vector<double>&,
                                      const std::vector<std::vector<double>*>&)>;

struct Node {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  OpKind op = OpKind::leaf;
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;  // set iff requires_grad and op != leaf
};

/// Value-semantic handle to a computation-graph node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> data,
                     bool requires_grad = false) {
    if (numel(shape) != data.size())
      throw ShapeError("tensor data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->data = std::move(data);
    n->requires_grad = requires_grad;
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> d(numel(shape), 0.0);
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor constant(Shape shape, double value, bool requires_grad = false) {
    std::vector<double> d(numel(shape), value);
    return from(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(double value) { return from({1}, {value}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->data.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape[i]; }
  std::size_t rank() const { return node_->shape.size(); }
  const std::vector<double>& data() const { return node_->data; }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->op == OpKind::leaf; }
  OpKind op() const { return node_->op; }

  /// In-place access for leaves (optimizer updates, finite differences).
  std::vector<double>& leaf_data() const {
    if (!is_leaf())
      throw ValidationError("leaf_data() called on a non-leaf tensor");
    return node_->data;
  }

  double at(std::initializer_list<std::size_t> idx) const {
    std::size_t off = 0;
    std::size_t i = 0;
    for (std::size_t v : idx) off = off * node_->shape[i++] + v;
    return node_->data[off];
  }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {

inline Tensor make_op(OpKind kind, Shape shape, std::vector<double> data,
                      std::vector<std::shared_ptr<Node>> inputs,
                      BackwardFn backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = kind;
  n->inputs = std::move(inputs);
  for (const auto& in : n->inputs)
    if (in->requires_grad) n->requires_grad = true;
  if (n->requires_grad) n->backward = std::move(backward);
  return Tensor(std::move(n));
}

// C[m,n] += A[m,k] * B[k,n]
inline void mm_nn(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// C[m,k] += A[m,n] * B^T, B is [k,n]
inline void mm_nt(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t n, std::size_t k) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double* brow = b + p * n;
      double acc = 0.0;
      for (std::size_t j = 0; j < n; ++j) acc += arow[j] * brow[j];
      c[i * k + p] += acc;
    }
  }
}

// C[k,n] += A^T * B, A is [m,k], B is [m,n]
inline void mm_tn(const double* a, const double* b, double* c, std::size_t m,
                  std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* brow = b + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a[i * k + p];
      if (av == 0.0) continue;
      double* crow = c + p * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// matmul
//
// Supported shape combinations (the network needs all three):
//   [m,k] x [k,n]     -> [m,n]
//   [B,m,k] x [k,n]   -> [B,m,n]   shared right operand
//   [m,k] x [B,k,n]   -> [B,m,n]   shared left operand
// ---------------------------------------------------------------------------
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Shape& sa = a.shape();
  const Shape& sb = b.shape();
  auto fail = [&] {
    throw ShapeError("matmul: incompatible shapes " + shape_str(sa) + " and " +
                     shape_str(sb));
  };

  if (sa.size() == 2 && sb.size() == 2) {
    const std::size_t m = sa[0], k = sa[1], n = sb[1];
    if (sb[0] != k) fail();
    std::vector<double> out(m * n, 0.0);
    detail::mm_nn(a.data().data(), b.data().data(), out.data(), m, k, n);
    return detail::make_op(
        OpKind::matmul, {m, n}, std::move(out),
        {a.node_ptr(), b.node_ptr()},
        [m, k, n](const Node& self, const std::vector<double>& g,
                  const std::vector<std::vector<double>*>& gin) {
          const double* av = self.inputs[0]->data.data();
          const double* bv = self.inputs[1]->data.data();
          if (gin[0]) detail::mm_nt(g.data(), bv, gin[0]->data(), m, n, k);
          if (gin[1]) detail::mm_tn(av, g.data(), gin[1]->data(), m, k, n);
        });
  }

  if (sa.size() == 3 && sb.size() == 2) {
    const std::size_t bsz = sa[0], m = sa[1], k = sa[2], n = sb[1];
    if (sb[0] != k) fail();
    std::vector<double> out(bsz * m * n, 0.0);
    for (std::size_t i = 0; i < bsz; ++i)
      detail::mm_nn(a.data().data() + i * m * k, b.data().data(),
                    out.data() + i * m * n, m, k, n);
    return detail::make_op(
        OpKind::matmul, {bsz, m, n}, std::move(out),
        {a.node_ptr(), b.node_ptr()},
        [bsz, m, k, n](const Node& self, const std::vector<double>& g,
                       const std::vector<std::vector<double>*>& gin) {
          const double* av = self.inputs[0]->data.data();
          const double* bv = self.inputs[1]->data.data();
          for (std::size_t i = 0; i < bsz; ++i) {
            if (gin[0])
              detail::mm_nt(g.data() + i * m * n, bv,
                            gin[0]->data() + i * m * k, m, n, k);
            if (gin[1])
              detail::mm_tn(av + i * m * k, g.data() + i * m * n,
                            gin[1]->data(), m, k, n);
          }
        });
  }

  if (sa.size() == 2 && sb.size() == 3) {
    const std::size_t bsz = sb[0], m = sa[0], k = sa[1], n = sb[2];
    if (sb[1] != k) fail();
    std::vector<double> out(bsz * m * n, 0.0);
    for (std::size_t i = 0; i < bsz; ++i)
      detail::mm_nn(a.data().data(), b.data().data() + i * k * n,
                    out.data() + i * m * n, m, k, n);
    return detail::make_op(
        OpKind::matmul, {bsz, m, n}, std::move(out),
        {a.node_ptr(), b.node_ptr()},
        [bsz, m, k, n](const Node& self, const std::vector<double>& g,
                       const std::vector<std::vector<double>*>& gin) {
          const double* av = self.inputs[0]->data.data();
          const double* bv = self.inputs[1]->data.data();
          for (std::size_t i = 0; i < bsz; ++i) {
            if (gin[0])
              detail::mm_nt(g.data() + i * m * n, bv + i * k * n,
                            gin[0]->data(), m, n, k);
            if (gin[1])
              detail::mm_tn(av, g.data() + i * m * n,
                            gin[1]->data() + i * k * n, m, k, n);
          }
        });
  }

  fail();
  return {};
}

/// Y[b,j,:] = X[b,j,:] . W_j with one weight matrix per node.
inline Tensor per_node_matmul(const Tensor& x,
                              const std::vector<Tensor>& weights) {
  const Shape& sx = x.shape();
  if (sx.size() != 3)
    throw ShapeError("per_node_matmul: input must be [B,K,C], got " +
                     shape_str(sx));
  const std::size_t bsz = sx[0], kn = sx[1], cin = sx[2];
  if (weights.size() != kn)
    throw ValidationError("per_node_matmul: expected " + std::to_string(kn) +
                          " weight matrices, got " +
                          std::to_string(weights.size()));
  const Shape& sw = weights[0].shape();
  if (sw.size() != 2 || sw[0] != cin)
    throw ShapeError("per_node_matmul: weight shape " + shape_str(sw) +
                     " incompatible with input " + shape_str(sx));
  const std::size_t cout = sw[1];
  std::vector<std::shared_ptr<Node>> inputs;
  inputs.reserve(kn + 1);
  inputs.push_back(x.node_ptr());
  for (const auto& w : weights) {
    if (w.shape() != sw)
      throw ShapeError("per_node_matmul: weight shapes differ");
    inputs.push_back(w.node_ptr());
  }

  std::vector<double> out(bsz * kn * cout, 0.0);
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t j = 0; j < kn; ++j) {
      const double* xr = x.data().data() + (b * kn + j) * cin;
      const double* w = weights[j].data().data();
      double* yr = out.data() + (b * kn + j) * cout;
      for (std::size_t p = 0; p < cin; ++p) {
        const double xv = xr[p];
        if (xv == 0.0) continue;
        const double* wrow = w + p * cout;
        for (std::size_t q = 0; q < cout; ++q) yr[q] += xv * wrow[q];
      }
    }

  return detail::make_op(
      OpKind::per_node_matmul, {bsz, kn, cout}, std::move(out),
      std::move(inputs),
      [bsz, kn, cin, cout](const Node& self, const std::vector<double>& g,
                           const std::vector<std::vector<double>*>& gin) {
        const double* xd = self.inputs[0]->data.data();
        for (std::size_t b = 0; b < bsz; ++b)
          for (std::size_t j = 0; j < kn; ++j) {
            const double* gr = g.data() + (b * kn + j) * cout;
            const double* xr = xd + (b * kn + j) * cin;
            if (gin[0]) {
              const double* w = self.inputs[1 + j]->data.data();
              double* gx = gin[0]->data() + (b * kn + j) * cin;
              for (std::size_t p = 0; p < cin; ++p) {
                const double* wrow = w + p * cout;
                double acc = 0.0;
                for (std::size_t q = 0; q < cout; ++q)
                  acc += gr[q] * wrow[q];
                gx[p] += acc;
              }
            }
            if (gin[1 + j]) {
              double* gw = gin[1 + j]->data();
              for (std::size_t p = 0; p < cin; ++p) {
                const double xv = xr[p];
                if (xv == 0.0) continue;
                double* gwrow = gw + p * cout;
                for (std::size_t q = 0; q < cout; ++q)
                  gwrow[q] += xv * gr[q];
              }
            }
          }
      });
}

inline Tensor transpose(const Tensor& a) {
  const Shape& s = a.shape();
  if (s.size() != 2)
    throw ShapeError("transpose: expected rank-2 tensor, got " + shape_str(s));
  const std::size_t m = s[0], n = s[1];
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.data()[i * n + j];
  return detail::make_op(
      OpKind::transpose, {n, m}, std::move(out), {a.node_ptr()},
      [m, n](const Node&, const std::vector<double>& g,
             const std::vector<std::vector<double>*>& gin) {
        if (!gin[0]) return;
        for (std::size_t j = 0; j < n; ++j)
          for (std::size_t i = 0; i < m; ++i)
            (*gin[0])[i * n + j] += g[j * m + i];
      });
}

inline Tensor relu(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = x.data()[i] > 0.0 ? x.data()[i] : 0.0;
  return detail::make_op(
      OpKind::relu, x.shape(), std::move(out), {x.node_ptr()},
      [](const Node& self, const std::vector<double>& g,
         const std::vector<std::vector<double>*>& gin) {
        if (!gin[0]) return;
        const auto& xd = self.inputs[0]->data;
        for (std::size_t i = 0; i < g.size(); ++i)
          if (xd[i] > 0.0) (*gin[0])[i] += g[i];
      });
}

inline Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i)
    out[i] = 1.0 / (1.0 + std::exp(-x.data()[i]));
  return detail::make_op(
      OpKind::sigmoid, x.shape(), std::move(out), {x.node_ptr()},
      [](const Node& self, const std::vector<double>& g,
         const std::vector<std::vector<double>*>& gin) {
        if (!gin[0]) return;
        const auto& y = self.data;
        for (std::size_t i = 0; i < g.size(); ++i)
          (*gin[0])[i] += g[i] * y[i] * (1.0 - y[i]);
      });
}

namespace detail {

// Broadcast layouts accepted by binary elementwise kinds. `small` is the
// operand being broadcast against `big`:
//   same      identical shapes
//   channel   small is [C], big is [...,C]
//   per_node  small is [B,C], big is [B,K,C]
enum class Bcast { same, channel, per_node };

inline Bcast classify_bcast(const Shape& big, const Shape& small) {
  if (big == small) return Bcast::same;
  if (small.size() == 1 && !big.empty() && big.back() == small[0])
    return Bcast::channel;
  if (small.size() == 2 && big.size() == 3 && big[0] == small[0] &&
      big[2] == small[1])
    return Bcast::per_node;
  throw ShapeError("elementwise: incompatible shapes " + shape_str(big) +
                   " and " + shape_str(small));
}

// Index of the `small` entry matching flat index `i` of `big`.
struct BcastMap {
  Bcast kind;
  std::size_t channels = 0;   // channel: trailing dim
  std::size_t nodes = 0;      // per_node: middle dim
  std::size_t small_index(std::size_t i) const {
    switch (kind) {
      case Bcast::same: return i;
      case Bcast::channel: return i % channels;
      case Bcast::per_node: {
        const std::size_t c = i % channels;
        const std::size_t b = i / (nodes * channels);
        return b * channels + c;
      }
    }
    return 0;
  }
};

inline BcastMap make_bcast_map(const Shape& big, const Shape& small) {
  BcastMap m{classify_bcast(big, small)};
  m.channels = big.back();
  if (m.kind == Bcast::per_node) m.nodes = big[1];
  return m;
}

template <class Fwd, class BwdBig, class BwdSmall>
Tensor binary_elementwise(OpKind kind, const Tensor& a, const Tensor& b,
                          Fwd fwd, BwdBig bwd_big, BwdSmall bwd_small) {
  // Orient so `big` has at least the rank of `small`.
  const bool a_big = a.size() >= b.size();
  const Tensor& big = a_big ? a : b;
  const Tensor& small = a_big ? b : a;
  const BcastMap map = make_bcast_map(big.shape(), small.shape());

  std::vector<double> out(big.size());
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double bi = big.data()[i];
    const double si = small.data()[map.small_index(i)];
    out[i] = a_big ? fwd(bi, si) : fwd(si, bi);
  }
  return make_op(
      kind, big.shape(), std::move(out), {a.node_ptr(), b.node_ptr()},
      [a_big, map, bwd_big, bwd_small](
          const Node& self, const std::vector<double>& g,
          const std::vector<std::vector<double>*>& gin) {
        const Node& big_n = a_big ? *self.inputs[0] : *self.inputs[1];
        const Node& small_n = a_big ? *self.inputs[1] : *self.inputs[0];
        std::vector<double>* gbig = a_big ? gin[0] : gin[1];
        std::vector<double>* gsmall = a_big ? gin[1] : gin[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
          const std::size_t si = map.small_index(i);
          const double bv = big_n.data[i];
          const double sv = small_n.data[si];
          if (gbig) (*gbig)[i] += g[i] * bwd_big(bv, sv);
          if (gsmall) (*gsmall)[si] += g[i] * bwd_small(bv, sv);
        }
      });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      OpKind::add, a, b, [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor multiply(const Tensor& a, const Tensor& b) {
  return detail::binary_elementwise(
      OpKind::multiply, a, b, [](double x, double y) { return x * y; },
      [](double, double s) { return s; }, [](double bv, double) { return bv; });
}

inline Tensor scale(const Tensor& x, double factor) {
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x.data()[i] * factor;
  return detail::make_op(
      OpKind::scale, x.shape(), std::move(out), {x.node_ptr()},
      [factor](const Node&, const std::vector<double>& g,
               const std::vector<std::vector<double>*>& gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i] * factor;
      });
}

inline Tensor subtract(const Tensor& a, const Tensor& b) {
  return add(a, scale(b, -1.0));
}

namespace detail {

inline void validate_groups(const GroupPairs& groups, std::size_t fine_count) {
  if (fine_count % 2 != 0)
    throw ValidationError("group pooling: node count " +
                          std::to_string(fine_count) + " is odd");
  if (groups.size() * 2 != fine_count)
    throw ValidationError("group pooling: " + std::to_string(groups.size()) +
                          " pairs cannot cover " + std::to_string(fine_count) +
                          " nodes");
  std::vector<bool> seen(fine_count, false);
  for (const auto& [a, b] : groups) {
    if (a >= fine_count || b >= fine_count)
      throw ValidationError("group pooling: node index out of range");
    if (a == b || seen[a] || seen[b])
      throw ValidationError("group pooling: non-disjoint groups");
    seen[a] = seen[b] = true;
  }
}

// Pooled ops accept [K,C] or [B,K,C]; returns (batch, K, C) with batch=1
// for the rank-2 form.
inline std::array<std::size_t, 3> node_axes(const Shape& s, const char* what) {
  if (s.size() == 2) return {1, s[0], s[1]};
  if (s.size() == 3) return {s[0], s[1], s[2]};
  throw ShapeError(std::string(what) + ": expected [K,C] or [B,K,C], got " +
                   shape_str(s));
}

}  // namespace detail

/// Pairwise max over grouped nodes; gradient routes to the argmax row
/// (ties go to the lower node index).
inline Tensor group_max(const Tensor& x, const GroupPairs& groups) {
  const auto [bsz, kn, cn] = detail::node_axes(x.shape(), "group_max");
  detail::validate_groups(groups, kn);
  const std::size_t gn = groups.size();

  Shape out_shape = x.shape();
  out_shape[out_shape.size() - 2] = gn;
  std::vector<double> out(bsz * gn * cn);
  // Winner row per output entry, as the fine node index.
  std::vector<std::uint32_t> argmax(bsz * gn * cn);
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t g = 0; g < gn; ++g) {
      const std::size_t lo = std::min(groups[g].first, groups[g].second);
      const std::size_t hi = std::max(groups[g].first, groups[g].second);
      const double* xlo = x.data().data() + (b * kn + lo) * cn;
      const double* xhi = x.data().data() + (b * kn + hi) * cn;
      double* o = out.data() + (b * gn + g) * cn;
      std::uint32_t* am = argmax.data() + (b * gn + g) * cn;
      for (std::size_t c = 0; c < cn; ++c) {
        if (xhi[c] > xlo[c]) {
          o[c] = xhi[c];
          am[c] = static_cast<std::uint32_t>(hi);
        } else {
          o[c] = xlo[c];
          am[c] = static_cast<std::uint32_t>(lo);
        }
      }
    }

  return detail::make_op(
      OpKind::group_max, std::move(out_shape), std::move(out), {x.node_ptr()},
      [bsz = bsz, kn = kn, cn = cn, gn, argmax = std::move(argmax)](
          const Node&, const std::vector<double>& g,
          const std::vector<std::vector<double>*>& gin) {
        if (!gin[0]) return;
        for (std::size_t b = 0; b < bsz; ++b)
          for (std::size_t gi = 0; gi < gn; ++gi)
            for (std::size_t c = 0; c < cn; ++c) {
              const std::size_t oi = (b * gn + gi) * cn + c;
              (*gin[0])[(b * kn + argmax[oi]) * cn + c] += g[oi];
            }
      });
}

/// Copies each coarse row to both member fine rows; gradient sums the two.
inline Tensor duplicate_expand(const Tensor& y, const GroupPairs& groups) {
  const auto [bsz, gn, cn] = detail::node_axes(y.shape(), "duplicate_expand");
  const std::size_t kn = gn * 2;
  detail::validate_groups(groups, kn);
  if (groups.size() != gn)
    throw ValidationError("duplicate_expand: group count " +
                          std::to_string(groups.size()) +
                          " does not match row count " + std::to_string(gn));

  Shape out_shape = y.shape();
  out_shape[out_shape.size() - 2] = kn;
  std::vector<double> out(bsz * kn * cn);
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t g = 0; g < gn; ++g) {
      const double* src = y.data().data() + (b * gn + g) * cn;
      double* da = out.data() + (b * kn + groups[g].first) * cn;
      double* db = out.data() + (b * kn + groups[g].second) * cn;
      std::copy(src, src + cn, da);
      std::copy(src, src + cn, db);
    }

  return detail::make_op(
      OpKind::duplicate_expand, std::move(out_shape), std::move(out),
      {y.node_ptr()},
      [bsz = bsz, gn = gn, cn = cn, kn, groups](
          const Node&, const std::vector<double>& g,
          const std::vector<std::vector<double>*>& gin) {
        if (!gin[0]) return;
        for (std::size_t b = 0; b < bsz; ++b)
          for (std::size_t gi = 0; gi < gn; ++gi) {
            const double* ga = g.data() + (b * kn + groups[gi].first) * cn;
            const double* gb = g.data() + (b * kn + groups[gi].second) * cn;
            double* dst = gin[0]->data() + (b * gn + gi) * cn;
            for (std::size_t c = 0; c < cn; ++c) dst[c] += ga[c] + gb[c];
          }
      });
}

// ---------------------------------------------------------------------------
// Batch normalization over the batch and node axes, per channel.
// ---------------------------------------------------------------------------
struct BatchNormParams {
  Tensor gain;          // [C], learnable
  Tensor bias;          // [C], learnable
  Tensor running_mean;  // [C], state (updated by train-mode forward)
  Tensor running_var;   // [C], state
  double momentum = 0.1;
  double eps = 1e-5;

  static BatchNormParams init(std::size_t channels) {
    BatchNormParams p;
    p.gain = Tensor::constant({channels}, 1.0, true);
    p.bias = Tensor::zeros({channels}, true);
    p.running_mean = Tensor::zeros({channels});
    p.running_var = Tensor::constant({channels}, 1.0);
    return p;
  }
};

inline Tensor batch_norm(const Tensor& x, const BatchNormParams& params,
                         Mode mode) {
  const Shape& s = x.shape();
  if (s.size() != 3)
    throw ShapeError("batch_norm: expected [B,K,C], got " + shape_str(s));
  const std::size_t bsz = s[0], kn = s[1], cn = s[2];
  if (params.gain.size() != cn)
    throw ShapeError("batch_norm: parameter width " +
                     std::to_string(params.gain.size()) +
                     " does not match channels " + std::to_string(cn));
  const std::size_t rows = bsz * kn;
  const double eps = params.eps;

  if (mode == Mode::train && rows < 2)
    throw ValidationError(
        "batch_norm: train mode needs at least 2 samples per channel, got " +
        std::to_string(rows));

  std::vector<double> mean(cn, 0.0), var(cn, 0.0);
  if (mode == Mode::train) {
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cn; ++c) mean[c] += x.data()[r * cn + c];
    for (std::size_t c = 0; c < cn; ++c) mean[c] /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < cn; ++c) {
        const double d = x.data()[r * cn + c] - mean[c];
        var[c] += d * d;
      }
    for (std::size_t c = 0; c < cn; ++c) var[c] /= static_cast<double>(rows);
    // Running statistics: biased batch moments folded in with `momentum`.
    auto& rm = params.running_mean.leaf_data();
    auto& rv = params.running_var.leaf_data();
    for (std::size_t c = 0; c < cn; ++c) {
      rm[c] = (1.0 - params.momentum) * rm[c] + params.momentum * mean[c];
      rv[c] = (1.0 - params.momentum) * rv[c] + params.momentum * var[c];
    }
  } else {
    mean = params.running_mean.data();
    var = params.running_var.data();
  }

  std::vector<double> inv_std(cn);
  for (std::size_t c = 0; c < cn; ++c) inv_std[c] = 1.0 / std::sqrt(var[c] + eps);

  std::vector<double> xhat(rows * cn), out(rows * cn);
  const auto& gamma = params.gain.data();
  const auto& beta = params.bias.data();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cn; ++c) {
      const double h = (x.data()[r * cn + c] - mean[c]) * inv_std[c];
      xhat[r * cn + c] = h;
      out[r * cn + c] = gamma[c] * h + beta[c];
    }

  const bool train = mode == Mode::train;
  return detail::make_op(
      OpKind::batch_norm, s, std::move(out),
      {x.node_ptr(), params.gain.node_ptr(), params.bias.node_ptr()},
      [rows, cn, train, inv_std = std::move(inv_std), xhat = std::move(xhat)](
          const Node& self, const std::vector<double>& g,
          const std::vector<std::vector<double>*>& gin) {
        const auto& gamma = self.inputs[1]->data;
        std::vector<double> gsum(cn, 0.0), gxhat_sum(cn, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t c = 0; c < cn; ++c) {
            gsum[c] += g[r * cn + c];
            gxhat_sum[c] += g[r * cn + c] * xhat[r * cn + c];
          }
        if (gin[1])
          for (std::size_t c = 0; c < cn; ++c) (*gin[1])[c] += gxhat_sum[c];
        if (gin[2])
          for (std::size_t c = 0; c < cn; ++c) (*gin[2])[c] += gsum[c];
        if (gin[0]) {
          const double n = static_cast<double>(rows);
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cn; ++c) {
              const std::size_t i = r * cn + c;
              double dx;
              if (train) {
                dx = gamma[c] * inv_std[c] *
                     (g[i] - gsum[c] / n - xhat[i] * gxhat_sum[c] / n);
              } else {
                dx = gamma[c] * inv_std[c] * g[i];
              }
              (*gin[0])[i] += dx;
            }
        }
      });
}

/// Inverted dropout: train mode zeroes entries with probability p and scales
/// survivors by 1/(1-p); infer mode (or p = 0) returns the input unchanged.
inline Tensor dropout(const Tensor& x, double p, Mode mode, CounterRng rng) {
  if (p < 0.0 || p >= 1.0)
    throw ValidationError("dropout: probability " + std::to_string(p) +
                          " outside [0, 1)");
  if (mode == Mode::infer || p == 0.0) return x;

  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  for (std::size_t i = 0; i < mask.size(); ++i)
    mask[i] = rng.next_double() < p ? 0.0 : keep_scale;

  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.data()[i] * mask[i];
  return detail::make_op(
      OpKind::dropout, x.shape(), std::move(out), {x.node_ptr()},
      [mask = std::move(mask)](const Node&, const std::vector<double>& g,
                               const std::vector<std::vector<double>*>& gin) {
        if (!gin[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i)
          (*gin[0])[i] += g[i] * mask[i];
      });
}

/// Concatenate along the channel (last) axis; all leading dims must agree.
inline Tensor concat_channels(const std::vector<Tensor>& features) {
  if (features.empty())
    throw ValidationError("concat_channels: no inputs");
  const Shape& s0 = features[0].shape();
  Shape lead(s0.begin(), s0.end() - 1);
  std::size_t total_c = 0;
  std::vector<std::size_t> widths;
  for (const auto& f : features) {
    const Shape& s = f.shape();
    if (s.size() != s0.size() ||
        !std::equal(lead.begin(), lead.end(), s.begin()))
      throw ShapeError("concat_channels: leading dims of " + shape_str(s) +
                       " do not match " + shape_str(s0));
    widths.push_back(s.back());
    total_c += s.back();
  }
  const std::size_t rows = numel(lead);
  Shape out_shape = lead;
  out_shape.push_back(total_c);

  std::vector<double> out(rows * total_c);
  std::vector<std::shared_ptr<Node>> inputs;
  std::size_t off = 0;
  for (std::size_t fi = 0; fi < features.size(); ++fi) {
    const std::size_t w = widths[fi];
    for (std::size_t r = 0; r < rows; ++r)
      std::copy(features[fi].data().data() + r * w,
                features[fi].data().data() + (r + 1) * w,
                out.data() + r * total_c + off);
    off += w;
    inputs.push_back(features[fi].node_ptr());
  }

  return detail::make_op(
      OpKind::concat_channels, std::move(out_shape), std::move(out),
      std::move(inputs),
      [rows, total_c, widths](const Node&, const std::vector<double>& g,
                              const std::vector<std::vector<double>*>& gin) {
        std::size_t off = 0;
        for (std::size_t fi = 0; fi < widths.size(); ++fi) {
          const std::size_t w = widths[fi];
          if (gin[fi])
            for (std::size_t r = 0; r < rows; ++r)
              for (std::size_t c = 0; c < w; ++c)
                (*gin[fi])[r * w + c] += g[r * total_c + off + c];
          off += w;
        }
      });
}

/// Global average over the node axis: [K,C] -> [C], [B,K,C] -> [B,C].
inline Tensor mean_over_nodes(const Tensor& f) {
  const auto [bsz, kn, cn] = detail::node_axes(f.shape(), "mean_over_nodes");
  if (kn == 0) throw ShapeError("mean_over_nodes: empty node axis");
  Shape out_shape = f.rank() == 2 ? Shape{cn} : Shape{bsz, cn};
  std::vector<double> out(bsz * cn, 0.0);
  for (std::size_t b = 0; b < bsz; ++b)
    for (std::size_t k = 0; k < kn; ++k)
      for (std::size_t c = 0; c < cn; ++c)
        out[b * cn + c] += f.data()[(b * kn + k) * cn + c];
  const double inv_k = 1.0 / static_cast<double>(kn);
  for (double& v : out) v *= inv_k;

  return detail::make_op(
      OpKind::mean_over_nodes, std::move(out_shape), std::move(out),
      {f.node_ptr()},
      [bsz = bsz, kn = kn, cn = cn, inv_k](
          const Node&, const std::vector<double>& g,
          const std::vector<std::vector<double>*>& gin) {
        if (!gin[0]) return;
        for (std::size_t b = 0; b < bsz; ++b)
          for (std::size_t k = 0; k < kn; ++k)
            for (std::size_t c = 0; c < cn; ++c)
              (*gin[0])[(b * kn + k) * cn + c] += g[b * cn + c] * inv_k;
      });
}

/// Row-wise softmax of a [K,K] matrix restricted to a binary support mask;
/// entries outside the support are exactly zero. Every row needs at least
/// one supported entry.
inline Tensor masked_row_softmax(const Tensor& logits,
                                 const std::vector<std::uint8_t>& support) {
  const Shape& s = logits.shape();
  if (s.size() != 2 || s[0] != s[1])
    throw ShapeError("masked_row_softmax: expected square matrix, got " +
                     shape_str(s));
  const std::size_t k = s[0];
  if (support.size() != k * k)
    throw ValidationError("masked_row_softmax: mask size mismatch");

  std::vector<double> out(k * k, 0.0);
  for (std::size_t i = 0; i < k; ++i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j)
      if (support[i * k + j]) mx = std::max(mx, logits.data()[i * k + j]);
    if (mx == -std::numeric_limits<double>::infinity())
      throw ValidationError("masked_row_softmax: row " + std::to_string(i) +
                            " has empty support");
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j)
      if (support[i * k + j]) {
        out[i * k + j] = std::exp(logits.data()[i * k + j] - mx);
        z += out[i * k + j];
      }
    for (std::size_t j = 0; j < k; ++j) out[i * k + j] /= z;
  }

  return detail::make_op(
      OpKind::masked_row_softmax, s, std::move(out), {logits.node_ptr()},
      [k](const Node& self, const std::vector<double>& g,
          const std::vector<std::vector<double>*>& gin) {
        if (!gin[0]) return;
        const auto& y = self.data;
        for (std::size_t i = 0; i < k; ++i) {
          double dot = 0.0;
          for (std::size_t j = 0; j < k; ++j)
            dot += g[i * k + j] * y[i * k + j];
          for (std::size_t j = 0; j < k; ++j)
            (*gin[0])[i * k + j] += y[i * k + j] * (g[i * k + j] - dot);
        }
      });
}

inline Tensor sum_all(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  return detail::make_op(
      OpKind::sum_all, {1}, {acc}, {x.node_ptr()},
      [](const Node&, const std::vector<double>& g,
         const std::vector<std::vector<double>*>& gin) {
        if (!gin[0]) return;
        for (double& v : *gin[0]) v += g[0];
      });
}

inline Tensor mean_all(const Tensor& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.size()));
}

// ---------------------------------------------------------------------------
// Reverse-mode differentiation
// ---------------------------------------------------------------------------

/// Gradients of a scalar root with respect to requires_grad leaves,
/// keyed by node identity.
class GradientMap {
 public:
  bool contains(const Tensor& t) const {
    return grads_.count(t.node()) != 0;
  }
  const std::vector<double>& at(const Tensor& t) const {
    auto it = grads_.find(t.node());
    if (it == grads_.end())
      throw ValidationError("GradientMap: no gradient recorded for tensor");
    return it->second;
  }
  std::size_t size() const { return grads_.size(); }

 private:
  friend GradientMap backward(const Tensor&);
  std::unordered_map<const Node*, std::vector<double>> grads_;
};

/// Reverse topological accumulation from a scalar root. Each reachable node
/// is visited exactly once; only requires_grad subgraphs are traversed.
inline GradientMap backward(const Tensor& root) {
  if (root.size() != 1)
    throw ValidationError("backward: root must be scalar, got shape " +
                          shape_str(root.shape()));

  // Iterative post-order DFS over the requires_grad subgraph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  if (root.requires_grad()) {
    std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
    visited.insert(root.node());
    while (!stack.empty()) {
      auto [node, next] = stack.back();
      if (next < node->inputs.size()) {
        ++stack.back().second;
        Node* in = node->inputs[next].get();
        if (in->requires_grad && visited.insert(in).second)
          stack.emplace_back(in, 0);
      } else {
        order.push_back(node);
        stack.pop_back();
      }
    }
  }

  std::unordered_map<Node*, std::vector<double>> grads;
  grads[root.node()] = {1.0};

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->op == OpKind::leaf) continue;
    auto git = grads.find(node);
    if (git == grads.end()) continue;

    std::vector<std::vector<double>*> gin(node->inputs.size(), nullptr);
    for (std::size_t i = 0; i < node->inputs.size(); ++i) {
      Node* in = node->inputs[i].get();
      if (!in->requires_grad) continue;
      auto [slot, inserted] = grads.try_emplace(in);
      if (inserted) slot->second.assign(in->data.size(), 0.0);
      gin[i] = &slot->second;
    }
    node->backward(*node, git->second, gin);
  }

  GradientMap result;
  for (auto& [node, g] : grads)
    if (node->op == OpKind::leaf && node->requires_grad)
      result.grads_.emplace(node, std::move(g));
  return result;
}

}  // namespace gsh
