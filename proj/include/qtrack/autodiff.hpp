#pragma once

// Reverse-mode differentiation over a fixed set of dense ops. The query tracker's
// graph is static, so each op carries its own hand-written backward rule instead of
// going through a generic expression system.

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <deque>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "qtrack/tensor.hpp"

namespace qtrack {

class TapeError : public Error {
 public:
  using Error::Error;
};

/// Named, ordered collection of trainable tensors. The order is the serialization
/// manifest order.
template <typename T>
class ParameterSet {
 public:
  std::size_t add(std::string name, Tensor<T> value) {
    if (find(name)) throw Error("duplicate parameter name: " + name);
    names_.push_back(std::move(name));
    values_.push_back(std::move(value));
    return values_.size() - 1;
  }

  std::size_t size() const { return values_.size(); }
  const std::string& name(std::size_t i) const { return names_.at(i); }
  Tensor<T>& value(std::size_t i) { return values_.at(i); }
  const Tensor<T>& value(std::size_t i) const { return values_.at(i); }

  std::optional<std::size_t> find(const std::string& name) const {
    for (std::size_t i = 0; i < names_.size(); ++i) {
      if (names_[i] == name) return i;
    }
    return std::nullopt;
  }

  std::size_t total_elements() const {
    std::size_t n = 0;
    for (const auto& v : values_) n += v.size();
    return n;
  }

  template <typename U>
  ParameterSet<U> cast() const {
    ParameterSet<U> out;
    for (std::size_t i = 0; i < size(); ++i) out.add(names_[i], values_[i].template cast<U>());
    return out;
  }

  bool operator==(const ParameterSet&) const = default;

 private:
  std::vector<std::string> names_;
  std::vector<Tensor<T>> values_;
};

/// Gradients aligned index-by-index with a ParameterSet.
template <typename T>
using Gradients = std::vector<Tensor<T>>;

template <typename T>
Gradients<T> zero_gradients(const ParameterSet<T>& params) {
  Gradients<T> g;
  g.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) g.emplace_back(params.value(i).shape());
  return g;
}

enum class OpKind {
  kConstant,
  kParameter,
  kGather,
  kMatMul,
  kBatchedMatMul,
  kScale,
  kAdd,
  kSub,
  kHadamard,
  kRelu,
  kTanh,
  kConcat,
  kDropout,
  kMaskRows,
  kSoftmax,
  kCrossEntropy,
  kSum,
};

inline const char* op_name(OpKind k) {
  switch (k) {
    case OpKind::kConstant: return "constant";
    case OpKind::kParameter: return "parameter";
    case OpKind::kGather: return "gather";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kBatchedMatMul: return "batched_matmul";
    case OpKind::kScale: return "scale";
    case OpKind::kAdd: return "add";
    case OpKind::kSub: return "sub";
    case OpKind::kHadamard: return "hadamard";
    case OpKind::kRelu: return "relu";
    case OpKind::kTanh: return "tanh";
    case OpKind::kConcat: return "concat";
    case OpKind::kDropout: return "dropout";
    case OpKind::kMaskRows: return "mask_rows";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kSum: return "sum";
  }
  return "?";
}

template <typename T>
class Tape;

/// Handle to a node on a tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(*this); }
  const Shape& shape() const { return value().shape(); }
};

/// Records a forward pass. Single owner; one backward per recorded forward.
template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor<T>& out_grad)>;

  explicit Tape(const ParameterSet<T>& params) : params_(&params) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  const ParameterSet<T>& params() const { return *params_; }

  Var<T> constant(Tensor<T> value) { return record(OpKind::kConstant, std::move(value), false, nullptr); }

  Var<T> param(std::size_t index) {
    Node n;
    n.kind = OpKind::kParameter;
    n.external = &params_->value(index);
    n.param_index = index;
    n.requires_grad = true;
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  Var<T> param(const std::string& name) {
    auto idx = params_->find(name);
    if (!idx) throw Error("unknown parameter: " + name);
    return param(*idx);
  }

  const Tensor<T>& value(Var<T> v) const {
    check_live();
    const Node& n = nodes_.at(v.id);
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(Var<T> v) const { return nodes_.at(v.id).requires_grad; }
  OpKind kind(Var<T> v) const { return nodes_.at(v.id).kind; }
  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  /// Appends an op node. Inputs must already be on this tape, which keeps the node
  /// list in topological order.
  Var<T> record(OpKind kind, Tensor<T> value, bool requires_grad, BackwardFn backward) {
    check_live();
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op_name(kind) + " " +
                         value.shape().str());
    }
    Node n;
    n.kind = kind;
    n.value = std::move(value);
    n.requires_grad = requires_grad;
    if (requires_grad) n.backward = std::move(backward);
    nodes_.push_back(std::move(n));
    return Var<T>{this, nodes_.size() - 1};
  }

  /// Gradient accumulator of a node; only valid during backward.
  Tensor<T>& grad(Var<T> v) {
    Node& n = nodes_.at(v.id);
    if (n.param_index) return param_grads_[*n.param_index];
    if (!n.has_grad) {
      n.grad = Tensor<T>(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  /// Gradient accumulator of a parameter by index (used by ops that read parameters directly).
  Tensor<T>& param_grad(std::size_t index) { return param_grads_.at(index); }

  /// Runs reverse accumulation from a scalar loss. Parameters not reached get zeros.
  Gradients<T> backward(Var<T> loss) {
    if (consumed_) throw TapeError("backward called twice without a new forward pass");
    if (loss.tape != this) throw TapeError("loss does not belong to this tape");
    if (value(loss).size() != 1) throw TapeError("backward requires a scalar loss, got " + value(loss).shape().str());
    param_grads_ = zero_gradients(*params_);
    Tensor<T>& seed = grad(loss);
    seed[0] = T{1};
    for (std::size_t i = loss.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || !n.backward || !n.has_grad) continue;
      n.backward(*this, n.grad);
    }
    Gradients<T> out = std::move(param_grads_);
    param_grads_.clear();
    nodes_.clear();
    consumed_ = true;
    return out;
  }

  /// Discards the recording so the tape can be reused for a new forward pass.
  void clear() {
    nodes_.clear();
    param_grads_.clear();
    consumed_ = false;
  }

 private:
  struct Node {
    OpKind kind = OpKind::kConstant;
    Tensor<T> value;
    Tensor<T> grad;
    const Tensor<T>* external = nullptr;
    std::optional<std::size_t> param_index;
    bool requires_grad = false;
    bool has_grad = false;
    BackwardFn backward;
  };

  void check_live() const {
    if (consumed_) throw TapeError("tape already consumed by backward; call clear() first");
  }

  const ParameterSet<T>* params_;
  std::deque<Node> nodes_;  // deque keeps value references stable while recording
  Gradients<T> param_grads_;
  bool consumed_ = false;
};

namespace detail {

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MatrixView = Eigen::Map<RowMatrix<T>>;
template <typename T>
using ConstMatrixView = Eigen::Map<const RowMatrix<T>>;

template <typename T>
ConstMatrixView<T> as_matrix(const Tensor<T>& t) {
  return ConstMatrixView<T>(t.data(), static_cast<Eigen::Index>(t.shape().rows()),
                            static_cast<Eigen::Index>(t.shape().last()));
}

template <typename T>
MatrixView<T> as_matrix(Tensor<T>& t) {
  return MatrixView<T>(t.data(), static_cast<Eigen::Index>(t.shape().rows()),
                       static_cast<Eigen::Index>(t.shape().last()));
}

template <typename T>
void same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw TapeError("operands recorded on different tapes");
}

/// (batch, rows, cols) view of a rank-2 or rank-3 tensor.
inline std::array<std::size_t, 3> batch_dims(const Shape& s, const char* op) {
  if (s.rank() == 2) return {1, s[0], s[1]};
  if (s.rank() == 3) return {s[0], s[1], s[2]};
  throw DimensionError(std::string(op) + ": expected rank 2 or 3, got " + s.str());
}

}  // namespace detail

/// X[..., k] · W[k, n] -> [..., n]. Leading dims of X are flattened into rows.
template <typename T>
Var<T> matmul(Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  if (bv.rank() != 2 || av.rank() == 0 || av.shape().last() != bv.shape()[0]) {
    throw DimensionError("matmul: inner dimensions disagree " + av.shape().str() + " x " + bv.shape().str());
  }
  Tensor<T> out(av.shape().with_last(bv.shape()[1]));
  detail::as_matrix(out).noalias() = detail::as_matrix(av) * detail::as_matrix(bv);
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.record(OpKind::kMatMul, std::move(out), rg, [a, b](Tape<T>& t, const Tensor<T>& g) {
    const auto gm = detail::as_matrix(g);
    if (t.requires_grad(a)) {
      detail::as_matrix(t.grad(a)).noalias() += gm * detail::as_matrix(t.value(b)).transpose();
    }
    if (t.requires_grad(b)) {
      detail::as_matrix(t.grad(b)).noalias() += detail::as_matrix(t.value(a)).transpose() * gm;
    }
  });
}

/// Per-batch product: A[b, m, k] · B[b, k, n], or A · B[b, n, k]ᵀ when transpose_b.
template <typename T>
Var<T> batched_matmul(Var<T> a, Var<T> b, bool transpose_b) {
  detail::same_tape(a, b);
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const auto [ba, m, k] = detail::batch_dims(av.shape(), "batched_matmul");
  const auto [bb, r, c] = detail::batch_dims(bv.shape(), "batched_matmul");
  const std::size_t bk = transpose_b ? c : r;
  const std::size_t n = transpose_b ? r : c;
  if (ba != bb || bk != k) {
    throw DimensionError("batched_matmul: incompatible shapes " + av.shape().str() + " x " + bv.shape().str() +
                         (transpose_b ? "^T" : ""));
  }
  Tensor<T> out(av.rank() == 3 ? Shape{ba, m, n} : Shape{m, n});
  using CM = detail::ConstMatrixView<T>;
  using MM = detail::MatrixView<T>;
  const auto em = static_cast<Eigen::Index>(m), ek = static_cast<Eigen::Index>(k),
             en = static_cast<Eigen::Index>(n);
  for (std::size_t i = 0; i < ba; ++i) {
    CM ai(av.data() + i * m * k, em, ek);
    MM oi(out.data() + i * m * n, em, en);
    if (transpose_b) {
      oi.noalias() = ai * CM(bv.data() + i * n * k, en, ek).transpose();
    } else {
      oi.noalias() = ai * CM(bv.data() + i * k * n, ek, en);
    }
  }
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.record(OpKind::kBatchedMatMul, std::move(out), rg,
                     [a, b, transpose_b, ba, em, ek, en](Tape<T>& t, const Tensor<T>& g) {
                       const bool ga = t.requires_grad(a), gb = t.requires_grad(b);
                       const Tensor<T>& av = t.value(a);
                       const Tensor<T>& bv = t.value(b);
                       Tensor<T>* da = ga ? &t.grad(a) : nullptr;
                       Tensor<T>* db = gb ? &t.grad(b) : nullptr;
                       const std::size_t sa = em * ek, sb = en * ek, sg = em * en;
                       for (std::size_t i = 0; i < ba; ++i) {
                         CM gi(g.data() + i * sg, em, en);
                         CM ai(av.data() + i * sa, em, ek);
                         if (transpose_b) {
                           CM bi(bv.data() + i * sb, en, ek);
                           if (ga) MM(da->data() + i * sa, em, ek).noalias() += gi * bi;
                           if (gb) MM(db->data() + i * sb, en, ek).noalias() += gi.transpose() * ai;
                         } else {
                           CM bi(bv.data() + i * sb, ek, en);
                           if (ga) MM(da->data() + i * sa, em, ek).noalias() += gi * bi.transpose();
                           if (gb) MM(db->data() + i * sb, ek, en).noalias() += ai.transpose() * gi;
                         }
                       }
                     });
}

template <typename T>
Var<T> scale(Var<T> a, T factor) {
  Tape<T>& tape = *a.tape;
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v *= factor;
  return tape.record(OpKind::kScale, std::move(out), tape.requires_grad(a),
                     [a, factor](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T>& da = t.grad(a);
                       for (std::size_t i = 0; i < g.size(); ++i) da[i] += factor * g[i];
                     });
}

enum class Elementwise { kAdd, kSub, kHadamard };

template <typename T>
Var<T> elementwise(Elementwise kind, Var<T> a, Var<T> b) {
  detail::same_tape(a, b);
  Tape<T>& tape = *a.tape;
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const char* name = kind == Elementwise::kAdd ? "add" : kind == Elementwise::kSub ? "sub" : "hadamard";
  require_same_shape(av, bv, name);
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) {
    switch (kind) {
      case Elementwise::kAdd: out[i] = av[i] + bv[i]; break;
      case Elementwise::kSub: out[i] = av[i] - bv[i]; break;
      case Elementwise::kHadamard: out[i] = av[i] * bv[i]; break;
    }
  }
  const OpKind op = kind == Elementwise::kAdd   ? OpKind::kAdd
                    : kind == Elementwise::kSub ? OpKind::kSub
                                                : OpKind::kHadamard;
  const bool rg = tape.requires_grad(a) || tape.requires_grad(b);
  return tape.record(op, std::move(out), rg, [kind, a, b](Tape<T>& t, const Tensor<T>& g) {
    if (t.requires_grad(a)) {
      Tensor<T>& da = t.grad(a);
      if (kind == Elementwise::kHadamard) {
        const Tensor<T>& bv = t.value(b);
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i];
      }
    }
    if (t.requires_grad(b)) {
      Tensor<T>& db = t.grad(b);
      if (kind == Elementwise::kHadamard) {
        const Tensor<T>& av = t.value(a);
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
      } else if (kind == Elementwise::kSub) {
        for (std::size_t i = 0; i < g.size(); ++i) db[i] -= g[i];
      } else {
        for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i];
      }
    }
  });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) { return elementwise(Elementwise::kAdd, a, b); }
template <typename T>
Var<T> sub(Var<T> a, Var<T> b) { return elementwise(Elementwise::kSub, a, b); }
template <typename T>
Var<T> hadamard(Var<T> a, Var<T> b) { return elementwise(Elementwise::kHadamard, a, b); }

/// max(x, 0); the subgradient at 0 is 0.
template <typename T>
Var<T> relu(Var<T> a) {
  Tape<T>& tape = *a.tape;
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = v > T{0} ? v : T{0};
  return tape.record(OpKind::kRelu, std::move(out), tape.requires_grad(a), [a](Tape<T>& t, const Tensor<T>& g) {
    const Tensor<T>& x = t.value(a);
    Tensor<T>& da = t.grad(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (x[i] > T{0}) da[i] += g[i];
    }
  });
}

template <typename T>
Var<T> tanh(Var<T> a) {
  Tape<T>& tape = *a.tape;
  Tensor<T> out = a.value();
  for (auto& v : out.values()) v = std::tanh(v);
  const std::size_t self = tape.size();
  return tape.record(OpKind::kTanh, std::move(out), tape.requires_grad(a),
                     [a, self](Tape<T>& t, const Tensor<T>& g) {
                       const Tensor<T>& y = t.value(Var<T>{&t, self});
                       Tensor<T>& da = t.grad(a);
                       for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * (T{1} - y[i] * y[i]);
                     });
}

/// Concatenates along the last dimension; all other dims must agree.
template <typename T>
Var<T> concat_last(const std::vector<Var<T>>& parts) {
  if (parts.empty()) throw DimensionError("concat_last: no inputs");
  Tape<T>& tape = *parts.front().tape;
  const Shape& s0 = parts.front().shape();
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    detail::same_tape(parts.front(), p);
    const Shape& s = p.shape();
    if (s.rank() != s0.rank() || s.rows() != s0.rows() ||
        !std::equal(s.dims().begin(), s.dims().end() - 1, s0.dims().begin())) {
      throw DimensionError("concat_last: shape mismatch " + s0.str() + " vs " + s.str());
    }
    widths.push_back(s.last());
    total += s.last();
    rg = rg || tape.requires_grad(p);
  }
  const std::size_t rows = s0.rows();
  Tensor<T> out(s0.with_last(total));
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor<T>& v = parts[p].value();
    const std::size_t w = widths[p];
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data() + r * w, w, out.data() + r * total + offset);
    }
    offset += w;
  }
  return tape.record(OpKind::kConcat, std::move(out), rg,
                     [parts, widths, rows, total](Tape<T>& t, const Tensor<T>& g) {
                       std::size_t offset = 0;
                       for (std::size_t p = 0; p < parts.size(); ++p) {
                         const std::size_t w = widths[p];
                         if (t.requires_grad(parts[p])) {
                           Tensor<T>& dp = t.grad(parts[p]);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const T* src = g.data() + r * total + offset;
                             T* dst = dp.data() + r * w;
                             for (std::size_t c = 0; c < w; ++c) dst[c] += src[c];
                           }
                         }
                         offset += w;
                       }
                     });
}

/// Inverted dropout: survivors are scaled by 1/(1-rate) so inference is the identity.
template <typename T>
Var<T> dropout(Var<T> x, double rate, bool training, std::mt19937_64& rng) {
  if (!(rate >= 0.0 && rate < 1.0)) throw Error("dropout rate must lie in [0, 1), got " + std::to_string(rate));
  if (!training || rate == 0.0) return x;
  Tape<T>& tape = *x.tape;
  const Tensor<T>& xv = x.value();
  Tensor<T> keep(xv.shape());
  Tensor<T> out(xv.shape());
  const T s = static_cast<T>(1.0 / (1.0 - rate));
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < xv.size(); ++i) {
    keep[i] = u(rng) >= rate ? s : T{0};
    out[i] = xv[i] * keep[i];
  }
  return tape.record(OpKind::kDropout, std::move(out), tape.requires_grad(x),
                     [x, keep = std::move(keep)](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T>& dx = t.grad(x);
                       for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * keep[i];
                     });
}

/// Zeroes whole rows (last-dim vectors) where row_mask is 0.
template <typename T>
Var<T> mask_rows(Var<T> x, std::span<const std::uint8_t> row_mask) {
  Tape<T>& tape = *x.tape;
  Tensor<T> out = x.value();
  const std::size_t rows = out.shape().rows(), w = out.shape().last();
  if (row_mask.size() != rows) {
    throw DimensionError("mask_rows: mask has " + std::to_string(row_mask.size()) + " entries for " +
                         out.shape().str());
  }
  for (std::size_t r = 0; r < rows; ++r) {
    if (!row_mask[r]) std::fill_n(out.data() + r * w, w, T{0});
  }
  std::vector<std::uint8_t> m(row_mask.begin(), row_mask.end());
  return tape.record(OpKind::kMaskRows, std::move(out), tape.requires_grad(x),
                     [x, m = std::move(m), w](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T>& dx = t.grad(x);
                       for (std::size_t r = 0; r < m.size(); ++r) {
                         if (!m[r]) continue;
                         for (std::size_t c = 0; c < w; ++c) dx[r * w + c] += g[r * w + c];
                       }
                     });
}

/// Masking value added to excluded scores before exponentiation.
inline constexpr double kMaskedScore = -1e9;

/// Softmax over the last dimension. `mask` (same element count as x, or empty for
/// none) selects the entries that take part; excluded entries come out exactly 0.
template <typename T>
Tensor<T> softmax_rows_value(const Tensor<T>& x, std::span<const std::uint8_t> mask) {
  if (!mask.empty() && mask.size() != x.size()) {
    throw DimensionError("softmax_rows: mask size " + std::to_string(mask.size()) + " vs " + x.shape().str());
  }
  const std::size_t rows = x.shape().rows(), n = x.shape().last();
  Tensor<T> y(x.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const T* in = x.data() + r * n;
    T* out = y.data() + r * n;
    bool any = false;
    T mx = T{0};
    for (std::size_t c = 0; c < n; ++c) {
      const bool on = mask.empty() || mask[r * n + c];
      const T s = on ? in[c] : in[c] + static_cast<T>(kMaskedScore);
      out[c] = s;
      if (on && (!any || s > mx)) mx = s;
      any = any || on;
    }
    if (!any) throw Error("softmax_rows: row " + std::to_string(r) + " is fully masked");
    T sum = T{0};
    for (std::size_t c = 0; c < n; ++c) {
      out[c] = std::exp(out[c] - mx);
      sum += out[c];
    }
    for (std::size_t c = 0; c < n; ++c) {
      out[c] = (mask.empty() || mask[r * n + c]) ? out[c] / sum : T{0};
    }
  }
  return y;
}

template <typename T>
Var<T> softmax_rows(Var<T> x, std::span<const std::uint8_t> mask = {}) {
  Tape<T>& tape = *x.tape;
  Tensor<T> y = softmax_rows_value(x.value(), mask);
  const std::size_t self = tape.size();
  return tape.record(OpKind::kSoftmax, std::move(y), tape.requires_grad(x),
                     [x, self](Tape<T>& t, const Tensor<T>& g) {
                       const Tensor<T>& y = t.value(Var<T>{&t, self});
                       Tensor<T>& dx = t.grad(x);
                       const std::size_t rows = y.shape().rows(), n = y.shape().last();
                       for (std::size_t r = 0; r < rows; ++r) {
                         const T* yr = y.data() + r * n;
                         const T* gr = g.data() + r * n;
                         T dot = T{0};
                         for (std::size_t c = 0; c < n; ++c) dot += yr[c] * gr[c];
                         T* dr = dx.data() + r * n;
                         for (std::size_t c = 0; c < n; ++c) dr[c] += yr[c] * (gr[c] - dot);
                       }
                     });
}

/// Broadcasts a key mask [batch, keys] to attention-score shape [batch, queries, keys].
inline std::vector<std::uint8_t> attention_mask(std::span<const std::uint8_t> key_mask, std::size_t batch,
                                                std::size_t queries, std::size_t keys) {
  if (key_mask.size() != batch * keys) throw DimensionError("attention_mask: key mask size mismatch");
  std::vector<std::uint8_t> m(batch * queries * keys);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t q = 0; q < queries; ++q) {
      std::copy_n(key_mask.data() + b * keys, keys, m.data() + (b * queries + q) * keys);
    }
  }
  return m;
}

/// Gathers rows of the embedding parameter. Id 0 (padding) yields a zero row and
/// receives no gradient.
template <typename T>
Var<T> gather_rows(Tape<T>& tape, std::size_t param_index, std::span<const int> ids, Shape out_shape) {
  const Tensor<T>& table = tape.params().value(param_index);
  if (table.rank() != 2) throw DimensionError("gather_rows: table must be rank 2");
  const std::size_t vocab = table.shape()[0], d = table.shape()[1];
  if (out_shape.last() != d || out_shape.rows() != ids.size()) {
    throw DimensionError("gather_rows: output shape " + out_shape.str() + " inconsistent with " +
                         std::to_string(ids.size()) + " ids of width " + std::to_string(d));
  }
  Tensor<T> out(std::move(out_shape));
  for (std::size_t r = 0; r < ids.size(); ++r) {
    if (ids[r] < 0 || static_cast<std::size_t>(ids[r]) >= vocab) {
      throw Error("gather_rows: id " + std::to_string(ids[r]) + " outside vocabulary of " + std::to_string(vocab));
    }
    if (ids[r] == 0) continue;
    std::copy_n(table.data() + static_cast<std::size_t>(ids[r]) * d, d, out.data() + r * d);
  }
  std::vector<int> saved(ids.begin(), ids.end());
  return tape.record(OpKind::kGather, std::move(out), true,
                     [param_index, saved = std::move(saved), d](Tape<T>& t, const Tensor<T>& g) {
                       Tensor<T>& dt = t.param_grad(param_index);
                       for (std::size_t r = 0; r < saved.size(); ++r) {
                         if (saved[r] == 0) continue;
                         T* dst = dt.data() + static_cast<std::size_t>(saved[r]) * d;
                         const T* src = g.data() + r * d;
                         for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
                       }
                     });
}

/// Sum over unmasked rows of -log softmax(logits)[label] for two-class logits.
template <typename T>
Var<T> cross_entropy_sum(Var<T> logits, std::span<const int> labels, std::span<const std::uint8_t> mask) {
  Tape<T>& tape = *logits.tape;
  const Tensor<T>& z = logits.value();
  const std::size_t rows = z.shape().rows(), k = z.shape().last();
  if (k != 2) throw DimensionError("cross_entropy_sum: expected 2 classes, got " + z.shape().str());
  if (labels.size() != rows || mask.size() != rows) {
    throw DimensionError("cross_entropy_sum: labels/mask length disagree with " + z.shape().str());
  }
  T total = T{0};
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    if (labels[r] != 0 && labels[r] != 1) {
      throw Error("cross_entropy_sum: label " + std::to_string(labels[r]) + " outside {0,1}");
    }
    const T a = z[r * 2], b = z[r * 2 + 1];
    const T mx = std::max(a, b);
    const T lse = mx + std::log(std::exp(a - mx) + std::exp(b - mx));
    total += lse - z[r * 2 + static_cast<std::size_t>(labels[r])];
  }
  std::vector<int> lab(labels.begin(), labels.end());
  std::vector<std::uint8_t> m(mask.begin(), mask.end());
  return tape.record(OpKind::kCrossEntropy, Tensor<T>::scalar(total), tape.requires_grad(logits),
                     [logits, lab = std::move(lab), m = std::move(m)](Tape<T>& t, const Tensor<T>& g) {
                       const Tensor<T>& z = t.value(logits);
                       Tensor<T>& dz = t.grad(logits);
                       const T up = g[0];
                       for (std::size_t r = 0; r < lab.size(); ++r) {
                         if (!m[r]) continue;
                         const T a = z[r * 2], b = z[r * 2 + 1];
                         const T mx = std::max(a, b);
                         const T ea = std::exp(a - mx), eb = std::exp(b - mx);
                         const T pa = ea / (ea + eb), pb = eb / (ea + eb);
                         dz[r * 2] += up * (pa - (lab[r] == 0 ? T{1} : T{0}));
                         dz[r * 2 + 1] += up * (pb - (lab[r] == 1 ? T{1} : T{0}));
                       }
                     });
}

template <typename T>
Var<T> sum(Var<T> x) {
  Tape<T>& tape = *x.tape;
  T s = T{0};
  for (T v : x.value().values()) s += v;
  return tape.record(OpKind::kSum, Tensor<T>::scalar(s), tape.requires_grad(x), [x](Tape<T>& t, const Tensor<T>& g) {
    Tensor<T>& dx = t.grad(x);
    for (auto& v : dx.values()) v += g[0];
  });
}

}  // namespace qtrack
