#pragma once

// Encoding -> Matching -> Predicting network that labels each word of the previous
// internal query (q1) as kept (1) or dropped (0) given the new user input (q2).
//
//   Encoding:   M = f([E, H, E - H, E * H] W_fe),  H = Concat(head_i) W_mh,
//               head_i = softmax((E W_i)(E W_i)^T / s) (E W_i)
//   Matching:   Y = Concat(head_i) W_mh,  head_i = softmax((M1 W1_i)(M2 W2_i)^T / s) (M2 W2_i)
//               M3 = f([M1, Y, M1 - Y, M1 * Y] W_fe)
//   Predicting: M4 = encode(M3);  p = softmax(M4 W_bc)
//
// s is sqrt(d_w) by default. Encoder weights are shared by q1 and q2; every
// enhancement site owns its W_fe. No positional information enters the network.

#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "qtrack/autodiff.hpp"
#include "qtrack/text.hpp"
#include "qtrack/vocab.hpp"

namespace qtrack {

enum class Activation { kRelu, kTanh };
enum class AttentionScale { kEmbedDim, kHeadDim };
enum class Enhancement { kFull, kConcat, kAdd };

inline std::string to_string(Activation a) { return a == Activation::kRelu ? "relu" : "tanh"; }
inline std::string to_string(AttentionScale s) { return s == AttentionScale::kEmbedDim ? "embed_dim" : "head_dim"; }
inline std::string to_string(Enhancement e) {
  return e == Enhancement::kFull ? "full" : e == Enhancement::kConcat ? "concat" : "add";
}

inline Activation parse_activation(const std::string& s) {
  if (s == "relu") return Activation::kRelu;
  if (s == "tanh") return Activation::kTanh;
  throw Error("unknown activation: " + s);
}
inline AttentionScale parse_attention_scale(const std::string& s) {
  if (s == "embed_dim") return AttentionScale::kEmbedDim;
  if (s == "head_dim") return AttentionScale::kHeadDim;
  throw Error("unknown attention scale: " + s);
}
inline Enhancement parse_enhancement(const std::string& s) {
  if (s == "full") return Enhancement::kFull;
  if (s == "concat") return Enhancement::kConcat;
  if (s == "add") return Enhancement::kAdd;
  throw Error("unknown enhancement: " + s);
}

struct Hyperparams {
  std::size_t heads = 5;
  std::size_t head_dim = 40;
  std::size_t embed_dim = 200;
  std::size_t max_len = 20;
  double dropout = 0.1;
  Activation activation = Activation::kRelu;
  AttentionScale attention_scale = AttentionScale::kEmbedDim;
  /// When false the Encoding stage passes raw embeddings through.
  bool encoder_attention = true;
  Enhancement enhancement = Enhancement::kFull;

  void validate() const {
    if (heads < 1 || head_dim < 1 || embed_dim < 1 || max_len < 1) {
      throw Error("hyperparams: heads, head_dim, embed_dim and max_len must all be >= 1");
    }
    if (!(dropout >= 0.0 && dropout < 1.0)) throw Error("hyperparams: dropout must lie in [0, 1)");
  }

  std::size_t enhance_inputs() const {
    return enhancement == Enhancement::kFull ? 4 : enhancement == Enhancement::kConcat ? 2 : 1;
  }

  double score_scale() const {
    return 1.0 / std::sqrt(static_cast<double>(attention_scale == AttentionScale::kEmbedDim ? embed_dim : head_dim));
  }

  bool operator==(const Hyperparams&) const = default;
};

/// Query tokens mapped to ids, truncated to max_len from the tail.
struct EncodedQuery {
  Tokens tokens;
  std::vector<int> ids;
  std::size_t truncated = 0;
};

inline EncodedQuery encode_query(const Tokens& tokens, const Vocabulary& vocab, std::size_t max_len) {
  if (tokens.empty()) throw Error("cannot encode an empty query");
  EncodedQuery q;
  const std::size_t n = std::min(tokens.size(), max_len);
  q.tokens.assign(tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(n));
  q.ids = vocab.ids(q.tokens);
  q.truncated = tokens.size() - n;
  return q;
}

struct TrackerExample {
  EncodedQuery q1;
  EncodedQuery q2;
  /// Gold keep labels aligned with q1 (may be empty at inference time).
  std::vector<int> labels;
};

/// One side of a padded batch: ids and real-token mask, both [batch x len].
struct QueryBatch {
  std::size_t batch = 0;
  std::size_t len = 0;
  std::vector<int> ids;
  std::vector<std::uint8_t> mask;
};

struct TrackerBatch {
  QueryBatch q1;
  QueryBatch q2;
  std::vector<int> labels;  // [batch x q1.len], 0 at padding
  std::size_t truncated_queries = 0;
};

namespace detail {

inline QueryBatch pack_side(std::span<const TrackerExample> examples, bool first, std::size_t pad_to) {
  QueryBatch qb;
  qb.batch = examples.size();
  qb.len = pad_to;
  for (const auto& ex : examples) qb.len = std::max(qb.len, (first ? ex.q1 : ex.q2).ids.size());
  qb.ids.assign(qb.batch * qb.len, Vocabulary::kPad);
  qb.mask.assign(qb.batch * qb.len, 0);
  for (std::size_t b = 0; b < qb.batch; ++b) {
    const auto& q = first ? examples[b].q1 : examples[b].q2;
    if (q.ids.empty()) throw Error("batch contains an empty query");
    for (std::size_t i = 0; i < q.ids.size(); ++i) {
      qb.ids[b * qb.len + i] = q.ids[i];
      qb.mask[b * qb.len + i] = 1;
    }
  }
  return qb;
}

}  // namespace detail

/// Pads every query to the batch maximum (or to pad_to if larger).
inline TrackerBatch make_batch(std::span<const TrackerExample> examples, std::size_t pad_to = 0) {
  if (examples.empty()) throw Error("make_batch: no examples");
  TrackerBatch tb;
  tb.q1 = detail::pack_side(examples, true, pad_to);
  tb.q2 = detail::pack_side(examples, false, pad_to);
  tb.labels.assign(tb.q1.batch * tb.q1.len, 0);
  for (std::size_t b = 0; b < examples.size(); ++b) {
    const auto& ex = examples[b];
    if (ex.q1.truncated || ex.q2.truncated) ++tb.truncated_queries;
    if (ex.labels.empty()) continue;
    if (ex.labels.size() < ex.q1.ids.size()) throw Error("make_batch: fewer labels than q1 words");
    for (std::size_t i = 0; i < ex.q1.ids.size(); ++i) tb.labels[b * tb.q1.len + i] = ex.labels[i];
  }
  return tb;
}

/// Parameter indices of one self-attention encoding block.
struct EncoderBlock {
  std::vector<std::size_t> heads;
  std::size_t mix = 0;
  std::size_t enhance = 0;
};

/// Parameter indices of the word-by-word matching block.
struct MatcherBlock {
  std::vector<std::size_t> q1_heads;
  std::vector<std::size_t> q2_heads;
  std::size_t mix = 0;
  std::size_t enhance = 0;
};

/// Per-call forward settings.
struct ForwardMode {
  bool training = false;
  std::mt19937_64* rng = nullptr;
};

template <typename T>
Var<T> embed(Tape<T>& tape, std::size_t table, const QueryBatch& q, const Hyperparams& hp, ForwardMode mode) {
  if (q.batch == 0 || q.len == 0) throw Error("embed: empty token sequence");
  Var<T> e = gather_rows(tape, table, std::span<const int>(q.ids), Shape{q.batch, q.len, hp.embed_dim});
  if (mode.training && hp.dropout > 0.0) e = dropout(e, hp.dropout, true, *mode.rng);
  return e;
}

/// Multi-head scaled dot-product self attention; padding rows are never attended to
/// and come out as zero.
template <typename T>
Var<T> self_attention_mh(Var<T> x, const QueryBatch& q, const EncoderBlock& block, const Hyperparams& hp,
                         ForwardMode mode) {
  Tape<T>& tape = *x.tape;
  const auto mask = attention_mask(q.mask, q.batch, q.len, q.len);
  const T s = static_cast<T>(hp.score_scale());
  std::vector<Var<T>> heads;
  heads.reserve(block.heads.size());
  for (std::size_t w : block.heads) {
    Var<T> p = matmul(x, tape.param(w));
    Var<T> a = softmax_rows(scale(batched_matmul(p, p, true), s), std::span<const std::uint8_t>(mask));
    heads.push_back(batched_matmul(a, p, false));
  }
  Var<T> cat = heads.size() == 1 ? heads.front() : concat_last(heads);
  Var<T> h = mask_rows(matmul(cat, tape.param(block.mix)), std::span<const std::uint8_t>(q.mask));
  if (mode.training && hp.dropout > 0.0) h = dropout(h, hp.dropout, true, *mode.rng);
  return h;
}

template <typename T>
Var<T> activate(Var<T> x, Activation a) {
  return a == Activation::kRelu ? relu(x) : tanh(x);
}

/// f([X, H, X - H, X * H] W_fe), or the concat / addition substitutes.
template <typename T>
Var<T> feature_enhance(Var<T> x, Var<T> h, std::span<const std::uint8_t> row_mask, std::size_t w_fe,
                       const Hyperparams& hp) {
  require_same_shape(x.value(), h.value(), "feature_enhance");
  Tape<T>& tape = *x.tape;
  Var<T> features = x;
  switch (hp.enhancement) {
    case Enhancement::kFull: features = concat_last<T>({x, h, sub(x, h), hadamard(x, h)}); break;
    case Enhancement::kConcat: features = concat_last<T>({x, h}); break;
    case Enhancement::kAdd: features = add(x, h); break;
  }
  return mask_rows(activate(matmul(features, tape.param(w_fe)), hp.activation), row_mask);
}

/// Word-by-word attention from q1 over q2. Values are the projected q2 words.
template <typename T>
Var<T> cross_attention_mh(Var<T> m1, const QueryBatch& q1, Var<T> m2, const QueryBatch& q2,
                          const MatcherBlock& block, const Hyperparams& hp, ForwardMode mode) {
  Tape<T>& tape = *m1.tape;
  if (q1.batch != q2.batch) throw DimensionError("cross_attention_mh: batch sizes differ");
  const auto mask = attention_mask(q2.mask, q1.batch, q1.len, q2.len);
  const T s = static_cast<T>(hp.score_scale());
  std::vector<Var<T>> heads;
  for (std::size_t i = 0; i < block.q1_heads.size(); ++i) {
    Var<T> p1 = matmul(m1, tape.param(block.q1_heads[i]));
    Var<T> p2 = matmul(m2, tape.param(block.q2_heads[i]));
    Var<T> a = softmax_rows(scale(batched_matmul(p1, p2, true), s), std::span<const std::uint8_t>(mask));
    heads.push_back(batched_matmul(a, p2, false));
  }
  Var<T> cat = heads.size() == 1 ? heads.front() : concat_last(heads);
  Var<T> y = mask_rows(matmul(cat, tape.param(block.mix)), std::span<const std::uint8_t>(q1.mask));
  if (mode.training && hp.dropout > 0.0) y = dropout(y, hp.dropout, true, *mode.rng);
  return y;
}

template <typename T>
class QueryTracker {
 public:
  static constexpr double kInitRange = 0.05;

  /// Fresh model with every matrix drawn from uniform(-0.05, 0.05).
  QueryTracker(const Hyperparams& hp, std::size_t vocab_size, std::uint64_t seed)
      : hp_(hp), params_(layout(hp, vocab_size)) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-kInitRange, kInitRange);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      for (auto& v : params_.value(i).values()) v = static_cast<T>(u(rng));
    }
    resolve();
  }

  /// Adopts existing weights after checking names and shapes against the layout.
  QueryTracker(const Hyperparams& hp, ParameterSet<T> params) : hp_(hp), params_(std::move(params)) {
    const auto& emb = params_.value(0);
    const ParameterSet<T> expected = layout(hp, emb.rank() == 2 ? emb.shape()[0] : 0);
    if (expected.size() != params_.size()) throw Error("parameter count does not match hyperparams");
    for (std::size_t i = 0; i < expected.size(); ++i) {
      if (expected.name(i) != params_.name(i) || expected.value(i).shape() != params_.value(i).shape()) {
        throw DimensionError("parameter " + params_.name(i) + " " + params_.value(i).shape().str() +
                             " does not match expected " + expected.name(i) + " " +
                             expected.value(i).shape().str());
      }
    }
    resolve();
  }

  /// Zero-valued parameter set in manifest order.
  static ParameterSet<T> layout(const Hyperparams& hp, std::size_t vocab_size) {
    hp.validate();
    if (vocab_size < 2) throw Error("vocabulary must contain at least the reserved tokens");
    const std::size_t d = hp.embed_dim, dh = hp.head_dim, h = hp.heads;
    ParameterSet<T> p;
    p.add("embedding", Tensor<T>(Shape{vocab_size, d}));
    auto encoder = [&](const std::string& prefix) {
      for (std::size_t i = 0; i < h; ++i) p.add(prefix + ".head" + std::to_string(i), Tensor<T>(Shape{d, dh}));
      p.add(prefix + ".mix", Tensor<T>(Shape{h * dh, d}));
      p.add(prefix + ".enhance", Tensor<T>(Shape{hp.enhance_inputs() * d, d}));
    };
    if (hp.encoder_attention) encoder("encoder");
    for (std::size_t i = 0; i < h; ++i) p.add("matcher.q1_head" + std::to_string(i), Tensor<T>(Shape{d, dh}));
    for (std::size_t i = 0; i < h; ++i) p.add("matcher.q2_head" + std::to_string(i), Tensor<T>(Shape{d, dh}));
    p.add("matcher.mix", Tensor<T>(Shape{h * dh, d}));
    p.add("matcher.enhance", Tensor<T>(Shape{hp.enhance_inputs() * d, d}));
    encoder("reencoder");
    p.add("classifier", Tensor<T>(Shape{d, 2}));
    return p;
  }

  const Hyperparams& hyperparams() const { return hp_; }
  ParameterSet<T>& params() { return params_; }
  const ParameterSet<T>& params() const { return params_; }
  std::size_t vocab_size() const { return params_.value(embedding_).shape()[0]; }
  std::size_t embedding_index() const { return embedding_; }

  /// Logits [batch x q1.len x 2]; column 1 is "keep".
  Var<T> logits(Tape<T>& tape, const TrackerBatch& batch, ForwardMode mode = {}) const {
    if (&tape.params() != &params_) throw TapeError("tape was created for a different parameter set");
    if (mode.training && hp_.dropout > 0.0 && mode.rng == nullptr) throw Error("training forward needs an rng");
    Var<T> e1 = embed(tape, embedding_, batch.q1, hp_, mode);
    Var<T> e2 = embed(tape, embedding_, batch.q2, hp_, mode);
    Var<T> m1 = e1, m2 = e2;
    if (hp_.encoder_attention) {
      m1 = feature_enhance(e1, self_attention_mh(e1, batch.q1, encoder_, hp_, mode),
                           std::span<const std::uint8_t>(batch.q1.mask), encoder_.enhance, hp_);
      m2 = feature_enhance(e2, self_attention_mh(e2, batch.q2, encoder_, hp_, mode),
                           std::span<const std::uint8_t>(batch.q2.mask), encoder_.enhance, hp_);
    }
    Var<T> y = cross_attention_mh(m1, batch.q1, m2, batch.q2, matcher_, hp_, mode);
    Var<T> m3 = feature_enhance(m1, y, std::span<const std::uint8_t>(batch.q1.mask), matcher_.enhance, hp_);
    Var<T> h4 = self_attention_mh(m3, batch.q1, reencoder_, hp_, mode);
    Var<T> m4 = feature_enhance(m3, h4, std::span<const std::uint8_t>(batch.q1.mask), reencoder_.enhance, hp_);
    return matmul(m4, tape.param(classifier_));
  }

  /// Summed cross entropy over real q1 words.
  Var<T> loss(Tape<T>& tape, const TrackerBatch& batch, ForwardMode mode = {}) const {
    Var<T> z = logits(tape, batch, mode);
    return cross_entropy_sum(z, std::span<const int>(batch.labels), std::span<const std::uint8_t>(batch.q1.mask));
  }

  /// Eval-mode P(keep) for every real q1 word of every example.
  std::vector<std::vector<T>> keep_probabilities(const TrackerBatch& batch) const {
    Tape<T> tape(params_);
    const Tensor<T> probs = softmax_rows_value(logits(tape, batch).value(), {});
    std::vector<std::vector<T>> out(batch.q1.batch);
    for (std::size_t b = 0; b < batch.q1.batch; ++b) {
      for (std::size_t i = 0; i < batch.q1.len; ++i) {
        const std::size_t r = b * batch.q1.len + i;
        if (batch.q1.mask[r]) out[b].push_back(probs[r * 2 + 1]);
      }
    }
    return out;
  }

  template <typename U>
  QueryTracker<U> cast() const {
    return QueryTracker<U>(hp_, params_.template cast<U>());
  }

 private:
  void resolve() {
    auto idx = [&](const std::string& name) {
      auto i = params_.find(name);
      if (!i) throw Error("missing parameter " + name);
      return *i;
    };
    auto block = [&](const std::string& prefix) {
      EncoderBlock b;
      for (std::size_t i = 0; i < hp_.heads; ++i) b.heads.push_back(idx(prefix + ".head" + std::to_string(i)));
      b.mix = idx(prefix + ".mix");
      b.enhance = idx(prefix + ".enhance");
      return b;
    };
    embedding_ = idx("embedding");
    if (hp_.encoder_attention) encoder_ = block("encoder");
    for (std::size_t i = 0; i < hp_.heads; ++i) {
      matcher_.q1_heads.push_back(idx("matcher.q1_head" + std::to_string(i)));
      matcher_.q2_heads.push_back(idx("matcher.q2_head" + std::to_string(i)));
    }
    matcher_.mix = idx("matcher.mix");
    matcher_.enhance = idx("matcher.enhance");
    reencoder_ = block("reencoder");
    classifier_ = idx("classifier");
  }

  Hyperparams hp_;
  ParameterSet<T> params_;
  std::size_t embedding_ = 0;
  EncoderBlock encoder_;
  MatcherBlock matcher_;
  EncoderBlock reencoder_;
  std::size_t classifier_ = 0;
};

/// Keep decision from a probability; exactly 0.5 resolves to drop.
inline int keep_label(double p_keep) { return p_keep > 0.5 ? 1 : 0; }

/// P(keep) for each q1 word of a single pair. Words past max_len are not scored and
/// are reported as kept with probability 1.
template <typename T>
std::vector<double> predict_keep(const QueryTracker<T>& model, const Vocabulary& vocab, const Tokens& q1,
                                 const Tokens& q2, std::size_t* truncated = nullptr) {
  TrackerExample ex{encode_query(q1, vocab, model.hyperparams().max_len),
                    encode_query(q2, vocab, model.hyperparams().max_len), {}};
  if (truncated) *truncated = ex.q1.truncated + ex.q2.truncated;
  const auto probs = model.keep_probabilities(make_batch(std::span<const TrackerExample>(&ex, 1)));
  std::vector<double> out(probs.front().begin(), probs.front().end());
  out.resize(q1.size(), 1.0);
  return out;
}

/// Kept q1 words followed by q2 words; a word already present is not repeated.
inline Tokens render_internal_query(const Tokens& q1, std::span<const int> keep, const Tokens& q2) {
  if (keep.size() != q1.size()) {
    throw Error("render_internal_query: " + std::to_string(keep.size()) + " labels for " +
                std::to_string(q1.size()) + " words");
  }
  Tokens out;
  for (std::size_t i = 0; i < q1.size(); ++i) {
    if (keep[i]) out.push_back(q1[i]);
  }
  out.insert(out.end(), q2.begin(), q2.end());
  return dedup_tokens(out);
}

}  // namespace qtrack
