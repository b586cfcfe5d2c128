#pragma once

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <string>
#include <vector>

#include "qtrack/adam.hpp"
#include "qtrack/checkpoint.hpp"
#include "qtrack/data_pipeline.hpp"
#include "qtrack/metrics.hpp"
#include "qtrack/model.hpp"
#include "qtrack/vocab.hpp"

namespace qtrack {

class DivergenceError : public Error {
 public:
  using Error::Error;
};

struct TrainConfig {
  double lr = 0.001;
  double decay = 0.95;
  std::size_t batch_size = 256;
  std::size_t max_epochs = 10;
  std::size_t patience = 3;
  std::uint64_t seed = 1;
  bool random_embed_init = false;
  bool no_self_attention = false;
  bool single_head = false;
  bool enhance_concat_only = false;
  bool enhance_add_only = false;
  /// word2vec-format vectors for the embedding table; ignored under random_embed_init.
  std::optional<std::filesystem::path> embeddings;

  void validate() const {
    if (!(lr >= 0.0)) throw Error("lr must be >= 0");
    if (!(decay > 0.0 && decay <= 1.0)) throw Error("decay must lie in (0, 1]");
    if (patience < 1) throw Error("patience must be >= 1");
    if (batch_size < 1) throw Error("batch_size must be >= 1");
    if (max_epochs < 1) throw Error("max_epochs must be >= 1");
    if (enhance_concat_only && enhance_add_only) throw Error("enhance_concat_only and enhance_add_only are exclusive");
  }
};

/// Hyperparams with the ablation flags applied. A single head keeps the total
/// attention width (heads * head_dim) unchanged.
inline Hyperparams apply_ablations(Hyperparams hp, const TrainConfig& cfg) {
  if (cfg.no_self_attention) hp.encoder_attention = false;
  if (cfg.single_head) {
    hp.head_dim *= hp.heads;
    hp.heads = 1;
  }
  if (cfg.enhance_concat_only) hp.enhancement = Enhancement::kConcat;
  if (cfg.enhance_add_only) hp.enhancement = Enhancement::kAdd;
  hp.validate();
  return hp;
}

struct EpochLog {
  std::size_t epoch = 0;
  double lr = 0.0;
  double train_loss = 0.0;  // mean summed cross entropy per sample
  double val_em = 0.0;
  double val_f1 = 0.0;
  double seconds = 0.0;

  bool operator==(const EpochLog& o) const {
    return epoch == o.epoch && lr == o.lr && train_loss == o.train_loss && val_em == o.val_em && val_f1 == o.val_f1;
  }
};

inline nlohmann::json epoch_log_to_json(const EpochLog& e) {
  return {{"epoch", e.epoch}, {"lr", e.lr}, {"train_loss", e.train_loss}, {"val_em", e.val_em}, {"val_f1", e.val_f1}};
}

struct TrainResult {
  Vocabulary vocab;
  QueryTracker<float> model;
  std::vector<EpochLog> log;
  std::size_t best_epoch = 0;
  double best_val_em = -1.0;
};

inline Vocabulary build_vocabulary(const std::vector<TrackingTriplet>& train) {
  Vocabulary v;
  for (const auto& t : train) {
    for (const auto& w : t.q1) v.add(w);
    for (const auto& w : t.q2) v.add(w);
  }
  return v;
}

inline std::vector<TrackerExample> encode_dataset(const std::vector<TrackingTriplet>& data, const Vocabulary& vocab,
                                                  std::size_t max_len) {
  std::vector<TrackerExample> out;
  out.reserve(data.size());
  for (const auto& t : data) {
    TrackerExample ex{encode_query(t.q1, vocab, max_len), encode_query(t.q2, vocab, max_len), t.labels};
    ex.labels.resize(ex.q1.ids.size());
    out.push_back(std::move(ex));
  }
  return out;
}

/// Keep probabilities for every q1 word of every triplet; words past max_len are
/// reported as kept with probability 1.
template <typename T>
std::vector<std::vector<double>> predict_dataset(const QueryTracker<T>& model, const Vocabulary& vocab,
                                                 const std::vector<TrackingTriplet>& data,
                                                 std::size_t batch_size = 256) {
  const auto examples = encode_dataset(data, vocab, model.hyperparams().max_len);
  std::vector<std::vector<double>> out;
  out.reserve(data.size());
  for (std::size_t start = 0; start < examples.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, examples.size() - start);
    const auto probs = model.keep_probabilities(make_batch(std::span<const TrackerExample>(examples).subspan(start, n)));
    for (std::size_t b = 0; b < n; ++b) {
      std::vector<double> p(probs[b].begin(), probs[b].end());
      p.resize(data[start + b].q1.size(), 1.0);
      out.push_back(std::move(p));
    }
  }
  return out;
}

template <typename T>
EvalReport evaluate(const QueryTracker<T>& model, const Vocabulary& vocab, const std::vector<TrackingTriplet>& data,
                    std::size_t batch_size = 256) {
  const auto probs = predict_dataset(model, vocab, data, batch_size);
  std::vector<std::vector<int>> labels;
  labels.reserve(probs.size());
  for (const auto& p : probs) {
    std::vector<int> l;
    for (double v : p) l.push_back(keep_label(v));
    labels.push_back(std::move(l));
  }
  return score_predictions(data, labels, probs, hyperparams_to_json(model.hyperparams()).dump());
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Minibatch Adam on summed cross entropy with per-epoch exponential lr decay and
/// early stopping on validation EM. Returns the best-validation weights.
inline TrainResult train(const std::vector<TrackingTriplet>& train_set, const std::vector<TrackingTriplet>& val_set,
                         const TrainConfig& cfg, const Hyperparams& base_hp, const EpochCallback& on_epoch = {}) {
  cfg.validate();
  if (train_set.empty()) throw Error("training split is empty");
  if (val_set.empty()) throw Error("validation split is empty");
  const Hyperparams hp = apply_ablations(base_hp, cfg);
  Vocabulary vocab = build_vocabulary(train_set);
  QueryTracker<float> model(hp, vocab.size(), cfg.seed);
  if (cfg.embeddings && !cfg.random_embed_init) load_pretrained_embeddings(*cfg.embeddings, vocab, model);
  const auto examples = encode_dataset(train_set, vocab, hp.max_len);

  TrainResult result{vocab, model, {}, 0, -1.0};
  AdamState<float> adam(model.params());
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::mt19937_64 dropout_rng(cfg.seed + 0x51ed27);
  std::vector<std::size_t> order(examples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double lr = cfg.lr;
  std::size_t since_best = 0;
  std::vector<TrackerExample> batch_buf;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      batch_buf.clear();
      for (std::size_t i = 0; i < n; ++i) batch_buf.push_back(examples[order[start + i]]);
      const TrackerBatch batch = make_batch(std::span<const TrackerExample>(batch_buf));
      Tape<float> tape(model.params());
      Gradients<float> grads;
      double loss_value = 0.0;
      try {
        Var<float> loss = model.loss(tape, batch, ForwardMode{true, &dropout_rng});
        loss_value = loss.value().item();
        grads = tape.backward(loss);
      } catch (const NumericError& e) {
        throw DivergenceError("training diverged in epoch " + std::to_string(epoch) + " at sample " +
                              std::to_string(start) + " (lr " + std::to_string(lr) + "): " + e.what());
      }
      if (!std::isfinite(loss_value)) throw DivergenceError("training loss is not finite in epoch " + std::to_string(epoch));
      for (const auto& g : grads) {
        if (!g.all_finite()) throw DivergenceError("non-finite gradient in epoch " + std::to_string(epoch));
      }
      loss_sum += loss_value;
      if (lr > 0.0) adam_step(model.params(), grads, adam, lr);
    }

    const EvalReport val = evaluate(model, vocab, val_set);
    EpochLog entry{epoch, lr, loss_sum / static_cast<double>(examples.size()), val.em, val.f1,
                   std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
    if (val.em > result.best_val_em) {
      result.best_val_em = val.em;
      result.best_epoch = epoch;
      result.model = model;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
    lr *= cfg.decay;
  }
  return result;
}

inline void write_training_log(std::ostream& os, const std::vector<EpochLog>& log) {
  for (const auto& e : log) os << epoch_log_to_json(e).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Ablations

struct AblationVariant {
  std::string name;
  std::function<void(TrainConfig&)> apply;
};

inline const std::vector<AblationVariant>& ablation_variants() {
  static const std::vector<AblationVariant> variants{
      {"full", [](TrainConfig&) {}},
      {"random_embed_init", [](TrainConfig& c) { c.random_embed_init = true; }},
      {"no_self_attention", [](TrainConfig& c) { c.no_self_attention = true; }},
      {"single_head", [](TrainConfig& c) { c.single_head = true; }},
      {"enhance_concat", [](TrainConfig& c) { c.enhance_concat_only = true; }},
      {"enhance_add", [](TrainConfig& c) { c.enhance_add_only = true; }},
  };
  return variants;
}

struct AblationRow {
  std::string variant;
  double em = 0.0;  // mean over seeds
  double f1 = 0.0;
  std::vector<double> em_per_seed;
  std::vector<double> f1_per_seed;
};

/// Trains and evaluates every variant once per seed; rows report seed means on `test`.
inline std::vector<AblationRow> run_ablations(const DatasetSplits& data, const TrainConfig& base,
                                              const Hyperparams& hp, const std::vector<std::uint64_t>& seeds,
                                              const std::function<void(const std::string&)>& progress = {}) {
  if (seeds.empty()) throw Error("run_ablations needs at least one seed");
  std::vector<AblationRow> rows;
  for (const auto& v : ablation_variants()) {
    AblationRow row{v.name, 0, 0, {}, {}};
    for (auto seed : seeds) {
      TrainConfig cfg = base;
      cfg.seed = seed;
      v.apply(cfg);
      const TrainResult r = train(data.train, data.val, cfg, hp);
      const EvalReport rep = evaluate(r.model, r.vocab, data.test);
      row.em_per_seed.push_back(rep.em);
      row.f1_per_seed.push_back(rep.f1);
      if (progress) progress(v.name + " seed " + std::to_string(seed) + ": EM " + std::to_string(rep.em));
    }
    row.em = std::accumulate(row.em_per_seed.begin(), row.em_per_seed.end(), 0.0) / static_cast<double>(seeds.size());
    row.f1 = std::accumulate(row.f1_per_seed.begin(), row.f1_per_seed.end(), 0.0) / static_cast<double>(seeds.size());
    rows.push_back(std::move(row));
  }
  return rows;
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "variant,em,f1\n";
  for (const auto& r : rows) os << r.variant << ',' << r.em << ',' << r.f1 << '\n';
}

inline void write_ablation_markdown(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "| Variant | EM | F1 |\n|---|---|---|\n";
  char buf[128];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "| %s | %.1f | %.1f |\n", r.variant.c_str(), r.em, r.f1);
    os << buf;
  }
}

}  // namespace qtrack
