#pragma once

#include <bit>
#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "qtrack/data_pipeline.hpp"
#include "qtrack/model.hpp"

namespace qtrack {

/// 1 iff every word label matches.
inline int exact_match(std::span<const int> predicted, std::span<const int> gold) {
  if (predicted.size() != gold.size()) {
    throw Error("exact_match: " + std::to_string(predicted.size()) + " predicted vs " + std::to_string(gold.size()) +
                " gold labels");
  }
  for (std::size_t i = 0; i < gold.size(); ++i) {
    if ((predicted[i] != 0) != (gold[i] != 0)) return 0;
  }
  return 1;
}

/// Word-set F1 in [0, 1].
inline double f1_score(const Tokens& predicted, const Tokens& gold) {
  const std::set<std::string> p(predicted.begin(), predicted.end()), g(gold.begin(), gold.end());
  if (g.empty()) throw Error("f1_score: empty gold set");
  std::size_t hit = 0;
  for (const auto& w : p) hit += g.count(w);
  if (hit == 0) return 0.0;
  const double precision = static_cast<double>(hit) / static_cast<double>(p.size());
  const double recall = static_cast<double>(hit) / static_cast<double>(g.size());
  return 2.0 * precision * recall / (precision + recall);
}

struct SampleRecord {
  std::vector<int> predicted;
  std::vector<double> probabilities;  // empty for non-probabilistic trackers
  Tokens predicted_q3;
  int em = 0;
  double f1 = 0.0;
};

struct EvalReport {
  double em = 0.0;  // percent
  double f1 = 0.0;  // percent
  std::size_t samples = 0;
  std::vector<SampleRecord> records;
  std::uint64_t fingerprint = 0;

  bool operator==(const EvalReport& o) const {
    return em == o.em && f1 == o.f1 && samples == o.samples && fingerprint == o.fingerprint;
  }
};

namespace detail {

struct Fnv1a {
  std::uint64_t h = 1469598103934665603ULL;
  void bytes(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    for (std::size_t i = 0; i < n; ++i) h = (h ^ c[i]) * 1099511628211ULL;
  }
  void str(const std::string& s) { bytes(s.data(), s.size() + 1); }
  void u64(std::uint64_t v) { bytes(&v, sizeof v); }
};

}  // namespace detail

/// Scores per-sample keep predictions against gold triplets. The fingerprint hashes
/// `config` together with every prediction and probability bit pattern.
inline EvalReport score_predictions(const std::vector<TrackingTriplet>& gold,
                                    const std::vector<std::vector<int>>& predicted,
                                    const std::vector<std::vector<double>>& probabilities = {},
                                    const std::string& config = {}) {
  if (predicted.size() != gold.size()) throw Error("prediction count does not match dataset size");
  if (!probabilities.empty() && probabilities.size() != gold.size()) throw Error("probability count mismatch");
  EvalReport r;
  r.samples = gold.size();
  detail::Fnv1a fp;
  fp.str(config);
  double em_sum = 0.0, f1_sum = 0.0;
  for (std::size_t i = 0; i < gold.size(); ++i) {
    SampleRecord rec;
    rec.predicted = predicted[i];
    if (!probabilities.empty()) rec.probabilities = probabilities[i];
    rec.em = exact_match(rec.predicted, gold[i].labels);
    rec.predicted_q3 = render_internal_query(gold[i].q1, rec.predicted, gold[i].q2);
    rec.f1 = f1_score(rec.predicted_q3, gold[i].q3);
    em_sum += rec.em;
    f1_sum += rec.f1;
    for (int v : rec.predicted) fp.u64(static_cast<std::uint64_t>(v));
    for (double p : rec.probabilities) fp.u64(std::bit_cast<std::uint64_t>(p));
    r.records.push_back(std::move(rec));
  }
  if (!gold.empty()) {
    r.em = 100.0 * em_sum / static_cast<double>(gold.size());
    r.f1 = 100.0 * f1_sum / static_cast<double>(gold.size());
  }
  fp.u64(std::bit_cast<std::uint64_t>(r.em));
  fp.u64(std::bit_cast<std::uint64_t>(r.f1));
  r.fingerprint = fp.h;
  return r;
}

}  // namespace qtrack
