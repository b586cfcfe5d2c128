#pragma once

// Lexicon-driven baseline: segment each query into knowledge-base slot values with a
// dynamic program, then track state by overwriting same-slot values.

#include <algorithm>
#include <istream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "qtrack/data_pipeline.hpp"
#include "qtrack/metrics.hpp"
#include "qtrack/text.hpp"

namespace qtrack {

class KnowledgeBase {
 public:
  static constexpr int kFree = -1;

  /// Adds a value; a value already registered keeps its first (higher priority) slot.
  void add(const std::string& slot, const std::string& value) {
    Tokens toks = tokenize(value);
    if (toks.empty()) throw Error("knowledge base value for slot '" + slot + "' has no words");
    const int s = slot_index(slot, true);
    values_[static_cast<std::size_t>(s)].push_back(toks);
    if (!index_.count(toks)) index_.emplace(toks, s);
    max_len_ = std::max(max_len_, toks.size());
  }

  /// TSV `slot \t value`; slot priority is first-appearance order.
  static KnowledgeBase load(std::istream& is) {
    KnowledgeBase kb;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (line.empty()) continue;
      const auto tab = line.find('\t');
      if (tab == std::string::npos || tab == 0) throw Error("kb line " + std::to_string(line_no) + ": expected slot\\tvalue");
      kb.add(line.substr(0, tab), line.substr(tab + 1));
    }
    return kb;
  }

  /// Slot index of an exact multi-token value, if any.
  std::optional<int> lookup(std::span<const std::string> toks) const {
    auto it = index_.find(Tokens(toks.begin(), toks.end()));
    if (it == index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t max_value_len() const { return max_len_; }
  std::size_t slot_count() const { return slots_.size(); }
  const std::string& slot_name(int s) const { return slots_.at(static_cast<std::size_t>(s)); }
  const std::vector<Tokens>& values(int s) const { return values_.at(static_cast<std::size_t>(s)); }
  std::optional<int> find_slot(const std::string& name) const {
    auto it = std::find(slots_.begin(), slots_.end(), name);
    if (it == slots_.end()) return std::nullopt;
    return static_cast<int>(it - slots_.begin());
  }

 private:
  int slot_index(const std::string& name, bool create) {
    if (auto s = find_slot(name)) return *s;
    if (!create) throw Error("unknown slot " + name);
    slots_.push_back(name);
    values_.emplace_back();
    return static_cast<int>(slots_.size() - 1);
  }

  std::vector<std::string> slots_;
  std::vector<std::vector<Tokens>> values_;
  std::map<Tokens, int> index_;
  std::size_t max_len_ = 0;
};

struct Segment {
  std::size_t begin = 0;
  std::size_t length = 1;
  int slot = KnowledgeBase::kFree;

  bool operator==(const Segment&) const = default;
};

using Segmentation = std::vector<Segment>;

/// Lexicographic segmentation objective: more slot-covered tokens, then fewer
/// segments, then longer segments earlier.
struct SegmentationScore {
  std::size_t covered = 0;
  std::size_t segments = 0;
  std::vector<std::size_t> lengths;

  bool better_than(const SegmentationScore& o) const {
    if (covered != o.covered) return covered > o.covered;
    if (segments != o.segments) return segments < o.segments;
    return lengths > o.lengths;
  }
};

inline SegmentationScore score_segmentation(const Segmentation& seg) {
  SegmentationScore s;
  for (const auto& g : seg) {
    if (g.slot != KnowledgeBase::kFree) s.covered += g.length;
    s.lengths.push_back(g.length);
  }
  s.segments = seg.size();
  return s;
}

/// Right-to-left DP over token positions; best[i] is the optimal segmentation of
/// tokens[i..n).
inline Segmentation dp_match(const Tokens& tokens, const KnowledgeBase& kb) {
  if (tokens.empty()) throw Error("dp_match: empty query");
  const std::size_t n = tokens.size();
  std::vector<Segmentation> best(n + 1);
  std::vector<SegmentationScore> score(n + 1);
  for (std::size_t i = n; i-- > 0;) {
    bool have = false;
    for (std::size_t len = 1; i + len <= n; ++len) {
      std::optional<int> slot;
      if (len <= kb.max_value_len()) slot = kb.lookup(std::span<const std::string>(tokens).subspan(i, len));
      if (!slot && len > 1) continue;
      Segmentation cand{Segment{i, len, slot.value_or(KnowledgeBase::kFree)}};
      cand.insert(cand.end(), best[i + len].begin(), best[i + len].end());
      SegmentationScore s = score_segmentation(cand);
      if (!have || s.better_than(score[i])) {
        best[i] = std::move(cand);
        score[i] = std::move(s);
        have = true;
      }
    }
  }
  return best[0];
}

struct SlotState {
  std::vector<std::optional<Tokens>> slots;  // indexed by KB slot priority
  Tokens free_words;

  bool operator==(const SlotState&) const = default;
};

inline SlotState track_update(SlotState state, const Tokens& tokens, const Segmentation& seg, std::size_t n_slots) {
  if (state.slots.size() < n_slots) state.slots.resize(n_slots);
  for (const auto& g : seg) {
    Tokens value(tokens.begin() + static_cast<std::ptrdiff_t>(g.begin),
                 tokens.begin() + static_cast<std::ptrdiff_t>(g.begin + g.length));
    if (g.slot == KnowledgeBase::kFree) {
      for (auto& w : value) {
        if (std::find(state.free_words.begin(), state.free_words.end(), w) == state.free_words.end()) {
          state.free_words.push_back(std::move(w));
        }
      }
    } else {
      state.slots.at(static_cast<std::size_t>(g.slot)) = std::move(value);
    }
  }
  return state;
}

/// Slot values in priority order, then free words; each word once.
inline Tokens render(const SlotState& state) {
  Tokens out;
  for (const auto& v : state.slots) {
    if (v) out.insert(out.end(), v->begin(), v->end());
  }
  out.insert(out.end(), state.free_words.begin(), state.free_words.end());
  return dedup_tokens(out);
}

class SlotTracker {
 public:
  explicit SlotTracker(const KnowledgeBase& kb) : kb_(kb) {}

  SlotState update(const SlotState& state, const Tokens& query) const {
    return track_update(state, query, dp_match(query, kb_), kb_.slot_count());
  }

  /// Keep labels for q1 after the update with q2.
  std::vector<int> predict(const Tokens& q1, const Tokens& q2) const {
    const Tokens q3 = render(update(update(SlotState{}, q1), q2));
    std::vector<int> keep;
    for (const auto& w : q1) keep.push_back(std::find(q3.begin(), q3.end(), w) != q3.end() ? 1 : 0);
    return keep;
  }

 private:
  const KnowledgeBase& kb_;
};

inline EvalReport evaluate_slot_baseline(const KnowledgeBase& kb, const std::vector<TrackingTriplet>& data) {
  SlotTracker tracker(kb);
  std::vector<std::vector<int>> predicted;
  predicted.reserve(data.size());
  for (const auto& t : data) predicted.push_back(tracker.predict(t.q1, t.q2));
  return score_predictions(data, predicted, {}, "slot-baseline");
}

}  // namespace qtrack
