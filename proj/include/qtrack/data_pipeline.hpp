#pragma once

// Query-log mining: raw TSV logs -> consecutive same-user query pairs -> tracking
// triplets (q1, q2, q3, labels) -> leakage-free train/val/test splits.

#include <json.hpp>

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <unordered_set>
#include <variant>
#include <vector>

#include "qtrack/tensor.hpp"
#include "qtrack/text.hpp"

namespace qtrack {

struct RawLogRecord {
  std::string user_id;
  std::int64_t timestamp = 0;
  std::string query;
};

struct QueryPair {
  Tokens first;
  Tokens second;
  std::size_t count = 1;
};

struct TrackingTriplet {
  Tokens q1;
  Tokens q2;
  Tokens q3;
  std::vector<int> labels;
  std::size_t count = 1;

  bool operator==(const TrackingTriplet&) const = default;
};

enum class RejectReason { kEmptyQ2, kMeaninglessQ2, kBadRecord };

inline std::string to_string(RejectReason r) {
  switch (r) {
    case RejectReason::kEmptyQ2: return "EMPTY_Q2";
    case RejectReason::kMeaninglessQ2: return "MEANINGLESS_Q2";
    case RejectReason::kBadRecord: return "BAD_RECORD";
  }
  return "?";
}

struct Reject {
  RejectReason reason;
  std::string detail;
  std::size_t count = 1;
};

inline nlohmann::json reject_to_json(const Reject& r) {
  return {{"reason", to_string(r.reason)}, {"detail", r.detail}, {"count", r.count}};
}

/// Checks the triplet invariants; throws Error naming the first violation.
inline void validate_triplet(const TrackingTriplet& t) {
  if (t.q1.empty() || t.q2.empty() || t.q3.empty()) throw Error("triplet has an empty query");
  if (t.labels.size() != t.q1.size()) throw Error("triplet labels do not align with q1");
  if (t.count < 1) throw Error("triplet count must be >= 1");
  const std::set<std::string> q1(t.q1.begin(), t.q1.end()), q3(t.q3.begin(), t.q3.end());
  for (std::size_t i = 0; i < t.q1.size(); ++i) {
    if (t.labels[i] != (q3.count(t.q1[i]) ? 1 : 0)) throw Error("label of '" + t.q1[i] + "' disagrees with q3");
  }
  const std::set<std::string> q2(t.q2.begin(), t.q2.end());
  for (const auto& w : t.q2) {
    if (!q3.count(w)) throw Error("q2 word '" + w + "' missing from q3");
  }
  for (const auto& w : t.q3) {
    if (!q1.count(w) && !q2.count(w)) throw Error("q3 word '" + w + "' is in neither q1 nor q2");
  }
}

// ---------------------------------------------------------------------------
// Raw logs

struct LogReadResult {
  std::vector<RawLogRecord> records;
  std::vector<Reject> rejects;
};

namespace detail {

inline std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

/// Parses `user \t unix_timestamp \t query` lines. Malformed lines and queries that
/// tokenize to nothing become BAD_RECORD rejects.
inline LogReadResult read_logs(std::istream& is) {
  LogReadResult out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto bad = [&](const std::string& why) {
      out.rejects.push_back({RejectReason::kBadRecord, "line " + std::to_string(line_no) + ": " + why});
    };
    const auto t1 = line.find('\t');
    const auto t2 = t1 == std::string::npos ? std::string::npos : line.find('\t', t1 + 1);
    if (t2 == std::string::npos) {
      bad("expected 3 tab-separated fields");
      continue;
    }
    RawLogRecord rec;
    rec.user_id = std::string(detail::trim(std::string_view(line).substr(0, t1)));
    const auto ts = detail::trim(std::string_view(line).substr(t1 + 1, t2 - t1 - 1));
    rec.query = std::string(detail::trim(std::string_view(line).substr(t2 + 1)));
    const auto [ptr, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), rec.timestamp);
    if (rec.user_id.empty()) {
      bad("empty user id");
    } else if (ec != std::errc() || ptr != ts.data() + ts.size() || rec.timestamp < 0) {
      bad("bad timestamp '" + std::string(ts) + "'");
    } else if (tokenize(rec.query).empty()) {
      bad("query has no words");
    } else {
      out.records.push_back(std::move(rec));
    }
  }
  return out;
}

inline void write_log(std::ostream& os, const RawLogRecord& r) {
  os << r.user_id << '\t' << r.timestamp << '\t' << r.query << '\n';
}

// ---------------------------------------------------------------------------
// Mining

/// Consecutive same-user queries at most `window_minutes` apart, normalized and
/// aggregated with counts in first-occurrence order. Pairs whose normalized queries
/// are identical are discarded.
inline std::vector<QueryPair> mine_pairs(std::vector<RawLogRecord> logs, double window_minutes = 30.0) {
  std::stable_sort(logs.begin(), logs.end(), [](const RawLogRecord& a, const RawLogRecord& b) {
    return a.user_id != b.user_id ? a.user_id < b.user_id : a.timestamp < b.timestamp;
  });
  const double window = window_minutes * 60.0;
  std::vector<QueryPair> pairs;
  std::map<std::pair<Tokens, Tokens>, std::size_t> index;
  Tokens prev_tokens;
  for (std::size_t i = 0; i < logs.size(); ++i) {
    Tokens cur = normalize_query(logs[i].query);
    if (i > 0 && logs[i - 1].user_id == logs[i].user_id &&
        static_cast<double>(logs[i].timestamp - logs[i - 1].timestamp) <= window && !prev_tokens.empty() &&
        !cur.empty() && prev_tokens != cur) {
      auto key = std::make_pair(prev_tokens, cur);
      auto it = index.find(key);
      if (it == index.end()) {
        index.emplace(std::move(key), pairs.size());
        pairs.push_back({prev_tokens, cur, 1});
      } else {
        ++pairs[it->second].count;
      }
    }
    prev_tokens = std::move(cur);
  }
  return pairs;
}

inline std::vector<QueryPair> filter_frequency(const std::vector<QueryPair>& pairs, std::size_t min_count = 5) {
  std::vector<QueryPair> out;
  std::copy_if(pairs.begin(), pairs.end(), std::back_inserter(out),
               [&](const QueryPair& p) { return p.count >= min_count; });
  return out;
}

inline const std::unordered_set<std::string>& default_stopwords() {
  static const std::unordered_set<std::string> words{
      "a",    "an",   "the", "and", "or",   "of",   "for", "with", "in",     "on",    "to", "at",
      "by",   "is",   "are", "it",  "this", "that", "my",  "me",   "please", "some",  "any", "new",
      "want", "need", "buy", "get", "show", "find", "all", "more", "other",  "which", "de", "la"};
  return words;
}

struct TripletOptions {
  const std::unordered_set<std::string>* stopwords = &default_stopwords();
};

using TripletOrReject = std::variant<TrackingTriplet, Reject>;

/// q1 = first, q3 = second, q2 = words of q3 absent from q1 (q3 order),
/// labels[i] = q1[i] in q3.
inline TripletOrReject build_triplet(const QueryPair& pair, const TripletOptions& opts = {}) {
  const Tokens q1 = dedup_tokens(pair.first), q3 = dedup_tokens(pair.second);
  const std::string shown = join_tokens(q1) + " -> " + join_tokens(q3);
  if (q1.empty() || q3.empty()) return Reject{RejectReason::kBadRecord, shown, pair.count};
  const std::unordered_set<std::string> in_q1(q1.begin(), q1.end()), in_q3(q3.begin(), q3.end());
  TrackingTriplet t;
  t.q1 = q1;
  t.q3 = q3;
  t.count = pair.count;
  for (const auto& w : q3) {
    if (!in_q1.count(w)) t.q2.push_back(w);
  }
  if (t.q2.empty()) return Reject{RejectReason::kEmptyQ2, shown, pair.count};
  const bool meaningless = std::all_of(t.q2.begin(), t.q2.end(), [&](const std::string& w) {
    return is_punctuation_token(w) || (opts.stopwords && opts.stopwords->count(w));
  });
  if (meaningless) return Reject{RejectReason::kMeaninglessQ2, shown, pair.count};
  for (const auto& w : q1) t.labels.push_back(in_q3.count(w) ? 1 : 0);
  validate_triplet(t);
  return t;
}

struct BuildResult {
  std::vector<TrackingTriplet> triplets;
  std::vector<Reject> rejects;
};

inline BuildResult build_triplets(const std::vector<QueryPair>& pairs, const TripletOptions& opts = {}) {
  BuildResult out;
  for (const auto& p : pairs) {
    auto r = build_triplet(p, opts);
    if (auto* t = std::get_if<TrackingTriplet>(&r)) {
      out.triplets.push_back(std::move(*t));
    } else {
      out.rejects.push_back(std::get<Reject>(r));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Splitting

struct DatasetSplits {
  std::vector<TrackingTriplet> train;
  std::vector<TrackingTriplet> val;
  std::vector<TrackingTriplet> test;
};

inline void validate_ratios(const std::array<double, 3>& ratios) {
  for (double r : ratios) {
    if (!(r >= 0.0 && r <= 1.0)) throw Error("split ratios must lie in [0, 1]");
  }
  const double sum = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(sum - 1.0) > 1e-6) throw Error("split ratios sum to " + std::to_string(sum) + ", expected 1");
}

/// Seeded shuffle of (q1, q2) groups; every group lands in exactly one split. Groups
/// are assigned in shuffled order to whichever split is furthest below its quota.
inline DatasetSplits split(const std::vector<TrackingTriplet>& triplets, const std::array<double, 3>& ratios,
                           std::uint64_t seed) {
  validate_ratios(ratios);
  if (triplets.empty()) throw Error("cannot split an empty corpus");
  std::map<std::pair<Tokens, Tokens>, std::vector<std::size_t>> groups;
  std::vector<std::pair<Tokens, Tokens>> order;
  for (std::size_t i = 0; i < triplets.size(); ++i) {
    auto key = std::make_pair(triplets[i].q1, triplets[i].q2);
    auto [it, inserted] = groups.try_emplace(key);
    if (inserted) order.push_back(key);
    it->second.push_back(i);
  }
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  DatasetSplits out;
  std::array<std::vector<TrackingTriplet>*, 3> dest{&out.train, &out.val, &out.test};
  std::array<std::size_t, 3> filled{0, 0, 0};
  const double n = static_cast<double>(triplets.size());
  for (const auto& key : order) {
    std::size_t best = 0;
    double best_deficit = -1e300;
    for (std::size_t s = 0; s < 3; ++s) {
      if (ratios[s] == 0.0) continue;
      const double deficit = ratios[s] * n - static_cast<double>(filled[s]);
      if (deficit > best_deficit) best_deficit = deficit, best = s;
    }
    for (std::size_t i : groups[key]) dest[best]->push_back(triplets[i]);
    filled[best] += groups[key].size();
  }
  return out;
}

// ---------------------------------------------------------------------------
// JSONL

inline nlohmann::json triplet_to_json(const TrackingTriplet& t) {
  nlohmann::json j = {{"q1", t.q1}, {"q2", t.q2}, {"q3", t.q3}, {"labels", t.labels}};
  if (t.count != 1) j["count"] = t.count;
  return j;
}

inline TrackingTriplet triplet_from_json(const nlohmann::json& j) {
  TrackingTriplet t;
  t.q1 = j.at("q1").get<Tokens>();
  t.q2 = j.at("q2").get<Tokens>();
  t.q3 = j.at("q3").get<Tokens>();
  t.labels = j.at("labels").get<std::vector<int>>();
  t.count = j.value("count", std::size_t{1});
  return t;
}

inline void write_triplets(std::ostream& os, const std::vector<TrackingTriplet>& ts) {
  for (const auto& t : ts) {
    validate_triplet(t);
    os << triplet_to_json(t).dump() << '\n';
  }
}

inline std::vector<TrackingTriplet> read_triplets(std::istream& is) {
  std::vector<TrackingTriplet> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (detail::trim(line).empty()) continue;
    try {
      out.push_back(triplet_from_json(nlohmann::json::parse(line)));
      validate_triplet(out.back());
    } catch (const nlohmann::json::exception& e) {
      throw Error("dataset line " + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw Error("dataset line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

/// Expands counts into repeated rows (training sees frequent pairs more often).
inline std::vector<TrackingTriplet> expand_counts(const std::vector<TrackingTriplet>& ts) {
  std::vector<TrackingTriplet> out;
  for (const auto& t : ts) {
    TrackingTriplet one = t;
    one.count = 1;
    for (std::size_t c = 0; c < t.count; ++c) out.push_back(one);
  }
  return out;
}

}  // namespace qtrack
