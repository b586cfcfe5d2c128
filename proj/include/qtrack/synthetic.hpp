#pragma once

// Synthetic e-commerce search sessions. A session is a sequence of slot states
// (category, brand, color, style, attribute); each turn replaces a slot value, adds a
// new slot, or adds another style next to the existing ones. The user types the full
// rendered state as the next query, so the raw log can be mined back into the gold
// triplets.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "qtrack/data_pipeline.hpp"

namespace qtrack {

struct SlotSpec {
  std::string name;
  std::vector<std::string> values;  // may contain spaces (multi-token values)
  bool coexist = false;             // several values may be held at once
};

struct SyntheticSchema {
  std::vector<SlotSpec> slots;  // slots[0] is the mandatory category slot
  std::vector<std::size_t> render_order;
  double p_replace = 0.4;
  double p_add = 0.4;
  double p_coexist = 0.2;
  double p_second_op = 0.3;
  std::size_t min_queries = 2;  // per session
  std::size_t max_queries = 6;
  std::size_t max_initial_extra = 2;
  std::size_t max_coexisting = 3;
  std::size_t max_query_tokens = 8;
  double zipf_exponent = 0.6;
  std::int64_t base_timestamp = 1600000000;
  std::uint64_t seed = 1;

  void validate() const {
    if (slots.empty()) throw Error("schema has no slots");
    for (const auto& s : slots) {
      if (s.values.empty()) throw Error("slot '" + s.name + "' has an empty value vocabulary");
    }
    if (render_order.size() != slots.size()) throw Error("render_order must list every slot once");
    if (slots[0].coexist) throw Error("the category slot cannot be a coexistence slot");
    if (min_queries < 1 || max_queries < min_queries) throw Error("bad session length range");
    const double p = p_replace + p_add + p_coexist;
    if (p_replace < 0 || p_add < 0 || p_coexist < 0 || std::abs(p - 1.0) > 1e-9) {
      throw Error("intent probabilities must be non-negative and sum to 1");
    }
  }
};

struct SyntheticCorpus {
  std::vector<RawLogRecord> logs;
  std::vector<TrackingTriplet> gold;
  std::vector<std::pair<std::string, std::string>> kb;  // (slot, value) in slot order
};

namespace detail {

inline std::string pseudo_word(std::mt19937_64& rng) {
  static const std::string onset = "bcdfghjklmnprstvz";
  static const std::string vowel = "aeiou";
  static const std::string coda = "nrslm";
  std::uniform_int_distribution<int> syl(2, 3), on(0, static_cast<int>(onset.size()) - 1),
      vw(0, static_cast<int>(vowel.size()) - 1), cd(0, static_cast<int>(coda.size()) - 1), coin(0, 3);
  std::string w;
  for (int s = syl(rng); s > 0; --s) {
    w += onset[static_cast<std::size_t>(on(rng))];
    w += vowel[static_cast<std::size_t>(vw(rng))];
  }
  if (coin(rng) == 0) w += coda[static_cast<std::size_t>(cd(rng))];
  return w;
}

}  // namespace detail

/// Five-slot schema with roughly `vocab_target` distinct words. Real words used by the
/// demo script are placed at the head of their slots so they are among the most frequent.
inline SyntheticSchema default_schema(std::uint64_t seed = 1, std::size_t vocab_target = 2000) {
  SyntheticSchema schema;
  schema.seed = seed;
  const double k = static_cast<double>(vocab_target) / 2000.0;
  auto n = [&](double base) { return std::max<std::size_t>(4, static_cast<std::size_t>(std::lround(base * k))); };

  struct Seeded {
    const char* slot;
    std::vector<std::string> words;
    std::size_t total;
    bool coexist;
  };
  const std::vector<Seeded> plan{
      {"category", {"shoes", "dress", "jacket", "bag", "shirt", "skirt", "jeans", "hat"}, n(150), false},
      {"brand", {"nike", "adidas", "vero moda", "puma", "zara", "uniqlo"}, n(450), false},
      {"color", {"black", "red", "white", "blue", "green", "pink"}, n(120), false},
      {"style", {"sport", "fairy", "cute", "casual", "vintage", "elegant"}, n(300), true},
      {"attribute", {"ventilated", "long", "waterproof", "slim", "warm", "light"}, n(800), false},
  };

  std::mt19937_64 rng(seed ^ 0x5eed5eedULL);
  std::unordered_set<std::string> used;
  for (const auto& p : plan) {
    for (const auto& v : p.words) {
      for (const auto& t : tokenize(v)) used.insert(t);
    }
  }
  auto fresh = [&]() {
    for (;;) {
      std::string w = detail::pseudo_word(rng);
      if (!used.count(w) && !default_stopwords().count(w)) {
        used.insert(w);
        return w;
      }
    }
  };
  std::bernoulli_distribution two_token(0.1);
  for (const auto& p : plan) {
    SlotSpec s{p.slot, p.words, p.coexist};
    while (s.values.size() < p.total) {
      // A tenth of the brands are two-word names.
      s.values.push_back(std::string(p.slot) == "brand" && two_token(rng) ? fresh() + " " + fresh() : fresh());
    }
    schema.slots.push_back(std::move(s));
  }
  schema.render_order = {4, 2, 1, 3, 0};  // attribute color brand style category
  return schema;
}

namespace detail {

class SessionSimulator {
 public:
  explicit SessionSimulator(const SyntheticSchema& schema) : schema_(schema), rng_(schema.seed) {
    for (const auto& slot : schema.slots) {
      std::vector<double> w;
      for (std::size_t r = 0; r < slot.values.size(); ++r) {
        w.push_back(1.0 / std::pow(static_cast<double>(r + 1), schema.zipf_exponent));
      }
      value_dist_.emplace_back(w.begin(), w.end());
      std::vector<Tokens> toks;
      for (const auto& v : slot.values) toks.push_back(tokenize(v));
      value_tokens_.push_back(std::move(toks));
    }
  }

  SyntheticCorpus run(std::size_t n_sessions) {
    SyntheticCorpus out;
    for (std::size_t s = 0; s < schema_.slots.size(); ++s) {
      for (const auto& v : schema_.slots[s].values) out.kb.emplace_back(schema_.slots[s].name, v);
    }
    const std::size_t n_users = std::max<std::size_t>(1, n_sessions / 4);
    std::vector<std::int64_t> clock(n_users);
    for (std::size_t u = 0; u < n_users; ++u) clock[u] = schema_.base_timestamp + static_cast<std::int64_t>(u) * 17;
    std::uniform_int_distribution<std::int64_t> session_gap(2 * 3600 + 1, 6 * 3600), turn_gap(5, 29 * 60);
    std::uniform_int_distribution<std::size_t> n_queries(schema_.min_queries, schema_.max_queries);

    for (std::size_t sess = 0; sess < n_sessions; ++sess) {
      const std::size_t user = sess % n_users;
      const std::string user_id = "u" + std::to_string(user);
      std::int64_t t = clock[user] + session_gap(rng_);
      State state = initial_state();
      out.logs.push_back({user_id, t, surface(state)});
      for (std::size_t q = 1, total = n_queries(rng_); q < total; ++q) {
        State next = step(state);
        out.gold.push_back(triplet(state, next));
        t += turn_gap(rng_);
        out.logs.push_back({user_id, t, surface(next)});
        state = std::move(next);
      }
      clock[user] = t;
    }
    std::stable_sort(out.logs.begin(), out.logs.end(),
                     [](const RawLogRecord& a, const RawLogRecord& b) { return a.timestamp < b.timestamp; });
    return out;
  }

 private:
  using State = std::map<std::size_t, std::vector<std::size_t>>;  // slot -> value indices

  std::size_t draw_value(std::size_t slot, const std::vector<std::size_t>& avoid) {
    for (;;) {
      const std::size_t v = value_dist_[slot](rng_);
      if (std::find(avoid.begin(), avoid.end(), v) == avoid.end()) return v;
      if (avoid.size() >= schema_.slots[slot].values.size()) throw Error("slot vocabulary exhausted");
    }
  }

  std::size_t token_count(const State& s) const {
    std::size_t n = 0;
    for (const auto& [slot, vals] : s)
      for (auto v : vals) n += value_tokens_[slot][v].size();
    return n;
  }

  Tokens render(const State& s) const {
    Tokens out;
    for (std::size_t slot : schema_.render_order) {
      auto it = s.find(slot);
      if (it == s.end()) continue;
      for (auto v : it->second)
        for (const auto& tok : value_tokens_[slot][v]) out.push_back(tok);
    }
    return out;
  }

  /// Raw query text; brands are sometimes capitalized the way users type them.
  std::string surface(const State& s) {
    std::bernoulli_distribution cap(0.3);
    std::string out;
    for (std::size_t slot : schema_.render_order) {
      auto it = s.find(slot);
      if (it == s.end()) continue;
      for (auto v : it->second) {
        std::string text = schema_.slots[slot].values[v];
        if (schema_.slots[slot].name == "brand" && cap(rng_) && !text.empty() && text[0] >= 'a' && text[0] <= 'z') {
          text[0] = static_cast<char>(text[0] - 'a' + 'A');
        }
        if (!out.empty()) out += ' ';
        out += text;
      }
    }
    return out;
  }

  State initial_state() {
    for (;;) {
      State s;
      s[0] = {draw_value(0, {})};
      std::vector<std::size_t> others;
      for (std::size_t i = 1; i < schema_.slots.size(); ++i) others.push_back(i);
      std::shuffle(others.begin(), others.end(), rng_);
      std::uniform_int_distribution<std::size_t> extra(0, std::min(schema_.max_initial_extra, others.size()));
      for (std::size_t i = 0, e = extra(rng_); i < e; ++i) s[others[i]] = {draw_value(others[i], {})};
      if (token_count(s) <= schema_.max_query_tokens) return s;
    }
  }

  enum class Op { kReplace, kAdd, kCoexist };

  bool apply(State& s, Op op, std::set<std::size_t>& touched) {
    std::vector<std::size_t> candidates;
    const std::size_t n = schema_.slots.size();
    if (op == Op::kCoexist) {
      for (std::size_t i = 0; i < n; ++i) {
        if (schema_.slots[i].coexist && s.count(i) && s[i].size() < schema_.max_coexisting && !touched.count(i)) {
          candidates.push_back(i);
        }
      }
      if (candidates.empty()) return apply(s, Op::kAdd, touched);
    } else if (op == Op::kAdd) {
      for (std::size_t i = 0; i < n; ++i) {
        if (!s.count(i) && !touched.count(i)) candidates.push_back(i);
      }
      if (candidates.empty()) return apply(s, Op::kReplace, touched);
    } else {
      for (std::size_t i = 0; i < n; ++i) {
        if (s.count(i) && !schema_.slots[i].coexist && !touched.count(i) &&
            schema_.slots[i].values.size() > 1) {
          candidates.push_back(i);
        }
      }
      if (candidates.empty()) return false;
    }
    std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
    const std::size_t slot = candidates[pick(rng_)];
    touched.insert(slot);
    if (op == Op::kReplace) {
      s[slot] = {draw_value(slot, s[slot])};
    } else {
      s[slot].push_back(draw_value(slot, s.count(slot) ? s[slot] : std::vector<std::size_t>{}));
    }
    return true;
  }

  Op draw_intent() {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double x = u(rng_);
    if (x < schema_.p_replace) return Op::kReplace;
    if (x < schema_.p_replace + schema_.p_add) return Op::kAdd;
    return Op::kCoexist;
  }

  State step(const State& cur) {
    std::bernoulli_distribution second(schema_.p_second_op), coin(0.5);
    for (;;) {
      State next = cur;
      std::set<std::size_t> touched;
      bool ok = apply(next, draw_intent(), touched);
      if (ok && second(rng_)) ok = apply(next, coin(rng_) ? Op::kReplace : Op::kAdd, touched);
      if (ok && token_count(next) <= schema_.max_query_tokens && render(next) != render(cur)) return next;
    }
  }

  /// Labels come from the slot semantics: a q1 word is kept iff its value survives.
  TrackingTriplet triplet(const State& before, const State& after) const {
    TrackingTriplet t;
    t.q3 = render(after);
    for (std::size_t slot : schema_.render_order) {
      auto it = before.find(slot);
      if (it == before.end()) continue;
      for (auto v : it->second) {
        auto jt = after.find(slot);
        const bool survives = jt != after.end() && std::find(jt->second.begin(), jt->second.end(), v) != jt->second.end();
        for (const auto& tok : value_tokens_[slot][v]) {
          t.q1.push_back(tok);
          t.labels.push_back(survives ? 1 : 0);
        }
      }
    }
    for (std::size_t slot : schema_.render_order) {
      auto it = after.find(slot);
      if (it == after.end()) continue;
      auto bt = before.find(slot);
      for (auto v : it->second) {
        const bool is_new = bt == before.end() || std::find(bt->second.begin(), bt->second.end(), v) == bt->second.end();
        if (is_new)
          for (const auto& tok : value_tokens_[slot][v]) t.q2.push_back(tok);
      }
    }
    validate_triplet(t);
    return t;
  }

  const SyntheticSchema& schema_;
  std::mt19937_64 rng_;
  std::vector<std::discrete_distribution<std::size_t>> value_dist_;
  std::vector<std::vector<Tokens>> value_tokens_;
};

}  // namespace detail

inline SyntheticCorpus gen_synthetic(const SyntheticSchema& schema, std::size_t n_sessions) {
  schema.validate();
  return detail::SessionSimulator(schema).run(n_sessions);
}

inline void write_kb(std::ostream& os, const std::vector<std::pair<std::string, std::string>>& kb) {
  for (const auto& [slot, value] : kb) os << slot << '\t' << value << '\n';
}

/// Exactly n_train / n_val / n_test gold triplets, generated with enough headroom that
/// a leakage-free grouped split can be trimmed to the requested sizes.
inline DatasetSplits synthetic_splits(const SyntheticSchema& schema, std::size_t n_train, std::size_t n_val,
                                      std::size_t n_test, std::uint64_t split_seed) {
  const std::size_t want = n_train + n_val + n_test;
  if (want == 0) throw Error("requested an empty synthetic dataset");
  std::size_t sessions = want / 2 + 16;
  for (;;) {
    SyntheticCorpus corpus = gen_synthetic(schema, sessions);
    if (corpus.gold.size() >= want + want / 5) {
      const double n = static_cast<double>(want);
      DatasetSplits s = split(corpus.gold, {n_train / n, n_val / n, n_test / n}, split_seed);
      if (s.train.size() >= n_train && s.val.size() >= n_val && s.test.size() >= n_test) {
        s.train.resize(n_train);
        s.val.resize(n_val);
        s.test.resize(n_test);
        return s;
      }
    }
    sessions += sessions / 2;
  }
}

}  // namespace qtrack
