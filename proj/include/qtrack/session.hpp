#pragma once

// Conversational tracking state. Each session holds the current internal query and the
// per-word decisions that produced it; a track call feeds (internal query, new words)
// to the keep predictor and re-renders.

#include <json.hpp>

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "qtrack/checkpoint.hpp"
#include "qtrack/model.hpp"
#include "qtrack/text.hpp"

namespace qtrack {

class SessionNotFound : public Error {
 public:
  using Error::Error;
};
class InvalidRequest : public Error {
 public:
  using Error::Error;
};
class ServiceUnavailable : public Error {
 public:
  using Error::Error;
};

/// P(keep) for each word of q1 given the new words q2.
class KeepPredictor {
 public:
  virtual ~KeepPredictor() = default;
  virtual std::vector<double> predict(const Tokens& q1, const Tokens& q2) const = 0;
};

class ModelPredictor : public KeepPredictor {
 public:
  explicit ModelPredictor(Checkpoint ckpt) : ckpt_(std::move(ckpt)) {}
  std::vector<double> predict(const Tokens& q1, const Tokens& q2) const override {
    return predict_keep(ckpt_.model, ckpt_.vocab, q1, q2);
  }
  const Checkpoint& checkpoint() const { return ckpt_; }

 private:
  Checkpoint ckpt_;
};

enum class DecisionSource { kQ1, kQ2, kOverride };

inline std::string to_string(DecisionSource s) {
  switch (s) {
    case DecisionSource::kQ1: return "q1";
    case DecisionSource::kQ2: return "q2";
    case DecisionSource::kOverride: return "override";
  }
  return "?";
}

struct Decision {
  std::string word;
  bool keep = true;
  double prob = 1.0;
  DecisionSource source = DecisionSource::kQ1;

  bool operator==(const Decision&) const = default;
};

struct TrackResponse {
  Tokens internal_query;
  std::vector<Decision> decisions;
  std::size_t turn = 0;
  bool noop = false;

  bool operator==(const TrackResponse&) const = default;
};

struct Turn {
  std::string input;
  TrackResponse response;
  bool overridden = false;

  bool operator==(const Turn&) const = default;
};

inline nlohmann::json to_json(const TrackResponse& r) {
  nlohmann::json d = nlohmann::json::array();
  for (const auto& x : r.decisions) {
    d.push_back({{"word", x.word}, {"keep", x.keep}, {"prob", x.prob}, {"source", to_string(x.source)}});
  }
  return {{"internal_query", r.internal_query}, {"decisions", d}, {"turn", r.turn}, {"noop", r.noop}};
}

inline nlohmann::json to_json(const Turn& t) {
  return {{"input", t.input}, {"response", to_json(t.response)}, {"overridden", t.overridden}};
}

/// Kept decision words in order, each once.
inline Tokens render_decisions(const std::vector<Decision>& ds) {
  Tokens out;
  for (const auto& d : ds) {
    if (d.keep) out.push_back(d.word);
  }
  return dedup_tokens(out);
}

using Clock = std::function<std::chrono::steady_clock::time_point()>;

struct SessionStoreOptions {
  std::chrono::seconds ttl{30 * 60};
  Clock clock = [] { return std::chrono::steady_clock::now(); };
  /// When set, every operation is appended to <dir>/<session id>.jsonl.
  std::optional<std::filesystem::path> persist_dir;
  std::uint64_t id_seed = 0;  // 0 draws from std::random_device
};

class SessionStore {
 public:
  explicit SessionStore(std::shared_ptr<const KeepPredictor> predictor, SessionStoreOptions opts = {})
      : predictor_(std::move(predictor)), opts_(std::move(opts)), id_rng_(opts_.id_seed ? opts_.id_seed : std::random_device{}()) {
    if (opts_.persist_dir) {
      std::filesystem::create_directories(*opts_.persist_dir);
      replay_persisted();
    }
  }

  bool has_model() const { return predictor_ != nullptr; }

  std::string create_session() {
    if (!predictor_) throw ServiceUnavailable("no model loaded");
    std::lock_guard lock(store_mu_);
    std::string id;
    do id = fresh_id();
    while (sessions_.count(id));
    auto s = std::make_shared<Session>();
    s->id = id;
    s->last_active = opts_.clock();
    sessions_.emplace(id, s);
    persist(*s, {{"op", "create"}});
    return id;
  }

  TrackResponse track(const std::string& id, const std::string& input) {
    auto s = get(id);
    std::lock_guard lock(s->mu);
    TrackResponse r = track_locked(*s, input);
    persist(*s, {{"op", "track"}, {"query", input}});
    return r;
  }

  /// Flips decision `index` of the latest turn and re-renders the internal query.
  TrackResponse override_decision(const std::string& id, std::size_t index, bool keep) {
    auto s = get(id);
    std::lock_guard lock(s->mu);
    TrackResponse r = override_locked(*s, index, keep);
    persist(*s, {{"op", "override"}, {"index", index}, {"keep", keep}});
    return r;
  }

  std::vector<Turn> history(const std::string& id) {
    auto s = get(id);
    std::lock_guard lock(s->mu);
    return s->history;
  }

  Tokens internal_query(const std::string& id) {
    auto s = get(id);
    std::lock_guard lock(s->mu);
    return s->internal_query;
  }

  /// Drops sessions idle for longer than the TTL; returns how many were removed.
  std::size_t purge_expired() {
    std::lock_guard lock(store_mu_);
    const auto now = opts_.clock();
    std::size_t n = 0;
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      if (expired(*it->second, now)) {
        it = sessions_.erase(it);
        ++n;
      } else {
        ++it;
      }
    }
    return n;
  }

  std::size_t size() const {
    std::lock_guard lock(store_mu_);
    return sessions_.size();
  }

 private:
  struct Session {
    std::string id;
    std::mutex mu;
    Tokens internal_query;
    std::vector<Decision> decisions;
    std::vector<Turn> history;
    std::chrono::steady_clock::time_point last_active;
  };

  std::string fresh_id() {
    static const char* hex = "0123456789abcdef";
    std::string id;
    for (int i = 0; i < 2; ++i) {
      std::uint64_t v = id_rng_();
      for (int k = 0; k < 16; ++k, v >>= 4) id += hex[v & 0xF];
    }
    return id;
  }

  bool expired(const Session& s, std::chrono::steady_clock::time_point now) const {
    return now - s.last_active > opts_.ttl;
  }

  std::shared_ptr<Session> get(const std::string& id) {
    std::lock_guard lock(store_mu_);
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw SessionNotFound("unknown session " + id);
    const auto now = opts_.clock();
    if (expired(*it->second, now)) {
      sessions_.erase(it);
      throw SessionNotFound("session " + id + " expired");
    }
    it->second->last_active = now;
    return it->second;
  }

  TrackResponse track_locked(Session& s, const std::string& input) {
    const Tokens words = normalize_query(input);
    if (words.empty()) throw InvalidRequest("query has no words");
    TrackResponse r;
    r.turn = s.history.size() + 1;
    if (s.history.empty() || s.internal_query.empty()) {
      for (const auto& w : words) r.decisions.push_back({w, true, 1.0, DecisionSource::kQ2});
    } else {
      const Tokens& q1 = s.internal_query;
      Tokens q2;
      for (const auto& w : words) {
        if (std::find(q1.begin(), q1.end(), w) == q1.end()) q2.push_back(w);
      }
      if (q2.empty()) {
        r.noop = true;
        for (const auto& w : q1) r.decisions.push_back({w, true, 1.0, DecisionSource::kQ1});
      } else {
        const auto probs = predictor_->predict(q1, q2);
        if (probs.size() != q1.size()) throw Error("predictor returned the wrong number of probabilities");
        for (std::size_t i = 0; i < q1.size(); ++i) {
          r.decisions.push_back({q1[i], keep_label(probs[i]) == 1, probs[i], DecisionSource::kQ1});
        }
        for (const auto& w : q2) r.decisions.push_back({w, true, 1.0, DecisionSource::kQ2});
      }
    }
    r.internal_query = render_decisions(r.decisions);
    s.decisions = r.decisions;
    s.internal_query = r.internal_query;
    s.history.push_back({input, r, false});
    return r;
  }

  TrackResponse override_locked(Session& s, std::size_t index, bool keep) {
    if (s.history.empty()) throw InvalidRequest("session has no decisions to override");
    if (index >= s.decisions.size()) {
      throw InvalidRequest("decision index " + std::to_string(index) + " out of range [0, " +
                           std::to_string(s.decisions.size()) + ")");
    }
    Decision& d = s.decisions[index];
    d.keep = keep;
    d.source = DecisionSource::kOverride;
    s.internal_query = render_decisions(s.decisions);
    Turn& last = s.history.back();
    last.response.decisions = s.decisions;
    last.response.internal_query = s.internal_query;
    last.overridden = true;
    return last.response;
  }

  void persist(const Session& s, const nlohmann::json& event) {
    if (!opts_.persist_dir || replaying_) return;
    std::ofstream os(*opts_.persist_dir / (s.id + ".jsonl"), std::ios::app);
    if (!os) throw Error("cannot append to session log for " + s.id);
    os << event.dump() << '\n';
  }

  void replay_persisted() {
    replaying_ = true;
    for (const auto& entry : std::filesystem::directory_iterator(*opts_.persist_dir)) {
      if (entry.path().extension() != ".jsonl") continue;
      auto s = std::make_shared<Session>();
      s->id = entry.path().stem().string();
      s->last_active = opts_.clock();
      std::ifstream is(entry.path());
      std::string line;
      while (std::getline(is, line)) {
        if (line.empty()) continue;
        try {
          const auto ev = nlohmann::json::parse(line);
          const auto op = ev.at("op").get<std::string>();
          if (op == "track" && predictor_) track_locked(*s, ev.at("query").get<std::string>());
          if (op == "override") override_locked(*s, ev.at("index").get<std::size_t>(), ev.at("keep").get<bool>());
        } catch (const std::exception&) {
          break;  // a torn tail line ends the replay for this session
        }
      }
      sessions_.emplace(s->id, s);
    }
    replaying_ = false;
  }

  std::shared_ptr<const KeepPredictor> predictor_;
  SessionStoreOptions opts_;
  mutable std::mutex store_mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::mt19937_64 id_rng_;
  bool replaying_ = false;
};

}  // namespace qtrack
