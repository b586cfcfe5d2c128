#pragma once

#include <fstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "qtrack/tensor.hpp"
#include "qtrack/text.hpp"

namespace qtrack {

/// Token <-> id bijection with PAD = 0 and UNK = 1.
class Vocabulary {
 public:
  static constexpr int kPad = 0;
  static constexpr int kUnk = 1;
  static constexpr const char* kPadToken = "<pad>";
  static constexpr const char* kUnkToken = "<unk>";

  Vocabulary() {
    add(kPadToken);
    add(kUnkToken);
  }

  int add(const std::string& token) {
    if (token.empty()) throw Error("vocabulary: empty token");
    auto [it, inserted] = ids_.emplace(token, static_cast<int>(tokens_.size()));
    if (inserted) tokens_.push_back(token);
    return it->second;
  }

  int id(const std::string& token) const {
    auto it = ids_.find(token);
    return it == ids_.end() ? kUnk : it->second;
  }

  bool contains(const std::string& token) const { return ids_.count(token) > 0; }
  const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

  std::vector<int> ids(const Tokens& tokens) const {
    std::vector<int> out;
    out.reserve(tokens.size());
    for (const auto& t : tokens) out.push_back(id(t));
    return out;
  }

  /// One token per line; line number is the id.
  void save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write vocabulary: " + path);
    for (const auto& t : tokens_) os << t << '\n';
  }

  static Vocabulary load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot read vocabulary: " + path);
    Vocabulary v;
    v.ids_.clear();
    v.tokens_.clear();
    std::string line;
    while (std::getline(is, line)) {
      if (v.ids_.count(line)) throw Error("vocabulary: duplicate token '" + line + "' in " + path);
      v.ids_.emplace(line, static_cast<int>(v.tokens_.size()));
      v.tokens_.push_back(line);
    }
    if (v.tokens_.size() < 2 || v.tokens_[kPad] != kPadToken || v.tokens_[kUnk] != kUnkToken) {
      throw Error("vocabulary: " + path + " does not start with the reserved tokens");
    }
    return v;
  }

  bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

 private:
  std::unordered_map<std::string, int> ids_;
  std::vector<std::string> tokens_;
};

}  // namespace qtrack
