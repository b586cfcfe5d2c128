#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace qtrack {

using Tokens = std::vector<std::string>;

namespace detail {

/// Decodes one UTF-8 sequence starting at `i`; malformed bytes decode as themselves.
inline char32_t next_codepoint(std::string_view s, std::size_t& i) {
  const auto b0 = static_cast<unsigned char>(s[i]);
  std::size_t len = b0 < 0x80 ? 1 : (b0 >> 5) == 0x6 ? 2 : (b0 >> 4) == 0xE ? 3 : (b0 >> 3) == 0x1E ? 4 : 1;
  if (i + len > s.size()) len = 1;
  char32_t cp = len == 1 ? b0 : len == 2 ? (b0 & 0x1F) : len == 3 ? (b0 & 0x0F) : (b0 & 0x07);
  for (std::size_t k = 1; k < len; ++k) {
    const auto b = static_cast<unsigned char>(s[i + k]);
    if ((b >> 6) != 0x2) {
      len = 1;
      cp = b0;
      break;
    }
    cp = (cp << 6) | (b & 0x3F);
  }
  i += len;
  return cp;
}

inline bool is_space(char32_t cp) {
  return cp == ' ' || cp == '\t' || cp == '\n' || cp == '\r' || cp == '\f' || cp == '\v' || cp == 0x00A0 ||
         cp == 0x3000;
}

inline bool is_ascii_punct(char32_t cp) {
  return (cp >= 0x21 && cp <= 0x2F) || (cp >= 0x3A && cp <= 0x40) || (cp >= 0x5B && cp <= 0x60) ||
         (cp >= 0x7B && cp <= 0x7E);
}

}  // namespace detail

/// Punctuation class: ASCII punctuation, general punctuation, CJK symbols and
/// full-width punctuation forms.
inline bool is_punctuation(char32_t cp) {
  return detail::is_ascii_punct(cp) || (cp >= 0x00A1 && cp <= 0x00BF) || (cp >= 0x2000 && cp <= 0x206F) ||
         (cp >= 0x3001 && cp <= 0x303F) || (cp >= 0xFF01 && cp <= 0xFF0F) || (cp >= 0xFF1A && cp <= 0xFF20) ||
         (cp >= 0xFF3B && cp <= 0xFF40) || (cp >= 0xFF5B && cp <= 0xFF65);
}

/// Lowercases ASCII, splits on whitespace and strips punctuation. Non-ASCII words
/// pass through unchanged. May return an empty list.
inline Tokens tokenize(std::string_view text) {
  Tokens out;
  std::string cur;
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t start = i;
    const char32_t cp = detail::next_codepoint(text, i);
    if (detail::is_space(cp)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else if (is_punctuation(cp)) {
      continue;
    } else if (cp < 0x80) {
      cur.push_back(static_cast<char>(cp >= 'A' && cp <= 'Z' ? cp + ('a' - 'A') : cp));
    } else {
      cur.append(text.substr(start, i - start));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

/// Keeps the first occurrence of each word.
inline Tokens dedup_tokens(const Tokens& tokens) {
  Tokens out;
  std::unordered_set<std::string> seen;
  for (const auto& t : tokens) {
    if (seen.insert(t).second) out.push_back(t);
  }
  return out;
}

/// tokenize() followed by dedup_tokens().
inline Tokens normalize_query(std::string_view text) { return dedup_tokens(tokenize(text)); }

inline std::string join_tokens(const Tokens& tokens, std::string_view sep = " ") {
  std::string out;
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (i) out.append(sep);
    out.append(tokens[i]);
  }
  return out;
}

/// True for a single character of the punctuation class.
inline bool is_punctuation_token(std::string_view token) {
  if (token.empty()) return false;
  std::size_t i = 0;
  const char32_t cp = detail::next_codepoint(token, i);
  return i == token.size() && is_punctuation(cp);
}

}  // namespace qtrack
