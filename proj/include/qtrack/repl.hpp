#pragma once

// Line-oriented tracking REPL. Each input line is a query; after every turn the
// internal query and the per-word decisions are printed.
//   :override <index> keep|drop   flip one decision of the latest turn
//   :history                      list all turns
//   :quit                         leave

#include <cstdio>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>

#include "qtrack/session.hpp"

namespace qtrack {

inline void print_response(std::ostream& os, const TrackResponse& r) {
  os << "internal query: " << join_tokens(r.internal_query) << (r.noop ? "  (no new words)" : "") << '\n';
  char buf[64];
  for (std::size_t i = 0; i < r.decisions.size(); ++i) {
    const auto& d = r.decisions[i];
    std::snprintf(buf, sizeof buf, "%.3f", d.prob);
    os << "  [" << i << "] " << d.word << ' ' << (d.keep ? "keep" : "drop") << ' ' << buf << ' '
       << to_string(d.source) << '\n';
  }
}

/// Returns the number of turns tracked.
inline std::size_t run_repl(SessionStore& store, std::istream& in, std::ostream& out, bool prompt = true) {
  const std::string id = store.create_session();
  std::string line;
  std::size_t turns = 0;
  for (;;) {
    if (prompt) out << "> " << std::flush;
    if (!std::getline(in, line)) break;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos) continue;
    line = line.substr(first);
    try {
      if (line == ":quit" || line == ":q") break;
      if (line == ":history") {
        for (const auto& t : store.history(id)) {
          out << t.response.turn << ". " << t.input << " -> " << join_tokens(t.response.internal_query)
              << (t.overridden ? " (overridden)" : "") << '\n';
        }
        continue;
      }
      if (line.rfind(":override", 0) == 0) {
        std::istringstream ls(line.substr(9));
        long long index = -1;
        std::string what;
        if (!(ls >> index >> what) || index < 0 || (what != "keep" && what != "drop")) {
          out << "usage: :override <index> keep|drop\n";
          continue;
        }
        print_response(out, store.override_decision(id, static_cast<std::size_t>(index), what == "keep"));
        continue;
      }
      if (line[0] == ':') {
        out << "unknown command " << line << '\n';
        continue;
      }
      print_response(out, store.track(id, line));
      ++turns;
    } catch (const InvalidRequest& e) {
      out << "error: " << e.what() << '\n';
    }
  }
  return turns;
}

}  // namespace qtrack
