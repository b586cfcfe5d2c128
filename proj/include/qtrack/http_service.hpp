#pragma once

// JSON-over-HTTP wrapper around SessionStore.
//   POST /v1/sessions                      -> {session_id}
//   POST /v1/sessions/{id}/track           {query}        -> TrackResponse
//   POST /v1/sessions/{id}/override        {index, keep}  -> TrackResponse
//   GET  /v1/sessions/{id}/history         -> {session_id, turns: [...]}
// Errors are {"error": message} with 400 (malformed body), 404 (unknown or expired
// session), 422 (empty query, bad index) or 503 (no model loaded).

// session.hpp pulls in Eigen, which must be parsed before httplib drags in
// <resolv.h> and its `_res` macro.
#include "qtrack/session.hpp"

#include <httplib.h>
#include <json.hpp>

#include <string>

namespace qtrack {

struct HttpOptions {
  std::string cors_origin = "*";
};

namespace detail {

inline void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

inline void send_error(httplib::Response& res, int status, const std::string& msg) {
  send_json(res, status, {{"error", msg}});
}

inline nlohmann::json parse_body(const httplib::Request& req) {
  nlohmann::json body = nlohmann::json::parse(req.body, nullptr, false);
  if (body.is_discarded() || !body.is_object()) throw std::invalid_argument("request body must be a JSON object");
  return body;
}

template <typename F>
void guarded(httplib::Response& res, F&& f) {
  try {
    f();
  } catch (const std::invalid_argument& e) {
    send_error(res, 400, e.what());
  } catch (const SessionNotFound& e) {
    send_error(res, 404, e.what());
  } catch (const InvalidRequest& e) {
    send_error(res, 422, e.what());
  } catch (const ServiceUnavailable& e) {
    send_error(res, 503, e.what());
  } catch (const std::exception& e) {
    send_error(res, 500, e.what());
  }
}

}  // namespace detail

inline void install_routes(httplib::Server& server, SessionStore& store, const HttpOptions& opts = {}) {
  using detail::guarded;
  using detail::send_json;
  server.set_default_headers({{"Access-Control-Allow-Origin", opts.cors_origin},
                              {"Access-Control-Allow-Methods", "GET, POST, OPTIONS"},
                              {"Access-Control-Allow-Headers", "Content-Type"}});
  server.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  server.Post("/v1/sessions", [&store](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 201, {{"session_id", store.create_session()}}); });
  });

  server.Post(R"(/v1/sessions/([^/]+)/track)", [&store](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto body = detail::parse_body(req);
      if (!body.contains("query") || !body["query"].is_string()) {
        throw InvalidRequest("body needs a string field 'query'");
      }
      send_json(res, 200, to_json(store.track(req.matches[1], body["query"].get<std::string>())));
    });
  });

  server.Post(R"(/v1/sessions/([^/]+)/override)", [&store](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto body = detail::parse_body(req);
      if (!body.contains("index") || !body["index"].is_number_integer() || body["index"].get<long long>() < 0) {
        throw InvalidRequest("body needs a non-negative integer field 'index'");
      }
      if (!body.contains("keep") || !body["keep"].is_boolean()) throw InvalidRequest("body needs a boolean field 'keep'");
      send_json(res, 200,
                to_json(store.override_decision(req.matches[1], body["index"].get<std::size_t>(), body["keep"].get<bool>())));
    });
  });

  server.Get(R"(/v1/sessions/([^/]+)/history)", [&store](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string id = req.matches[1];
      nlohmann::json turns = nlohmann::json::array();
      for (const auto& t : store.history(id)) turns.push_back(to_json(t));
      send_json(res, 200, {{"session_id", id}, {"turns", turns}});
    });
  });

  server.Get("/v1/health", [&store](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}, {"model_loaded", store.has_model()}, {"sessions", store.size()}});
  });
}

}  // namespace qtrack
