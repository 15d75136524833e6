#include "eegc/emr.hpp"

// after Eigen: resolv.h (pulled in by httplib) defines a `_res` macro
#include <httplib.h>

namespace eegc {

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& j) {
  res.status = status;
  res.set_content(j.dump(), "application/json");
}

template <class F>
httplib::Server::Handler guarded(F f) {
  return [f](const httplib::Request& req, httplib::Response& res) {
    try {
      f(req, res);
    } catch (const ServiceError& e) {
      send_json(res, e.status(), e.body());
    } catch (const std::exception& e) {
      send_json(res, 500, {{"code", "internal"}, {"message", e.what()}});
    }
  };
}

nlohmann::json parse_body(const httplib::Request& req) {
  try {
    return nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::parse_error& e) {
    throw ServiceError(400, "bad_json", std::string("request body is not valid JSON: ") + e.what());
  }
}

}  // namespace

struct HttpServer::Impl {
  httplib::Server http;
};

HttpServer::HttpServer(EmrService& svc) : impl_(std::make_unique<Impl>()) {
  auto& http = impl_->http;
  EmrService* s = &svc;

  http.Get("/v1/health", guarded([s](const httplib::Request&, httplib::Response& res) {
    send_json(res, s->loaded() ? 200 : 503, s->health());
  }));

  http.Get("/v1/models", guarded([s](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, s->models());
  }));

  http.Post("/v1/emr", guarded([s](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    const auto sub = parse_submission(body, s->config().generation);
    send_json(res, 200, s->submit(sub));
  }));

  http.Post("/v1/chat", guarded([s](const httplib::Request& req, httplib::Response& res) {
    const auto body = parse_body(req);
    std::vector<FieldError> errs;
    if (!body.is_object()) errs.push_back({"", "expected an object"});
    if (body.is_object() && (!body.contains("session_id") || !body["session_id"].is_string())) {
      errs.push_back({"session_id", "required string"});
    }
    if (body.is_object() && (!body.contains("question") || !body["question"].is_string())) {
      errs.push_back({"question", "required string"});
    }
    if (!errs.empty()) throw ServiceError(422, "invalid_request", "invalid chat request", errs);
    const auto id = body["session_id"].get<std::string>();
    const auto answer = s->followup(id, body["question"].get<std::string>());
    const auto sess = s->sessions().get(id);
    send_json(res, 200, {{"session_id", id},
                         {"answer", answer},
                         {"turns", sess ? sess->turns.size() : 0}});
  }));

  http.set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (res.body.empty()) {
      nlohmann::json j = {{"code", res.status == 404 ? "not_found" : "error"},
                          {"message", httplib::status_message(res.status)}};
      res.set_content(j.dump(), "application/json");
    }
  });
}

HttpServer::~HttpServer() = default;

int HttpServer::bind(const std::string& host, int port) {
  int bound = port;
  if (port == 0) {
    bound = impl_->http.bind_to_any_port(host);
  } else if (!impl_->http.bind_to_port(host, port)) {
    bound = -1;
  }
  if (bound < 0) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return bound;
}

void HttpServer::listen() { impl_->http.listen_after_bind(); }

void HttpServer::stop() { impl_->http.stop(); }

}  // namespace eegc
