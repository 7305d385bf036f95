#include "evidentia/server.hpp"

#include "httplib.h"

namespace evidentia {

namespace {

using nlohmann::ordered_json;

void reply(httplib::Response& res, int status, const std::string& body) {
  res.status = status;
  res.set_content(body, "application/json");
}

void fail(httplib::Response& res, int status, std::string_view code, std::string_view message) {
  reply(res, status, error_body(code, message));
}

/// Parses the body as a JSON object with a non-empty string "claim".
nlohmann::json parse_request(const httplib::Request& req) {
  nlohmann::json body;
  try {
    body = nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::parse_error&) {
    throw ArgumentError("request body is not valid JSON");
  }
  if (!body.is_object()) throw ArgumentError("request body must be a JSON object");
  auto it = body.find("claim");
  if (it == body.end() || !it->is_string()) throw ArgumentError("\"claim\" must be a string");
  if (it->get<std::string>().empty()) throw ArgumentError("\"claim\" must not be empty");
  return body;
}

/// Runs `fn` and maps exceptions onto status codes.
template <typename Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const ArgumentError& e) {
    fail(res, 400, "bad_request", e.what());
  } catch (const ResponseError& e) {
    ordered_json j = nlohmann::json::parse(error_body("backend_error", e.what()));
    j["evidence"] = to_json(e.evidence());
    reply(res, 502, j.dump());
  } catch (const BackendError& e) {
    fail(res, 502, "backend_error", e.what());
  } catch (const std::exception& e) {
    fail(res, 500, "internal_error", e.what());
  } catch (...) {
    fail(res, 500, "internal_error", "unknown error");
  }
}

}  // namespace

std::string error_body(std::string_view code, std::string_view message) {
  ordered_json j;
  j["error"] = {{"code", code}, {"message", message}};
  return j.dump();
}

Server::Server(std::shared_ptr<const Engine> engine, ServerConfig config)
    : engine_(std::move(engine)), config_(std::move(config)), http_(std::make_unique<httplib::Server>()) {
  if (!engine_) throw ArgumentError("server needs an engine");
  if (config_.threads == 0) throw ArgumentError("server threads must be > 0");
  const std::size_t threads = config_.threads;
  http_->new_task_queue = [threads] { return new httplib::ThreadPool(threads); };

  http_->Get("/health", [this](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { reply(res, 200, engine_->health().dump()); });
  });

  http_->Post("/retrieve", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto body = parse_request(req);
      std::size_t k = engine_->config().pipeline.k_out;
      if (auto it = body.find("k"); it != body.end()) {
        if (!it->is_number_integer() || it->get<long long>() <= 0) {
          throw ArgumentError("\"k\" must be a positive integer");
        }
        k = it->get<std::size_t>();
      }
      const auto claim = body["claim"].get<std::string>();
      ordered_json j;
      j["claim"] = claim;
      j["evidence"] = to_json(engine_->retrieve(claim, k));
      reply(res, 200, j.dump());
    });
  });

  http_->Post("/respond", [this](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const auto body = parse_request(req);
      reply(res, 200, to_json(engine_->respond(body["claim"].get<std::string>())).dump());
    });
  });

  http_->set_error_handler([](const httplib::Request&, httplib::Response& res) {
    if (!res.body.empty()) return;
    const bool not_found = res.status == 404;
    fail(res, res.status, not_found ? "not_found" : "http_error",
         not_found ? "no such endpoint" : httplib::status_message(res.status));
  });
  http_->set_exception_handler(
      [](const httplib::Request&, httplib::Response& res, std::exception_ptr) {
        fail(res, 500, "internal_error", "unhandled exception");
      });
}

Server::~Server() { stop(); }

int Server::bind() {
  if (config_.port == 0) {
    port_ = http_->bind_to_any_port(config_.host);
  } else {
    port_ = http_->bind_to_port(config_.host, config_.port) ? config_.port : -1;
  }
  if (port_ < 0) {
    throw DataError("cannot bind " + config_.host + ":" + std::to_string(config_.port));
  }
  return port_;
}

int Server::start() {
  const int port = bind();
  thread_ = std::thread([this] { http_->listen_after_bind(); });
  http_->wait_until_ready();
  return port;
}

void Server::run() {
  bind();
  http_->listen_after_bind();
}

void Server::stop() {
  if (http_) http_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace evidentia
