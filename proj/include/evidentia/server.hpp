#pragma once

#include <memory>
#include <string>
#include <thread>

#include "evidentia/engine.hpp"

namespace httplib {
class Server;
}

namespace evidentia {

/// JSON error body: {"error": {"code": ..., "message": ...}}.
std::string error_body(std::string_view code, std::string_view message);

/// HTTP front end over one Engine.
///   POST /respond  {claim}     -> CounterResponse
///   POST /retrieve {claim, k?} -> evidence list
///   GET  /health               -> version and artifact hashes
/// Malformed requests answer 400, backend failures 502 (with the retrieved
/// evidence), anything else 500. Handlers never let an exception escape.
class Server {
 public:
  Server(std::shared_ptr<const Engine> engine, ServerConfig config);
  ~Server();
  Server(const Server&) = delete;
  Server& operator=(const Server&) = delete;

  /// Binds (port 0 picks a free port) and serves on a background thread.
  /// Returns the bound port.
  int start();
  /// Binds and serves on the calling thread until stop().
  void run();
  void stop();
  int port() const { return port_; }

 private:
  int bind();

  std::shared_ptr<const Engine> engine_;
  ServerConfig config_;
  std::unique_ptr<httplib::Server> http_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace evidentia
