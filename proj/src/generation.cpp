#include "evidentia/generation.hpp"

#include <thread>

#include "evidentia/error.hpp"
#include "evidentia/hash.hpp"
#include "httplib.h"
#include "json.hpp"

namespace evidentia {

namespace {

using Clock = std::chrono::steady_clock;

std::chrono::milliseconds since(Clock::time_point start) {
  return std::chrono::duration_cast<std::chrono::milliseconds>(Clock::now() - start);
}

}  // namespace

void GenerationRequest::validate() const {
  if (timeout.count() <= 0) throw ArgumentError("generation timeout must be > 0");
  if (!(temperature >= 0.0)) throw ArgumentError("temperature must be >= 0");
}

// ---------------------------------------------------------------------------

StubBackend::StubBackend(std::string text)
    : fn_([text = std::move(text)](std::string_view) { return text; }) {}

StubBackend::StubBackend(std::function<std::string(std::string_view)> fn) : fn_(std::move(fn)) {}

GenerationResponse StubBackend::generate(const GenerationRequest& request) const {
  request.validate();
  const auto start = Clock::now();
  GenerationResponse out;
  out.text = fn_(request.prompt);
  out.latency = since(start);
  out.backend_id = id();
  return out;
}

// ---------------------------------------------------------------------------

HttpBackend::HttpBackend(std::string url) : url_(std::move(url)) {
  const auto scheme = url_.find("://");
  if (scheme == std::string::npos || url_.substr(0, scheme) != "http") {
    throw ArgumentError("backend url must start with http://: " + url_);
  }
  const auto slash = url_.find('/', scheme + 3);
  origin_ = url_.substr(0, slash);
  path_ = slash == std::string::npos ? "/" : url_.substr(slash);
  if (origin_.size() <= scheme + 3) throw ArgumentError("backend url has no host: " + url_);
}

GenerationResponse HttpBackend::generate(const GenerationRequest& request) const {
  request.validate();
  const auto start = Clock::now();
  httplib::Client client(origin_);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(request.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(request.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  client.set_write_timeout(secs.count(), usecs.count());

  nlohmann::json body = {{"prompt", request.prompt},
                         {"max_tokens", request.max_tokens},
                         {"temperature", request.temperature}};
  auto res = client.Post(path_, body.dump(), "application/json");
  if (!res) {
    throw BackendError("backend request failed: " + httplib::to_string(res.error()));
  }
  if (res->status != 200) {
    throw BackendError("backend returned HTTP " + std::to_string(res->status));
  }
  GenerationResponse out;
  try {
    out.text = nlohmann::json::parse(res->body).at("text").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw BackendError(std::string("backend reply is not {\"text\": ...}: ") + e.what());
  }
  out.latency = since(start);
  out.backend_id = id();
  return out;
}

// ---------------------------------------------------------------------------

PolicyBackend::PolicyBackend(std::shared_ptr<const Policy> policy,
                             std::function<std::string(std::string_view)> render)
    : policy_(std::move(policy)), render_(std::move(render)) {
  if (!policy_) throw ArgumentError("policy backend needs a policy");
}

GenerationResponse PolicyBackend::generate(const GenerationRequest& request) const {
  request.validate();
  const auto start = Clock::now();
  const auto phi = policy_->context(request.prompt);
  std::vector<std::size_t> tokens;
  if (request.temperature == 0.0) {
    tokens = policy_->greedy(phi);
  } else {
    std::mt19937_64 rng(fnv1a64(request.prompt));
    tokens = policy_->sample(phi, rng);
  }
  if (tokens.size() > request.max_tokens) tokens.resize(request.max_tokens);
  const std::string decoded = policy_->decode_response(tokens);
  GenerationResponse out;
  out.text = render_ ? render_(decoded) : decoded;
  out.latency = since(start);
  out.backend_id = id();
  return out;
}

// ---------------------------------------------------------------------------

GenerationResponse generate_with_retry(const GenerationBackend& backend,
                                       const GenerationRequest& request, const RetryPolicy& retry) {
  auto backoff = retry.initial_backoff;
  for (std::size_t attempt = 0;; ++attempt) {
    try {
      return backend.generate(request);
    } catch (const BackendError& e) {
      if (attempt >= retry.retries) {
        throw BackendError(std::string(e.what()) + " (after " + std::to_string(attempt + 1) +
                           " attempts)");
      }
    }
    std::this_thread::sleep_for(backoff);
    backoff *= 2;
  }
}

}  // namespace evidentia
