#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <string_view>

#include "evidentia/policy.hpp"

namespace evidentia {

struct GenerationRequest {
  std::string prompt;
  std::size_t max_tokens = 256;
  double temperature = 0.0;
  std::chrono::milliseconds timeout{10000};

  void validate() const;
};

struct GenerationResponse {
  std::string text;
  std::chrono::milliseconds latency{0};
  std::string backend_id;
};

/// Text generator behind the engine. Implementations throw BackendError
/// on failure and must be safe to call from several threads.
class GenerationBackend {
 public:
  virtual ~GenerationBackend() = default;
  virtual GenerationResponse generate(const GenerationRequest& request) const = 0;
  virtual std::string id() const = 0;
};

/// Deterministic backend for tests: returns a fixed text, or the result of
/// a function of the prompt.
class StubBackend : public GenerationBackend {
 public:
  explicit StubBackend(std::string text);
  explicit StubBackend(std::function<std::string(std::string_view prompt)> fn);

  GenerationResponse generate(const GenerationRequest& request) const override;
  std::string id() const override { return "stub"; }

 private:
  std::function<std::string(std::string_view)> fn_;
};

/// POSTs {"prompt", "max_tokens", "temperature"} as JSON to `url` and
/// reads {"text"} from the reply. Plain http only.
class HttpBackend : public GenerationBackend {
 public:
  explicit HttpBackend(std::string url);

  GenerationResponse generate(const GenerationRequest& request) const override;
  std::string id() const override { return "http:" + url_; }

 private:
  std::string url_;
  std::string origin_;  // scheme://host:port
  std::string path_;
};

/// Decodes with a local Policy: greedy at temperature 0, otherwise sampled
/// with a seed derived from the prompt. `render` maps the decoded token
/// string to response text (identity when unset).
class PolicyBackend : public GenerationBackend {
 public:
  PolicyBackend(std::shared_ptr<const Policy> policy,
                std::function<std::string(std::string_view)> render = {});

  GenerationResponse generate(const GenerationRequest& request) const override;
  std::string id() const override { return "policy"; }

 private:
  std::shared_ptr<const Policy> policy_;
  std::function<std::string(std::string_view)> render_;
};

struct RetryPolicy {
  std::size_t retries = 2;
  std::chrono::milliseconds initial_backoff{200};  // doubled after each failure
};

/// Calls the backend up to 1 + retries times; rethrows the last
/// BackendError with the attempt count appended.
GenerationResponse generate_with_retry(const GenerationBackend& backend,
                                       const GenerationRequest& request, const RetryPolicy& retry);

}  // namespace evidentia
