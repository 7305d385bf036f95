#pragma once

#include <array>
#include <chrono>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "evidentia/corpus.hpp"
#include "evidentia/dense.hpp"
#include "evidentia/error.hpp"
#include "evidentia/generation.hpp"
#include "evidentia/inverted_index.hpp"
#include "evidentia/pipeline.hpp"
#include "evidentia/policy.hpp"
#include "evidentia/ppo.hpp"
#include "evidentia/prompt.hpp"
#include "evidentia/retriever_training.hpp"
#include "evidentia/reward.hpp"
#include "json.hpp"

namespace evidentia {

inline constexpr std::string_view kEngineVersion = "0.1.0";

struct BackendConfig {
  std::string kind = "stub";  // stub | http | policy
  std::string url;
  std::string stub_text = "The claim is not supported by the evidence.";
  std::chrono::milliseconds timeout{10000};
  std::size_t max_tokens = 256;
  double temperature = 0.0;
  RetryPolicy retry{};
};

struct ServerConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::size_t threads = 8;
};

/// Everything the CLI and the service read from the TOML file.
struct EngineConfig {
  std::filesystem::path artifact_dir = "artifacts";
  std::uint64_t seed = 0;
  unsigned threads = 0;  // 0 = hardware concurrency
  PipelineConfig pipeline{};
  EmbeddingConfig embedding{};
  RetrieverTrainConfig retriever{};
  RewardConfig reward{};
  ClassifierTrainConfig classifier{};
  PolicyConfig policy{};
  SftConfig sft{};
  PpoConfig ppo{};
  BackendConfig backend{};
  ServerConfig server{};
};

/// Reads a TOML file over the defaults, then applies `overrides` of the
/// form "section.key=value" (value in TOML syntax; bare words are taken as
/// strings). Unknown sections or keys are a DataError so typos do not pass
/// silently. The top-level seed is copied into every training config.
EngineConfig load_config(const std::filesystem::path& path,
                         std::span<const std::string> overrides = {});
EngineConfig parse_config(std::string_view toml_text,
                          std::span<const std::string> overrides = {});

/// File names inside the artifact directory.
struct ArtifactPaths {
  std::filesystem::path dir;

  std::filesystem::path corpus_base() const { return dir / "corpus"; }
  std::filesystem::path index() const { return dir / "index.bin"; }
  std::filesystem::path scorer() const { return dir / "scorer.bin"; }
  std::filesystem::path classifier(Aspect aspect) const;
  std::filesystem::path reference_policy() const { return dir / "policy_ref.bin"; }
  std::filesystem::path actor_policy() const { return dir / "policy_actor.bin"; }
  std::filesystem::path align_curve() const { return dir / "align_curve.csv"; }
  std::filesystem::path templates() const { return dir / "templates.json"; }
  std::filesystem::path lock() const { return dir / ".train.lock"; }
};

/// Exclusive advisory lock on the artifact directory, held for the
/// lifetime of the object. Throws DataError if another process holds it.
class ArtifactLock {
 public:
  explicit ArtifactLock(const std::filesystem::path& dir);
  ~ArtifactLock();
  ArtifactLock(const ArtifactLock&) = delete;
  ArtifactLock& operator=(const ArtifactLock&) = delete;

 private:
  int fd_ = -1;
};

std::string sha256_file(const std::filesystem::path& path);

struct RetrievedEvidence {
  ScoredDocument scored;
  EvidenceDocument document;
};

struct CounterResponse {
  std::string claim;
  std::vector<RetrievedEvidence> evidence;
  std::string prompt;
  std::string response;
  RewardBreakdown reward;
  std::string backend_id;
  std::chrono::milliseconds backend_latency{0};
};

/// Generation failed after retries; the retrieval result is still carried.
class ResponseError : public BackendError {
 public:
  ResponseError(const std::string& what, std::vector<RetrievedEvidence> evidence)
      : BackendError(what), evidence_(std::move(evidence)) {}
  const std::vector<RetrievedEvidence>& evidence() const { return evidence_; }

 private:
  std::vector<RetrievedEvidence> evidence_;
};

struct EngineParts {
  std::shared_ptr<const DocumentLookup> documents;
  std::shared_ptr<const InvertedIndex> index;
  std::shared_ptr<const DenseScorer> scorer;
  // Refutation, factuality, politeness; respond() needs all three.
  std::array<std::shared_ptr<const AspectScorer>, 3> classifiers;
  std::shared_ptr<const GenerationBackend> backend;
  std::map<std::string, std::string> artifact_hashes;
};

/// The single execution path behind the CLI and the service. Immutable
/// after construction; safe for concurrent calls.
class Engine {
 public:
  Engine(EngineConfig config, EngineParts parts);

  /// Loads the corpus store, index and scorer from the artifact directory,
  /// plus whichever classifiers exist. The backend comes from
  /// config.backend unless one is passed in.
  static Engine load(const EngineConfig& config,
                     std::shared_ptr<const GenerationBackend> backend = nullptr);

  const EngineConfig& config() const { return config_; }
  const RetrievalPipeline& pipeline() const { return *pipeline_; }

  std::vector<RetrievedEvidence> retrieve(std::string_view claim, std::size_t k) const;
  std::vector<RetrievedEvidence> retrieve(std::string_view claim) const;

  CounterResponse respond(std::string_view claim) const;

  nlohmann::ordered_json health() const;

 private:
  EngineConfig config_;
  EngineParts parts_;
  std::unique_ptr<RetrievalPipeline> pipeline_;
};

/// Backend from config; "policy" loads the aligned policy (or the
/// reference when no aligned one exists) from the artifact directory.
std::shared_ptr<const GenerationBackend> make_backend(const EngineConfig& config);

nlohmann::ordered_json to_json(const ScoredDocument& doc);
nlohmann::ordered_json to_json(const RetrievedEvidence& evidence);
nlohmann::ordered_json to_json(const std::vector<RetrievedEvidence>& evidence);
nlohmann::ordered_json to_json(const RewardBreakdown& reward);
nlohmann::ordered_json to_json(const CounterResponse& response);

}  // namespace evidentia
