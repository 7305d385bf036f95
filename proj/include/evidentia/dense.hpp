#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <string>
#include <string_view>
#include <unordered_map>

#include "evidentia/tokenizer.hpp"

namespace evidentia {

enum class Featurizer : std::uint8_t { HashedBagOfWords = 0, ExternalVectors = 1 };

struct EmbeddingConfig {
  std::size_t dim = 256;
  Featurizer featurizer = Featurizer::HashedBagOfWords;
  double temperature = 0.05;
  TokenizerOptions tokenizer{};

  void validate() const;
};

/// Precomputed per-text vectors, keyed either by the literal text or by
/// text_id(text). Loaded from JSON lines {"text_id": ..., "vector": [...]}.
class ExternalVectors {
 public:
  explicit ExternalVectors(std::size_t dim) : dim_(dim) {}

  static ExternalVectors load_jsonl(std::istream& in, std::size_t dim);
  static ExternalVectors load_jsonl(const std::filesystem::path& path, std::size_t dim);

  /// Hex FNV-1a of the text; the id callers use when the text is long.
  static std::string text_id(std::string_view text);

  void add(std::string text_id, Eigen::VectorXd vector);
  const Eigen::VectorXd* find(std::string_view text) const;
  std::size_t dim() const { return dim_; }
  std::size_t size() const { return vectors_.size(); }

 private:
  std::size_t dim_;
  std::unordered_map<std::string, Eigen::VectorXd> vectors_;
};

/// f_den: featurize -> project -> L2-normalize, relevance = cosine / t.
///
/// The projection is a trainable dim x dim matrix, initialized to identity.
/// A text whose projected features vanish (no tokens, or a null projection)
/// embeds to the fallback vector: every coordinate 1/sqrt(dim).
class DenseScorer {
 public:
  static constexpr std::string_view kMagic = "EVDNS001";
  static constexpr std::uint32_t kVersion = 1;

  explicit DenseScorer(EmbeddingConfig config = {});

  const EmbeddingConfig& config() const { return config_; }
  const Eigen::MatrixXd& projection() const { return projection_; }
  Eigen::MatrixXd& projection() { return projection_; }

  void set_external_vectors(std::shared_ptr<const ExternalVectors> vectors);

  /// Raw features before projection (bucket counts or the external vector).
  Eigen::VectorXd features(std::string_view text) const;
  Eigen::VectorXd embed(std::string_view text) const;
  Eigen::VectorXd fallback() const;

  double cosine(std::string_view a, std::string_view b) const;
  double relevance(std::string_view a, std::string_view b) const;

  /// Bucket a token hashes to under HashedBagOfWords.
  std::size_t bucket(std::string_view token) const;

  void save(std::ostream& out) const;
  void save(const std::filesystem::path& path) const;
  static DenseScorer load(std::istream& in);
  static DenseScorer load(const std::filesystem::path& path);

 private:
  EmbeddingConfig config_;
  Eigen::MatrixXd projection_;
  std::shared_ptr<const ExternalVectors> external_;
};

}  // namespace evidentia
