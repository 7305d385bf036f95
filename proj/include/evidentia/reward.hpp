#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "evidentia/dense.hpp"
#include "evidentia/tokenizer.hpp"

namespace evidentia {

enum class Aspect : std::uint8_t { Refutation = 0, Factuality = 1, Politeness = 2 };

inline constexpr Aspect kAspects[] = {Aspect::Refutation, Aspect::Factuality, Aspect::Politeness};

std::string_view to_string(Aspect aspect);
/// Accepts "refutation", "factuality", "politeness" (any case).
Aspect parse_aspect(std::string_view name);

/// One binary human-feedback judgement on a response.
struct FeedbackExample {
  std::string claim;
  std::vector<std::string> evidence;
  std::string response;
  int label = 0;  // 0 or 1
  Aspect aspect = Aspect::Refutation;
};

/// JSON lines {claim, evidence: [...], response, label, aspect}.
std::vector<FeedbackExample> load_feedback(const std::filesystem::path& path);

/// Anything that maps (claim, evidence, response) to a score in (0, 1).
class AspectScorer {
 public:
  virtual ~AspectScorer() = default;
  virtual double score(std::string_view claim, std::span<const std::string> evidence,
                       std::string_view response) const = 0;
};

/// Constant scorer; useful as a stand-in for an untrained aspect.
class ConstantScorer : public AspectScorer {
 public:
  explicit ConstantScorer(double value) : value_(value) {}
  double score(std::string_view, std::span<const std::string>, std::string_view) const override {
    return value_;
  }

 private:
  double value_;
};

struct FeatureConfig {
  std::size_t dim = std::size_t{1} << 14;
  bool bigrams = true;
  TokenizerOptions tokenizer{};

  void validate() const;
};

using SparseFeatures = std::vector<std::pair<std::uint32_t, double>>;

/// Hashed unigram (and bigram) counts of the claim, evidence and response,
/// each token prefixed with its segment ("c|", "e|", "r|"). Sorted by
/// index, L2-normalized; empty when no tokens survive.
SparseFeatures featurize(const FeatureConfig& config, std::string_view claim,
                         std::span<const std::string> evidence, std::string_view response);

/// Logistic model over hashed features: sigmoid(w . phi + b).
class FeedbackClassifier : public AspectScorer {
 public:
  static constexpr std::string_view kMagic = "EVRWD001";
  static constexpr std::uint32_t kVersion = 1;
  // Scores are clamped to [kScoreFloor, 1 - kScoreFloor] so they stay inside (0, 1).
  static constexpr double kScoreFloor = 1e-12;

  FeedbackClassifier(Aspect aspect, FeatureConfig features = {});

  Aspect aspect() const { return aspect_; }
  const FeatureConfig& feature_config() const { return features_; }
  std::vector<double>& weights() { return weights_; }
  const std::vector<double>& weights() const { return weights_; }
  double& bias() { return bias_; }
  double bias() const { return bias_; }

  double margin(const SparseFeatures& phi) const;
  double probability(const SparseFeatures& phi) const;
  double score(std::string_view claim, std::span<const std::string> evidence,
               std::string_view response) const override;

  void save(std::ostream& out) const;
  void save(const std::filesystem::path& path) const;
  static FeedbackClassifier load(std::istream& in);
  static FeedbackClassifier load(const std::filesystem::path& path);

 private:
  Aspect aspect_;
  FeatureConfig features_;
  std::vector<double> weights_;
  double bias_ = 0.0;
};

double sigmoid(double z);

struct ClassifierMetrics {
  double balanced_accuracy = 0.0;
  double accuracy = 0.0;
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  std::size_t train_size = 0;
  std::size_t test_size = 0;
};

/// Mean of the per-class recalls. Throws ArgumentError unless `labels`
/// contains both classes.
double balanced_accuracy(std::span<const int> predictions, std::span<const int> labels);

/// Positive class is 1. Precision of a run with no positive predictions is 0.
ClassifierMetrics classification_metrics(std::span<const int> predictions,
                                         std::span<const int> labels);

/// Keys in table order: BA, Acc., F1, Prec., Rec.
std::string metrics_json(const ClassifierMetrics& metrics);

struct ClassifierTrainConfig {
  double test_fraction = 0.2;
  std::size_t max_epochs = 300;
  double learning_rate = 0.05;
  double l2 = 1e-4;
  double tolerance = 1e-9;  // stop once the epoch loss changes by less
  bool class_balanced = true;
  std::uint64_t seed = 0;
  FeatureConfig features{};

  void validate() const;
};

struct TrainedClassifier {
  FeedbackClassifier classifier;
  ClassifierMetrics metrics;  // on the held-out split
  std::vector<double> loss_trace;
  std::vector<std::size_t> train_indices;
  std::vector<std::size_t> test_indices;
};

/// Seeded split that keeps the class ratio in both halves. Each class with
/// at least two examples contributes at least one to each side.
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(
    std::span<const int> labels, double test_fraction, std::uint64_t seed);

/// Full-batch Adam on weighted cross entropy. With class_balanced each class
/// weighs N / (2 N_c) over the training split, otherwise 1. Examples of
/// other aspects are ignored.
TrainedClassifier train_classifier(std::span<const FeedbackExample> examples, Aspect aspect,
                                   const ClassifierTrainConfig& config);

struct RewardConfig {
  double alpha = 0.5;
  // false: relevance enters as (cosine + 1) / 2; true: as cosine / t.
  bool raw_relevance = false;

  void validate() const;
};

struct RewardBreakdown {
  double refutation = 0.0;
  double factuality = 0.0;
  double politeness = 0.0;
  double claim_relevance = 0.0;
  double evidence_relevance = 0.0;
  double total = 0.0;
};

/// The relevance used inside the reward for a (text, response) pair.
double reward_relevance(const DenseScorer& scorer, const RewardConfig& config, std::string_view a,
                        std::string_view b);

/// Three aspect scores plus alpha * (relevance(claim, response) + the best
/// relevance(evidence_i, response)). Throws RewardError on empty evidence.
RewardBreakdown compute_reward(const RewardConfig& config, const AspectScorer& refutation,
                               const AspectScorer& factuality, const AspectScorer& politeness,
                               const DenseScorer& scorer, std::string_view claim,
                               std::span<const std::string> evidence, std::string_view response);

/// Bundles the scorers the reward needs. Holds references.
class RewardModel {
 public:
  RewardModel(const AspectScorer& refutation, const AspectScorer& factuality,
              const AspectScorer& politeness, const DenseScorer& scorer, RewardConfig config);

  const RewardConfig& config() const { return config_; }

  RewardBreakdown operator()(std::string_view claim, std::span<const std::string> evidence,
                             std::string_view response) const;

 private:
  const AspectScorer& refutation_;
  const AspectScorer& factuality_;
  const AspectScorer& politeness_;
  const DenseScorer& scorer_;
  RewardConfig config_;
};

}  // namespace evidentia
