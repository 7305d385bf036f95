#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iosfwd>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace evidentia {

/// Token set of a policy. Text is encoded by splitting on whitespace; every
/// piece must be a vocabulary token.
class Vocabulary {
 public:
  Vocabulary() = default;
  explicit Vocabulary(std::vector<std::string> tokens);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t id) const { return tokens_.at(id); }
  const std::vector<std::string>& tokens() const { return tokens_; }
  std::optional<std::size_t> find(std::string_view token) const;

  std::vector<std::size_t> encode(std::string_view text) const;
  std::string decode(std::span<const std::size_t> ids) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, std::size_t> ids_;
};

struct PolicyConfig {
  std::size_t context_dim = 64;  // hashed prompt features; 0 disables conditioning
  std::size_t max_length = 16;
  // Token that ends a response. Without one every response has max_length tokens.
  std::optional<std::string> eos_token;

  void validate() const;
};

/// Uniform double in [0, 1) from the top 53 bits.
double uniform01(std::mt19937_64& rng);

/// Autoregressive token-bigram softmax conditioned on the prompt:
///   logit(next | prev, phi) = B[prev, next] + sum_b phi_b U[b, next]
/// where prev is the previous token (a BOS row for the first step) and phi
/// is the prompt's hashed bag of words, normalized to sum to one. A scalar
/// value head v = c[prev] + phi . d + bias shares the same state.
///
/// All parameters live in one flat vector: B, then U, then (c, d, bias).
class Policy {
 public:
  static constexpr std::string_view kMagic = "EVPOL001";
  static constexpr std::uint32_t kVersion = 1;

  Policy(Vocabulary vocab, PolicyConfig config);

  const Vocabulary& vocabulary() const { return vocab_; }
  const PolicyConfig& config() const { return config_; }
  std::size_t vocab_size() const { return vocab_.size(); }
  std::size_t bos() const { return vocab_.size(); }
  std::optional<std::size_t> eos() const { return eos_; }

  std::span<double> parameters() { return params_; }
  std::span<const double> parameters() const { return params_; }
  std::size_t parameter_count() const { return params_.size(); }
  /// Offset of the value-head block; entries before it are policy weights.
  std::size_t value_offset() const { return value_offset_; }
  void reset_value_head();

  Eigen::VectorXd context(std::string_view prompt) const;

  Eigen::VectorXd logits(const Eigen::VectorXd& phi, std::size_t prev) const;
  Eigen::VectorXd log_probs(const Eigen::VectorXd& phi, std::size_t prev) const;
  double value(const Eigen::VectorXd& phi, std::size_t prev) const;

  /// log pi(tokens | prompt), summed over positions.
  double sequence_log_prob(const Eigen::VectorXd& phi, std::span<const std::size_t> tokens) const;

  /// grad += weight * d log pi(token | prev, phi) / d params.
  void add_log_prob_gradient(const Eigen::VectorXd& phi, std::size_t prev, std::size_t token,
                             double weight, std::span<double> grad) const;
  /// grad += weight * d value(phi, prev) / d params.
  void add_value_gradient(const Eigen::VectorXd& phi, std::size_t prev, double weight,
                          std::span<double> grad) const;

  /// Argmax decoding; ties go to the lowest token id.
  std::vector<std::size_t> greedy(const Eigen::VectorXd& phi) const;
  std::vector<std::size_t> sample(const Eigen::VectorXd& phi, std::mt19937_64& rng) const;

  /// Response text for a token sequence, without the end token.
  std::string decode_response(std::span<const std::size_t> tokens) const;

  void save(std::ostream& out) const;
  void save(const std::filesystem::path& path) const;
  static Policy load(std::istream& in);
  static Policy load(const std::filesystem::path& path);

 private:
  bool finished(std::span<const std::size_t> tokens) const;

  Vocabulary vocab_;
  PolicyConfig config_;
  std::optional<std::size_t> eos_;
  std::vector<double> params_;
  std::size_t context_offset_ = 0;
  std::size_t value_offset_ = 0;
};

/// A prompt for generation: claim plus evidence. The conditioning text is
/// the rendered instruction prompt, or the bare claim without evidence.
struct PromptContext {
  std::string claim;
  std::vector<std::string> evidence;

  std::string text() const;
};

struct Demonstration {
  PromptContext prompt;
  std::string response;
};

/// JSON lines {claim, evidence?: [...]}.
std::vector<PromptContext> load_prompts(const std::filesystem::path& path);
/// JSON lines {claim, evidence?: [...], response}.
std::vector<Demonstration> load_demonstrations(const std::filesystem::path& path);

struct SftConfig {
  std::size_t epochs = 3;
  std::size_t batch_size = 8;
  double learning_rate = 0.05;
  std::uint64_t seed = 0;

  void validate() const;
};

struct SftTrace {
  std::vector<double> epoch_loss;  // mean per-token cross entropy after each epoch
  std::size_t steps = 0;
};

/// Mean per-token cross entropy of the demonstrations under `policy`.
double demonstration_loss(const Policy& policy, std::span<const Demonstration> demos);

/// Cross-entropy training on the demonstrations (end token appended when
/// the policy has one), Adam over shuffled minibatches. Throws
/// TrainingError on an empty set or a response longer than max_length.
SftTrace supervised_finetune(Policy& policy, std::span<const Demonstration> demos,
                             const SftConfig& config);

struct Trajectory {
  PromptContext prompt;
  std::vector<std::size_t> tokens;
  std::vector<double> actor_logprobs;
  std::vector<double> ref_logprobs;
  std::vector<double> per_token_kl;  // actor_logprobs - ref_logprobs
  std::vector<double> values;
  std::string response;
  double terminal_reward = 0.0;

  double kl() const;  // sum over tokens
};

/// Reward of a decoded response. May throw; the trajectory is then dropped.
using RewardFn = std::function<double(const PromptContext& prompt, std::string_view response)>;

struct RolloutResult {
  std::vector<Trajectory> trajectories;
  std::size_t invalid = 0;
};

/// One sampled response per prompt, trajectory i seeded from (seed, i).
/// Prompts run on `threads` threads (0 = hardware concurrency); results
/// do not depend on the thread count.
RolloutResult rollout(const Policy& actor, const Policy& reference,
                      std::span<const PromptContext> prompts, const RewardFn& reward,
                      std::uint64_t seed, unsigned threads = 1);

}  // namespace evidentia
