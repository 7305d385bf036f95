#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "evidentia/optim.hpp"
#include "evidentia/policy.hpp"

namespace evidentia {

struct PpoConfig {
  double beta = 0.2;           // KL coefficient
  double clip_ratio = 0.2;
  double learning_rate = 1e-5;
  std::size_t ppo_epochs = 1;  // optimization passes over each rollout batch
  std::size_t batch_size = 16; // prompts per rollout
  std::size_t iterations = 100;
  std::size_t grad_accumulation = 4;
  double gamma = 1.0;
  double gae_lambda = 0.95;
  double value_coef = 1.0;
  // Proportional controller on beta; disabled when unset.
  std::optional<double> kl_target;
  double kl_horizon = 10000.0;
  std::uint64_t seed = 0;
  unsigned threads = 1;

  void validate() const;
};

/// Per-token training targets for one batch.
struct PreparedBatch {
  struct Step {
    std::size_t trajectory;
    std::size_t prev;
    std::size_t token;
    double old_logprob;
    double advantage;  // whitened
    double ret;        // GAE return
  };
  std::vector<Eigen::VectorXd> contexts;  // per trajectory
  std::vector<Step> steps;
};

/// Shaped rewards (-beta * kl per token, terminal reward on the last one),
/// GAE against the recorded values, then advantages whitened over the
/// batch. A batch with zero advantage spread keeps all advantages at zero.
PreparedBatch prepare_batch(const Policy& actor, std::span<const Trajectory> trajectories,
                            const PpoConfig& config, double beta);

/// Raw (unwhitened) GAE advantages and returns of one trajectory.
void gae(std::span<const double> rewards, std::span<const double> values, double gamma,
         double lambda, std::vector<double>& advantages, std::vector<double>& returns);

struct PpoLoss {
  double policy_loss = 0.0;  // mean clipped surrogate, negated
  double value_loss = 0.0;   // mean 0.5 (v - R)^2
  double total = 0.0;
  std::size_t clipped = 0;   // tokens with |ratio - 1| > clip_ratio
  std::size_t tokens = 0;
};

/// Loss over `steps` (indices into batch.steps); when `grad` is given it
/// receives d total / d params, each term divided by `normalizer`.
PpoLoss ppo_loss(const Policy& actor, const PreparedBatch& batch,
                 std::span<const std::size_t> steps, const PpoConfig& config, double normalizer,
                 std::span<double> grad = {});

struct PpoStats {
  double mean_reward = 0.0;  // mean terminal reward
  double mean_kl = 0.0;      // mean per-trajectory KL sum
  double clip_fraction = 0.0;
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double beta = 0.0;
  bool aborted = false;      // a non-finite loss or gradient skipped the update
};

/// Owns the optimizer state across updates of one actor.
class PpoTrainer {
 public:
  PpoTrainer(Policy& actor, PpoConfig config);

  const PpoConfig& config() const { return config_; }
  double beta() const { return beta_; }

  /// ppo_epochs passes; each pass splits the batch into grad_accumulation
  /// micro-batches and applies one optimizer step on their summed gradient.
  PpoStats update(std::span<const Trajectory> trajectories);

 private:
  Policy& actor_;
  PpoConfig config_;
  Adam optimizer_;
  double beta_;
  std::size_t seen_ = 0;
};

/// One-shot update with a fresh optimizer.
PpoStats ppo_update(Policy& actor, std::span<const Trajectory> trajectories,
                    const PpoConfig& config);

struct CurvePoint {
  std::size_t iteration = 0;
  double mean_reward = 0.0;
  double mean_kl = 0.0;
  double clip_fraction = 0.0;
  double beta = 0.0;
  std::size_t invalid = 0;
  bool aborted = false;
};

struct AlignResult {
  Policy actor;
  std::vector<CurvePoint> curve;
};

/// Copies the reference, resets the value head, then alternates rollout
/// and update for config.iterations rounds. Each round draws batch_size
/// prompts (cycling through a seeded shuffle).
AlignResult align(const Policy& reference, std::span<const PromptContext> prompts,
                  const RewardFn& reward, const PpoConfig& config);

/// Columns: iteration, mean_reward, mean_kl, clip_fraction.
std::string curve_csv(std::span<const CurvePoint> curve);

/// Fixed candidate responses for a set of prompts. Each candidate is one
/// vocabulary token ("T00", "T01", ...) standing for its template text.
/// Rewards come from the table when present, otherwise from a RewardFn
/// applied to the template text.
class TemplateEnvironment {
 public:
  struct Candidate {
    std::string text;
    std::optional<double> reward;
  };

  TemplateEnvironment(std::vector<PromptContext> prompts, std::vector<Candidate> candidates);

  /// JSON {"prompts": [{"claim", "evidence": [...]}, ...] or [string, ...],
  ///       "templates": [{"text", "reward"?}, ...]}
  static TemplateEnvironment load_json(const std::filesystem::path& path);

  /// `n` candidates with rewards spread evenly over [0, max_reward] in a
  /// seeded order, and `prompts` synthetic prompts.
  static TemplateEnvironment synthetic(std::size_t n, std::size_t prompts, double max_reward,
                                       std::uint64_t seed);

  const std::vector<PromptContext>& prompts() const { return prompts_; }
  const std::vector<Candidate>& candidates() const { return candidates_; }
  Vocabulary vocabulary() const;
  static std::string token_name(std::size_t i);

  /// Policy over the candidate tokens with max_length 1.
  Policy make_policy(std::size_t context_dim = 16) const;

  /// Reward from the table; `fallback` scores candidates without one. The
  /// environment must outlive the returned function.
  RewardFn reward_fn(RewardFn fallback = {}) const;

  const Candidate& candidate(std::string_view token) const;
  /// Highest tabled reward.
  double optimum() const;

  // Exact expectations over the prompts, enumerating the candidates.
  // Candidates must all carry tabled rewards.
  double expected_reward(const Policy& policy) const;
  double expected_kl(const Policy& actor, const Policy& reference) const;
  /// Greedy candidate token per prompt.
  std::vector<std::size_t> greedy_choices(const Policy& policy) const;

 private:
  std::vector<PromptContext> prompts_;
  std::vector<Candidate> candidates_;
};

}  // namespace evidentia
