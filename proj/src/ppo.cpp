#include "evidentia/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>

#include "evidentia/error.hpp"
#include "evidentia/hash.hpp"
#include "json.hpp"

namespace evidentia {

void PpoConfig::validate() const {
  if (!(beta >= 0.0) || !std::isfinite(beta)) throw ArgumentError("beta must be >= 0");
  if (!(clip_ratio > 0.0 && clip_ratio < 1.0)) throw ArgumentError("clip_ratio must lie in (0, 1)");
  if (!(learning_rate > 0.0)) throw ArgumentError("learning_rate must be > 0");
  if (ppo_epochs < 1) throw ArgumentError("ppo_epochs must be >= 1");
  if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  if (grad_accumulation < 1) throw ArgumentError("grad_accumulation must be >= 1");
  if (!(gamma >= 0.0 && gamma <= 1.0)) throw ArgumentError("gamma must lie in [0, 1]");
  if (!(gae_lambda >= 0.0 && gae_lambda <= 1.0)) throw ArgumentError("gae_lambda must lie in [0, 1]");
  if (!(value_coef >= 0.0)) throw ArgumentError("value_coef must be >= 0");
  if (kl_target && !(*kl_target > 0.0)) throw ArgumentError("kl_target must be > 0");
  if (!(kl_horizon > 0.0)) throw ArgumentError("kl_horizon must be > 0");
}

void gae(std::span<const double> rewards, std::span<const double> values, double gamma,
         double lambda, std::vector<double>& advantages, std::vector<double>& returns) {
  const std::size_t n = rewards.size();
  if (values.size() != n) throw ArgumentError("reward/value length mismatch");
  advantages.assign(n, 0.0);
  returns.assign(n, 0.0);
  double next_value = 0.0;
  double running = 0.0;
  for (std::size_t i = n; i-- > 0;) {
    const double delta = rewards[i] + gamma * next_value - values[i];
    running = delta + gamma * lambda * running;
    advantages[i] = running;
    returns[i] = running + values[i];
    next_value = values[i];
  }
}

PreparedBatch prepare_batch(const Policy& actor, std::span<const Trajectory> trajectories,
                            const PpoConfig& config, double beta) {
  PreparedBatch batch;
  std::vector<double> rewards, adv, ret;
  for (std::size_t t = 0; t < trajectories.size(); ++t) {
    const auto& tr = trajectories[t];
    const std::size_t n = tr.tokens.size();
    if (n == 0 || tr.actor_logprobs.size() != n || tr.per_token_kl.size() != n ||
        tr.values.size() != n) {
      throw ArgumentError("malformed trajectory " + std::to_string(t));
    }
    batch.contexts.push_back(actor.context(tr.prompt.text()));
    rewards.assign(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) rewards[i] = -beta * tr.per_token_kl[i];
    rewards[n - 1] += tr.terminal_reward;
    gae(rewards, tr.values, config.gamma, config.gae_lambda, adv, ret);
    std::size_t prev = actor.bos();
    for (std::size_t i = 0; i < n; ++i) {
      batch.steps.push_back({t, prev, tr.tokens[i], tr.actor_logprobs[i], adv[i], ret[i]});
      prev = tr.tokens[i];
    }
  }
  if (batch.steps.empty()) return batch;

  double mean = 0.0;
  for (const auto& s : batch.steps) mean += s.advantage;
  mean /= static_cast<double>(batch.steps.size());
  double var = 0.0;
  for (const auto& s : batch.steps) var += (s.advantage - mean) * (s.advantage - mean);
  const double sd = std::sqrt(var / static_cast<double>(batch.steps.size()));
  for (auto& s : batch.steps) s.advantage = sd > 1e-12 ? (s.advantage - mean) / (sd + 1e-8) : 0.0;
  return batch;
}

PpoLoss ppo_loss(const Policy& actor, const PreparedBatch& batch,
                 std::span<const std::size_t> steps, const PpoConfig& config, double normalizer,
                 std::span<double> grad) {
  PpoLoss out;
  const double eps = config.clip_ratio;
  for (auto idx : steps) {
    const auto& s = batch.steps[idx];
    const auto& phi = batch.contexts[s.trajectory];
    const double logp = actor.log_probs(phi, s.prev)[static_cast<Eigen::Index>(s.token)];
    const double ratio = std::exp(logp - s.old_logprob);
    const double clipped = std::clamp(ratio, 1.0 - eps, 1.0 + eps);
    const double a = s.advantage;
    const bool unclipped_branch = ratio * a <= clipped * a;
    out.policy_loss -= std::min(ratio * a, clipped * a);
    if (std::abs(ratio - 1.0) > eps) ++out.clipped;

    const double v = actor.value(phi, s.prev);
    out.value_loss += 0.5 * (v - s.ret) * (v - s.ret);
    ++out.tokens;

    if (!grad.empty()) {
      // d(-ratio * A)/d params = -A * ratio * d log pi.
      if (unclipped_branch && a != 0.0) {
        actor.add_log_prob_gradient(phi, s.prev, s.token, -a * ratio / normalizer, grad);
      }
      actor.add_value_gradient(phi, s.prev, config.value_coef * (v - s.ret) / normalizer, grad);
    }
  }
  out.policy_loss /= normalizer;
  out.value_loss /= normalizer;
  out.total = out.policy_loss + config.value_coef * out.value_loss;
  return out;
}

PpoTrainer::PpoTrainer(Policy& actor, PpoConfig config)
    : actor_(actor), config_(config), optimizer_(actor.parameter_count()), beta_(config.beta) {
  config_.validate();
}

PpoStats PpoTrainer::update(std::span<const Trajectory> trajectories) {
  if (trajectories.empty()) throw TrainingError("ppo update needs trajectories");
  PpoStats stats;
  stats.beta = beta_;
  for (const auto& t : trajectories) {
    stats.mean_reward += t.terminal_reward;
    stats.mean_kl += t.kl();
  }
  stats.mean_reward /= static_cast<double>(trajectories.size());
  stats.mean_kl /= static_cast<double>(trajectories.size());

  const PreparedBatch batch = prepare_batch(actor_, trajectories, config_, beta_);
  const double normalizer = static_cast<double>(batch.steps.size());

  // Steps grouped by trajectory so micro-batches hold whole trajectories.
  std::vector<std::vector<std::size_t>> by_traj(trajectories.size());
  for (std::size_t i = 0; i < batch.steps.size(); ++i) by_traj[batch.steps[i].trajectory].push_back(i);

  const std::vector<double> snapshot(actor_.parameters().begin(), actor_.parameters().end());
  std::vector<double> grad(actor_.parameter_count());
  std::vector<std::size_t> order(trajectories.size());
  std::size_t clipped = 0, counted = 0;

  for (std::size_t epoch = 0; epoch < config_.ppo_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(config_.seed, (seen_ << 8) + epoch));
    std::shuffle(order.begin(), order.end(), rng);

    std::fill(grad.begin(), grad.end(), 0.0);
    const std::size_t micro = std::min(config_.grad_accumulation, order.size());
    for (std::size_t m = 0; m < micro; ++m) {
      std::vector<std::size_t> steps;
      for (std::size_t j = m; j < order.size(); j += micro) {
        steps.insert(steps.end(), by_traj[order[j]].begin(), by_traj[order[j]].end());
      }
      const auto loss = ppo_loss(actor_, batch, steps, config_, normalizer, grad);
      stats.policy_loss += loss.policy_loss;
      stats.value_loss += loss.value_loss;
      clipped += loss.clipped;
      counted += loss.tokens;
      if (!std::isfinite(loss.total)) stats.aborted = true;
    }
    if (!std::all_of(grad.begin(), grad.end(), [](double g) { return std::isfinite(g); })) {
      stats.aborted = true;
    }
    if (stats.aborted) break;
    optimizer_.step(actor_.parameters(), grad, config_.learning_rate);
  }
  if (stats.aborted) {
    std::copy(snapshot.begin(), snapshot.end(), actor_.parameters().begin());
  }
  stats.policy_loss /= static_cast<double>(config_.ppo_epochs);
  stats.value_loss /= static_cast<double>(config_.ppo_epochs);
  stats.clip_fraction = counted ? static_cast<double>(clipped) / static_cast<double>(counted) : 0.0;

  if (config_.kl_target && !stats.aborted) {
    const double error = std::clamp(stats.mean_kl / *config_.kl_target - 1.0, -0.2, 0.2);
    beta_ *= 1.0 + error * static_cast<double>(trajectories.size()) / config_.kl_horizon;
  }
  ++seen_;
  return stats;
}

PpoStats ppo_update(Policy& actor, std::span<const Trajectory> trajectories,
                    const PpoConfig& config) {
  PpoTrainer trainer(actor, config);
  return trainer.update(trajectories);
}

AlignResult align(const Policy& reference, std::span<const PromptContext> prompts,
                  const RewardFn& reward, const PpoConfig& config) {
  config.validate();
  if (prompts.empty()) throw TrainingError("alignment needs prompts");
  AlignResult result{reference, {}};
  result.actor.reset_value_head();
  PpoTrainer trainer(result.actor, config);

  std::vector<std::size_t> order(prompts.size());
  std::size_t cursor = order.size();
  std::size_t pass = 0;
  for (std::size_t it = 0; it < config.iterations; ++it) {
    std::vector<PromptContext> batch;
    while (batch.size() < config.batch_size) {
      if (cursor == order.size()) {
        std::iota(order.begin(), order.end(), 0);
        std::mt19937_64 rng(mix_seed(config.seed, 0x70000000ULL + pass++));
        std::shuffle(order.begin(), order.end(), rng);
        cursor = 0;
      }
      batch.push_back(prompts[order[cursor++]]);
    }
    auto rolled = rollout(result.actor, reference, batch, reward, mix_seed(config.seed, it),
                          config.threads);
    CurvePoint point;
    point.iteration = it;
    point.invalid = rolled.invalid;
    point.beta = trainer.beta();
    if (!rolled.trajectories.empty()) {
      const auto stats = trainer.update(rolled.trajectories);
      point.mean_reward = stats.mean_reward;
      point.mean_kl = stats.mean_kl;
      point.clip_fraction = stats.clip_fraction;
      point.aborted = stats.aborted;
    }
    result.curve.push_back(point);
  }
  return result;
}

std::string curve_csv(std::span<const CurvePoint> curve) {
  std::string out = "iteration,mean_reward,mean_kl,clip_fraction\n";
  char buf[128];
  for (const auto& p : curve) {
    std::snprintf(buf, sizeof(buf), "%zu,%.10g,%.10g,%.10g\n", p.iteration, p.mean_reward,
                  p.mean_kl, p.clip_fraction);
    out += buf;
  }
  return out;
}

// ---------------------------------------------------------------------------
// TemplateEnvironment

TemplateEnvironment::TemplateEnvironment(std::vector<PromptContext> prompts,
                                         std::vector<Candidate> candidates)
    : prompts_(std::move(prompts)), candidates_(std::move(candidates)) {
  if (prompts_.empty()) throw ArgumentError("template environment needs prompts");
  if (candidates_.empty()) throw ArgumentError("template environment needs candidates");
}

std::string TemplateEnvironment::token_name(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "T%02zu", i);
  return buf;
}

Vocabulary TemplateEnvironment::vocabulary() const {
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < candidates_.size(); ++i) tokens.push_back(token_name(i));
  return Vocabulary(std::move(tokens));
}

Policy TemplateEnvironment::make_policy(std::size_t context_dim) const {
  return Policy(vocabulary(), {.context_dim = context_dim, .max_length = 1, .eos_token = {}});
}

const TemplateEnvironment::Candidate& TemplateEnvironment::candidate(std::string_view token) const {
  for (std::size_t i = 0; i < candidates_.size(); ++i) {
    if (token_name(i) == token) return candidates_[i];
  }
  throw ArgumentError("unknown template token: " + std::string(token));
}

RewardFn TemplateEnvironment::reward_fn(RewardFn fallback) const {
  return [this, fallback](const PromptContext& prompt, std::string_view response) {
    const auto& c = candidate(response);
    if (c.reward) return *c.reward;
    if (!fallback) throw ArgumentError("template has no reward and no reward model is set");
    return fallback(prompt, c.text);
  };
}

double TemplateEnvironment::optimum() const {
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& c : candidates_) {
    if (c.reward) best = std::max(best, *c.reward);
  }
  return best;
}

double TemplateEnvironment::expected_reward(const Policy& policy) const {
  double total = 0.0;
  for (const auto& p : prompts_) {
    const Eigen::VectorXd lp = policy.log_probs(policy.context(p.text()), policy.bos());
    for (std::size_t i = 0; i < candidates_.size(); ++i) {
      if (!candidates_[i].reward) throw ArgumentError("candidate without a tabled reward");
      total += std::exp(lp[static_cast<Eigen::Index>(i)]) * *candidates_[i].reward;
    }
  }
  return total / static_cast<double>(prompts_.size());
}

double TemplateEnvironment::expected_kl(const Policy& actor, const Policy& reference) const {
  double total = 0.0;
  for (const auto& p : prompts_) {
    const auto phi = actor.context(p.text());
    const Eigen::VectorXd la = actor.log_probs(phi, actor.bos());
    const Eigen::VectorXd lr = reference.log_probs(phi, reference.bos());
    total += (la.array().exp() * (la - lr).array()).sum();
  }
  return total / static_cast<double>(prompts_.size());
}

std::vector<std::size_t> TemplateEnvironment::greedy_choices(const Policy& policy) const {
  std::vector<std::size_t> out;
  for (const auto& p : prompts_) out.push_back(policy.greedy(policy.context(p.text())).front());
  return out;
}

TemplateEnvironment TemplateEnvironment::synthetic(std::size_t n, std::size_t prompts,
                                                   double max_reward, std::uint64_t seed) {
  if (n < 2) throw ArgumentError("need at least two templates");
  std::vector<std::size_t> rank(n);
  std::iota(rank.begin(), rank.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(rank.begin(), rank.end(), rng);
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < n; ++i) {
    cands.push_back({"template response " + std::to_string(i),
                     max_reward * static_cast<double>(rank[i]) / static_cast<double>(n - 1)});
  }
  std::vector<PromptContext> ps;
  for (std::size_t p = 0; p < prompts; ++p) ps.push_back({"toy claim number " + std::to_string(p), {}});
  return TemplateEnvironment(std::move(ps), std::move(cands));
}

TemplateEnvironment TemplateEnvironment::load_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  try {
    const auto j = nlohmann::json::parse(in);
    std::vector<PromptContext> prompts;
    for (const auto& p : j.at("prompts")) {
      if (p.is_string()) {
        prompts.push_back({p.get<std::string>(), {}});
      } else {
        prompts.push_back({p.at("claim").get<std::string>(),
                           p.value("evidence", std::vector<std::string>{})});
      }
    }
    std::vector<Candidate> cands;
    for (const auto& t : j.at("templates")) {
      Candidate c;
      if (t.is_string()) {
        c.text = t.get<std::string>();
      } else {
        c.text = t.at("text").get<std::string>();
        if (t.contains("reward")) c.reward = t.at("reward").get<double>();
      }
      cands.push_back(std::move(c));
    }
    return TemplateEnvironment(std::move(prompts), std::move(cands));
  } catch (const nlohmann::json::exception& e) {
    throw DataError(path.string() + ": " + e.what());
  } catch (const ArgumentError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

}  // namespace evidentia
