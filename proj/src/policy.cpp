#include "evidentia/policy.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <thread>

#include "evidentia/binary_io.hpp"
#include "evidentia/error.hpp"
#include "evidentia/hash.hpp"
#include "evidentia/optim.hpp"
#include "evidentia/prompt.hpp"
#include "evidentia/tokenizer.hpp"
#include "json.hpp"

namespace evidentia {

// ---------------------------------------------------------------------------
// Loaders

namespace {

template <typename Fn>
void for_each_json_line(const std::filesystem::path& path, Fn&& fn) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      fn(nlohmann::json::parse(line));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
}

PromptContext prompt_from_json(const nlohmann::json& j) {
  return {j.at("claim").get<std::string>(), j.value("evidence", std::vector<std::string>{})};
}

}  // namespace

std::vector<PromptContext> load_prompts(const std::filesystem::path& path) {
  std::vector<PromptContext> out;
  for_each_json_line(path, [&](const nlohmann::json& j) { out.push_back(prompt_from_json(j)); });
  return out;
}

std::vector<Demonstration> load_demonstrations(const std::filesystem::path& path) {
  std::vector<Demonstration> out;
  for_each_json_line(path, [&](const nlohmann::json& j) {
    out.push_back({prompt_from_json(j), j.at("response").get<std::string>()});
  });
  return out;
}

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
  if (tokens_.empty()) throw ArgumentError("vocabulary is empty");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    const auto& t = tokens_[i];
    if (t.empty() || t.find_first_of(" \t\r\n") != std::string::npos) {
      throw ArgumentError("vocabulary tokens must be non-empty and free of whitespace");
    }
    if (!ids_.emplace(t, i).second) throw ArgumentError("duplicate vocabulary token: " + t);
  }
}

std::optional<std::size_t> Vocabulary::find(std::string_view token) const {
  auto it = ids_.find(std::string(token));
  if (it == ids_.end()) return std::nullopt;
  return it->second;
}

std::vector<std::size_t> Vocabulary::encode(std::string_view text) const {
  std::vector<std::size_t> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < text.size() && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) {
      auto id = find(text.substr(i, j - i));
      if (!id) throw ArgumentError("token not in vocabulary: " + std::string(text.substr(i, j - i)));
      out.push_back(*id);
    }
    i = j;
  }
  return out;
}

std::string Vocabulary::decode(std::span<const std::size_t> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i > 0) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Policy

void PolicyConfig::validate() const {
  if (max_length < 1) throw ArgumentError("max_length must be >= 1");
  if (context_dim > (std::size_t{1} << 20)) throw ArgumentError("context_dim too large");
}

double uniform01(std::mt19937_64& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

Policy::Policy(Vocabulary vocab, PolicyConfig config)
    : vocab_(std::move(vocab)), config_(std::move(config)) {
  config_.validate();
  if (vocab_.size() == 0) throw ArgumentError("vocabulary is empty");
  if (config_.eos_token) {
    eos_ = vocab_.find(*config_.eos_token);
    if (!eos_) throw ArgumentError("end token is not in the vocabulary");
  }
  const std::size_t v = vocab_.size();
  const std::size_t d = config_.context_dim;
  context_offset_ = (v + 1) * v;
  value_offset_ = context_offset_ + d * v;
  params_.assign(value_offset_ + (v + 1) + d + 1, 0.0);
}

void Policy::reset_value_head() {
  std::fill(params_.begin() + static_cast<std::ptrdiff_t>(value_offset_), params_.end(), 0.0);
}

Eigen::VectorXd Policy::context(std::string_view prompt) const {
  const auto d = static_cast<Eigen::Index>(config_.context_dim);
  Eigen::VectorXd phi = Eigen::VectorXd::Zero(d);
  if (d == 0) return phi;
  const auto toks = tokenize(prompt, {.remove_stopwords = false});
  for (const auto& t : toks) phi[static_cast<Eigen::Index>(fnv1a64(t) % config_.context_dim)] += 1.0;
  if (!toks.empty()) phi /= static_cast<double>(toks.size());
  return phi;
}

Eigen::VectorXd Policy::logits(const Eigen::VectorXd& phi, std::size_t prev) const {
  const std::size_t v = vocab_.size();
  if (prev > v) throw ArgumentError("previous token out of range");
  Eigen::VectorXd z = Eigen::Map<const Eigen::VectorXd>(params_.data() + prev * v,
                                                        static_cast<Eigen::Index>(v));
  for (std::size_t b = 0; b < config_.context_dim; ++b) {
    const double w = phi[static_cast<Eigen::Index>(b)];
    if (w == 0.0) continue;
    z += w * Eigen::Map<const Eigen::VectorXd>(params_.data() + context_offset_ + b * v,
                                               static_cast<Eigen::Index>(v));
  }
  return z;
}

Eigen::VectorXd Policy::log_probs(const Eigen::VectorXd& phi, std::size_t prev) const {
  Eigen::VectorXd z = logits(phi, prev);
  const double mx = z.maxCoeff();
  const double lse = mx + std::log((z.array() - mx).exp().sum());
  return z.array() - lse;
}

double Policy::value(const Eigen::VectorXd& phi, std::size_t prev) const {
  const std::size_t v = vocab_.size();
  const double* c = params_.data() + value_offset_;
  const double* d = c + v + 1;
  double out = c[prev] + d[config_.context_dim];
  for (std::size_t b = 0; b < config_.context_dim; ++b) out += phi[static_cast<Eigen::Index>(b)] * d[b];
  return out;
}

double Policy::sequence_log_prob(const Eigen::VectorXd& phi,
                                 std::span<const std::size_t> tokens) const {
  double total = 0.0;
  std::size_t prev = bos();
  for (auto t : tokens) {
    total += log_probs(phi, prev)[static_cast<Eigen::Index>(t)];
    prev = t;
  }
  return total;
}

void Policy::add_log_prob_gradient(const Eigen::VectorXd& phi, std::size_t prev,
                                   std::size_t token, double weight,
                                   std::span<double> grad) const {
  const std::size_t v = vocab_.size();
  // d log softmax(z)_token / dz = onehot(token) - p
  Eigen::VectorXd g = -log_probs(phi, prev).array().exp();
  g[static_cast<Eigen::Index>(token)] += 1.0;
  g *= weight;
  Eigen::Map<Eigen::VectorXd>(grad.data() + prev * v, static_cast<Eigen::Index>(v)) += g;
  for (std::size_t b = 0; b < config_.context_dim; ++b) {
    const double w = phi[static_cast<Eigen::Index>(b)];
    if (w == 0.0) continue;
    Eigen::Map<Eigen::VectorXd>(grad.data() + context_offset_ + b * v,
                                static_cast<Eigen::Index>(v)) += w * g;
  }
}

void Policy::add_value_gradient(const Eigen::VectorXd& phi, std::size_t prev, double weight,
                                std::span<double> grad) const {
  const std::size_t v = vocab_.size();
  double* c = grad.data() + value_offset_;
  double* d = c + v + 1;
  c[prev] += weight;
  d[config_.context_dim] += weight;
  for (std::size_t b = 0; b < config_.context_dim; ++b) d[b] += weight * phi[static_cast<Eigen::Index>(b)];
}

bool Policy::finished(std::span<const std::size_t> tokens) const {
  if (tokens.size() >= config_.max_length) return true;
  return eos_ && !tokens.empty() && tokens.back() == *eos_;
}

std::vector<std::size_t> Policy::greedy(const Eigen::VectorXd& phi) const {
  std::vector<std::size_t> out;
  std::size_t prev = bos();
  while (!finished(out)) {
    const Eigen::VectorXd z = logits(phi, prev);
    Eigen::Index best = 0;
    for (Eigen::Index i = 1; i < z.size(); ++i) {
      if (z[i] > z[best]) best = i;
    }
    out.push_back(static_cast<std::size_t>(best));
    prev = out.back();
  }
  return out;
}

std::vector<std::size_t> Policy::sample(const Eigen::VectorXd& phi, std::mt19937_64& rng) const {
  std::vector<std::size_t> out;
  std::size_t prev = bos();
  while (!finished(out)) {
    const Eigen::VectorXd p = log_probs(phi, prev).array().exp();
    const double u = uniform01(rng) * p.sum();
    double acc = 0.0;
    std::size_t pick = static_cast<std::size_t>(p.size()) - 1;
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      acc += p[i];
      if (u < acc) {
        pick = static_cast<std::size_t>(i);
        break;
      }
    }
    out.push_back(pick);
    prev = pick;
  }
  return out;
}

std::string Policy::decode_response(std::span<const std::size_t> tokens) const {
  if (eos_ && !tokens.empty() && tokens.back() == *eos_) tokens = tokens.first(tokens.size() - 1);
  return vocab_.decode(tokens);
}

void Policy::save(std::ostream& out) const {
  io::write_header(out, kMagic, kVersion);
  io::write_pod<std::uint64_t>(out, vocab_.size());
  for (const auto& t : vocab_.tokens()) io::write_string(out, t);
  io::write_pod<std::uint64_t>(out, config_.context_dim);
  io::write_pod<std::uint64_t>(out, config_.max_length);
  io::write_pod<std::uint8_t>(out, config_.eos_token ? 1 : 0);
  if (config_.eos_token) io::write_string(out, *config_.eos_token);
  io::write_vector(out, params_);
  if (!out) throw DataError("policy checkpoint write failed");
}

void Policy::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  save(out);
}

Policy Policy::load(std::istream& in) {
  io::read_header(in, kMagic, kVersion);
  const auto n = io::read_pod<std::uint64_t>(in);
  if (n == 0 || n > (1u << 20)) throw DataError("policy vocabulary size out of range");
  std::vector<std::string> tokens;
  tokens.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) tokens.push_back(io::read_string(in));
  PolicyConfig cfg;
  cfg.context_dim = io::read_pod<std::uint64_t>(in);
  cfg.max_length = io::read_pod<std::uint64_t>(in);
  if (io::read_pod<std::uint8_t>(in) != 0) cfg.eos_token = io::read_string(in);
  try {
    Policy p(Vocabulary(std::move(tokens)), cfg);
    auto params = io::read_vector<double>(in);
    if (params.size() != p.params_.size()) throw DataError("policy parameter count mismatch");
    if (!std::all_of(params.begin(), params.end(), [](double x) { return std::isfinite(x); })) {
      throw DataError("policy checkpoint has non-finite weights");
    }
    p.params_ = std::move(params);
    return p;
  } catch (const ArgumentError& e) {
    throw DataError(std::string("bad policy checkpoint: ") + e.what());
  }
}

Policy Policy::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return load(in);
}

// ---------------------------------------------------------------------------
// Supervised fine-tuning

std::string PromptContext::text() const {
  if (evidence.empty()) return claim;
  return render_prompt(claim, evidence);
}

void SftConfig::validate() const {
  if (epochs < 1) throw ArgumentError("epochs must be >= 1");
  if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ArgumentError("learning_rate must be > 0");
}

namespace {

struct EncodedDemo {
  Eigen::VectorXd phi;
  std::vector<std::size_t> tokens;
};

std::vector<EncodedDemo> encode_demos(const Policy& policy, std::span<const Demonstration> demos) {
  std::vector<EncodedDemo> out;
  out.reserve(demos.size());
  for (std::size_t i = 0; i < demos.size(); ++i) {
    EncodedDemo e;
    e.phi = policy.context(demos[i].prompt.text());
    try {
      e.tokens = policy.vocabulary().encode(demos[i].response);
    } catch (const ArgumentError& err) {
      throw TrainingError("demonstration " + std::to_string(i) + ": " + err.what());
    }
    if (policy.eos()) e.tokens.push_back(*policy.eos());
    if (e.tokens.empty() || e.tokens.size() > policy.config().max_length) {
      throw TrainingError("demonstration " + std::to_string(i) +
                          " does not fit in max_length tokens");
    }
    out.push_back(std::move(e));
  }
  return out;
}

double mean_loss(const Policy& policy, const std::vector<EncodedDemo>& demos) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& d : demos) {
    total -= policy.sequence_log_prob(d.phi, d.tokens);
    count += d.tokens.size();
  }
  return total / static_cast<double>(count);
}

}  // namespace

double demonstration_loss(const Policy& policy, std::span<const Demonstration> demos) {
  if (demos.empty()) throw TrainingError("no demonstrations");
  return mean_loss(policy, encode_demos(policy, demos));
}

SftTrace supervised_finetune(Policy& policy, std::span<const Demonstration> demos,
                             const SftConfig& config) {
  config.validate();
  if (demos.empty()) throw TrainingError("no demonstrations");
  const auto encoded = encode_demos(policy, demos);

  Adam optimizer(policy.parameter_count());
  std::vector<double> grad(policy.parameter_count());
  std::vector<std::size_t> order(encoded.size());
  SftTrace trace;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(config.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::fill(grad.begin(), grad.end(), 0.0);
      std::size_t tokens = 0;
      for (std::size_t i = start; i < end; ++i) tokens += encoded[order[i]].tokens.size();
      for (std::size_t i = start; i < end; ++i) {
        const auto& d = encoded[order[i]];
        std::size_t prev = policy.bos();
        for (auto t : d.tokens) {
          // Minimizing cross entropy: descend along -d log p.
          policy.add_log_prob_gradient(d.phi, prev, t, -1.0 / static_cast<double>(tokens), grad);
          prev = t;
        }
      }
      optimizer.step(policy.parameters(), grad, config.learning_rate);
      ++trace.steps;
    }
    const double loss = mean_loss(policy, encoded);
    if (!std::isfinite(loss)) throw TrainingError("non-finite cross entropy");
    trace.epoch_loss.push_back(loss);
  }
  return trace;
}

// ---------------------------------------------------------------------------
// Rollout

double Trajectory::kl() const { return std::accumulate(per_token_kl.begin(), per_token_kl.end(), 0.0); }

RolloutResult rollout(const Policy& actor, const Policy& reference,
                      std::span<const PromptContext> prompts, const RewardFn& reward,
                      std::uint64_t seed, unsigned threads) {
  if (!(actor.vocabulary() == reference.vocabulary()) ||
      actor.config().max_length != reference.config().max_length ||
      actor.config().context_dim != reference.config().context_dim ||
      actor.eos() != reference.eos()) {
    throw ArgumentError("actor and reference policies are not compatible");
  }
  const std::size_t n = prompts.size();
  std::vector<std::optional<Trajectory>> slots(n);
  std::vector<std::exception_ptr> errors(n);

  auto generate = [&](std::size_t i) {
    Trajectory t;
    t.prompt = prompts[i];
    const auto phi = actor.context(t.prompt.text());
    std::mt19937_64 rng(mix_seed(seed, i));
    t.tokens = actor.sample(phi, rng);
    std::size_t prev = actor.bos();
    for (auto tok : t.tokens) {
      const auto k = static_cast<Eigen::Index>(tok);
      t.actor_logprobs.push_back(actor.log_probs(phi, prev)[k]);
      t.ref_logprobs.push_back(reference.log_probs(phi, prev)[k]);
      t.per_token_kl.push_back(t.actor_logprobs.back() - t.ref_logprobs.back());
      t.values.push_back(actor.value(phi, prev));
      prev = tok;
    }
    t.response = actor.decode_response(t.tokens);
    try {
      t.terminal_reward = reward(t.prompt, t.response);
    } catch (const std::exception&) {
      return;
    }
    if (!std::isfinite(t.terminal_reward)) return;
    slots[i] = std::move(t);
  };
  auto work = [&](std::size_t i) {
    try {
      generate(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(n, 1)));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (unsigned w = 0; w < threads; ++w) {
      pool.emplace_back([&, w] {
        for (std::size_t i = w; i < n; i += threads) work(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  RolloutResult out;
  for (auto& s : slots) {
    if (s) {
      out.trajectories.push_back(std::move(*s));
    } else {
      ++out.invalid;
    }
  }
  return out;
}

}  // namespace evidentia
