#include <cmath>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "evidentia/error.hpp"
#include "evidentia/policy.hpp"
#include "evidentia/prompt.hpp"
#include "oracles.hpp"
#include "temp_dir.hpp"

using namespace evidentia;
using namespace evidentia::testing;

namespace {

Policy random_policy(std::uint64_t seed, std::size_t vocab = 5, std::size_t max_length = 3,
                     bool eos = true) {
  std::vector<std::string> tokens;
  for (std::size_t i = 0; i < vocab; ++i) tokens.push_back("t" + std::to_string(i));
  PolicyConfig cfg{.context_dim = 8, .max_length = max_length};
  if (eos) cfg.eos_token = "t0";
  Policy p(Vocabulary(tokens), cfg);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, 0.7);
  for (auto& w : p.parameters()) w = n(rng);
  return p;
}

}  // namespace

TEST_CASE("vocabulary encodes and decodes whitespace tokens") {
  Vocabulary v({"a", "b", "c"});
  CHECK(v.encode(" b  a c ") == std::vector<std::size_t>{1, 0, 2});
  const std::vector<std::size_t> ids = {2, 1};
  CHECK(v.decode(ids) == "c b");
  CHECK_FALSE(v.find("d"));
  CHECK_THROWS(v.encode("a d"));
  CHECK_THROWS(Vocabulary({"a", "a"}));
}

TEST_CASE("log-softmax rows are normalized") {
  const auto p = random_policy(1);
  const auto phi = p.context("masks reduce spread");
  CHECK(phi.sum() == doctest::Approx(1.0));
  for (std::size_t prev = 0; prev <= p.vocab_size(); ++prev) {
    CHECK(p.log_probs(phi, prev).array().exp().sum() == doctest::Approx(1.0));
  }
}

TEST_CASE("log-prob gradient matches finite differences") {
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto p = random_policy(seed);
    const auto phi = p.context("claim " + std::to_string(seed));
    const std::size_t prev = seed % (p.vocab_size() + 1), token = seed % p.vocab_size();
    std::vector<double> grad(p.parameter_count(), 0.0);
    p.add_log_prob_gradient(phi, prev, token, 1.0, grad);
    std::vector<double> x(p.parameters().begin(), p.parameters().end());
    const auto f = [&](std::span<const double> y) {
      std::copy(y.begin(), y.end(), p.parameters().begin());
      return p.log_probs(phi, prev)[static_cast<Eigen::Index>(token)];
    };
    const auto num = numeric_gradient(f, x, 1e-6);
    for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(grad[i] - num[i]) < 1e-6);
  }
}

TEST_CASE("value gradient matches finite differences") {
  auto p = random_policy(3);
  const auto phi = p.context("value head");
  std::vector<double> grad(p.parameter_count(), 0.0);
  p.add_value_gradient(phi, 2, 1.5, grad);
  std::vector<double> x(p.parameters().begin(), p.parameters().end());
  const auto num = numeric_gradient(
      [&](std::span<const double> y) {
        std::copy(y.begin(), y.end(), p.parameters().begin());
        return 1.5 * p.value(phi, 2);
      },
      x, 1e-6);
  for (std::size_t i = 0; i < x.size(); ++i) CHECK(std::abs(grad[i] - num[i]) < 1e-6);
  for (std::size_t i = 0; i < p.value_offset(); ++i) CHECK(grad[i] == 0.0);
}

TEST_CASE("sequence log-prob sums the step terms and stops at the end token") {
  const auto p = random_policy(4);
  const auto phi = p.context("x");
  const std::vector<std::size_t> seq = {3, 2, 0};
  const double want = p.log_probs(phi, p.bos())[3] + p.log_probs(phi, 3)[2] + p.log_probs(phi, 2)[0];
  CHECK(p.sequence_log_prob(phi, seq) == doctest::Approx(want).epsilon(1e-12));
  std::mt19937_64 rng(5);
  for (int i = 0; i < 200; ++i) {
    const auto s = p.sample(phi, rng);
    REQUIRE_FALSE(s.empty());
    CHECK(s.size() <= 3);
    for (std::size_t j = 0; j + 1 < s.size(); ++j) CHECK(s[j] != 0u);
    if (s.size() < 3) CHECK(s.back() == 0u);
  }
  CHECK(p.decode_response(seq) == "t3 t2");
}

TEST_CASE("sampling follows the model distribution") {
  const auto p = random_policy(6, 4, 1, false);
  const auto phi = p.context("distribution");
  const Eigen::VectorXd probs = p.log_probs(phi, p.bos()).array().exp();
  std::mt19937_64 rng(7);
  std::vector<double> counts(4, 0.0);
  const int n = 40000;
  for (int i = 0; i < n; ++i) counts[p.sample(phi, rng)[0]] += 1.0;
  for (std::size_t t = 0; t < 4; ++t) {
    const double sd = std::sqrt(probs[static_cast<Eigen::Index>(t)] * (1 - probs[static_cast<Eigen::Index>(t)]) / n);
    CHECK(std::abs(counts[t] / n - probs[static_cast<Eigen::Index>(t)]) < 5 * sd + 1e-9);
  }
  Eigen::Index best;
  probs.maxCoeff(&best);
  CHECK(p.greedy(phi)[0] == static_cast<std::size_t>(best));
}

TEST_CASE("policy checkpoints round-trip") {
  const auto p = random_policy(8);
  std::stringstream buf;
  p.save(buf);
  const auto back = Policy::load(buf);
  CHECK(back.vocabulary() == p.vocabulary());
  CHECK(back.config().eos_token == p.config().eos_token);
  CHECK(std::equal(back.parameters().begin(), back.parameters().end(), p.parameters().begin()));
  std::istringstream bad("EVPOL001");
  CHECK_THROWS_AS(Policy::load(bad), DataError);
}

TEST_CASE("supervised fine-tuning lowers the demonstration loss") {
  Policy p(Vocabulary({"<eos>", "masks", "work", "do", "not"}),
           {.context_dim = 16, .max_length = 5, .eos_token = "<eos>"});
  std::vector<Demonstration> demos;
  for (int i = 0; i < 20; ++i) {
    demos.push_back({{"claim " + std::to_string(i), {}}, i % 2 ? "masks work" : "masks do not work"});
  }
  const double before = demonstration_loss(p, demos);
  const auto trace = supervised_finetune(p, demos, {.epochs = 20, .learning_rate = 0.1});
  CHECK(trace.epoch_loss.size() == 20);
  CHECK(trace.epoch_loss.back() < 0.5 * before);
  CHECK(demonstration_loss(p, demos) == doctest::Approx(trace.epoch_loss.back()));
  demos.push_back({{"c", {}}, "masks masks masks masks masks"});
  CHECK_THROWS_AS(supervised_finetune(p, demos, {}), TrainingError);
  CHECK_THROWS_AS(supervised_finetune(p, std::vector<Demonstration>{}, {}), TrainingError);
}

TEST_CASE("rollouts do not depend on the thread count") {
  const auto actor = random_policy(9);
  const auto ref = random_policy(10);
  std::vector<PromptContext> prompts;
  for (int i = 0; i < 40; ++i) prompts.push_back({"claim " + std::to_string(i), {}});
  const RewardFn reward = [](const PromptContext&, std::string_view r) {
    if (r == "t4") throw RewardError("rejected");
    return static_cast<double>(r.size());
  };
  const auto one = rollout(actor, ref, prompts, reward, 3, 1);
  const auto many = rollout(actor, ref, prompts, reward, 3, 5);
  REQUIRE(one.trajectories.size() == many.trajectories.size());
  CHECK(one.invalid == many.invalid);
  CHECK(one.trajectories.size() + one.invalid == prompts.size());
  for (std::size_t i = 0; i < one.trajectories.size(); ++i) {
    const auto& a = one.trajectories[i];
    const auto& b = many.trajectories[i];
    CHECK(a.tokens == b.tokens);
    CHECK(a.terminal_reward == b.terminal_reward);
    CHECK(a.per_token_kl == b.per_token_kl);
    const auto phi = actor.context(a.prompt.text());
    CHECK(a.kl() == doctest::Approx(actor.sequence_log_prob(phi, a.tokens) -
                                    ref.sequence_log_prob(ref.context(a.prompt.text()), a.tokens)));
  }
}

TEST_CASE("prompt context text") {
  CHECK(PromptContext{"bare", {}}.text() == "bare");
  const PromptContext full{"c", {"e"}};
  CHECK(full.text() == render_prompt("c", full.evidence));
}

TEST_CASE("prompts and demonstrations load from JSON lines") {
  TempDir dir;
  std::ofstream(dir / "p.jsonl") << R"({"claim": "a", "evidence": ["x"]})" "\n"
                                 << R"({"claim": "b"})" "\n";
  const auto prompts = load_prompts(dir / "p.jsonl");
  REQUIRE(prompts.size() == 2);
  CHECK(prompts[0].evidence.size() == 1);
  std::ofstream(dir / "d.jsonl") << R"({"claim": "a", "response": "r"})" "\n";
  CHECK(load_demonstrations(dir / "d.jsonl")[0].response == "r");
  CHECK_THROWS_AS(load_demonstrations(dir / "p.jsonl"), DataError);
}
