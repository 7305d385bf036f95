#include "evidentia/reward.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <random>

#include "evidentia/binary_io.hpp"
#include "evidentia/error.hpp"
#include "evidentia/hash.hpp"
#include "evidentia/optim.hpp"
#include "json.hpp"

namespace evidentia {

std::string_view to_string(Aspect aspect) {
  switch (aspect) {
    case Aspect::Refutation: return "refutation";
    case Aspect::Factuality: return "factuality";
    case Aspect::Politeness: return "politeness";
  }
  return "unknown";
}

Aspect parse_aspect(std::string_view name) {
  std::string lower(name);
  for (auto& c : lower) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  for (Aspect a : kAspects) {
    if (to_string(a) == lower) return a;
  }
  throw ArgumentError("unknown aspect: " + std::string(name));
}

std::vector<FeedbackExample> load_feedback(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<FeedbackExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      FeedbackExample ex;
      ex.claim = j.at("claim").get<std::string>();
      ex.evidence = j.value("evidence", std::vector<std::string>{});
      ex.response = j.at("response").get<std::string>();
      ex.label = j.at("label").get<int>();
      if (ex.label != 0 && ex.label != 1) throw DataError("label must be 0 or 1");
      ex.aspect = parse_aspect(j.at("aspect").get<std::string>());
      out.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    } catch (const Error& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Features

void FeatureConfig::validate() const {
  if (dim < 2 || dim > (std::size_t{1} << 24)) throw ArgumentError("feature dim out of range");
}

SparseFeatures featurize(const FeatureConfig& config, std::string_view claim,
                         std::span<const std::string> evidence, std::string_view response) {
  std::map<std::uint32_t, double> counts;
  auto add = [&](std::string_view key) {
    counts[static_cast<std::uint32_t>(fnv1a64(key) % config.dim)] += 1.0;
  };
  auto segment = [&](std::string_view prefix, std::string_view text) {
    const auto toks = tokenize(text, config.tokenizer);
    for (std::size_t i = 0; i < toks.size(); ++i) {
      add(std::string(prefix) + toks[i]);
      if (config.bigrams && i + 1 < toks.size()) {
        add(std::string(prefix) + toks[i] + ' ' + toks[i + 1]);
      }
    }
  };
  segment("c|", claim);
  for (const auto& e : evidence) segment("e|", e);
  segment("r|", response);

  double norm = 0.0;
  for (const auto& [_, v] : counts) norm += v * v;
  norm = std::sqrt(norm);
  SparseFeatures out;
  out.reserve(counts.size());
  for (const auto& [i, v] : counts) out.emplace_back(i, v / norm);
  return out;
}

// ---------------------------------------------------------------------------
// FeedbackClassifier

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

FeedbackClassifier::FeedbackClassifier(Aspect aspect, FeatureConfig features)
    : aspect_(aspect), features_(features), weights_(features.dim, 0.0) {
  features_.validate();
}

double FeedbackClassifier::margin(const SparseFeatures& phi) const {
  double z = bias_;
  for (const auto& [i, v] : phi) z += weights_[i] * v;
  return z;
}

double FeedbackClassifier::probability(const SparseFeatures& phi) const {
  return std::clamp(sigmoid(margin(phi)), kScoreFloor, 1.0 - kScoreFloor);
}

double FeedbackClassifier::score(std::string_view claim, std::span<const std::string> evidence,
                                 std::string_view response) const {
  return probability(featurize(features_, claim, evidence, response));
}

void FeedbackClassifier::save(std::ostream& out) const {
  io::write_header(out, kMagic, kVersion);
  io::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(aspect_));
  io::write_pod<std::uint64_t>(out, features_.dim);
  io::write_pod<std::uint8_t>(out, features_.bigrams ? 1 : 0);
  io::write_pod<std::uint8_t>(out, features_.tokenizer.remove_stopwords ? 1 : 0);
  io::write_pod(out, bias_);
  io::write_vector(out, weights_);
  if (!out) throw DataError("classifier checkpoint write failed");
}

void FeedbackClassifier::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  save(out);
}

FeedbackClassifier FeedbackClassifier::load(std::istream& in) {
  io::read_header(in, kMagic, kVersion);
  const auto aspect = io::read_pod<std::uint8_t>(in);
  if (aspect > 2) throw DataError("unknown aspect in classifier checkpoint");
  FeatureConfig fc;
  fc.dim = io::read_pod<std::uint64_t>(in);
  fc.bigrams = io::read_pod<std::uint8_t>(in) != 0;
  fc.tokenizer.remove_stopwords = io::read_pod<std::uint8_t>(in) != 0;
  if (fc.dim < 2 || fc.dim > (std::size_t{1} << 24)) throw DataError("classifier dim out of range");
  FeedbackClassifier c(static_cast<Aspect>(aspect), fc);
  c.bias_ = io::read_pod<double>(in);
  c.weights_ = io::read_vector<double>(in);
  if (c.weights_.size() != fc.dim) throw DataError("classifier weight count mismatch");
  if (!std::isfinite(c.bias_) ||
      !std::all_of(c.weights_.begin(), c.weights_.end(), [](double w) { return std::isfinite(w); })) {
    throw DataError("classifier checkpoint has non-finite weights");
  }
  return c;
}

FeedbackClassifier FeedbackClassifier::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return load(in);
}

// ---------------------------------------------------------------------------
// Metrics

double balanced_accuracy(std::span<const int> predictions, std::span<const int> labels) {
  if (predictions.size() != labels.size()) throw ArgumentError("prediction/label size mismatch");
  std::size_t n[2] = {0, 0};
  std::size_t hit[2] = {0, 0};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i];
    if (y != 0 && y != 1) throw ArgumentError("labels must be 0 or 1");
    ++n[y];
    if (predictions[i] == y) ++hit[y];
  }
  if (n[0] == 0 || n[1] == 0) throw ArgumentError("balanced accuracy needs both classes");
  return 0.5 * (static_cast<double>(hit[0]) / static_cast<double>(n[0]) +
                static_cast<double>(hit[1]) / static_cast<double>(n[1]));
}

ClassifierMetrics classification_metrics(std::span<const int> predictions,
                                         std::span<const int> labels) {
  ClassifierMetrics m;
  m.balanced_accuracy = balanced_accuracy(predictions, labels);
  std::size_t tp = 0, fp = 0, fn = 0, correct = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (predictions[i] == labels[i]) ++correct;
    if (predictions[i] == 1 && labels[i] == 1) ++tp;
    if (predictions[i] == 1 && labels[i] == 0) ++fp;
    if (predictions[i] == 0 && labels[i] == 1) ++fn;
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  m.precision = tp + fp == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fp);
  m.recall = static_cast<double>(tp) / static_cast<double>(tp + fn);
  m.f1 = m.precision + m.recall == 0.0
             ? 0.0
             : 2.0 * m.precision * m.recall / (m.precision + m.recall);
  m.test_size = labels.size();
  return m;
}

std::string metrics_json(const ClassifierMetrics& metrics) {
  nlohmann::ordered_json j;
  j["BA"] = metrics.balanced_accuracy;
  j["Acc."] = metrics.accuracy;
  j["F1"] = metrics.f1;
  j["Prec."] = metrics.precision;
  j["Rec."] = metrics.recall;
  j["train_size"] = metrics.train_size;
  j["test_size"] = metrics.test_size;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Training

void ClassifierTrainConfig::validate() const {
  if (!(test_fraction > 0.0 && test_fraction < 1.0)) {
    throw ArgumentError("test_fraction must lie in (0, 1)");
  }
  if (max_epochs < 1) throw ArgumentError("max_epochs must be >= 1");
  if (!(learning_rate > 0.0)) throw ArgumentError("learning_rate must be > 0");
  if (!(l2 >= 0.0)) throw ArgumentError("l2 must be >= 0");
  features.validate();
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> stratified_split(
    std::span<const int> labels, double test_fraction, std::uint64_t seed) {
  std::vector<std::size_t> by_class[2];
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) throw ArgumentError("labels must be 0 or 1");
    by_class[labels[i]].push_back(i);
  }
  std::vector<std::size_t> train, test;
  for (int c = 0; c < 2; ++c) {
    auto& idx = by_class[c];
    std::mt19937_64 rng(mix_seed(seed, static_cast<std::uint64_t>(c)));
    std::shuffle(idx.begin(), idx.end(), rng);
    auto n_test = static_cast<std::size_t>(
        std::llround(test_fraction * static_cast<double>(idx.size())));
    if (idx.size() >= 2) n_test = std::clamp<std::size_t>(n_test, 1, idx.size() - 1);
    test.insert(test.end(), idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(n_test));
    train.insert(train.end(), idx.begin() + static_cast<std::ptrdiff_t>(n_test), idx.end());
  }
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {std::move(train), std::move(test)};
}

TrainedClassifier train_classifier(std::span<const FeedbackExample> examples, Aspect aspect,
                                   const ClassifierTrainConfig& config) {
  config.validate();
  std::vector<SparseFeatures> phi;
  std::vector<int> labels;
  for (const auto& ex : examples) {
    if (ex.aspect != aspect) continue;
    if (ex.label != 0 && ex.label != 1) throw TrainingError("label must be 0 or 1");
    phi.push_back(featurize(config.features, ex.claim, ex.evidence, ex.response));
    labels.push_back(ex.label);
  }
  const auto positives = std::count(labels.begin(), labels.end(), 1);
  if (positives == 0 || positives == static_cast<std::ptrdiff_t>(labels.size())) {
    throw TrainingError("training set for " + std::string(to_string(aspect)) +
                        " needs both labels");
  }

  auto [train, test] = stratified_split(labels, config.test_fraction, config.seed);

  double class_weight[2] = {1.0, 1.0};
  if (config.class_balanced) {
    double n_c[2] = {0.0, 0.0};
    for (auto i : train) n_c[labels[i]] += 1.0;
    const double n = static_cast<double>(train.size());
    for (int c = 0; c < 2; ++c) class_weight[c] = n / (2.0 * n_c[c]);
  }

  TrainedClassifier out{FeedbackClassifier(aspect, config.features), {}, {}, train, test};
  auto& clf = out.classifier;
  auto& w = clf.weights();
  const std::size_t dim = w.size();

  // Parameters: weights then bias, in one flat vector for the optimizer.
  std::vector<double> params(dim + 1, 0.0);
  std::vector<double> grad(dim + 1, 0.0);
  Adam optimizer(dim + 1);
  double weight_sum = 0.0;
  for (auto i : train) weight_sum += class_weight[labels[i]];

  double previous = std::numeric_limits<double>::infinity();
  for (std::size_t epoch = 0; epoch < config.max_epochs; ++epoch) {
    std::copy(params.begin(), params.end() - 1, w.begin());
    clf.bias() = params.back();
    std::fill(grad.begin(), grad.end(), 0.0);

    double loss = 0.0;
    for (auto i : train) {
      const double z = clf.margin(phi[i]);
      const double p = sigmoid(z);
      const double y = labels[i];
      const double cw = class_weight[labels[i]] / weight_sum;
      // log(1 + e^z) - y z, stable form.
      loss += cw * (std::max(z, 0.0) + std::log1p(std::exp(-std::abs(z))) - y * z);
      const double g = cw * (p - y);
      for (const auto& [j, v] : phi[i]) grad[j] += g * v;
      grad[dim] += g;
    }
    for (std::size_t j = 0; j < dim; ++j) {
      loss += 0.5 * config.l2 * params[j] * params[j];
      grad[j] += config.l2 * params[j];
    }
    if (!std::isfinite(loss)) throw TrainingError("non-finite classifier loss");
    out.loss_trace.push_back(loss);
    if (std::abs(previous - loss) < config.tolerance) break;
    previous = loss;
    optimizer.step(params, grad, config.learning_rate);
  }
  std::copy(params.begin(), params.end() - 1, w.begin());
  clf.bias() = params.back();

  std::vector<int> pred, truth;
  for (auto i : test) {
    pred.push_back(clf.margin(phi[i]) > 0.0 ? 1 : 0);
    truth.push_back(labels[i]);
  }
  out.metrics = classification_metrics(pred, truth);
  out.metrics.train_size = train.size();
  return out;
}

// ---------------------------------------------------------------------------
// Reward

void RewardConfig::validate() const {
  if (!std::isfinite(alpha) || alpha < 0.0) throw ArgumentError("alpha must be finite and >= 0");
}

namespace {

double map_cosine(const DenseScorer& scorer, const RewardConfig& config, double cos) {
  return config.raw_relevance ? cos / scorer.config().temperature : 0.5 * (cos + 1.0);
}

}  // namespace

double reward_relevance(const DenseScorer& scorer, const RewardConfig& config, std::string_view a,
                        std::string_view b) {
  return map_cosine(scorer, config, scorer.cosine(a, b));
}

RewardBreakdown compute_reward(const RewardConfig& config, const AspectScorer& refutation,
                               const AspectScorer& factuality, const AspectScorer& politeness,
                               const DenseScorer& scorer, std::string_view claim,
                               std::span<const std::string> evidence, std::string_view response) {
  config.validate();
  if (evidence.empty()) throw RewardError("reward needs at least one evidence document");
  RewardBreakdown r;
  r.refutation = refutation.score(claim, evidence, response);
  r.factuality = factuality.score(claim, evidence, response);
  r.politeness = politeness.score(claim, evidence, response);
  r.claim_relevance = reward_relevance(scorer, config, claim, response);
  const Eigen::VectorXd resp = scorer.embed(response);
  double best = -std::numeric_limits<double>::infinity();
  for (const auto& e : evidence) {
    best = std::max(best, map_cosine(scorer, config, scorer.embed(e).dot(resp)));
  }
  r.evidence_relevance = best;
  r.total = r.refutation + r.factuality + r.politeness +
            config.alpha * (r.claim_relevance + r.evidence_relevance);
  if (!std::isfinite(r.total)) throw RewardError("non-finite reward");
  return r;
}

RewardModel::RewardModel(const AspectScorer& refutation, const AspectScorer& factuality,
                         const AspectScorer& politeness, const DenseScorer& scorer,
                         RewardConfig config)
    : refutation_(refutation),
      factuality_(factuality),
      politeness_(politeness),
      scorer_(scorer),
      config_(config) {
  config_.validate();
}

RewardBreakdown RewardModel::operator()(std::string_view claim,
                                        std::span<const std::string> evidence,
                                        std::string_view response) const {
  return compute_reward(config_, refutation_, factuality_, politeness_, scorer_, claim, evidence,
                        response);
}

}  // namespace evidentia
