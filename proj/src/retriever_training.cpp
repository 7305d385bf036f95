#include "evidentia/retriever_training.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <unordered_set>

#include "evidentia/error.hpp"
#include "evidentia/hash.hpp"
#include "evidentia/optim.hpp"

namespace evidentia {

void RetrieverTrainBatch::validate() const {
  if (positives.empty() || positives.size() != negatives.size()) {
    throw ValidationError("batch needs k positives and k negatives");
  }
  std::unordered_set<std::string> pos;
  for (const auto& p : positives) {
    if (p.doc_id == gold.doc_id) throw ValidationError("gold evidence among positives");
    pos.insert(p.doc_id);
  }
  for (const auto& n : negatives) {
    if (n.doc_id == gold.doc_id) throw ValidationError("gold evidence among negatives");
    if (pos.contains(n.doc_id)) throw ValidationError("document both positive and negative");
  }
}

namespace {

struct Projected {
  Eigen::VectorXd phi;
  Eigen::VectorXd unit;
  double norm = 0.0;  // 0 when the fallback vector was used
};

Projected project(const DenseScorer& scorer, std::string_view text) {
  Projected p;
  p.phi = scorer.features(text);
  Eigen::VectorXd u = scorer.projection() * p.phi;
  const double n = u.norm();
  if (n > 0.0 && std::isfinite(n)) {
    p.norm = n;
    p.unit = u / n;
  } else {
    p.unit = scorer.fallback();
  }
  return p;
}

}  // namespace

RankingLoss ranking_loss(const DenseScorer& scorer, const RetrieverTrainBatch& batch, double tau,
                         double lambda, ContrastiveForm form, bool with_gradient) {
  const std::size_t k = batch.positives.size();
  const std::size_t kn = batch.negatives.size();
  if (k == 0 || kn == 0) throw ValidationError("batch needs positives and negatives");
  const double t = scorer.config().temperature;

  // Slot 0: claim, 1: gold, 2..2+k: positives, then negatives.
  std::vector<Projected> v;
  v.reserve(2 + k + kn);
  v.push_back(project(scorer, batch.claim));
  v.push_back(project(scorer, evidence_text(batch.gold)));
  for (const auto& d : batch.positives) v.push_back(project(scorer, evidence_text(d)));
  for (const auto& d : batch.negatives) v.push_back(project(scorer, evidence_text(d)));

  auto f = [&](std::size_t j) { return v[0].unit.dot(v[j].unit) / t; };
  std::vector<double> score(v.size(), 0.0);
  for (std::size_t j = 1; j < v.size(); ++j) score[j] = f(j);

  RankingLoss out;
  std::vector<double> coef(v.size(), 0.0);  // d loss / d f(x, slot)

  std::size_t best = 2;
  for (std::size_t i = 3; i < 2 + k; ++i) {
    if (score[i] > score[best]) best = i;
  }
  out.hardest_positive = best - 2;
  const double margin = score[best] - score[1] + tau;
  if (margin > 0.0) {
    out.hinge = margin;
    coef[best] += 1.0;
    coef[1] -= 1.0;
  }

  double mx = score[1];
  for (std::size_t j = 2 + k; j < v.size(); ++j) mx = std::max(mx, score[j]);
  double z = std::exp(score[1] - mx);
  for (std::size_t j = 2 + k; j < v.size(); ++j) z += std::exp(score[j] - mx);
  const double p_gold = std::exp(score[1] - mx) / z;
  out.gold_softmax = p_gold;

  if (form == ContrastiveForm::Probability) {
    out.loss = out.hinge - lambda * p_gold;
    coef[1] -= lambda * p_gold * (1.0 - p_gold);
    for (std::size_t j = 2 + k; j < v.size(); ++j) {
      coef[j] += lambda * p_gold * std::exp(score[j] - mx) / z;
    }
  } else {
    out.loss = out.hinge - lambda * (score[1] - mx - std::log(z));
    coef[1] -= lambda * (1.0 - p_gold);
    for (std::size_t j = 2 + k; j < v.size(); ++j) coef[j] += lambda * std::exp(score[j] - mx) / z;
  }

  if (!std::isfinite(out.loss)) throw TrainingError("non-finite ranking loss");
  if (!with_gradient) return out;

  // d cos(u_x, u_d) / d u_x = (u_d_hat - cos u_x_hat) / |u_x|, symmetric in d.
  const auto d = static_cast<Eigen::Index>(scorer.config().dim);
  std::vector<Eigen::VectorXd> grad_u(v.size(), Eigen::VectorXd::Zero(d));
  for (std::size_t j = 1; j < v.size(); ++j) {
    if (coef[j] == 0.0) continue;
    const double c = score[j] * t;
    const double w = coef[j] / t;
    if (v[0].norm > 0.0) grad_u[0] += w * (v[j].unit - c * v[0].unit) / v[0].norm;
    if (v[j].norm > 0.0) grad_u[j] += w * (v[0].unit - c * v[j].unit) / v[j].norm;
  }
  out.gradient = Eigen::MatrixXd::Zero(d, d);
  for (std::size_t j = 0; j < v.size(); ++j) {
    if (v[j].norm > 0.0) out.gradient.noalias() += grad_u[j] * v[j].phi.transpose();
  }
  return out;
}

void RetrieverTrainConfig::validate() const {
  if (!(tau >= 0.0) || !std::isfinite(tau)) throw ArgumentError("tau must be >= 0");
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ArgumentError("lambda must be >= 0");
  if (k < 1) throw ArgumentError("k must be >= 1");
  if (epochs < 1) throw ArgumentError("epochs must be >= 1");
  if (batch_size < 1) throw ArgumentError("batch_size must be >= 1");
  if (!(learning_rate > 0.0)) throw ArgumentError("learning_rate must be > 0");
  if (!(weight_decay >= 0.0)) throw ArgumentError("weight_decay must be >= 0");
  bm25.validate();
}

RetrieverTrainBatch make_train_batch(const InvertedIndex& index, const DocumentLookup& docs,
                                     const ClaimEvidencePair& pair, std::size_t k,
                                     std::uint64_t seed, const Bm25Params& bm25) {
  auto resolve = [&](const std::string& id) {
    auto d = docs.lookup(id);
    if (!d) throw ValidationError("document not found: " + id);
    return std::move(*d);
  };

  RetrieverTrainBatch batch;
  batch.claim = pair.claim;
  batch.gold = resolve(pair.gold_doc_id);

  DocIdSet exclude{pair.gold_doc_id};
  for (auto& p : sample_positives(index, pair.claim, k, exclude, bm25)) {
    exclude.insert(p.doc_id);
    batch.positives.push_back(resolve(p.doc_id));
  }
  for (auto& n : sample_negatives(index, pair.claim, k, exclude, seed, bm25)) {
    batch.negatives.push_back(resolve(n.doc_id));
  }
  return batch;
}

RetrieverTrainTrace train_retriever(DenseScorer& scorer,
                                    std::span<const ClaimEvidencePair> dataset,
                                    const InvertedIndex& index, const DocumentLookup& docs,
                                    const RetrieverTrainConfig& config,
                                    const std::function<double(const DenseScorer&)>& validate) {
  config.validate();
  if (dataset.empty()) throw TrainingError("empty retriever training set");

  std::vector<std::string> missing;
  for (const auto& ex : dataset) {
    if (!index.find_doc(ex.gold_doc_id) || !docs.lookup(ex.gold_doc_id)) {
      missing.push_back(ex.gold_doc_id);
    }
  }
  if (!missing.empty()) {
    std::string msg = "gold evidence missing from corpus:";
    for (const auto& id : missing) msg += " " + id;
    throw ValidationError(msg);
  }

  const std::size_t n = dataset.size();
  const std::size_t steps_per_epoch = (n + config.batch_size - 1) / config.batch_size;
  const std::size_t total_steps = steps_per_epoch * config.epochs;

  auto& weights = scorer.projection();
  Adam optimizer(static_cast<std::size_t>(weights.size()),
                 {.weight_decay = config.weight_decay});

  RetrieverTrainTrace trace;
  Eigen::MatrixXd best_weights;
  double best_score = -std::numeric_limits<double>::infinity();

  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::mt19937_64 rng(mix_seed(config.seed, epoch));
    std::shuffle(order.begin(), order.end(), rng);

    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += config.batch_size) {
      const std::size_t end = std::min(n, start + config.batch_size);
      Eigen::MatrixXd grad = Eigen::MatrixXd::Zero(weights.rows(), weights.cols());
      for (std::size_t b = start; b < end; ++b) {
        const std::size_t ex = order[b];
        const auto batch = make_train_batch(index, docs, dataset[ex], config.k,
                                            mix_seed(config.seed, epoch * n + ex + 1000003),
                                            config.bm25);
        RankingLoss l;
        try {
          l = ranking_loss(scorer, batch, config.tau, config.lambda, config.form);
        } catch (const TrainingError& e) {
          throw TrainingError(std::string(e.what()) + " (epoch " + std::to_string(epoch) +
                              ", example " + std::to_string(ex) + ")");
        }
        if (!l.gradient.allFinite()) {
          throw TrainingError("non-finite gradient (epoch " + std::to_string(epoch) +
                              ", example " + std::to_string(ex) + ")");
        }
        epoch_loss += l.loss;
        grad += l.gradient;
      }
      grad /= static_cast<double>(end - start);
      const double lr =
          warmup_cosine_lr(config.learning_rate, step, config.warmup_steps, total_steps);
      optimizer.step({weights.data(), static_cast<std::size_t>(weights.size())},
                     {grad.data(), static_cast<std::size_t>(grad.size())}, lr);
      ++step;
    }
    trace.epoch_loss.push_back(epoch_loss / static_cast<double>(n));

    if (validate) {
      const double score = validate(scorer);
      trace.validation.push_back(score);
      if (score > best_score) {
        best_score = score;
        best_weights = weights;
        trace.best_epoch = epoch;
      }
    } else {
      trace.best_epoch = epoch;
    }
  }
  if (validate && best_weights.size() > 0) weights = best_weights;
  trace.steps = step;
  return trace;
}

}  // namespace evidentia
