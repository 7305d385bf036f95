#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "evidentia/corpus.hpp"
#include "evidentia/dense.hpp"
#include "evidentia/inverted_index.hpp"

namespace evidentia {

/// A claim paired with its annotated evidence document.
struct ClaimEvidencePair {
  std::string claim;
  std::string gold_doc_id;
};

/// One claim, its gold evidence, k BM25 positives and k low-relevance
/// negatives. Gold is in neither side; the two sides are disjoint.
struct RetrieverTrainBatch {
  std::string claim;
  EvidenceDocument gold;
  std::vector<EvidenceDocument> positives;
  std::vector<EvidenceDocument> negatives;

  void validate() const;
};

/// How the gold-vs-negatives softmax term enters the objective:
/// Probability subtracts lambda * p_gold, LogProbability subtracts
/// lambda * log p_gold (the usual InfoNCE form).
enum class ContrastiveForm : std::uint8_t { Probability, LogProbability };

struct RankingLoss {
  double loss = 0.0;
  double hinge = 0.0;         // max(0, max_i f(x, p_i) - f(x, e) + tau)
  double gold_softmax = 0.0;  // exp f(x,e) / (exp f(x,e) + sum_i exp f(x, n_i))
  std::size_t hardest_positive = 0;
  Eigen::MatrixXd gradient;   // d loss / d projection; empty when not requested
};

/// Margin ranking loss against the hardest positive plus the scaled
/// contrastive term over the negatives. At ties the lowest-index maximizer
/// carries the subgradient.
RankingLoss ranking_loss(const DenseScorer& scorer, const RetrieverTrainBatch& batch, double tau,
                         double lambda, ContrastiveForm form = ContrastiveForm::Probability,
                         bool with_gradient = true);

struct RetrieverTrainConfig {
  double tau = 0.2;
  double lambda = 0.2;
  ContrastiveForm form = ContrastiveForm::Probability;
  std::size_t k = 4;
  std::size_t epochs = 5;
  std::size_t batch_size = 1;
  double learning_rate = 3e-2;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 100;
  std::uint64_t seed = 0;
  Bm25Params bm25{};

  void validate() const;
};

struct RetrieverTrainTrace {
  std::vector<double> epoch_loss;   // mean loss per epoch
  std::vector<double> validation;   // per-epoch validation score, if a validator was given
  std::size_t best_epoch = 0;       // 0-based; parameters restored from this epoch
  std::size_t steps = 0;
};

/// Samples the batch for one training pair: positives are the top-k BM25
/// documents without the gold, negatives are drawn from the zero-score pool
/// excluding gold and positives.
RetrieverTrainBatch make_train_batch(const InvertedIndex& index, const DocumentLookup& docs,
                                     const ClaimEvidencePair& pair, std::size_t k,
                                     std::uint64_t seed, const Bm25Params& bm25 = {});

/// AdamW with linear warmup and cosine decay over all steps. When
/// `validate` is set it is called after every epoch and the parameters of
/// the best-scoring epoch are kept. Bit-reproducible for a fixed seed.
RetrieverTrainTrace train_retriever(DenseScorer& scorer,
                                    std::span<const ClaimEvidencePair> dataset,
                                    const InvertedIndex& index, const DocumentLookup& docs,
                                    const RetrieverTrainConfig& config,
                                    const std::function<double(const DenseScorer&)>& validate = {});

}  // namespace evidentia
