#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "evidentia/corpus.hpp"
#include "evidentia/dense.hpp"
#include "evidentia/retriever_training.hpp"
#include "evidentia/reward.hpp"

namespace evidentia::testing {

/// Retrieval benchmark with a planted lexical gap. Every document carries
/// its topic's two words (shared with its claim) and one concept word,
/// unique within its topic. The claim names the concept through a paired vocabulary (cqN
/// in claims, cdN in documents), so BM25 narrows to the topic but cannot
/// pick the document, and a dense scorer only ranks well once it learns the
/// pairing.
struct PlantedSpec {
  std::size_t docs = 2000;
  std::size_t topics = 100;
  std::size_t concepts = 20;
  std::size_t fillers = 20;
  std::size_t doc_fillers = 8;
  std::size_t train_claims = 200;
  std::size_t eval_claims = 100;
};

struct PlantedBenchmark {
  Corpus corpus;
  std::vector<ClaimEvidencePair> train;
  std::vector<ClaimEvidencePair> eval;
};

PlantedBenchmark make_planted_benchmark(const PlantedSpec& spec, std::uint64_t seed);

/// Random corpus over a Zipf-ish vocabulary of `vocab` words.
Corpus make_random_corpus(std::size_t docs, std::size_t vocab, std::uint64_t seed,
                          std::size_t min_len = 3, std::size_t max_len = 30);

/// Random query drawn from the same vocabulary.
std::string make_random_query(std::size_t vocab, std::uint64_t seed, std::size_t max_terms = 4);

std::string word(std::size_t i);

/// Binary feedback for one aspect. Each response word comes from its
/// class's marker pool with probability `signal`, otherwise from a pool
/// shared by both classes. Claims and evidence carry no label information.
struct FeedbackSpec {
  std::size_t examples = 1000;
  double positive_fraction = 0.5;
  double signal = 1.0;
  std::size_t words = 8;
  std::size_t marker_pool = 30;
  std::size_t shared_pool = 200;
  Aspect aspect = Aspect::Refutation;
};

std::vector<FeedbackExample> make_feedback_set(const FeedbackSpec& spec, std::uint64_t seed);

/// Short random text over a `vocab`-word vocabulary.
std::string random_text(std::mt19937_64& rng, std::size_t vocab, std::size_t min_words,
                        std::size_t max_words);

/// Hand-built training batch with random texts and k positives/negatives.
RetrieverTrainBatch make_random_batch(std::mt19937_64& rng, std::size_t k, std::size_t vocab);

/// Scorer with projection identity + scale * N(0, 1) noise.
DenseScorer make_random_scorer(std::mt19937_64& rng, std::size_t dim, double temperature,
                               double scale = 0.3);

/// Relative error between the analytic ranking-loss gradient and central
/// finite differences over every projection entry.
double ranking_gradient_error(const DenseScorer& scorer, const RetrieverTrainBatch& batch,
                              double tau, double lambda, ContrastiveForm form, double h = 1e-6);

}  // namespace evidentia::testing
