#pragma once

#include <array>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

#include "evidentia/corpus.hpp"
#include "evidentia/dense.hpp"
#include "evidentia/inverted_index.hpp"
#include "evidentia/retriever_training.hpp"

namespace evidentia {

struct PipelineConfig {
  std::size_t m = 20;     // stage-1 subset size
  std::size_t k_out = 5;  // evidence documents returned
  Bm25Params bm25{};

  void validate() const;
};

/// BM25 top-m followed by dense reranking of exactly those m documents.
/// Holds references; the index, scorer and lookup must outlive it. Safe for
/// concurrent use.
class RetrievalPipeline {
 public:
  RetrievalPipeline(const InvertedIndex& index, const DenseScorer& scorer,
                    const DocumentLookup& docs, PipelineConfig config);

  const PipelineConfig& config() const { return config_; }
  const InvertedIndex& index() const { return index_; }
  const DenseScorer& scorer() const { return scorer_; }
  const DocumentLookup& documents() const { return docs_; }

  std::vector<ScoredDocument> lexical_stage(std::string_view claim) const;

  /// Dense scores for `candidates`, sorted (score desc, doc_id asc).
  std::vector<ScoredDocument> rerank(std::string_view claim,
                                     std::span<const ScoredDocument> candidates) const;

  /// The top-k_out of the reranked stage-1 subset.
  std::vector<ScoredDocument> retrieve(std::string_view claim) const;
  std::vector<ScoredDocument> retrieve(std::string_view claim, std::size_t k_out) const;

  /// All m stage-1 documents in dense order.
  std::vector<ScoredDocument> ranked_subset(std::string_view claim) const;

  EvidenceDocument document(const std::string& doc_id) const;

 private:
  const InvertedIndex& index_;
  const DenseScorer& scorer_;
  const DocumentLookup& docs_;
  PipelineConfig config_;
};

// Single-gold binary-relevance metrics. `rank` is 1-based; nullopt means
// the gold document was not ranked.
double ndcg_at_k(std::optional<std::size_t> rank, std::size_t k);
double recall_at_k(std::optional<std::size_t> rank, std::size_t k);

/// Binary-relevance NDCG@k with any number of relevant documents.
double ndcg_at_k(std::span<const std::string> ranked, const std::unordered_set<std::string>& gold,
                 std::size_t k);

using EvalExample = ClaimEvidencePair;

struct RankingReport {
  // "n@1", "n@3", "r@3", "n@5", "r@5", "n@10"
  std::map<std::string, double> metrics;
  std::vector<std::optional<std::size_t>> ranks;  // per evaluated example
  std::size_t evaluated = 0;
  std::vector<std::string> excluded;  // gold ids missing from the corpus

  double operator[](const std::string& metric) const { return metrics.at(metric); }
};

/// Table column order for the retrieval metrics.
inline constexpr std::array<std::string_view, 5> kReportColumns = {"n@1", "n@3", "r@3", "n@5",
                                                                   "r@5"};

/// Ranks documents for a claim, best first.
using Ranker = std::function<std::vector<std::string>(std::string_view claim)>;

/// Mean metrics over the examples; examples whose gold id is unknown to
/// `known` are excluded and listed. Per-example work runs on `threads`
/// threads (0 = hardware concurrency); aggregation is in example order.
RankingReport evaluate_rankings(std::span<const EvalExample> examples, const Ranker& ranker,
                                const std::function<bool(const std::string&)>& known,
                                unsigned threads = 0);

/// Gold rank within the reranked stage-1 subset (absent outside it).
RankingReport evaluate(const RetrievalPipeline& pipeline, std::span<const EvalExample> examples,
                       unsigned threads = 0);

/// BM25-only baseline over the same top-m list.
RankingReport evaluate_lexical(const InvertedIndex& index, std::span<const EvalExample> examples,
                               std::size_t m, const Bm25Params& bm25 = {}, unsigned threads = 0);

std::string report_json(const RankingReport& report, bool with_ranks = true);

/// Fixed-width table: one row per named report, columns kReportColumns.
std::string report_table(const std::vector<std::pair<std::string, RankingReport>>& rows);

std::vector<EvalExample> load_eval_set(const std::filesystem::path& path);

}  // namespace evidentia
