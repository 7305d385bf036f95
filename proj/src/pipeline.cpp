#include "evidentia/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <thread>

#include "evidentia/error.hpp"
#include "json.hpp"

namespace evidentia {

void PipelineConfig::validate() const {
  if (m < 1) throw ArgumentError("m must be >= 1");
  if (k_out < 1 || k_out > m) throw ArgumentError("k_out must lie in [1, m]");
  bm25.validate();
}

RetrievalPipeline::RetrievalPipeline(const InvertedIndex& index, const DenseScorer& scorer,
                                     const DocumentLookup& docs, PipelineConfig config)
    : index_(index), scorer_(scorer), docs_(docs), config_(config) {
  config_.validate();
}

std::vector<ScoredDocument> RetrievalPipeline::lexical_stage(std::string_view claim) const {
  return retrieve_top_m(index_, claim, config_.m, config_.bm25);
}

EvidenceDocument RetrievalPipeline::document(const std::string& doc_id) const {
  auto doc = docs_.lookup(doc_id);
  if (!doc) throw PipelineError("indexed document missing from the corpus: " + doc_id);
  return std::move(*doc);
}

std::vector<ScoredDocument> RetrievalPipeline::rerank(
    std::string_view claim, std::span<const ScoredDocument> candidates) const {
  const Eigen::VectorXd query = scorer_.embed(claim);
  const double t = scorer_.config().temperature;
  std::vector<ScoredDocument> out;
  out.reserve(candidates.size());
  for (const auto& c : candidates) {
    const double cos = query.dot(scorer_.embed(evidence_text(document(c.doc_id))));
    out.push_back({c.doc_id, cos / t, Stage::Dense});
  }
  std::sort(out.begin(), out.end(), ranks_before);
  return out;
}

std::vector<ScoredDocument> RetrievalPipeline::ranked_subset(std::string_view claim) const {
  return rerank(claim, lexical_stage(claim));
}

std::vector<ScoredDocument> RetrievalPipeline::retrieve(std::string_view claim,
                                                        std::size_t k_out) const {
  if (k_out < 1 || k_out > config_.m) throw ArgumentError("k must lie in [1, m]");
  auto ranked = ranked_subset(claim);
  if (ranked.size() > k_out) ranked.resize(k_out);
  return ranked;
}

std::vector<ScoredDocument> RetrievalPipeline::retrieve(std::string_view claim) const {
  return retrieve(claim, config_.k_out);
}

// ---------------------------------------------------------------------------
// Metrics

double ndcg_at_k(std::optional<std::size_t> rank, std::size_t k) {
  if (k < 1) throw ArgumentError("k must be >= 1");
  if (!rank) return 0.0;
  if (*rank < 1) throw ArgumentError("rank is 1-based");
  if (*rank > k) return 0.0;
  return 1.0 / std::log2(static_cast<double>(*rank) + 1.0);
}

double recall_at_k(std::optional<std::size_t> rank, std::size_t k) {
  if (k < 1) throw ArgumentError("k must be >= 1");
  if (!rank) return 0.0;
  if (*rank < 1) throw ArgumentError("rank is 1-based");
  return *rank <= k ? 1.0 : 0.0;
}

double ndcg_at_k(std::span<const std::string> ranked, const std::unordered_set<std::string>& gold,
                 std::size_t k) {
  if (k < 1) throw ArgumentError("k must be >= 1");
  if (gold.empty()) return 0.0;
  double dcg = 0.0;
  for (std::size_t i = 0; i < std::min(k, ranked.size()); ++i) {
    if (gold.contains(ranked[i])) dcg += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  }
  double ideal = 0.0;
  for (std::size_t i = 0; i < std::min(k, gold.size()); ++i) {
    ideal += 1.0 / std::log2(static_cast<double>(i) + 2.0);
  }
  return dcg / ideal;
}

namespace {

struct MetricSpec {
  const char* name;
  bool ndcg;
  std::size_t k;
};

constexpr MetricSpec kMetrics[] = {{"n@1", true, 1},  {"n@3", true, 3}, {"r@3", false, 3},
                                   {"n@5", true, 5},  {"r@5", false, 5}, {"n@10", true, 10}};

}  // namespace

RankingReport evaluate_rankings(std::span<const EvalExample> examples, const Ranker& ranker,
                                const std::function<bool(const std::string&)>& known,
                                unsigned threads) {
  if (examples.empty()) throw ArgumentError("evaluation set is empty");

  const std::size_t n = examples.size();
  std::vector<std::optional<std::size_t>> ranks(n);
  std::vector<char> usable(n, 0);
  std::vector<std::exception_ptr> errors(n);

  auto work = [&](std::size_t i) {
    try {
      if (!known(examples[i].gold_doc_id)) return;
      usable[i] = 1;
      const auto ranked = ranker(examples[i].claim);
      auto it = std::find(ranked.begin(), ranked.end(), examples[i].gold_doc_id);
      if (it != ranked.end()) ranks[i] = static_cast<std::size_t>(it - ranked.begin()) + 1;
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };

  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) work(i);
  } else {
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) {
      pool.emplace_back([&, t] {
        for (std::size_t i = t; i < n; i += threads) work(i);
      });
    }
    for (auto& th : pool) th.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  RankingReport report;
  for (const auto& spec : kMetrics) report.metrics[spec.name] = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!usable[i]) {
      report.excluded.push_back(examples[i].gold_doc_id);
      continue;
    }
    ++report.evaluated;
    report.ranks.push_back(ranks[i]);
    for (const auto& spec : kMetrics) {
      report.metrics[spec.name] +=
          spec.ndcg ? ndcg_at_k(ranks[i], spec.k) : recall_at_k(ranks[i], spec.k);
    }
  }
  if (report.evaluated > 0) {
    for (auto& [_, v] : report.metrics) v /= static_cast<double>(report.evaluated);
  }
  return report;
}

namespace {

std::vector<std::string> ids_of(const std::vector<ScoredDocument>& docs) {
  std::vector<std::string> ids;
  ids.reserve(docs.size());
  for (const auto& d : docs) ids.push_back(d.doc_id);
  return ids;
}

}  // namespace

RankingReport evaluate(const RetrievalPipeline& pipeline, std::span<const EvalExample> examples,
                       unsigned threads) {
  return evaluate_rankings(
      examples, [&](std::string_view claim) { return ids_of(pipeline.ranked_subset(claim)); },
      [&](const std::string& id) {
        return pipeline.index().find_doc(id).has_value() &&
               pipeline.documents().lookup(id).has_value();
      },
      threads);
}

RankingReport evaluate_lexical(const InvertedIndex& index, std::span<const EvalExample> examples,
                               std::size_t m, const Bm25Params& bm25, unsigned threads) {
  return evaluate_rankings(
      examples,
      [&](std::string_view claim) { return ids_of(retrieve_top_m(index, claim, m, bm25)); },
      [&](const std::string& id) { return index.find_doc(id).has_value(); }, threads);
}

std::string report_json(const RankingReport& report, bool with_ranks) {
  nlohmann::json j;
  j["metrics"] = report.metrics;
  j["evaluated"] = report.evaluated;
  j["excluded"] = report.excluded;
  if (with_ranks) {
    auto ranks = nlohmann::json::array();
    for (const auto& r : report.ranks) ranks.push_back(r ? nlohmann::json(*r) : nlohmann::json());
    j["ranks"] = std::move(ranks);
  }
  return j.dump(2);
}

std::string report_table(const std::vector<std::pair<std::string, RankingReport>>& rows) {
  std::size_t width = 6;
  for (const auto& [name, _] : rows) width = std::max(width, name.size());
  std::string out;
  auto pad = [](std::string s, std::size_t w) {
    s.resize(std::max(w, s.size()), ' ');
    return s;
  };
  out += pad("", width);
  for (auto col : kReportColumns) {
    std::string h(col);
    h[0] = static_cast<char>(std::toupper(h[0]));
    out += "  " + pad(h, 5);
  }
  out += '\n';
  for (const auto& [name, report] : rows) {
    out += pad(name, width);
    for (auto col : kReportColumns) {
      char buf[16];
      std::snprintf(buf, sizeof(buf), "%.3f", report.metrics.at(std::string(col)));
      out += "  " + pad(buf, 5);
    }
    out += '\n';
  }
  return out;
}

std::vector<EvalExample> load_eval_set(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  std::vector<EvalExample> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      out.push_back({j.at("claim").get<std::string>(), j.at("gold_doc_id").get<std::string>()});
    } catch (const nlohmann::json::exception& e) {
      throw DataError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace evidentia
