#include <algorithm>
#include <fstream>
#include <random>

#include "doctest.h"
#include "evidentia/error.hpp"
#include "evidentia/pipeline.hpp"
#include "json.hpp"
#include "oracles.hpp"
#include "synthetic.hpp"
#include "temp_dir.hpp"

using namespace evidentia;
using namespace evidentia::testing;

TEST_CASE("single-gold metrics match the closed forms") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 1000; ++trial) {
    std::optional<std::size_t> rank;
    if (rng() % 5) rank = 1 + rng() % 25;
    for (std::size_t k : {1, 3, 5, 10, 20}) {
      CHECK(std::abs(ndcg_at_k(rank, k) - ndcg_formula(rank, k)) <= 1e-12);
      CHECK(recall_at_k(rank, k) == recall_formula(rank, k));
    }
    CHECK(ndcg_at_k(rank, 1) == recall_at_k(rank, 1));
  }
}

TEST_CASE("metric edge cases") {
  CHECK(ndcg_at_k(std::size_t{1}, 1) == 1.0);
  CHECK(ndcg_at_k(std::size_t{2}, 3) == doctest::Approx(1.0 / std::log2(3.0)));
  CHECK(ndcg_at_k(std::nullopt, 5) == 0.0);
  CHECK(recall_at_k(std::size_t{6}, 5) == 0.0);
  CHECK_THROWS_AS(ndcg_at_k(std::size_t{0}, 5), ArgumentError);
  CHECK_THROWS_AS(recall_at_k(std::size_t{1}, 0), ArgumentError);
}

TEST_CASE("multi-gold NDCG matches the definition") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 300; ++trial) {
    std::vector<std::string> ranked;
    for (int i = 0; i < 12; ++i) ranked.push_back("d" + std::to_string(i));
    std::shuffle(ranked.begin(), ranked.end(), rng);
    std::set<std::string> gold;
    std::unordered_set<std::string> gold_u;
    const auto g = 1 + rng() % 4;
    for (std::size_t i = 0; i < g; ++i) {
      const auto id = "d" + std::to_string(rng() % 15);
      gold.insert(id);
      gold_u.insert(id);
    }
    for (std::size_t k : {1, 3, 5, 10}) {
      CHECK(std::abs(ndcg_at_k(ranked, gold_u, k) - ndcg_formula(ranked, gold, k)) <= 1e-12);
    }
  }
}

TEST_CASE("reranking touches exactly the lexical top-m") {
  for (std::uint64_t seed = 1; seed <= 4; ++seed) {
    const auto corpus = make_random_corpus(250, 200, seed);
    const auto index = InvertedIndex::build(corpus);
    std::mt19937_64 rng(seed);
    const auto scorer = make_random_scorer(rng, 64, 0.05, 0.5);
    const PipelineConfig cfg{.m = 15, .k_out = 5};
    RetrievalPipeline pipeline(index, scorer, corpus, cfg);
    for (std::uint64_t q = 0; q < 15; ++q) {
      const auto claim = make_random_query(200, seed * 77 + q);
      // Oracle: brute-force BM25 top-m, then dense scores sorted independently.
      auto subset = brute_force_bm25(corpus, claim, cfg.m);
      std::vector<ScoredDocument> want;
      for (const auto& s : subset) {
        want.push_back({s.doc_id, scorer.relevance(claim, evidence_text(*corpus.find(s.doc_id))),
                        Stage::Dense});
      }
      std::sort(want.begin(), want.end(), [](const auto& a, const auto& b) {
        return a.score != b.score ? a.score > b.score : a.doc_id < b.doc_id;
      });
      const auto got = pipeline.ranked_subset(claim);
      REQUIRE(got.size() == want.size());
      for (std::size_t i = 0; i < got.size(); ++i) {
        CHECK(got[i].doc_id == want[i].doc_id);
        CHECK(got[i].score == doctest::Approx(want[i].score).epsilon(1e-12));
        CHECK(got[i].stage == Stage::Dense);
      }
      const auto top = pipeline.retrieve(claim);
      REQUIRE(top.size() == 5);
      CHECK(std::equal(top.begin(), top.end(), got.begin()));
    }
  }
}

TEST_CASE("retrieve validates k against m") {
  const auto corpus = make_random_corpus(40, 80, 1);
  const auto index = InvertedIndex::build(corpus);
  DenseScorer scorer;
  RetrievalPipeline pipeline(index, scorer, corpus, {.m = 10, .k_out = 3});
  CHECK(pipeline.retrieve("wka", 10).size() == 10);
  CHECK_THROWS_AS(pipeline.retrieve("wka", 11), ArgumentError);
  CHECK_THROWS_AS(pipeline.retrieve("wka", 0), ArgumentError);
  CHECK_THROWS_AS(RetrievalPipeline(index, scorer, corpus, {.m = 3, .k_out = 5}), ArgumentError);
}

TEST_CASE("a document missing from the store is a pipeline error") {
  const auto corpus = make_random_corpus(20, 50, 2);
  const auto index = InvertedIndex::build(corpus);
  const auto other = Corpus::from_documents({{"elsewhere", "t", "x", "", 0}});
  DenseScorer scorer;
  RetrievalPipeline pipeline(index, scorer, other, {.m = 5, .k_out = 2});
  CHECK_THROWS_AS(pipeline.document(corpus[0].doc_id), PipelineError);
}

TEST_CASE("evaluation averages per-example metrics and lists unknown gold ids") {
  const std::vector<EvalExample> examples = {{"a", "g1"}, {"b", "g2"}, {"c", "missing"}, {"d", "g4"}};
  const std::map<std::string, std::vector<std::string>> rankings = {
      {"a", {"g1", "x", "y"}}, {"b", {"x", "y", "g2"}}, {"d", {"x", "y", "z"}}};
  const auto report = evaluate_rankings(
      examples, [&](std::string_view c) { return rankings.at(std::string(c)); },
      [](const std::string& id) { return id != "missing"; }, 3);
  CHECK(report.evaluated == 3);
  CHECK(report.excluded == std::vector<std::string>{"missing"});
  CHECK(report["n@1"] == doctest::Approx(1.0 / 3));
  CHECK(report["r@3"] == doctest::Approx(2.0 / 3));
  CHECK(report["n@3"] == doctest::Approx((1.0 + 0.5) / 3));
  CHECK(report.ranks[2] == std::nullopt);
}

TEST_CASE("evaluation does not depend on the thread count") {
  const auto bench = make_planted_benchmark({.docs = 300, .topics = 15, .train_claims = 0, .eval_claims = 40}, 2);
  const auto index = InvertedIndex::build(bench.corpus);
  DenseScorer scorer;
  RetrievalPipeline pipeline(index, scorer, bench.corpus, {});
  const auto one = evaluate(pipeline, bench.eval, 1);
  const auto many = evaluate(pipeline, bench.eval, 6);
  CHECK(one.metrics == many.metrics);
  CHECK(one.ranks == many.ranks);
}

TEST_CASE("report json and table") {
  RankingReport r;
  r.metrics = {{"n@1", 0.5}, {"n@3", 0.6}, {"r@3", 0.7}, {"n@5", 0.8}, {"r@5", 0.9}, {"n@10", 1.0}};
  r.evaluated = 2;
  r.ranks = {1, std::nullopt};
  const auto j = nlohmann::json::parse(report_json(r));
  CHECK(j["metrics"]["n@1"] == 0.5);
  CHECK(j["ranks"][0] == 1);
  CHECK(j["ranks"][1].is_null());
  CHECK_FALSE(nlohmann::json::parse(report_json(r, false)).contains("ranks"));
  const auto table = report_table({{"BM25", r}});
  CHECK(table.find("N@1    N@3    R@3    N@5    R@5") != std::string::npos);
  CHECK(table.find("BM25    0.500  0.600  0.700  0.800  0.900") != std::string::npos);
}

TEST_CASE("eval sets load from JSON lines") {
  TempDir dir;
  std::ofstream(dir / "eval.jsonl") << R"({"claim": "c1", "gold_doc_id": "d1"})" "\n\n"
                                    << R"({"claim": "c2", "gold_doc_id": "d2"})" "\n";
  const auto set = load_eval_set(dir / "eval.jsonl");
  REQUIRE(set.size() == 2);
  CHECK(set[1].gold_doc_id == "d2");
  std::ofstream(dir / "bad.jsonl") << R"({"claim": "c1"})" "\n";
  CHECK_THROWS_AS(load_eval_set(dir / "bad.jsonl"), DataError);
}
