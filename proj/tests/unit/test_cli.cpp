#include <sys/wait.h>

#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "evidentia/engine.hpp"
#include "synthetic.hpp"
#include "temp_dir.hpp"

using namespace evidentia;
using namespace evidentia::testing;
using nlohmann::json;

namespace {

struct Run {
  int code = -1;
  std::string out;
};

std::string quote(const std::string& s) {
  std::string q = "'";
  for (char c : s) q += c == '\'' ? std::string("'\\''") : std::string(1, c);
  return q + "'";
}

/// Runs the CLI with `args`; stderr is discarded.
Run cli(const std::vector<std::string>& args) {
  std::string cmd = quote(EVIDENTIA_CLI);
  for (const auto& a : args) cmd += " " + quote(a);
  cmd += " 2>/dev/null";
  Run r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe);
  char buf[4096];
  for (std::size_t n; (n = fread(buf, 1, sizeof(buf), pipe)) > 0;) r.out.append(buf, n);
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

void write_feedback(const std::filesystem::path& path, std::uint64_t seed) {
  std::ofstream out(path);
  for (Aspect a : kAspects) {
    for (const auto& ex : make_feedback_set({.examples = 120, .signal = 1.0, .aspect = a}, seed)) {
      out << json{{"claim", ex.claim}, {"evidence", ex.evidence}, {"response", ex.response},
                  {"label", ex.label}, {"aspect", to_string(a)}}.dump() << "\n";
    }
  }
}

/// A fresh artifact directory built through the CLI itself.
struct Workspace {
  TempDir dir;
  std::filesystem::path art;
  Corpus corpus;

  Workspace() : art(dir / "artifacts") {
    corpus = make_random_corpus(150, 200, 3);
    std::ofstream out(dir / "docs.jsonl");
    write_jsonl(corpus, out);
    out << "{\"id\": \"\", \"title\": \"broken\"}\n";
    out.close();
    const auto ingest = cli({"ingest", "--artifacts", art.string(), "--input", (dir / "docs.jsonl").string()});
    REQUIRE(ingest.code == 0);
    const auto j = json::parse(ingest.out);
    CHECK(j["retained"] == 150);
    CHECK(j["invalid"] == 1);
    CHECK(j["stored"] == 150);
    REQUIRE(cli({"index", "--artifacts", art.string()}).code == 0);
  }

  std::vector<std::string> with(std::vector<std::string> args) const {
    args.push_back("--artifacts");
    args.push_back(art.string());
    return args;
  }
};

}  // namespace

TEST_CASE("search prints the same evidence as the engine") {
  Workspace ws;
  const auto claim = make_random_query(200, 4);
  const auto r = cli(ws.with({"search", "--claim", claim, "--k", "3"}));
  REQUIRE(r.code == 0);
  EngineConfig cfg;
  cfg.artifact_dir = ws.art;
  const auto engine = Engine::load(cfg);
  const auto j = json::parse(r.out);
  CHECK(j["claim"] == claim);
  CHECK(j["evidence"] == json::parse(to_json(engine.retrieve(claim, 3)).dump()));
  const auto lexical = json::parse(cli(ws.with({"search", "--claim", claim, "--lexical"})).out);
  CHECK(lexical["evidence"].size() == 5);
  CHECK(lexical["evidence"][0]["stage"] == "lexical");
}

TEST_CASE("overrides change the configuration") {
  Workspace ws;
  const auto claim = make_random_query(200, 5);
  const auto r = cli(ws.with({"search", "--claim", claim, "--set", "retrieval.k_out=2"}));
  REQUIRE(r.code == 0);
  CHECK(json::parse(r.out)["evidence"].size() == 2);
  std::ofstream(ws.dir / "c.toml") << "[retrieval]\nk_out = 4\n";
  const auto f = cli(ws.with({"search", "--claim", claim, "--config", (ws.dir / "c.toml").string()}));
  CHECK(json::parse(f.out)["evidence"].size() == 4);
}

TEST_CASE("reward training then respond") {
  Workspace ws;
  write_feedback(ws.dir / "fb.jsonl", 6);
  const auto t = cli(ws.with({"train-reward", "--feedback", (ws.dir / "fb.jsonl").string()}));
  REQUIRE(t.code == 0);
  const auto metrics = json::parse(t.out);
  for (Aspect a : kAspects) CHECK(metrics[std::string(to_string(a))]["BA"].get<double>() >= 0.9);

  const auto r = cli(ws.with({"respond", "--claim", "wka wkalo", "--set", "backend.stub_text=no evidence"}));
  REQUIRE(r.code == 0);
  const auto j = json::parse(r.out);
  CHECK(j["response"] == "no evidence");
  CHECK(j["evidence"].size() == 5);
  const auto& rw = j["reward"];
  CHECK(std::abs(rw["total"].get<double>() -
                 (rw["refutation"].get<double>() + rw["factuality"].get<double>() +
                  rw["politeness"].get<double>() +
                  0.5 * (rw["claim_relevance"].get<double>() + rw["evidence_relevance"].get<double>()))) < 1e-9);
}

TEST_CASE("retriever training and evaluation") {
  Workspace ws;
  {
    std::ofstream train(ws.dir / "train.jsonl");
    for (std::size_t i = 0; i < 20; ++i) {
      train << json{{"claim", ws.corpus[i].title}, {"gold_doc_id", ws.corpus[i].doc_id}}.dump() << "\n";
    }
  }
  const auto t = cli(ws.with({"train-retriever", "--train", (ws.dir / "train.jsonl").string(),
                              "--eval", (ws.dir / "train.jsonl").string(), "--epochs", "2"}));
  REQUIRE(t.code == 0);
  CHECK(json::parse(t.out)["epoch_loss"].size() == 2);
  CHECK(std::filesystem::exists(ws.art / "scorer.bin"));
  const auto e = cli(ws.with({"eval-retrieval", "--eval", (ws.dir / "train.jsonl").string(), "--json"}));
  REQUIRE(e.code == 0);
  const auto j = json::parse(e.out);
  CHECK(j["bm25"]["evaluated"] == 20);
  CHECK(j["reranked"]["metrics"].contains("n@10"));
  const auto table = cli(ws.with({"eval-retrieval", "--eval", (ws.dir / "train.jsonl").string()}));
  CHECK(table.out.find("Reranked") != std::string::npos);
}

TEST_CASE("template sft and alignment") {
  Workspace ws;
  std::ofstream(ws.dir / "templates.json") << R"({"prompts": ["claim a", "claim b"],
      "templates": [{"text": "weak reply", "reward": 0.0}, {"text": "strong reply", "reward": 1.0}]})";
  std::ofstream(ws.dir / "demos.jsonl") << R"({"claim": "claim a", "response": "weak reply"})" "\n"
                                        << R"({"claim": "claim b", "response": "T01"})" "\n";
  const auto s = cli(ws.with({"sft", "--demos", (ws.dir / "demos.jsonl").string(), "--templates",
                              (ws.dir / "templates.json").string(), "--epochs", "2"}));
  REQUIRE(s.code == 0);
  CHECK(json::parse(s.out)["vocabulary"] == 2);
  const auto a = cli(ws.with({"align", "--iterations", "30", "--lr", "0.05", "--seed", "2"}));
  REQUIRE(a.code == 0);
  const auto j = json::parse(a.out);
  CHECK(j["optimum"] == 1.0);
  CHECK(j["expected_reward"].get<double>() > 0.5);
  CHECK(std::filesystem::exists(ws.art / "policy_actor.bin"));
  std::ifstream curve(ws.art / "align_curve.csv");
  std::string header;
  std::getline(curve, header);
  CHECK(header == "iteration,mean_reward,mean_kl,clip_fraction");
}

TEST_CASE("exit codes separate usage, data and backend failures") {
  CHECK(cli({}).code == 1);
  CHECK(cli({"search"}).code == 1);
  CHECK(cli({"search", "--claim", "x", "--bogus"}).code == 1);
  CHECK(cli({"ingest", "--input", "/nonexistent.jsonl"}).code == 1);

  Workspace ws;
  CHECK(cli(ws.with({"search", "--claim", "x", "--set", "retrieval.nope=1"})).code == 2);
  CHECK(cli(ws.with({"search", "--claim", "x", "--k", "0"})).code == 1);
  // No classifiers yet.
  CHECK(cli(ws.with({"respond", "--claim", "x"})).code == 2);
  TempDir empty;
  CHECK(cli({"search", "--claim", "x", "--artifacts", empty.path().string()}).code == 2);

  write_feedback(ws.dir / "fb.jsonl", 7);
  REQUIRE(cli(ws.with({"train-reward", "--feedback", (ws.dir / "fb.jsonl").string()})).code == 0);
  const auto r = cli(ws.with({"respond", "--claim", "wka", "--backend", "http", "--set",
                              "backend.url=http://127.0.0.1:1/gen", "--set", "backend.retries=0"}));
  CHECK(r.code == 3);
  const auto j = json::parse(r.out);
  CHECK(j["error"]["code"] == "backend_error");
  CHECK(j["evidence"].size() == 5);
}
