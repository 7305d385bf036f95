#include <csignal>
#include <filesystem>
#include <iostream>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "evidentia/engine.hpp"
#include "evidentia/server.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using namespace evidentia;
using nlohmann::ordered_json;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kBackend = 3 };

/// Options every subcommand accepts. Flag overrides are collected as
/// "section.key=value" strings and applied over the TOML file.
struct Common {
  std::string config_path;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* sub, Common& common) {
  sub->add_option("--config", common.config_path, "TOML configuration file")
      ->check(CLI::ExistingFile);
  sub->add_option_function<std::uint64_t>(
      "--seed", [&](const std::uint64_t& v) { common.overrides.push_back("seed=" + std::to_string(v)); },
      "Random seed for every seeded step");
  sub->add_option_function<unsigned>(
      "--threads", [&](const unsigned& v) { common.overrides.push_back("threads=" + std::to_string(v)); },
      "Worker threads (0 = hardware concurrency)");
  sub->add_option_function<std::string>(
      "--artifacts",
      [&](const std::string& v) { common.overrides.push_back("artifacts.dir=" + nlohmann::json(v).dump()); },
      "Artifact directory");
  sub->add_option_function<std::vector<std::string>>(
      "--set",
      [&](const std::vector<std::string>& v) {
        common.overrides.insert(common.overrides.end(), v.begin(), v.end());
      },
      "Config override section.key=value (repeatable)");
}

/// A named flag that becomes the override `key=value`.
void add_override(CLI::App* sub, Common& common, const std::string& flag, const std::string& key,
                  const std::string& help) {
  sub->add_option_function<std::string>(
      flag, [&common, key](const std::string& v) { common.overrides.push_back(key + "=" + v); }, help);
}

EngineConfig resolve(const Common& common) {
  if (common.config_path.empty()) return parse_config("", common.overrides);
  return load_config(common.config_path, common.overrides);
}

void print(const ordered_json& j) { std::cout << j.dump(2) << '\n'; }

RecordStore open_store(const ArtifactPaths& paths) { return RecordStore::open(paths.corpus_base()); }

DenseScorer load_scorer(const EngineConfig& config, const ArtifactPaths& paths) {
  if (fs::exists(paths.scorer())) return DenseScorer::load(paths.scorer());
  return DenseScorer(config.embedding);
}

ordered_json report_to_json(const RankingReport& report) {
  return ordered_json::parse(report_json(report, false));
}

std::array<std::shared_ptr<const FeedbackClassifier>, 3> load_classifiers(const ArtifactPaths& paths) {
  std::array<std::shared_ptr<const FeedbackClassifier>, 3> out;
  for (Aspect a : kAspects) {
    const auto p = paths.classifier(a);
    if (!fs::exists(p)) {
      throw DataError("missing " + p.string() + " (run train-reward for " + std::string(to_string(a)) + ")");
    }
    out[static_cast<std::size_t>(a)] = std::make_shared<const FeedbackClassifier>(FeedbackClassifier::load(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Subcommands

int cmd_ingest(const EngineConfig& config, const std::string& input, std::int64_t ingest_time) {
  ArtifactLock lock(config.artifact_dir);
  const ArtifactPaths paths{config.artifact_dir};
  auto result = ingest_file(input, IngestOptions{ingest_time});
  RecordStore::append(paths.corpus_base(), result.corpus);
  ordered_json j;
  j["total"] = result.report.total;
  j["retained"] = result.report.retained;
  j["invalid"] = result.report.invalid;
  j["duplicate"] = result.report.duplicate;
  j["stored"] = open_store(paths).size();
  print(j);
  return kOk;
}

int cmd_index(const EngineConfig& config) {
  ArtifactLock lock(config.artifact_dir);
  const ArtifactPaths paths{config.artifact_dir};
  const auto corpus = open_store(paths).load_all();
  const auto index = InvertedIndex::build(corpus, TokenizerOptions{}, config.threads);
  index.save(paths.index());
  ordered_json j;
  j["documents"] = index.doc_count();
  j["terms"] = index.vocabulary_size();
  j["avg_doc_length"] = index.avg_doc_length();
  print(j);
  return kOk;
}

int cmd_search(const EngineConfig& config, const std::string& claim, std::optional<std::size_t> k,
               bool lexical) {
  const auto engine = Engine::load(config, std::make_shared<StubBackend>(""));
  const std::size_t n = k.value_or(config.pipeline.k_out);
  if (n == 0) throw ArgumentError("k must be > 0");
  ordered_json j;
  j["claim"] = claim;
  if (lexical) {
    auto stage = engine.pipeline().lexical_stage(claim);
    if (stage.size() > n) stage.resize(n);
    std::vector<RetrievedEvidence> evidence;
    for (auto& s : stage) {
      auto doc = engine.pipeline().document(s.doc_id);
      evidence.push_back({std::move(s), std::move(doc)});
    }
    j["evidence"] = to_json(evidence);
  } else {
    j["evidence"] = to_json(engine.retrieve(claim, n));
  }
  print(j);
  return kOk;
}

int cmd_train_retriever(const EngineConfig& config, const std::string& train,
                        const std::string& eval) {
  ArtifactLock lock(config.artifact_dir);
  const ArtifactPaths paths{config.artifact_dir};
  const auto store = open_store(paths);
  const auto index = InvertedIndex::load(paths.index());
  const auto dataset = load_eval_set(train);
  std::vector<EvalExample> eval_set;
  if (!eval.empty()) eval_set = load_eval_set(eval);

  std::function<double(const DenseScorer&)> validate;
  if (!eval_set.empty()) {
    validate = [&](const DenseScorer& scorer) {
      RetrievalPipeline pipeline(index, scorer, store, config.pipeline);
      return evaluate(pipeline, eval_set, config.threads)["n@1"];
    };
  }
  DenseScorer scorer(config.embedding);
  const auto trace = train_retriever(scorer, dataset, index, store, config.retriever, validate);
  scorer.save(paths.scorer());

  ordered_json j;
  j["epoch_loss"] = trace.epoch_loss;
  if (!trace.validation.empty()) {
    j["validation_n@1"] = trace.validation;
    j["best_epoch"] = trace.best_epoch;
  }
  j["steps"] = trace.steps;
  print(j);
  return kOk;
}

int cmd_eval_retrieval(const EngineConfig& config, const std::string& eval, bool as_json) {
  const ArtifactPaths paths{config.artifact_dir};
  const auto store = open_store(paths);
  const auto index = InvertedIndex::load(paths.index());
  const auto scorer = load_scorer(config, paths);
  const auto examples = load_eval_set(eval);
  RetrievalPipeline pipeline(index, scorer, store, config.pipeline);
  const auto lexical =
      evaluate_lexical(index, examples, config.pipeline.m, config.pipeline.bm25, config.threads);
  const auto reranked = evaluate(pipeline, examples, config.threads);
  if (as_json) {
    ordered_json j;
    j["bm25"] = report_to_json(lexical);
    j["reranked"] = report_to_json(reranked);
    print(j);
  } else {
    std::cout << report_table({{"BM25", lexical}, {"Reranked", reranked}});
    if (!reranked.excluded.empty()) {
      std::cerr << reranked.excluded.size() << " examples excluded (gold id not in corpus)\n";
    }
  }
  return kOk;
}

int cmd_train_reward(const EngineConfig& config, const std::string& feedback,
                     const std::string& aspect_name) {
  ArtifactLock lock(config.artifact_dir);
  const ArtifactPaths paths{config.artifact_dir};
  const auto examples = load_feedback(feedback);
  std::vector<Aspect> aspects;
  if (aspect_name.empty()) {
    aspects.assign(std::begin(kAspects), std::end(kAspects));
  } else {
    aspects.push_back(parse_aspect(aspect_name));
  }
  ordered_json j;
  for (Aspect a : aspects) {
    const auto n = std::count_if(examples.begin(), examples.end(),
                                 [a](const FeedbackExample& e) { return e.aspect == a; });
    if (n == 0) {
      if (!aspect_name.empty()) throw DataError("no feedback for aspect " + aspect_name);
      continue;
    }
    auto trained = train_classifier(examples, a, config.classifier);
    trained.classifier.save(paths.classifier(a));
    j[std::string(to_string(a))] = ordered_json::parse(metrics_json(trained.metrics));
  }
  if (j.empty()) throw DataError("no feedback examples in " + feedback);
  print(j);
  return kOk;
}

int cmd_sft(const EngineConfig& config, const std::string& demos_path,
            const std::string& templates_path) {
  ArtifactLock lock(config.artifact_dir);
  const ArtifactPaths paths{config.artifact_dir};
  auto demos = load_demonstrations(demos_path);
  std::optional<Policy> policy;
  if (!templates_path.empty()) {
    const auto env = TemplateEnvironment::load_json(templates_path);
    policy.emplace(env.make_policy(config.policy.context_dim));
    // Responses may name a template by its text or by its token.
    std::map<std::string, std::string> by_text;
    for (std::size_t i = 0; i < env.candidates().size(); ++i) {
      by_text.emplace(env.candidates()[i].text, TemplateEnvironment::token_name(i));
    }
    for (auto& d : demos) {
      if (auto it = by_text.find(d.response); it != by_text.end()) d.response = it->second;
    }
    if (fs::absolute(templates_path) != fs::absolute(paths.templates())) {
      fs::copy_file(templates_path, paths.templates(), fs::copy_options::overwrite_existing);
    }
  } else {
    std::set<std::string> tokens;
    for (const auto& d : demos) {
      std::istringstream words(d.response);
      for (std::string w; words >> w;) tokens.insert(w);
    }
    if (config.policy.eos_token) tokens.insert(*config.policy.eos_token);
    policy.emplace(Vocabulary({tokens.begin(), tokens.end()}), config.policy);
    fs::remove(paths.templates());
  }
  const auto trace = supervised_finetune(*policy, demos, config.sft);
  policy->save(paths.reference_policy());
  // An aligned policy trained from an older reference is stale.
  fs::remove(paths.actor_policy());

  ordered_json j;
  j["vocabulary"] = policy->vocab_size();
  j["epoch_loss"] = trace.epoch_loss;
  j["steps"] = trace.steps;
  print(j);
  return kOk;
}

int cmd_align(const EngineConfig& config, const std::string& prompts_path) {
  ArtifactLock lock(config.artifact_dir);
  const ArtifactPaths paths{config.artifact_dir};
  const auto reference = Policy::load(paths.reference_policy());

  std::optional<TemplateEnvironment> env;
  if (fs::exists(paths.templates())) env.emplace(TemplateEnvironment::load_json(paths.templates()));
  std::vector<PromptContext> prompts;
  if (!prompts_path.empty()) {
    prompts = load_prompts(prompts_path);
  } else if (env) {
    prompts = env->prompts();
  } else {
    throw ArgumentError("align needs --prompts (no templates.json in the artifact directory)");
  }
  if (prompts.empty()) throw DataError("no prompts to align on");

  // The learned reward; only required when some response lacks a tabled one.
  std::array<std::shared_ptr<const FeedbackClassifier>, 3> classifiers;
  std::optional<DenseScorer> scorer;
  std::optional<RewardModel> model;
  const bool all_tabled =
      env && std::all_of(env->candidates().begin(), env->candidates().end(),
                         [](const auto& c) { return c.reward.has_value(); });
  if (!all_tabled) {
    classifiers = load_classifiers(paths);
    scorer.emplace(load_scorer(config, paths));
    model.emplace(*classifiers[0], *classifiers[1], *classifiers[2], *scorer, config.reward);
  }
  RewardFn learned;
  if (model) {
    learned = [&](const PromptContext& p, std::string_view response) {
      return (*model)(p.claim, p.evidence, response).total;
    };
  }
  const RewardFn reward = env ? env->reward_fn(learned) : learned;

  const auto result = align(reference, prompts, reward, config.ppo);
  result.actor.save(paths.actor_policy());
  {
    std::ofstream out(paths.align_curve());
    out << curve_csv(result.curve);
  }
  ordered_json j;
  j["iterations"] = result.curve.size();
  if (!result.curve.empty()) {
    const auto& last = result.curve.back();
    j["final_mean_reward"] = last.mean_reward;
    j["final_mean_kl"] = last.mean_kl;
    j["final_beta"] = last.beta;
  }
  if (all_tabled) {
    j["expected_reward"] = env->expected_reward(result.actor);
    j["optimum"] = env->optimum();
    j["expected_kl"] = env->expected_kl(result.actor, reference);
  }
  j["curve"] = paths.align_curve().string();
  print(j);
  return kOk;
}

int cmd_respond(const EngineConfig& config, const std::string& claim) {
  const auto engine = Engine::load(config);
  try {
    print(to_json(engine.respond(claim)));
  } catch (const ResponseError& e) {
    ordered_json j = ordered_json::parse(error_body("backend_error", e.what()));
    j["evidence"] = to_json(e.evidence());
    print(j);
    throw;
  }
  return kOk;
}

int cmd_serve(const EngineConfig& config) {
  auto engine = std::make_shared<const Engine>(Engine::load(config));
  sigset_t signals;
  sigemptyset(&signals);
  sigaddset(&signals, SIGINT);
  sigaddset(&signals, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &signals, nullptr);

  Server server(engine, config.server);
  const int port = server.start();
  std::cerr << "listening on " << config.server.host << ":" << port << std::endl;
  int sig = 0;
  sigwait(&signals, &sig);
  server.stop();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Evidence retrieval, reward scoring and policy alignment for claim responses"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(kEngineVersion));
  Common common;
  std::function<int(const EngineConfig&)> run;

  {
    auto* sub = app.add_subcommand("ingest", "Validate and append JSON-lines documents to the store");
    add_common(sub, common);
    static std::string input;
    static std::int64_t ingest_time = 0;
    sub->add_option("--input", input, "JSON lines {id, title, abstract, source}")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--ingest-time", ingest_time, "Unix time stamped on records without one");
    sub->callback([&] { run = [](const EngineConfig& c) { return cmd_ingest(c, input, ingest_time); }; });
  }
  {
    auto* sub = app.add_subcommand("index", "Build the BM25 index over the stored corpus");
    add_common(sub, common);
    sub->callback([&] { run = cmd_index; });
  }
  {
    auto* sub = app.add_subcommand("search", "Retrieve evidence for a claim");
    add_common(sub, common);
    static std::string claim;
    static std::optional<std::size_t> k;
    static bool lexical = false;
    sub->add_option("--claim", claim, "Claim text")->required();
    sub->add_option("--k", k, "Documents to return (default retrieval.k_out)");
    add_override(sub, common, "--m", "retrieval.m", "Stage-1 subset size");
    sub->add_flag("--lexical", lexical, "BM25 stage only");
    sub->callback([&] { run = [](const EngineConfig& c) { return cmd_search(c, claim, k, lexical); }; });
  }
  {
    auto* sub = app.add_subcommand("train-retriever", "Train the dense reranker");
    add_common(sub, common);
    static std::string train, eval;
    sub->add_option("--train", train, "JSON lines {claim, gold_doc_id}")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--eval", eval, "Validation set; keeps the best epoch by N@1")
        ->check(CLI::ExistingFile);
    add_override(sub, common, "--epochs", "retriever_training.epochs", "Training epochs");
    add_override(sub, common, "--lr", "retriever_training.learning_rate", "Peak learning rate");
    add_override(sub, common, "--tau", "retriever_training.tau", "Hinge margin");
    add_override(sub, common, "--lambda", "retriever_training.lambda", "Contrastive weight");
    sub->callback(
        [&] { run = [](const EngineConfig& c) { return cmd_train_retriever(c, train, eval); }; });
  }
  {
    auto* sub = app.add_subcommand("eval-retrieval", "Report ranking metrics on an eval set");
    add_common(sub, common);
    static std::string eval;
    static bool as_json = false;
    sub->add_option("--eval", eval, "JSON lines {claim, gold_doc_id}")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_flag("--json", as_json, "Print JSON instead of a table");
    add_override(sub, common, "--m", "retrieval.m", "Stage-1 subset size");
    sub->callback(
        [&] { run = [](const EngineConfig& c) { return cmd_eval_retrieval(c, eval, as_json); }; });
  }
  {
    auto* sub = app.add_subcommand("train-reward", "Train the per-aspect feedback classifiers");
    add_common(sub, common);
    static std::string feedback, aspect;
    sub->add_option("--feedback", feedback,
                    "JSON lines {claim, evidence, response, label, aspect}")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--aspect", aspect, "Train only this aspect");
    sub->add_flag_function(
        "--unweighted",
        [&](std::int64_t) { common.overrides.push_back("classifier.class_balanced=false"); },
        "Plain cross entropy instead of class-balanced");
    sub->callback(
        [&] { run = [](const EngineConfig& c) { return cmd_train_reward(c, feedback, aspect); }; });
  }
  {
    auto* sub = app.add_subcommand("sft", "Fit the reference policy to demonstrations");
    add_common(sub, common);
    static std::string demos, templates;
    sub->add_option("--demos", demos, "JSON lines {claim, evidence, response}")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--templates", templates, "Template set; responses then name templates")
        ->check(CLI::ExistingFile);
    add_override(sub, common, "--epochs", "sft.epochs", "Training epochs");
    add_override(sub, common, "--lr", "sft.learning_rate", "Learning rate");
    sub->callback([&] { run = [](const EngineConfig& c) { return cmd_sft(c, demos, templates); }; });
  }
  {
    auto* sub = app.add_subcommand("align", "PPO alignment of the reference policy");
    add_common(sub, common);
    static std::string prompts;
    sub->add_option("--prompts", prompts, "JSON lines {claim, evidence}")->check(CLI::ExistingFile);
    add_override(sub, common, "--beta", "ppo.beta", "KL coefficient");
    add_override(sub, common, "--iterations", "ppo.iterations", "Rollout/update rounds");
    add_override(sub, common, "--lr", "ppo.learning_rate", "Learning rate");
    add_override(sub, common, "--alpha", "reward.alpha", "Relevance weight in the reward");
    sub->callback([&] { run = [](const EngineConfig& c) { return cmd_align(c, prompts); }; });
  }
  {
    auto* sub = app.add_subcommand("respond", "Retrieve, generate and score a response to a claim");
    add_common(sub, common);
    static std::string claim;
    sub->add_option("--claim", claim, "Claim text")->required();
    add_override(sub, common, "--backend", "backend.kind", "stub, http or policy");
    add_override(sub, common, "--alpha", "reward.alpha", "Relevance weight in the reward");
    sub->callback([&] { run = [](const EngineConfig& c) { return cmd_respond(c, claim); }; });
  }
  {
    auto* sub = app.add_subcommand("serve", "Serve /respond, /retrieve and /health over HTTP");
    add_common(sub, common);
    add_override(sub, common, "--host", "server.host", "Bind address");
    add_override(sub, common, "--port", "server.port", "Port (0 picks a free one)");
    add_override(sub, common, "--backend", "backend.kind", "stub, http or policy");
    sub->callback([&] { run = cmd_serve; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  try {
    return run(resolve(common));
  } catch (const ArgumentError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kUsage;
  } catch (const BackendError& e) {
    std::cerr << "backend error: " << e.what() << '\n';
    return kBackend;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kData;
  }
}
