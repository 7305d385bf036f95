#include "evidentia/engine.hpp"

#include <fcntl.h>
#include <openssl/evp.h>
#include <sys/file.h>
#include <unistd.h>

#include <cerrno>
#include <algorithm>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>

#include "toml.hpp"

namespace evidentia {

// ---------------------------------------------------------------------------
// Config

namespace {

/// Reads known keys from one TOML table and rejects the rest.
class Section {
 public:
  Section(const toml::table* table, std::string name) : table_(table), name_(std::move(name)) {}

  template <typename T>
  void get(const char* key, T& out) {
    known_.insert(key);
    if (!table_) return;
    const toml::node* node = table_->get(key);
    if (!node) return;
    if constexpr (std::is_same_v<T, bool>) {
      auto v = node->value<bool>();
      if (!v) fail(key, "a boolean");
      out = *v;
    } else if constexpr (std::is_same_v<T, std::string>) {
      auto v = node->value<std::string>();
      if (!v) fail(key, "a string");
      out = *v;
    } else if constexpr (std::is_floating_point_v<T>) {
      auto v = node->value<double>();
      if (!v) fail(key, "a number");
      out = *v;
    } else {
      auto v = node->value<std::int64_t>();
      if (!v || *v < 0) fail(key, "a non-negative integer");
      out = static_cast<T>(*v);
    }
  }

  void get_ms(const char* key, std::chrono::milliseconds& out) {
    std::int64_t ms = out.count();
    get(key, ms);
    out = std::chrono::milliseconds(ms);
  }

  void finish() const {
    if (!table_) return;
    for (auto&& [k, _] : *table_) {
      if (!known_.contains(std::string(k.str()))) {
        throw DataError("unknown config key [" + name_ + "] " + std::string(k.str()));
      }
    }
  }

 private:
  [[noreturn]] void fail(const char* key, const char* what) const {
    throw DataError("config key [" + name_ + "] " + key + " must be " + what);
  }

  const toml::table* table_;
  std::string name_;
  std::set<std::string> known_;
};

EngineConfig apply(const toml::table& root) {
  EngineConfig c;
  static const std::set<std::string> sections = {
      "artifacts", "retrieval", "dense", "retriever_training", "reward", "classifier",
      "policy",    "sft",       "ppo",   "backend",            "server"};

  Section top(&root, "");
  top.get("seed", c.seed);
  top.get("threads", c.threads);
  for (auto&& [k, v] : root) {
    const std::string key(k.str());
    if (sections.contains(key)) {
      if (!v.is_table()) throw DataError("config section [" + key + "] must be a table");
    } else if (key != "seed" && key != "threads") {
      throw DataError("unknown config section or key: " + key);
    }
  }
  auto section = [&](const char* name) { return Section(root[name].as_table(), name); };

  {
    auto s = section("artifacts");
    std::string dir = c.artifact_dir.string();
    s.get("dir", dir);
    c.artifact_dir = dir;
    s.finish();
  }
  {
    auto s = section("retrieval");
    s.get("m", c.pipeline.m);
    s.get("k_out", c.pipeline.k_out);
    s.get("k1", c.pipeline.bm25.k1);
    s.get("b", c.pipeline.bm25.b);
    s.finish();
    c.retriever.bm25 = c.pipeline.bm25;
  }
  {
    auto s = section("dense");
    s.get("dim", c.embedding.dim);
    s.get("temperature", c.embedding.temperature);
    s.get("remove_stopwords", c.embedding.tokenizer.remove_stopwords);
    s.finish();
  }
  {
    auto s = section("retriever_training");
    std::string form = c.retriever.form == ContrastiveForm::Probability ? "probability"
                                                                        : "log_probability";
    s.get("tau", c.retriever.tau);
    s.get("lambda", c.retriever.lambda);
    s.get("contrastive_form", form);
    s.get("k", c.retriever.k);
    s.get("epochs", c.retriever.epochs);
    s.get("batch_size", c.retriever.batch_size);
    s.get("learning_rate", c.retriever.learning_rate);
    s.get("weight_decay", c.retriever.weight_decay);
    s.get("warmup_steps", c.retriever.warmup_steps);
    s.finish();
    if (form == "probability") {
      c.retriever.form = ContrastiveForm::Probability;
    } else if (form == "log_probability") {
      c.retriever.form = ContrastiveForm::LogProbability;
    } else {
      throw DataError("contrastive_form must be probability or log_probability");
    }
  }
  {
    auto s = section("reward");
    s.get("alpha", c.reward.alpha);
    s.get("raw_relevance", c.reward.raw_relevance);
    s.finish();
  }
  {
    auto s = section("classifier");
    s.get("feature_dim", c.classifier.features.dim);
    s.get("bigrams", c.classifier.features.bigrams);
    s.get("test_fraction", c.classifier.test_fraction);
    s.get("max_epochs", c.classifier.max_epochs);
    s.get("learning_rate", c.classifier.learning_rate);
    s.get("l2", c.classifier.l2);
    s.get("class_balanced", c.classifier.class_balanced);
    s.finish();
  }
  {
    auto s = section("policy");
    s.get("context_dim", c.policy.context_dim);
    s.get("max_length", c.policy.max_length);
    std::string eos = c.policy.eos_token.value_or("");
    s.get("eos_token", eos);
    c.policy.eos_token = eos.empty() ? std::nullopt : std::optional<std::string>(eos);
    s.finish();
  }
  {
    auto s = section("sft");
    s.get("epochs", c.sft.epochs);
    s.get("batch_size", c.sft.batch_size);
    s.get("learning_rate", c.sft.learning_rate);
    s.finish();
  }
  {
    auto s = section("ppo");
    s.get("beta", c.ppo.beta);
    s.get("clip_ratio", c.ppo.clip_ratio);
    s.get("learning_rate", c.ppo.learning_rate);
    s.get("ppo_epochs", c.ppo.ppo_epochs);
    s.get("batch_size", c.ppo.batch_size);
    s.get("iterations", c.ppo.iterations);
    s.get("grad_accumulation", c.ppo.grad_accumulation);
    s.get("gamma", c.ppo.gamma);
    s.get("gae_lambda", c.ppo.gae_lambda);
    s.get("value_coef", c.ppo.value_coef);
    double target = c.ppo.kl_target.value_or(0.0);
    s.get("kl_target", target);
    c.ppo.kl_target = target > 0.0 ? std::optional<double>(target) : std::nullopt;
    s.get("kl_horizon", c.ppo.kl_horizon);
    s.finish();
  }
  {
    auto s = section("backend");
    s.get("kind", c.backend.kind);
    s.get("url", c.backend.url);
    s.get("stub_text", c.backend.stub_text);
    s.get_ms("timeout_ms", c.backend.timeout);
    s.get("max_tokens", c.backend.max_tokens);
    s.get("temperature", c.backend.temperature);
    s.get("retries", c.backend.retry.retries);
    s.get_ms("backoff_ms", c.backend.retry.initial_backoff);
    s.finish();
  }
  {
    auto s = section("server");
    s.get("host", c.server.host);
    s.get("port", c.server.port);
    s.get("threads", c.server.threads);
    s.finish();
  }
  c.retriever.seed = c.seed;
  c.classifier.seed = c.seed;
  c.sft.seed = c.seed;
  c.ppo.seed = c.seed;
  c.ppo.threads = std::max(1u, c.threads);
  return c;
}

void apply_override(toml::table& root, const std::string& override_text) {
  const auto eq = override_text.find('=');
  if (eq == std::string::npos || eq == 0) {
    throw ArgumentError("override must look like section.key=value: " + override_text);
  }
  const std::string path = override_text.substr(0, eq);
  const std::string value = override_text.substr(eq + 1);
  toml::table* table = &root;
  std::string key = path;
  if (const auto dot = path.find('.'); dot != std::string::npos) {
    const std::string section = path.substr(0, dot);
    key = path.substr(dot + 1);
    if (!root.contains(section)) root.insert(section, toml::table{});
    table = root[section].as_table();
    if (!table) throw DataError("config entry " + section + " is not a section");
  }
  if (key.empty() || key.find('.') != std::string::npos) {
    throw ArgumentError("override key must be section.key: " + path);
  }
  try {
    auto parsed = toml::parse("v = " + value);
    table->insert_or_assign(key, std::move(*parsed.get("v")));
  } catch (const toml::parse_error&) {
    table->insert_or_assign(key, value);
  }
}

}  // namespace

EngineConfig parse_config(std::string_view toml_text, std::span<const std::string> overrides) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << "config: " << e.description() << " at " << e.source().begin;
    throw DataError(msg.str());
  }
  for (const auto& o : overrides) apply_override(root, o);
  return apply(root);
}

EngineConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  try {
    return parse_config(text.str(), overrides);
  } catch (const DataError& e) {
    throw DataError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Artifacts

std::filesystem::path ArtifactPaths::classifier(Aspect aspect) const {
  return dir / ("reward_" + std::string(to_string(aspect)) + ".bin");
}

ArtifactLock::ArtifactLock(const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  const auto path = ArtifactPaths{dir}.lock();
  fd_ = ::open(path.c_str(), O_CREAT | O_RDWR | O_CLOEXEC, 0644);
  if (fd_ < 0) throw DataError("cannot open lock file " + path.string() + ": " + std::strerror(errno));
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw DataError("artifact directory " + dir.string() + " is locked by another training command");
  }
}

ArtifactLock::~ArtifactLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

std::string sha256_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) {
    throw Error("sha256 init failed");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx.get(), digest, &len);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += kHex[digest[i] >> 4];
    out += kHex[digest[i] & 15];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Engine

Engine::Engine(EngineConfig config, EngineParts parts)
    : config_(std::move(config)), parts_(std::move(parts)) {
  if (!parts_.documents || !parts_.index || !parts_.scorer) {
    throw ArgumentError("engine needs documents, an index and a scorer");
  }
  pipeline_ = std::make_unique<RetrievalPipeline>(*parts_.index, *parts_.scorer, *parts_.documents,
                                                  config_.pipeline);
}

std::shared_ptr<const GenerationBackend> make_backend(const EngineConfig& config) {
  const auto& b = config.backend;
  if (b.kind == "stub") return std::make_shared<StubBackend>(b.stub_text);
  if (b.kind == "http") {
    if (b.url.empty()) throw ArgumentError("backend kind http needs backend.url");
    return std::make_shared<HttpBackend>(b.url);
  }
  if (b.kind == "policy") {
    const ArtifactPaths paths{config.artifact_dir};
    auto file = std::filesystem::exists(paths.actor_policy()) ? paths.actor_policy()
                                                               : paths.reference_policy();
    auto policy = std::make_shared<const Policy>(Policy::load(file));
    std::function<std::string(std::string_view)> render;
    if (std::filesystem::exists(paths.templates())) {
      auto env = std::make_shared<const TemplateEnvironment>(
          TemplateEnvironment::load_json(paths.templates()));
      render = [env](std::string_view token) { return env->candidate(token).text; };
    }
    return std::make_shared<PolicyBackend>(std::move(policy), std::move(render));
  }
  throw ArgumentError("unknown backend kind: " + b.kind);
}

Engine Engine::load(const EngineConfig& config, std::shared_ptr<const GenerationBackend> backend) {
  const ArtifactPaths paths{config.artifact_dir};
  EngineParts parts;
  auto hash = [&](const std::string& name, const std::filesystem::path& p) {
    parts.artifact_hashes[name] = sha256_file(p);
  };

  auto store = std::make_shared<RecordStore>(RecordStore::open(paths.corpus_base()));
  hash("corpus", std::filesystem::path(paths.corpus_base()).concat(".bin"));
  parts.documents = store;

  parts.index = std::make_shared<const InvertedIndex>(InvertedIndex::load(paths.index()));
  hash("index", paths.index());

  if (std::filesystem::exists(paths.scorer())) {
    parts.scorer = std::make_shared<const DenseScorer>(DenseScorer::load(paths.scorer()));
    hash("scorer", paths.scorer());
  } else {
    parts.scorer = std::make_shared<const DenseScorer>(config.embedding);
  }

  for (Aspect a : kAspects) {
    const auto p = paths.classifier(a);
    if (!std::filesystem::exists(p)) continue;
    parts.classifiers[static_cast<std::size_t>(a)] =
        std::make_shared<const FeedbackClassifier>(FeedbackClassifier::load(p));
    hash("reward_" + std::string(to_string(a)), p);
  }
  parts.backend = backend ? std::move(backend) : make_backend(config);
  return Engine(config, std::move(parts));
}

std::vector<RetrievedEvidence> Engine::retrieve(std::string_view claim, std::size_t k) const {
  std::vector<RetrievedEvidence> out;
  for (auto& s : pipeline_->retrieve(claim, k)) {
    auto doc = pipeline_->document(s.doc_id);
    out.push_back({std::move(s), std::move(doc)});
  }
  return out;
}

std::vector<RetrievedEvidence> Engine::retrieve(std::string_view claim) const {
  return retrieve(claim, config_.pipeline.k_out);
}

CounterResponse Engine::respond(std::string_view claim) const {
  for (const auto& c : parts_.classifiers) {
    if (!c) throw DataError("respond needs all three reward classifiers (run train-reward)");
  }
  if (!parts_.backend) throw BackendError("no generation backend configured");

  CounterResponse out;
  out.claim = std::string(claim);
  out.evidence = retrieve(claim);
  std::vector<std::string> texts;
  for (const auto& e : out.evidence) texts.push_back(evidence_text(e.document));
  out.prompt = render_prompt(claim, texts);

  GenerationRequest req;
  req.prompt = out.prompt;
  req.max_tokens = config_.backend.max_tokens;
  req.temperature = config_.backend.temperature;
  req.timeout = config_.backend.timeout;
  GenerationResponse gen;
  try {
    gen = generate_with_retry(*parts_.backend, req, config_.backend.retry);
  } catch (const BackendError& e) {
    throw ResponseError(e.what(), out.evidence);
  }
  out.response = gen.text;
  out.backend_id = gen.backend_id;
  out.backend_latency = gen.latency;
  out.reward = compute_reward(config_.reward, *parts_.classifiers[0], *parts_.classifiers[1],
                              *parts_.classifiers[2], *parts_.scorer, claim, texts, out.response);
  return out;
}

nlohmann::ordered_json Engine::health() const {
  nlohmann::ordered_json j;
  j["status"] = "ok";
  j["version"] = std::string(kEngineVersion);
  j["documents"] = parts_.index->doc_count();
  j["artifacts"] = parts_.artifact_hashes;
  j["backend"] = parts_.backend ? parts_.backend->id() : "none";
  return j;
}

// ---------------------------------------------------------------------------
// JSON

nlohmann::ordered_json to_json(const ScoredDocument& doc) {
  nlohmann::ordered_json j;
  j["doc_id"] = doc.doc_id;
  j["score"] = doc.score;
  j["stage"] = std::string(to_string(doc.stage));
  return j;
}

nlohmann::ordered_json to_json(const RetrievedEvidence& evidence) {
  auto j = to_json(evidence.scored);
  j["title"] = evidence.document.title;
  j["abstract"] = evidence.document.abstract;
  j["source"] = evidence.document.source;
  return j;
}

nlohmann::ordered_json to_json(const std::vector<RetrievedEvidence>& evidence) {
  auto arr = nlohmann::ordered_json::array();
  for (const auto& e : evidence) arr.push_back(to_json(e));
  return arr;
}

nlohmann::ordered_json to_json(const RewardBreakdown& reward) {
  nlohmann::ordered_json j;
  j["refutation"] = reward.refutation;
  j["factuality"] = reward.factuality;
  j["politeness"] = reward.politeness;
  j["claim_relevance"] = reward.claim_relevance;
  j["evidence_relevance"] = reward.evidence_relevance;
  j["total"] = reward.total;
  return j;
}

nlohmann::ordered_json to_json(const CounterResponse& response) {
  nlohmann::ordered_json j;
  j["claim"] = response.claim;
  j["evidence"] = to_json(response.evidence);
  j["response"] = response.response;
  j["reward"] = to_json(response.reward);
  j["provenance"] = {{"backend", response.backend_id},
                     {"backend_latency_ms", response.backend_latency.count()}};
  return j;
}

}  // namespace evidentia
