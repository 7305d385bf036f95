#include "fixture.hpp"

#include <random>

#include "synthetic.hpp"

namespace evidentia::testing {

Corpus write_artifacts(const std::filesystem::path& dir, std::uint64_t seed, std::size_t docs) {
  std::filesystem::create_directories(dir);
  const ArtifactPaths paths{dir};
  auto corpus = make_random_corpus(docs, 300, seed);
  RecordStore::append(paths.corpus_base(), corpus);
  InvertedIndex::build(corpus).save(paths.index());
  std::mt19937_64 rng(seed);
  make_random_scorer(rng, 64, 0.05, 0.2).save(paths.scorer());
  for (Aspect a : kAspects) {
    const auto data = make_feedback_set({.examples = 200, .signal = 0.6, .aspect = a},
                                        seed + static_cast<std::uint64_t>(a));
    train_classifier(data, a, {.max_epochs = 30, .seed = seed}).classifier.save(paths.classifier(a));
  }
  return corpus;
}

EngineConfig fixture_config(const std::filesystem::path& dir) {
  EngineConfig cfg;
  cfg.artifact_dir = dir;
  cfg.pipeline = {.m = 20, .k_out = 3};
  cfg.backend.retry = {.retries = 1, .initial_backoff = std::chrono::milliseconds(1)};
  cfg.threads = 2;
  return cfg;
}

}  // namespace evidentia::testing
