#pragma once

#include <cstdint>
#include <filesystem>

#include "evidentia/engine.hpp"

namespace evidentia::testing {

/// Writes a complete artifact directory: corpus store, index, a perturbed
/// scorer and three trained classifiers. Returns the corpus it stored.
Corpus write_artifacts(const std::filesystem::path& dir, std::uint64_t seed,
                       std::size_t docs = 200);

/// Config pointing at `dir` with a stub backend and small k_out.
EngineConfig fixture_config(const std::filesystem::path& dir);

}  // namespace evidentia::testing
