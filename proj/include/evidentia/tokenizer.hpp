#pragma once

#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace evidentia {

struct TokenizerOptions {
  bool remove_stopwords = true;

  bool operator==(const TokenizerOptions&) const = default;
};

/// Identifies the shipped stopword list; stored in index files so a reader
/// can detect a list change.
inline constexpr std::uint32_t kStopwordListVersion = 1;

/// The English stopword list (Lucene's classic 33-word set).
std::span<const std::string_view> stopwords();
bool is_stopword(std::string_view token);

/// Lowercases and splits on anything that is not a letter or digit. UTF-8
/// aware: non-ASCII letters stay inside words, Unicode punctuation and
/// spaces separate, malformed bytes separate.
std::vector<std::string> tokenize(std::string_view text, const TokenizerOptions& options = {});

}  // namespace evidentia
