#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "evidentia/corpus.hpp"
#include "evidentia/tokenizer.hpp"

namespace evidentia {

enum class Stage { Lexical, Dense };

std::string_view to_string(Stage stage);

/// A document id with the score of the stage that ranked it.
struct ScoredDocument {
  std::string doc_id;
  double score = 0.0;
  Stage stage = Stage::Lexical;

  bool operator==(const ScoredDocument&) const = default;
};

/// Okapi BM25 free parameters. k1 >= 0, 0 <= b <= 1.
struct Bm25Params {
  double k1 = 1.2;
  double b = 0.75;

  void validate() const;
};

struct Posting {
  std::uint32_t doc = 0;
  std::uint32_t tf = 0;

  bool operator==(const Posting&) const = default;
};

/// Term -> postings, sorted by document index. Immutable once built.
class InvertedIndex {
 public:
  static constexpr std::string_view kMagic = "EVINDX01";
  static constexpr std::uint32_t kVersion = 1;

  /// Indexes the title and abstract tokens of every document. Tokenization
  /// runs on `threads` shards (0 = hardware concurrency) and is merged in
  /// document order, so the result does not depend on the thread count.
  static InvertedIndex build(const Corpus& corpus, const TokenizerOptions& options = {},
                             unsigned threads = 0);

  /// Builds from already-tokenized documents.
  static InvertedIndex from_tokens(std::vector<std::string> doc_ids,
                                   const std::vector<std::vector<std::string>>& docs,
                                   const TokenizerOptions& options = {});

  void save(std::ostream& out) const;
  void save(const std::filesystem::path& path) const;
  static InvertedIndex load(std::istream& in);
  static InvertedIndex load(const std::filesystem::path& path);

  std::size_t doc_count() const { return doc_ids_.size(); }
  std::size_t vocabulary_size() const { return terms_.size(); }
  double avg_doc_length() const { return avg_doc_length_; }
  std::uint32_t doc_length(std::size_t doc) const { return doc_lengths_[doc]; }
  const std::vector<std::uint32_t>& doc_lengths() const { return doc_lengths_; }
  const std::string& doc_id(std::size_t doc) const { return doc_ids_[doc]; }
  const std::vector<std::string>& doc_ids() const { return doc_ids_; }
  std::optional<std::size_t> find_doc(std::string_view doc_id) const;
  const TokenizerOptions& tokenizer_options() const { return options_; }

  std::span<const Posting> postings(std::string_view term) const;
  std::size_t document_frequency(std::string_view term) const { return postings(term).size(); }
  const std::vector<std::string>& terms() const { return terms_; }

  /// Term frequency of `term` in `doc` (binary search of the postings list).
  std::uint32_t term_frequency(std::string_view term, std::size_t doc) const;

  /// Distinct query terms in first-occurrence order, tokenized with the
  /// index's own tokenizer options.
  std::vector<std::string> query_terms(std::string_view text) const;

  /// Document indices ordered by ascending doc_id.
  const std::vector<std::uint32_t>& id_order() const { return id_order_; }

 private:
  void finalize();

  TokenizerOptions options_;
  std::vector<std::string> doc_ids_;
  std::vector<std::uint32_t> doc_lengths_;
  double avg_doc_length_ = 0.0;
  std::vector<std::string> terms_;
  std::vector<std::vector<Posting>> postings_;
  std::unordered_map<std::string, std::uint32_t> term_ids_;
  std::unordered_map<std::string, std::uint32_t> doc_index_;
  std::vector<std::uint32_t> id_order_;
};

/// ln((N - df + 0.5) / (df + 0.5) + 1); strictly positive for df <= N.
double bm25_idf(std::size_t doc_count, std::size_t df);

/// Sum over distinct query terms of idf * tf (k1 + 1) / (tf + k1 (1 - b + b len/avglen)).
double bm25_score(const InvertedIndex& index, std::span<const std::string> query_terms,
                  std::size_t doc, const Bm25Params& params = {});

/// BM25 of every document, accumulated term-at-a-time over postings.
std::vector<double> bm25_score_all(const InvertedIndex& index,
                                   std::span<const std::string> query_terms,
                                   const Bm25Params& params = {});

/// Orders (score desc, doc_id asc).
bool ranks_before(const ScoredDocument& a, const ScoredDocument& b);

/// The min(m, N) highest-scoring documents. Zero-score documents pad the
/// tail in doc_id order when fewer than m documents match.
std::vector<ScoredDocument> retrieve_top_m(const InvertedIndex& index, std::string_view query_text,
                                           std::size_t m, const Bm25Params& params = {});

using DocIdSet = std::unordered_set<std::string>;

/// Top-k BM25 documents for the claim, skipping `exclude`.
std::vector<ScoredDocument> sample_positives(const InvertedIndex& index,
                                             std::string_view claim_text, std::size_t k,
                                             const DocIdSet& exclude,
                                             const Bm25Params& params = {});

/// k distinct documents drawn uniformly from the documents scoring zero
/// against the claim. When fewer than k score zero, the remainder comes from
/// the bottom decile of nonzero scores. Never returns an excluded id.
std::vector<ScoredDocument> sample_negatives(const InvertedIndex& index,
                                             std::string_view claim_text, std::size_t k,
                                             const DocIdSet& exclude, std::uint64_t seed,
                                             const Bm25Params& params = {});

}  // namespace evidentia
