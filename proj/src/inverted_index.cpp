#include "evidentia/inverted_index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <thread>

#include "evidentia/binary_io.hpp"
#include "evidentia/error.hpp"

namespace evidentia {

std::string_view to_string(Stage stage) {
  return stage == Stage::Lexical ? "lexical" : "dense";
}

void Bm25Params::validate() const {
  if (!(k1 >= 0.0) || !std::isfinite(k1)) throw ArgumentError("bm25 k1 must be >= 0");
  if (!(b >= 0.0 && b <= 1.0)) throw ArgumentError("bm25 b must lie in [0, 1]");
}

namespace {

std::vector<std::string> document_tokens(const EvidenceDocument& doc,
                                         const TokenizerOptions& options) {
  // The separator literal is not indexed: tokens come from the two fields.
  auto tokens = tokenize(doc.title, options);
  auto rest = tokenize(doc.abstract, options);
  tokens.insert(tokens.end(), std::make_move_iterator(rest.begin()),
                std::make_move_iterator(rest.end()));
  return tokens;
}

}  // namespace

InvertedIndex InvertedIndex::build(const Corpus& corpus, const TokenizerOptions& options,
                                   unsigned threads) {
  if (corpus.empty()) throw IndexError("cannot index an empty corpus");
  const std::size_t n = corpus.size();
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));

  std::vector<std::vector<std::string>> docs(n);
  const std::size_t shard = (n + threads - 1) / threads;
  std::vector<std::thread> workers;
  for (unsigned t = 0; t < threads; ++t) {
    const std::size_t lo = t * shard;
    const std::size_t hi = std::min(n, lo + shard);
    if (lo >= hi) break;
    workers.emplace_back([&, lo, hi] {
      for (std::size_t i = lo; i < hi; ++i) docs[i] = document_tokens(corpus[i], options);
    });
  }
  for (auto& w : workers) w.join();

  std::vector<std::string> ids;
  ids.reserve(n);
  for (const auto& d : corpus.documents()) ids.push_back(d.doc_id);
  return from_tokens(std::move(ids), docs, options);
}

InvertedIndex InvertedIndex::from_tokens(std::vector<std::string> doc_ids,
                                         const std::vector<std::vector<std::string>>& docs,
                                         const TokenizerOptions& options) {
  if (doc_ids.empty()) throw IndexError("cannot index an empty corpus");
  if (doc_ids.size() != docs.size()) throw IndexError("doc id / document count mismatch");
  if (doc_ids.size() > std::numeric_limits<std::uint32_t>::max()) {
    throw IndexError("too many documents");
  }

  InvertedIndex idx;
  idx.options_ = options;
  idx.doc_ids_ = std::move(doc_ids);
  idx.doc_lengths_.resize(docs.size());

  std::unordered_map<std::uint32_t, std::uint32_t> tf;
  for (std::size_t d = 0; d < docs.size(); ++d) {
    tf.clear();
    std::vector<std::uint32_t> order;  // first-occurrence order within the doc
    for (const auto& tok : docs[d]) {
      auto [it, inserted] =
          idx.term_ids_.try_emplace(tok, static_cast<std::uint32_t>(idx.terms_.size()));
      if (inserted) {
        idx.terms_.push_back(tok);
        idx.postings_.emplace_back();
      }
      if (tf[it->second]++ == 0) order.push_back(it->second);
    }
    for (auto term : order) {
      idx.postings_[term].push_back({static_cast<std::uint32_t>(d), tf[term]});
    }
    idx.doc_lengths_[d] = static_cast<std::uint32_t>(docs[d].size());
  }
  idx.finalize();
  return idx;
}

void InvertedIndex::finalize() {
  const double total = std::accumulate(doc_lengths_.begin(), doc_lengths_.end(), 0.0);
  avg_doc_length_ = total / static_cast<double>(doc_lengths_.size());

  doc_index_.clear();
  doc_index_.reserve(doc_ids_.size());
  for (std::size_t i = 0; i < doc_ids_.size(); ++i) {
    if (!doc_index_.emplace(doc_ids_[i], static_cast<std::uint32_t>(i)).second) {
      throw IndexError("duplicate doc_id in index: " + doc_ids_[i]);
    }
  }
  id_order_.resize(doc_ids_.size());
  std::iota(id_order_.begin(), id_order_.end(), 0u);
  std::sort(id_order_.begin(), id_order_.end(),
            [&](std::uint32_t a, std::uint32_t b) { return doc_ids_[a] < doc_ids_[b]; });
}

std::optional<std::size_t> InvertedIndex::find_doc(std::string_view doc_id) const {
  auto it = doc_index_.find(std::string(doc_id));
  if (it == doc_index_.end()) return std::nullopt;
  return it->second;
}

std::span<const Posting> InvertedIndex::postings(std::string_view term) const {
  auto it = term_ids_.find(std::string(term));
  if (it == term_ids_.end()) return {};
  return postings_[it->second];
}

std::uint32_t InvertedIndex::term_frequency(std::string_view term, std::size_t doc) const {
  auto list = postings(term);
  auto it = std::lower_bound(list.begin(), list.end(), doc,
                             [](const Posting& p, std::size_t d) { return p.doc < d; });
  return (it != list.end() && it->doc == doc) ? it->tf : 0;
}

std::vector<std::string> InvertedIndex::query_terms(std::string_view text) const {
  auto tokens = tokenize(text, options_);
  std::vector<std::string> out;
  std::unordered_set<std::string> seen;
  for (auto& t : tokens) {
    if (seen.insert(t).second) out.push_back(std::move(t));
  }
  return out;
}

void InvertedIndex::save(std::ostream& out) const {
  io::write_header(out, kMagic, kVersion);
  io::write_pod<std::uint8_t>(out, options_.remove_stopwords ? 1 : 0);
  io::write_pod<std::uint32_t>(out, kStopwordListVersion);
  io::write_pod<std::uint64_t>(out, doc_ids_.size());
  for (const auto& id : doc_ids_) io::write_string(out, id);
  io::write_vector(out, doc_lengths_);
  io::write_pod<std::uint64_t>(out, terms_.size());
  for (std::size_t t = 0; t < terms_.size(); ++t) {
    io::write_string(out, terms_[t]);
    io::write_vector(out, postings_[t]);
  }
  if (!out) throw IndexError("index write failed");
}

void InvertedIndex::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IndexError("cannot write " + path.string());
  save(out);
}

InvertedIndex InvertedIndex::load(std::istream& in) {
  io::read_header(in, kMagic, kVersion);
  InvertedIndex idx;
  idx.options_.remove_stopwords = io::read_pod<std::uint8_t>(in) != 0;
  if (io::read_pod<std::uint32_t>(in) != kStopwordListVersion) {
    throw IndexError("index built with a different stopword list");
  }
  const auto n = io::read_pod<std::uint64_t>(in);
  idx.doc_ids_.reserve(n);
  for (std::uint64_t i = 0; i < n; ++i) idx.doc_ids_.push_back(io::read_string(in));
  idx.doc_lengths_ = io::read_vector<std::uint32_t>(in);
  if (idx.doc_lengths_.size() != n || n == 0) throw IndexError("corrupt index: document table");
  const auto terms = io::read_pod<std::uint64_t>(in);
  idx.terms_.reserve(terms);
  idx.postings_.reserve(terms);
  for (std::uint64_t t = 0; t < terms; ++t) {
    idx.terms_.push_back(io::read_string(in));
    idx.postings_.push_back(io::read_vector<Posting>(in));
    for (const auto& p : idx.postings_.back()) {
      if (p.doc >= n) throw IndexError("corrupt index: posting out of range");
    }
    idx.term_ids_.emplace(idx.terms_.back(), static_cast<std::uint32_t>(t));
  }
  idx.finalize();
  return idx;
}

InvertedIndex InvertedIndex::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IndexError("cannot open " + path.string());
  return load(in);
}

// ---------------------------------------------------------------------------
// Scoring

double bm25_idf(std::size_t doc_count, std::size_t df) {
  const double n = static_cast<double>(doc_count);
  const double f = static_cast<double>(df);
  return std::log((n - f + 0.5) / (f + 0.5) + 1.0);
}

namespace {

inline double term_weight(double idf, double tf, double len, double avg_len,
                          const Bm25Params& p) {
  return idf * tf * (p.k1 + 1.0) / (tf + p.k1 * (1.0 - p.b + p.b * len / avg_len));
}

}  // namespace

double bm25_score(const InvertedIndex& index, std::span<const std::string> query_terms,
                  std::size_t doc, const Bm25Params& params) {
  if (doc >= index.doc_count()) throw ArgumentError("doc index out of range");
  double score = 0.0;
  const double len = index.doc_length(doc);
  for (const auto& term : query_terms) {
    const auto tf = index.term_frequency(term, doc);
    if (tf == 0) continue;
    const double idf = bm25_idf(index.doc_count(), index.document_frequency(term));
    score += term_weight(idf, tf, len, index.avg_doc_length(), params);
  }
  return score;
}

std::vector<double> bm25_score_all(const InvertedIndex& index,
                                   std::span<const std::string> query_terms,
                                   const Bm25Params& params) {
  std::vector<double> scores(index.doc_count(), 0.0);
  for (const auto& term : query_terms) {
    auto list = index.postings(term);
    if (list.empty()) continue;
    const double idf = bm25_idf(index.doc_count(), list.size());
    for (const auto& p : list) {
      scores[p.doc] +=
          term_weight(idf, p.tf, index.doc_length(p.doc), index.avg_doc_length(), params);
    }
  }
  return scores;
}

bool ranks_before(const ScoredDocument& a, const ScoredDocument& b) {
  if (a.score != b.score) return a.score > b.score;
  return a.doc_id < b.doc_id;
}

namespace {

// Ranked list of (doc index, score) over the whole collection: nonzero
// scores by (score desc, id asc), then zero scores by id.
std::vector<ScoredDocument> ranked_prefix(const InvertedIndex& index,
                                          const std::vector<double>& scores, std::size_t m,
                                          const DocIdSet* exclude) {
  std::vector<ScoredDocument> hits;
  for (std::size_t d = 0; d < scores.size(); ++d) {
    if (scores[d] > 0.0 && !(exclude && exclude->contains(index.doc_id(d)))) {
      hits.push_back({index.doc_id(d), scores[d], Stage::Lexical});
    }
  }
  if (hits.size() > m) {
    std::partial_sort(hits.begin(), hits.begin() + static_cast<std::ptrdiff_t>(m), hits.end(),
                      ranks_before);
    hits.resize(m);
  } else {
    std::sort(hits.begin(), hits.end(), ranks_before);
  }
  for (auto d : index.id_order()) {
    if (hits.size() >= m) break;
    if (scores[d] > 0.0) continue;
    if (exclude && exclude->contains(index.doc_id(d))) continue;
    hits.push_back({index.doc_id(d), 0.0, Stage::Lexical});
  }
  return hits;
}

}  // namespace

std::vector<ScoredDocument> retrieve_top_m(const InvertedIndex& index, std::string_view query_text,
                                           std::size_t m, const Bm25Params& params) {
  if (m < 1) throw ArgumentError("m must be >= 1");
  params.validate();
  const auto terms = index.query_terms(query_text);
  return ranked_prefix(index, bm25_score_all(index, terms, params), m, nullptr);
}

std::vector<ScoredDocument> sample_positives(const InvertedIndex& index,
                                             std::string_view claim_text, std::size_t k,
                                             const DocIdSet& exclude, const Bm25Params& params) {
  if (k < 1) throw ArgumentError("k must be >= 1");
  if (index.doc_count() <= k + exclude.size()) {
    throw SamplingError("corpus too small to sample " + std::to_string(k) + " positives");
  }
  const auto terms = index.query_terms(claim_text);
  return ranked_prefix(index, bm25_score_all(index, terms, params), k, &exclude);
}

std::vector<ScoredDocument> sample_negatives(const InvertedIndex& index,
                                             std::string_view claim_text, std::size_t k,
                                             const DocIdSet& exclude, std::uint64_t seed,
                                             const Bm25Params& params) {
  if (k < 1) throw ArgumentError("k must be >= 1");
  if (index.doc_count() <= k + exclude.size()) {
    throw SamplingError("corpus too small to sample " + std::to_string(k) + " negatives");
  }
  const auto terms = index.query_terms(claim_text);
  const auto scores = bm25_score_all(index, terms, params);

  std::vector<std::uint32_t> zero_pool;
  std::vector<std::uint32_t> nonzero;
  for (std::size_t d = 0; d < scores.size(); ++d) {
    if (exclude.contains(index.doc_id(d))) continue;
    (scores[d] > 0.0 ? nonzero : zero_pool).push_back(static_cast<std::uint32_t>(d));
  }

  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates: the first `take` entries become a uniform sample.
  auto draw = [&rng](std::vector<std::uint32_t>& pool, std::size_t take) {
    for (std::size_t i = 0; i < take; ++i) {
      std::uniform_int_distribution<std::size_t> pick(i, pool.size() - 1);
      std::swap(pool[i], pool[pick(rng)]);
    }
    pool.resize(take);
  };

  std::vector<std::uint32_t> chosen;
  if (zero_pool.size() >= k) {
    draw(zero_pool, k);
    chosen = std::move(zero_pool);
  } else {
    chosen = zero_pool;
    const std::size_t need = k - zero_pool.size();
    std::sort(nonzero.begin(), nonzero.end(), [&](std::uint32_t a, std::uint32_t b) {
      if (scores[a] != scores[b]) return scores[a] < scores[b];
      return index.doc_id(a) < index.doc_id(b);
    });
    const std::size_t decile = (nonzero.size() + 9) / 10;
    nonzero.resize(std::min(nonzero.size(), std::max(decile, need)));
    draw(nonzero, need);
    chosen.insert(chosen.end(), nonzero.begin(), nonzero.end());
  }

  std::vector<ScoredDocument> out;
  out.reserve(chosen.size());
  for (auto d : chosen) out.push_back({index.doc_id(d), scores[d], Stage::Lexical});
  return out;
}

}  // namespace evidentia
