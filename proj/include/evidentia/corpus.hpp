#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace evidentia {

/// One retrievable article: title plus abstract.
struct EvidenceDocument {
  std::string doc_id;
  std::string title;
  std::string abstract;
  std::string source;            // corpus-of-origin label, e.g. "cord", "litcovid"
  std::int64_t ingest_time = 0;  // unix seconds

  bool operator==(const EvidenceDocument&) const = default;
};

inline constexpr std::string_view kEvidenceSeparator = " [SEP] ";

/// Title and abstract joined by kEvidenceSeparator.
std::string evidence_text(const EvidenceDocument& doc);

/// Lowercased, whitespace-collapsed (title, abstract) pair used for
/// duplicate detection.
std::string dedup_key(const EvidenceDocument& doc);

/// Anything that can resolve a doc_id to its document.
class DocumentLookup {
 public:
  virtual ~DocumentLookup() = default;
  virtual std::optional<EvidenceDocument> lookup(std::string_view doc_id) const = 0;
};

/// Immutable-after-construction ordered document collection. Ids and
/// normalized (title, abstract) pairs are unique.
class Corpus : public DocumentLookup {
 public:
  Corpus() = default;

  /// Throws ValidationError on a duplicate id or duplicate content.
  static Corpus from_documents(std::vector<EvidenceDocument> docs);

  std::size_t size() const { return docs_.size(); }
  bool empty() const { return docs_.empty(); }
  const std::vector<EvidenceDocument>& documents() const { return docs_; }
  const EvidenceDocument& operator[](std::size_t i) const { return docs_[i]; }

  const EvidenceDocument* find(std::string_view doc_id) const;
  std::optional<EvidenceDocument> lookup(std::string_view doc_id) const override;

 private:
  std::vector<EvidenceDocument> docs_;
  std::unordered_map<std::string, std::size_t> by_id_;
};

struct IngestReport {
  std::size_t total = 0;
  std::size_t retained = 0;
  std::size_t invalid = 0;
  std::size_t duplicate = 0;
};

struct IngestResult {
  Corpus corpus;
  IngestReport report;
};

struct IngestOptions {
  // Stamped on records that do not carry their own ingest_time.
  std::int64_t ingest_time = 0;
};

/// Reads JSON lines ({id, title, abstract, source}). Blank lines are not
/// records. Malformed or invalid records are skipped and counted; a stream
/// read failure throws IngestError carrying the line number.
IngestResult ingest(std::istream& records, const IngestOptions& options = {});
IngestResult ingest_file(const std::filesystem::path& path, const IngestOptions& options = {});

/// Serializes back to the ingest format (plus ingest_time).
void write_jsonl(const Corpus& corpus, std::ostream& out);

/// Append-only binary record file (`<base>.bin`) plus a sidecar id→offset
/// index (`<base>.idx`). Reads use pread and are safe from any thread.
class RecordStore : public DocumentLookup {
 public:
  static constexpr std::string_view kDataMagic = "EVCORP01";
  static constexpr std::string_view kIndexMagic = "EVCIDX01";
  static constexpr std::uint32_t kVersion = 1;

  /// Appends every document of `corpus`; creates the files if absent.
  /// Throws ValidationError if an id is already stored.
  static void append(const std::filesystem::path& base, const Corpus& corpus);

  /// Opens the store, using the sidecar when it matches the data file and
  /// rebuilding the id→offset map by scanning records otherwise.
  static RecordStore open(const std::filesystem::path& base);

  std::size_t size() const { return ids_.size(); }
  const std::vector<std::string>& ids() const { return ids_; }
  std::optional<EvidenceDocument> lookup(std::string_view doc_id) const override;
  Corpus load_all() const;
  bool rebuilt_index() const { return rebuilt_; }

 private:
  struct Fd;
  std::shared_ptr<Fd> fd_;
  std::vector<std::string> ids_;
  std::unordered_map<std::string, std::uint64_t> offsets_;
  bool rebuilt_ = false;
};

}  // namespace evidentia
