#include "evidentia/corpus.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>
#include <unordered_set>

#include "evidentia/binary_io.hpp"
#include "evidentia/error.hpp"
#include "evidentia/utf8.hpp"
#include "json.hpp"

namespace evidentia {

namespace {

bool is_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v';
}

std::string normalize_field(std::string_view s) {
  std::string out;
  out.reserve(s.size());
  bool pending_space = false;
  for (char c : s) {
    if (is_space(c)) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out.push_back(' ');
      pending_space = false;
    }
    out.push_back((c >= 'A' && c <= 'Z') ? static_cast<char>(c - 'A' + 'a') : c);
  }
  return out;
}

// Returns nullopt when the record is invalid.
std::optional<EvidenceDocument> decode_record(std::string_view line, std::int64_t default_time) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception&) {
    return std::nullopt;
  }
  if (!j.is_object()) return std::nullopt;

  auto text_field = [&](const char* key) -> std::optional<std::string> {
    auto it = j.find(key);
    if (it == j.end() || it->is_null()) return std::string{};
    if (!it->is_string()) return std::nullopt;
    auto s = it->get<std::string>();
    if (!utf8::valid(s)) return std::nullopt;
    return s;
  };

  auto id_it = j.find("id");
  if (id_it == j.end()) return std::nullopt;
  EvidenceDocument doc;
  if (id_it->is_string()) {
    doc.doc_id = id_it->get<std::string>();
  } else if (id_it->is_number_integer()) {
    doc.doc_id = std::to_string(id_it->get<std::int64_t>());
  } else {
    return std::nullopt;
  }
  if (doc.doc_id.empty() || !utf8::valid(doc.doc_id)) return std::nullopt;

  auto title = text_field("title");
  auto abstract = text_field("abstract");
  auto source = text_field("source");
  if (!title || !abstract || !source) return std::nullopt;
  doc.title = std::move(*title);
  doc.abstract = std::move(*abstract);
  doc.source = std::move(*source);
  if (normalize_field(doc.title).empty() && normalize_field(doc.abstract).empty()) {
    return std::nullopt;
  }

  doc.ingest_time = default_time;
  if (auto t = j.find("ingest_time"); t != j.end() && t->is_number_integer()) {
    doc.ingest_time = t->get<std::int64_t>();
  }
  return doc;
}

void write_record(std::ostream& out, const EvidenceDocument& doc) {
  std::ostringstream payload;
  io::write_string(payload, doc.doc_id);
  io::write_string(payload, doc.title);
  io::write_string(payload, doc.abstract);
  io::write_string(payload, doc.source);
  io::write_pod(payload, doc.ingest_time);
  const auto bytes = payload.str();
  io::write_pod<std::uint64_t>(out, bytes.size());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

EvidenceDocument parse_record(const std::string& payload) {
  std::istringstream in(payload);
  EvidenceDocument doc;
  doc.doc_id = io::read_string(in);
  doc.title = io::read_string(in);
  doc.abstract = io::read_string(in);
  doc.source = io::read_string(in);
  doc.ingest_time = io::read_pod<std::int64_t>(in);
  return doc;
}

std::filesystem::path data_path(const std::filesystem::path& base) {
  auto p = base;
  p += ".bin";
  return p;
}

std::filesystem::path index_path(const std::filesystem::path& base) {
  auto p = base;
  p += ".idx";
  return p;
}

}  // namespace

std::string evidence_text(const EvidenceDocument& doc) {
  std::string out;
  out.reserve(doc.title.size() + kEvidenceSeparator.size() + doc.abstract.size());
  out += doc.title;
  out += kEvidenceSeparator;
  out += doc.abstract;
  return out;
}

std::string dedup_key(const EvidenceDocument& doc) {
  return normalize_field(doc.title) + '\x1f' + normalize_field(doc.abstract);
}

Corpus Corpus::from_documents(std::vector<EvidenceDocument> docs) {
  Corpus c;
  std::unordered_set<std::string> keys;
  c.by_id_.reserve(docs.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (!c.by_id_.emplace(docs[i].doc_id, i).second) {
      throw ValidationError("duplicate doc_id: " + docs[i].doc_id);
    }
    if (!keys.insert(dedup_key(docs[i])).second) {
      throw ValidationError("duplicate content for doc_id: " + docs[i].doc_id);
    }
  }
  c.docs_ = std::move(docs);
  return c;
}

const EvidenceDocument* Corpus::find(std::string_view doc_id) const {
  auto it = by_id_.find(std::string(doc_id));
  return it == by_id_.end() ? nullptr : &docs_[it->second];
}

std::optional<EvidenceDocument> Corpus::lookup(std::string_view doc_id) const {
  if (const auto* d = find(doc_id)) return *d;
  return std::nullopt;
}

IngestResult ingest(std::istream& records, const IngestOptions& options) {
  IngestReport report;
  std::vector<EvidenceDocument> kept;
  std::unordered_set<std::string> ids;
  std::unordered_set<std::string> keys;

  std::string line;
  std::size_t line_no = 0;
  while (true) {
    if (!std::getline(records, line)) {
      if (records.bad()) throw IngestError("input stream read failure", line_no + 1);
      break;
    }
    ++line_no;
    if (normalize_field(line).empty()) continue;
    ++report.total;

    auto doc = decode_record(line, options.ingest_time);
    if (!doc) {
      ++report.invalid;
      continue;
    }
    if (ids.contains(doc->doc_id) || !keys.insert(dedup_key(*doc)).second) {
      ++report.duplicate;
      continue;
    }
    ids.insert(doc->doc_id);
    kept.push_back(std::move(*doc));
  }
  report.retained = kept.size();
  return {Corpus::from_documents(std::move(kept)), report};
}

IngestResult ingest_file(const std::filesystem::path& path, const IngestOptions& options) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IngestError("cannot open " + path.string(), 0);
  return ingest(in, options);
}

void write_jsonl(const Corpus& corpus, std::ostream& out) {
  for (const auto& d : corpus.documents()) {
    nlohmann::json j = {{"id", d.doc_id},
                        {"title", d.title},
                        {"abstract", d.abstract},
                        {"source", d.source},
                        {"ingest_time", d.ingest_time}};
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// RecordStore

struct RecordStore::Fd {
  int fd = -1;
  ~Fd() {
    if (fd >= 0) ::close(fd);
  }
};

namespace {

void pread_exact(int fd, char* buf, std::size_t n, std::uint64_t offset) {
  std::size_t done = 0;
  while (done < n) {
    const auto r = ::pread(fd, buf + done, n - done, static_cast<off_t>(offset + done));
    if (r <= 0) throw DataError("record store read failed at offset " + std::to_string(offset));
    done += static_cast<std::size_t>(r);
  }
}

std::string read_payload(int fd, std::uint64_t offset) {
  std::uint64_t len = 0;
  pread_exact(fd, reinterpret_cast<char*>(&len), sizeof(len), offset);
  if (len > (std::uint64_t{1} << 32)) throw DataError("corrupt record length");
  std::string payload(len, '\0');
  pread_exact(fd, payload.data(), len, offset + sizeof(len));
  return payload;
}

void write_sidecar(const std::filesystem::path& base, std::uint64_t data_size,
                   const std::vector<std::pair<std::string, std::uint64_t>>& entries) {
  std::ofstream out(index_path(base), std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + index_path(base).string());
  io::write_header(out, RecordStore::kIndexMagic, RecordStore::kVersion);
  io::write_pod(out, data_size);
  io::write_pod<std::uint64_t>(out, entries.size());
  for (const auto& [id, off] : entries) {
    io::write_string(out, id);
    io::write_pod(out, off);
  }
}

}  // namespace

void RecordStore::append(const std::filesystem::path& base, const Corpus& corpus) {
  std::vector<std::pair<std::string, std::uint64_t>> entries;
  std::unordered_set<std::string> existing;
  const auto data = data_path(base);
  const bool exists = std::filesystem::exists(data) && std::filesystem::file_size(data) > 0;
  if (exists) {
    auto store = open(base);
    for (const auto& id : store.ids()) {
      entries.emplace_back(id, store.offsets_.at(id));
      existing.insert(id);
    }
  }
  for (const auto& d : corpus.documents()) {
    if (existing.contains(d.doc_id)) throw ValidationError("doc_id already stored: " + d.doc_id);
  }

  std::ofstream out(data, std::ios::binary | std::ios::app);
  if (!out) throw DataError("cannot write " + data.string());
  if (!exists) io::write_header(out, kDataMagic, kVersion);
  out.flush();
  auto offset = static_cast<std::uint64_t>(std::filesystem::file_size(data));
  for (const auto& d : corpus.documents()) {
    std::ostringstream rec;
    write_record(rec, d);
    const auto bytes = rec.str();
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    entries.emplace_back(d.doc_id, offset);
    offset += bytes.size();
  }
  out.flush();
  if (!out) throw DataError("write failed: " + data.string());
  out.close();
  write_sidecar(base, offset, entries);
}

RecordStore RecordStore::open(const std::filesystem::path& base) {
  const auto data = data_path(base);
  RecordStore store;
  store.fd_ = std::make_shared<Fd>();
  store.fd_->fd = ::open(data.c_str(), O_RDONLY | O_CLOEXEC);
  if (store.fd_->fd < 0) throw DataError("cannot open " + data.string());
  const auto data_size = static_cast<std::uint64_t>(std::filesystem::file_size(data));

  {
    std::ifstream in(data, std::ios::binary);
    io::read_header(in, kDataMagic, kVersion);
  }
  const std::uint64_t header_size = kDataMagic.size() + sizeof(std::uint32_t);

  bool loaded = false;
  if (std::ifstream idx(index_path(base), std::ios::binary); idx) {
    try {
      io::read_header(idx, kIndexMagic, kVersion);
      if (io::read_pod<std::uint64_t>(idx) == data_size) {
        const auto n = io::read_pod<std::uint64_t>(idx);
        for (std::uint64_t i = 0; i < n; ++i) {
          auto id = io::read_string(idx);
          const auto off = io::read_pod<std::uint64_t>(idx);
          if (off < header_size || off >= data_size) throw DataError("offset out of range");
          store.offsets_.emplace(id, off);
          store.ids_.push_back(std::move(id));
        }
        loaded = true;
      }
    } catch (const DataError&) {
      store.ids_.clear();
      store.offsets_.clear();
    }
  }

  if (!loaded) {
    store.rebuilt_ = true;
    std::uint64_t off = header_size;
    while (off < data_size) {
      auto payload = read_payload(store.fd_->fd, off);
      std::istringstream in(payload);
      auto id = io::read_string(in);
      store.offsets_.emplace(id, off);
      store.ids_.push_back(std::move(id));
      off += sizeof(std::uint64_t) + payload.size();
    }
  }
  return store;
}

std::optional<EvidenceDocument> RecordStore::lookup(std::string_view doc_id) const {
  auto it = offsets_.find(std::string(doc_id));
  if (it == offsets_.end()) return std::nullopt;
  return parse_record(read_payload(fd_->fd, it->second));
}

Corpus RecordStore::load_all() const {
  std::vector<EvidenceDocument> docs;
  docs.reserve(ids_.size());
  for (const auto& id : ids_) docs.push_back(*lookup(id));
  return Corpus::from_documents(std::move(docs));
}

}  // namespace evidentia
