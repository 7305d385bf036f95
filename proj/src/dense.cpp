#include "evidentia/dense.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>

#include "evidentia/binary_io.hpp"
#include "evidentia/error.hpp"
#include "evidentia/hash.hpp"
#include "json.hpp"

namespace evidentia {

void EmbeddingConfig::validate() const {
  if (dim < 8) throw ArgumentError("embedding dim must be >= 8");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw ArgumentError("temperature must be > 0");
  }
}

// ---------------------------------------------------------------------------
// ExternalVectors

std::string ExternalVectors::text_id(std::string_view text) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv1a64(text)));
  return buf;
}

void ExternalVectors::add(std::string id, Eigen::VectorXd vector) {
  if (static_cast<std::size_t>(vector.size()) != dim_) {
    throw DataError("external vector for '" + id + "' has dimension " +
                    std::to_string(vector.size()) + ", expected " + std::to_string(dim_));
  }
  if (!vector.allFinite()) throw DataError("external vector for '" + id + "' is not finite");
  vectors_.insert_or_assign(std::move(id), std::move(vector));
}

const Eigen::VectorXd* ExternalVectors::find(std::string_view text) const {
  if (auto it = vectors_.find(std::string(text)); it != vectors_.end()) return &it->second;
  if (auto it = vectors_.find(text_id(text)); it != vectors_.end()) return &it->second;
  return nullptr;
}

ExternalVectors ExternalVectors::load_jsonl(std::istream& in, std::size_t dim) {
  ExternalVectors out(dim);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      auto j = nlohmann::json::parse(line);
      const auto& values = j.at("vector");
      Eigen::VectorXd v(values.size());
      for (std::size_t i = 0; i < values.size(); ++i) v[static_cast<Eigen::Index>(i)] = values[i].get<double>();
      out.add(j.at("text_id").get<std::string>(), std::move(v));
    } catch (const nlohmann::json::exception& e) {
      throw DataError("external vectors line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (in.bad()) throw DataError("external vectors: read failure");
  return out;
}

ExternalVectors ExternalVectors::load_jsonl(const std::filesystem::path& path, std::size_t dim) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  return load_jsonl(in, dim);
}

// ---------------------------------------------------------------------------
// DenseScorer

DenseScorer::DenseScorer(EmbeddingConfig config) : config_(config) {
  config_.validate();
  const auto d = static_cast<Eigen::Index>(config_.dim);
  projection_ = Eigen::MatrixXd::Identity(d, d);
}

void DenseScorer::set_external_vectors(std::shared_ptr<const ExternalVectors> vectors) {
  if (vectors && vectors->dim() != config_.dim) {
    throw ArgumentError("external vector dimension does not match scorer");
  }
  external_ = std::move(vectors);
}

std::size_t DenseScorer::bucket(std::string_view token) const {
  return static_cast<std::size_t>(fnv1a64(token) % config_.dim);
}

Eigen::VectorXd DenseScorer::features(std::string_view text) const {
  if (config_.featurizer == Featurizer::ExternalVectors) {
    if (!external_) throw DataError("scorer uses external vectors but none are loaded");
    const auto* v = external_->find(text);
    if (!v) throw DataError("no external vector for text id " + ExternalVectors::text_id(text));
    return *v;
  }
  Eigen::VectorXd phi = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(config_.dim));
  for (const auto& tok : tokenize(text, config_.tokenizer)) {
    phi[static_cast<Eigen::Index>(bucket(tok))] += 1.0;
  }
  return phi;
}

Eigen::VectorXd DenseScorer::fallback() const {
  const auto d = static_cast<Eigen::Index>(config_.dim);
  return Eigen::VectorXd::Constant(d, 1.0 / std::sqrt(static_cast<double>(config_.dim)));
}

Eigen::VectorXd DenseScorer::embed(std::string_view text) const {
  Eigen::VectorXd u = projection_ * features(text);
  const double norm = u.norm();
  if (!(norm > 0.0) || !std::isfinite(norm)) return fallback();
  return u / norm;
}

double DenseScorer::cosine(std::string_view a, std::string_view b) const {
  return embed(a).dot(embed(b));
}

double DenseScorer::relevance(std::string_view a, std::string_view b) const {
  return cosine(a, b) / config_.temperature;
}

void DenseScorer::save(std::ostream& out) const {
  io::write_header(out, kMagic, kVersion);
  io::write_pod<std::uint64_t>(out, config_.dim);
  io::write_pod<std::uint8_t>(out, static_cast<std::uint8_t>(config_.featurizer));
  io::write_pod(out, config_.temperature);
  io::write_pod<std::uint8_t>(out, config_.tokenizer.remove_stopwords ? 1 : 0);
  out.write(reinterpret_cast<const char*>(projection_.data()),
            static_cast<std::streamsize>(projection_.size() * sizeof(double)));
  if (!out) throw DataError("scorer checkpoint write failed");
}

void DenseScorer::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  save(out);
}

DenseScorer DenseScorer::load(std::istream& in) {
  io::read_header(in, kMagic, kVersion);
  EmbeddingConfig cfg;
  cfg.dim = io::read_pod<std::uint64_t>(in);
  const auto feat = io::read_pod<std::uint8_t>(in);
  if (feat > 1) throw DataError("unknown featurizer in scorer checkpoint");
  cfg.featurizer = static_cast<Featurizer>(feat);
  cfg.temperature = io::read_pod<double>(in);
  cfg.tokenizer.remove_stopwords = io::read_pod<std::uint8_t>(in) != 0;
  if (cfg.dim > 65536) throw DataError("scorer checkpoint dim out of range");
  DenseScorer scorer(cfg);
  in.read(reinterpret_cast<char*>(scorer.projection_.data()),
          static_cast<std::streamsize>(scorer.projection_.size() * sizeof(double)));
  if (!in) throw DataError("truncated scorer checkpoint");
  if (!scorer.projection_.allFinite()) throw DataError("scorer checkpoint has non-finite weights");
  return scorer;
}

DenseScorer DenseScorer::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  return load(in);
}

}  // namespace evidentia
