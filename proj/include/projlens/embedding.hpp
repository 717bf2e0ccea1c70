#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "projlens/common.hpp"
#include "projlens/io.hpp"
#include "projlens/rng.hpp"

namespace projlens {

using Vec = Eigen::VectorXd;

inline Vec l2_normalize(Vec v) {
  const double n = v.norm();
  if (n == 0.0) throw_runtime("cannot normalize zero vector");
  return v / n;
}

inline double cosine(const Vec& a, const Vec& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0.0 || nb == 0.0) return 0.0;
  return a.dot(b) / (na * nb);
}

// Text embedding provider. Real runs plug a sentence-embedding service in;
// tests and offline runs use the deterministic providers below. provider_id
// is recorded next to every artifact derived from the embeddings.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual std::string provider_id() const = 0;
  virtual int dim() const = 0;
  virtual std::vector<Vec> embed(const std::vector<std::string>& texts) = 0;

  Vec embed_one(const std::string& text) { return embed({text})[0]; }
};

// Seeded hash -> Gaussian -> normalize. Distinct strings get independent
// near-orthogonal unit vectors, stable across runs and platforms.
class HashEmbeddingProvider : public EmbeddingProvider {
 public:
  HashEmbeddingProvider(int dim, uint64_t seed) : dim_(dim), seed_(seed) {
    if (dim <= 0) throw_config("embedding dim must be positive");
  }

  std::string provider_id() const override {
    return "hash:d" + std::to_string(dim_) + ":s" + std::to_string(seed_);
  }
  int dim() const override { return dim_; }

  std::vector<Vec> embed(const std::vector<std::string>& texts) override {
    std::vector<Vec> out;
    out.reserve(texts.size());
    for (const auto& t : texts) {
      Rng rng(derive_seed(seed_, "hash_embed:" + t));
      Vec v(dim_);
      for (int i = 0; i < dim_; ++i) v[i] = rng.normal();
      out.push_back(l2_normalize(std::move(v)));
    }
    return out;
  }

 private:
  int dim_;
  uint64_t seed_;
};

// Fixed table for known strings, hash fallback otherwise. The synthetic
// world uses this to plant cluster structure over its label set.
class TableEmbeddingProvider : public EmbeddingProvider {
 public:
  TableEmbeddingProvider(std::string id, std::map<std::string, Vec> table, int dim, uint64_t fallback_seed)
      : id_(std::move(id)), table_(std::move(table)), fallback_(dim, fallback_seed) {}

  std::string provider_id() const override { return id_; }
  int dim() const override { return fallback_.dim(); }

  std::vector<Vec> embed(const std::vector<std::string>& texts) override {
    std::vector<Vec> out;
    out.reserve(texts.size());
    for (const auto& t : texts) {
      const auto it = table_.find(t);
      if (it != table_.end()) out.push_back(it->second);
      else out.push_back(fallback_.embed({t})[0]);
    }
    return out;
  }

  const std::map<std::string, Vec>& table() const { return table_; }

 private:
  std::string id_;
  std::map<std::string, Vec> table_;
  HashEmbeddingProvider fallback_;
};

// Memoizing wrapper keyed by (provider_id, text) with an optional JSONL
// disk cache, so repeated runs against a remote provider are network-free.
class CachingEmbeddingProvider : public EmbeddingProvider {
 public:
  explicit CachingEmbeddingProvider(std::shared_ptr<EmbeddingProvider> inner,
                                    fs::path cache_file = {})
      : inner_(std::move(inner)), cache_file_(std::move(cache_file)) {
    if (!cache_file_.empty() && fs::exists(cache_file_)) {
      for (const auto& line : read_lines(cache_file_)) {
        if (trim(line).empty()) continue;
        json j = parse_json_strict(line, cache_file_.string());
        if (j.value("provider", "") != inner_->provider_id()) continue;
        Vec v(j["vector"].size());
        for (size_t i = 0; i < j["vector"].size(); ++i) v[static_cast<int>(i)] = j["vector"][i].get<double>();
        cache_[j["text"].get<std::string>()] = std::move(v);
      }
    }
  }

  std::string provider_id() const override { return inner_->provider_id(); }
  int dim() const override { return inner_->dim(); }

  std::vector<Vec> embed(const std::vector<std::string>& texts) override {
    std::vector<std::string> missing;
    for (const auto& t : texts)
      if (!cache_.count(t)) missing.push_back(t);
    if (!missing.empty()) {
      std::vector<Vec> fresh;
      try {
        fresh = inner_->embed(missing);
      } catch (const std::exception& e) {
        std::string names;
        for (const auto& m : missing) names += (names.empty() ? "" : ", ") + m;
        throw_runtime("embedding provider failed and no cache entry for: " + names +
                      " (" + e.what() + ")");
      }
      std::string appended;
      for (size_t i = 0; i < missing.size(); ++i) {
        cache_[missing[i]] = fresh[i];
        if (!cache_file_.empty()) {
          json j;
          j["provider"] = inner_->provider_id();
          j["text"] = missing[i];
          j["vector"] = std::vector<double>(fresh[i].data(), fresh[i].data() + fresh[i].size());
          appended += j.dump();
          appended += '\n';
        }
      }
      if (!appended.empty()) {
        fs::create_directories(cache_file_.parent_path().empty() ? "." : cache_file_.parent_path());
        std::ofstream out(cache_file_, std::ios::app | std::ios::binary);
        out << appended;
      }
    }
    std::vector<Vec> out;
    out.reserve(texts.size());
    for (const auto& t : texts) out.push_back(cache_.at(t));
    return out;
  }

 private:
  std::shared_ptr<EmbeddingProvider> inner_;
  fs::path cache_file_;
  std::map<std::string, Vec> cache_;
};

}  // namespace projlens
