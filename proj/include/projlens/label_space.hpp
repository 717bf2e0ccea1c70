#pragma once

#include <map>
#include <optional>
#include <regex>
#include <set>
#include <string>
#include <vector>

#include "projlens/corpus.hpp"
#include "projlens/embedding.hpp"
#include "projlens/rng.hpp"

namespace projlens {

struct LabelVocabEntry {
  size_t count = 0;
  std::set<std::string> origin_synsets;

  bool operator==(const LabelVocabEntry&) const = default;
};

struct LabelVocab {
  std::map<std::string, LabelVocabEntry> entries;

  bool operator==(const LabelVocab&) const = default;
};

enum class LabelGroup { SEEN, UNSEEN };

inline std::string to_string(LabelGroup g) { return g == LabelGroup::SEEN ? "seen" : "unseen"; }

struct LabelSplit {
  std::map<std::string, LabelGroup> assignment;
  std::vector<Vec> centroids;
  uint64_t seed = 0;
  std::string provider_id;

  bool is_seen(const std::string& label) const {
    const auto it = assignment.find(label);
    if (it == assignment.end()) throw_runtime("label not in split: " + label);
    return it->second == LabelGroup::SEEN;
  }

  std::vector<std::string> labels(LabelGroup g) const {
    std::vector<std::string> out;
    for (const auto& [label, group] : assignment)
      if (group == g) out.push_back(label);
    return out;
  }
};

// "dog.n.01" -> lemma "dog"; multi-word lemmas use underscores in synset
// notation and become spaced phrases. Non-synset labels return nullopt.
inline std::optional<std::string> synset_lemma(const std::string& raw) {
  static const std::regex synset_re(R"(^(.+)\.([a-z])\.(\d+)$)");
  std::smatch m;
  if (!std::regex_match(raw, m, synset_re)) return std::nullopt;
  std::string lemma = to_lower(m[1].str());
  std::replace(lemma.begin(), lemma.end(), '_', ' ');
  return lemma;
}

// Synsets sharing a lemma: annotations of the most frequent synset survive
// (ties -> lexicographically smaller synset) and are relabeled with the bare
// lemma. Plain labels pass through lowercased and trimmed.
inline std::pair<Corpus, LabelVocab> dedup_synsets_by_lemma(const Corpus& corpus) {
  struct SynsetInfo {
    size_t count = 0;
  };
  // lemma -> synset -> count, for synset-style labels only
  std::map<std::string, std::map<std::string, SynsetInfo>> by_lemma;
  for (const auto& a : corpus.annotations) {
    const auto lemma = synset_lemma(a.raw_label);
    if (lemma) by_lemma[*lemma][a.raw_label].count++;
  }

  std::map<std::string, std::string> keeper;  // lemma -> surviving synset
  for (const auto& [lemma, synsets] : by_lemma) {
    std::string best;
    size_t best_count = 0;
    for (const auto& [syn, info] : synsets) {
      if (info.count > best_count || (info.count == best_count && (best.empty() || syn < best))) {
        best = syn;
        best_count = info.count;
      }
    }
    keeper[lemma] = best;
  }

  Corpus out;
  LabelVocab vocab;
  std::map<std::string, bool> used_images;
  for (const auto& a : corpus.annotations) {
    const auto lemma = synset_lemma(a.raw_label);
    std::string label;
    if (lemma) {
      if (keeper.at(*lemma) != a.raw_label) continue;  // losing synset
      label = *lemma;
      vocab.entries[label].origin_synsets.insert(a.raw_label);
    } else {
      label = to_lower(trim(a.raw_label));
      if (label.empty()) continue;
    }
    RegionAnnotation kept = a;
    kept.raw_label = label;
    vocab.entries[label].count++;
    used_images[kept.image_id] = true;
    out.annotations.push_back(std::move(kept));
  }
  for (const auto& im : corpus.images)
    if (used_images.count(im.image_id)) out.images.push_back(im);
  out.provenance = corpus.provenance;
  out.provenance.digest = detail::corpus_digest(out);
  return {std::move(out), std::move(vocab)};
}

// Labels with fewer than min_count surviving annotations are removed along
// with their annotations. Strict less-than.
inline std::pair<Corpus, LabelVocab> filter_rare_labels(const Corpus& corpus,
                                                        const LabelVocab& vocab,
                                                        size_t min_count = 10) {
  if (min_count < 1) throw_config("min_count must be >= 1");
  Corpus out;
  LabelVocab kept;
  for (const auto& [label, entry] : vocab.entries)
    if (entry.count >= min_count) kept.entries[label] = LabelVocabEntry{0, entry.origin_synsets};

  std::map<std::string, bool> used_images;
  for (const auto& a : corpus.annotations) {
    const auto it = kept.entries.find(a.raw_label);
    if (it == kept.entries.end()) continue;
    it->second.count++;
    used_images[a.image_id] = true;
    out.annotations.push_back(a);
  }
  for (const auto& im : corpus.images)
    if (used_images.count(im.image_id)) out.images.push_back(im);
  out.provenance = corpus.provenance;
  out.provenance.digest = detail::corpus_digest(out);
  return {std::move(out), std::move(kept)};
}

// One unit vector per vocabulary label.
inline std::map<std::string, Vec> embed_labels(const LabelVocab& vocab, EmbeddingProvider& provider) {
  std::vector<std::string> labels;
  for (const auto& [label, entry] : vocab.entries) labels.push_back(label);
  const auto vecs = provider.embed(labels);
  std::map<std::string, Vec> out;
  for (size_t i = 0; i < labels.size(); ++i) out[labels[i]] = l2_normalize(vecs[i]);
  return out;
}

struct KMeansResult {
  std::vector<int> assignment;    // per input vector
  std::vector<Vec> centroids;     // unit norm
  double objective = 0.0;         // sum of point-to-assigned-centroid cosines
  int iterations = 0;
};

namespace detail {

inline int nearest_centroid(const Vec& x, const std::vector<Vec>& centroids) {
  int best = 0;
  double best_cos = -2.0;
  for (size_t c = 0; c < centroids.size(); ++c) {
    const double s = x.dot(centroids[c]);
    if (s > best_cos) {
      best_cos = s;
      best = static_cast<int>(c);
    }
  }
  return best;
}

// k-means++ style seeding under cosine distance: first centroid uniform,
// later ones with probability proportional to (1 - cos) to the nearest
// already-chosen centroid.
inline std::vector<Vec> kmeanspp_init(const std::vector<Vec>& points, int k, Rng& rng) {
  std::vector<Vec> centroids;
  centroids.push_back(points[rng.below(points.size())]);
  while (static_cast<int>(centroids.size()) < k) {
    std::vector<double> weights(points.size());
    double total = 0.0;
    for (size_t i = 0; i < points.size(); ++i) {
      double best = -2.0;
      for (const auto& c : centroids) best = std::max(best, points[i].dot(c));
      weights[i] = std::max(0.0, 1.0 - best);
      total += weights[i];
    }
    if (total <= 0.0) {
      // all points coincide with some centroid; pick uniformly
      centroids.push_back(points[rng.below(points.size())]);
      continue;
    }
    double r = rng.unit() * total;
    size_t chosen = points.size() - 1;
    for (size_t i = 0; i < points.size(); ++i) {
      r -= weights[i];
      if (r <= 0.0) {
        chosen = i;
        break;
      }
    }
    centroids.push_back(points[chosen]);
  }
  return centroids;
}

inline KMeansResult spherical_kmeans_once(const std::vector<Vec>& points, int k, Rng& rng,
                                          int max_iters, double tol) {
  KMeansResult res;
  res.centroids = kmeanspp_init(points, k, rng);
  res.assignment.assign(points.size(), -1);

  for (int iter = 0; iter < max_iters; ++iter) {
    res.iterations = iter + 1;
    bool changed = false;
    for (size_t i = 0; i < points.size(); ++i) {
      const int c = nearest_centroid(points[i], res.centroids);
      if (c != res.assignment[i]) {
        res.assignment[i] = c;
        changed = true;
      }
    }

    // empty cluster: reseed from the point least similar to its centroid
    for (int c = 0; c < k; ++c) {
      if (std::count(res.assignment.begin(), res.assignment.end(), c) > 0) continue;
      size_t worst = 0;
      double worst_cos = 2.0;
      for (size_t i = 0; i < points.size(); ++i) {
        const double s = points[i].dot(res.centroids[res.assignment[i]]);
        if (s < worst_cos) {
          worst_cos = s;
          worst = i;
        }
      }
      res.centroids[c] = points[worst];
      res.assignment[worst] = c;
      changed = true;
    }

    double movement = 0.0;
    for (int c = 0; c < k; ++c) {
      Vec sum = Vec::Zero(points[0].size());
      for (size_t i = 0; i < points.size(); ++i)
        if (res.assignment[i] == c) sum += points[i];
      if (sum.norm() > 1e-12) {
        Vec updated = sum / sum.norm();
        movement = std::max(movement, (updated - res.centroids[c]).norm());
        res.centroids[c] = std::move(updated);
      }
    }

    if (!changed || movement < tol) break;
  }

  // final assignment pass so every point sits at its argmax-cosine centroid
  for (size_t i = 0; i < points.size(); ++i)
    res.assignment[i] = nearest_centroid(points[i], res.centroids);
  res.objective = 0.0;
  for (size_t i = 0; i < points.size(); ++i)
    res.objective += points[i].dot(res.centroids[res.assignment[i]]);
  return res;
}

}  // namespace detail

// Spherical k-means: cosine assignment, renormalized mean centroids,
// k-means++ seeding with restarts, best objective kept.
inline KMeansResult spherical_kmeans(const std::vector<Vec>& points, int k, uint64_t seed,
                                     int max_iters = 100, double tol = 1e-6, int restarts = 10) {
  if (points.empty()) throw_config("spherical_kmeans: no points");
  std::set<std::vector<double>> distinct;
  for (const auto& p : points)
    distinct.insert(std::vector<double>(p.data(), p.data() + p.size()));
  if (static_cast<size_t>(k) > distinct.size())
    throw_config("spherical_kmeans: K exceeds number of distinct points");
  for (const auto& p : points)
    if (std::abs(p.norm() - 1.0) > 1e-6) throw_config("spherical_kmeans: points must be unit-norm");

  KMeansResult best;
  best.objective = -1e300;
  for (int r = 0; r < restarts; ++r) {
    Rng rng = derive_rng(seed, "kmeans_restart:" + std::to_string(r));
    KMeansResult res = detail::spherical_kmeans_once(points, k, rng, max_iters, tol);
    if (res.objective > best.objective) best = std::move(res);
  }
  return best;
}

// The cluster with more unique labels becomes SEEN; ties go to cluster 0.
inline LabelSplit assign_split(const KMeansResult& clustering,
                               const std::vector<std::string>& labels, uint64_t seed,
                               const std::string& provider_id,
                               std::optional<int> seen_cluster_override = std::nullopt) {
  if (clustering.assignment.size() != labels.size())
    throw_config("assign_split: assignment/label size mismatch");
  std::vector<size_t> sizes(clustering.centroids.size(), 0);
  for (int c : clustering.assignment) sizes[static_cast<size_t>(c)]++;

  int seen_cluster = 0;
  if (seen_cluster_override) {
    seen_cluster = *seen_cluster_override;
    if (seen_cluster < 0 || static_cast<size_t>(seen_cluster) >= sizes.size())
      throw_config("assign_split: seen cluster override out of range");
  } else {
    for (size_t c = 1; c < sizes.size(); ++c)
      if (sizes[c] > sizes[static_cast<size_t>(seen_cluster)]) seen_cluster = static_cast<int>(c);
  }

  LabelSplit split;
  split.centroids = clustering.centroids;
  split.seed = seed;
  split.provider_id = provider_id;
  for (size_t i = 0; i < labels.size(); ++i)
    split.assignment[labels[i]] =
        clustering.assignment[i] == seen_cluster ? LabelGroup::SEEN : LabelGroup::UNSEEN;
  return split;
}

// Split file: {label -> "seen"|"unseen"}, centroids, seed, provider id.
inline void save_label_split(const LabelSplit& split, const fs::path& path,
                             const std::string& ordering_note = "") {
  json j;
  json assign = json::object();
  for (const auto& [label, group] : split.assignment) assign[label] = to_string(group);
  j["assignment"] = assign;
  j["centroids"] = json::array();
  for (const auto& c : split.centroids)
    j["centroids"].push_back(std::vector<double>(c.data(), c.data() + c.size()));
  j["seed"] = split.seed;
  j["provider_id"] = split.provider_id;
  if (!ordering_note.empty()) j["ordering"] = ordering_note;
  write_atomic(path, j.dump(2) + "\n");
}

inline LabelSplit load_label_split(const fs::path& path) {
  json j = parse_json_strict(read_file(path), path.string());
  LabelSplit split;
  for (const auto& [label, group] : j["assignment"].items())
    split.assignment[label] = group.get<std::string>() == "seen" ? LabelGroup::SEEN : LabelGroup::UNSEEN;
  for (const auto& c : j["centroids"]) {
    Vec v(c.size());
    for (size_t i = 0; i < c.size(); ++i) v[static_cast<int>(i)] = c[i].get<double>();
    split.centroids.push_back(std::move(v));
  }
  split.seed = j["seed"].get<uint64_t>();
  split.provider_id = j["provider_id"].get<std::string>();
  return split;
}

}  // namespace projlens
