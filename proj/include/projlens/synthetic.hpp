#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "projlens/corpus.hpp"
#include "projlens/embedding.hpp"
#include "projlens/tiny_backends.hpp"

namespace projlens {

// Desk-scale world with planted structure:
//   - label embeddings live in clusters (alpha controls tightness), so the
//     k-means split and the key-coherence statistics have real structure to
//     find;
//   - every region's latent is a fixed linear image of its label embedding
//     plus noise, so a linear projection into a LM whose label-token
//     embeddings are a linear image of the same vectors provably suffices,
//     for held-out labels as much as for trained ones.
struct SyntheticWorldConfig {
  uint64_t seed = 42;
  int n_clusters = 8;
  int labels_per_cluster = 5;
  double cluster_alpha = 0.75;  // weight of the cluster center in each label embedding
  int embed_dim = 16;
  int latent_dim = 16;
  int n_images = 200;
  int regions_per_image = 3;
  int image_width = 256;
  int image_height = 256;
  double noise_sigma = 0.05;    // per-entry latent noise
  double outlier_frac = 0.02;   // boxes violating the area filter, for filter realism
  int filler_vocab = 260;       // non-label word tokens; real vocabularies dwarf the label set

  int n_labels() const { return n_clusters * labels_per_cluster; }

  std::string digest() const {
    json j;
    j["seed"] = seed;
    j["n_clusters"] = n_clusters;
    j["labels_per_cluster"] = labels_per_cluster;
    j["cluster_alpha"] = cluster_alpha;
    j["embed_dim"] = embed_dim;
    j["latent_dim"] = latent_dim;
    j["n_images"] = n_images;
    j["regions_per_image"] = regions_per_image;
    j["noise_sigma"] = noise_sigma;
    j["outlier_frac"] = outlier_frac;
    j["filler_vocab"] = filler_vocab;
    return digest_hex(j.dump());
  }
};

namespace detail {

// Pronounceable distinct pseudo-words ("bakora", "degilu", ...), stable in
// the label index.
inline std::string pseudo_word(int index) {
  static const char* consonants = "bdfgklmnprstvz";
  static const char* vowels = "aeiou";
  std::string word;
  int x = index;
  for (int s = 0; s < 3; ++s) {
    word += consonants[x % 14];
    x /= 14;
    word += vowels[x % 5];
    x /= 5;
  }
  return word;
}

}  // namespace detail

class SyntheticWorld {
 public:
  explicit SyntheticWorld(SyntheticWorldConfig config) : cfg_(std::move(config)) {
    Rng rng = derive_rng(cfg_.seed, "synthetic_world");
    const double beta = std::sqrt(1.0 - cfg_.cluster_alpha * cfg_.cluster_alpha);

    std::vector<Vec> centers;
    for (int c = 0; c < cfg_.n_clusters; ++c) {
      Vec v(cfg_.embed_dim);
      for (int i = 0; i < cfg_.embed_dim; ++i) v[i] = rng.normal();
      centers.push_back(l2_normalize(std::move(v)));
    }
    for (int idx = 0; idx < cfg_.n_labels(); ++idx) {
      const int cluster = idx / cfg_.labels_per_cluster;
      Vec unique(cfg_.embed_dim);
      for (int i = 0; i < cfg_.embed_dim; ++i) unique[i] = rng.normal();
      unique = l2_normalize(std::move(unique));
      const std::string name = detail::pseudo_word(idx);
      labels_.push_back(name);
      label_cluster_[name] = cluster;
      embeddings_[name] = l2_normalize(cfg_.cluster_alpha * centers[static_cast<size_t>(cluster)] +
                                       beta * unique);
    }

    if (cfg_.latent_dim < cfg_.embed_dim)
      throw_config("synthetic world: latent_dim must be >= embed_dim");
    latent_map_ = detail::random_orthonormal(rng, cfg_.latent_dim, cfg_.embed_dim);
  }

  const SyntheticWorldConfig& config() const { return cfg_; }
  const std::vector<std::string>& labels() const { return labels_; }

  // label words plus filler words for the reference tokenizer
  std::vector<std::string> tokenizer_words() const {
    std::vector<std::string> words = labels_;
    for (int i = 0; i < cfg_.filler_vocab; ++i)
      words.push_back(detail::pseudo_word(1000 + i));
    return words;
  }
  const std::map<std::string, Vec>& label_embeddings() const { return embeddings_; }
  int cluster_of(const std::string& label) const { return label_cluster_.at(label); }
  const Mat& latent_map() const { return latent_map_; }

  std::string provider_id() const {
    return "planted:s" + std::to_string(cfg_.seed) + ":d" + std::to_string(cfg_.embed_dim);
  }

  std::shared_ptr<EmbeddingProvider> embedding_provider() const {
    return std::make_shared<TableEmbeddingProvider>(provider_id(), embeddings_, cfg_.embed_dim,
                                                    derive_seed(cfg_.seed, "planted_fallback"));
  }

  // Token table for the reference LM: the space-prefixed single-token form
  // of each label maps to its planted embedding.
  std::map<std::string, Vec> semantic_token_table() const {
    std::map<std::string, Vec> out;
    for (const auto& [label, vec] : embeddings_) out[" " + label] = vec;
    return out;
  }

  Vec region_latent(const std::string& label, Rng& noise_rng) const {
    Vec latent = latent_map_ * embeddings_.at(label);
    for (int i = 0; i < latent.size(); ++i) latent[i] += noise_rng.normal() * cfg_.noise_sigma;
    return latent;
  }

 private:
  SyntheticWorldConfig cfg_;
  std::vector<std::string> labels_;
  std::map<std::string, int> label_cluster_;
  std::map<std::string, Vec> embeddings_;
  Mat latent_map_;
};

// Writes one latent file per image and returns the corpus referencing them.
// Deterministic in (config, image_dir-independent content): file contents
// depend only on the seed.
inline IngestResult generate_synthetic_corpus(const SyntheticWorld& world, const fs::path& image_dir) {
  const auto& cfg = world.config();
  fs::create_directories(image_dir);

  IngestResult res;
  Rng rng = derive_rng(cfg.seed, "synthetic_corpus");
  for (int i = 0; i < cfg.n_images; ++i) {
    const std::string image_id = "syn" + std::to_string(i);
    const fs::path file = image_dir / (image_id + ".json");

    json regions = json::array();
    for (int r = 0; r < cfg.regions_per_image; ++r) {
      const std::string label = world.labels()[rng.below(world.labels().size())];

      // box with a mid-range area fraction; occasionally an outlier that the
      // area filter should discard
      const double u = rng.unit();
      double frac;
      if (u < cfg.outlier_frac / 2) frac = 0.0005 + rng.unit() * 0.001;   // below 0.2%
      else if (u < cfg.outlier_frac) frac = 0.55 + rng.unit() * 0.3;      // above 50%
      else frac = 0.01 + rng.unit() * 0.35;
      const double aspect = 0.5 + rng.unit();
      double w = std::sqrt(frac * cfg.image_width * cfg.image_height * aspect);
      double h = frac * cfg.image_width * cfg.image_height / w;
      w = std::min(w, cfg.image_width - 2.0);
      h = std::min(h, cfg.image_height - 2.0);
      const double x1 = rng.unit() * (cfg.image_width - w);
      const double y1 = rng.unit() * (cfg.image_height - h);
      const PixelBox box{std::round(x1), std::round(y1), std::round(x1 + w), std::round(y1 + h)};

      Rng noise = derive_rng(cfg.seed, "latent:" + image_id + ":" + std::to_string(r));
      const Vec latent = world.region_latent(label, noise);

      json region;
      region["box"] = box;
      region["label"] = label;
      region["latent"] = std::vector<double>(latent.data(), latent.data() + latent.size());
      regions.push_back(std::move(region));

      RegionAnnotation ann;
      ann.annotation_id = image_id + "#" + std::to_string(r);
      ann.image_id = image_id;
      ann.box = box;
      ann.raw_label = label;
      ann.source = AnnotationSource::SYNTHETIC;
      res.stats.annotations_seen++;
      res.corpus.annotations.push_back(std::move(ann));
    }

    json file_content;
    file_content["image_id"] = image_id;
    file_content["regions"] = std::move(regions);
    write_atomic(file, file_content.dump());

    ImageRecord im;
    im.image_id = image_id;
    im.width = cfg.image_width;
    im.height = cfg.image_height;
    im.uri = "file:" + file.string();
    res.corpus.images.push_back(std::move(im));
  }

  detail::sort_records(res.corpus);
  res.corpus.provenance.source_desc = "synthetic:" + world.config().digest();
  res.corpus.provenance.ingested_at = iso8601_now();
  res.corpus.provenance.digest = detail::corpus_digest(res.corpus);
  return res;
}

// Encoder + LM pair wired to the planted world. The encoder reads the latent
// files; the LM's label-token embedding rows are a linear image of the same
// planted vectors.
inline ReferenceBackends make_planted_backends(const SyntheticWorld& world, const ReferenceDims& dims,
                                               uint64_t backend_seed) {
  ReferenceBackends b;
  b.tokenizer = std::make_shared<TinyTokenizer>(world.tokenizer_words());
  TinyLMConfig cfg;
  cfg.seed = backend_seed;
  cfg.d_lm = dims.d_lm;
  cfg.d_ffn = dims.d_ffn;
  cfg.n_layers = dims.n_layers;
  cfg.arch = dims.arch;
  cfg.semantic_tokens = world.semantic_token_table();
  cfg.semantic_eos_affinity = 0.5;
  cfg.logit_temp = std::sqrt(static_cast<double>(dims.d_lm)) / 2.0;
  b.lm = std::make_shared<TinyLM>(cfg, b.tokenizer);
  b.encoder = std::make_shared<PlantedRegionEncoder>(derive_seed(backend_seed, "encoder"), dims.d_v,
                                                     dims.num_patches, world.config().latent_dim);
  return b;
}

}  // namespace projlens
