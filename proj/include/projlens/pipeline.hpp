#pragma once

#include <chrono>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "projlens/corpus.hpp"
#include "projlens/http_embedding.hpp"
#include "projlens/label_space.hpp"
#include "projlens/mcqa.hpp"
#include "projlens/probe.hpp"
#include "projlens/prompt.hpp"
#include "projlens/stats.hpp"
#include "projlens/svg.hpp"
#include "projlens/synthetic.hpp"
#include "projlens/train.hpp"

#ifndef PROJLENS_VERSION
#define PROJLENS_VERSION "0.0.0-dev"
#endif

namespace projlens {

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed,
                       const std::string& context) {
  if (!j.is_object()) throw_config(context + ": expected an object");
  for (const auto& [key, value] : j.items())
    if (!allowed.count(key)) throw_config(context + ": unknown key '" + key + "'");
}

}  // namespace detail

struct CorpusSourceConfig {
  std::string type;  // vg_like | openimages_like | synthetic
  fs::path regions;             // vg_like
  fs::path boxes;               // openimages_like
  fs::path class_descriptions;  // openimages_like
  fs::path image_meta;          // vg_like / openimages_like
  SyntheticWorldConfig synthetic;

  static CorpusSourceConfig from_json(const json& j, const std::string& context) {
    detail::check_keys(j, {"type", "regions", "boxes", "class_descriptions", "image_meta", "synthetic"},
                       context);
    CorpusSourceConfig c;
    c.type = j.value("type", "");
    if (c.type == "vg_like") {
      if (!j.contains("regions") || !j.contains("image_meta"))
        throw_config(context + ": vg_like needs regions and image_meta");
      c.regions = j["regions"].get<std::string>();
      c.image_meta = j["image_meta"].get<std::string>();
    } else if (c.type == "openimages_like") {
      if (!j.contains("boxes") || !j.contains("class_descriptions") || !j.contains("image_meta"))
        throw_config(context + ": openimages_like needs boxes, class_descriptions, image_meta");
      c.boxes = j["boxes"].get<std::string>();
      c.class_descriptions = j["class_descriptions"].get<std::string>();
      c.image_meta = j["image_meta"].get<std::string>();
    } else if (c.type == "synthetic") {
      if (!j.contains("synthetic")) throw_config(context + ": synthetic needs a synthetic block");
      const json& s = j["synthetic"];
      detail::check_keys(s,
                         {"seed", "n_clusters", "labels_per_cluster", "cluster_alpha", "embed_dim",
                          "latent_dim", "n_images", "regions_per_image", "image_width",
                          "image_height", "noise_sigma", "outlier_frac", "filler_vocab"},
                         context + ".synthetic");
      auto& w = c.synthetic;
      w.seed = s.value("seed", w.seed);
      w.n_clusters = s.value("n_clusters", w.n_clusters);
      w.labels_per_cluster = s.value("labels_per_cluster", w.labels_per_cluster);
      w.cluster_alpha = s.value("cluster_alpha", w.cluster_alpha);
      w.embed_dim = s.value("embed_dim", w.embed_dim);
      w.latent_dim = s.value("latent_dim", w.latent_dim);
      w.n_images = s.value("n_images", w.n_images);
      w.regions_per_image = s.value("regions_per_image", w.regions_per_image);
      w.image_width = s.value("image_width", w.image_width);
      w.image_height = s.value("image_height", w.image_height);
      w.noise_sigma = s.value("noise_sigma", w.noise_sigma);
      w.outlier_frac = s.value("outlier_frac", w.outlier_frac);
      w.filler_vocab = s.value("filler_vocab", w.filler_vocab);
    } else {
      throw_config(context + ": type must be vg_like, openimages_like, or synthetic");
    }
    return c;
  }
};

struct EmbeddingConfig {
  std::string provider = "hash";  // hash | planted | http
  int dim = 16;
  uint64_t seed = 7;
  std::string url;  // http

  static EmbeddingConfig from_json(const json& j) {
    detail::check_keys(j, {"provider", "dim", "seed", "url"}, "embedding");
    EmbeddingConfig c;
    c.provider = j.value("provider", c.provider);
    c.dim = j.value("dim", c.dim);
    c.seed = j.value("seed", c.seed);
    c.url = j.value("url", c.url);
    if (c.provider != "hash" && c.provider != "planted" && c.provider != "http")
      throw_config("embedding.provider must be hash, planted, or http");
    if (c.provider == "http" && c.url.empty()) throw_config("embedding.provider http needs url");
    if (c.dim <= 0) throw_config("embedding.dim must be positive");
    return c;
  }
};

struct BackendsConfig {
  std::string encoder = "hash";  // hash | planted
  int d_v = 16;
  int num_patches = 4;
  TinyLMConfig lm;
  bool lm_semantic = false;  // plant label-token embeddings (synthetic corpora only)

  static BackendsConfig from_json(const json& j) {
    detail::check_keys(j, {"encoder", "d_v", "num_patches", "lm"}, "backends");
    BackendsConfig c;
    c.encoder = j.value("encoder", c.encoder);
    c.d_v = j.value("d_v", c.d_v);
    c.num_patches = j.value("num_patches", c.num_patches);
    if (c.encoder != "hash" && c.encoder != "planted")
      throw_config("backends.encoder must be hash or planted");
    if (j.contains("lm")) {
      const json& l = j["lm"];
      detail::check_keys(l,
                         {"seed", "d_lm", "d_ffn", "n_layers", "arch", "semantic",
                          "semantic_eos_affinity", "logit_temp"},
                         "backends.lm");
      c.lm.seed = l.value("seed", c.lm.seed);
      c.lm.d_lm = l.value("d_lm", c.lm.d_lm);
      c.lm.d_ffn = l.value("d_ffn", c.lm.d_ffn);
      c.lm.n_layers = l.value("n_layers", c.lm.n_layers);
      if (l.contains("arch")) c.lm.arch = ffn_arch_from_string(l["arch"].get<std::string>());
      c.lm_semantic = l.value("semantic", false);
      c.lm.semantic_eos_affinity = l.value("semantic_eos_affinity", 0.5);
      c.lm.logit_temp = l.value("logit_temp", 0.0);
    }
    return c;
  }
};

struct AblationConfig {
  std::vector<AblationMethod> methods{AblationMethod::CLASS_EXCLUSIVE,
                                      AblationMethod::CLASS_PRESERVING};
  std::vector<double> proportions{0.5, 0.25, 0.1, 0.05, 0.01};

  static AblationConfig from_json(const json& j) {
    detail::check_keys(j, {"methods", "proportions"}, "ablation");
    AblationConfig c;
    if (j.contains("methods")) {
      c.methods.clear();
      for (const auto& m : j["methods"]) {
        const std::string name = m.get<std::string>();
        if (name == "class_exclusive") c.methods.push_back(AblationMethod::CLASS_EXCLUSIVE);
        else if (name == "class_preserving") c.methods.push_back(AblationMethod::CLASS_PRESERVING);
        else throw_config("ablation.methods: unknown method " + name);
      }
    }
    if (j.contains("proportions")) {
      c.proportions.clear();
      for (const auto& p : j["proportions"]) c.proportions.push_back(p.get<double>());
    }
    return c;
  }
};

struct ProbeConfig {
  int top_k = 3;
  double coherence_min = 0.5;
  size_t exemplars = 10;
  size_t max_prefixes = 500;

  static ProbeConfig from_json(const json& j) {
    detail::check_keys(j, {"top_k", "coherence_min", "exemplars", "max_prefixes"}, "probe");
    ProbeConfig c;
    c.top_k = j.value("top_k", c.top_k);
    c.coherence_min = j.value("coherence_min", c.coherence_min);
    c.exemplars = j.value("exemplars", c.exemplars);
    c.max_prefixes = j.value("max_prefixes", c.max_prefixes);
    return c;
  }
};

struct RunConfig {
  fs::path out_dir;
  CorpusSourceConfig corpus;
  std::optional<CorpusSourceConfig> ood_corpus;

  size_t min_label_count = 10;
  double min_area_frac = 0.002;
  double max_area_frac = 0.5;
  size_t mcqa_min_count = 20;
  size_t mcqa_cap = 200;
  double ood_dedup_threshold = 0.9;

  uint64_t split_seed = 1;
  uint64_t mcqa_seed = 2;
  uint64_t train_seed = 3;
  uint64_t probe_seed = 4;

  EmbeddingConfig embedding;
  int kmeans_restarts = 10;
  int kmeans_max_iters = 100;
  double kmeans_tol = 1e-6;
  std::string seen_rule = "larger";  // larger | cluster0 | cluster1
  double train_frac = 0.8;

  BackendsConfig backends;
  bool projection_bias = true;
  TrainConfig train;
  AblationConfig ablation;
  ProbeConfig probe;
  std::string prompt_template = default_prompt_template();

  json raw;  // normalized config document, used for stage digests

  static RunConfig from_json(const json& j);
  static RunConfig load(const fs::path& path);
};

inline RunConfig RunConfig::from_json(const json& j) {
  detail::check_keys(j,
                     {"out_dir", "corpus", "ood_corpus", "filters", "seeds", "embedding",
                      "label_split", "image_split", "backends", "projection", "train", "ablation",
                      "probe", "prompt_template"},
                     "config");
  RunConfig c;
  if (!j.contains("out_dir")) throw_config("config: out_dir is required");
  c.out_dir = j["out_dir"].get<std::string>();
  if (!j.contains("corpus")) throw_config("config: corpus is required");
  c.corpus = CorpusSourceConfig::from_json(j["corpus"], "corpus");
  if (j.contains("ood_corpus"))
    c.ood_corpus = CorpusSourceConfig::from_json(j["ood_corpus"], "ood_corpus");

  if (j.contains("filters")) {
    const json& f = j["filters"];
    detail::check_keys(f,
                       {"min_label_count", "min_area_frac", "max_area_frac", "mcqa_min_count",
                        "mcqa_cap", "ood_dedup_threshold"},
                       "filters");
    c.min_label_count = f.value("min_label_count", c.min_label_count);
    c.min_area_frac = f.value("min_area_frac", c.min_area_frac);
    c.max_area_frac = f.value("max_area_frac", c.max_area_frac);
    c.mcqa_min_count = f.value("mcqa_min_count", c.mcqa_min_count);
    c.mcqa_cap = f.value("mcqa_cap", c.mcqa_cap);
    c.ood_dedup_threshold = f.value("ood_dedup_threshold", c.ood_dedup_threshold);
    if (c.min_area_frac < 0 || c.max_area_frac > 1 || c.min_area_frac > c.max_area_frac)
      throw_config("filters: area fractions out of range");
    if (c.ood_dedup_threshold < -1 || c.ood_dedup_threshold > 1)
      throw_config("filters: ood_dedup_threshold out of range");
  }
  if (j.contains("seeds")) {
    const json& s = j["seeds"];
    detail::check_keys(s, {"split_seed", "mcqa_seed", "train_seed", "probe_seed"}, "seeds");
    c.split_seed = s.value("split_seed", c.split_seed);
    c.mcqa_seed = s.value("mcqa_seed", c.mcqa_seed);
    c.train_seed = s.value("train_seed", c.train_seed);
    c.probe_seed = s.value("probe_seed", c.probe_seed);
  }
  if (j.contains("embedding")) c.embedding = EmbeddingConfig::from_json(j["embedding"]);
  if (j.contains("label_split")) {
    const json& l = j["label_split"];
    detail::check_keys(l, {"restarts", "max_iters", "tol", "seen_rule"}, "label_split");
    c.kmeans_restarts = l.value("restarts", c.kmeans_restarts);
    c.kmeans_max_iters = l.value("max_iters", c.kmeans_max_iters);
    c.kmeans_tol = l.value("tol", c.kmeans_tol);
    c.seen_rule = l.value("seen_rule", c.seen_rule);
    if (c.seen_rule != "larger" && c.seen_rule != "cluster0" && c.seen_rule != "cluster1")
      throw_config("label_split.seen_rule must be larger, cluster0, or cluster1");
  }
  if (j.contains("image_split")) {
    const json& s = j["image_split"];
    detail::check_keys(s, {"train_frac"}, "image_split");
    c.train_frac = s.value("train_frac", c.train_frac);
    if (!(c.train_frac > 0 && c.train_frac < 1)) throw_config("image_split.train_frac out of range");
  }
  if (j.contains("backends")) c.backends = BackendsConfig::from_json(j["backends"]);
  if (j.contains("projection")) {
    detail::check_keys(j["projection"], {"bias"}, "projection");
    c.projection_bias = j["projection"].value("bias", true);
  }
  if (j.contains("train")) {
    const json& t = j["train"];
    detail::check_keys(
        t, {"lr_peak", "weight_decay", "warmup_frac", "batch_size", "epochs", "grad_clip",
            "cosine_floor"},
        "train");
    c.train.lr_peak = t.value("lr_peak", c.train.lr_peak);
    c.train.weight_decay = t.value("weight_decay", c.train.weight_decay);
    c.train.warmup_frac = t.value("warmup_frac", c.train.warmup_frac);
    c.train.batch_size = t.value("batch_size", c.train.batch_size);
    c.train.epochs = t.value("epochs", c.train.epochs);
    if (t.contains("grad_clip") && !t["grad_clip"].is_null())
      c.train.grad_clip = t["grad_clip"].get<double>();
    c.train.cosine_floor = t.value("cosine_floor", c.train.cosine_floor);
    c.train.validate();
  }
  c.train.seed = c.train_seed;
  if (j.contains("ablation")) c.ablation = AblationConfig::from_json(j["ablation"]);
  if (j.contains("probe")) c.probe = ProbeConfig::from_json(j["probe"]);
  if (j.contains("prompt_template")) c.prompt_template = j["prompt_template"].get<std::string>();

  if (c.backends.encoder == "planted" && c.corpus.type != "synthetic")
    throw_config("backends.encoder planted requires a synthetic corpus");
  if (c.embedding.provider == "planted" && c.corpus.type != "synthetic")
    throw_config("embedding.provider planted requires a synthetic corpus");
  if (c.ood_corpus && c.backends.encoder == "planted") {
    if (c.ood_corpus->type != "synthetic")
      throw_config("ood_corpus must be synthetic when the planted encoder is configured");
    if (c.ood_corpus->synthetic.latent_dim != c.corpus.synthetic.latent_dim)
      throw_config("ood_corpus latent_dim must match the main corpus for the planted encoder");
  }

  c.raw = j;
  return c;
}

inline RunConfig RunConfig::load(const fs::path& path) {
  json j = json::parse(read_file(path), nullptr, false);
  if (j.is_discarded()) throw_config("config " + path.string() + " is not valid JSON");
  return from_json(j);
}

// --- backend construction --------------------------------------------------------

struct PipelineBackends {
  ReferenceBackends bundle;
  std::shared_ptr<EmbeddingProvider> embedder;
  std::optional<SyntheticWorld> world;
};

inline PipelineBackends build_backends(const RunConfig& config,
                                       const std::vector<std::string>& vocab_labels) {
  PipelineBackends out;
  if (config.corpus.type == "synthetic") out.world.emplace(config.corpus.synthetic);

  switch (config.embedding.provider[0]) {
    case 'p':
      out.embedder = out.world->embedding_provider();
      break;
    case 'h':
      if (config.embedding.provider == "http") {
        out.embedder = make_http_embedding_provider(config.embedding.url, config.embedding.dim);
      } else {
        out.embedder =
            std::make_shared<HashEmbeddingProvider>(config.embedding.dim, config.embedding.seed);
      }
      break;
    default:
      throw_config("unknown embedding provider");
  }

  if (out.world) out.bundle.tokenizer = std::make_shared<TinyTokenizer>(out.world->tokenizer_words());
  else out.bundle.tokenizer = std::make_shared<TinyTokenizer>(vocab_labels);
  TinyLMConfig lm_cfg = config.backends.lm;
  if (config.backends.lm_semantic) {
    if (!out.world) throw_config("semantic LM plant requires a synthetic corpus");
    lm_cfg.semantic_tokens = out.world->semantic_token_table();
  }
  out.bundle.lm = std::make_shared<TinyLM>(lm_cfg, out.bundle.tokenizer);

  if (config.backends.encoder == "planted") {
    out.bundle.encoder = std::make_shared<PlantedRegionEncoder>(
        derive_seed(config.backends.lm.seed, "encoder"), config.backends.d_v,
        config.backends.num_patches, config.corpus.synthetic.latent_dim);
  } else {
    out.bundle.encoder = std::make_shared<HashPatchEncoder>(
        derive_seed(config.backends.lm.seed, "encoder"), config.backends.d_v,
        config.backends.num_patches);
  }
  return out;
}

// --- run manifest ------------------------------------------------------------------

class RunManifest {
 public:
  explicit RunManifest(fs::path out_dir) : out_dir_(std::move(out_dir)) {
    path_ = out_dir_ / "manifest.json";
    if (fs::exists(path_)) doc_ = parse_json_strict(read_file(path_), path_.string());
    else {
      doc_["tool_version"] = PROJLENS_VERSION;
      doc_["stages"] = json::object();
    }
  }

  bool completed(const std::string& stage) const { return doc_["stages"].contains(stage); }

  const json& stage(const std::string& stage_name) const { return doc_["stages"].at(stage_name); }

  void record(const std::string& stage_name, const std::string& config_digest,
              const std::map<std::string, std::string>& inputs,
              const std::map<std::string, std::string>& artifacts, long wall_ms) {
    json s;
    s["config_digest"] = config_digest;
    s["inputs"] = inputs;
    s["artifacts"] = artifacts;
    s["wall_ms"] = wall_ms;
    s["completed_at"] = iso8601_now();
    doc_["stages"][stage_name] = std::move(s);
    doc_["tool_version"] = PROJLENS_VERSION;
    write_atomic(path_, doc_.dump(2) + "\n");
  }

  const fs::path& out_dir() const { return out_dir_; }

 private:
  fs::path out_dir_;
  fs::path path_;
  json doc_;
};

// --- pipeline ----------------------------------------------------------------------

class Pipeline {
 public:
  explicit Pipeline(RunConfig config) : config_(std::move(config)), manifest_(config_.out_dir) {}

  static const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{"ingest",  "label-split", "build-prompts", "train",
                                                "eval",    "ablate",      "probe",         "report"};
    return names;
  }

  // Returns true when work ran, false on an up-to-date no-op.
  bool run_stage(const std::string& stage, bool force = false);

  const RunConfig& config() const { return config_; }

 private:
  static std::vector<std::string> deps_of(const std::string& stage) {
    if (stage == "ingest") return {};
    if (stage == "label-split") return {"ingest"};
    if (stage == "build-prompts") return {"ingest", "label-split"};
    if (stage == "train") return {"build-prompts"};
    if (stage == "eval") return {"train", "build-prompts"};
    if (stage == "ablate") return {"build-prompts"};
    if (stage == "probe") return {"train", "build-prompts"};
    if (stage == "report") return {"eval"};
    throw_config("unknown stage: " + stage);
  }

  // Sections of the config that feed each stage; a digest over them gates
  // idempotent reruns.
  json config_slice(const std::string& stage) const {
    json s;
    auto copy = [&](const char* key) {
      if (config_.raw.contains(key)) s[key] = config_.raw[key];
    };
    if (stage == "ingest") copy("corpus");
    if (stage == "label-split") {
      copy("embedding");
      copy("label_split");
      copy("seeds");
      if (config_.raw.contains("filters") && config_.raw["filters"].contains("min_label_count"))
        s["min_label_count"] = config_.raw["filters"]["min_label_count"];
    }
    if (stage == "build-prompts") {
      copy("filters");
      copy("image_split");
      copy("seeds");
      copy("prompt_template");
    }
    if (stage == "train" || stage == "eval" || stage == "ablate" || stage == "probe") {
      copy("backends");
      copy("projection");
      copy("train");
      copy("seeds");
      copy("prompt_template");
      if (stage == "eval") {
        copy("filters");
        copy("ood_corpus");
      }
      if (stage == "ablate") copy("ablation");
      if (stage == "probe") copy("probe");
    }
    return s;
  }

  std::string config_digest(const std::string& stage) const {
    return digest_hex(config_slice(stage).dump());
  }

  fs::path artifact(const std::string& rel) const { return config_.out_dir / rel; }

  void verify_artifacts_intact(const std::string& stage) const {
    const json& s = manifest_.stage(stage);
    for (const auto& [rel, digest] : s["artifacts"].items()) {
      const fs::path p = artifact(rel);
      if (!fs::exists(p))
        throw_dependency("stale pipeline: artifact " + rel + " of stage " + stage + " is missing");
      if (file_digest(p) != digest.get<std::string>())
        throw_dependency("stale pipeline: artifact " + rel + " of stage " + stage +
                         " diverged from the manifest");
    }
  }

  // Upstream consistency: the dependency must be complete, its recorded
  // artifacts must match the files on disk, and its own config must not
  // have changed since it ran.
  void verify_upstream(const std::string& stage) const {
    for (const auto& dep : deps_of(stage)) {
      if (!manifest_.completed(dep))
        throw_dependency("stage " + stage + " requires stage " + dep + " to run first");
      verify_upstream(dep);
      verify_artifacts_intact(dep);
      if (manifest_.stage(dep)["config_digest"].get<std::string>() != config_digest(dep))
        throw_dependency("stale pipeline: stage " + dep +
                         " ran under a different configuration; rerun it");
    }
  }

  std::map<std::string, std::string> collect_inputs(const std::string& stage) const {
    std::map<std::string, std::string> inputs;
    for (const auto& dep : deps_of(stage))
      for (const auto& [rel, digest] : manifest_.stage(dep)["artifacts"].items())
        inputs[rel] = digest.get<std::string>();
    return inputs;
  }

  // stage bodies; each returns artifact relative paths
  std::vector<std::string> stage_ingest();
  std::vector<std::string> stage_label_split();
  std::vector<std::string> stage_build_prompts();
  std::vector<std::string> stage_train();
  std::vector<std::string> stage_eval();
  std::vector<std::string> stage_ablate();
  std::vector<std::string> stage_probe();
  std::vector<std::string> stage_report();

  // shared loaders
  Corpus labeled_corpus() const { return load_corpus(artifact("corpus_labeled.jsonl")); }
  std::vector<PromptSample> pool(const std::string& name) const {
    return load_prompt_pool(artifact(name + ".jsonl"));
  }
  std::vector<std::string> vocab_labels() const {
    std::vector<std::string> labels;
    const json v = parse_json_strict(read_file(artifact("vocab.json")), "vocab.json");
    for (const auto& [label, count] : v["labels"].items()) labels.push_back(label);
    return labels;
  }
  PipelineBackends backends() const { return build_backends(config_, vocab_labels()); }

  EvalReport score_pool(const std::vector<MCQAItem>& items, const ProjectionParams& projection,
                        FeatureCache& features, const Corpus& corpus, const LMInterface& lm) const {
    std::map<std::string, PerClassResult> per_class;
    for (const auto& item : items) {
      const ItemScore score = score_item(item, projection, features, corpus, lm,
                                         config_.prompt_template);
      auto& r = per_class[item.truth()];
      r.n_items++;
      if (score.predicted_index == item.answer_index) r.n_correct++;
    }
    return make_report(per_class);
  }

  IngestResult ingest_source(const CorpusSourceConfig& source, const fs::path& image_dir) const {
    if (source.type == "vg_like") return ingest_vg_like(source.regions, source.image_meta);
    if (source.type == "openimages_like")
      return ingest_openimages_like(source.boxes, source.class_descriptions, source.image_meta);
    SyntheticWorld world(source.synthetic);
    return generate_synthetic_corpus(world, image_dir);
  }

  RunConfig config_;
  RunManifest manifest_;
};

inline bool Pipeline::run_stage(const std::string& stage, bool force) {
  const auto& names = stage_names();
  if (std::find(names.begin(), names.end(), stage) == names.end())
    throw_config("unknown stage: " + stage);
  verify_upstream(stage);

  const std::string cfg_digest = config_digest(stage);
  const auto inputs = collect_inputs(stage);
  if (!force && manifest_.completed(stage)) {
    const json& s = manifest_.stage(stage);
    bool fresh = s["config_digest"].get<std::string>() == cfg_digest;
    if (fresh) {
      std::map<std::string, std::string> recorded;
      for (const auto& [rel, digest] : s["inputs"].items()) recorded[rel] = digest.get<std::string>();
      fresh = recorded == inputs;
    }
    if (fresh) {
      bool intact = true;
      for (const auto& [rel, digest] : s["artifacts"].items()) {
        const fs::path p = artifact(rel);
        if (!fs::exists(p) || file_digest(p) != digest.get<std::string>()) {
          intact = false;
          break;
        }
      }
      if (intact) return false;  // up to date
    }
  }

  const auto t0 = std::chrono::steady_clock::now();
  std::vector<std::string> artifacts;
  if (stage == "ingest") artifacts = stage_ingest();
  else if (stage == "label-split") artifacts = stage_label_split();
  else if (stage == "build-prompts") artifacts = stage_build_prompts();
  else if (stage == "train") artifacts = stage_train();
  else if (stage == "eval") artifacts = stage_eval();
  else if (stage == "ablate") artifacts = stage_ablate();
  else if (stage == "probe") artifacts = stage_probe();
  else artifacts = stage_report();
  const long wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                           std::chrono::steady_clock::now() - t0)
                           .count();

  std::map<std::string, std::string> artifact_digests;
  for (const auto& rel : artifacts) artifact_digests[rel] = file_digest(artifact(rel));
  manifest_.record(stage, cfg_digest, inputs, artifact_digests, wall_ms);
  return true;
}

inline std::vector<std::string> Pipeline::stage_ingest() {
  const IngestResult res = ingest_source(config_.corpus, artifact("synthetic_images"));
  persist_corpus(res.corpus, artifact("corpus.jsonl"));
  json stats;
  stats["annotations_seen"] = res.stats.annotations_seen;
  stats["dropped_degenerate_box"] = res.stats.dropped_degenerate_box;
  stats["dropped_missing_image"] = res.stats.dropped_missing_image;
  stats["dropped_missing_label"] = res.stats.dropped_missing_label;
  stats["clamped_coordinates"] = res.stats.clamped_coordinates;
  write_atomic(artifact("ingest_stats.json"), stats.dump(2) + "\n");
  return {"corpus.jsonl", "ingest_stats.json"};
}

inline std::vector<std::string> Pipeline::stage_label_split() {
  const Corpus corpus = load_corpus(artifact("corpus.jsonl"));
  auto [deduped, vocab0] = dedup_synsets_by_lemma(corpus);
  auto [filtered, vocab] = filter_rare_labels(deduped, vocab0, config_.min_label_count);

  std::vector<std::string> labels;
  for (const auto& [label, entry] : vocab.entries) labels.push_back(label);
  const auto pb = build_backends(config_, labels);
  CachingEmbeddingProvider embedder(pb.embedder, artifact("cache/embeddings.jsonl"));
  const auto embeddings = embed_labels(vocab, embedder);

  std::vector<Vec> points;
  for (const auto& label : labels) points.push_back(embeddings.at(label));
  const KMeansResult clustering =
      spherical_kmeans(points, 2, config_.split_seed, config_.kmeans_max_iters, config_.kmeans_tol,
                       config_.kmeans_restarts);
  std::optional<int> override;
  if (config_.seen_rule == "cluster0") override = 0;
  if (config_.seen_rule == "cluster1") override = 1;
  const LabelSplit split =
      assign_split(clustering, labels, config_.split_seed, embedder.provider_id(), override);

  persist_corpus(filtered, artifact("corpus_labeled.jsonl"));
  save_label_split(split, artifact("split.json"), "post_rare_filter_pre_area_filter");
  json v;
  v["labels"] = json::object();
  for (const auto& [label, entry] : vocab.entries) {
    v["labels"][label] = {{"count", entry.count},
                          {"origin_synsets", std::vector<std::string>(entry.origin_synsets.begin(),
                                                                      entry.origin_synsets.end())}};
  }
  write_atomic(artifact("vocab.json"), v.dump(2) + "\n");
  return {"corpus_labeled.jsonl", "split.json", "vocab.json"};
}

inline std::vector<std::string> Pipeline::stage_build_prompts() {
  const Corpus labeled = labeled_corpus();
  const Corpus area = filter_bbox_area(labeled, config_.min_area_frac, config_.max_area_frac);
  const auto image_split = split_images(area, config_.train_frac, config_.split_seed);
  const LabelSplit split = load_label_split(artifact("split.json"));
  const TagResult tagged = tag_samples(area, image_split, split);

  std::vector<PromptSample> train_seen, test_seen, test_unseen;
  for (const auto& s : tagged.samples) {
    if (s.split_tag == SplitTag::TRAIN_SEEN) train_seen.push_back(s);
    else if (s.split_tag == SplitTag::TEST_SEEN) test_seen.push_back(s);
    else test_unseen.push_back(s);
  }
  persist_corpus(area, artifact("corpus_prompts.jsonl"));
  save_prompt_pool(train_seen, artifact("train_seen.jsonl"));
  save_prompt_pool(test_seen, artifact("test_seen.jsonl"));
  save_prompt_pool(test_unseen, artifact("test_unseen.jsonl"));
  json counts;
  counts["train_seen"] = train_seen.size();
  counts["test_seen"] = test_seen.size();
  counts["test_unseen"] = test_unseen.size();
  counts["dropped_train_unseen"] = tagged.stats.dropped_train_unseen;
  counts["dropped_degenerate_rounding"] = tagged.stats.dropped_degenerate_rounding;
  counts["dropped_unassigned_label"] = tagged.stats.dropped_unassigned_label;
  write_atomic(artifact("prompt_counts.json"), counts.dump(2) + "\n");
  return {"corpus_prompts.jsonl", "train_seen.jsonl", "test_seen.jsonl", "test_unseen.jsonl",
          "prompt_counts.json"};
}

inline std::vector<std::string> Pipeline::stage_train() {
  const Corpus corpus = load_corpus(artifact("corpus_prompts.jsonl"));
  const auto train_pool = pool("train_seen");
  auto pb = backends();
  FeatureCache features(pb.bundle.encoder);

  const ProjectionParams initial = init_projection(
      config_.backends.d_v, pb.bundle.lm->d_lm(), config_.train_seed, config_.projection_bias);
  const TrainResult result = train_projection(train_pool, features, corpus, *pb.bundle.lm, initial,
                                              config_.train, config_.prompt_template);
  save_checkpoint(result.projection, config_.train_seed, static_cast<long>(result.log.size()),
                  artifact("projection"));
  write_atomic(artifact("train_log.csv"), train_log_csv(result.log));

  json info;
  info["encoder"] = pb.bundle.encoder->backend_id();
  info["lm"] = pb.bundle.lm->backend_id();
  info["encoder_digest"] = pb.bundle.encoder->param_digest();
  info["lm_digest"] = pb.bundle.lm->param_digest();
  info["first_window_mean"] = result.first_window_mean;
  info["last_window_mean"] = result.last_window_mean;
  info["adam"] = {{"beta1", config_.train.beta1},
                  {"beta2", config_.train.beta2},
                  {"eps", config_.train.adam_eps}};
  write_atomic(artifact("train_info.json"), info.dump(2) + "\n");
  return {"projection.bin", "projection.json", "train_log.csv", "train_info.json"};
}

inline std::vector<std::string> Pipeline::stage_eval() {
  const Corpus corpus = load_corpus(artifact("corpus_prompts.jsonl"));
  auto pb = backends();
  FeatureCache features(pb.bundle.encoder);
  const ProjectionParams projection = load_checkpoint(artifact("projection"));

  std::vector<std::string> artifacts;
  std::optional<double> seen_acc, unseen_acc;
  json reports;
  for (const auto& [name, group] :
       std::vector<std::pair<std::string, MCQAGroup>>{{"test_seen", MCQAGroup::SEEN},
                                                      {"test_unseen", MCQAGroup::UNSEEN}}) {
    const auto samples = pool(name);
    if (samples.empty()) continue;
    const auto items =
        build_mcqa(samples, group, config_.mcqa_min_count, config_.mcqa_cap, config_.mcqa_seed);
    const std::string items_file = "mcqa_" + to_string(group) + ".jsonl";
    save_mcqa_items(items, artifact(items_file));
    artifacts.push_back(items_file);
    if (items.empty()) continue;
    const EvalReport report = score_pool(items, projection, features, corpus, *pb.bundle.lm);
    const std::string report_file = "eval_" + to_string(group) + ".json";
    write_atomic(artifact(report_file), eval_report_json(report).dump(2) + "\n");
    artifacts.push_back(report_file);
    (group == MCQAGroup::SEEN ? seen_acc : unseen_acc) = report.macro_accuracy;
  }

  std::vector<EvalSummaryRow> rows;
  rows.push_back(
      {pb.bundle.encoder->backend_id(), pb.bundle.lm->backend_id(), seen_acc, unseen_acc});

  if (config_.ood_corpus) {
    // out-of-distribution pool: independent corpus, same MCQA recipe, with
    // near-duplicate labels removed by embedding cosine
    const IngestResult ood = ingest_source(*config_.ood_corpus, artifact("ood_images"));
    auto [deduped, vocab0] = dedup_synsets_by_lemma(ood.corpus);
    const Corpus area = filter_bbox_area(deduped, config_.min_area_frac, config_.max_area_frac);

    std::map<std::string, size_t> counts;
    for (const auto& a : area.annotations) counts[a.raw_label]++;
    std::vector<std::string> labels;
    for (const auto& [label, n] : counts) labels.push_back(label);
    CachingEmbeddingProvider embedder(pb.embedder, artifact("cache/embeddings.jsonl"));
    std::map<std::string, Vec> embeddings;
    {
      const auto vecs = embedder.embed(labels);
      for (size_t i = 0; i < labels.size(); ++i) embeddings[labels[i]] = l2_normalize(vecs[i]);
    }
    const auto kept = dedup_similar_labels(counts, embeddings, config_.ood_dedup_threshold);
    const std::set<std::string> kept_set(kept.begin(), kept.end());

    std::map<std::string, ImageSplit> all_test;
    for (const auto& im : area.images) all_test[im.image_id] = ImageSplit::TEST;
    LabelSplit everything_unseen;
    everything_unseen.provider_id = embedder.provider_id();
    for (const auto& label : kept) everything_unseen.assignment[label] = LabelGroup::UNSEEN;
    auto tagged = tag_samples(area, all_test, everything_unseen);

    const auto items = build_mcqa(tagged.samples, MCQAGroup::OOD, config_.mcqa_min_count,
                                  config_.mcqa_cap, config_.mcqa_seed);
    save_mcqa_items(items, artifact("mcqa_ood.jsonl"));
    artifacts.push_back("mcqa_ood.jsonl");
    if (!items.empty()) {
      FeatureCache ood_features(pb.bundle.encoder);
      const EvalReport report = score_pool(items, projection, ood_features, area, *pb.bundle.lm);
      write_atomic(artifact("eval_ood.json"), eval_report_json(report).dump(2) + "\n");
      artifacts.push_back("eval_ood.json");
      rows.push_back({pb.bundle.encoder->backend_id(), pb.bundle.lm->backend_id(), std::nullopt,
                      report.macro_accuracy});
    }
  }

  write_atomic(artifact("eval_summary.csv"), eval_summary_csv(rows));
  artifacts.push_back("eval_summary.csv");
  return artifacts;
}

inline std::vector<std::string> Pipeline::stage_ablate() {
  const Corpus corpus = load_corpus(artifact("corpus_prompts.jsonl"));
  const auto train_pool = pool("train_seen");
  const auto test_seen = pool("test_seen");
  const auto test_unseen = pool("test_unseen");
  auto pb = backends();

  CsvWriter curve({"method", "proportion", "n_train", "seen_acc", "unseen_acc"});
  std::vector<std::string> artifacts;
  for (const auto method : config_.ablation.methods) {
    for (const double proportion : config_.ablation.proportions) {
      const AblationSubset subset =
          build_ablation_subsets(train_pool, method, proportion, config_.split_seed);
      const std::string tag = to_string(method) + "_" + format_fixed(proportion, 2);
      const std::string manifest_file = "ablate/" + tag + "/subset.json";
      save_ablation_manifest(subset, artifact(manifest_file));
      artifacts.push_back(manifest_file);

      std::vector<PromptSample> subset_pool;
      for (const auto& s : train_pool)
        if (subset.sample_ids.count(s.sample_id)) subset_pool.push_back(s);

      FeatureCache features(pb.bundle.encoder);
      const ProjectionParams initial = init_projection(
          config_.backends.d_v, pb.bundle.lm->d_lm(), config_.train_seed, config_.projection_bias);
      const TrainResult trained = train_projection(subset_pool, features, corpus, *pb.bundle.lm,
                                                   initial, config_.train, config_.prompt_template);

      auto eval_group = [&](const std::vector<PromptSample>& samples, MCQAGroup group)
          -> std::optional<double> {
        if (samples.empty()) return std::nullopt;
        const auto items = build_mcqa(samples, group, config_.mcqa_min_count, config_.mcqa_cap,
                                      config_.mcqa_seed);
        if (items.empty()) return std::nullopt;
        return score_pool(items, trained.projection, features, corpus, *pb.bundle.lm).macro_accuracy;
      };
      const auto seen = eval_group(test_seen, MCQAGroup::SEEN);
      const auto unseen = eval_group(test_unseen, MCQAGroup::UNSEEN);
      curve.append_row({to_string(method), format_fixed(proportion, 2),
                        std::to_string(subset_pool.size()),
                        seen ? format_fixed(*seen, 1) : "N/A",
                        unseen ? format_fixed(*unseen, 1) : "N/A"});
    }
  }
  write_atomic(artifact("ablation_curve.csv"), curve.str());
  artifacts.push_back("ablation_curve.csv");
  return artifacts;
}

inline std::vector<std::string> Pipeline::stage_probe() {
  const Corpus corpus = load_corpus(artifact("corpus_prompts.jsonl"));
  auto pb = backends();
  auto& lm = *pb.bundle.lm;
  FeatureCache features(pb.bundle.encoder);
  const ProjectionParams projection = load_checkpoint(artifact("projection"));
  const LabelSplit split = load_label_split(artifact("split.json"));
  CachingEmbeddingProvider embedder(pb.embedder, artifact("cache/embeddings.jsonl"));

  std::vector<std::string> artifacts;
  json key_counts;
  for (const auto& [pool_name, group] :
       std::vector<std::pair<std::string, LabelGroup>>{{"test_seen", LabelGroup::SEEN},
                                                       {"test_unseen", LabelGroup::UNSEEN}}) {
    auto samples = pool(pool_name);
    if (samples.empty()) continue;
    auto prefixes =
        build_visual_prefixes(samples, group, lm.tokenizer(), config_.backends.num_patches,
                              config_.prompt_template);
    if (prefixes.size() > config_.probe.max_prefixes) {
      Rng rng = derive_rng(config_.probe_seed, "prefix_subsample:" + pool_name);
      std::vector<VisualPrefix> kept;
      for (size_t idx : rng.sample_indices(prefixes.size(), config_.probe.max_prefixes))
        kept.push_back(prefixes[idx]);
      prefixes = std::move(kept);
    }

    std::vector<KeyActivationRecord> records;
    for (const auto& prefix : prefixes) {
      const auto extraction =
          extract_topk_keys(prefix, projection, features, corpus, lm, config_.probe.top_k);
      records.insert(records.end(), extraction.records.begin(), extraction.records.end());
    }

    const KeyProfileSet profiles = aggregate_key_profiles(records);
    key_counts[to_string(group)] = {{"unique_layer_key_pairs", profiles.unique_layer_key_pairs},
                                    {"unique_key_indices", profiles.unique_key_indices},
                                    {"prefixes", prefixes.size()}};

    const auto group_labels = split.labels(group);
    std::map<std::string, Vec> embeddings;
    {
      const auto vecs = embedder.embed(group_labels);
      for (size_t i = 0; i < group_labels.size(); ++i)
        embeddings[group_labels[i]] = l2_normalize(vecs[i]);
    }
    const auto dists = key_semantic_similarity(profiles, embeddings, group_labels, lm.num_layers(),
                                               config_.probe_seed);
    const std::string g = to_string(group);
    write_atomic(artifact("probe_key_coherence_" + g + ".csv"), key_coherence_csv(dists));
    write_atomic(artifact("probe_key_coherence_values_" + g + ".csv"),
                 key_coherence_values_csv(dists));
    artifacts.push_back("probe_key_coherence_" + g + ".csv");
    artifacts.push_back("probe_key_coherence_values_" + g + ".csv");

    const ValueAlignmentResult alignment = value_alignment(records, lm, embedder, config_.probe_seed);
    write_atomic(artifact("probe_value_alignment_" + g + ".csv"),
                 value_alignment_csv(alignment, lm.num_layers()));
    artifacts.push_back("probe_value_alignment_" + g + ".csv");

    const auto exemplars = select_qualitative_pairs(profiles, lm, embeddings,
                                                    config_.probe.coherence_min,
                                                    config_.probe.exemplars);
    write_atomic(artifact("probe_exemplars_" + g + ".csv"), exemplar_csv(exemplars));
    artifacts.push_back("probe_exemplars_" + g + ".csv");
  }
  write_atomic(artifact("probe_key_counts.json"), key_counts.dump(2) + "\n");
  artifacts.push_back("probe_key_counts.json");
  return artifacts;
}

inline std::vector<std::string> Pipeline::stage_report() {
  fs::create_directories(artifact("report"));
  std::vector<std::string> artifacts;
  std::vector<std::string> gaps;

  auto copy_artifact = [&](const std::string& from, const std::string& to) {
    write_atomic(artifact(to), read_file(artifact(from)));
    artifacts.push_back(to);
  };

  copy_artifact("eval_summary.csv", "report/metrics.csv");

  if (fs::exists(artifact("ablation_curve.csv"))) {
    copy_artifact("ablation_curve.csv", "report/ablation.csv");
    // figure: accuracy vs proportion per method and split
    std::map<std::string, SvgSeries> series;
    const auto lines = read_lines(artifact("ablation_curve.csv"));
    for (size_t i = 1; i < lines.size(); ++i) {
      const auto f = csv_parse_line(lines[i]);
      if (f.size() < 5) continue;
      const double p = std::stod(f[1]);
      if (f[3] != "N/A") {
        auto& s = series[f[0] + " seen"];
        s.name = f[0] + " seen";
        s.points.push_back({p, std::stod(f[3])});
      }
      if (f[4] != "N/A") {
        auto& s = series[f[0] + " unseen"];
        s.name = f[0] + " unseen";
        s.points.push_back({p, std::stod(f[4])});
      }
    }
    std::vector<SvgSeries> list;
    for (auto& [name, s] : series) {
      std::sort(s.points.begin(), s.points.end());
      list.push_back(s);
    }
    write_atomic(artifact("report/ablation.svg"),
                 svg_line_chart("dataset ablation", "proportion", "macro accuracy (%)", list));
    artifacts.push_back("report/ablation.svg");
  } else {
    gaps.push_back("ablate stage has not run; ablation.csv omitted");
  }

  for (const std::string g : {"seen", "unseen"}) {
    const std::string coherence = "probe_key_coherence_" + g + ".csv";
    const std::string alignment = "probe_value_alignment_" + g + ".csv";
    if (!fs::exists(artifact(coherence))) {
      gaps.push_back("probe stage has not run; " + coherence + " omitted");
      continue;
    }
    copy_artifact(coherence, "report/key_coherence_" + g + ".csv");
    copy_artifact("probe_key_coherence_values_" + g + ".csv",
                  "report/key_coherence_values_" + g + ".csv");
    copy_artifact(alignment, "report/value_alignment_" + g + ".csv");
    copy_artifact("probe_exemplars_" + g + ".csv", "report/exemplars_" + g + ".csv");

    // figures: per-layer means, real vs baseline
    auto curve_series = [&](const std::string& file, const std::string& metric,
                            const std::string& aggregation) {
      std::vector<SvgSeries> list;
      std::map<std::string, SvgSeries> by_pop;
      for (const auto& line : read_lines(artifact(file))) {
        const auto f = csv_parse_line(line);
        if (f.size() < 7 || f[0] == "layer") continue;
        if (f[1] != metric || f[3] != aggregation) continue;
        auto& s = by_pop[f[2]];
        s.name = f[2];
        s.points.push_back({std::stod(f[0]), std::stod(f[4])});
      }
      for (auto& [name, s] : by_pop) {
        std::sort(s.points.begin(), s.points.end());
        list.push_back(s);
      }
      return list;
    };
    write_atomic(artifact("report/key_coherence_" + g + ".svg"),
                 svg_line_chart("key coherence (" + g + ")", "layer", "mean pairwise cosine",
                                curve_series(coherence, "key_coherence", "pairs")));
    artifacts.push_back("report/key_coherence_" + g + ".svg");
    write_atomic(artifact("report/value_agreement_" + g + ".svg"),
                 svg_line_chart("value agreement (" + g + ")", "layer", "agreement (%)",
                                curve_series(alignment, "value_agreement", "top3")));
    artifacts.push_back("report/value_agreement_" + g + ".svg");
    write_atomic(artifact("report/value_cosine_" + g + ".svg"),
                 svg_line_chart("value cosine (" + g + ")", "layer", "mean cosine",
                                curve_series(alignment, "value_cosine", "top3")));
    artifacts.push_back("report/value_cosine_" + g + ".svg");
  }

  json gap_doc;
  gap_doc["gaps"] = gaps;
  write_atomic(artifact("report/gaps.json"), gap_doc.dump(2) + "\n");
  artifacts.push_back("report/gaps.json");
  return artifacts;
}

}  // namespace projlens
