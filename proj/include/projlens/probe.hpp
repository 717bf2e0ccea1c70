#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "projlens/embedding.hpp"
#include "projlens/label_space.hpp"
#include "projlens/mcqa.hpp"
#include "projlens/model.hpp"
#include "projlens/rng.hpp"
#include "projlens/tiny_backends.hpp"

namespace projlens {

// A rendered prompt with the class label and the EOS removed. Its semantics
// are the boxed image region, and the next token is deterministically the
// class label, so key/value statistics can be computed without manual
// inspection.
struct VisualPrefix {
  std::string item_id;
  std::string image_id;
  NormBox norm_box{};
  std::vector<int> prefix_tokens;  // text after the visual slots; no label, no eos
  int image_slot = 0;
  std::string truth_label;
  LabelGroup group = LabelGroup::SEEN;

  // index of the final prefix token, the position whose next token is the label
  int probe_position() const {
    return image_slot + static_cast<int>(prefix_tokens.size());  // BOS is position 0
  }
  int total_len() const { return 1 + image_slot + static_cast<int>(prefix_tokens.size()); }
};

inline std::vector<VisualPrefix> build_visual_prefixes(
    const std::vector<PromptSample>& test_pool, LabelGroup group, const TokenizerView& tokenizer,
    int image_slot, const std::string& tmpl = default_prompt_template()) {
  std::vector<VisualPrefix> out;
  for (const auto& s : test_pool) {
    if (s.split_tag == SplitTag::TRAIN_SEEN) throw_config("visual prefixes come from test pools");
    const bool sample_seen = s.split_tag == SplitTag::TEST_SEEN;
    if (sample_seen != (group == LabelGroup::SEEN)) continue;
    VisualPrefix p;
    p.item_id = "p_" + s.sample_id;
    p.image_id = s.image_id;
    p.norm_box = s.norm_box;
    p.prefix_tokens = tokenizer.encode(render_prefix_text(s.norm_box, tmpl));
    p.image_slot = image_slot;
    p.truth_label = s.label;
    p.group = group;
    out.push_back(std::move(p));
  }
  return out;
}

// One of the top-k most activated keys at the probe position of one prefix.
struct KeyActivationRecord {
  int layer = 0;
  int key_index = 0;
  double coefficient = 0.0;
  int rank = 0;  // 0 = highest coefficient in its layer
  std::string item_id;
  std::string truth_label;
};

struct PrefixExtraction {
  std::vector<KeyActivationRecord> records;  // num_layers * k entries
  // trace payload kept for fidelity checks
  std::vector<Vec> ffn_inputs;  // per layer at the probe position
};

// Traced forward at the final prefix token; per layer the top-k memory
// coefficients, descending, ties toward the lower index.
inline PrefixExtraction extract_topk_keys(const VisualPrefix& prefix,
                                          const ProjectionParams& projection,
                                          FeatureCache& features, const Corpus& corpus,
                                          const LMInterface& lm, int k = 3) {
  if (k > lm.d_ffn()) throw_config("extract_topk_keys: k exceeds d_ffn");
  const ImageRecord& image = corpus.image(prefix.image_id);
  const VisionFeatures& feats = features.get(image);
  if (feats.num_patches() != prefix.image_slot)
    throw_config("extract_topk_keys: image_slot does not match the encoder");
  const Mat visual = project(feats, projection);

  Mat embeddings(prefix.total_len(), lm.d_lm());
  embeddings.row(0) = lm.token_embed({lm.bos_id()}).row(0);
  embeddings.middleRows(1, prefix.image_slot) = visual;
  if (!prefix.prefix_tokens.empty())
    embeddings.bottomRows(static_cast<int>(prefix.prefix_tokens.size())) =
        lm.token_embed(prefix.prefix_tokens);

  const LMForwardTrace trace = lm.traced_forward(embeddings, {prefix.probe_position()});
  const TracePoint& point = trace.points[0];

  PrefixExtraction out;
  out.ffn_inputs = point.ffn_input;
  for (int layer = 0; layer < lm.num_layers(); ++layer) {
    const Vec& h = point.memory_coefficients[static_cast<size_t>(layer)];
    std::vector<int> idx(static_cast<size_t>(h.size()));
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    std::partial_sort(idx.begin(), idx.begin() + k, idx.end(), [&](int a, int b) {
      if (h[a] != h[b]) return h[a] > h[b];
      return a < b;
    });
    for (int r = 0; r < k; ++r) {
      KeyActivationRecord rec;
      rec.layer = layer;
      rec.key_index = idx[static_cast<size_t>(r)];
      rec.coefficient = h[rec.key_index];
      rec.rank = r;
      rec.item_id = prefix.item_id;
      rec.truth_label = prefix.truth_label;
      out.records.push_back(std::move(rec));
    }
  }
  return out;
}

// Histogram of activating labels for one (layer, key) pair.
struct KeyProfile {
  int layer = 0;
  int key_index = 0;
  std::map<std::string, size_t> label_histogram;
  std::vector<std::string> top_labels;  // up to 3, by count desc then lexicographic
  size_t activation_count = 0;

  bool eligible_for_cosine() const { return label_histogram.size() >= 3; }

  double dominant_share() const {
    if (top_labels.empty() || activation_count == 0) return 0.0;
    return static_cast<double>(label_histogram.at(top_labels[0])) /
           static_cast<double>(activation_count);
  }
};

struct KeyProfileSet {
  std::map<std::pair<int, int>, KeyProfile> profiles;  // keyed by (layer, key_index)
  size_t unique_layer_key_pairs = 0;
  size_t unique_key_indices = 0;  // pooled across layers
};

inline KeyProfileSet aggregate_key_profiles(const std::vector<KeyActivationRecord>& records) {
  KeyProfileSet out;
  std::set<int> pooled;
  for (const auto& rec : records) {
    auto& profile = out.profiles[{rec.layer, rec.key_index}];
    profile.layer = rec.layer;
    profile.key_index = rec.key_index;
    profile.label_histogram[rec.truth_label]++;
    profile.activation_count++;
    pooled.insert(rec.key_index);
  }
  for (auto& [key, profile] : out.profiles) {
    std::vector<std::string> labels;
    for (const auto& [label, count] : profile.label_histogram) labels.push_back(label);
    std::sort(labels.begin(), labels.end(), [&](const std::string& a, const std::string& b) {
      const size_t ca = profile.label_histogram.at(a), cb = profile.label_histogram.at(b);
      if (ca != cb) return ca > cb;
      return a < b;
    });
    labels.resize(std::min<size_t>(3, labels.size()));
    profile.top_labels = std::move(labels);
  }
  out.unique_layer_key_pairs = out.profiles.size();
  out.unique_key_indices = pooled.size();
  return out;
}

// Per-layer paired distributions; `real` from key histograms, `baseline`
// from uniformly drawn label triples.
struct LayerDistributions {
  std::vector<double> real;
  std::vector<double> baseline;

  static double mean_of(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
  }
  static double max_of(const std::vector<double>& v) {
    double m = -1e300;
    for (double x : v) m = std::max(m, x);
    return v.empty() ? 0.0 : m;
  }
};

// For every key with three distinct activating labels: the three pairwise
// cosines of its top labels; the baseline redraws three labels uniformly
// from the group pool per eligible key.
inline std::vector<LayerDistributions> key_semantic_similarity(
    const KeyProfileSet& profile_set, const std::map<std::string, Vec>& embeddings,
    const std::vector<std::string>& group_labels, int num_layers, uint64_t seed) {
  if (group_labels.size() < 3)
    throw_config("key_semantic_similarity: need at least 3 labels in the group");
  std::vector<LayerDistributions> out(static_cast<size_t>(num_layers));
  Rng rng = derive_rng(seed, "key_similarity_baseline");
  for (const auto& [key, profile] : profile_set.profiles) {
    if (!profile.eligible_for_cosine()) continue;
    auto& dist = out[static_cast<size_t>(profile.layer)];
    for (size_t i = 0; i < 3; ++i)
      for (size_t j = i + 1; j < 3; ++j)
        dist.real.push_back(
            cosine(embeddings.at(profile.top_labels[i]), embeddings.at(profile.top_labels[j])));
    const auto draw = rng.sample_indices(group_labels.size(), 3);
    for (size_t i = 0; i < 3; ++i)
      for (size_t j = i + 1; j < 3; ++j)
        dist.baseline.push_back(
            cosine(embeddings.at(group_labels[draw[i]]), embeddings.at(group_labels[draw[j]])));
  }
  return out;
}

// Top-3 tokens of a value column under the output embedding; ties toward
// the lower token id.
inline std::vector<std::string> project_value_to_vocab(const Vec& value_column,
                                                       const LMInterface& lm) {
  const Vec logits = lm.unembed(value_column);
  std::vector<int> idx(static_cast<size_t>(logits.size()));
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::partial_sort(idx.begin(), idx.begin() + 3, idx.end(), [&](int a, int b) {
    if (logits[a] != logits[b]) return logits[a] > logits[b];
    return a < b;
  });
  return {lm.tokenizer().decode(idx[0]), lm.tokenizer().decode(idx[1]),
          lm.tokenizer().decode(idx[2])};
}

// Lowercase, trim, strip word-boundary markers. Matches Table-4 style
// fixtures: "Cat" agrees with "cat", "teeth" does not agree with "tooth".
inline std::string normalize_token(const std::string& token) {
  std::string s = token;
  while (!s.empty() && (starts_with(s, " ") || starts_with(s, "\xe2\x96\x81") || starts_with(s, "\xc4\xa0")))
    s = s.substr(starts_with(s, " ") ? 1 : (starts_with(s, "\xe2\x96\x81") ? 3 : 2));
  return to_lower(trim(s));
}

// Agreement: any extracted token equals the truth label or its first
// whitespace-delimited word after normalization. No stemming.
inline bool token_agreement(const std::vector<std::string>& tokens, const std::string& truth_label) {
  const std::string truth = to_lower(trim(truth_label));
  const std::string first_word = split(truth, ' ')[0];
  for (const auto& t : tokens) {
    const std::string norm = normalize_token(t);
    if (norm.empty()) continue;
    if (norm == truth || norm == first_word) return true;
  }
  return false;
}

struct AlignmentObservation {
  int layer = 0;
  bool agreement = false;
  double cosine_to_label = 0.0;
  bool from_top1 = false;  // rank-0 value of its (prefix, layer)
};

struct ValueAlignmentResult {
  std::vector<AlignmentObservation> real;
  std::vector<AlignmentObservation> baseline;
};

// For each (prefix, layer): the top-k values' vocabulary projections are
// compared against the truth label, both by string agreement and by mean
// embedding cosine of the decoded tokens. The baseline draws the same
// number of random value indices per (prefix, layer).
inline ValueAlignmentResult value_alignment(const std::vector<KeyActivationRecord>& records,
                                            const LMInterface& lm, EmbeddingProvider& provider,
                                            uint64_t seed) {
  ValueAlignmentResult out;
  Rng rng = derive_rng(seed, "value_alignment_baseline");
  std::map<std::string, Vec> embed_cache;
  auto embed_of = [&](const std::string& text) -> const Vec& {
    auto it = embed_cache.find(text);
    if (it == embed_cache.end()) it = embed_cache.emplace(text, provider.embed_one(text)).first;
    return it->second;
  };

  auto observe = [&](int layer, int value_index, const std::string& truth, bool top1)
      -> AlignmentObservation {
    const auto tokens = project_value_to_vocab(lm.ffn_value_column(layer, value_index), lm);
    AlignmentObservation obs;
    obs.layer = layer;
    obs.agreement = token_agreement(tokens, truth);
    obs.from_top1 = top1;
    double total = 0.0;
    size_t n = 0;
    const Vec& truth_vec = embed_of(to_lower(trim(truth)));
    for (const auto& t : tokens) {
      const std::string norm = normalize_token(t);
      if (norm.empty()) continue;
      total += cosine(embed_of(norm), truth_vec);
      ++n;
    }
    obs.cosine_to_label = n == 0 ? 0.0 : total / static_cast<double>(n);
    return obs;
  };

  for (const auto& rec : records) {
    out.real.push_back(observe(rec.layer, rec.key_index, rec.truth_label, rec.rank == 0));
    const int random_index = static_cast<int>(rng.below(static_cast<uint64_t>(lm.d_ffn())));
    out.baseline.push_back(observe(rec.layer, random_index, rec.truth_label, rec.rank == 0));
  }
  return out;
}

struct LayerCurveRow {
  int layer = 0;
  double agreement_rate = 0.0;  // percent
  double mean_cosine = 0.0;
  size_t n = 0;
};

// Aggregation "top1" uses only the highest-coefficient value per
// (prefix, layer); "top3" pools all three.
inline std::vector<LayerCurveRow> alignment_curve(const std::vector<AlignmentObservation>& obs,
                                                  int num_layers, bool top1_only) {
  std::vector<LayerCurveRow> rows(static_cast<size_t>(num_layers));
  for (int l = 0; l < num_layers; ++l) rows[static_cast<size_t>(l)].layer = l;
  for (const auto& o : obs) {
    if (top1_only && !o.from_top1) continue;
    auto& row = rows[static_cast<size_t>(o.layer)];
    row.n++;
    row.agreement_rate += o.agreement ? 1.0 : 0.0;
    row.mean_cosine += o.cosine_to_label;
  }
  for (auto& row : rows) {
    if (row.n == 0) continue;
    row.agreement_rate = 100.0 * row.agreement_rate / static_cast<double>(row.n);
    row.mean_cosine /= static_cast<double>(row.n);
  }
  return rows;
}

// Exemplars in the shape of the qualitative table: coherent top-3 labels
// and a value that names the dominant label among its top tokens.
struct QualitativePair {
  std::string key_id;  // k_{index}^{layer}
  std::vector<std::string> value_tokens;
  std::vector<std::pair<std::string, double>> labels_with_share;  // percent
  double coherence = 0.0;
  double dominant_share = 0.0;
};

inline std::vector<QualitativePair> select_qualitative_pairs(
    const KeyProfileSet& profile_set, const LMInterface& lm,
    const std::map<std::string, Vec>& embeddings, double coherence_min, size_t n) {
  std::vector<QualitativePair> candidates;
  for (const auto& [key, profile] : profile_set.profiles) {
    if (!profile.eligible_for_cosine()) continue;
    double coherence = 0.0;
    for (size_t i = 0; i < 3; ++i)
      for (size_t j = i + 1; j < 3; ++j)
        coherence +=
            cosine(embeddings.at(profile.top_labels[i]), embeddings.at(profile.top_labels[j])) / 3.0;
    if (coherence < coherence_min) continue;
    const auto tokens = project_value_to_vocab(lm.ffn_value_column(profile.layer, profile.key_index), lm);
    if (!token_agreement(tokens, profile.top_labels[0])) continue;

    QualitativePair pair;
    pair.key_id = "k_" + std::to_string(profile.key_index) + "^" + std::to_string(profile.layer);
    pair.value_tokens = tokens;
    for (const auto& label : profile.top_labels)
      pair.labels_with_share.emplace_back(
          label, 100.0 * static_cast<double>(profile.label_histogram.at(label)) /
                     static_cast<double>(profile.activation_count));
    pair.coherence = coherence;
    pair.dominant_share = profile.dominant_share();
    candidates.push_back(std::move(pair));
  }
  std::sort(candidates.begin(), candidates.end(), [](const QualitativePair& a, const QualitativePair& b) {
    if (a.dominant_share != b.dominant_share) return a.dominant_share > b.dominant_share;
    return a.key_id < b.key_id;
  });
  if (candidates.size() > n) candidates.resize(n);
  return candidates;
}

// --- probe output files ---------------------------------------------------------

inline std::string key_coherence_csv(const std::vector<LayerDistributions>& dists) {
  CsvWriter csv({"layer", "metric", "population", "aggregation", "mean", "max", "n", "values_digest"});
  for (size_t l = 0; l < dists.size(); ++l) {
    auto row = [&](const char* population, const std::vector<double>& values) {
      Fnv1a64 h;
      for (double v : values) h.update(&v, sizeof(v));
      csv.append_row({std::to_string(l), "key_coherence", population, "pairs",
                      format_fixed(LayerDistributions::mean_of(values), 6),
                      format_fixed(LayerDistributions::max_of(values), 6),
                      std::to_string(values.size()), h.hex()});
    };
    row("real", dists[l].real);
    row("baseline", dists[l].baseline);
  }
  return csv.str();
}

inline std::string key_coherence_values_csv(const std::vector<LayerDistributions>& dists) {
  CsvWriter csv({"layer", "metric", "population", "aggregation", "value"});
  for (size_t l = 0; l < dists.size(); ++l) {
    for (double v : dists[l].real)
      csv.append_row({std::to_string(l), "key_coherence", "real", "pairs", format_fixed(v, 6)});
    for (double v : dists[l].baseline)
      csv.append_row({std::to_string(l), "key_coherence", "baseline", "pairs", format_fixed(v, 6)});
  }
  return csv.str();
}

inline std::string value_alignment_csv(const ValueAlignmentResult& result, int num_layers) {
  CsvWriter csv({"layer", "metric", "population", "aggregation", "mean", "max", "n", "values_digest"});
  auto emit = [&](const std::vector<AlignmentObservation>& obs, const char* population) {
    for (bool top1 : {true, false}) {
      const auto curve = alignment_curve(obs, num_layers, top1);
      for (const auto& row : curve) {
        std::vector<double> agreements, cosines;
        for (const auto& o : obs) {
          if (o.layer != row.layer || (top1 && !o.from_top1)) continue;
          agreements.push_back(o.agreement ? 1.0 : 0.0);
          cosines.push_back(o.cosine_to_label);
        }
        Fnv1a64 ha, hc;
        for (double v : agreements) ha.update(&v, sizeof(v));
        for (double v : cosines) hc.update(&v, sizeof(v));
        const char* agg = top1 ? "top1" : "top3";
        csv.append_row({std::to_string(row.layer), "value_agreement", population, agg,
                        format_fixed(row.agreement_rate, 6),
                        format_fixed(LayerDistributions::max_of(agreements) * 100.0, 6),
                        std::to_string(row.n), ha.hex()});
        csv.append_row({std::to_string(row.layer), "value_cosine", population, agg,
                        format_fixed(row.mean_cosine, 6),
                        format_fixed(LayerDistributions::max_of(cosines), 6), std::to_string(row.n),
                        hc.hex()});
      }
    }
  };
  emit(result.real, "real");
  emit(result.baseline, "baseline");
  return csv.str();
}

inline std::string exemplar_csv(const std::vector<QualitativePair>& pairs) {
  CsvWriter csv({"key", "top_tokens", "top1_label", "top1_share", "top2_label", "top2_share",
                 "top3_label", "top3_share"});
  for (const auto& p : pairs) {
    std::string tokens;
    for (const auto& t : p.value_tokens) tokens += (tokens.empty() ? "" : "|") + normalize_token(t);
    std::vector<std::string> fields{p.key_id, tokens};
    for (size_t i = 0; i < 3; ++i) {
      if (i < p.labels_with_share.size()) {
        fields.push_back(p.labels_with_share[i].first);
        fields.push_back(format_fixed(p.labels_with_share[i].second, 1) + "%");
      } else {
        fields.push_back("");
        fields.push_back("");
      }
    }
    csv.append_row(fields);
  }
  return csv.str();
}

}  // namespace projlens
