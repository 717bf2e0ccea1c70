#pragma once

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "projlens/corpus.hpp"
#include "projlens/label_space.hpp"
#include "projlens/rng.hpp"
#include "projlens/tokenizer.hpp"

namespace projlens {

// Annotation kept iff min_frac <= box_area / image_area <= max_frac.
// "smaller than" / "larger than" are strict discards, so both boundaries
// are inclusive.
inline Corpus filter_bbox_area(const Corpus& corpus, double min_frac = 0.002,
                               double max_frac = 0.5) {
  std::map<std::string, const ImageRecord*> images;
  for (const auto& im : corpus.images) images[im.image_id] = &im;

  Corpus out;
  std::map<std::string, bool> used_images;
  for (const auto& a : corpus.annotations) {
    const ImageRecord& im = *images.at(a.image_id);
    const double box_area = (a.box[2] - a.box[0]) * (a.box[3] - a.box[1]);
    const double image_area = static_cast<double>(im.width) * im.height;
    const double frac = box_area / image_area;
    if (frac < min_frac || frac > max_frac) continue;
    used_images[a.image_id] = true;
    out.annotations.push_back(a);
  }
  for (const auto& im : corpus.images)
    if (used_images.count(im.image_id)) out.images.push_back(im);
  out.provenance = corpus.provenance;
  out.provenance.digest = detail::corpus_digest(out);
  return out;
}

enum class ImageSplit { TRAIN, TEST };

// Seeded uniform shuffle over the sorted image ids; the first
// floor(N * train_frac) land in TRAIN.
inline std::map<std::string, ImageSplit> split_images(const Corpus& corpus,
                                                      double train_frac, uint64_t seed) {
  if (!(train_frac > 0.0 && train_frac < 1.0)) throw_config("train_frac must be in (0, 1)");
  std::vector<std::string> ids;
  for (const auto& im : corpus.images) ids.push_back(im.image_id);
  std::sort(ids.begin(), ids.end());
  Rng rng = derive_rng(seed, "image_split");
  rng.shuffle(ids);
  const size_t n_train = static_cast<size_t>(std::floor(static_cast<double>(ids.size()) * train_frac));
  std::map<std::string, ImageSplit> out;
  for (size_t i = 0; i < ids.size(); ++i)
    out[ids[i]] = i < n_train ? ImageSplit::TRAIN : ImageSplit::TEST;
  return out;
}

enum class SplitTag { TRAIN_SEEN, TEST_SEEN, TEST_UNSEEN };

inline std::string to_string(SplitTag t) {
  switch (t) {
    case SplitTag::TRAIN_SEEN: return "train_seen";
    case SplitTag::TEST_SEEN: return "test_seen";
    case SplitTag::TEST_UNSEEN: return "test_unseen";
  }
  throw_runtime("bad SplitTag");
}

inline SplitTag split_tag_from_string(const std::string& s) {
  if (s == "train_seen") return SplitTag::TRAIN_SEEN;
  if (s == "test_seen") return SplitTag::TEST_SEEN;
  if (s == "test_unseen") return SplitTag::TEST_UNSEEN;
  throw_parse("unknown split tag: " + s);
}

// Normalized box, each coordinate in [0,1] rounded to 2 decimals.
using NormBox = std::array<double, 4>;

struct PromptSample {
  std::string sample_id;
  std::string image_id;
  NormBox norm_box{};
  std::string label;
  SplitTag split_tag = SplitTag::TRAIN_SEEN;

  bool operator==(const PromptSample&) const = default;
};

struct TagStats {
  size_t dropped_train_unseen = 0;
  size_t dropped_degenerate_rounding = 0;
  size_t dropped_unassigned_label = 0;
};

struct TagResult {
  std::vector<PromptSample> samples;
  TagStats stats;
};

inline double round2_half_away(double v) { return std::round(v * 100.0) / 100.0; }

// TRAIN image x SEEN label -> TRAIN_SEEN; TEST x SEEN -> TEST_SEEN;
// TEST x UNSEEN -> TEST_UNSEEN. TRAIN-image/UNSEEN-label annotations are
// dropped entirely: using them anywhere would leak unseen labels into the
// training images' supervision context.
inline TagResult tag_samples(const Corpus& corpus,
                             const std::map<std::string, ImageSplit>& image_split,
                             const LabelSplit& label_split) {
  std::map<std::string, const ImageRecord*> images;
  for (const auto& im : corpus.images) images[im.image_id] = &im;

  TagResult res;
  for (const auto& a : corpus.annotations) {
    const auto ait = label_split.assignment.find(a.raw_label);
    if (ait == label_split.assignment.end()) {
      res.stats.dropped_unassigned_label++;
      continue;
    }
    const ImageRecord& im = *images.at(a.image_id);
    const ImageSplit side = image_split.at(a.image_id);
    const bool seen = ait->second == LabelGroup::SEEN;
    if (side == ImageSplit::TRAIN && !seen) {
      res.stats.dropped_train_unseen++;
      continue;
    }
    NormBox nb{round2_half_away(a.box[0] / im.width), round2_half_away(a.box[1] / im.height),
               round2_half_away(a.box[2] / im.width), round2_half_away(a.box[3] / im.height)};
    if (!(nb[0] < nb[2] && nb[1] < nb[3])) {
      res.stats.dropped_degenerate_rounding++;
      continue;
    }
    PromptSample s;
    s.sample_id = a.annotation_id;
    s.image_id = a.image_id;
    s.norm_box = nb;
    s.label = a.raw_label;
    s.split_tag = side == ImageSplit::TRAIN
                      ? SplitTag::TRAIN_SEEN
                      : (seen ? SplitTag::TEST_SEEN : SplitTag::TEST_UNSEEN);
    res.samples.push_back(std::move(s));
  }
  return res;
}

// `bbox:[[x1],[y1],[x2],[y2]]` with fixed two-decimal coordinates. The label
// is appended after a single space so space-prefixed vocabularies produce
// natural word tokens; exposed as a config string.
inline std::string default_prompt_template() { return "bbox:[[{x1}],[{y1}],[{x2}],[{y2}]]"; }

inline std::string render_prefix_text(const NormBox& box,
                                      const std::string& tmpl = default_prompt_template()) {
  std::string out = tmpl;
  const char* keys[4] = {"{x1}", "{y1}", "{x2}", "{y2}"};
  for (int i = 0; i < 4; ++i) {
    const auto pos = out.find(keys[i]);
    if (pos == std::string::npos) throw_config("prompt template missing " + std::string(keys[i]));
    out.replace(pos, 4, format_fixed(box[static_cast<size_t>(i)], 2));
  }
  return out;
}

struct RenderedPrompt {
  std::vector<int> text_prefix_tokens;  // post-image text, label excluded
  std::vector<int> label_tokens;        // tokens of " " + label
  int eos_token = -1;                   // newline id
  int image_slot = 0;                   // visual token positions after BOS
  std::vector<bool> loss_mask;          // per target position; true on label + eos targets

  size_t total_len() const {
    return 1 + static_cast<size_t>(image_slot) + text_prefix_tokens.size() + label_tokens.size() + 1;
  }
};

// Sequence layout: [BOS] + image_slot + text_prefix + label + eos. The mask
// ranges over target positions (next-token targets), true exactly where the
// target is a label token or the eos.
inline RenderedPrompt render_prompt(const PromptSample& sample, const TokenizerView& tokenizer,
                                    int image_slot,
                                    const std::string& tmpl = default_prompt_template()) {
  RenderedPrompt r;
  r.image_slot = image_slot;
  r.text_prefix_tokens = tokenizer.encode(render_prefix_text(sample.norm_box, tmpl));
  r.label_tokens = tokenizer.encode(" " + sample.label);
  if (r.label_tokens.empty()) throw_runtime("label tokenizes to empty: " + sample.label);
  r.eos_token = tokenizer.newline_id();

  const size_t total = r.total_len();
  r.loss_mask.assign(total - 1, false);
  // target at position i is the token at i + 1
  const size_t label_start = 1 + static_cast<size_t>(image_slot) + r.text_prefix_tokens.size();
  for (size_t t = label_start; t < total; ++t) r.loss_mask[t - 1] = true;
  return r;
}

// --- ablation subsets -------------------------------------------------------

enum class AblationMethod { CLASS_EXCLUSIVE, CLASS_PRESERVING };

inline std::string to_string(AblationMethod m) {
  return m == AblationMethod::CLASS_EXCLUSIVE ? "class_exclusive" : "class_preserving";
}

struct AblationSubset {
  AblationMethod method = AblationMethod::CLASS_EXCLUSIVE;
  double proportion = 0.0;
  std::set<std::string> sample_ids;
  uint64_t seed = 0;
  bool floor_relaxed = false;  // budget < label count; 1-per-label floor was relaxed
};

namespace detail {

inline std::map<std::string, std::vector<const PromptSample*>> pool_by_label(
    const std::vector<PromptSample>& pool) {
  std::map<std::string, std::vector<const PromptSample*>> out;
  for (const auto& s : pool) out[s.label].push_back(&s);
  for (auto& [label, v] : out)
    std::sort(v.begin(), v.end(), [](const PromptSample* a, const PromptSample* b) {
      return a->sample_id < b->sample_id;
    });
  return out;
}

// One seeded permutation of the unique labels, shared by every proportion:
// subset(p) keeps all samples of the first ceil(L * p) labels, so smaller
// subsets nest inside larger ones at the label level.
inline std::vector<std::string> exclusive_label_order(
    const std::map<std::string, std::vector<const PromptSample*>>& by_label, uint64_t seed) {
  std::vector<std::string> labels;
  for (const auto& [label, v] : by_label) labels.push_back(label);
  Rng rng = derive_rng(seed, "ablation_label_perm");
  rng.shuffle(labels);
  return labels;
}

}  // namespace detail

inline AblationSubset build_ablation_subsets(const std::vector<PromptSample>& train_seen_pool,
                                             AblationMethod method, double proportion,
                                             uint64_t seed) {
  const std::set<double> allowed{0.5, 0.25, 0.1, 0.05, 0.01};
  if (!allowed.count(proportion))
    throw_config("ablation proportion must be one of 0.5, 0.25, 0.1, 0.05, 0.01");

  const auto by_label = detail::pool_by_label(train_seen_pool);
  const auto order = detail::exclusive_label_order(by_label, seed);
  const size_t n_keep_labels =
      static_cast<size_t>(std::ceil(static_cast<double>(order.size()) * proportion));

  AblationSubset subset;
  subset.method = method;
  subset.proportion = proportion;
  subset.seed = seed;

  size_t exclusive_total = 0;
  for (size_t i = 0; i < n_keep_labels; ++i) exclusive_total += by_label.at(order[i]).size();

  if (method == AblationMethod::CLASS_EXCLUSIVE) {
    for (size_t i = 0; i < n_keep_labels; ++i)
      for (const PromptSample* s : by_label.at(order[i])) subset.sample_ids.insert(s->sample_id);
    return subset;
  }

  // CLASS_PRESERVING: per-label proportional quotas summing exactly to the
  // class-exclusive total, floor of one sample per label while the budget
  // allows, then per-label seeded draws without replacement.
  const size_t target = exclusive_total;
  const size_t pool_total = train_seen_pool.size();
  std::vector<std::string> labels;
  for (const auto& [label, v] : by_label) labels.push_back(label);

  std::vector<size_t> quota(labels.size(), 0);
  std::vector<double> frac(labels.size(), 0.0);
  size_t assigned = 0;
  for (size_t i = 0; i < labels.size(); ++i) {
    const double raw = static_cast<double>(by_label.at(labels[i]).size()) *
                       static_cast<double>(target) / static_cast<double>(pool_total);
    quota[i] = static_cast<size_t>(std::floor(raw));
    frac[i] = raw - std::floor(raw);
    assigned += quota[i];
  }

  // remainder by largest fractional part (ties: label order), capped by pool size
  std::vector<size_t> by_frac(labels.size());
  for (size_t i = 0; i < labels.size(); ++i) by_frac[i] = i;
  std::sort(by_frac.begin(), by_frac.end(), [&](size_t a, size_t b) {
    if (frac[a] != frac[b]) return frac[a] > frac[b];
    return labels[a] < labels[b];
  });
  size_t remainder = target - assigned;
  for (size_t round = 0; remainder > 0; ++round) {
    bool progressed = false;
    for (size_t idx : by_frac) {
      if (remainder == 0) break;
      if (quota[idx] < by_label.at(labels[idx]).size()) {
        quota[idx]++;
        remainder--;
        progressed = true;
      }
    }
    if (!progressed) break;  // every label is saturated; target equals pool size
  }

  // floor of 1: move budget from the largest quotas (seeded tie-breaks)
  // toward empty labels while possible
  Rng floor_rng = derive_rng(seed, "ablation_floor");
  std::vector<size_t> empties;
  for (size_t i = 0; i < labels.size(); ++i)
    if (quota[i] == 0 && !by_label.at(labels[i]).empty()) empties.push_back(i);
  for (size_t e : empties) {
    std::vector<size_t> donors;
    size_t max_quota = 1;
    for (size_t i = 0; i < labels.size(); ++i) max_quota = std::max(max_quota, quota[i]);
    if (max_quota < 2) {
      subset.floor_relaxed = true;
      break;
    }
    for (size_t i = 0; i < labels.size(); ++i)
      if (quota[i] == max_quota) donors.push_back(i);
    const size_t donor = donors[floor_rng.below(donors.size())];
    quota[donor]--;
    quota[e]++;
  }

  for (size_t i = 0; i < labels.size(); ++i) {
    if (quota[i] == 0) continue;
    const auto& samples = by_label.at(labels[i]);
    Rng rng = derive_rng(seed, "ablation_pick:" + labels[i]);
    for (size_t idx : rng.sample_indices(samples.size(), quota[i]))
      subset.sample_ids.insert(samples[idx]->sample_id);
  }
  return subset;
}

// --- persistence ------------------------------------------------------------

inline std::string prompt_sample_line(const PromptSample& s) {
  json j;
  j["sample_id"] = s.sample_id;
  j["image_id"] = s.image_id;
  j["norm_box"] = s.norm_box;
  j["label"] = s.label;
  j["split_tag"] = to_string(s.split_tag);
  return j.dump();
}

inline void save_prompt_pool(const std::vector<PromptSample>& pool, const fs::path& path) {
  std::string out;
  for (const auto& s : pool) {
    out += prompt_sample_line(s);
    out += '\n';
  }
  write_atomic(path, out);
}

inline std::vector<PromptSample> load_prompt_pool(const fs::path& path) {
  std::vector<PromptSample> pool;
  for (const auto& line : read_lines(path)) {
    if (trim(line).empty()) continue;
    json j = parse_json_strict(line, path.string());
    PromptSample s;
    s.sample_id = j["sample_id"].get<std::string>();
    s.image_id = j["image_id"].get<std::string>();
    for (int i = 0; i < 4; ++i) s.norm_box[static_cast<size_t>(i)] = j["norm_box"][static_cast<size_t>(i)].get<double>();
    s.label = j["label"].get<std::string>();
    s.split_tag = split_tag_from_string(j["split_tag"].get<std::string>());
    pool.push_back(std::move(s));
  }
  return pool;
}

inline void save_ablation_manifest(const AblationSubset& subset, const fs::path& path) {
  Fnv1a64 h;
  for (const auto& id : subset.sample_ids) {
    h.update(id);
    h.update("\n");
  }
  json j;
  j["method"] = to_string(subset.method);
  j["proportion"] = subset.proportion;
  j["seed"] = subset.seed;
  j["sample_ids_digest"] = h.hex();
  j["count"] = subset.sample_ids.size();
  j["floor_relaxed"] = subset.floor_relaxed;
  j["sample_ids"] = std::vector<std::string>(subset.sample_ids.begin(), subset.sample_ids.end());
  write_atomic(path, j.dump(2) + "\n");
}

}  // namespace projlens
