#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "projlens/model.hpp"
#include "projlens/prompt.hpp"
#include "projlens/rng.hpp"
#include "projlens/tiny_backends.hpp"

namespace projlens {

enum class MCQAGroup { SEEN, UNSEEN, OOD };

inline std::string to_string(MCQAGroup g) {
  switch (g) {
    case MCQAGroup::SEEN: return "seen";
    case MCQAGroup::UNSEEN: return "unseen";
    case MCQAGroup::OOD: return "ood";
  }
  throw_runtime("bad MCQAGroup");
}

inline MCQAGroup mcqa_group_from_string(const std::string& s) {
  if (s == "seen") return MCQAGroup::SEEN;
  if (s == "unseen") return MCQAGroup::UNSEEN;
  if (s == "ood") return MCQAGroup::OOD;
  throw_parse("unknown mcqa group: " + s);
}

struct MCQAItem {
  std::string item_id;
  std::string image_id;
  NormBox norm_box{};
  std::array<std::string, 4> choices;
  int answer_index = 0;
  MCQAGroup group = MCQAGroup::SEEN;

  const std::string& truth() const { return choices[static_cast<size_t>(answer_index)]; }

  bool operator==(const MCQAItem&) const = default;
};

// Per-class filter/cap, then one 4-choice item per surviving instance with
// three distinct distractors from the group's realized label set. Benchmarks
// are frozen per (pool, seed): identical inputs give identical items.
inline std::vector<MCQAItem> build_mcqa(const std::vector<PromptSample>& pool, MCQAGroup group,
                                        size_t min_count = 20, size_t cap = 200,
                                        uint64_t seed = 0) {
  std::map<std::string, std::vector<const PromptSample*>> by_label;
  for (const auto& s : pool) by_label[s.label].push_back(&s);
  std::vector<std::string> label_set;
  for (const auto& [label, v] : by_label) label_set.push_back(label);
  if (label_set.size() < 4)
    throw_config("build_mcqa: group label set has " + std::to_string(label_set.size()) +
                 " labels; need at least 4 for a 4-choice item");

  std::vector<MCQAItem> items;
  for (auto& [label, samples] : by_label) {
    if (samples.size() < min_count) continue;
    std::sort(samples.begin(), samples.end(),
              [](const PromptSample* a, const PromptSample* b) { return a->sample_id < b->sample_id; });
    std::vector<const PromptSample*> chosen;
    if (samples.size() > cap) {
      Rng cap_rng = derive_rng(seed, "mcqa_cap:" + label);
      for (size_t idx : cap_rng.sample_indices(samples.size(), cap)) chosen.push_back(samples[idx]);
      std::sort(chosen.begin(), chosen.end(), [](const PromptSample* a, const PromptSample* b) {
        return a->sample_id < b->sample_id;
      });
    } else {
      chosen = samples;
    }

    for (const PromptSample* s : chosen) {
      MCQAItem item;
      item.item_id = "q_" + s->sample_id;
      item.image_id = s->image_id;
      item.norm_box = s->norm_box;
      item.group = group;

      Rng rng = derive_rng(seed, "mcqa_item:" + s->sample_id);
      std::vector<std::string> distractors;
      std::set<size_t> taken;
      while (distractors.size() < 3) {
        const size_t idx = static_cast<size_t>(rng.below(label_set.size()));
        if (label_set[idx] == s->label || taken.count(idx)) continue;
        taken.insert(idx);
        distractors.push_back(label_set[idx]);
      }
      item.answer_index = static_cast<int>(rng.below(4));
      int d = 0;
      for (int pos = 0; pos < 4; ++pos)
        item.choices[static_cast<size_t>(pos)] =
            pos == item.answer_index ? s->label : distractors[static_cast<size_t>(d++)];
      items.push_back(std::move(item));
    }
  }
  return items;
}

// Greedy near-duplicate filter in descending frequency order (ties broken
// lexicographically): a label is dropped when its cosine to any kept label
// exceeds the threshold.
inline std::vector<std::string> dedup_similar_labels(const std::map<std::string, size_t>& label_counts,
                                                     const std::map<std::string, Vec>& embeddings,
                                                     double threshold = 0.9) {
  std::vector<std::string> order;
  for (const auto& [label, count] : label_counts) order.push_back(label);
  std::sort(order.begin(), order.end(), [&](const std::string& a, const std::string& b) {
    const size_t ca = label_counts.at(a), cb = label_counts.at(b);
    if (ca != cb) return ca > cb;
    return a < b;
  });

  std::vector<std::string> kept;
  for (const auto& label : order) {
    const Vec& v = embeddings.at(label);
    bool duplicate = false;
    for (const auto& k : kept) {
      if (cosine(v, embeddings.at(k)) > threshold) {
        duplicate = true;
        break;
      }
    }
    if (!duplicate) kept.push_back(label);
  }
  std::sort(kept.begin(), kept.end());
  return kept;
}

struct ItemScore {
  std::array<double, 4> losses{};
  int predicted_index = 0;
};

// Loss-ranked choice: render the full prompt once per choice against the
// same visual features and pick the argmin (ties -> lowest index). The loss
// path is exactly the training one.
inline ItemScore score_item(const MCQAItem& item, const ProjectionParams& projection,
                            FeatureCache& features, const Corpus& corpus, const LMInterface& lm,
                            const std::string& prompt_template = default_prompt_template()) {
  const ImageRecord& image = corpus.image(item.image_id);
  const VisionFeatures& feats = features.get(image);
  const Mat visual = project(feats, projection);

  ItemScore score;
  for (int c = 0; c < 4; ++c) {
    PromptSample s;
    s.sample_id = item.item_id + ":" + std::to_string(c);
    s.image_id = item.image_id;
    s.norm_box = item.norm_box;
    s.label = item.choices[static_cast<size_t>(c)];
    const RenderedPrompt rendered =
        render_prompt(s, lm.tokenizer(), feats.num_patches(), prompt_template);
    const AssembledInput input = assemble_input(visual, rendered, lm);
    const Mat logits = lm.forward(input.embeddings);
    score.losses[static_cast<size_t>(c)] = masked_lm_loss(logits, input.targets, input.mask);
  }
  score.predicted_index = 0;
  for (int c = 1; c < 4; ++c)
    if (score.losses[static_cast<size_t>(c)] < score.losses[static_cast<size_t>(score.predicted_index)])
      score.predicted_index = c;
  return score;
}

// --- metrics -------------------------------------------------------------------

struct PerClassResult {
  size_t n_items = 0;
  size_t n_correct = 0;
  double accuracy() const {
    return n_items == 0 ? 0.0 : 100.0 * static_cast<double>(n_correct) / static_cast<double>(n_items);
  }
};

struct EvalReport {
  std::map<std::string, PerClassResult> per_class;
  double macro_accuracy = 0.0;  // percent
  size_t n_classes = 0;
  size_t n_items = 0;
};

// Mean over classes of per-class accuracy; class frequency does not weight
// the mean.
inline double macro_accuracy(const std::map<std::string, PerClassResult>& per_class) {
  if (per_class.empty()) throw_runtime("macro_accuracy: no classes");
  double sum = 0.0;
  size_t n = 0;
  for (const auto& [label, r] : per_class) {
    if (r.n_items == 0) continue;
    sum += r.accuracy();
    ++n;
  }
  if (n == 0) throw_runtime("macro_accuracy: no class has items");
  return sum / static_cast<double>(n);
}

inline EvalReport make_report(const std::map<std::string, PerClassResult>& per_class) {
  EvalReport rep;
  rep.per_class = per_class;
  rep.macro_accuracy = macro_accuracy(per_class);
  for (const auto& [label, r] : per_class) {
    if (r.n_items == 0) continue;
    rep.n_classes++;
    rep.n_items += r.n_items;
  }
  return rep;
}

// Unseen accuracy as a percentage of seen accuracy.
inline std::optional<double> relative_performance(double seen_acc, double unseen_acc) {
  if (seen_acc <= 0.0) return std::nullopt;
  return 100.0 * unseen_acc / seen_acc;
}

// Relative gain over random guessing; 25% chance under 4 choices.
inline double rgr(double accuracy, double chance = 25.0) {
  return 100.0 * (accuracy - chance) / chance;
}

// --- persistence & reporting -----------------------------------------------------

inline void save_mcqa_items(const std::vector<MCQAItem>& items, const fs::path& path) {
  std::string out;
  for (const auto& item : items) {
    json j;
    j["item_id"] = item.item_id;
    j["image_id"] = item.image_id;
    j["norm_box"] = item.norm_box;
    j["choices"] = item.choices;
    j["answer_index"] = item.answer_index;
    j["group"] = to_string(item.group);
    out += j.dump();
    out += '\n';
  }
  write_atomic(path, out);
}

inline std::vector<MCQAItem> load_mcqa_items(const fs::path& path) {
  std::vector<MCQAItem> items;
  for (const auto& line : read_lines(path)) {
    if (trim(line).empty()) continue;
    json j = parse_json_strict(line, path.string());
    MCQAItem item;
    item.item_id = j["item_id"].get<std::string>();
    item.image_id = j["image_id"].get<std::string>();
    for (size_t i = 0; i < 4; ++i) {
      item.norm_box[i] = j["norm_box"][i].get<double>();
      item.choices[i] = j["choices"][i].get<std::string>();
    }
    item.answer_index = j["answer_index"].get<int>();
    item.group = mcqa_group_from_string(j["group"].get<std::string>());
    items.push_back(std::move(item));
  }
  return items;
}

inline json eval_report_json(const EvalReport& report) {
  json j;
  j["macro_accuracy"] = report.macro_accuracy;
  j["n_classes"] = report.n_classes;
  j["n_items"] = report.n_items;
  json per_class = json::object();
  for (const auto& [label, r] : report.per_class) {
    per_class[label] = {{"n_items", r.n_items}, {"n_correct", r.n_correct}, {"accuracy", r.accuracy()}};
  }
  j["per_class"] = per_class;
  return j;
}

struct EvalSummaryRow {
  std::string encoder_id;
  std::string lm_id;
  std::optional<double> seen_acc;
  std::optional<double> unseen_acc;
};

// Combined CSV, one row per run, every number printed to one decimal. Seen
// columns are N/A for OOD-only runs.
inline std::string eval_summary_csv(const std::vector<EvalSummaryRow>& rows) {
  CsvWriter csv({"encoder", "lm", "seen_acc", "unseen_acc", "rel_perf", "rgr_seen", "rgr_unseen"});
  auto fmt = [](const std::optional<double>& v) {
    return v ? format_fixed(*v, 1) : std::string("N/A");
  };
  for (const auto& row : rows) {
    std::optional<double> rel, rgr_seen, rgr_unseen;
    if (row.seen_acc && row.unseen_acc) rel = relative_performance(*row.seen_acc, *row.unseen_acc);
    if (row.seen_acc) rgr_seen = rgr(*row.seen_acc);
    if (row.unseen_acc) rgr_unseen = rgr(*row.unseen_acc);
    csv.append_row({row.encoder_id, row.lm_id, fmt(row.seen_acc), fmt(row.unseen_acc), fmt(rel),
                    fmt(rgr_seen), fmt(rgr_unseen)});
  }
  return csv.str();
}

}  // namespace projlens
