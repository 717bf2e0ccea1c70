#include <catch2/catch_amalgamated.hpp>

#include "projlens/label_space.hpp"
#include "projlens/mcqa.hpp"
#include "projlens/synthetic.hpp"
#include "projlens/train.hpp"
#include "support/tmpdir.hpp"

using namespace projlens;
using testsupport::TmpDir;

namespace {

std::vector<PromptSample> pool_with(const std::vector<std::pair<std::string, int>>& labels,
                                    SplitTag tag = SplitTag::TEST_SEEN) {
  std::vector<PromptSample> pool;
  int next = 0;
  for (const auto& [label, count] : labels)
    for (int i = 0; i < count; ++i) {
      PromptSample s;
      s.sample_id = "s" + std::to_string(1000 + next++);
      s.image_id = "img" + std::to_string(next % 7);
      s.norm_box = {0.1, 0.1, 0.6, 0.6};
      s.label = label;
      s.split_tag = tag;
      pool.push_back(std::move(s));
    }
  return pool;
}

}  // namespace

TEST_CASE("build_mcqa filters rare classes and caps frequent ones") {
  const auto pool = pool_with({{"a", 19}, {"b", 25}, {"c", 500}, {"d", 30}, {"e", 21}});
  const auto items = build_mcqa(pool, MCQAGroup::SEEN, 20, 200, 9);

  std::map<std::string, size_t> counts;
  for (const auto& item : items) counts[item.truth()]++;
  CHECK(counts.count("a") == 0);  // 19 < 20
  CHECK(counts.at("b") == 25);
  CHECK(counts.at("c") == 200);  // capped
  CHECK(counts.at("d") == 30);
  CHECK(counts.at("e") == 21);
}

TEST_CASE("every item has four distinct choices with the truth at answer_index") {
  const auto pool = pool_with({{"a", 25}, {"b", 25}, {"c", 25}, {"d", 25}, {"e", 25}});
  const auto items = build_mcqa(pool, MCQAGroup::UNSEEN, 20, 200, 3);
  REQUIRE(!items.empty());
  for (const auto& item : items) {
    std::set<std::string> uniq(item.choices.begin(), item.choices.end());
    CHECK(uniq.size() == 4);
    CHECK(item.group == MCQAGroup::UNSEEN);
    CHECK(item.answer_index >= 0);
    CHECK(item.answer_index < 4);
  }
}

TEST_CASE("build_mcqa needs at least four labels in the group") {
  const auto pool = pool_with({{"a", 25}, {"b", 25}, {"c", 25}});
  CHECK_THROWS_AS(build_mcqa(pool, MCQAGroup::SEEN, 20, 200, 1), error);
}

TEST_CASE("mcqa sets are frozen per (pool, seed)") {
  const auto pool = pool_with({{"a", 25}, {"b", 25}, {"c", 25}, {"d", 25}, {"e", 40}});
  const auto i1 = build_mcqa(pool, MCQAGroup::SEEN, 20, 30, 5);
  const auto i2 = build_mcqa(pool, MCQAGroup::SEEN, 20, 30, 5);
  const auto i3 = build_mcqa(pool, MCQAGroup::SEEN, 20, 30, 6);
  CHECK(i1 == i2);
  CHECK(i1 != i3);
}

TEST_CASE("answer positions are uniform within two points of 25%") {
  std::vector<std::pair<std::string, int>> labels;
  for (int i = 0; i < 8; ++i) labels.push_back({"label" + std::to_string(i), 1500});
  const auto pool = pool_with(labels);
  const auto items = build_mcqa(pool, MCQAGroup::SEEN, 20, 1500, 77);
  REQUIRE(items.size() >= 10000);
  std::array<size_t, 4> freq{};
  for (const auto& item : items) freq[static_cast<size_t>(item.answer_index)]++;
  for (int pos = 0; pos < 4; ++pos) {
    const double pct = 100.0 * static_cast<double>(freq[static_cast<size_t>(pos)]) /
                       static_cast<double>(items.size());
    INFO("position " << pos << " at " << pct << "%");
    CHECK(pct > 23.0);
    CHECK(pct < 27.0);
  }
}

TEST_CASE("greedy label dedup follows the frequency-ordered chain rule") {
  // colinear chain: A~B 0.95, B~C 0.95, A~C ~0.805 (the tightest value the
  // sphere allows); frequency A > B > C -> B is dropped against A, C stays
  // because its similarity to the kept A is under the threshold
  std::map<std::string, size_t> counts{{"A", 100}, {"B", 50}, {"C", 10}};
  const double theta = std::acos(0.95);
  Vec a(3), b(3), c(3);
  a << 1.0, 0.0, 0.0;
  b << std::cos(theta), std::sin(theta), 0.0;
  c << std::cos(2 * theta), std::sin(2 * theta), 0.0;
  REQUIRE(cosine(a, b) == Catch::Approx(0.95).margin(1e-12));
  REQUIRE(cosine(b, c) == Catch::Approx(0.95).margin(1e-12));
  REQUIRE(cosine(a, c) < 0.9);
  std::map<std::string, Vec> embs{{"A", a}, {"B", b}, {"C", c}};

  const auto kept = dedup_similar_labels(counts, embs, 0.9);
  CHECK(kept == std::vector<std::string>{"A", "C"});
}

TEST_CASE("dedup keeps one of identical strings and all orthogonal ones") {
  std::map<std::string, size_t> counts{{"x", 5}, {"y", 5}, {"z", 3}};
  Vec e1(3), e2(3), e3(3);
  e1 << 1, 0, 0;
  e2 << 1, 0, 0;  // duplicate embedding
  e3 << 0, 1, 0;
  std::map<std::string, Vec> embs{{"x", e1}, {"y", e2}, {"z", e3}};
  const auto kept = dedup_similar_labels(counts, embs, 0.9);
  CHECK(kept.size() == 2);
  CHECK(std::count(kept.begin(), kept.end(), "z") == 1);

  std::map<std::string, Vec> ortho{{"x", e1}, {"z", e3}};
  std::map<std::string, size_t> counts2{{"x", 5}, {"z", 3}};
  CHECK(dedup_similar_labels(counts2, ortho, 0.9).size() == 2);
}

TEST_CASE("macro accuracy averages per class, not per item") {
  std::map<std::string, PerClassResult> results;
  results["a"] = {3, 3};  // 100%
  results["b"] = {1, 0};  // 0%
  CHECK(macro_accuracy(results) == Catch::Approx(50.0));  // micro would be 75%

  std::map<std::string, PerClassResult> all_correct{{"a", {5, 5}}, {"b", {2, 2}}};
  CHECK(macro_accuracy(all_correct) == 100.0);

  std::map<std::string, PerClassResult> single{{"a", {4, 1}}};
  CHECK(macro_accuracy(single) == 25.0);

  std::map<std::string, PerClassResult> empty;
  CHECK_THROWS_AS(macro_accuracy(empty), error);
}

TEST_CASE("relative performance and rgr reproduce the reference table rows") {
  struct Row {
    double seen, unseen, rel, rgr_unseen;
  };
  // accuracy pairs with their published derived columns
  const std::vector<Row> rows{
      {77.3, 66.9, 86.5, 167.6}, {78.8, 68.9, 87.4, 175.6}, {84.2, 72.7, 86.3, 190.8},
      {84.2, 74.2, 88.1, 196.8}, {84.1, 74.3, 88.3, 197.2}, {79.4, 67.6, 85.1, 170.4},
      {74.9, 59.4, 79.3, 137.6}};
  for (const auto& row : rows) {
    const auto rel = relative_performance(row.seen, row.unseen);
    REQUIRE(rel.has_value());
    CHECK(*rel == Catch::Approx(row.rel).margin(0.05));
    CHECK(rgr(row.unseen) == Catch::Approx(row.rgr_unseen).margin(0.1));
  }
  CHECK(rgr(50.0) == 100.0);
  CHECK(rgr(25.0) == 0.0);
  CHECK(rgr(68.7) == Catch::Approx(174.8).margin(0.1));
  CHECK_FALSE(relative_performance(0.0, 10.0).has_value());
  const auto same = relative_performance(63.0, 63.0);
  REQUIRE(same.has_value());
  CHECK(*same == 100.0);
}

TEST_CASE("summary csv formats to one decimal and handles ood rows") {
  std::vector<EvalSummaryRow> rows;
  rows.push_back({"enc-a", "lm-b", 84.2, 74.2});
  rows.push_back({"enc-a", "lm-b", std::nullopt, 68.7});
  const std::string csv = eval_summary_csv(rows);
  const auto lines = split(csv, '\n');
  CHECK(lines[0] == "encoder,lm,seen_acc,unseen_acc,rel_perf,rgr_seen,rgr_unseen");
  CHECK(lines[1] == "enc-a,lm-b,84.2,74.2,88.1,236.8,196.8");
  CHECK(lines[2] == "enc-a,lm-b,N/A,68.7,N/A,N/A,174.8");
}

TEST_CASE("score_item picks the argmin with deterministic tie-break") {
  // argmin and tie rules on raw loss arrays
  ItemScore s;
  s.losses = {0.9, 0.2, 0.5, 0.7};
  int pred = 0;
  for (int c = 1; c < 4; ++c)
    if (s.losses[static_cast<size_t>(c)] < s.losses[static_cast<size_t>(pred)]) pred = c;
  CHECK(pred == 1);

  s.losses = {0.3, 0.3, 0.9, 0.9};
  pred = 0;
  for (int c = 1; c < 4; ++c)
    if (s.losses[static_cast<size_t>(c)] < s.losses[static_cast<size_t>(pred)]) pred = c;
  CHECK(pred == 0);
}

TEST_CASE("scoring agrees with an independent full-forward recomputation") {
  TmpDir tmp;
  SyntheticWorldConfig wc;
  wc.seed = 31;
  wc.n_clusters = 4;
  wc.labels_per_cluster = 3;
  wc.n_images = 120;
  wc.regions_per_image = 1;
  SyntheticWorld world(wc);
  const auto gen = generate_synthetic_corpus(world, tmp.file("imgs"));
  ReferenceDims dims;
  dims.d_v = 32;
  const auto backends = make_planted_backends(world, dims, 55);
  auto& lm = *backends.lm;
  FeatureCache features(backends.encoder);

  std::vector<PromptSample> pool;
  std::map<std::string, ImageSplit> img_split;
  for (const auto& im : gen.corpus.images) img_split[im.image_id] = ImageSplit::TEST;
  LabelSplit split;
  for (const auto& l : world.labels()) split.assignment[l] = LabelGroup::SEEN;
  pool = tag_samples(gen.corpus, img_split, split).samples;

  const auto items = build_mcqa(pool, MCQAGroup::SEEN, 1, 5, 3);
  REQUIRE(items.size() >= 20);
  const ProjectionParams proj = init_projection(dims.d_v, lm.d_lm(), 8);

  size_t checked = 0;
  for (const auto& item : items) {
    const ItemScore score = score_item(item, proj, features, gen.corpus, lm);

    // oracle: rebuild each choice end to end and recompute the loss by hand
    int best = -1;
    double best_loss = 1e300;
    const VisionFeatures feats = backends.encoder->encode(gen.corpus.image(item.image_id));
    for (int c = 0; c < 4; ++c) {
      PromptSample s;
      s.image_id = item.image_id;
      s.norm_box = item.norm_box;
      s.label = item.choices[static_cast<size_t>(c)];
      const auto rendered = render_prompt(s, lm.tokenizer(), feats.num_patches());
      const auto input = assemble_input(project(feats, proj), rendered, lm);
      const Mat logits = lm.forward(input.embeddings);
      double total = 0.0;
      size_t n = 0;
      for (size_t i = 0; i < input.targets.size(); ++i) {
        if (!input.mask[i]) continue;
        const auto row = logits.row(static_cast<int>(i));
        const double mx = row.maxCoeff();
        double z = 0.0;
        for (int v = 0; v < logits.cols(); ++v) z += std::exp(row[v] - mx);
        total += mx + std::log(z) - row[input.targets[i]];
        ++n;
      }
      const double loss = total / static_cast<double>(n);
      CHECK(loss == Catch::Approx(score.losses[static_cast<size_t>(c)]).margin(1e-12));
      if (loss < best_loss) {
        best_loss = loss;
        best = c;
      }
    }
    CHECK(best == score.predicted_index);
    ++checked;
  }
  CHECK(checked == items.size());
}

TEST_CASE("scoring the true choice equals the training-style loss bit for bit") {
  TmpDir tmp;
  SyntheticWorldConfig wc;
  wc.seed = 32;
  wc.n_clusters = 4;
  wc.labels_per_cluster = 3;
  wc.n_images = 40;
  wc.regions_per_image = 1;
  SyntheticWorld world(wc);
  const auto gen = generate_synthetic_corpus(world, tmp.file("imgs"));
  ReferenceDims dims;
  dims.d_v = 32;
  const auto backends = make_planted_backends(world, dims, 56);
  auto& lm = *backends.lm;
  FeatureCache features(backends.encoder);

  std::map<std::string, ImageSplit> img_split;
  for (const auto& im : gen.corpus.images) img_split[im.image_id] = ImageSplit::TEST;
  LabelSplit split;
  for (const auto& l : world.labels()) split.assignment[l] = LabelGroup::SEEN;
  const auto pool = tag_samples(gen.corpus, img_split, split).samples;
  const auto items = build_mcqa(pool, MCQAGroup::SEEN, 1, 3, 4);
  const ProjectionParams proj = init_projection(dims.d_v, lm.d_lm(), 8);

  std::map<std::string, const PromptSample*> by_id;
  for (const auto& s : pool) by_id["q_" + s.sample_id] = &s;
  for (const auto& item : items) {
    const ItemScore score = score_item(item, proj, features, gen.corpus, lm);
    const PromptSample& sample = *by_id.at(item.item_id);
    const VisionFeatures& feats = features.get(gen.corpus.image(sample.image_id));
    const auto rendered = render_prompt(sample, lm.tokenizer(), feats.num_patches());
    const auto input = assemble_input(project(feats, proj), rendered, lm);
    const double training_loss =
        lm.masked_loss_with_input_grad(input.embeddings, input.targets, input.mask, nullptr);
    CHECK(score.losses[static_cast<size_t>(item.answer_index)] == training_loss);
  }
}

TEST_CASE("mcqa items round-trip through jsonl") {
  TmpDir tmp;
  std::vector<MCQAItem> items;
  MCQAItem a;
  a.item_id = "q_1";
  a.image_id = "img";
  a.norm_box = {0.1, 0.2, 0.3, 0.4};
  a.choices = {"w", "x", "y", "z"};
  a.answer_index = 2;
  a.group = MCQAGroup::OOD;
  items.push_back(a);
  save_mcqa_items(items, tmp.file("items.jsonl"));
  CHECK(load_mcqa_items(tmp.file("items.jsonl")) == items);
}

TEST_CASE("group purity: distractors come from the item's own pool") {
  const auto seen_pool = pool_with({{"sa", 25}, {"sb", 25}, {"sc", 25}, {"sd", 25}});
  const auto unseen_pool =
      pool_with({{"ua", 25}, {"ub", 25}, {"uc", 25}, {"ud", 25}}, SplitTag::TEST_UNSEEN);
  const auto seen_items = build_mcqa(seen_pool, MCQAGroup::SEEN, 20, 200, 5);
  const auto unseen_items = build_mcqa(unseen_pool, MCQAGroup::UNSEEN, 20, 200, 5);
  const std::set<std::string> seen_labels{"sa", "sb", "sc", "sd"};
  for (const auto& item : seen_items)
    for (const auto& c : item.choices) CHECK(seen_labels.count(c) == 1);
  for (const auto& item : unseen_items)
    for (const auto& c : item.choices) CHECK(seen_labels.count(c) == 0);
}
