#include <catch2/catch_amalgamated.hpp>

#include "projlens/label_space.hpp"
#include "support/oracles.hpp"
#include "support/tmpdir.hpp"

using namespace projlens;

namespace {

Corpus corpus_with_labels(const std::vector<std::pair<std::string, int>>& label_counts) {
  Corpus c;
  c.images.push_back({"img", 1000, 1000, ""});
  int next = 0;
  for (const auto& [label, count] : label_counts)
    for (int i = 0; i < count; ++i) {
      RegionAnnotation a;
      a.annotation_id = "a" + std::to_string(next++);
      a.image_id = "img";
      a.box = {0, 0, 10, 10};
      a.raw_label = label;
      c.annotations.push_back(std::move(a));
    }
  return c;
}

std::vector<Vec> make_unit(std::vector<std::vector<double>> rows) {
  std::vector<Vec> out;
  for (auto& r : rows) {
    Vec v(static_cast<int>(r.size()));
    for (size_t i = 0; i < r.size(); ++i) v[static_cast<int>(i)] = r[i];
    out.push_back(l2_normalize(v));
  }
  return out;
}

}  // namespace

TEST_CASE("synset lemma extraction") {
  CHECK(synset_lemma("dog.n.01") == "dog");
  CHECK(synset_lemma("traffic_light.n.01") == "traffic light");
  CHECK(synset_lemma("Dog.n.03") == "dog");
  CHECK_FALSE(synset_lemma("plain label").has_value());
  CHECK_FALSE(synset_lemma("dog").has_value());
}

TEST_CASE("lemma dedup keeps only the most frequent synset") {
  auto c = corpus_with_labels({{"dog.n.01", 50}, {"dog.n.03", 5}, {"cat.n.01", 7}});
  const auto [out, vocab] = dedup_synsets_by_lemma(c);
  REQUIRE(vocab.entries.count("dog"));
  CHECK(vocab.entries.at("dog").count == 50);
  CHECK(vocab.entries.at("dog").origin_synsets == std::set<std::string>{"dog.n.01"});
  CHECK(vocab.entries.at("cat").count == 7);
  CHECK(out.annotations.size() == 57);
  for (const auto& a : out.annotations) CHECK((a.raw_label == "dog" || a.raw_label == "cat"));
}

TEST_CASE("lemma dedup tie goes to the lexicographically smaller synset") {
  auto c = corpus_with_labels({{"bank.n.02", 7}, {"bank.n.01", 7}});
  const auto [out, vocab] = dedup_synsets_by_lemma(c);
  CHECK(vocab.entries.at("bank").count == 7);
  CHECK(vocab.entries.at("bank").origin_synsets == std::set<std::string>{"bank.n.01"});
}

TEST_CASE("plain labels pass through lowercased and trimmed") {
  auto c = corpus_with_labels({{"  Brown Bear ", 3}});
  const auto [out, vocab] = dedup_synsets_by_lemma(c);
  REQUIRE(vocab.entries.count("brown bear"));
  CHECK(vocab.entries.at("brown bear").count == 3);
}

TEST_CASE("rare-label filter uses strict less-than") {
  auto c = corpus_with_labels({{"a.n.01", 9}, {"b.n.01", 10}, {"c.n.01", 30}});
  auto [dedup, vocab] = dedup_synsets_by_lemma(c);
  const auto [filtered, kept] = filter_rare_labels(dedup, vocab, 10);
  CHECK_FALSE(kept.entries.count("a"));
  CHECK(kept.entries.count("b"));
  CHECK(kept.entries.at("b").count == 10);
  CHECK(filtered.annotations.size() == 40);

  const auto [identity, kept1] = filter_rare_labels(dedup, vocab, 1);
  CHECK(kept1.entries.size() == 3);
  CHECK(identity.annotations.size() == dedup.annotations.size());
}

TEST_CASE("hash embedding provider is deterministic and unit-norm") {
  HashEmbeddingProvider p(24, 7);
  const Vec a = p.embed_one("dog");
  const Vec b = p.embed_one("dog");
  CHECK(a == b);
  CHECK(std::abs(a.norm() - 1.0) < 1e-6);

  HashEmbeddingProvider p2(24, 7);
  CHECK(p2.embed_one("dog") == a);  // stable across instances
  CHECK(p.embed_one("cat") != a);
}

TEST_CASE("embed_labels yields one unit vector per label") {
  auto c = corpus_with_labels({{"a.n.01", 12}, {"b.n.01", 12}});
  auto [dedup, vocab] = dedup_synsets_by_lemma(c);
  HashEmbeddingProvider p(16, 3);
  const auto embs = embed_labels(vocab, p);
  CHECK(embs.size() == 2);
  for (const auto& [label, v] : embs) CHECK(std::abs(v.norm() - 1.0) < 1e-6);
}

TEST_CASE("caching provider survives inner failure once cached") {
  struct Flaky : EmbeddingProvider {
    int calls = 0;
    std::string provider_id() const override { return "flaky"; }
    int dim() const override { return 4; }
    std::vector<Vec> embed(const std::vector<std::string>& texts) override {
      if (++calls > 1) throw std::runtime_error("provider down");
      std::vector<Vec> out;
      for (size_t i = 0; i < texts.size(); ++i) out.push_back(Vec::Ones(4));
      return out;
    }
  };
  CachingEmbeddingProvider cache(std::make_shared<Flaky>());
  CHECK_NOTHROW(cache.embed({"x", "y"}));
  CHECK_NOTHROW(cache.embed({"x"}));  // served from cache
  REQUIRE_THROWS_WITH(cache.embed({"z"}), Catch::Matchers::ContainsSubstring("z"));
}

TEST_CASE("spherical k-means separates two tight groups") {
  // two points within 5 degrees of e1, two within 5 degrees of e2
  auto pts = make_unit({{1.0, 0.05, 0}, {1.0, -0.05, 0}, {0.05, 1.0, 0}, {-0.05, 1.0, 0}});
  const auto res = spherical_kmeans(pts, 2, 42);
  CHECK(res.assignment[0] == res.assignment[1]);
  CHECK(res.assignment[2] == res.assignment[3]);
  CHECK(res.assignment[0] != res.assignment[2]);

  const auto oracle = testsupport::brute_force_two_means(pts);
  CHECK(res.objective == Catch::Approx(oracle.best_objective).margin(1e-9));
}

TEST_CASE("k-means identity and antipodal edge cases") {
  auto same = make_unit({{1, 0}, {1, 0}, {1, 0}});
  const auto res1 = spherical_kmeans(same, 1, 1);
  CHECK(res1.centroids.size() == 1);
  CHECK((res1.centroids[0] - same[0]).norm() < 1e-12);

  auto anti = make_unit({{1, 0}, {-1, 0}});
  const auto res2 = spherical_kmeans(anti, 2, 1);
  CHECK(res2.assignment[0] != res2.assignment[1]);
}

TEST_CASE("k-means rejects K larger than distinct points") {
  auto pts = make_unit({{1, 0}, {1, 0}});
  CHECK_THROWS_AS(spherical_kmeans(pts, 2, 1), error);
}

TEST_CASE("k-means centroids stay unit-norm and points stay locally optimal") {
  Rng rng(99);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<Vec> pts;
    const int n = 5 + static_cast<int>(rng.below(7));
    for (int i = 0; i < n; ++i) {
      Vec v(4);
      for (int d = 0; d < 4; ++d) v[d] = rng.normal();
      pts.push_back(l2_normalize(v));
    }
    const auto res = spherical_kmeans(pts, 2, trial);
    for (const auto& c : res.centroids) CHECK(std::abs(c.norm() - 1.0) < 1e-6);
    // after convergence every point sits at its argmax-cosine centroid
    for (size_t i = 0; i < pts.size(); ++i) {
      const double own = pts[i].dot(res.centroids[static_cast<size_t>(res.assignment[i])]);
      for (const auto& c : res.centroids) CHECK(own >= pts[i].dot(c) - 1e-12);
    }
  }
}

TEST_CASE("k-means with restarts matches brute force on small fixtures") {
  Rng rng(7);
  int global_hits = 0;
  const int trials = 20;
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<Vec> pts;
    const int n = 4 + static_cast<int>(rng.below(9));  // 4..12
    for (int i = 0; i < n; ++i) {
      Vec v(3);
      for (int d = 0; d < 3; ++d) v[d] = rng.normal();
      pts.push_back(l2_normalize(v));
    }
    const auto res = spherical_kmeans(pts, 2, 1000 + trial, 100, 1e-9, 10);
    const auto oracle = testsupport::brute_force_two_means(pts);
    if (std::abs(res.objective - oracle.best_objective) < 1e-9) ++global_hits;
    bool is_local = false;
    for (double obj : oracle.local_optima_objectives)
      if (std::abs(res.objective - obj) < 1e-9) is_local = true;
    CHECK(is_local);
  }
  CHECK(global_hits >= trials - 1);
}

TEST_CASE("k-means is deterministic in (vectors, K, seed)") {
  auto pts = make_unit({{1, 0.2, 0}, {0.9, -0.1, 0.2}, {0, 1, 0.1}, {0.1, 0.9, -0.2}, {0, 0, 1}});
  const auto a = spherical_kmeans(pts, 2, 5);
  const auto b = spherical_kmeans(pts, 2, 5);
  CHECK(a.assignment == b.assignment);
  CHECK(a.objective == b.objective);
}

TEST_CASE("assign_split marks the larger cluster as seen") {
  KMeansResult clustering;
  clustering.assignment = {0, 0, 1, 0, 1};
  clustering.centroids = make_unit({{1, 0}, {0, 1}});
  const auto split =
      assign_split(clustering, {"a", "b", "c", "d", "e"}, 9, "hash:test");
  CHECK(split.is_seen("a"));
  CHECK(split.is_seen("b"));
  CHECK(split.is_seen("d"));
  CHECK_FALSE(split.is_seen("c"));
  CHECK_FALSE(split.is_seen("e"));
  CHECK(split.labels(LabelGroup::SEEN).size() == 3);
  CHECK(split.labels(LabelGroup::UNSEEN).size() == 2);
}

TEST_CASE("assign_split tie goes to cluster 0") {
  KMeansResult clustering;
  clustering.assignment = {0, 1, 0, 1};
  clustering.centroids = make_unit({{1, 0}, {0, 1}});
  const auto split = assign_split(clustering, {"a", "b", "c", "d"}, 9, "p");
  CHECK(split.is_seen("a"));
  CHECK(split.is_seen("c"));
  CHECK_FALSE(split.is_seen("b"));
}

TEST_CASE("split partition is disjoint and exhaustive, and round-trips") {
  auto pts = make_unit({{1, 0.1}, {1, -0.1}, {0.1, 1}, {-0.1, 1}, {0.5, 0.5}});
  std::vector<std::string> labels{"a", "b", "c", "d", "e"};
  const auto clustering = spherical_kmeans(pts, 2, 3);
  const auto split = assign_split(clustering, labels, 3, "hash:d2:s1");
  CHECK(split.assignment.size() == labels.size());
  size_t seen = split.labels(LabelGroup::SEEN).size();
  size_t unseen = split.labels(LabelGroup::UNSEEN).size();
  CHECK(seen + unseen == labels.size());

  testsupport::TmpDir tmp;
  const auto path = tmp.file("split.json");
  save_label_split(split, path, "post_rare_filter_pre_area_filter");
  const auto loaded = load_label_split(path);
  CHECK(loaded.assignment == split.assignment);
  CHECK(loaded.seed == split.seed);
  CHECK(loaded.provider_id == split.provider_id);
}
