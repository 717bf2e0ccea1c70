#include <catch2/catch_amalgamated.hpp>

#include <cstdlib>
#include <thread>

#include "projlens/pipeline.hpp"
#include "support/tmpdir.hpp"

using namespace projlens;
using testsupport::TmpDir;

namespace {

json small_config(const fs::path& out_dir, uint64_t world_seed = 42) {
  json j;
  j["out_dir"] = out_dir.string();
  j["corpus"] = {{"type", "synthetic"},
                 {"synthetic",
                  {{"seed", world_seed},
                   {"n_clusters", 6},
                   {"labels_per_cluster", 4},
                   {"n_images", 600},
                   {"regions_per_image", 1}}}};
  j["filters"] = {{"min_label_count", 5}, {"mcqa_min_count", 5}, {"mcqa_cap", 40}};
  j["seeds"] = {{"split_seed", 7}, {"mcqa_seed", 17}, {"train_seed", 5}, {"probe_seed", 23}};
  j["embedding"] = {{"provider", "planted"}, {"dim", 16}};
  j["backends"] = {{"encoder", "planted"},
                   {"d_v", 32},
                   {"num_patches", 8},
                   {"lm", {{"seed", 99}, {"n_layers", 2}, {"semantic", true}}}};
  j["train"] = {{"lr_peak", 0.01}, {"epochs", 2}};
  j["ablation"] = {{"methods", {"class_preserving"}}, {"proportions", {0.5}}};
  j["probe"] = {{"max_prefixes", 60}};
  return j;
}

}  // namespace

TEST_CASE("config parsing is strict about unknown keys") {
  TmpDir tmp;
  json j = small_config(tmp.file("run"));
  j["unknown_top_level"] = 1;
  CHECK_THROWS_AS(RunConfig::from_json(j), error);

  json j2 = small_config(tmp.file("run"));
  j2["train"]["learning_rate"] = 0.1;  // wrong key name
  try {
    RunConfig::from_json(j2);
    FAIL("expected config error");
  } catch (const error& e) {
    CHECK(e.kind() == errc::config);
    CHECK(std::string(e.what()).find("learning_rate") != std::string::npos);
  }
}

TEST_CASE("config validates threshold domains") {
  TmpDir tmp;
  json j = small_config(tmp.file("run"));
  j["filters"]["min_area_frac"] = 0.9;
  j["filters"]["max_area_frac"] = 0.1;
  CHECK_THROWS_AS(RunConfig::from_json(j), error);

  json j2 = small_config(tmp.file("run"));
  j2["image_split"] = {{"train_frac", 1.5}};
  CHECK_THROWS_AS(RunConfig::from_json(j2), error);

  json j3 = small_config(tmp.file("run"));
  j3["embedding"] = {{"provider", "nonsense"}};
  CHECK_THROWS_AS(RunConfig::from_json(j3), error);
}

TEST_CASE("stages refuse to run before their dependencies") {
  TmpDir tmp;
  Pipeline pipeline(RunConfig::from_json(small_config(tmp.file("run"))));
  try {
    pipeline.run_stage("eval");
    FAIL("expected dependency error");
  } catch (const error& e) {
    CHECK(e.kind() == errc::dependency);
  }
}

TEST_CASE("identical reruns are no-ops and force reruns work") {
  TmpDir tmp;
  Pipeline pipeline(RunConfig::from_json(small_config(tmp.file("run"))));
  CHECK(pipeline.run_stage("ingest"));
  CHECK_FALSE(pipeline.run_stage("ingest"));
  CHECK(pipeline.run_stage("ingest", /*force=*/true));
  CHECK(pipeline.run_stage("label-split"));
  CHECK_FALSE(pipeline.run_stage("label-split"));
}

TEST_CASE("tampered upstream artifacts trigger a stale-pipeline error naming the file") {
  TmpDir tmp;
  const auto out = tmp.file("run");
  Pipeline pipeline(RunConfig::from_json(small_config(out)));
  pipeline.run_stage("ingest");
  pipeline.run_stage("label-split");

  auto corpus_text = read_file(out / "corpus.jsonl");
  corpus_text += "\n";
  write_atomic(out / "corpus.jsonl", corpus_text);

  try {
    pipeline.run_stage("build-prompts");
    FAIL("expected stale-pipeline error");
  } catch (const error& e) {
    CHECK(e.kind() == errc::dependency);
    CHECK(std::string(e.what()).find("corpus.jsonl") != std::string::npos);
  }
}

TEST_CASE("upstream config changes invalidate downstream stages") {
  TmpDir tmp;
  const auto out = tmp.file("run");
  {
    Pipeline pipeline(RunConfig::from_json(small_config(out)));
    pipeline.run_stage("ingest");
  }
  json changed = small_config(out);
  changed["corpus"]["synthetic"]["n_images"] = 500;
  Pipeline pipeline(RunConfig::from_json(changed));
  try {
    pipeline.run_stage("label-split");
    FAIL("expected stale-pipeline error");
  } catch (const error& e) {
    CHECK(e.kind() == errc::dependency);
  }
  // rerunning the changed upstream stage itself is allowed and fixes things
  CHECK(pipeline.run_stage("ingest"));
  CHECK(pipeline.run_stage("label-split"));
}

TEST_CASE("full pipeline runs and leaves a consistent manifest") {
  TmpDir tmp;
  const auto out = tmp.file("run");
  Pipeline pipeline(RunConfig::from_json(small_config(out)));
  for (const auto& stage : Pipeline::stage_names()) CHECK(pipeline.run_stage(stage));

  const json manifest = parse_json_strict(read_file(out / "manifest.json"), "manifest");
  for (const auto& stage : Pipeline::stage_names()) {
    REQUIRE(manifest["stages"].contains(stage));
    for (const auto& [rel, digest] : manifest["stages"][stage]["artifacts"].items())
      CHECK(file_digest(out / rel) == digest.get<std::string>());
  }

  // pool invariants on the real artifacts
  const auto train_seen = load_prompt_pool(out / "train_seen.jsonl");
  const auto test_seen = load_prompt_pool(out / "test_seen.jsonl");
  const auto test_unseen = load_prompt_pool(out / "test_unseen.jsonl");
  std::set<std::string> train_images, test_images, train_labels, unseen_labels;
  for (const auto& s : train_seen) {
    train_images.insert(s.image_id);
    train_labels.insert(s.label);
  }
  for (const auto& s : test_seen) test_images.insert(s.image_id);
  for (const auto& s : test_unseen) {
    test_images.insert(s.image_id);
    unseen_labels.insert(s.label);
  }
  for (const auto& im : train_images) CHECK(test_images.count(im) == 0);
  for (const auto& label : unseen_labels) CHECK(train_labels.count(label) == 0);
}

TEST_CASE("two runs from one config produce byte-identical report csvs") {
  TmpDir tmp;
  auto run_once = [&](const std::string& name) {
    const auto out = tmp.file(name);
    Pipeline pipeline(RunConfig::from_json(small_config(out)));
    for (const auto& stage : Pipeline::stage_names()) pipeline.run_stage(stage);
    return out;
  };
  const auto a = run_once("run_a");
  const auto b = run_once("run_b");
  for (const auto& entry : fs::directory_iterator(a / "report")) {
    const auto rel = entry.path().filename();
    INFO("report file " << rel);
    CHECK(read_file(a / "report" / rel) == read_file(b / "report" / rel));
  }
}

TEST_CASE("ood evaluation emits an N/A seen column") {
  TmpDir tmp;
  const auto out = tmp.file("run");
  json j = small_config(out);
  j["ood_corpus"] = {{"type", "synthetic"},
                     {"synthetic",
                      {{"seed", 77},
                       {"n_clusters", 4},
                       {"labels_per_cluster", 4},
                       {"n_images", 300},
                       {"regions_per_image", 1}}}};
  Pipeline pipeline(RunConfig::from_json(j));
  for (const std::string stage : {"ingest", "label-split", "build-prompts", "train", "eval"})
    pipeline.run_stage(stage);

  const auto lines = read_lines(out / "eval_summary.csv");
  REQUIRE(lines.size() >= 3);
  const auto ood_row = csv_parse_line(lines[2]);
  CHECK(ood_row[2] == "N/A");  // seen_acc
  CHECK(ood_row[4] == "N/A");  // rel_perf
  CHECK(ood_row[3] != "N/A");  // unseen accuracy is real
  CHECK(fs::exists(out / "eval_ood.json"));
  CHECK(fs::exists(out / "mcqa_ood.jsonl"));
}

TEST_CASE("http embedding provider round-trips through a local server") {
  httplib::Server server;
  server.Post("/embed", [](const httplib::Request& req, httplib::Response& res) {
    const json body = json::parse(req.body);
    json vectors = json::array();
    for (const auto& text : body["texts"]) {
      const std::string t = text.get<std::string>();
      vectors.push_back({static_cast<double>(t.size()), 1.0, 0.0});
    }
    res.set_content(json{{"vectors", vectors}}.dump(), "application/json");
  });
  const int port = server.bind_to_any_port("127.0.0.1");
  std::thread worker([&] { server.listen_after_bind(); });
  server.wait_until_ready();

  auto provider = make_http_embedding_provider("http://127.0.0.1:" + std::to_string(port), 3);
  const auto vecs = provider->embed({"dog", "zebra"});
  CHECK(vecs[0][0] == 3.0);
  CHECK(vecs[1][0] == 5.0);

  CachingEmbeddingProvider cached(provider);
  cached.embed({"dog"});
  server.stop();
  worker.join();
  CHECK_NOTHROW(cached.embed({"dog"}));                 // cache hit, no network
  CHECK_THROWS_AS(cached.embed({"unseen text"}), error);  // cold miss fails loudly
}

TEST_CASE("cli binary honors the documented exit codes") {
  const char* bin = std::getenv("PROJLENS_BIN");
  if (bin == nullptr || std::string(bin).empty()) {
    SKIP("PROJLENS_BIN not set");
  }
  TmpDir tmp;
  const std::string quiet = " > /dev/null 2>&1";

  // 2: config error
  tmp.write("bad.json", "{\"nope\": 1}");
  int rc = std::system((std::string(bin) + " ingest --config " + tmp.file("bad.json").string() + quiet).c_str());
  CHECK(WEXITSTATUS(rc) == 2);

  // 3: dependency error (eval before anything)
  const json cfg = small_config(tmp.file("run"));
  tmp.write("ok.json", cfg.dump());
  rc = std::system((std::string(bin) + " eval --config " + tmp.file("ok.json").string() + quiet).c_str());
  CHECK(WEXITSTATUS(rc) == 3);

  // 0: success
  rc = std::system((std::string(bin) + " ingest --config " + tmp.file("ok.json").string() + quiet).c_str());
  CHECK(WEXITSTATUS(rc) == 0);

  // 3: artifact vanished -> stale pipeline
  fs::remove(tmp.file("run") / "corpus.jsonl");
  rc = std::system((std::string(bin) + " label-split --config " + tmp.file("ok.json").string() + quiet).c_str());
  CHECK(WEXITSTATUS(rc) == 3);

  // 4: runtime failure (ingest source data missing)
  json vg = small_config(tmp.file("run2"));
  vg["corpus"] = {{"type", "vg_like"},
                  {"regions", tmp.file("missing.json").string()},
                  {"image_meta", tmp.file("missing.csv").string()}};
  vg["embedding"] = {{"provider", "hash"}, {"dim", 16}};
  vg["backends"] = {{"encoder", "hash"}, {"d_v", 32}, {"num_patches", 8}};
  tmp.write("vg.json", vg.dump());
  rc = std::system((std::string(bin) + " ingest --config " + tmp.file("vg.json").string() + quiet).c_str());
  CHECK(WEXITSTATUS(rc) == 4);
}
