// projlens: converts detection annotations into alignment prompts with a
// disjoint seen/unseen label split, trains a linear projection between
// frozen vision and language backends, evaluates loss-ranked multiple-choice
// QA, and probes the frozen LM's FFN key-value memories.

#include <cstdio>
#include <string>

#include <CLI11.hpp>

#include "projlens/pipeline.hpp"

namespace {

int exit_code_for(projlens::errc kind) {
  switch (kind) {
    case projlens::errc::config: return 2;
    case projlens::errc::dependency: return 3;
    default: return 4;
  }
}

int run_stages(const std::string& config_path, const std::vector<std::string>& stages, bool force) {
  try {
    projlens::RunConfig config = projlens::RunConfig::load(config_path);
    projlens::Pipeline pipeline(std::move(config));
    for (const auto& stage : stages) {
      const bool ran = pipeline.run_stage(stage, force);
      std::printf("%s: %s\n", stage.c_str(), ran ? "done" : "up-to-date");
    }
    return 0;
  } catch (const projlens::error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return exit_code_for(e.kind());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 4;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"projection-layer generalization pipeline"};
  app.require_subcommand(1);

  std::string config_path;
  bool force = false;

  std::vector<std::string> requested;
  for (const auto& stage : projlens::Pipeline::stage_names()) {
    auto* sub = app.add_subcommand(stage, "run the " + stage + " stage");
    sub->add_option("--config", config_path, "run configuration file")->required();
    sub->add_flag("--force", force, "rerun even when up to date");
    sub->callback([&requested, stage] { requested.push_back(stage); });
  }
  auto* run_all = app.add_subcommand("run", "run every stage in order");
  run_all->add_option("--config", config_path, "run configuration file")->required();
  run_all->add_flag("--force", force, "rerun even when up to date");
  run_all->callback([&requested] {
    for (const auto& stage : projlens::Pipeline::stage_names()) requested.push_back(stage);
  });

  CLI11_PARSE(app, argc, argv);
  return run_stages(config_path, requested, force);
}
