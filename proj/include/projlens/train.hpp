#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <vector>

#include "projlens/model.hpp"
#include "projlens/prompt.hpp"
#include "projlens/rng.hpp"
#include "projlens/tiny_backends.hpp"

namespace projlens {

struct TrainConfig {
  double lr_peak = 1e-3;
  double weight_decay = 0.0;
  double warmup_frac = 0.03;
  int batch_size = 16;
  int epochs = 1;
  uint64_t seed = 0;
  std::optional<double> grad_clip;  // global L2 norm
  double cosine_floor = 0.0;
  // AdamW moments; conventional defaults, recorded in the run manifest.
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;

  void validate() const {
    if (!(warmup_frac > 0.0 && warmup_frac < 1.0)) throw_config("warmup_frac must be in (0, 1)");
    if (batch_size < 1) throw_config("batch_size must be >= 1");
    if (epochs < 1) throw_config("epochs must be >= 1");
  }
};

// Linear warmup over ceil(warmup_frac * total) steps to lr_peak, then cosine
// decay to the floor, reaching it exactly at step == total_steps.
inline double lr_at_step(long step, long total_steps, const TrainConfig& config) {
  if (total_steps <= 0) throw_config("lr_at_step: total_steps must be positive");
  if (step < 0 || step > total_steps) throw_config("lr_at_step: step out of range");
  const long warmup = static_cast<long>(
      std::ceil(config.warmup_frac * static_cast<double>(total_steps)));
  if (step < warmup)
    return config.lr_peak * static_cast<double>(step + 1) / static_cast<double>(warmup);
  if (total_steps == warmup) return config.lr_peak;
  const double t = static_cast<double>(step - warmup) / static_cast<double>(total_steps - warmup);
  const double cosine = 0.5 * (1.0 + std::cos(std::numbers::pi * t));
  return config.cosine_floor + (config.lr_peak - config.cosine_floor) * cosine;
}

inline ProjectionParams init_projection(int d_v, int d_lm, uint64_t seed, bool with_bias = true) {
  Rng rng = derive_rng(seed, "projection_init");
  ProjectionParams p;
  p.weight = detail::random_matrix(rng, d_lm, d_v, 1.0 / std::sqrt(static_cast<double>(d_v)));
  p.bias = Vec::Zero(d_lm);
  p.has_bias = with_bias;
  return p;
}

struct TrainLogRow {
  long step = 0;
  double lr = 0.0;
  double loss = 0.0;
  long wall_ms = 0;
};

struct TrainState {
  ProjectionParams projection;
  Mat m_w, v_w;  // AdamW moments for the weight
  Vec m_b, v_b;  // and the bias
  long step = 0;
  std::vector<TrainLogRow> log;
};

namespace detail {

template <typename M>
void adamw_update(M& param, M& m, M& v, const M& grad, double lr, const TrainConfig& cfg, long t) {
  m = cfg.beta1 * m + (1.0 - cfg.beta1) * grad;
  v = cfg.beta2 * v + (1.0 - cfg.beta2) * grad.cwiseProduct(grad);
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  // decoupled weight decay (zero by default)
  if (cfg.weight_decay != 0.0) param -= lr * cfg.weight_decay * param;
  param.array() -= (lr / bc1) * m.array() / ((v.array() / bc2).sqrt() + cfg.adam_eps);
}

}  // namespace detail

struct TrainResult {
  ProjectionParams projection;
  std::vector<TrainLogRow> log;
  double first_window_mean = 0.0;  // mean loss over the first up-to-100 steps
  double last_window_mean = 0.0;   // and the last up-to-100 steps
};

// One pass (or several, per config) of masked causal-LM training over the
// train-seen pool. Backends are frozen; only the projection updates.
inline TrainResult train_projection(const std::vector<PromptSample>& train_pool,
                                    FeatureCache& features, const Corpus& corpus,
                                    const LMInterface& lm, ProjectionParams initial,
                                    const TrainConfig& config,
                                    const std::string& prompt_template = default_prompt_template()) {
  config.validate();
  if (train_pool.empty()) throw_config("train_projection: empty training pool");

  std::map<std::string, const ImageRecord*> images;
  for (const auto& im : corpus.images) images[im.image_id] = &im;

  TrainState state;
  state.projection = std::move(initial);
  state.m_w = Mat::Zero(state.projection.weight.rows(), state.projection.weight.cols());
  state.v_w = Mat::Zero(state.projection.weight.rows(), state.projection.weight.cols());
  state.m_b = Vec::Zero(state.projection.bias.size());
  state.v_b = Vec::Zero(state.projection.bias.size());

  std::vector<size_t> order(train_pool.size());
  const long steps_per_epoch =
      static_cast<long>((train_pool.size() + static_cast<size_t>(config.batch_size) - 1) /
                        static_cast<size_t>(config.batch_size));
  const long total_steps = steps_per_epoch * config.epochs;

  const auto t0 = std::chrono::steady_clock::now();
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng shuffle_rng = derive_rng(config.seed, "train_shuffle:" + std::to_string(epoch));
    shuffle_rng.shuffle(order);

    for (size_t start = 0; start < order.size(); start += static_cast<size_t>(config.batch_size)) {
      const size_t end = std::min(order.size(), start + static_cast<size_t>(config.batch_size));
      const double lr = lr_at_step(state.step, total_steps, config);

      Mat grad_w = Mat::Zero(state.projection.weight.rows(), state.projection.weight.cols());
      Vec grad_b = Vec::Zero(state.projection.bias.size());
      double batch_loss = 0.0;

      for (size_t bi = start; bi < end; ++bi) {
        const PromptSample& sample = train_pool[order[bi]];
        const ImageRecord& image = *images.at(sample.image_id);
        const VisionFeatures& feats = features.get(image);
        const Mat visual = project(feats, state.projection);
        const RenderedPrompt rendered =
            render_prompt(sample, lm.tokenizer(), feats.num_patches(), prompt_template);
        const AssembledInput input = assemble_input(visual, rendered, lm);

        Mat grad_emb;
        const double loss =
            lm.masked_loss_with_input_grad(input.embeddings, input.targets, input.mask, &grad_emb);
        if (!std::isfinite(loss))
          throw_runtime("non-finite loss at step " + std::to_string(state.step) + " on sample " +
                        sample.sample_id);
        batch_loss += loss;

        // visual rows are rows 1..P of the sequence; chain through the projection
        const Mat grad_visual = grad_emb.middleRows(1, feats.num_patches());
        grad_w += grad_visual.transpose() * feats.patches;
        if (state.projection.has_bias) grad_b += grad_visual.colwise().sum().transpose();
      }

      const double inv_batch = 1.0 / static_cast<double>(end - start);
      grad_w *= inv_batch;
      grad_b *= inv_batch;
      batch_loss *= inv_batch;

      if (config.grad_clip) {
        double norm_sq = grad_w.squaredNorm();
        if (state.projection.has_bias) norm_sq += grad_b.squaredNorm();
        const double norm = std::sqrt(norm_sq);
        if (norm > *config.grad_clip) {
          const double scale = *config.grad_clip / norm;
          grad_w *= scale;
          grad_b *= scale;
        }
      }

      const long t = state.step + 1;
      detail::adamw_update(state.projection.weight, state.m_w, state.v_w, grad_w, lr, config, t);
      if (state.projection.has_bias)
        detail::adamw_update(state.projection.bias, state.m_b, state.v_b, grad_b, lr, config, t);

      const auto now = std::chrono::steady_clock::now();
      state.log.push_back({state.step, lr, batch_loss,
                           std::chrono::duration_cast<std::chrono::milliseconds>(now - t0).count()});
      state.step++;
    }
  }

  TrainResult result;
  result.projection = std::move(state.projection);
  result.log = std::move(state.log);
  const size_t window = std::min<size_t>(100, result.log.size());
  for (size_t i = 0; i < window; ++i) {
    result.first_window_mean += result.log[i].loss / static_cast<double>(window);
    result.last_window_mean += result.log[result.log.size() - 1 - i].loss / static_cast<double>(window);
  }
  return result;
}

inline std::string train_log_csv(const std::vector<TrainLogRow>& log) {
  CsvWriter csv({"step", "lr", "loss", "wall_ms"});
  for (const auto& row : log)
    csv.append_row({std::to_string(row.step), format_fixed(row.lr, 9), format_fixed(row.loss, 6),
                    std::to_string(row.wall_ms)});
  return csv.str();
}

// --- checkpoints --------------------------------------------------------------

// <prefix>.bin holds little-endian doubles (weight row-major, then bias);
// <prefix>.json carries dims, seed, step, and the payload digest.
inline void save_checkpoint(const ProjectionParams& params, uint64_t seed, long step,
                            const fs::path& prefix) {
  std::string payload;
  payload.reserve(sizeof(double) * (static_cast<size_t>(params.weight.size()) +
                                    static_cast<size_t>(params.bias.size())));
  auto append = [&](const double* data, size_t n) {
    payload.append(reinterpret_cast<const char*>(data), sizeof(double) * n);
  };
  // Eigen is column-major by default; serialize row-major for portability
  for (int r = 0; r < params.weight.rows(); ++r)
    for (int c = 0; c < params.weight.cols(); ++c) {
      const double v = params.weight(r, c);
      append(&v, 1);
    }
  if (params.has_bias) append(params.bias.data(), static_cast<size_t>(params.bias.size()));

  json manifest;
  manifest["format"] = "projlens-projection";
  manifest["d_v"] = params.d_v();
  manifest["d_lm"] = params.d_lm();
  manifest["has_bias"] = params.has_bias;
  manifest["seed"] = seed;
  manifest["step"] = step;
  manifest["init"] = "gaussian(std=1/sqrt(d_v)), bias 0";
  manifest["digest"] = digest_hex(payload);

  fs::path bin = prefix;
  bin += ".bin";
  fs::path man = prefix;
  man += ".json";
  write_atomic(bin, payload);
  write_atomic(man, manifest.dump(2) + "\n");
}

inline ProjectionParams load_checkpoint(const fs::path& prefix, uint64_t* seed_out = nullptr,
                                        long* step_out = nullptr) {
  fs::path bin = prefix;
  bin += ".bin";
  fs::path man = prefix;
  man += ".json";
  json manifest = parse_json_strict(read_file(man), man.string());
  if (manifest.value("format", "") != "projlens-projection")
    throw_parse(man.string() + ": not a projection checkpoint");
  const std::string payload = read_file(bin);
  if (digest_hex(payload) != manifest.value("digest", ""))
    throw error(errc::dependency, bin.string() + ": checkpoint digest mismatch");

  const int d_v = manifest["d_v"].get<int>();
  const int d_lm = manifest["d_lm"].get<int>();
  ProjectionParams p;
  p.has_bias = manifest["has_bias"].get<bool>();
  p.weight.resize(d_lm, d_v);
  p.bias = Vec::Zero(d_lm);
  const size_t expected =
      sizeof(double) * (static_cast<size_t>(d_lm) * d_v + (p.has_bias ? static_cast<size_t>(d_lm) : 0));
  if (payload.size() != expected) throw_parse(bin.string() + ": unexpected checkpoint size");
  const double* data = reinterpret_cast<const double*>(payload.data());
  size_t idx = 0;
  for (int r = 0; r < d_lm; ++r)
    for (int c = 0; c < d_v; ++c) p.weight(r, c) = data[idx++];
  if (p.has_bias)
    for (int r = 0; r < d_lm; ++r) p.bias[r] = data[idx++];
  if (seed_out) *seed_out = manifest["seed"].get<uint64_t>();
  if (step_out) *step_out = manifest["step"].get<long>();
  return p;
}

}  // namespace projlens
