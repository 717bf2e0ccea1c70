#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "projlens/common.hpp"
#include "projlens/corpus.hpp"
#include "projlens/prompt.hpp"
#include "projlens/tokenizer.hpp"

namespace projlens {

using Mat = Eigen::MatrixXd;

// Patch-token features from a frozen vision encoder. The classifier/summary
// token is excluded by contract; rows are patch tokens only.
struct VisionFeatures {
  Mat patches;  // [num_patches x d_v]

  int num_patches() const { return static_cast<int>(patches.rows()); }
  int d_v() const { return static_cast<int>(patches.cols()); }
};

// The only trainable component: a linear map from encoder space into the
// LM's token-embedding space.
struct ProjectionParams {
  Mat weight;  // [d_lm x d_v]
  Vec bias;    // [d_lm]; ignored when has_bias is false
  bool has_bias = true;

  int d_v() const { return static_cast<int>(weight.cols()); }
  int d_lm() const { return static_cast<int>(weight.rows()); }

  std::string digest() const {
    Fnv1a64 h;
    h.update(weight.data(), sizeof(double) * static_cast<size_t>(weight.size()));
    if (has_bias) h.update(bias.data(), sizeof(double) * static_cast<size_t>(bias.size()));
    return h.hex();
  }
};

inline Mat project(const VisionFeatures& features, const ProjectionParams& params) {
  if (features.d_v() != params.d_v())
    throw_config("projection d_v mismatch: features " + std::to_string(features.d_v()) +
                 " vs params " + std::to_string(params.d_v()));
  Mat out = features.patches * params.weight.transpose();
  if (params.has_bias) out.rowwise() += params.bias.transpose();
  return out;
}

// --- FFN as key-value memory -----------------------------------------------

enum class FfnArch { PLAIN, GATED };

inline std::string to_string(FfnArch a) { return a == FfnArch::PLAIN ? "plain" : "gated"; }

inline FfnArch ffn_arch_from_string(const std::string& s) {
  if (s == "plain") return FfnArch::PLAIN;
  if (s == "gated") return FfnArch::GATED;
  throw_config("unknown ffn arch: " + s);
}

inline double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }
inline double gelu_grad(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
  const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
  return cdf + x * pdf;
}
inline double silu(double x) { return x / (1.0 + std::exp(-x)); }
inline double silu_grad(double x) {
  const double s = 1.0 / (1.0 + std::exp(-x));
  return s * (1.0 + x * (1.0 - s));
}

// Parameters of one FFN block, viewed as a key-value memory. PLAIN uses
// keys/values; GATED uses gate/up/down. Value columns are the columns of
// `values` (PLAIN) or `down` (GATED).
struct FfnLayerParams {
  FfnArch arch = FfnArch::PLAIN;
  Mat keys;    // PLAIN: [d_ffn x d_lm]
  Mat values;  // PLAIN: [d_lm x d_ffn]
  Mat gate;    // GATED: [d_ffn x d_lm]
  Mat up;      // GATED: [d_ffn x d_lm]
  Mat down;    // GATED: [d_lm x d_ffn]
};

// Memory coefficients: the scalar weighting each value column in the
// down-projection. PLAIN: h = f(Kx). GATED: h_i = f((Wg x)_i) * (Wu x)_i,
// which is exactly the coefficient multiplying column i of the
// down-projection, so the key-value reading matches the real computation.
inline Vec ffn_memory_coefficients(const Vec& x, const FfnLayerParams& params) {
  switch (params.arch) {
    case FfnArch::PLAIN: {
      if (params.keys.cols() != x.size()) throw_config("ffn_memory_coefficients: dim mismatch");
      Vec u = params.keys * x;
      for (int i = 0; i < u.size(); ++i) u[i] = gelu(u[i]);
      return u;
    }
    case FfnArch::GATED: {
      if (params.gate.cols() != x.size()) throw_config("ffn_memory_coefficients: dim mismatch");
      Vec g = params.gate * x;
      Vec p = params.up * x;
      Vec h(g.size());
      for (int i = 0; i < g.size(); ++i) h[i] = silu(g[i]) * p[i];
      return h;
    }
  }
  throw_config("unknown ffn arch");
}

// --- traced forward ----------------------------------------------------------

// Per-layer FFN observations at one requested position. ffn_input is the
// normalized vector actually fed to the FFN, so the coefficients can be
// recomputed from the raw layer parameters; ffn_output is the contribution
// actually added to the residual stream, which pins the key-value reading
// of the block to the real computation.
struct TracePoint {
  std::vector<Vec> memory_coefficients;  // one [d_ffn] vector per layer
  std::vector<Vec> ffn_input;            // one [d_lm] vector per layer
  std::vector<Vec> ffn_output;           // one [d_lm] vector per layer
};

struct LMForwardTrace {
  Mat logits;                     // identical to an untraced forward
  std::vector<int> positions;     // requested positions
  std::vector<TracePoint> points; // aligned with positions
};

// Behavioral contract for a frozen causal LM backend. Implementations must
// be deterministic in inference and never mutate parameters; param_digest
// pins the frozen contract.
class LMInterface {
 public:
  virtual ~LMInterface() = default;

  virtual Mat token_embed(const std::vector<int>& ids) const = 0;
  virtual Mat forward(const Mat& embeddings) const = 0;
  virtual LMForwardTrace traced_forward(const Mat& embeddings,
                                        const std::vector<int>& positions) const = 0;
  virtual Vec unembed(const Vec& hidden) const = 0;

  // Masked causal-LM loss plus its gradient with respect to the input
  // embeddings; the training loop maps that gradient onto the projection.
  virtual double masked_loss_with_input_grad(const Mat& embeddings,
                                             const std::vector<int>& targets,
                                             const std::vector<bool>& mask,
                                             Mat* grad_embeddings) const = 0;

  virtual int num_layers() const = 0;
  virtual int d_lm() const = 0;
  virtual int d_ffn() const = 0;
  virtual int vocab_size() const = 0;
  virtual FfnArch ffn_arch() const = 0;
  virtual const TokenizerView& tokenizer() const = 0;

  virtual Vec ffn_key_row(int layer, int index) const = 0;
  virtual Vec ffn_value_column(int layer, int index) const = 0;
  virtual FfnLayerParams ffn_layer_params(int layer) const = 0;

  virtual std::string param_digest() const = 0;
  virtual std::string backend_id() const = 0;

  int bos_id() const { return tokenizer().bos_id(); }
  int newline_id() const { return tokenizer().newline_id(); }
};

// Frozen vision encoder contract. Encodes the whole image; the bounding box
// reaches the model only as rendered text.
class VisionEncoderInterface {
 public:
  virtual ~VisionEncoderInterface() = default;
  virtual VisionFeatures encode(const ImageRecord& image) const = 0;
  virtual int d_v() const = 0;
  virtual int num_patches() const = 0;
  virtual std::string param_digest() const = 0;
  virtual std::string backend_id() const = 0;
};

// --- input assembly ----------------------------------------------------------

struct AssembledInput {
  Mat embeddings;            // [n x d_lm]
  std::vector<int> targets;  // length n-1; targets[i] is the token at position i+1
  std::vector<bool> mask;    // length n-1; true where the target is label or eos
};

// Layout: embed(BOS) + visual embeddings + embed(text prefix) + embed(label)
// + embed(eos). Targets are next-token ids shifted one left.
inline AssembledInput assemble_input(const Mat& visual_embeddings, const RenderedPrompt& rendered,
                                     const LMInterface& lm) {
  if (static_cast<int>(visual_embeddings.rows()) != rendered.image_slot)
    throw_runtime("assemble_input: image_slot " + std::to_string(rendered.image_slot) +
                  " != num visual embeddings " + std::to_string(visual_embeddings.rows()));
  if (visual_embeddings.cols() != lm.d_lm() && rendered.image_slot > 0)
    throw_config("assemble_input: visual embedding dim mismatch");

  std::vector<int> text_ids;
  text_ids.push_back(lm.bos_id());
  std::vector<int> tail;
  tail.insert(tail.end(), rendered.text_prefix_tokens.begin(), rendered.text_prefix_tokens.end());
  tail.insert(tail.end(), rendered.label_tokens.begin(), rendered.label_tokens.end());
  tail.push_back(rendered.eos_token);

  const int n = 1 + rendered.image_slot + static_cast<int>(tail.size());
  AssembledInput out;
  out.embeddings.resize(n, lm.d_lm());
  out.embeddings.row(0) = lm.token_embed({lm.bos_id()}).row(0);
  if (rendered.image_slot > 0)
    out.embeddings.middleRows(1, rendered.image_slot) = visual_embeddings;
  const Mat tail_emb = lm.token_embed(tail);
  out.embeddings.bottomRows(static_cast<int>(tail.size())) = tail_emb;

  // token ids by position; visual slots have no token id (never targets)
  std::vector<int> ids_by_pos(static_cast<size_t>(n), -1);
  ids_by_pos[0] = lm.bos_id();
  for (size_t i = 0; i < tail.size(); ++i)
    ids_by_pos[static_cast<size_t>(1 + rendered.image_slot) + i] = tail[i];

  out.targets.resize(static_cast<size_t>(n) - 1);
  for (int i = 0; i + 1 < n; ++i) out.targets[static_cast<size_t>(i)] = ids_by_pos[static_cast<size_t>(i) + 1];
  if (rendered.loss_mask.size() != out.targets.size())
    throw_runtime("assemble_input: rendered mask length mismatch");
  out.mask = rendered.loss_mask;
  // every masked target must be a real token
  for (size_t i = 0; i < out.mask.size(); ++i)
    if (out.mask[i] && out.targets[i] < 0) throw_runtime("assemble_input: masked visual target");
  return out;
}

// --- masked loss --------------------------------------------------------------

// Mean over masked target positions of -log p(target). Rows of `logits`
// align with input positions; row i predicts targets[i].
inline double masked_lm_loss(const Mat& logits, const std::vector<int>& targets,
                             const std::vector<bool>& mask) {
  if (static_cast<size_t>(logits.rows()) < targets.size())
    throw_runtime("masked_lm_loss: fewer logit rows than targets");
  size_t n_masked = 0;
  double total = 0.0;
  for (size_t i = 0; i < targets.size(); ++i) {
    if (!mask[i]) continue;
    ++n_masked;
    const auto row = logits.row(static_cast<int>(i));
    const double mx = row.maxCoeff();
    double lse = 0.0;
    for (int v = 0; v < logits.cols(); ++v) lse += std::exp(row[v] - mx);
    lse = mx + std::log(lse);
    total += lse - row[targets[i]];
  }
  if (n_masked == 0) throw_runtime("masked_lm_loss: mask has no true entries");
  return total / static_cast<double>(n_masked);
}

// Gradient of masked_lm_loss with respect to the logits. Rows at unmasked
// positions are exactly zero.
inline Mat masked_lm_loss_grad(const Mat& logits, const std::vector<int>& targets,
                               const std::vector<bool>& mask, double* loss_out = nullptr) {
  size_t n_masked = 0;
  for (size_t i = 0; i < targets.size(); ++i)
    if (mask[i]) ++n_masked;
  if (n_masked == 0) throw_runtime("masked_lm_loss_grad: mask has no true entries");

  Mat grad = Mat::Zero(logits.rows(), logits.cols());
  double total = 0.0;
  const double inv = 1.0 / static_cast<double>(n_masked);
  for (size_t i = 0; i < targets.size(); ++i) {
    if (!mask[i]) continue;
    const int r = static_cast<int>(i);
    const auto row = logits.row(r);
    const double mx = row.maxCoeff();
    double z = 0.0;
    for (int v = 0; v < logits.cols(); ++v) z += std::exp(row[v] - mx);
    for (int v = 0; v < logits.cols(); ++v) grad(r, v) = std::exp(row[v] - mx) / z * inv;
    grad(r, targets[i]) -= inv;
    total += mx + std::log(z) - row[targets[i]];
  }
  if (loss_out) *loss_out = total * inv;
  return grad;
}

}  // namespace projlens
