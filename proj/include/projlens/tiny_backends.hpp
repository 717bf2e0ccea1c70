#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include <Eigen/QR>

#include "projlens/embedding.hpp"
#include "projlens/model.hpp"
#include "projlens/rng.hpp"

namespace projlens {

namespace detail {

inline Mat random_matrix(Rng& rng, int rows, int cols, double std) {
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = rng.normal() * std;
  return m;
}

// Column-orthonormal map (rows >= cols) via QR of a Gaussian draw. Isometric,
// so it never amplifies noise the way an ill-conditioned square draw can.
inline Mat random_orthonormal(Rng& rng, int rows, int cols) {
  if (rows < cols) throw_config("random_orthonormal: rows must be >= cols");
  const Mat g = random_matrix(rng, rows, cols, 1.0);
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ() * Mat::Identity(rows, cols);
  // fix signs for determinism across decompositions
  const Mat r = qr.matrixQR().topRows(cols).triangularView<Eigen::Upper>();
  for (int c = 0; c < cols; ++c)
    if (r(c, c) < 0) q.col(c) = -q.col(c);
  return q;
}

inline void rmsnorm_rows(const Mat& x, Mat& y) {
  constexpr double eps = 1e-6;
  y.resize(x.rows(), x.cols());
  const double d = static_cast<double>(x.cols());
  for (int r = 0; r < x.rows(); ++r) {
    const double rms = std::sqrt(x.row(r).squaredNorm() / d + eps);
    y.row(r) = x.row(r) / rms;
  }
}

// dx = (dy - y * (dy . y) / d) / rms, rowwise
inline Mat rmsnorm_backward_rows(const Mat& x, const Mat& y, const Mat& dy) {
  constexpr double eps = 1e-6;
  const double d = static_cast<double>(x.cols());
  Mat dx(x.rows(), x.cols());
  for (int r = 0; r < x.rows(); ++r) {
    const double rms = std::sqrt(x.row(r).squaredNorm() / d + eps);
    const double dot = dy.row(r).dot(y.row(r));
    dx.row(r) = (dy.row(r) - y.row(r) * (dot / d)) / rms;
  }
  return dx;
}

}  // namespace detail

// The scale conventions below emulate a trained LM rather than a raw random
// draw: embedding rows sit at the RMS working scale (norm sqrt(d)), each
// block adds a fraction of the residual norm instead of overwriting it, and
// the value/output circuit keeps an identity component (in trained models
// that component is what makes copying work). Without these properties no
// linear projection can read through the stack, and the whole point of the
// reference backend is to be readable the way a pretrained LM is.
struct TinyLMConfig {
  uint64_t seed = 7;
  int d_lm = 32;
  int d_ffn = 64;
  int n_layers = 2;
  FfnArch arch = FfnArch::GATED;
  int max_seq = 256;
  double pos_frac = 0.2;        // positional row norm as a fraction of sqrt(d)
  double attn_identity = 0.8;   // identity share of Wv and Wo; 0 = fully random
  double attn_out_scale = 0.8;  // residual fraction contributed by attention
  double ffn_out_scale = 0.15;  // and by the FFN
  double qk_scale = 0.3;        // tempers random attention toward uniform
  double logit_temp = 0.0;      // readout divisor; 0 means sqrt(d_lm)

  // Optional semantic plant: the embedding rows of these tokens are a fixed
  // random linear image of the supplied vectors instead of pure noise. This
  // is what makes the synthetic world linearly decodable end to end.
  std::map<std::string, Vec> semantic_tokens;
  double semantic_noise = 0.05;
  // Share of the newline direction mixed into every planted row. Corpus
  // labels are sentence-final, and trained embeddings encode that kind of
  // positional affinity; it is what lets the masked EOS target train.
  double semantic_eos_affinity = 0.0;
};

// A small frozen causal transformer: single-head attention, pre-RMSNorm,
// plain or gated FFN, tied unembedding, sinusoidal positions. Weights come
// from the seed and never change; the only gradient it produces is with
// respect to its input embeddings.
class TinyLM : public LMInterface {
 public:
  TinyLM(TinyLMConfig config, std::shared_ptr<const TokenizerView> tokenizer)
      : cfg_(std::move(config)), tokenizer_(std::move(tokenizer)) {
    const int d = cfg_.d_lm;
    const int dffn = cfg_.d_ffn;
    const int vocab = tokenizer_->vocab_size();
    const double sqrt_d = std::sqrt(static_cast<double>(d));
    Rng rng = derive_rng(cfg_.seed, "tiny_lm_weights");
    const double s_d = 1.0 / sqrt_d;
    const double s_f = 1.0 / std::sqrt(static_cast<double>(dffn));

    // token rows live at the RMS working scale: norm ~ sqrt(d)
    embed_ = detail::random_matrix(rng, vocab, d, 1.0);
    layers_.resize(static_cast<size_t>(cfg_.n_layers));
    const double id = cfg_.attn_identity;
    for (auto& L : layers_) {
      // scales are folded into the frozen weights; the forward pass applies
      // no extra factors
      L.wq = cfg_.qk_scale * detail::random_matrix(rng, d, d, s_d);
      L.wk = detail::random_matrix(rng, d, d, s_d);
      L.wv = id * Mat::Identity(d, d) + (1.0 - id) * detail::random_matrix(rng, d, d, s_d);
      L.wo = cfg_.attn_out_scale *
             (id * Mat::Identity(d, d) + (1.0 - id) * detail::random_matrix(rng, d, d, s_d));
      if (cfg_.arch == FfnArch::PLAIN) {
        L.k = detail::random_matrix(rng, dffn, d, s_d);
        L.v = cfg_.ffn_out_scale * detail::random_matrix(rng, d, dffn, s_f);
      } else {
        L.gate = detail::random_matrix(rng, dffn, d, s_d);
        L.up = detail::random_matrix(rng, dffn, d, s_d);
        L.down = cfg_.ffn_out_scale * detail::random_matrix(rng, d, dffn, s_f);
      }
    }

    if (!cfg_.semantic_tokens.empty()) {
      const int d_sem = static_cast<int>(cfg_.semantic_tokens.begin()->second.size());
      Rng sem_rng = derive_rng(cfg_.seed, "tiny_lm_semantic");
      const Mat T = detail::random_matrix(sem_rng, d, d_sem, 1.0 / std::sqrt(static_cast<double>(d_sem)));
      const Vec eos_dir = l2_normalize(embed_.row(tokenizer_->newline_id()).transpose());
      const double kappa = cfg_.semantic_eos_affinity;
      for (int tok = 0; tok < vocab; ++tok) {
        const auto it = cfg_.semantic_tokens.find(tokenizer_->decode(tok));
        if (it == cfg_.semantic_tokens.end()) continue;
        Vec row = T * it->second;
        for (int i = 0; i < d; ++i) row[i] += sem_rng.normal() * cfg_.semantic_noise;
        row = (1.0 - kappa) * l2_normalize(row) + kappa * eos_dir;
        embed_.row(tok) = l2_normalize(row).transpose() * sqrt_d;
      }
    }

    pos_ = Mat(cfg_.max_seq, d);
    for (int p = 0; p < cfg_.max_seq; ++p) {
      for (int i = 0; i < d; ++i) {
        const double angle = p / std::pow(10000.0, 2.0 * (i / 2) / static_cast<double>(d));
        pos_(p, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
      }
      const double n = pos_.row(p).norm();
      if (n > 0) pos_.row(p) *= cfg_.pos_frac * sqrt_d / n;
    }
  }

  Mat token_embed(const std::vector<int>& ids) const override {
    Mat out(static_cast<int>(ids.size()), cfg_.d_lm);
    for (size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= vocab_size())
        throw_runtime("token id out of range: " + std::to_string(ids[i]));
      out.row(static_cast<int>(i)) = embed_.row(ids[i]);
    }
    return out;
  }

  Mat forward(const Mat& embeddings) const override {
    return run(embeddings, nullptr, nullptr, nullptr);
  }

  LMForwardTrace traced_forward(const Mat& embeddings,
                                const std::vector<int>& positions) const override {
    LMForwardTrace trace;
    trace.positions = positions;
    trace.points.resize(positions.size());
    for (auto& pt : trace.points) {
      pt.memory_coefficients.resize(static_cast<size_t>(cfg_.n_layers));
      pt.ffn_input.resize(static_cast<size_t>(cfg_.n_layers));
      pt.ffn_output.resize(static_cast<size_t>(cfg_.n_layers));
    }
    trace.logits = run(embeddings, &trace, nullptr, nullptr);
    return trace;
  }

  Vec unembed(const Vec& hidden) const override {
    if (hidden.size() != cfg_.d_lm) throw_config("unembed: dim mismatch");
    return embed_ * hidden / logit_temp_();
  }

  double masked_loss_with_input_grad(const Mat& embeddings, const std::vector<int>& targets,
                                     const std::vector<bool>& mask,
                                     Mat* grad_embeddings) const override {
    Caches caches;
    const Mat logits = run(embeddings, nullptr, &caches, nullptr);
    double loss = 0.0;
    if (!grad_embeddings) {
      return masked_lm_loss(logits, targets, mask);
    }
    const Mat dlogits = masked_lm_loss_grad(logits, targets, mask, &loss);
    *grad_embeddings = backward(dlogits, caches);
    return loss;
  }

  int num_layers() const override { return cfg_.n_layers; }
  int d_lm() const override { return cfg_.d_lm; }
  int d_ffn() const override { return cfg_.d_ffn; }
  int vocab_size() const override { return static_cast<int>(embed_.rows()); }
  FfnArch ffn_arch() const override { return cfg_.arch; }
  const TokenizerView& tokenizer() const override { return *tokenizer_; }

  Vec ffn_key_row(int layer, int index) const override {
    const auto& L = layers_.at(static_cast<size_t>(layer));
    return cfg_.arch == FfnArch::PLAIN ? Vec(L.k.row(index)) : Vec(L.gate.row(index));
  }

  Vec ffn_value_column(int layer, int index) const override {
    const auto& L = layers_.at(static_cast<size_t>(layer));
    return cfg_.arch == FfnArch::PLAIN ? Vec(L.v.col(index)) : Vec(L.down.col(index));
  }

  FfnLayerParams ffn_layer_params(int layer) const override {
    const auto& L = layers_.at(static_cast<size_t>(layer));
    FfnLayerParams p;
    p.arch = cfg_.arch;
    if (cfg_.arch == FfnArch::PLAIN) {
      p.keys = L.k;
      p.values = L.v;
    } else {
      p.gate = L.gate;
      p.up = L.up;
      p.down = L.down;
    }
    return p;
  }

  std::string param_digest() const override {
    Fnv1a64 h;
    auto add = [&](const Mat& m) {
      h.update(m.data(), sizeof(double) * static_cast<size_t>(m.size()));
    };
    add(embed_);
    add(pos_);
    for (const auto& L : layers_) {
      add(L.wq);
      add(L.wk);
      add(L.wv);
      add(L.wo);
      if (cfg_.arch == FfnArch::PLAIN) {
        add(L.k);
        add(L.v);
      } else {
        add(L.gate);
        add(L.up);
        add(L.down);
      }
    }
    return h.hex();
  }

  std::string backend_id() const override {
    return "tiny-lm:s" + std::to_string(cfg_.seed) + ":d" + std::to_string(cfg_.d_lm) + ":f" +
           std::to_string(cfg_.d_ffn) + ":l" + std::to_string(cfg_.n_layers) + ":" +
           to_string(cfg_.arch);
  }

  const TinyLMConfig& config() const { return cfg_; }
  const Mat& embedding_matrix() const { return embed_; }

 private:
  struct Layer {
    Mat wq, wk, wv, wo;
    Mat k, v;            // PLAIN
    Mat gate, up, down;  // GATED
  };

  struct LayerCache {
    Mat x_attn_in;  // block input
    Mat a_norm;     // rmsnorm(x_attn_in)
    Mat q, k, v;    // projections
    Mat attn;       // softmax weights [n x n]
    Mat x_ffn_in;   // after attention residual
    Mat f_norm;     // rmsnorm(x_ffn_in)
    Mat pre1;       // PLAIN: K x; GATED: gate pre-activation
    Mat pre2;       // GATED: up pre-activation
    Mat h;          // memory coefficients
  };

  struct Caches {
    std::vector<LayerCache> layers;
    Mat x_final;  // pre final norm
    Mat y_final;  // post final norm
  };

  // One code path for plain, traced, and cached forwards so the traced
  // logits are bitwise identical to the plain ones.
  Mat run(const Mat& embeddings, LMForwardTrace* trace, Caches* caches, void*) const {
    const int n = static_cast<int>(embeddings.rows());
    if (embeddings.cols() != cfg_.d_lm) throw_config("forward: embedding dim mismatch");
    if (n > cfg_.max_seq) throw_config("forward: sequence longer than max_seq");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.d_lm));

    Mat x = embeddings + pos_.topRows(n);
    if (caches) caches->layers.resize(layers_.size());

    for (size_t li = 0; li < layers_.size(); ++li) {
      const Layer& L = layers_[li];
      LayerCache* lc = caches ? &caches->layers[li] : nullptr;
      if (lc) lc->x_attn_in = x;

      Mat a_norm;
      detail::rmsnorm_rows(x, a_norm);
      Mat q = a_norm * L.wq.transpose();
      Mat k = a_norm * L.wk.transpose();
      Mat v = a_norm * L.wv.transpose();
      Mat scores = q * k.transpose() * inv_sqrt_d;
      Mat attn = Mat::Zero(n, n);
      for (int i = 0; i < n; ++i) {
        double mx = -1e300;
        for (int j = 0; j <= i; ++j) mx = std::max(mx, scores(i, j));
        double z = 0.0;
        for (int j = 0; j <= i; ++j) z += std::exp(scores(i, j) - mx);
        for (int j = 0; j <= i; ++j) attn(i, j) = std::exp(scores(i, j) - mx) / z;
      }
      x += (attn * v) * layers_[li].wo.transpose();
      if (lc) {
        lc->a_norm = a_norm;
        lc->q = q;
        lc->k = k;
        lc->v = v;
        lc->attn = attn;
        lc->x_ffn_in = x;
      }

      Mat f_norm;
      detail::rmsnorm_rows(x, f_norm);
      Mat h;
      Mat pre1, pre2;
      Mat ffn_out;
      if (cfg_.arch == FfnArch::PLAIN) {
        pre1 = f_norm * L.k.transpose();
        h = pre1.unaryExpr([](double u) { return gelu(u); });
        ffn_out = h * L.v.transpose();
      } else {
        pre1 = f_norm * L.gate.transpose();
        pre2 = f_norm * L.up.transpose();
        h = pre1.unaryExpr([](double g) { return silu(g); }).cwiseProduct(pre2);
        ffn_out = h * L.down.transpose();
      }
      x += ffn_out;
      if (lc) {
        lc->f_norm = f_norm;
        lc->pre1 = pre1;
        lc->pre2 = pre2;
        lc->h = h;
      }
      if (trace) {
        for (size_t pi = 0; pi < trace->positions.size(); ++pi) {
          const int pos = trace->positions[pi];
          if (pos < 0 || pos >= n) throw_config("traced_forward: position out of range");
          trace->points[pi].memory_coefficients[li] = h.row(pos);
          trace->points[pi].ffn_input[li] = f_norm.row(pos);
          trace->points[pi].ffn_output[li] = ffn_out.row(pos);
        }
      }
    }

    Mat y;
    detail::rmsnorm_rows(x, y);
    if (caches) {
      caches->x_final = x;
      caches->y_final = y;
    }
    return y * embed_.transpose() / logit_temp_();
  }

  Mat backward(const Mat& dlogits, const Caches& caches) const {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.d_lm));
    Mat dx = detail::rmsnorm_backward_rows(caches.x_final, caches.y_final,
                                           (dlogits * embed_) / logit_temp_());

    for (size_t li = layers_.size(); li-- > 0;) {
      const Layer& L = layers_[li];
      const LayerCache& lc = caches.layers[li];

      // FFN block
      Mat df_norm;
      if (cfg_.arch == FfnArch::PLAIN) {
        Mat dh = dx * L.v;
        Mat du = dh.cwiseProduct(lc.pre1.unaryExpr([](double u) { return gelu_grad(u); }));
        df_norm = du * L.k;
      } else {
        Mat dh = dx * L.down;
        Mat silu_g = lc.pre1.unaryExpr([](double g) { return silu(g); });
        Mat dsilu = lc.pre1.unaryExpr([](double g) { return silu_grad(g); });
        Mat dp = dh.cwiseProduct(silu_g);
        Mat dg = dh.cwiseProduct(lc.pre2).cwiseProduct(dsilu);
        df_norm = dg * L.gate + dp * L.up;
      }
      dx += detail::rmsnorm_backward_rows(lc.x_ffn_in, lc.f_norm, df_norm);

      // attention block
      Mat dctx = dx * L.wo;
      Mat dattn = dctx * lc.v.transpose();
      Mat dv = lc.attn.transpose() * dctx;
      const int n = static_cast<int>(dx.rows());
      Mat dscores = Mat::Zero(n, n);
      for (int i = 0; i < n; ++i) {
        double dot = 0.0;
        for (int j = 0; j <= i; ++j) dot += dattn(i, j) * lc.attn(i, j);
        for (int j = 0; j <= i; ++j) dscores(i, j) = lc.attn(i, j) * (dattn(i, j) - dot);
      }
      Mat dq = dscores * lc.k * inv_sqrt_d;
      Mat dk = dscores.transpose() * lc.q * inv_sqrt_d;
      Mat da_norm = dq * L.wq + dk * L.wk + dv * L.wv;
      dx += detail::rmsnorm_backward_rows(lc.x_attn_in, lc.a_norm, da_norm);
    }
    return dx;  // positions are additive constants
  }

  double logit_temp_() const {
    return cfg_.logit_temp > 0.0 ? cfg_.logit_temp : std::sqrt(static_cast<double>(cfg_.d_lm));
  }

  TinyLMConfig cfg_;
  std::shared_ptr<const TokenizerView> tokenizer_;
  Mat embed_;  // [vocab x d_lm], tied unembedding
  Mat pos_;
  std::vector<Layer> layers_;
};

// --- vision encoders ---------------------------------------------------------

// Deterministic featureless encoder: patches are pure functions of the
// image id. No label signal; used for plumbing tests.
class HashPatchEncoder : public VisionEncoderInterface {
 public:
  HashPatchEncoder(uint64_t seed, int d_v, int num_patches)
      : seed_(seed), d_v_(d_v), num_patches_(num_patches) {}

  VisionFeatures encode(const ImageRecord& image) const override {
    VisionFeatures f;
    f.patches.resize(num_patches_, d_v_);
    for (int p = 0; p < num_patches_; ++p) {
      Rng rng = derive_rng(seed_, "hash_patch:" + image.image_id + ":" + std::to_string(p));
      for (int c = 0; c < d_v_; ++c) f.patches(p, c) = rng.normal();
    }
    return f;
  }

  int d_v() const override { return d_v_; }
  int num_patches() const override { return num_patches_; }
  std::string param_digest() const override {
    return digest_hex("hash-enc:" + std::to_string(seed_) + ":" + std::to_string(d_v_) + ":" +
                      std::to_string(num_patches_));
  }
  std::string backend_id() const override {
    return "hash-enc:s" + std::to_string(seed_) + ":d" + std::to_string(d_v_) + ":p" +
           std::to_string(num_patches_);
  }

 private:
  uint64_t seed_;
  int d_v_;
  int num_patches_;
};

// Reads region latent files written by the synthetic generator: the image's
// uri points at JSON {"regions": [{"box": [...], "latent": [...]}]}. Patch
// slot j is driven by region (j mod R) through one shared orthonormal map,
// so whole-image features mix every region's content. The map is shared
// across slots on purpose: the projection applies a single matrix to every
// patch, so per-slot bases would make the planted signal linearly
// unrecoverable by construction.
class PlantedRegionEncoder : public VisionEncoderInterface {
 public:
  PlantedRegionEncoder(uint64_t seed, int d_v, int num_patches, int latent_dim)
      : seed_(seed), d_v_(d_v), num_patches_(num_patches), latent_dim_(latent_dim) {
    if (d_v < latent_dim) throw_config("planted encoder: d_v must be >= latent_dim");
    Rng rng = derive_rng(seed_, "planted_encoder_map");
    feature_map_ = detail::random_orthonormal(rng, d_v_, latent_dim_);
  }

  VisionFeatures encode(const ImageRecord& image) const override {
    std::string path = image.uri;
    if (starts_with(path, "file:")) path = path.substr(5);
    json j = parse_json_strict(read_file(path), path);
    const auto& regions = j["regions"];
    if (regions.empty()) throw_runtime("image file has no regions: " + path);
    std::vector<Vec> latents;
    for (const auto& r : regions) {
      Vec v(r["latent"].size());
      for (size_t i = 0; i < r["latent"].size(); ++i) v[static_cast<int>(i)] = r["latent"][i].get<double>();
      if (v.size() != latent_dim_) throw_runtime("latent dim mismatch in " + path);
      latents.push_back(std::move(v));
    }
    VisionFeatures f;
    f.patches.resize(num_patches_, d_v_);
    for (int p = 0; p < num_patches_; ++p)
      f.patches.row(p) = (feature_map_ * latents[static_cast<size_t>(p) % latents.size()]).transpose();
    return f;
  }

  int d_v() const override { return d_v_; }
  int num_patches() const override { return num_patches_; }
  std::string param_digest() const override {
    Fnv1a64 h;
    h.update(feature_map_.data(), sizeof(double) * static_cast<size_t>(feature_map_.size()));
    return h.hex();
  }
  std::string backend_id() const override {
    return "planted-enc:s" + std::to_string(seed_) + ":d" + std::to_string(d_v_) + ":p" +
           std::to_string(num_patches_);
  }

 private:
  uint64_t seed_;
  int d_v_;
  int num_patches_;
  int latent_dim_;
  Mat feature_map_;
};

// --- reference backend bundle --------------------------------------------------

struct ReferenceDims {
  int d_v = 16;
  int d_lm = 32;
  int d_ffn = 64;
  int n_layers = 2;
  int num_patches = 4;
  FfnArch arch = FfnArch::GATED;
};

struct ReferenceBackends {
  std::shared_ptr<TinyTokenizer> tokenizer;
  std::shared_ptr<LMInterface> lm;
  std::shared_ptr<VisionEncoderInterface> encoder;
};

// Tiny deterministic encoder + LM pair for desk-scale tests. `words` seeds
// the tokenizer's word list (typically the label vocabulary).
inline ReferenceBackends make_reference_backends(uint64_t seed, const ReferenceDims& dims,
                                                 const std::vector<std::string>& words = {},
                                                 std::map<std::string, Vec> semantic_tokens = {}) {
  ReferenceBackends b;
  b.tokenizer = std::make_shared<TinyTokenizer>(words);
  TinyLMConfig cfg;
  cfg.seed = seed;
  cfg.d_lm = dims.d_lm;
  cfg.d_ffn = dims.d_ffn;
  cfg.n_layers = dims.n_layers;
  cfg.arch = dims.arch;
  cfg.semantic_tokens = std::move(semantic_tokens);
  b.lm = std::make_shared<TinyLM>(cfg, b.tokenizer);
  b.encoder = std::make_shared<HashPatchEncoder>(derive_seed(seed, "encoder"), dims.d_v, dims.num_patches);
  return b;
}

// Per-image feature memoization; encoders are deterministic so this is
// purely an evaluation-speed concern.
class FeatureCache {
 public:
  explicit FeatureCache(std::shared_ptr<VisionEncoderInterface> encoder)
      : encoder_(std::move(encoder)) {}

  const VisionFeatures& get(const ImageRecord& image) {
    auto it = cache_.find(image.image_id);
    if (it == cache_.end()) it = cache_.emplace(image.image_id, encoder_->encode(image)).first;
    return it->second;
  }

  const VisionEncoderInterface& encoder() const { return *encoder_; }

 private:
  std::shared_ptr<VisionEncoderInterface> encoder_;
  std::map<std::string, VisionFeatures> cache_;
};

}  // namespace projlens
