#include <catch2/catch_amalgamated.hpp>

#include "projlens/model.hpp"
#include "projlens/tiny_backends.hpp"

using namespace projlens;

namespace {

ReferenceBackends tiny(uint64_t seed = 7, FfnArch arch = FfnArch::GATED) {
  ReferenceDims dims;
  dims.arch = arch;
  return make_reference_backends(seed, dims, {"dog", "cat", "grape"});
}

Mat random_mat(uint64_t seed, int rows, int cols) {
  Rng rng(seed);
  Mat m(rows, cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) m(r, c) = rng.normal();
  return m;
}

}  // namespace

TEST_CASE("project: identity weight reproduces the input") {
  VisionFeatures f;
  f.patches = random_mat(1, 3, 4);
  ProjectionParams p;
  p.weight = Mat::Identity(4, 4);
  p.bias = Vec::Zero(4);
  CHECK((project(f, p) - f.patches).norm() == 0.0);
}

TEST_CASE("project: zero weight and bias give zero embeddings") {
  VisionFeatures f;
  f.patches = random_mat(2, 3, 4);
  ProjectionParams p;
  p.weight = Mat::Zero(5, 4);
  p.bias = Vec::Zero(5);
  CHECK(project(f, p).norm() == 0.0);
}

TEST_CASE("project matches an independent matrix-product oracle") {
  VisionFeatures f;
  f.patches = random_mat(3, 3, 4);
  ProjectionParams p;
  p.weight = random_mat(4, 5, 4);
  Rng rng(5);
  p.bias = Vec(5);
  for (int i = 0; i < 5; ++i) p.bias[i] = rng.normal();

  const Mat out = project(f, p);
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 5; ++c) {
      double expect = p.bias[c];
      for (int k = 0; k < 4; ++k) expect += f.patches(r, k) * p.weight(c, k);
      CHECK(out(r, c) == Catch::Approx(expect).margin(1e-6));
    }
}

TEST_CASE("project is affine-linear") {
  VisionFeatures a, b;
  a.patches = random_mat(6, 2, 4);
  b.patches = random_mat(7, 2, 4);
  ProjectionParams p;
  p.weight = random_mat(8, 3, 4);
  Rng rng(9);
  p.bias = Vec(3);
  for (int i = 0; i < 3; ++i) p.bias[i] = rng.normal();

  const double alpha = 0.7, beta = -1.3;
  VisionFeatures mix;
  mix.patches = alpha * a.patches + beta * b.patches;
  const Mat lhs = project(mix, p);
  Mat rhs = alpha * project(a, p) + beta * project(b, p);
  rhs.rowwise() -= (alpha + beta - 1.0) * p.bias.transpose();
  CHECK((lhs - rhs).cwiseAbs().maxCoeff() < 1e-6);
}

TEST_CASE("project rejects shape mismatches") {
  VisionFeatures f;
  f.patches = random_mat(1, 2, 4);
  ProjectionParams p;
  p.weight = Mat::Zero(5, 3);
  p.bias = Vec::Zero(5);
  CHECK_THROWS_AS(project(f, p), error);
}

TEST_CASE("ffn_memory_coefficients: plain relu-style hand case") {
  FfnLayerParams params;
  params.arch = FfnArch::PLAIN;
  params.keys = Mat(3, 2);
  params.keys << 1, 0, 0, 1, -1, 0;
  params.values = Mat::Zero(2, 3);
  Vec x(2);
  x << 1, 0;
  const Vec h = ffn_memory_coefficients(x, params);
  // gelu(1), gelu(0), gelu(-1)
  CHECK(h[0] == Catch::Approx(gelu(1.0)));
  CHECK(h[1] == 0.0);
  CHECK(h[2] == Catch::Approx(gelu(-1.0)));
  CHECK(h[0] > 0.8);
  CHECK(std::abs(h[2]) < 0.2);
}

TEST_CASE("ffn_memory_coefficients: gated formula matches explicit products") {
  FfnLayerParams params;
  params.arch = FfnArch::GATED;
  params.gate = random_mat(11, 6, 4);
  params.up = random_mat(12, 6, 4);
  params.down = random_mat(13, 4, 6);
  Rng rng(14);
  Vec x(4);
  for (int i = 0; i < 4; ++i) x[i] = rng.normal();

  const Vec h = ffn_memory_coefficients(x, params);
  for (int i = 0; i < 6; ++i) {
    const double g = params.gate.row(i).dot(x);
    const double u = params.up.row(i).dot(x);
    CHECK(h[i] == Catch::Approx(silu(g) * u).margin(1e-12));
  }
}

TEST_CASE("ffn_memory_coefficients: zero input gives zero coefficients") {
  FfnLayerParams params;
  params.arch = FfnArch::GATED;
  params.gate = random_mat(1, 4, 3);
  params.up = random_mat(2, 4, 3);
  params.down = random_mat(3, 3, 4);
  CHECK(ffn_memory_coefficients(Vec::Zero(3), params).norm() == 0.0);
}

TEST_CASE("assemble_input layout and mask arithmetic") {
  auto b = tiny();
  // 4 patches + text prefix + 2-token label + eos
  TinyTokenizer tok({"traffic light"});
  TinyLMConfig cfg;
  cfg.seed = 3;
  auto lm = TinyLM(cfg, std::make_shared<TinyTokenizer>(tok));

  PromptSample s;
  s.norm_box = {0.1, 0.2, 0.3, 0.4};
  s.label = "traffic light";
  const RenderedPrompt r = render_prompt(s, lm.tokenizer(), 4);
  const Mat visual = random_mat(21, 4, lm.d_lm());
  const AssembledInput in = assemble_input(visual, r, lm);

  CHECK(in.embeddings.rows() == static_cast<int>(1 + 4 + r.text_prefix_tokens.size() + 2 + 1));
  CHECK(in.targets.size() == static_cast<size_t>(in.embeddings.rows()) - 1);
  size_t true_count = 0;
  for (bool m : in.mask) true_count += m;
  CHECK(true_count == 3);
  // the last masked target is the eos token
  for (size_t i = in.mask.size(); i-- > 0;) {
    if (in.mask[i]) {
      CHECK(in.targets[i] == lm.newline_id());
      break;
    }
  }
  // visual rows carry the projected features verbatim
  CHECK((in.embeddings.middleRows(1, 4) - visual).norm() == 0.0);
}

TEST_CASE("assemble_input accepts the text-only degenerate case") {
  auto b = tiny();
  PromptSample s;
  s.norm_box = {0.1, 0.2, 0.3, 0.4};
  s.label = "dog";
  const RenderedPrompt r = render_prompt(s, b.lm->tokenizer(), 0);
  const AssembledInput in = assemble_input(Mat(0, b.lm->d_lm()), r, *b.lm);
  CHECK(in.embeddings.rows() == static_cast<int>(r.total_len()));
  CHECK_NOTHROW(b.lm->forward(in.embeddings));
}

TEST_CASE("assemble_input rejects slot/patch mismatches") {
  auto b = tiny();
  PromptSample s;
  s.norm_box = {0.1, 0.2, 0.3, 0.4};
  s.label = "dog";
  const RenderedPrompt r = render_prompt(s, b.lm->tokenizer(), 4);
  CHECK_THROWS_AS(assemble_input(random_mat(1, 3, b.lm->d_lm()), r, *b.lm), error);
}

TEST_CASE("reference backends are bit-identical across instances") {
  auto a = tiny(123);
  auto b = tiny(123);
  auto c = tiny(124);
  CHECK(a.lm->param_digest() == b.lm->param_digest());
  CHECK(a.encoder->param_digest() == b.encoder->param_digest());
  CHECK(a.lm->param_digest() != c.lm->param_digest());
}

TEST_CASE("traced forward logits equal plain forward logits exactly") {
  for (FfnArch arch : {FfnArch::PLAIN, FfnArch::GATED}) {
    auto b = tiny(31, arch);
    const Mat emb = random_mat(32, 9, b.lm->d_lm());
    const Mat plain = b.lm->forward(emb);
    const auto trace = b.lm->traced_forward(emb, {0, 4, 8});
    CHECK((plain - trace.logits).cwiseAbs().maxCoeff() == 0.0);
  }
}

TEST_CASE("traced coefficients match explicit recomputation from raw params") {
  for (FfnArch arch : {FfnArch::PLAIN, FfnArch::GATED}) {
    auto b = tiny(33, arch);
    const Mat emb = random_mat(34, 7, b.lm->d_lm());
    const auto trace = b.lm->traced_forward(emb, {3, 6});
    for (size_t pi = 0; pi < trace.points.size(); ++pi) {
      for (int layer = 0; layer < b.lm->num_layers(); ++layer) {
        const auto params = b.lm->ffn_layer_params(layer);
        const Vec manual =
            ffn_memory_coefficients(trace.points[pi].ffn_input[static_cast<size_t>(layer)], params);
        const Vec traced = trace.points[pi].memory_coefficients[static_cast<size_t>(layer)];
        CHECK((manual - traced).cwiseAbs().maxCoeff() < 1e-5);
      }
    }
  }
}

TEST_CASE("gated coefficients reproduce the block's actual output") {
  auto b = tiny(35, FfnArch::GATED);
  const Mat emb = random_mat(36, 6, b.lm->d_lm());
  const auto trace = b.lm->traced_forward(emb, {5});
  for (int layer = 0; layer < b.lm->num_layers(); ++layer) {
    const auto params = b.lm->ffn_layer_params(layer);
    const Vec h =
        ffn_memory_coefficients(trace.points[0].ffn_input[static_cast<size_t>(layer)], params);
    const Vec reconstructed = params.down * h;
    const Vec actual = trace.points[0].ffn_output[static_cast<size_t>(layer)];
    CHECK((reconstructed - actual).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("tied unembedding: a token's own embedding row wins") {
  auto b = tiny(40);
  auto& lm = *b.lm;
  for (int t : {5, 17, 42}) {
    const Vec row = lm.token_embed({t}).row(0);
    const Vec logits = lm.unembed(row);
    int argmax = 0;
    logits.maxCoeff(&argmax);
    CHECK(argmax == t);
  }
}

TEST_CASE("masked loss: uniform logits give ln V, delta gives ~0") {
  const int vocab = 50;
  Mat logits = Mat::Zero(3, vocab);
  std::vector<int> targets{1, 2, 3};
  std::vector<bool> mask{false, true, false};
  CHECK(masked_lm_loss(logits, targets, mask) ==
        Catch::Approx(std::log(static_cast<double>(vocab))).margin(1e-9));

  logits(1, 2) = 1000.0;
  CHECK(masked_lm_loss(logits, targets, mask) < 1e-9);
}

TEST_CASE("masked loss ignores unmasked logits and their gradient is zero") {
  Mat logits = random_mat(50, 4, 12);
  std::vector<int> targets{1, 2, 3, 4};
  std::vector<bool> mask{false, true, true, false};
  const double base = masked_lm_loss(logits, targets, mask);

  Mat perturbed = logits;
  perturbed.row(0).array() += 3.21;
  perturbed.row(3).array() -= 1.11;
  CHECK(masked_lm_loss(perturbed, targets, mask) == base);

  const Mat grad = masked_lm_loss_grad(logits, targets, mask);
  CHECK(grad.row(0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(grad.row(3).cwiseAbs().maxCoeff() == 0.0);
  CHECK(grad.row(1).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("masked loss throws on an all-false mask") {
  Mat logits = Mat::Zero(2, 4);
  CHECK_THROWS_AS(masked_lm_loss(logits, {1, 2}, {false, false}), error);
}

TEST_CASE("loss gradient w.r.t. input embeddings matches finite differences") {
  for (FfnArch arch : {FfnArch::PLAIN, FfnArch::GATED}) {
    auto b = tiny(55, arch);
    auto& lm = *b.lm;
    Mat emb = random_mat(56, 8, lm.d_lm());
    std::vector<int> targets;
    std::vector<bool> mask;
    Rng rng(57);
    for (int i = 0; i + 1 < 8; ++i) {
      targets.push_back(static_cast<int>(rng.below(static_cast<uint64_t>(lm.vocab_size()))));
      mask.push_back(i >= 4);
    }

    Mat grad;
    lm.masked_loss_with_input_grad(emb, targets, mask, &grad);

    const double eps = 1e-6;
    for (int trial = 0; trial < 12; ++trial) {
      const int r = static_cast<int>(rng.below(8));
      const int c = static_cast<int>(rng.below(static_cast<uint64_t>(lm.d_lm())));
      Mat plus = emb, minus = emb;
      plus(r, c) += eps;
      minus(r, c) -= eps;
      const double lp = lm.masked_loss_with_input_grad(plus, targets, mask, nullptr);
      const double lmn = lm.masked_loss_with_input_grad(minus, targets, mask, nullptr);
      const double fd = (lp - lmn) / (2 * eps);
      CHECK(grad(r, c) == Catch::Approx(fd).margin(1e-7).epsilon(1e-4));
    }
  }
}

TEST_CASE("forward is deterministic and pure") {
  auto b = tiny(60);
  const Mat emb = random_mat(61, 5, b.lm->d_lm());
  const std::string digest_before = b.lm->param_digest();
  const Mat l1 = b.lm->forward(emb);
  const Mat l2 = b.lm->forward(emb);
  CHECK((l1 - l2).cwiseAbs().maxCoeff() == 0.0);
  CHECK(b.lm->param_digest() == digest_before);
}

TEST_CASE("hash encoder is deterministic per image id") {
  HashPatchEncoder enc(5, 8, 4);
  ImageRecord im{"img1", 10, 10, ""};
  const auto f1 = enc.encode(im);
  const auto f2 = enc.encode(im);
  CHECK((f1.patches - f2.patches).norm() == 0.0);
  ImageRecord other{"img2", 10, 10, ""};
  CHECK((enc.encode(other).patches - f1.patches).norm() > 0.0);
  CHECK(f1.num_patches() == 4);
  CHECK(f1.d_v() == 8);
}
