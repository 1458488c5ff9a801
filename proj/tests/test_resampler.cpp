#include <gtest/gtest.h>

#include <cmath>

#include "omniret/resampler.hpp"
#include "test_util.hpp"

using namespace omniret;
using omniret::testing::bitwise_equal;
using omniret::testing::random_tensor;

TEST(CrossAttention, SingleInputAttentionWeightIsOne) {
  Rng rng(1);
  const std::size_t d = 6, n = 3;
  BlockWeights w = BlockWeights::init(d, 2, rng);
  Tensor latents = random_tensor({n, d}, rng);
  Tensor input = random_tensor({1, d}, rng);

  Tape t(false);
  BlockVars bv = load_block(t, w, false);
  Tensor out = t.value(cross_attention_block(t.input(latents), t.input(input), bv));

  // With one key the softmax is exactly 1, so every latent attends to the
  // single value row: out = x1 + mlp(ln(x1)), x1 = latents + rep(v) * wo.
  Tape m(false);
  Var kv = layernorm_rows(m.input(input), m.constant(w.ln_kv_gain), m.constant(w.ln_kv_shift));
  Var vrow = matmul(kv, m.constant(w.wv));
  std::vector<std::size_t> rep(n, 0);
  Var vfull = gather_rows(vrow, rep);
  Var x1 = add(m.input(latents), matmul(vfull, m.constant(w.wo)));
  Var ln = layernorm_rows(x1, m.constant(w.ln_mlp_gain), m.constant(w.ln_mlp_shift));
  Var hidden = gelu(add_rowvec(matmul(ln, m.constant(w.mlp_w1)), m.constant(w.mlp_b1)));
  Var expect = add(x1, add_rowvec(matmul(hidden, m.constant(w.mlp_w2)), m.constant(w.mlp_b2)));
  EXPECT_TENSOR_NEAR(out, m.value(expect), 1e-12);
}

TEST(CrossAttention, DuplicatedInputRowsLeaveOutputUnchanged) {
  Rng rng(2);
  const std::size_t d = 8, n = 2, mrows = 3;
  BlockWeights w = BlockWeights::init(d, 2, rng);
  Tensor latents = random_tensor({n, d}, rng);
  Tensor inputs = random_tensor({mrows, d}, rng);
  Tensor doubled = Tensor::zeros({2 * mrows, d});
  for (std::size_t r = 0; r < 2 * mrows; ++r)
    for (std::size_t j = 0; j < d; ++j) doubled.mut_data()[r * d + j] = inputs.at(r % mrows, j);

  auto run = [&](const Tensor& in) {
    Tape t(false);
    BlockVars bv = load_block(t, w, false);
    return t.value(cross_attention_block(t.input(latents), t.input(in), bv));
  };
  EXPECT_TENSOR_NEAR(run(inputs), run(doubled), 1e-12);
}

TEST(CrossAttention, SnapshotSeed0) {
  // Frozen by tests/oracles/gen_snapshots.py before this module was built.
  Rng rng(0);
  Tensor latents = random_tensor({2, 4}, rng);
  Tensor inputs = random_tensor({3, 4}, rng);
  BlockWeights w = BlockWeights::init(4, 2, rng);
  Tape t(false);
  BlockVars bv = load_block(t, w, false);
  Tensor out = t.value(cross_attention_block(t.input(latents), t.input(inputs), bv));
  Tensor expect({2, 4},
                {-0.8772149233190307, -0.04947284245703848, 2.6990194040249986,
                 -0.22484452702948937, -1.6633768317678195, 0.48065118786721506,
                 -0.6510718289443682, -1.7051475667342395});
  EXPECT_TENSOR_NEAR(out, expect, 1e-9);
}

TEST(CrossAttention, PermutationOfInputRowsLeavesOutputUnchanged) {
  Rng rng(3);
  const std::size_t d = 6;
  BlockWeights w = BlockWeights::init(d, 3, rng);
  Tensor latents = random_tensor({2, d}, rng);
  Tensor inputs = random_tensor({5, d}, rng);
  Tensor shuffled = Tensor::zeros({5, d});
  const std::size_t perm[5] = {4, 2, 0, 3, 1};
  for (std::size_t r = 0; r < 5; ++r)
    for (std::size_t j = 0; j < d; ++j) shuffled.mut_data()[r * d + j] = inputs.at(perm[r], j);
  auto run = [&](const Tensor& in) {
    Tape t(false);
    BlockVars bv = load_block(t, w, false);
    return t.value(cross_attention_block(t.input(latents), t.input(in), bv));
  };
  EXPECT_TENSOR_NEAR(run(inputs), run(shuffled), 1e-12);
}

TEST(Resample, ModalitySensitivityWithDistinctBanks) {
  Rng rng(4);
  ResamplerParams p = ResamplerParams::init(2, 6, 2, {"image", "audio"}, 1, rng,
                                            ModalityLatentInit::kGaussian);
  Tensor tokens = random_tensor({4, 6}, rng);
  Tensor a = resample_value({"image", tokens}, p);
  Tensor b = resample_value({"audio", tokens}, p);
  double diff = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) diff = std::max(diff, std::fabs(a[i] - b[i]));
  EXPECT_GT(diff, 1e-8);
}

TEST(Resample, ZeroModalityLatentsAreModalityIndependent) {
  Rng rng(5);
  ResamplerParams p = ResamplerParams::init(2, 6, 2, {"image", "audio"}, 1, rng);
  Tensor tokens = random_tensor({4, 6}, rng);
  EXPECT_TRUE(bitwise_equal(resample_value({"image", tokens}, p),
                            resample_value({"audio", tokens}, p)));
}

TEST(Resample, OutputShapeIndependentOfTokenCount) {
  Rng rng(6);
  ResamplerParams p = ResamplerParams::init(3, 4, 2, {"image"}, 1, rng);
  for (std::size_t m : {1ul, 64ul, 600ul}) {
    Tensor out = resample_value({"image", random_tensor({m, 4}, rng)}, p);
    EXPECT_EQ(out.rows(), 3u);
    EXPECT_EQ(out.cols(), 4u);
  }
}

TEST(Resample, UnknownModalityIsConfigurationError) {
  Rng rng(7);
  ResamplerParams p = ResamplerParams::init(2, 4, 2, {"image"}, 1, rng);
  EXPECT_THROW(resample_value({"smell", random_tensor({3, 4}, rng)}, p), std::invalid_argument);
}

TEST(Resample, BlockWeightsPassGradCheckThroughQuadraticReadout) {
  Rng rng(8);
  const std::size_t d = 4, heads = 2, n = 2, mrows = 3;
  ResamplerParams p = ResamplerParams::init(n, d, heads, {"image"}, 1, rng);
  // Unit-scale latents keep the layer norms well away from the
  // near-constant-row regime where finite differences lose accuracy.
  for (double& v : p.shared_latents.mut_data()) v *= 25.0;
  Tensor tokens = random_tensor({mrows, d}, rng);

  // Check every parameter of the two blocks plus both latent banks.
  std::vector<Tensor> inputs;
  auto push = [&](Tensor& weight) { inputs.push_back(weight); };
  push(p.shared_latents);
  push(p.modality_latents.at("image"));
  for (BlockWeights* b : {&p.block0, &p.block1}) {
    push(b->wq);
    push(b->wk);
    push(b->wv);
    push(b->wo);
    push(b->ln_q_gain);
    push(b->ln_q_shift);
    push(b->ln_kv_gain);
    push(b->ln_kv_shift);
    push(b->ln_mlp_gain);
    push(b->ln_mlp_shift);
    push(b->mlp_w1);
    push(b->mlp_b1);
    push(b->mlp_w2);
    push(b->mlp_b2);
  }

  const double err = grad_check(
      [&](Tape& t, const std::vector<Var>& vs) {
        ResamplerVars rv;
        std::size_t at = 0;
        rv.shared_latents = vs[at++];
        rv.modality_latents.emplace("image", vs[at++]);
        for (BlockVars* b : {&rv.block0, &rv.block1}) {
          b->heads = heads;
          b->wq = vs[at++];
          b->wk = vs[at++];
          b->wv = vs[at++];
          b->wo = vs[at++];
          b->ln_q_gain = vs[at++];
          b->ln_q_shift = vs[at++];
          b->ln_kv_gain = vs[at++];
          b->ln_kv_shift = vs[at++];
          b->ln_mlp_gain = vs[at++];
          b->ln_mlp_shift = vs[at++];
          b->mlp_w1 = vs[at++];
          b->mlp_b1 = vs[at++];
          b->mlp_w2 = vs[at++];
          b->mlp_b2 = vs[at++];
        }
        rv.frame_embeddings = t.constant(Tensor::zeros({1, d}));
        Var out = resample(t.constant(tokens), "image", rv);
        return sum_all(mul(out, out));
      },
      inputs, 1e-5);
  EXPECT_LE(err, 1e-6);
}

// ---------------------------------------------------------------------------
// Video preprocessing

TEST(VideoTrilinear, IdentityIsBitIdentical) {
  Rng rng(9);
  Tensor grid = random_tensor({3, 2, 4, 5}, rng);
  Tensor out = video_trilinear(grid, {3, 2, 4});
  EXPECT_TRUE(bitwise_equal(out, grid));
}

TEST(VideoTrilinear, RampClosedForm) {
  // f(t) = t on T=3 resized to T'=5 must give 0, 0.5, 1, 1.5, 2.
  Tensor grid = Tensor::zeros({3, 1, 1, 1});
  for (std::size_t t = 0; t < 3; ++t) grid.mut_data()[t] = static_cast<double>(t);
  Tensor out = video_trilinear(grid, {5, 1, 1});
  const double expect[5] = {0.0, 0.5, 1.0, 1.5, 2.0};
  for (std::size_t i = 0; i < 5; ++i) EXPECT_NEAR(out[i], expect[i], 1e-15);
}

TEST(VideoTrilinear, SingleFrameExtendsConstantly) {
  Rng rng(10);
  Tensor grid = random_tensor({1, 2, 2, 3}, rng);
  Tensor out = video_trilinear(grid, {4, 2, 2});
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t i = 0; i < 2 * 2 * 3; ++i) EXPECT_EQ(out[t * 12 + i], grid[i]);
}

TEST(VideoTrilinear, ExactOnTrilinearPolynomials) {
  Rng rng(11);
  const double a = rng.normal(), b = rng.normal(), c = rng.normal(), d = rng.normal();
  auto f = [&](double t, double h, double w) { return a + b * t + c * h + d * w; };
  const std::size_t st = 3, sh = 4, sw = 5;
  Tensor grid = Tensor::zeros({st, sh, sw, 1});
  for (std::size_t t = 0; t < st; ++t)
    for (std::size_t h = 0; h < sh; ++h)
      for (std::size_t w = 0; w < sw; ++w)
        grid.mut_data()[(t * sh + h) * sw + w] =
            f(static_cast<double>(t), static_cast<double>(h), static_cast<double>(w));
  const std::size_t tt = 5, th = 7, tw = 2;
  Tensor out = video_trilinear(grid, {tt, th, tw});
  for (std::size_t t = 0; t < tt; ++t)
    for (std::size_t h = 0; h < th; ++h)
      for (std::size_t w = 0; w < tw; ++w) {
        const double src_t = static_cast<double>(t) * (st - 1) / (tt - 1);
        const double src_h = static_cast<double>(h) * (sh - 1) / (th - 1);
        const double src_w = static_cast<double>(w) * (sw - 1) / (tw - 1);
        EXPECT_NEAR(out[(t * th + h) * tw + w], f(src_t, src_h, src_w), 1e-12);
      }
}

TEST(VideoTrilinear, RejectsBadShapes) {
  EXPECT_THROW(video_trilinear(Tensor::zeros({2, 2}), {1, 1, 1}), ShapeError);
}

TEST(FrameEmbeddings, RowZeroAlternates) {
  Tensor fe = sinusoidal_frame_embeddings(3, 6);
  for (std::size_t j = 0; j < 6; ++j) EXPECT_EQ(fe.at(0, j), j % 2 == 0 ? 0.0 : 1.0);
}

TEST(FrameEmbeddings, RangeAndClosedForm) {
  Tensor fe = sinusoidal_frame_embeddings(7, 10);
  for (double v : fe.data()) {
    EXPECT_GE(v, -1.0);
    EXPECT_LE(v, 1.0);
  }
  EXPECT_NEAR(fe.at(1, 0), std::sin(1.0), 1e-12);
  EXPECT_NEAR(fe.at(1, 1), std::cos(1.0), 1e-12);
  EXPECT_NEAR(fe.at(1, 0), 0.8414709848078965, 1e-12);
  EXPECT_NEAR(fe.at(1, 1), 0.5403023058681398, 1e-12);
}

TEST(FrameEmbeddings, OddDimIsConfigurationError) {
  EXPECT_THROW(sinusoidal_frame_embeddings(4, 5), std::invalid_argument);
}

TEST(PrepareVideoTokens, AddsFrameEmbeddingsBeforeResize) {
  // Constant-zero features: the resized tokens are pure interpolated frame
  // embeddings, so the middle output frame of a 2->3 resize must be the
  // average of the two embedding rows.
  const std::size_t d = 4;
  Tensor grid = Tensor::zeros({2 * 1 * 1, d});
  Tensor fe = sinusoidal_frame_embeddings(2, d);
  Tape t(false);
  Var out = prepare_video_tokens(t.input(grid), {2, 1, 1}, {3, 1, 1}, t.input(fe));
  const Tensor& o = t.value(out);
  ASSERT_EQ(o.rows(), 3u);
  for (std::size_t j = 0; j < d; ++j) {
    EXPECT_NEAR(o.at(0, j), fe.at(0, j), 1e-15);
    EXPECT_NEAR(o.at(1, j), 0.5 * (fe.at(0, j) + fe.at(1, j)), 1e-15);
    EXPECT_NEAR(o.at(2, j), fe.at(1, j), 1e-15);
  }
}
