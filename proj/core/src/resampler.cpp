#include "omniret/resampler.hpp"

#include <cmath>
#include <stdexcept>

namespace omniret {

BlockWeights BlockWeights::init(std::size_t d, std::size_t heads, Rng& rng) {
  check_shape(heads >= 1 && d % heads == 0, "head count must divide the model dim");
  auto gaussian = [&rng](std::size_t r, std::size_t c, double std) {
    Tensor t = Tensor::zeros({r, c});
    for (double& v : t.mut_data()) v = rng.normal() * std;
    return t;
  };
  const double s1 = 1.0 / std::sqrt(static_cast<double>(d));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(4 * d));
  BlockWeights w;
  w.heads = heads;
  w.wq = gaussian(d, d, s1);
  w.wk = gaussian(d, d, s1);
  w.wv = gaussian(d, d, s1);
  w.wo = gaussian(d, d, s1);
  w.ln_q_gain = Tensor({d}, std::vector<double>(d, 1.0));
  w.ln_q_shift = Tensor::zeros({d});
  w.ln_kv_gain = Tensor({d}, std::vector<double>(d, 1.0));
  w.ln_kv_shift = Tensor::zeros({d});
  w.ln_mlp_gain = Tensor({d}, std::vector<double>(d, 1.0));
  w.ln_mlp_shift = Tensor::zeros({d});
  w.mlp_w1 = gaussian(d, 4 * d, s1);
  w.mlp_b1 = Tensor::zeros({4 * d});
  w.mlp_w2 = gaussian(4 * d, d, s2);
  w.mlp_b2 = Tensor::zeros({d});
  return w;
}

BlockVars load_block(Tape& t, const BlockWeights& w, bool trainable) {
  auto put = [&](const Tensor& x) { return trainable ? t.input(x) : t.constant(x); };
  BlockVars v;
  v.heads = w.heads;
  v.wq = put(w.wq);
  v.wk = put(w.wk);
  v.wv = put(w.wv);
  v.wo = put(w.wo);
  v.ln_q_gain = put(w.ln_q_gain);
  v.ln_q_shift = put(w.ln_q_shift);
  v.ln_kv_gain = put(w.ln_kv_gain);
  v.ln_kv_shift = put(w.ln_kv_shift);
  v.ln_mlp_gain = put(w.ln_mlp_gain);
  v.ln_mlp_shift = put(w.ln_mlp_shift);
  v.mlp_w1 = put(w.mlp_w1);
  v.mlp_b1 = put(w.mlp_b1);
  v.mlp_w2 = put(w.mlp_w2);
  v.mlp_b2 = put(w.mlp_b2);
  return v;
}

ResamplerParams ResamplerParams::init(std::size_t n, std::size_t d, std::size_t heads,
                                      const std::vector<std::string>& modalities,
                                      std::size_t t_max, Rng& rng, ModalityLatentInit mode) {
  ResamplerParams p;
  p.shared_latents = Tensor::zeros({n, d});
  for (double& v : p.shared_latents.mut_data()) v = rng.normal() * 0.02;
  for (const std::string& m : modalities) {
    Tensor bank = Tensor::zeros({n, d});
    if (mode == ModalityLatentInit::kGaussian) {
      for (double& v : bank.mut_data()) v = rng.normal() * 0.02;
    }
    p.modality_latents.emplace(m, std::move(bank));
  }
  p.block0 = BlockWeights::init(d, heads, rng);
  p.block1 = BlockWeights::init(d, heads, rng);
  p.frame_embeddings = sinusoidal_frame_embeddings(t_max, d);
  return p;
}

ResamplerVars load_resampler(Tape& t, const ResamplerParams& p, bool trainable) {
  auto put = [&](const Tensor& x) { return trainable ? t.input(x) : t.constant(x); };
  ResamplerVars v;
  v.shared_latents = put(p.shared_latents);
  for (const auto& [name, bank] : p.modality_latents) v.modality_latents.emplace(name, put(bank));
  v.block0 = load_block(t, p.block0, trainable);
  v.block1 = load_block(t, p.block1, trainable);
  v.frame_embeddings = put(p.frame_embeddings);
  return v;
}

Var cross_attention_block(Var latents, Var inputs, const BlockVars& w) {
  Tape& t = *latents.tape;
  const std::size_t d = t.value(latents).cols();
  check_shape(t.value(inputs).rank() == 2 && t.value(inputs).cols() == d,
              "cross_attention_block: input dim mismatch");
  check_shape(d % w.heads == 0, "cross_attention_block: heads must divide dim");
  const std::size_t dh = d / w.heads;
  const double att_scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Var q_in = layernorm_rows(latents, w.ln_q_gain, w.ln_q_shift);
  Var kv_in = layernorm_rows(inputs, w.ln_kv_gain, w.ln_kv_shift);
  Var q = matmul(q_in, w.wq);
  Var k = matmul(kv_in, w.wk);
  Var v = matmul(kv_in, w.wv);

  std::vector<Var> head_outs;
  head_outs.reserve(w.heads);
  for (std::size_t h = 0; h < w.heads; ++h) {
    Var qh = slice_cols(q, h * dh, dh);
    Var kh = slice_cols(k, h * dh, dh);
    Var vh = slice_cols(v, h * dh, dh);
    Var attn = softmax_rows(scale(matmul(qh, transpose(kh)), att_scale));
    head_outs.push_back(matmul(attn, vh));
  }
  Var merged = w.heads == 1 ? head_outs[0] : concat_cols(head_outs);
  Var x = add(latents, matmul(merged, w.wo));

  Var m_in = layernorm_rows(x, w.ln_mlp_gain, w.ln_mlp_shift);
  Var hidden = gelu(add_rowvec(matmul(m_in, w.mlp_w1), w.mlp_b1));
  Var mlp_out = add_rowvec(matmul(hidden, w.mlp_w2), w.mlp_b2);
  return add(x, mlp_out);
}

Var resample(Var tokens, const std::string& modality, const ResamplerVars& p) {
  auto it = p.modality_latents.find(modality);
  if (it == p.modality_latents.end()) {
    throw std::invalid_argument("resample: unknown modality '" + modality + "'");
  }
  Var lat = add(p.shared_latents, it->second);
  Var x = cross_attention_block(lat, tokens, p.block0);
  return cross_attention_block(x, tokens, p.block1);
}

Var resample_plain(Var tokens, const ResamplerVars& p) {
  Var x = cross_attention_block(p.shared_latents, tokens, p.block0);
  return cross_attention_block(x, tokens, p.block1);
}

Tensor resample_value(const MediaTokens& media, const ResamplerParams& p) {
  Tape t(false);
  ResamplerVars vars = load_resampler(t, p, /*trainable=*/false);
  Var out = resample(t.input(media.tokens), media.modality, vars);
  return t.value(out);
}

// ---------------------------------------------------------------------------
// Video preprocessing

namespace {

// Per-axis align-corners sample: list of (index, weight), omitting zeros so
// that identity resizes copy bits exactly.
std::vector<std::pair<std::size_t, double>> axis_taps(std::size_t src_n, std::size_t dst_n,
                                                      std::size_t i) {
  if (src_n == 1 || dst_n == 1) return {{std::size_t{0}, 1.0}};
  const double pos = static_cast<double>(i) * static_cast<double>(src_n - 1) /
                     static_cast<double>(dst_n - 1);
  const double fl = std::floor(pos);
  std::size_t lo = static_cast<std::size_t>(fl);
  if (lo >= src_n - 1) lo = src_n - 2;
  const double frac = pos - static_cast<double>(lo);
  if (frac == 0.0) return {{lo, 1.0}};
  if (frac == 1.0) return {{lo + 1, 1.0}};
  return {{lo, 1.0 - frac}, {lo + 1, frac}};
}

}  // namespace

SparseRowMap trilinear_row_map(const std::array<std::size_t, 3>& source,
                               const std::array<std::size_t, 3>& target) {
  for (std::size_t v : source) check_shape(v >= 1, "trilinear: source dims must be >= 1");
  for (std::size_t v : target) check_shape(v >= 1, "trilinear: target dims must be >= 1");
  SparseRowMap map;
  map.in_rows = source[0] * source[1] * source[2];
  map.out_rows = target[0] * target[1] * target[2];
  map.entries.resize(map.out_rows);
  for (std::size_t t = 0; t < target[0]; ++t) {
    const auto tt = axis_taps(source[0], target[0], t);
    for (std::size_t h = 0; h < target[1]; ++h) {
      const auto th = axis_taps(source[1], target[1], h);
      for (std::size_t w = 0; w < target[2]; ++w) {
        const auto tw = axis_taps(source[2], target[2], w);
        auto& row = map.entries[(t * target[1] + h) * target[2] + w];
        for (const auto& [it, wt] : tt)
          for (const auto& [ih, wh] : th)
            for (const auto& [iw, ww] : tw)
              row.emplace_back((it * source[1] + ih) * source[2] + iw, wt * wh * ww);
      }
    }
  }
  return map;
}

Tensor video_trilinear(const Tensor& features, const std::array<std::size_t, 3>& target) {
  check_shape(features.rank() == 4, "video_trilinear: rank-4 features required");
  const std::array<std::size_t, 3> source = {features.dim(0), features.dim(1), features.dim(2)};
  const std::size_t d = features.dim(3);
  const SparseRowMap map = trilinear_row_map(source, target);
  Tensor flat({map.in_rows, d}, features.data());
  Tape t(false);
  Var out = sparse_rows_apply(t.input(std::move(flat)), map);
  return Tensor({target[0], target[1], target[2], d}, t.value(out).data());
}

Tensor sinusoidal_frame_embeddings(std::size_t t_max, std::size_t d) {
  check_shape(t_max >= 1, "frame embeddings: t_max must be >= 1");
  if (d % 2 != 0) {
    throw std::invalid_argument("sinusoidal_frame_embeddings: dim must be even, got " +
                                std::to_string(d));
  }
  Tensor out = Tensor::zeros({t_max, d});
  for (std::size_t t = 0; t < t_max; ++t) {
    for (std::size_t i = 0; i < d / 2; ++i) {
      const double angle =
          static_cast<double>(t) /
          std::pow(10000.0, 2.0 * static_cast<double>(i) / static_cast<double>(d));
      out.mut_data()[t * d + 2 * i] = std::sin(angle);
      out.mut_data()[t * d + 2 * i + 1] = std::cos(angle);
    }
  }
  return out;
}

Var prepare_video_tokens(Var grid_rows, const std::array<std::size_t, 3>& source,
                         const std::array<std::size_t, 3>& target, Var frame_embeddings) {
  Tape& t = *grid_rows.tape;
  const std::size_t voxels = source[0] * source[1] * source[2];
  check_shape(t.value(grid_rows).rows() == voxels, "prepare_video_tokens: row count mismatch");
  check_shape(t.value(frame_embeddings).rows() >= source[0],
              "prepare_video_tokens: frame count exceeds the embedding table");
  std::vector<std::size_t> frame_of(voxels);
  for (std::size_t i = 0; i < voxels; ++i) frame_of[i] = i / (source[1] * source[2]);
  Var fe = gather_rows(frame_embeddings, std::move(frame_of));
  Var summed = add(grid_rows, fe);
  return sparse_rows_apply(summed, trilinear_row_map(source, target));
}

}  // namespace omniret
