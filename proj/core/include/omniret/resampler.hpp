#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "omniret/rng.hpp"
#include "omniret/tape.hpp"
#include "omniret/tensor.hpp"

namespace omniret {

/// One pre-norm cross-attention block: multi-head attention with residual,
/// then a GELU MLP (D -> 4D -> D) with residual. Queries and key/value
/// inputs are layer-normalized separately before the projections.
struct BlockWeights {
  std::size_t heads = 1;
  Tensor wq, wk, wv, wo;          // [D x D]
  Tensor ln_q_gain, ln_q_shift;   // [D]
  Tensor ln_kv_gain, ln_kv_shift; // [D]
  Tensor ln_mlp_gain, ln_mlp_shift;
  Tensor mlp_w1, mlp_b1;          // [D x 4D], [4D]
  Tensor mlp_w2, mlp_b2;          // [4D x D], [D]

  static BlockWeights init(std::size_t d, std::size_t heads, Rng& rng);
};

/// Taped handles to one block's weights.
struct BlockVars {
  std::size_t heads = 1;
  Var wq, wk, wv, wo;
  Var ln_q_gain, ln_q_shift, ln_kv_gain, ln_kv_shift, ln_mlp_gain, ln_mlp_shift;
  Var mlp_w1, mlp_b1, mlp_w2, mlp_b2;
};

BlockVars load_block(Tape& t, const BlockWeights& w, bool trainable);

enum class ModalityLatentInit { kZero, kGaussian };

/// Shared resampler state: one latent bank used for every modality plus an
/// additive modality-specific bank, two distinct cross-attention blocks,
/// and a trainable frame-embedding table for video.
struct ResamplerParams {
  Tensor shared_latents;                        // [N x D]
  std::map<std::string, Tensor> modality_latents;  // each [N x D]
  BlockWeights block0, block1;
  Tensor frame_embeddings;                      // [T_max x D]

  std::size_t latent_count() const { return shared_latents.rows(); }
  std::size_t dim() const { return shared_latents.cols(); }

  static ResamplerParams init(std::size_t n, std::size_t d, std::size_t heads,
                              const std::vector<std::string>& modalities, std::size_t t_max,
                              Rng& rng, ModalityLatentInit mode = ModalityLatentInit::kZero);
};

struct ResamplerVars {
  Var shared_latents;
  std::map<std::string, Var> modality_latents;
  BlockVars block0, block1;
  Var frame_embeddings;
};

ResamplerVars load_resampler(Tape& t, const ResamplerParams& p, bool trainable);

/// Variable-length media token set entering the resampler. Video grids are
/// flattened to tokens with prepare_video_tokens before this point.
struct MediaTokens {
  std::string modality;
  Tensor tokens;  // [M x D]
};

/// Pre-norm multi-head cross-attention + MLP, both with residuals.
/// latents: [N x D] queries; inputs: [M x D] keys/values. Output [N x D].
Var cross_attention_block(Var latents, Var inputs, const BlockVars& w);

/// Two blocks over (shared + modality) latent queries.
Var resample(Var tokens, const std::string& modality, const ResamplerVars& p);

/// Latents-only variant used where no modality bank applies (the pooling
/// layer's internal resampler).
Var resample_plain(Var tokens, const ResamplerVars& p);

/// Value-level resample of one media set.
Tensor resample_value(const MediaTokens& media, const ResamplerParams& p);

// ---- Video preprocessing ----

/// Channelwise 3D trilinear resize with align-corners sampling.
/// features: [T x H x W x D] -> [T' x H' x W' x D].
Tensor video_trilinear(const Tensor& features, const std::array<std::size_t, 3>& target);

/// Sparse row map realizing the same resize on a [T*H*W x D] matrix
/// (t-major flattening); used on the tape.
SparseRowMap trilinear_row_map(const std::array<std::size_t, 3>& source,
                               const std::array<std::size_t, 3>& target);

/// entry (t, 2i) = sin(t / 10000^{2i/D}), entry (t, 2i+1) = cos of the same
/// argument; D must be even. The bank stays trainable after this init.
Tensor sinusoidal_frame_embeddings(std::size_t t_max, std::size_t d);

/// Adds frame_embeddings[t] to every token of frame t of a [T x H x W x D]
/// grid, resizes to target, and flattens t-major to [(T'H'W') x D].
Var prepare_video_tokens(Var grid_rows, const std::array<std::size_t, 3>& source,
                         const std::array<std::size_t, 3>& target, Var frame_embeddings);

}  // namespace omniret
