#pragma once

#include <map>
#include <string>
#include <vector>

#include "omniret/dataset.hpp"
#include "omniret/resampler.hpp"
#include "omniret/swpool.hpp"
#include "omniret/tape.hpp"

namespace omniret {

enum class Pooling { kAswp, kMean };

struct ModelConfig {
  std::size_t dim = 32;      // model width D
  std::size_t enc_dim = 24;  // synthetic encoder width
  std::size_t heads = 4;
  std::size_t latents = 4;        // media resampler N
  std::size_t references = 8;     // pooling S
  std::size_t projections = 64;   // pooling L (embedding size)
  std::size_t t_max = 8;          // frame-embedding table
  std::size_t max_slots = 4;      // composer set slots
  std::vector<std::string> modalities = {"image", "audio", "state"};
  std::array<std::size_t, 3> video_target = {2, 2, 2};
  Pooling pooling = Pooling::kAswp;

  std::size_t embedding_dim() const {
    return pooling == Pooling::kAswp ? projections : dim;
  }
  void validate() const;
};

/// Two-layer GELU MLP mapping encoder tokens into the model width.
struct ProjectorWeights {
  Tensor w1, b1;  // [D_enc x D], [D]
  Tensor w2, b2;  // [D x D], [D]
  static ProjectorWeights init(std::size_t in_dim, std::size_t out_dim, Rng& rng);
};

struct ProjectorVars {
  Var w1, b1, w2, b2;
};

/// Stand-in for the frozen language-model composer: per-slot position
/// embeddings, a role marker token, and one self-attention block over the
/// concatenated sets.
struct ComposerParams {
  BlockWeights block;
  Tensor slot_embeddings;   // [max_slots x D]
  Tensor query_marker;      // [1 x D]
  Tensor candidate_marker;  // [1 x D]
  static ComposerParams init(std::size_t d, std::size_t heads, std::size_t max_slots, Rng& rng);
};

struct ComposerVars {
  BlockVars block;
  Var slot_embeddings, query_marker, candidate_marker;
};

/// All trainable state of the desk-scale retrieval model.
struct ModelParams {
  std::map<std::string, ProjectorWeights> projectors;  // one per modality
  ProjectorWeights text_projector;  // modification-vector projector
  ResamplerParams media_resampler;
  ComposerParams composer;
  ResamplerParams pool_resampler;  // latents-only bank of `references` rows
  SlicedPoolParams pool;

  static ModelParams init(const ModelConfig& cfg, std::uint64_t seed);
};

enum class ParamGroup { kProjector, kResampler, kPool, kComposer };

struct ParamRef {
  std::string name;
  Tensor* tensor;
  ParamGroup group;
};

/// Stable, ordered enumeration of every parameter tensor; the checkpoint
/// tensor map and the optimizer are keyed by these names.
std::vector<ParamRef> collect_params(ModelParams& p);

struct EmbedVars {
  std::map<std::string, ProjectorVars> projectors;
  ProjectorVars text_projector;
  ResamplerVars media_resampler;
  ComposerVars composer;
  ResamplerVars pool_resampler;
  Var pool_slicers, pool_refs;
};

/// Loads parameters onto a tape. Gradients flow only into groups flagged
/// trainable (the stage schedule freezes the composer first).
EmbedVars load_model(Tape& t, const ModelParams& p, bool train_composer, bool train_rest);

/// Mirror of collect_params over loaded vars: same names, same order. The
/// optimizer relies on the two enumerations agreeing 1:1.
std::vector<std::pair<std::string, Var>> collect_vars(const EmbedVars& v);

/// Projected + resampled token set for one media item ([N x D]).
Var embed_media(Tape& t, const EmbedVars& v, const ModelConfig& cfg, const SyntheticItem& item);

/// Concatenates per-set slot embeddings, appends the role marker, applies
/// the composer block. Output [(sum N_i + 1) x D].
Var toy_composer(Tape& t, const ComposerVars& c, const std::vector<Var>& resampled_sets,
                 Var marker);

struct ItemEmbedding {
  Var embedding;                 // [1 x E]
  std::vector<Var> media_sets;   // resampled media token sets feeding the diversity loss
};

/// Full pipeline for one retrieval sample side.
ItemEmbedding embed_sample(Tape& t, const EmbedVars& v, const ModelConfig& cfg,
                           const Dataset& ds, const RetrievalSample& s, bool as_query,
                           StmContext* stm = nullptr);

/// Plain average over composer states; the pooling ablation comparator.
Tensor mean_pool_baseline(const Tensor& hidden_states);

/// Pooling head on its own: resample states to the reference-count latents,
/// slice-embed, straight-through-select. Output [1 x L].
Var aswp_pool(Tape& t, Var hidden_states, const ResamplerVars& pool_resampler, Var slicers,
              Var refs, StmContext* stm = nullptr);

}  // namespace omniret
