#include "omniret/model.hpp"

#include <cmath>
#include <stdexcept>

namespace omniret {

void ModelConfig::validate() const {
  if (dim == 0 || enc_dim == 0 || latents == 0 || references == 0 || projections == 0)
    throw std::invalid_argument("model config: sizes must be positive");
  if (heads == 0 || dim % heads != 0)
    throw std::invalid_argument("model config: heads must divide dim");
  if (dim % 2 != 0) throw std::invalid_argument("model config: dim must be even");
  if (max_slots == 0) throw std::invalid_argument("model config: max_slots must be >= 1");
  if (modalities.empty()) throw std::invalid_argument("model config: no modalities");
}

ProjectorWeights ProjectorWeights::init(std::size_t in_dim, std::size_t out_dim, Rng& rng) {
  ProjectorWeights p;
  const double s1 = 1.0 / std::sqrt(static_cast<double>(in_dim));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(out_dim));
  p.w1 = Tensor::zeros({in_dim, out_dim});
  for (double& v : p.w1.mut_data()) v = rng.normal() * s1;
  p.b1 = Tensor::zeros({out_dim});
  p.w2 = Tensor::zeros({out_dim, out_dim});
  for (double& v : p.w2.mut_data()) v = rng.normal() * s2;
  p.b2 = Tensor::zeros({out_dim});
  return p;
}

ComposerParams ComposerParams::init(std::size_t d, std::size_t heads, std::size_t max_slots,
                                    Rng& rng) {
  ComposerParams c;
  c.block = BlockWeights::init(d, heads, rng);
  c.slot_embeddings = Tensor::zeros({max_slots, d});
  for (double& v : c.slot_embeddings.mut_data()) v = rng.normal() * 0.1;
  c.query_marker = Tensor::zeros({1, d});
  for (double& v : c.query_marker.mut_data()) v = rng.normal() * 0.1;
  c.candidate_marker = Tensor::zeros({1, d});
  for (double& v : c.candidate_marker.mut_data()) v = rng.normal() * 0.1;
  return c;
}

ModelParams ModelParams::init(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParams p;
  for (const std::string& m : cfg.modalities) {
    p.projectors.emplace(m, ProjectorWeights::init(cfg.enc_dim, cfg.dim, rng));
  }
  p.text_projector = ProjectorWeights::init(cfg.enc_dim, cfg.dim, rng);
  p.media_resampler = ResamplerParams::init(cfg.latents, cfg.dim, cfg.heads, cfg.modalities,
                                            cfg.t_max, rng);
  p.composer = ComposerParams::init(cfg.dim, cfg.heads, cfg.max_slots, rng);
  p.pool_resampler = ResamplerParams::init(cfg.references, cfg.dim, cfg.heads, {}, 1, rng);
  p.pool = SlicedPoolParams::init(cfg.references, cfg.projections, cfg.dim, rng);
  return p;
}

namespace {

void collect_projector(const std::string& prefix, ProjectorWeights& p, ParamGroup g,
                       std::vector<ParamRef>& out) {
  out.push_back({prefix + ".w1", &p.w1, g});
  out.push_back({prefix + ".b1", &p.b1, g});
  out.push_back({prefix + ".w2", &p.w2, g});
  out.push_back({prefix + ".b2", &p.b2, g});
}

void collect_block(const std::string& prefix, BlockWeights& b, ParamGroup g,
                   std::vector<ParamRef>& out) {
  out.push_back({prefix + ".wq", &b.wq, g});
  out.push_back({prefix + ".wk", &b.wk, g});
  out.push_back({prefix + ".wv", &b.wv, g});
  out.push_back({prefix + ".wo", &b.wo, g});
  out.push_back({prefix + ".ln_q_gain", &b.ln_q_gain, g});
  out.push_back({prefix + ".ln_q_shift", &b.ln_q_shift, g});
  out.push_back({prefix + ".ln_kv_gain", &b.ln_kv_gain, g});
  out.push_back({prefix + ".ln_kv_shift", &b.ln_kv_shift, g});
  out.push_back({prefix + ".ln_mlp_gain", &b.ln_mlp_gain, g});
  out.push_back({prefix + ".ln_mlp_shift", &b.ln_mlp_shift, g});
  out.push_back({prefix + ".mlp_w1", &b.mlp_w1, g});
  out.push_back({prefix + ".mlp_b1", &b.mlp_b1, g});
  out.push_back({prefix + ".mlp_w2", &b.mlp_w2, g});
  out.push_back({prefix + ".mlp_b2", &b.mlp_b2, g});
}

void collect_resampler(const std::string& prefix, ResamplerParams& r, ParamGroup g,
                       std::vector<ParamRef>& out) {
  out.push_back({prefix + ".shared_latents", &r.shared_latents, g});
  for (auto& [name, bank] : r.modality_latents) {
    out.push_back({prefix + ".modality_latents." + name, &bank, g});
  }
  collect_block(prefix + ".block0", r.block0, g, out);
  collect_block(prefix + ".block1", r.block1, g, out);
  out.push_back({prefix + ".frame_embeddings", &r.frame_embeddings, g});
}

}  // namespace

std::vector<ParamRef> collect_params(ModelParams& p) {
  std::vector<ParamRef> out;
  for (auto& [name, proj] : p.projectors) {
    collect_projector("projector." + name, proj, ParamGroup::kProjector, out);
  }
  collect_projector("projector.text", p.text_projector, ParamGroup::kProjector, out);
  collect_resampler("resampler", p.media_resampler, ParamGroup::kResampler, out);
  collect_block("composer.block", p.composer.block, ParamGroup::kComposer, out);
  out.push_back({"composer.slot_embeddings", &p.composer.slot_embeddings, ParamGroup::kComposer});
  out.push_back({"composer.query_marker", &p.composer.query_marker, ParamGroup::kComposer});
  out.push_back({"composer.candidate_marker", &p.composer.candidate_marker,
                 ParamGroup::kComposer});
  collect_resampler("pool.resampler", p.pool_resampler, ParamGroup::kPool, out);
  out.push_back({"pool.references", &p.pool.sliced_references, ParamGroup::kPool});
  out.push_back({"pool.slicers", &p.pool.slicers, ParamGroup::kPool});
  return out;
}

namespace {

ProjectorVars load_projector(Tape& t, const ProjectorWeights& p, bool trainable) {
  auto put = [&](const Tensor& x) { return trainable ? t.input(x) : t.constant(x); };
  return ProjectorVars{put(p.w1), put(p.b1), put(p.w2), put(p.b2)};
}

Var apply_projector(Var tokens, const ProjectorVars& p) {
  Var h = gelu(add_rowvec(matmul(tokens, p.w1), p.b1));
  return add_rowvec(matmul(h, p.w2), p.b2);
}

}  // namespace

EmbedVars load_model(Tape& t, const ModelParams& p, bool train_composer, bool train_rest) {
  EmbedVars v;
  for (const auto& [name, proj] : p.projectors) {
    v.projectors.emplace(name, load_projector(t, proj, train_rest));
  }
  v.text_projector = load_projector(t, p.text_projector, train_rest);
  v.media_resampler = load_resampler(t, p.media_resampler, train_rest);
  v.composer.block = load_block(t, p.composer.block, train_composer);
  auto put_c = [&](const Tensor& x) { return train_composer ? t.input(x) : t.constant(x); };
  v.composer.slot_embeddings = put_c(p.composer.slot_embeddings);
  v.composer.query_marker = put_c(p.composer.query_marker);
  v.composer.candidate_marker = put_c(p.composer.candidate_marker);
  v.pool_resampler = load_resampler(t, p.pool_resampler, train_rest);
  auto put_p = [&](const Tensor& x) { return train_rest ? t.input(x) : t.constant(x); };
  v.pool_slicers = put_p(p.pool.slicers);
  v.pool_refs = put_p(p.pool.sliced_references);
  return v;
}

namespace {

void collect_projector_vars(const std::string& prefix, const ProjectorVars& p,
                            std::vector<std::pair<std::string, Var>>& out) {
  out.emplace_back(prefix + ".w1", p.w1);
  out.emplace_back(prefix + ".b1", p.b1);
  out.emplace_back(prefix + ".w2", p.w2);
  out.emplace_back(prefix + ".b2", p.b2);
}

void collect_block_vars(const std::string& prefix, const BlockVars& b,
                        std::vector<std::pair<std::string, Var>>& out) {
  out.emplace_back(prefix + ".wq", b.wq);
  out.emplace_back(prefix + ".wk", b.wk);
  out.emplace_back(prefix + ".wv", b.wv);
  out.emplace_back(prefix + ".wo", b.wo);
  out.emplace_back(prefix + ".ln_q_gain", b.ln_q_gain);
  out.emplace_back(prefix + ".ln_q_shift", b.ln_q_shift);
  out.emplace_back(prefix + ".ln_kv_gain", b.ln_kv_gain);
  out.emplace_back(prefix + ".ln_kv_shift", b.ln_kv_shift);
  out.emplace_back(prefix + ".ln_mlp_gain", b.ln_mlp_gain);
  out.emplace_back(prefix + ".ln_mlp_shift", b.ln_mlp_shift);
  out.emplace_back(prefix + ".mlp_w1", b.mlp_w1);
  out.emplace_back(prefix + ".mlp_b1", b.mlp_b1);
  out.emplace_back(prefix + ".mlp_w2", b.mlp_w2);
  out.emplace_back(prefix + ".mlp_b2", b.mlp_b2);
}

void collect_resampler_vars(const std::string& prefix, const ResamplerVars& r,
                            std::vector<std::pair<std::string, Var>>& out) {
  out.emplace_back(prefix + ".shared_latents", r.shared_latents);
  for (const auto& [name, bank] : r.modality_latents) {
    out.emplace_back(prefix + ".modality_latents." + name, bank);
  }
  collect_block_vars(prefix + ".block0", r.block0, out);
  collect_block_vars(prefix + ".block1", r.block1, out);
  out.emplace_back(prefix + ".frame_embeddings", r.frame_embeddings);
}

}  // namespace

std::vector<std::pair<std::string, Var>> collect_vars(const EmbedVars& v) {
  std::vector<std::pair<std::string, Var>> out;
  for (const auto& [name, proj] : v.projectors) {
    collect_projector_vars("projector." + name, proj, out);
  }
  collect_projector_vars("projector.text", v.text_projector, out);
  collect_resampler_vars("resampler", v.media_resampler, out);
  collect_block_vars("composer.block", v.composer.block, out);
  out.emplace_back("composer.slot_embeddings", v.composer.slot_embeddings);
  out.emplace_back("composer.query_marker", v.composer.query_marker);
  out.emplace_back("composer.candidate_marker", v.composer.candidate_marker);
  collect_resampler_vars("pool.resampler", v.pool_resampler, out);
  out.emplace_back("pool.references", v.pool_refs);
  out.emplace_back("pool.slicers", v.pool_slicers);
  return out;
}

Var embed_media(Tape& t, const EmbedVars& v, const ModelConfig& cfg, const SyntheticItem& item) {
  auto proj_it = v.projectors.find(item.modality);
  if (proj_it == v.projectors.end()) {
    throw std::invalid_argument("embed_media: no projector for modality '" + item.modality + "'");
  }
  Var tokens = apply_projector(t.constant(item.tokens), proj_it->second);
  if (item.is_video()) {
    tokens = prepare_video_tokens(tokens, item.video_dims, cfg.video_target,
                                  v.media_resampler.frame_embeddings);
  }
  return resample(tokens, item.modality, v.media_resampler);
}

Var toy_composer(Tape& t, const ComposerVars& c, const std::vector<Var>& resampled_sets,
                 Var marker) {
  if (resampled_sets.empty()) throw std::invalid_argument("toy_composer: no input sets");
  const std::size_t slots = t.value(c.slot_embeddings).rows();
  if (resampled_sets.size() > slots) {
    throw std::invalid_argument("toy_composer: more input sets than slot embeddings");
  }
  std::vector<Var> tagged;
  tagged.reserve(resampled_sets.size() + 1);
  for (std::size_t i = 0; i < resampled_sets.size(); ++i) {
    Var slot = gather_rows(c.slot_embeddings, {i});
    tagged.push_back(add_rowvec(resampled_sets[i], reshape(slot, {t.value(slot).cols()})));
  }
  tagged.push_back(marker);
  Var states = concat_rows(tagged);
  return cross_attention_block(states, states, c.block);
}

Var aswp_pool(Tape& t, Var hidden_states, const ResamplerVars& pool_resampler, Var slicers,
              Var refs, StmContext* stm) {
  Var latents = resample_plain(hidden_states, pool_resampler);
  Var z = pswe_embed(latents, slicers, refs);
  return stm_select(z, stm);
}

ItemEmbedding embed_sample(Tape& t, const EmbedVars& v, const ModelConfig& cfg,
                           const Dataset& ds, const RetrievalSample& s, bool as_query,
                           StmContext* stm) {
  ItemEmbedding out;
  std::vector<Var> sets;
  if (as_query) {
    for (std::size_t idx : s.query_items) {
      Var r = embed_media(t, v, cfg, ds.items.at(idx));
      sets.push_back(r);
      out.media_sets.push_back(r);
    }
    if (s.composed) {
      // Modification vector: target prototype minus source prototype,
      // mapped through the text projector as a single token.
      const std::size_t d_enc = ds.config.enc_dim;
      Tensor diff = Tensor::zeros({1, d_enc});
      for (std::size_t j = 0; j < d_enc; ++j) {
        diff.mut_data()[j] = ds.prototypes[s.target_class * d_enc + j] -
                             ds.prototypes[s.source_class * d_enc + j];
      }
      sets.push_back(apply_projector(t.constant(std::move(diff)), v.text_projector));
    }
  } else {
    Var r = embed_media(t, v, cfg, ds.items.at(s.target_item));
    sets.push_back(r);
    out.media_sets.push_back(r);
  }
  Var marker = as_query ? v.composer.query_marker : v.composer.candidate_marker;
  Var states = toy_composer(t, v.composer, sets, marker);
  if (cfg.pooling == Pooling::kAswp) {
    out.embedding = aswp_pool(t, states, v.pool_resampler, v.pool_slicers, v.pool_refs, stm);
  } else {
    out.embedding = mean_rows(states);
  }
  return out;
}

Tensor mean_pool_baseline(const Tensor& hidden_states) {
  check_shape(hidden_states.rank() == 2 && hidden_states.rows() >= 1,
              "mean_pool_baseline: nonempty state matrix required");
  Tape t(false);
  return t.value(mean_rows(t.input(hidden_states)));
}

}  // namespace omniret
