#include "omniret/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

#include "omniret/threads.hpp"

namespace omniret {

namespace {
constexpr std::uint64_t kInitStream = 0x1a11;
constexpr std::uint64_t kMaskStream = 0xd207;
}  // namespace

RunSettings RunSettings::desk_default() {
  RunSettings s;
  s.stage1_tasks = {
      {"uni_image", {"image"}, "image", false, 0},
      {"uni_audio", {"audio"}, "audio", false, 0},
      {"bind_image_audio", {"image"}, "audio", false, 0},
      {"bind_audio_image", {"audio"}, "image", false, 0},
      {"bind_state_image", {"state"}, "image", false, 0},
      {"bind_image_state", {"image"}, "state", false, 0},
  };
  s.stage2_tasks = s.stage1_tasks;
  s.stage2_tasks.push_back({"comp_image_audio", {"image"}, "audio", true, 1});
  s.stage2_tasks.push_back({"comp_audio_image", {"audio"}, "image", true, 3});
  return s;
}

void RunSettings::validate() const {
  data.validate();
  model.validate();
  loss.validate();
  if (model.enc_dim != data.enc_dim)
    throw std::invalid_argument("settings: model enc_dim disagrees with dataset enc_dim");
  if (stage1_tasks.empty() || stage2_tasks.empty())
    throw std::invalid_argument("settings: task lists must be nonempty");
  for (const std::string& m : data.modalities) {
    if (std::find(model.modalities.begin(), model.modalities.end(), m) ==
        model.modalities.end())
      throw std::invalid_argument("settings: dataset modality '" + m + "' missing from model");
  }
}

double recall_at_k(const Tensor& query_embs, const Tensor& cand_embs,
                   const std::vector<std::size_t>& gold, std::size_t k) {
  check_shape(query_embs.rank() == 2 && cand_embs.rank() == 2,
              "recall_at_k: embedding matrices required");
  check_shape(query_embs.cols() == cand_embs.cols(), "recall_at_k: embedding dim mismatch");
  const std::size_t q_count = query_embs.rows();
  const std::size_t c_count = cand_embs.rows();
  if (k == 0 || k > c_count) throw std::invalid_argument("recall_at_k: k must be in [1, C]");
  if (gold.size() != q_count)
    throw std::invalid_argument("recall_at_k: one gold index per query required");
  for (std::size_t g : gold) {
    if (g >= c_count) throw std::out_of_range("recall_at_k: gold index out of range");
  }
  const std::size_t dim = query_embs.cols();
  std::vector<double> cnorm(c_count);
  for (std::size_t c = 0; c < c_count; ++c) {
    const double* row = cand_embs.data().data() + c * dim;
    double s = 0.0;
    for (std::size_t j = 0; j < dim; ++j) s += row[j] * row[j];
    cnorm[c] = std::sqrt(s);
  }
  std::size_t hits = 0;
  std::vector<double> sims(c_count);
  for (std::size_t q = 0; q < q_count; ++q) {
    const double* qrow = query_embs.data().data() + q * dim;
    double qs = 0.0;
    for (std::size_t j = 0; j < dim; ++j) qs += qrow[j] * qrow[j];
    const double qn = std::sqrt(qs);
    for (std::size_t c = 0; c < c_count; ++c) {
      const double* crow = cand_embs.data().data() + c * dim;
      double d = 0.0;
      for (std::size_t j = 0; j < dim; ++j) d += qrow[j] * crow[j];
      const double denom = qn * cnorm[c];
      sims[c] = denom > 0.0 ? d / denom : -2.0;
    }
    // Rank of the gold candidate with ties broken toward lower index.
    const std::size_t g = gold[q];
    std::size_t rank = 0;
    for (std::size_t c = 0; c < c_count; ++c) {
      if (sims[c] > sims[g] || (sims[c] == sims[g] && c < g)) ++rank;
    }
    if (rank < k) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(q_count);
}

Trainer::Trainer(RunSettings settings)
    : settings_(std::move(settings)), dataset_(gen_dataset(settings_.data, settings_.seed)) {
  settings_.validate();
  state_.params = ModelParams::init(settings_.model, mix_seed(settings_.seed, kInitStream));
  for (const ParamRef& ref : collect_params(state_.params)) {
    state_.opt_m.emplace(ref.name, Tensor::zeros(ref.tensor->dims()));
    state_.opt_v.emplace(ref.name, Tensor::zeros(ref.tensor->dims()));
  }
  samplers_.emplace_back(dataset_, settings_.stage1_tasks, settings_.train.stage1.batch_size,
                         settings_.train.stage1.tasks_per_batch,
                         settings_.train.datasets_per_task, settings_.train.shards_per_task,
                         mix_seed(settings_.seed, 1));
  samplers_.emplace_back(dataset_, settings_.stage2_tasks, settings_.train.stage2.batch_size,
                         settings_.train.stage2.tasks_per_batch,
                         settings_.train.datasets_per_task, settings_.train.shards_per_task,
                         mix_seed(settings_.seed, 2));
}

std::size_t Trainer::total_steps() const {
  return settings_.train.stage1.steps + settings_.train.stage2.steps;
}

int Trainer::stage_of(std::uint64_t step) const {
  return step < settings_.train.stage1.steps ? 1 : 2;
}

const BatchSampler& Trainer::stage_sampler(int stage) const {
  return samplers_.at(static_cast<std::size_t>(stage - 1));
}

double Trainer::lr_at(std::uint64_t step) const {
  const int stage = stage_of(step);
  const StageConfig& sc = stage == 1 ? settings_.train.stage1 : settings_.train.stage2;
  const std::uint64_t t = stage == 1 ? step : step - settings_.train.stage1.steps;
  if (sc.warmup > 0 && t < sc.warmup) {
    return sc.lr * static_cast<double>(t + 1) / static_cast<double>(sc.warmup);
  }
  if (sc.steps <= sc.warmup + 1) return sc.lr;
  const double progress = static_cast<double>(t - sc.warmup) /
                          static_cast<double>(sc.steps - 1 - sc.warmup);
  return sc.min_lr + 0.5 * (sc.lr - sc.min_lr) * (1.0 + std::cos(M_PI * progress));
}

LossBreakdown Trainer::micro_batch_pass(const std::vector<RetrievalSample>& batch,
                                        bool train_composer, std::uint64_t mask_key,
                                        std::map<std::string, Tensor>& grad_acc,
                                        double grad_weight) {
  if (batch.empty()) throw std::invalid_argument("trainer: empty batch");
  Tape tape(true);
  EmbedVars vars = load_model(tape, state_.params, train_composer, /*train_rest=*/true);

  std::vector<Var> query_rows, cand_rows, media_sets;
  for (const RetrievalSample& s : batch) {
    ItemEmbedding q = embed_sample(tape, vars, settings_.model, dataset_, s, /*as_query=*/true);
    query_rows.push_back(q.embedding);
    for (Var m : q.media_sets) media_sets.push_back(m);
  }
  for (const RetrievalSample& s : batch) {
    ItemEmbedding c = embed_sample(tape, vars, settings_.model, dataset_, s, /*as_query=*/false);
    cand_rows.push_back(c.embedding);
    for (Var m : c.media_sets) media_sets.push_back(m);
  }
  Var queries = concat_rows(query_rows);
  Var candidates = concat_rows(cand_rows);

  SimilarityBatch sb;
  sb.query_count = batch.size();
  sb.candidate_count = batch.size();
  sb.positive.resize(batch.size());
  sb.negatives.resize(batch.size());
  for (std::size_t q = 0; q < batch.size(); ++q) {
    sb.positive[q] = q;
    for (std::size_t c = 0; c < batch.size(); ++c) {
      if (c != q) sb.negatives[q].push_back(c);
    }
  }

  Rng mask_rng(mix_seed(settings_.seed, kMaskStream, mask_key));
  std::vector<Tensor> masks;
  masks.reserve(media_sets.size());
  const std::size_t n_lat = settings_.model.latents;
  for (std::size_t i = 0; i < media_sets.size(); ++i) {
    masks.push_back(
        draw_dropout_mask(n_lat, n_lat, settings_.loss.diversity_dropout, mask_rng));
  }

  Var contrastive = info_nce(queries, candidates, sb, settings_.loss);
  Var trip = triplet_loss(queries, candidates, sb, settings_.loss);
  Var div_mean = tape.constant(Tensor({1}, {0.0}));
  if (!media_sets.empty()) {
    Var acc = diversity_loss(media_sets[0], settings_.loss, masks[0]);
    for (std::size_t i = 1; i < media_sets.size(); ++i) {
      acc = add(acc, diversity_loss(media_sets[i], settings_.loss, masks[i]));
    }
    div_mean = scale(acc, 1.0 / static_cast<double>(media_sets.size()));
  }
  Var total = add(add(contrastive, scale(trip, settings_.loss.mu1)),
                  scale(div_mean, settings_.loss.mu2));

  LossBreakdown bd;
  bd.total = tape.value(total)[0];
  bd.contrastive = tape.value(contrastive)[0];
  bd.triplet = tape.value(trip)[0];
  bd.diversity = tape.value(div_mean)[0];
  if (!std::isfinite(bd.total)) {
    dump_diagnostics(batch, bd);
    throw std::runtime_error("trainer: non-finite loss at step " + std::to_string(state_.step));
  }

  tape.backward(total);
  // Accumulate gradients for trainable tensors by name. Model loading and
  // parameter collection enumerate in the same order.
  ModelParams& p = state_.params;
  std::vector<ParamRef> refs = collect_params(p);
  std::vector<std::pair<std::string, Var>> named = collect_vars(vars);
  if (refs.size() != named.size())
    throw std::logic_error("trainer: parameter/variable enumeration mismatch");
  for (std::size_t i = 0; i < refs.size(); ++i) {
    if (refs[i].name != named[i].first)
      throw std::logic_error("trainer: parameter name mismatch: " + refs[i].name + " vs " +
                             named[i].first);
    if (!tape.requires_grad(named[i].second)) continue;
    Tensor g = tape.grad(named[i].second);
    auto [it, inserted] = grad_acc.try_emplace(refs[i].name, Tensor::zeros(g.dims()));
    for (std::size_t j = 0; j < g.size(); ++j) it->second.mut_data()[j] += grad_weight * g[j];
  }
  return bd;
}

void Trainer::apply_update(std::map<std::string, Tensor>& grads, double lr) {
  if (lr == 0.0) return;  // no-op step; leaves parameters bit-identical
  const TrainConfig& tc = settings_.train;
  if (tc.grad_clip > 0.0) {
    double sq = 0.0;
    for (const auto& [name, g] : grads) {
      for (double v : g.data()) sq += v * v;
    }
    const double norm = std::sqrt(sq);
    if (norm > tc.grad_clip) {
      const double s = tc.grad_clip / norm;
      for (auto& [name, g] : grads) {
        for (double& v : g.mut_data()) v *= s;
      }
    }
  }
  const double t = static_cast<double>(state_.step + 1);
  const double bc1 = 1.0 - std::pow(tc.adam_beta1, t);
  const double bc2 = 1.0 - std::pow(tc.adam_beta2, t);
  for (const ParamRef& ref : collect_params(state_.params)) {
    auto git = grads.find(ref.name);
    if (git == grads.end()) continue;
    Tensor& m = state_.opt_m.at(ref.name);
    Tensor& v = state_.opt_v.at(ref.name);
    Tensor& p = *ref.tensor;
    const Tensor& g = git->second;
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double gj = g[j];
      m.mut_data()[j] = tc.adam_beta1 * m.mut_data()[j] + (1.0 - tc.adam_beta1) * gj;
      v.mut_data()[j] = tc.adam_beta2 * v.mut_data()[j] + (1.0 - tc.adam_beta2) * gj * gj;
      const double mhat = m[j] / bc1;
      const double vhat = v[j] / bc2;
      p.mut_data()[j] -= lr * (mhat / (std::sqrt(vhat) + tc.adam_eps) +
                               tc.weight_decay * p.mut_data()[j]);
    }
  }
  renormalize_slicers(state_.params.pool.slicers);
}

LossBreakdown Trainer::step_with(const std::vector<std::vector<RetrievalSample>>& micro_batches,
                                 double lr, bool train_composer, std::uint64_t mask_salt) {
  if (micro_batches.empty()) throw std::invalid_argument("trainer: no micro-batches");
  std::map<std::string, Tensor> grads;
  LossBreakdown mean;
  const double w = 1.0 / static_cast<double>(micro_batches.size());
  for (std::size_t a = 0; a < micro_batches.size(); ++a) {
    LossBreakdown bd = micro_batch_pass(micro_batches[a], train_composer,
                                        mix_seed(mask_salt, a), grads, w);
    mean.total += w * bd.total;
    mean.contrastive += w * bd.contrastive;
    mean.triplet += w * bd.triplet;
    mean.diversity += w * bd.diversity;
  }
  apply_update(grads, lr);
  state_.step += 1;
  return mean;
}

LossBreakdown Trainer::optimizer_step() {
  const std::uint64_t s = state_.step;
  if (s >= total_steps()) throw std::logic_error("trainer: schedule exhausted");
  const int stage = stage_of(s);
  const StageConfig& sc = stage == 1 ? settings_.train.stage1 : settings_.train.stage2;
  const BatchSampler& sampler = stage_sampler(stage);
  // Unique, resume-stable micro-batch indices.
  const std::uint64_t base =
      stage == 1 ? s * settings_.train.stage1.accum
                 : settings_.train.stage1.steps * settings_.train.stage1.accum +
                       (s - settings_.train.stage1.steps) * settings_.train.stage2.accum;
  std::vector<std::vector<RetrievalSample>> micro;
  for (std::size_t a = 0; a < sc.accum; ++a) micro.push_back(sampler.batch(base + a));
  return step_with(micro, lr_at(s), /*train_composer=*/stage == 2, /*mask_salt=*/base);
}

EvalReport Trainer::run(MetricSink* sink, std::optional<std::uint64_t> stop_after) {
  const std::uint64_t until = std::min<std::uint64_t>(
      total_steps(), stop_after.value_or(total_steps()));
  while (state_.step < until) {
    const std::uint64_t s = state_.step;
    const int stage = stage_of(s);
    LossBreakdown bd = optimizer_step();
    if (sink != nullptr &&
        (state_.step % settings_.train.log_every == 0 || state_.step == total_steps())) {
      const std::uint64_t seed = settings_.seed;
      sink->write({state_.step, stage, "all", "loss_total", bd.total, seed});
      sink->write({state_.step, stage, "all", "loss_contrastive", bd.contrastive, seed});
      sink->write({state_.step, stage, "all", "loss_triplet", bd.triplet, seed});
      sink->write({state_.step, stage, "all", "loss_diversity", bd.diversity, seed});
    }
  }
  if (state_.step < total_steps()) return {};  // stopped early; no final eval
  EvalReport report = evaluate();
  if (sink != nullptr) {
    const std::string rk = "recall@" + std::to_string(settings_.train.eval_k);
    for (const auto& [task, value] : report.recall_per_task) {
      sink->write({state_.step, 2, task, rk, value, settings_.seed});
    }
    sink->write({state_.step, 2, "all", rk + "_mean", report.mean_recall, settings_.seed});
    sink->write({state_.step, 2, "all", "offdiag_abs_cos", report.offdiag_abs_cos,
                 settings_.seed});
  }
  return report;
}

namespace {

// Held-out query/gold structure for one task: one query per held-out item
// of the first query modality; gold is the matching held-out item of the
// target modality (class possibly shifted for composed tasks).
struct EvalSet {
  std::vector<RetrievalSample> queries;
  std::vector<std::size_t> gold;           // index into candidate list
  std::vector<std::size_t> candidate_items;  // dataset item indices
};

EvalSet build_eval_set(const Dataset& ds, const TaskSpec& task) {
  EvalSet es;
  const std::size_t train_n = ds.train_per_class();
  const std::size_t holdout = ds.config.per_class - train_n;
  for (std::size_t c = 0; c < ds.config.classes; ++c) {
    for (std::size_t h = 0; h < holdout; ++h) {
      es.candidate_items.push_back(ds.index_of(c, task.target_modality, train_n + h));
    }
  }
  for (std::size_t c = 0; c < ds.config.classes; ++c) {
    const std::size_t target_class =
        task.composed ? (c + task.class_shift) % ds.config.classes : c;
    for (std::size_t h = 0; h < holdout; ++h) {
      RetrievalSample s;
      s.task_id = 0;
      s.composed = task.composed;
      s.source_class = c;
      s.target_class = target_class;
      for (const std::string& m : task.query_modalities) {
        s.query_items.push_back(ds.index_of(c, m, train_n + h));
      }
      s.target_item = ds.index_of(target_class, task.target_modality, train_n + h);
      es.queries.push_back(std::move(s));
      es.gold.push_back(target_class * holdout + h);
    }
  }
  return es;
}

}  // namespace

Tensor Trainer::embed_items_value(const std::vector<RetrievalSample>& samples,
                                  bool as_query) const {
  const std::size_t dim = settings_.model.embedding_dim();
  Tensor out = Tensor::zeros({samples.size(), dim});
  parallel_for(samples.size(), [&](std::size_t i) {
    Tape tape(false);
    EmbedVars vars = load_model(tape, state_.params, false, false);
    ItemEmbedding e = embed_sample(tape, vars, settings_.model, dataset_, samples[i], as_query);
    const Tensor& row = tape.value(e.embedding);
    std::copy(row.data().begin(), row.data().end(), out.mut_data().begin() + i * dim);
  });
  return out;
}

double Trainer::task_recall(const TaskSpec& task) const {
  const EvalSet es = build_eval_set(dataset_, task);
  Tensor queries = embed_items_value(es.queries, /*as_query=*/true);
  std::vector<RetrievalSample> cand_samples;
  cand_samples.reserve(es.candidate_items.size());
  for (std::size_t item : es.candidate_items) {
    RetrievalSample s;
    s.target_item = item;
    cand_samples.push_back(s);
  }
  Tensor cands = embed_items_value(cand_samples, /*as_query=*/false);
  return recall_at_k(queries, cands, es.gold, settings_.train.eval_k);
}

double Trainer::resampled_offdiag_abs_cos() const {
  const std::size_t train_n = dataset_.train_per_class();
  const std::size_t holdout = dataset_.config.per_class - train_n;
  std::vector<std::size_t> items;
  for (std::size_t c = 0; c < dataset_.config.classes; ++c) {
    for (const std::string& m : dataset_.config.modalities) {
      for (std::size_t h = 0; h < holdout; ++h) {
        items.push_back(dataset_.index_of(c, m, train_n + h));
      }
    }
  }
  std::vector<double> per_item(items.size(), 0.0);
  parallel_for(items.size(), [&](std::size_t i) {
    Tape tape(false);
    EmbedVars vars = load_model(tape, state_.params, false, false);
    Var set = embed_media(tape, vars, settings_.model, dataset_.items[items[i]]);
    const Tensor& m = tape.value(set);
    const std::size_t n = m.rows(), d = m.cols();
    std::vector<double> norms(n);
    for (std::size_t r = 0; r < n; ++r) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += m[r * d + j] * m[r * d + j];
      norms[r] = std::sqrt(s);
    }
    double acc = 0.0;
    std::size_t pairs = 0;
    for (std::size_t a = 0; a < n; ++a) {
      for (std::size_t b = a + 1; b < n; ++b) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) s += m[a * d + j] * m[b * d + j];
        const double denom = norms[a] * norms[b];
        acc += denom > 0.0 ? std::fabs(s / denom) : 0.0;
        ++pairs;
      }
    }
    per_item[i] = pairs > 0 ? acc / static_cast<double>(pairs) : 0.0;
  });
  double total = std::accumulate(per_item.begin(), per_item.end(), 0.0);
  return items.empty() ? 0.0 : total / static_cast<double>(items.size());
}

EvalReport Trainer::evaluate() const {
  EvalReport report;
  double sum = 0.0;
  for (const TaskSpec& task : settings_.stage2_tasks) {
    const double r = task_recall(task);
    report.recall_per_task[task.name] = r;
    sum += r;
  }
  report.mean_recall = sum / static_cast<double>(settings_.stage2_tasks.size());
  report.offdiag_abs_cos = resampled_offdiag_abs_cos();
  return report;
}

Checkpoint Trainer::make_checkpoint(const std::string& config_json) const {
  Checkpoint ckpt;
  ModelParams& p = const_cast<ModelParams&>(state_.params);
  for (const ParamRef& ref : collect_params(p)) {
    ckpt.tensors.emplace(ref.name, *ref.tensor);
    ckpt.tensors.emplace("opt.m." + ref.name, state_.opt_m.at(ref.name));
    ckpt.tensors.emplace("opt.v." + ref.name, state_.opt_v.at(ref.name));
  }
  ckpt.config_json = config_json;
  ckpt.step = state_.step;
  return ckpt;
}

void Trainer::restore(const Checkpoint& ckpt) {
  for (const ParamRef& ref : collect_params(state_.params)) {
    auto it = ckpt.tensors.find(ref.name);
    if (it == ckpt.tensors.end())
      throw std::runtime_error("checkpoint: missing tensor '" + ref.name + "'");
    if (!it->second.same_shape(*ref.tensor))
      throw std::runtime_error("checkpoint: shape mismatch for '" + ref.name + "'");
    *ref.tensor = it->second;
    state_.opt_m.at(ref.name) = ckpt.tensors.at("opt.m." + ref.name);
    state_.opt_v.at(ref.name) = ckpt.tensors.at("opt.v." + ref.name);
  }
  state_.step = ckpt.step;
}

void Trainer::dump_diagnostics(const std::vector<RetrievalSample>& batch,
                               const LossBreakdown& bd) const {
  if (settings_.out_dir.empty()) return;
  nlohmann::ordered_json j;
  j["step"] = state_.step;
  j["loss_total"] = bd.total;
  j["loss_contrastive"] = bd.contrastive;
  j["loss_triplet"] = bd.triplet;
  j["loss_diversity"] = bd.diversity;
  nlohmann::json samples = nlohmann::json::array();
  for (const RetrievalSample& s : batch) {
    samples.push_back({{"task", s.task_id},
                       {"query_items", s.query_items},
                       {"target_item", s.target_item},
                       {"composed", s.composed}});
  }
  j["batch"] = samples;
  std::ofstream os(settings_.out_dir + "/diagnostic_batch.json", std::ios::trunc);
  os << j.dump(2) << '\n';
}

}  // namespace omniret
