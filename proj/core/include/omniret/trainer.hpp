#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "omniret/checkpoint.hpp"
#include "omniret/dataset.hpp"
#include "omniret/losses.hpp"
#include "omniret/metrics.hpp"
#include "omniret/model.hpp"

namespace omniret {

struct StageConfig {
  std::size_t steps = 300;
  double lr = 3e-3;
  double min_lr = 3e-4;
  std::size_t warmup = 20;
  std::size_t accum = 1;  // micro-batches averaged per optimizer step
  std::size_t tasks_per_batch = 4;
  std::size_t batch_size = 32;
};

struct TrainConfig {
  StageConfig stage1;
  StageConfig stage2{100, 1e-3, 0.0, 0, 2, 4, 32};
  double weight_decay = 0.0;
  double grad_clip = 1.0;  // global L2 norm cap; 0 disables
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::size_t datasets_per_task = 2;
  std::size_t shards_per_task = 4;  // class shards standing in for datasets
  std::size_t eval_k = 5;
  std::size_t log_every = 10;
};

/// Everything a run needs; the CLI config round-trips to this.
struct RunSettings {
  DatasetConfig data;
  ModelConfig model;
  LossConfig loss;
  TrainConfig train;
  std::vector<TaskSpec> stage1_tasks;
  std::vector<TaskSpec> stage2_tasks;
  std::uint64_t seed = 0;
  std::string out_dir;  // diagnostics; may be empty

  static RunSettings desk_default();
  void validate() const;
};

struct LossBreakdown {
  double total = 0.0;
  double contrastive = 0.0;
  double triplet = 0.0;
  double diversity = 0.0;
};

struct TrainState {
  ModelParams params;
  std::map<std::string, Tensor> opt_m, opt_v;
  std::uint64_t step = 0;  // completed optimizer steps
};

struct EvalReport {
  std::map<std::string, double> recall_per_task;
  double mean_recall = 0.0;
  double offdiag_abs_cos = 0.0;
};

/// Fraction of queries whose gold candidate ranks in the top k by cosine
/// similarity; ranking ties break toward the lower candidate index.
double recall_at_k(const Tensor& query_embs, const Tensor& cand_embs,
                   const std::vector<std::size_t>& gold, std::size_t k);

/// Two-stage training driver. Stage 1 trains projectors, resampler and the
/// pooling layer with the composer frozen; stage 2 unfreezes the composer
/// and applies gradient accumulation. One optimizer step per `step` count;
/// every batch, dropout mask and schedule value is a pure function of
/// (settings, step), so a restored checkpoint continues bit-identically.
class Trainer {
 public:
  explicit Trainer(RunSettings settings);

  const RunSettings& settings() const { return settings_; }
  const Dataset& dataset() const { return dataset_; }
  TrainState& state() { return state_; }
  const TrainState& state() const { return state_; }
  std::size_t total_steps() const;
  int stage_of(std::uint64_t step) const;
  double lr_at(std::uint64_t step) const;

  /// Runs from the current step to total_steps (or stop_after completed
  /// steps), streaming loss metrics and a final held-out evaluation.
  EvalReport run(MetricSink* sink, std::optional<std::uint64_t> stop_after = std::nullopt);

  /// One scheduled optimizer step (sampling, accumulation, update).
  LossBreakdown optimizer_step();

  /// Update from explicit micro-batches at an explicit rate; the
  /// fixed-batch convergence tests drive this directly.
  LossBreakdown step_with(const std::vector<std::vector<RetrievalSample>>& micro_batches,
                          double lr, bool train_composer, std::uint64_t mask_salt);

  /// Held-out evaluation over the stage-2 task list.
  EvalReport evaluate() const;

  /// Embeds the held-out split of one task; exposed for eval tooling.
  double task_recall(const TaskSpec& task) const;

  /// Mean off-diagonal |cosine| among resampled tokens over held-out media.
  double resampled_offdiag_abs_cos() const;

  Checkpoint make_checkpoint(const std::string& config_json) const;
  void restore(const Checkpoint& ckpt);

  const BatchSampler& stage_sampler(int stage) const;

 private:
  LossBreakdown micro_batch_pass(const std::vector<RetrievalSample>& batch, bool train_composer,
                                 std::uint64_t mask_key,
                                 std::map<std::string, Tensor>& grad_acc, double grad_weight);
  void apply_update(std::map<std::string, Tensor>& grads, double lr);
  void dump_diagnostics(const std::vector<RetrievalSample>& batch, const LossBreakdown& bd) const;
  Tensor embed_items_value(const std::vector<RetrievalSample>& samples, bool as_query) const;

  RunSettings settings_;
  Dataset dataset_;
  TrainState state_;
  std::vector<BatchSampler> samplers_;  // [0] stage 1, [1] stage 2
};

}  // namespace omniret
