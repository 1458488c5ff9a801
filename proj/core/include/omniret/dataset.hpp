#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "omniret/rng.hpp"
#include "omniret/tensor.hpp"

namespace omniret {

/// One synthetic media item: tokens are (class prototype x modality
/// transform) + per-token Gaussian noise. Video items carry grid dims and
/// store voxels t-major as rows.
struct SyntheticItem {
  std::size_t class_id = 0;
  std::string modality;
  Tensor tokens;  // [M x D_enc]; for video, [(T*H*W) x D_enc]
  std::array<std::size_t, 3> video_dims{0, 0, 0};

  bool is_video() const { return video_dims[0] > 0; }
};

struct DatasetConfig {
  std::size_t classes = 32;
  std::size_t per_class = 20;  // items per (class, modality)
  std::vector<std::string> modalities = {"image", "audio", "state"};
  std::size_t tokens_per_item = 6;
  std::size_t enc_dim = 24;
  double noise_scale = 0.1;
  std::array<std::size_t, 3> video_grid = {2, 2, 2};
  std::size_t holdout_per_class = 5;  // trailing intra-class indices held out

  void validate() const;
};

struct Dataset {
  DatasetConfig config;
  Tensor prototypes;                                 // [classes x D_enc], unit rows
  std::map<std::string, Tensor> modality_transforms; // [D_enc x D_enc]
  std::vector<SyntheticItem> items;

  std::size_t modality_ordinal(const std::string& m) const;
  /// Items are laid out ((class * modalities) + modality) * per_class + k.
  std::size_t index_of(std::size_t cls, const std::string& modality, std::size_t k) const;
  std::size_t train_per_class() const {
    return config.per_class - config.holdout_per_class;
  }
};

/// Deterministic under seed; same-class items share one prototype across
/// modalities; refuses configurations whose noise scale reaches the minimum
/// prototype separation.
Dataset gen_dataset(const DatasetConfig& cfg, std::uint64_t seed);

/// One retrieval task: queries combine one item per listed modality (same
/// class), plus a class-shifting modification vector when composed; the
/// target is an item of the target modality.
struct TaskSpec {
  std::string name;
  std::vector<std::string> query_modalities;
  std::string target_modality;
  bool composed = false;
  std::size_t class_shift = 0;  // composed: target class = (class + shift) % classes
};

struct RetrievalSample {
  std::size_t task_id = 0;
  std::vector<std::size_t> query_items;  // indices into Dataset::items
  std::size_t target_item = 0;
  bool composed = false;
  std::size_t source_class = 0;
  std::size_t target_class = 0;
};

/// Task-balanced batch stream: every batch selects tasks_per_batch tasks
/// uniformly without replacement and draws exactly
/// batch_size / tasks_per_batch training samples from each, restricted to
/// datasets_per_task class shards. Batches are a pure function of
/// (seed, batch_index).
class BatchSampler {
 public:
  BatchSampler(const Dataset& dataset, std::vector<TaskSpec> tasks, std::size_t batch_size,
               std::size_t tasks_per_batch, std::size_t datasets_per_task,
               std::size_t shards_per_task, std::uint64_t seed);

  std::vector<RetrievalSample> batch(std::uint64_t batch_index) const;

  const std::vector<TaskSpec>& tasks() const { return tasks_; }
  std::size_t samples_per_task() const { return batch_size_ / tasks_per_batch_; }

 private:
  RetrievalSample draw_sample(std::size_t task_id, std::size_t cls, Rng& rng) const;

  const Dataset* dataset_;
  std::vector<TaskSpec> tasks_;
  std::size_t batch_size_, tasks_per_batch_, datasets_per_task_, shards_per_task_;
  std::uint64_t seed_;
};

}  // namespace omniret
