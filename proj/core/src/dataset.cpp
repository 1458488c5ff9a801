#include "omniret/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace omniret {

void DatasetConfig::validate() const {
  if (classes < 2) throw std::invalid_argument("dataset: need at least 2 classes");
  if (per_class < 1) throw std::invalid_argument("dataset: per_class must be >= 1");
  if (modalities.empty()) throw std::invalid_argument("dataset: no modalities");
  if (tokens_per_item < 1) throw std::invalid_argument("dataset: tokens_per_item must be >= 1");
  if (enc_dim < 1) throw std::invalid_argument("dataset: enc_dim must be >= 1");
  if (holdout_per_class >= per_class)
    throw std::invalid_argument("dataset: holdout must leave at least one training item");
  for (std::size_t v : video_grid) {
    if (v == 0) throw std::invalid_argument("dataset: video grid dims must be >= 1");
  }
}

std::size_t Dataset::modality_ordinal(const std::string& m) const {
  for (std::size_t i = 0; i < config.modalities.size(); ++i) {
    if (config.modalities[i] == m) return i;
  }
  throw std::invalid_argument("dataset: unknown modality '" + m + "'");
}

std::size_t Dataset::index_of(std::size_t cls, const std::string& modality,
                              std::size_t k) const {
  if (cls >= config.classes || k >= config.per_class)
    throw std::out_of_range("dataset: item coordinates out of range");
  const std::size_t m = modality_ordinal(modality);
  return (cls * config.modalities.size() + m) * config.per_class + k;
}

Dataset gen_dataset(const DatasetConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Dataset ds;
  ds.config = cfg;
  Rng rng(seed);

  ds.prototypes = Tensor::zeros({cfg.classes, cfg.enc_dim});
  for (double& v : ds.prototypes.mut_data()) v = rng.normal();
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    double* row = ds.prototypes.mut_data().data() + c * cfg.enc_dim;
    double n = 0.0;
    for (std::size_t j = 0; j < cfg.enc_dim; ++j) n += row[j] * row[j];
    n = std::sqrt(n);
    for (std::size_t j = 0; j < cfg.enc_dim; ++j) row[j] /= n;
  }

  // SNR guard: noise must stay below the smallest prototype separation.
  double min_dist = std::numeric_limits<double>::infinity();
  for (std::size_t a = 0; a < cfg.classes; ++a) {
    for (std::size_t b = a + 1; b < cfg.classes; ++b) {
      double d2 = 0.0;
      for (std::size_t j = 0; j < cfg.enc_dim; ++j) {
        const double d = ds.prototypes[a * cfg.enc_dim + j] - ds.prototypes[b * cfg.enc_dim + j];
        d2 += d * d;
      }
      min_dist = std::min(min_dist, std::sqrt(d2));
    }
  }
  if (!(cfg.noise_scale < min_dist)) {
    throw std::invalid_argument("dataset: noise scale " + std::to_string(cfg.noise_scale) +
                                " is not below the minimum prototype distance " +
                                std::to_string(min_dist));
  }

  // Random orthogonal transforms (Gram-Schmidt on a Gaussian matrix), so
  // every modality view is an isometry of the prototype space.
  for (const std::string& m : cfg.modalities) {
    const std::size_t d = cfg.enc_dim;
    Tensor a = Tensor::zeros({d, d});
    for (double& v : a.mut_data()) v = rng.normal();
    for (std::size_t i = 0; i < d; ++i) {
      double* row = a.mut_data().data() + i * d;
      for (std::size_t prev = 0; prev < i; ++prev) {
        const double* prow = a.data().data() + prev * d;
        double proj = 0.0;
        for (std::size_t j = 0; j < d; ++j) proj += row[j] * prow[j];
        for (std::size_t j = 0; j < d; ++j) row[j] -= proj * prow[j];
      }
      double norm = 0.0;
      for (std::size_t j = 0; j < d; ++j) norm += row[j] * row[j];
      norm = std::sqrt(norm);
      if (norm < 1e-12) throw std::runtime_error("dataset: degenerate orthogonalization");
      for (std::size_t j = 0; j < d; ++j) row[j] /= norm;
    }
    ds.modality_transforms.emplace(m, std::move(a));
  }

  ds.items.reserve(cfg.classes * cfg.modalities.size() * cfg.per_class);
  for (std::size_t c = 0; c < cfg.classes; ++c) {
    for (const std::string& m : cfg.modalities) {
      const Tensor& transform = ds.modality_transforms.at(m);
      // base = prototype row times the modality transform
      std::vector<double> base(cfg.enc_dim, 0.0);
      for (std::size_t i = 0; i < cfg.enc_dim; ++i) {
        const double p = ds.prototypes[c * cfg.enc_dim + i];
        for (std::size_t j = 0; j < cfg.enc_dim; ++j)
          base[j] += p * transform[i * cfg.enc_dim + j];
      }
      const bool video = (m == "video");
      const std::size_t tokens =
          video ? cfg.video_grid[0] * cfg.video_grid[1] * cfg.video_grid[2]
                : cfg.tokens_per_item;
      for (std::size_t k = 0; k < cfg.per_class; ++k) {
        SyntheticItem item;
        item.class_id = c;
        item.modality = m;
        if (video) item.video_dims = cfg.video_grid;
        item.tokens = Tensor::zeros({tokens, cfg.enc_dim});
        for (std::size_t tk = 0; tk < tokens; ++tk) {
          double* row = item.tokens.mut_data().data() + tk * cfg.enc_dim;
          for (std::size_t j = 0; j < cfg.enc_dim; ++j)
            row[j] = base[j] + cfg.noise_scale * rng.normal();
        }
        ds.items.push_back(std::move(item));
      }
    }
  }
  return ds;
}

BatchSampler::BatchSampler(const Dataset& dataset, std::vector<TaskSpec> tasks,
                           std::size_t batch_size, std::size_t tasks_per_batch,
                           std::size_t datasets_per_task, std::size_t shards_per_task,
                           std::uint64_t seed)
    : dataset_(&dataset),
      tasks_(std::move(tasks)),
      batch_size_(batch_size),
      tasks_per_batch_(tasks_per_batch),
      datasets_per_task_(datasets_per_task),
      shards_per_task_(shards_per_task),
      seed_(seed) {
  if (tasks_.empty()) throw std::invalid_argument("sampler: no tasks");
  if (tasks_per_batch_ == 0 || tasks_per_batch_ > tasks_.size())
    throw std::invalid_argument("sampler: tasks_per_batch must be in [1, task count]");
  if (batch_size_ % tasks_per_batch_ != 0)
    throw std::invalid_argument("sampler: batch_size must be divisible by tasks_per_batch");
  if (shards_per_task_ == 0 || datasets_per_task_ == 0 ||
      datasets_per_task_ > shards_per_task_)
    throw std::invalid_argument("sampler: datasets_per_task must be in [1, shard count]");
  if (shards_per_task_ > dataset.config.classes)
    throw std::invalid_argument("sampler: more shards than classes");
  for (const TaskSpec& t : tasks_) {
    if (t.query_modalities.empty())
      throw std::invalid_argument("sampler: task '" + t.name + "' has no query modalities");
    dataset.modality_ordinal(t.target_modality);
    for (const std::string& m : t.query_modalities) dataset.modality_ordinal(m);
    const bool same_modality_uni =
        !t.composed && t.query_modalities.size() == 1 &&
        t.query_modalities[0] == t.target_modality;
    if (same_modality_uni && dataset.train_per_class() < 2)
      throw std::invalid_argument("sampler: uni-modal task needs >= 2 training items per class");
  }
}

RetrievalSample BatchSampler::draw_sample(std::size_t task_id, std::size_t cls,
                                          Rng& rng) const {
  const TaskSpec& task = tasks_[task_id];
  const Dataset& ds = *dataset_;
  RetrievalSample s;
  s.task_id = task_id;
  s.composed = task.composed;
  s.source_class = cls;
  s.target_class = task.composed ? (cls + task.class_shift) % ds.config.classes : cls;

  const std::size_t train_n = ds.train_per_class();
  std::size_t first_query_k = 0;
  for (std::size_t i = 0; i < task.query_modalities.size(); ++i) {
    const std::size_t k = rng.below(train_n);
    if (i == 0) first_query_k = k;
    s.query_items.push_back(ds.index_of(cls, task.query_modalities[i], k));
  }
  std::size_t target_k = rng.below(train_n);
  const bool same_pool = !task.composed && task.query_modalities.size() == 1 &&
                         task.query_modalities[0] == task.target_modality;
  if (same_pool) {
    // Target must be a different item of the same class.
    while (target_k == first_query_k) target_k = rng.below(train_n);
  }
  s.target_item = ds.index_of(s.target_class, task.target_modality, target_k);
  return s;
}

std::vector<RetrievalSample> BatchSampler::batch(std::uint64_t batch_index) const {
  Rng rng(mix_seed(seed_, batch_index, 0x5ba7c4));
  // Uniform without-replacement task selection.
  std::vector<std::size_t> order(tasks_.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  order.resize(tasks_per_batch_);

  // Classes are dealt without replacement across the whole batch while any
  // remain, so in-batch negatives are genuine negatives; the candidate of a
  // same-class sample would otherwise act as a heavily up-weighted false
  // negative in the contrastive denominator.
  std::vector<std::size_t> class_deck(dataset_->config.classes);
  std::iota(class_deck.begin(), class_deck.end(), std::size_t{0});
  rng.shuffle(class_deck);
  std::size_t dealt = 0;
  auto deal_class = [&](const std::vector<std::size_t>& shard_ids) {
    if (dealt == class_deck.size()) {
      rng.shuffle(class_deck);
      dealt = 0;
    }
    // Prefer a class from the task's selected shards; otherwise take the
    // next undealt class so batch-level uniqueness is preserved.
    for (std::size_t i = dealt; i < class_deck.size(); ++i) {
      const std::size_t shard = class_deck[i] % shards_per_task_;
      if (std::find(shard_ids.begin(), shard_ids.end(), shard) != shard_ids.end()) {
        std::swap(class_deck[dealt], class_deck[i]);
        return class_deck[dealt++];
      }
    }
    return class_deck[dealt++];
  };

  std::vector<RetrievalSample> out;
  out.reserve(batch_size_);
  const std::size_t quota = samples_per_task();
  for (std::size_t task_id : order) {
    // One or more class shards per task, without replacement.
    std::vector<std::size_t> shard_order(shards_per_task_);
    std::iota(shard_order.begin(), shard_order.end(), std::size_t{0});
    rng.shuffle(shard_order);
    shard_order.resize(datasets_per_task_);
    for (std::size_t i = 0; i < quota; ++i) {
      out.push_back(draw_sample(task_id, deal_class(shard_order), rng));
    }
  }
  return out;
}

}  // namespace omniret
