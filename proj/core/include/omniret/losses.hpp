#pragma once

#include <optional>
#include <vector>

#include "omniret/rng.hpp"
#include "omniret/tape.hpp"
#include "omniret/tensor.hpp"

namespace omniret {

/// Every scalar knob of the training objective.
struct LossConfig {
  double tau = 0.07;   // similarity temperature
  double beta = 0.5;   // hard-negative weighting sharpness
  double eta = 0.1;    // triplet margin
  double mu1 = 1.0;    // triplet weight
  double mu2 = 0.1;    // diversity weight
  double gamma = 0.5;  // smooth-L1 threshold
  double diversity_dropout = 0.5;
  // The margin comparison uses temperature-scaled similarities by default;
  // set to compare raw cosines instead.
  bool triplet_raw_cosine = false;

  void validate() const;
};

/// In-batch similarity structure for one step: which candidate is each
/// query's positive and which are its negatives. Negative lists share one
/// size across the batch and never contain the query's own positive.
struct SimilarityBatch {
  std::size_t query_count = 0;
  std::size_t candidate_count = 0;
  std::vector<std::size_t> positive;                // [B]
  std::vector<std::vector<std::size_t>> negatives;  // [B][|N|]

  void validate() const;
};

/// Temperature-scaled cosine similarity of two vectors.
double phi(const std::vector<double>& x, const std::vector<double>& y, double tau);

/// Renormalized exponential weights w_i = |N| e^{beta phi_i} / sum e^{beta phi_j}.
std::vector<double> hardneg_weights(const std::vector<double>& phi_negatives, double beta);

// ---- Taped losses (query/candidate embeddings live on the tape) ----

/// Temperature-scaled cosine similarity matrix [B x C].
Var similarity_matrix(Var queries, Var candidates, double tau);

Var info_nce(Var queries, Var candidates, const SimilarityBatch& batch, const LossConfig& cfg);
Var triplet_loss(Var queries, Var candidates, const SimilarityBatch& batch,
                 const LossConfig& cfg);

/// Diversity penalty on one resampled token set [N x D]. Rows are
/// L2-normalized here before the Gram product. dropout_mask, when given,
/// must be [N x N] with entries 0 or 1/(1 - p) (inverted scaling); without
/// a mask the loss is computed dropout-free.
Var diversity_loss(Var resampled, const LossConfig& cfg,
                   const std::optional<Tensor>& dropout_mask = std::nullopt);

/// info_nce + mu1 * triplet + mu2 * mean(diversity over the step's media
/// sets). masks, when present, must align with resampled_sets.
Var total_loss(Var queries, Var candidates, const SimilarityBatch& batch,
               const std::vector<Var>& resampled_sets, const LossConfig& cfg,
               const std::vector<Tensor>* dropout_masks = nullptr);

/// Bernoulli keep mask with inverted scaling, entries 0 or 1/(1-rate).
Tensor draw_dropout_mask(std::size_t rows, std::size_t cols, double rate, Rng& rng);

// ---- Value-level wrappers (tests, metrics) ----
double info_nce_value(const Tensor& queries, const Tensor& candidates,
                      const SimilarityBatch& batch, const LossConfig& cfg);
double triplet_loss_value(const Tensor& queries, const Tensor& candidates,
                          const SimilarityBatch& batch, const LossConfig& cfg);
double diversity_loss_value(const Tensor& resampled, const LossConfig& cfg,
                            const std::optional<Tensor>& dropout_mask = std::nullopt);
double total_loss_value(const Tensor& queries, const Tensor& candidates,
                        const SimilarityBatch& batch, const std::vector<Tensor>& resampled_sets,
                        const LossConfig& cfg,
                        const std::vector<Tensor>* dropout_masks = nullptr);

}  // namespace omniret
