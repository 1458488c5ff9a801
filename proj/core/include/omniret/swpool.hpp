#pragma once

#include <cstdint>
#include <utility>
#include <vector>

#include "omniret/rng.hpp"
#include "omniret/tape.hpp"
#include "omniret/tensor.hpp"

namespace omniret {

/// Learnable state of the sliced-Wasserstein pooling layer.
/// sliced_references holds one learned scalar per (reference, projection)
/// pair; each column is an independent per-slice reference distribution.
/// Every slicer row lives on the unit sphere (re-normalized after each
/// optimizer update, see renormalize_slicers).
struct SlicedPoolParams {
  Tensor sliced_references;  // [S x L]
  Tensor slicers;            // [L x D], unit rows

  std::size_t reference_count() const { return sliced_references.rows(); }
  std::size_t projection_count() const { return sliced_references.cols(); }
  std::size_t input_dim() const { return slicers.cols(); }

  /// Gaussian references, Gaussian slicer rows scaled to unit norm.
  static SlicedPoolParams init(std::size_t s, std::size_t l, std::size_t d, Rng& rng);
};

/// Projects slicer rows back onto the unit sphere in place.
void renormalize_slicers(Tensor& slicers);

/// The S x L per-slice embedding: column l holds the sorted-coupled
/// differences between projected tokens and the l-th reference column.
struct SliceEmbedding {
  Tensor values;  // [S x L]
};

/// Dot products of every token row with one unit slicer direction.
std::vector<double> slice_project(const Tensor& tokens, const std::vector<double>& slicer);

/// 1D optimal-transport coupling by sort matching: the k-th smallest token
/// is paired with the k-th smallest reference, and the difference is
/// reported at the reference's original position.
std::vector<double> monge_coupling_1d(const std::vector<double>& sliced_tokens,
                                      const std::vector<double>& sliced_refs);

/// Exhaustive assignment oracle: minimizes sum of squared differences over
/// all permutations. Refuses inputs longer than 8.
std::pair<double, std::vector<std::size_t>> brute_force_w2(
    const std::vector<double>& sliced_tokens, const std::vector<double>& sliced_refs);

// ---- Taped forward/backward path ----

/// Z' for all slices at once; differentiable w.r.t. tokens, slicers, and
/// references with the coupling permutations frozen at the evaluation point.
Var pswe_embed(Var tokens, Var slicers, Var sliced_references);

/// Straight-through maximum surrogates captured on a base pass so that
/// finite-difference probes can differentiate a smooth stand-in whose
/// gradient equals the estimator's. Capture happens on the first pass after
/// begin_eval(); later passes replay.
class StmContext {
 public:
  /// Marks the start of one full evaluation of the enclosing computation.
  void begin_eval();

  // Internal to stm_select.
  bool replaying() const { return replay_; }
  void record(Tensor coeffs);        // K = m_hard - y at the base point
  const Tensor& next_coeffs();

 private:
  std::vector<Tensor> coeffs_;
  std::size_t cursor_ = 0;
  bool replay_ = false;
};

/// Pooled embedding h (shape [1 x L]). Forward: columnwise maximum, argmax
/// ties to the lowest row. Backward: gradient of the surrogate
/// sum_j (K_j + y_j) * z_jl with y = softmax of the column and
/// K = m_hard - y held at the evaluation point.
/// With a replaying StmContext the forward itself computes that smooth
/// surrogate (for finite-difference probes).
Var stm_select(Var slice_embedding, StmContext* ctx = nullptr);

// ---- Value-level convenience wrappers ----
SliceEmbedding pswe_embed_value(const Tensor& tokens, const SlicedPoolParams& params);
Tensor stm_select_value(const SliceEmbedding& z);

}  // namespace omniret
