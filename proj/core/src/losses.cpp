#include "omniret/losses.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace omniret {

void LossConfig::validate() const {
  if (!(tau > 0.0)) throw std::invalid_argument("loss config: tau must be > 0");
  if (beta < 0.0) throw std::invalid_argument("loss config: beta must be >= 0");
  if (eta < 0.0) throw std::invalid_argument("loss config: eta must be >= 0");
  if (!(gamma > 0.0)) throw std::invalid_argument("loss config: gamma must be > 0");
  if (diversity_dropout < 0.0 || diversity_dropout >= 1.0)
    throw std::invalid_argument("loss config: diversity_dropout must be in [0, 1)");
}

void SimilarityBatch::validate() const {
  if (query_count == 0) throw std::invalid_argument("similarity batch: empty batch");
  if (positive.size() != query_count || negatives.size() != query_count)
    throw std::invalid_argument("similarity batch: per-query structure size mismatch");
  const std::size_t n = negatives[0].size();
  for (std::size_t q = 0; q < query_count; ++q) {
    if (positive[q] >= candidate_count)
      throw std::invalid_argument("similarity batch: positive index out of range");
    if (negatives[q].size() != n)
      throw std::invalid_argument("similarity batch: negative set sizes differ across queries");
    for (std::size_t c : negatives[q]) {
      if (c >= candidate_count)
        throw std::invalid_argument("similarity batch: negative index out of range");
      if (c == positive[q])
        throw std::invalid_argument("similarity batch: positive listed among its own negatives");
    }
  }
}

double phi(const std::vector<double>& x, const std::vector<double>& y, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("phi: tau must be > 0");
  if (x.size() != y.size()) throw ShapeError("phi: length mismatch");
  const double nx = l2_norm(x), ny = l2_norm(y);
  if (nx == 0.0 || ny == 0.0) throw std::domain_error("phi: zero-norm vector");
  return dot(x, y) / (nx * ny * tau);
}

std::vector<double> hardneg_weights(const std::vector<double>& phi_negatives, double beta) {
  const std::size_t n = phi_negatives.size();
  std::vector<double> w(n);
  if (n == 0) return w;
  double mx = phi_negatives[0];
  for (double v : phi_negatives) mx = std::max(mx, v);
  double sum = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    w[i] = std::exp(beta * (phi_negatives[i] - mx));
    sum += w[i];
  }
  const double scale = static_cast<double>(n) / sum;
  for (double& v : w) v *= scale;
  return w;
}

Var similarity_matrix(Var queries, Var candidates, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("similarity_matrix: tau must be > 0");
  Var qn = l2_normalize_rows(queries);
  Var cn = l2_normalize_rows(candidates);
  return scale(matmul(qn, transpose(cn)), 1.0 / tau);
}

namespace {

Var zero_scalar(Tape& t) { return t.constant(Tensor({1}, {0.0})); }

std::vector<std::vector<std::size_t>> positive_columns(const SimilarityBatch& b) {
  std::vector<std::vector<std::size_t>> cols(b.query_count);
  for (std::size_t q = 0; q < b.query_count; ++q) cols[q] = {b.positive[q]};
  return cols;
}

}  // namespace

Var info_nce(Var queries, Var candidates, const SimilarityBatch& batch, const LossConfig& cfg) {
  cfg.validate();
  batch.validate();
  Tape& t = *queries.tape;
  const std::size_t n_neg = batch.negatives[0].size();
  if (n_neg == 0) return zero_scalar(t);

  Var sim = similarity_matrix(queries, candidates, cfg.tau);
  Var pos = gather_cols(sim, positive_columns(batch));  // [B x 1]
  Var neg = gather_cols(sim, batch.negatives);          // [B x |N|]
  // w = |N| * softmax(beta * phi-) per row; the positive's weight is 1 and
  // sits outside this renormalization.
  Var w = scale(softmax_rows(scale(neg, cfg.beta)), static_cast<double>(n_neg));
  // -log(e^{p} / (e^{p} + sum w e^{n})) = log1p(sum w e^{n - p})
  Var terms = mul(w, exp_elem(sub_colvec(neg, pos)));
  return mean_all(log1p_elem(sum_cols(terms)));
}

Var triplet_loss(Var queries, Var candidates, const SimilarityBatch& batch,
                 const LossConfig& cfg) {
  cfg.validate();
  batch.validate();
  Tape& t = *queries.tape;
  if (batch.negatives[0].empty()) return zero_scalar(t);
  const double tau = cfg.triplet_raw_cosine ? 1.0 : cfg.tau;
  Var sim = similarity_matrix(queries, candidates, tau);
  Var pos = gather_cols(sim, positive_columns(batch));
  Var neg = gather_cols(sim, batch.negatives);
  Var hinge = relu(add_scalar(sub_colvec(neg, pos), cfg.eta));
  return mean_all(sum_cols(hinge));
}

Var diversity_loss(Var resampled, const LossConfig& cfg,
                   const std::optional<Tensor>& dropout_mask) {
  cfg.validate();
  Tape& t = *resampled.tape;
  const Tensor& rv = t.value(resampled);
  check_shape(rv.rank() == 2, "diversity_loss: token matrix required");
  const std::size_t n = rv.rows();
  Var nrm = l2_normalize_rows(resampled);
  Var gram = matmul(nrm, transpose(nrm));
  Var off = sub_const(relu(gram), Tensor::identity(n));
  Var penalty = smooth_l1(off, cfg.gamma);
  // The mask subsamples the per-pair penalties with inverted scaling, which
  // keeps the expected loss equal to the dropout-free loss. Masking the
  // Gram entries before the (nonlinear) smooth-L1 would bias it.
  if (dropout_mask.has_value()) {
    check_shape(dropout_mask->same_shape(t.value(penalty)),
                "diversity_loss: mask shape mismatch");
    penalty = mul_const(penalty, *dropout_mask);
  }
  return scale(sum_all(penalty), 1.0 / static_cast<double>(n * n));
}

Var total_loss(Var queries, Var candidates, const SimilarityBatch& batch,
               const std::vector<Var>& resampled_sets, const LossConfig& cfg,
               const std::vector<Tensor>* dropout_masks) {
  Var loss = info_nce(queries, candidates, batch, cfg);
  if (cfg.mu1 != 0.0) {
    loss = add(loss, scale(triplet_loss(queries, candidates, batch, cfg), cfg.mu1));
  }
  if (cfg.mu2 != 0.0 && !resampled_sets.empty()) {
    if (dropout_masks != nullptr && dropout_masks->size() != resampled_sets.size())
      throw std::invalid_argument("total_loss: one dropout mask per media set required");
    Var div_sum = diversity_loss(resampled_sets[0], cfg,
                                 dropout_masks ? std::optional<Tensor>((*dropout_masks)[0])
                                               : std::nullopt);
    for (std::size_t i = 1; i < resampled_sets.size(); ++i) {
      div_sum = add(div_sum, diversity_loss(resampled_sets[i], cfg,
                                            dropout_masks
                                                ? std::optional<Tensor>((*dropout_masks)[i])
                                                : std::nullopt));
    }
    loss = add(loss, scale(div_sum, cfg.mu2 / static_cast<double>(resampled_sets.size())));
  }
  return loss;
}

Tensor draw_dropout_mask(std::size_t rows, std::size_t cols, double rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0)
    throw std::invalid_argument("dropout rate must be in [0, 1)");
  Tensor mask = Tensor::zeros({rows, cols});
  const double keep_scale = 1.0 / (1.0 - rate);
  for (double& v : mask.mut_data()) v = rng.uniform() >= rate ? keep_scale : 0.0;
  return mask;
}

double info_nce_value(const Tensor& queries, const Tensor& candidates,
                      const SimilarityBatch& batch, const LossConfig& cfg) {
  Tape t(false);
  return t.value(info_nce(t.input(queries), t.input(candidates), batch, cfg))[0];
}

double triplet_loss_value(const Tensor& queries, const Tensor& candidates,
                          const SimilarityBatch& batch, const LossConfig& cfg) {
  Tape t(false);
  return t.value(triplet_loss(t.input(queries), t.input(candidates), batch, cfg))[0];
}

double diversity_loss_value(const Tensor& resampled, const LossConfig& cfg,
                            const std::optional<Tensor>& dropout_mask) {
  Tape t(false);
  return t.value(diversity_loss(t.input(resampled), cfg, dropout_mask))[0];
}

double total_loss_value(const Tensor& queries, const Tensor& candidates,
                        const SimilarityBatch& batch, const std::vector<Tensor>& resampled_sets,
                        const LossConfig& cfg, const std::vector<Tensor>* dropout_masks) {
  Tape t(false);
  std::vector<Var> sets;
  sets.reserve(resampled_sets.size());
  for (const Tensor& m : resampled_sets) sets.push_back(t.input(m));
  return t.value(
      total_loss(t.input(queries), t.input(candidates), batch, sets, cfg, dropout_masks))[0];
}

}  // namespace omniret
