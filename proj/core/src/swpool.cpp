#include "omniret/swpool.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace omniret {

SlicedPoolParams SlicedPoolParams::init(std::size_t s, std::size_t l, std::size_t d, Rng& rng) {
  check_shape(s >= 1 && l >= 1 && d >= 1, "sliced pool sizes must be >= 1");
  SlicedPoolParams p;
  p.sliced_references = Tensor::zeros({s, l});
  for (double& v : p.sliced_references.mut_data()) v = rng.normal();
  p.slicers = Tensor::zeros({l, d});
  for (double& v : p.slicers.mut_data()) v = rng.normal();
  renormalize_slicers(p.slicers);
  return p;
}

void renormalize_slicers(Tensor& slicers) {
  const std::size_t l = slicers.rows(), d = slicers.cols();
  for (std::size_t i = 0; i < l; ++i) {
    double* row = slicers.mut_data().data() + i * d;
    double s = 0.0;
    for (std::size_t j = 0; j < d; ++j) s += row[j] * row[j];
    const double r = std::sqrt(s);
    if (r == 0.0) throw std::domain_error("slicer row has zero norm");
    for (std::size_t j = 0; j < d; ++j) row[j] /= r;
  }
}

std::vector<double> slice_project(const Tensor& tokens, const std::vector<double>& slicer) {
  check_shape(tokens.rank() == 2, "slice_project: tokens must be a matrix");
  check_shape(tokens.cols() == slicer.size(),
              "slice_project: slicer length " + std::to_string(slicer.size()) +
                  " does not match token dim " + std::to_string(tokens.cols()));
  const std::size_t s = tokens.rows(), d = tokens.cols();
  std::vector<double> out(s);
  for (std::size_t i = 0; i < s; ++i) {
    double acc = 0.0;
    const double* row = tokens.data().data() + i * d;
    for (std::size_t j = 0; j < d; ++j) acc += row[j] * slicer[j];
    out[i] = acc;
  }
  return out;
}

std::vector<double> monge_coupling_1d(const std::vector<double>& sliced_tokens,
                                      const std::vector<double>& sliced_refs) {
  check_shape(sliced_tokens.size() == sliced_refs.size(),
              "monge_coupling_1d: length mismatch");
  const std::size_t s = sliced_tokens.size();
  const std::vector<std::size_t> pi_z = argsort(sliced_tokens);
  const std::vector<std::size_t> pi_x = argsort(sliced_refs);
  const std::vector<std::size_t> rank_x = invert_permutation(pi_x);
  std::vector<double> out(s);
  for (std::size_t i = 0; i < s; ++i) out[i] = sliced_tokens[pi_z[rank_x[i]]] - sliced_refs[i];
  return out;
}

std::pair<double, std::vector<std::size_t>> brute_force_w2(
    const std::vector<double>& sliced_tokens, const std::vector<double>& sliced_refs) {
  check_shape(sliced_tokens.size() == sliced_refs.size(), "brute_force_w2: length mismatch");
  const std::size_t s = sliced_tokens.size();
  if (s > 8) throw std::invalid_argument("brute_force_w2: refused for more than 8 points");
  std::vector<std::size_t> perm(s);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::vector<std::size_t> best = perm;
  double best_cost = std::numeric_limits<double>::infinity();
  do {
    double cost = 0.0;
    for (std::size_t i = 0; i < s; ++i) {
      const double d = sliced_tokens[perm[i]] - sliced_refs[i];
      cost += d * d;
    }
    if (cost < best_cost) {
      best_cost = cost;
      best = perm;
    }
  } while (std::next_permutation(perm.begin(), perm.end()));
  return {best_cost, best};
}

namespace {

// Coupling indices for every column of projections against every column of
// references: idx[l][i] selects the projected-token row paired with
// reference i on slice l.
std::vector<std::vector<std::size_t>> coupling_indices(const Tensor& proj, const Tensor& refs) {
  const std::size_t s = proj.rows(), l = proj.cols();
  std::vector<std::vector<std::size_t>> idx(l);
  std::vector<double> pcol(s), rcol(s);
  for (std::size_t c = 0; c < l; ++c) {
    for (std::size_t i = 0; i < s; ++i) {
      pcol[i] = proj[i * l + c];
      rcol[i] = refs[i * l + c];
    }
    const std::vector<std::size_t> pi_z = argsort(pcol);
    const std::vector<std::size_t> rank_x = invert_permutation(argsort(rcol));
    idx[c].resize(s);
    for (std::size_t i = 0; i < s; ++i) idx[c][i] = pi_z[rank_x[i]];
  }
  return idx;
}

Tensor couple_value(const Tensor& proj, const Tensor& refs) {
  const std::size_t s = proj.rows(), l = proj.cols();
  const auto idx = coupling_indices(proj, refs);
  Tensor out = Tensor::zeros({s, l});
  for (std::size_t c = 0; c < l; ++c)
    for (std::size_t i = 0; i < s; ++i)
      out.mut_data()[i * l + c] = proj[idx[c][i] * l + c] - refs[i * l + c];
  return out;
}

// Z' = coupled(P, X') as one taped primitive; the permutations are a
// deterministic function of the parent values, so replay recomputes them
// and backward freezes them at the recorded point.
Var monge_couple_columns(Var proj, Var refs) {
  Tape& t = *proj.tape;
  const Tensor& pv = t.value(proj);
  const Tensor& rv = t.value(refs);
  check_shape(pv.same_shape(rv), "pswe_embed: projections " + pv.shape_str() +
                                     " vs references " + rv.shape_str());
  Tensor out = couple_value(pv, rv);
  return t.apply(
      std::move(out), {proj, refs},
      [](const std::vector<const Tensor*>& ps) { return couple_value(*ps[0], *ps[1]); },
      [](const Tensor& g, const std::vector<const Tensor*>& ps, const Tensor&,
         const std::vector<Tensor*>& pg) {
        const std::size_t s = ps[0]->rows(), l = ps[0]->cols();
        const auto idx = coupling_indices(*ps[0], *ps[1]);
        for (std::size_t c = 0; c < l; ++c) {
          for (std::size_t i = 0; i < s; ++i) {
            const double gv = g[i * l + c];
            if (pg[0]) pg[0]->mut_data()[idx[c][i] * l + c] += gv;
            if (pg[1]) pg[1]->mut_data()[i * l + c] -= gv;
          }
        }
      });
}

}  // namespace

Var pswe_embed(Var tokens, Var slicers, Var sliced_references) {
  Tape& t = *tokens.tape;
  const Tensor& tok = t.value(tokens);
  const Tensor& refs = t.value(sliced_references);
  check_shape(tok.rank() == 2, "pswe_embed: tokens must be a matrix");
  check_shape(tok.rows() == refs.rows(),
              "pswe_embed: token count " + std::to_string(tok.rows()) +
                  " does not match reference count " + std::to_string(refs.rows()));
  check_shape(t.value(slicers).cols() == tok.cols(), "pswe_embed: slicer dim mismatch");
  Var proj = matmul(tokens, transpose(slicers));  // [S x L]
  return monge_couple_columns(proj, sliced_references);
}

void StmContext::begin_eval() {
  if (!coeffs_.empty()) replay_ = true;
  cursor_ = 0;
}

void StmContext::record(Tensor coeffs) { coeffs_.push_back(std::move(coeffs)); }

const Tensor& StmContext::next_coeffs() {
  if (cursor_ >= coeffs_.size())
    throw std::logic_error("StmContext: more selections replayed than captured");
  return coeffs_[cursor_++];
}

namespace {

struct ColumnStats {
  std::vector<double> y;  // softmax of the column
  std::size_t arg = 0;    // argmax, lowest row on ties
};

ColumnStats column_softmax(const Tensor& z, std::size_t col) {
  const std::size_t s = z.rows(), l = z.cols();
  ColumnStats st;
  st.y.resize(s);
  double mx = z[col];
  st.arg = 0;
  for (std::size_t i = 1; i < s; ++i) {
    const double v = z[i * l + col];
    if (v > mx) {
      mx = v;
      st.arg = i;
    }
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < s; ++i) {
    st.y[i] = std::exp(z[i * l + col] - mx);
    sum += st.y[i];
  }
  for (std::size_t i = 0; i < s; ++i) st.y[i] /= sum;
  return st;
}

Tensor stm_hard_value(const Tensor& z) {
  const std::size_t s = z.rows(), l = z.cols();
  Tensor h = Tensor::zeros({1, l});
  for (std::size_t c = 0; c < l; ++c) {
    double mx = z[c];
    for (std::size_t i = 1; i < s; ++i) mx = std::max(mx, z[i * l + c]);
    h.mut_data()[c] = mx;
  }
  return h;
}

Tensor stm_surrogate_value(const Tensor& z, const Tensor& coeffs) {
  const std::size_t s = z.rows(), l = z.cols();
  Tensor h = Tensor::zeros({1, l});
  for (std::size_t c = 0; c < l; ++c) {
    const ColumnStats st = column_softmax(z, c);
    double acc = 0.0;
    for (std::size_t i = 0; i < s; ++i)
      acc += (coeffs[i * l + c] + st.y[i]) * z[i * l + c];
    h.mut_data()[c] = acc;
  }
  return h;
}

// d/dz_k of sum_j (K_j + y_j(z)) z_j = K_k + y_k + y_k (z_k - <z, y>).
void stm_surrogate_backward(const Tensor& g, const Tensor& z, const Tensor& coeffs,
                            Tensor* dz) {
  const std::size_t s = z.rows(), l = z.cols();
  for (std::size_t c = 0; c < l; ++c) {
    const ColumnStats st = column_softmax(z, c);
    double zy = 0.0;
    for (std::size_t i = 0; i < s; ++i) zy += z[i * l + c] * st.y[i];
    const double gc = g[c];
    for (std::size_t i = 0; i < s; ++i) {
      dz->mut_data()[i * l + c] +=
          gc * (coeffs[i * l + c] + st.y[i] + st.y[i] * (z[i * l + c] - zy));
    }
  }
}

}  // namespace

Var stm_select(Var slice_embedding, StmContext* ctx) {
  Tape& t = *slice_embedding.tape;
  const Tensor& z = t.value(slice_embedding);
  check_shape(z.rank() == 2, "stm_select: slice embedding must be a matrix");
  const std::size_t s = z.rows(), l = z.cols();

  if (ctx != nullptr && ctx->replaying()) {
    Tensor coeffs = ctx->next_coeffs();
    check_shape(coeffs.same_shape(z), "stm_select: replayed coefficients shape mismatch");
    Tensor out = stm_surrogate_value(z, coeffs);
    return t.apply(
        std::move(out), {slice_embedding},
        [coeffs](const std::vector<const Tensor*>& ps) {
          return stm_surrogate_value(*ps[0], coeffs);
        },
        [coeffs](const Tensor& g, const std::vector<const Tensor*>& ps, const Tensor&,
                 const std::vector<Tensor*>& pg) {
          if (pg[0]) stm_surrogate_backward(g, *ps[0], coeffs, pg[0]);
        });
  }

  if (ctx != nullptr) {
    // Capture pass: freeze K = m_hard - y for later surrogate replays.
    Tensor coeffs = Tensor::zeros({s, l});
    for (std::size_t c = 0; c < l; ++c) {
      const ColumnStats st = column_softmax(z, c);
      for (std::size_t i = 0; i < s; ++i)
        coeffs.mut_data()[i * l + c] = (i == st.arg ? 1.0 : 0.0) - st.y[i];
    }
    ctx->record(std::move(coeffs));
  }

  Tensor out = stm_hard_value(z);
  return t.apply(
      std::move(out), {slice_embedding},
      [](const std::vector<const Tensor*>& ps) { return stm_hard_value(*ps[0]); },
      [](const Tensor& g, const std::vector<const Tensor*>& ps, const Tensor&,
         const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        const Tensor& zv = *ps[0];
        const std::size_t rows = zv.rows(), cols = zv.cols();
        for (std::size_t c = 0; c < cols; ++c) {
          const ColumnStats st = column_softmax(zv, c);
          double zy = 0.0;
          for (std::size_t i = 0; i < rows; ++i) zy += zv[i * cols + c] * st.y[i];
          const double gc = g[c];
          for (std::size_t i = 0; i < rows; ++i) {
            const double hard = (i == st.arg) ? 1.0 : 0.0;
            pg[0]->mut_data()[i * cols + c] +=
                gc * (hard + st.y[i] * (zv[i * cols + c] - zy));
          }
        }
      });
}

SliceEmbedding pswe_embed_value(const Tensor& tokens, const SlicedPoolParams& params) {
  Tape t(false);
  Var z = pswe_embed(t.input(tokens), t.input(params.slicers),
                     t.input(params.sliced_references));
  return SliceEmbedding{t.value(z)};
}

Tensor stm_select_value(const SliceEmbedding& z) {
  Tape t(false);
  Var h = stm_select(t.input(z.values));
  return t.value(h);
}

}  // namespace omniret
