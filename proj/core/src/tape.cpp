#include "omniret/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#include "omniret/threads.hpp"

namespace omniret {

namespace {

Tape& tape_of(Var v) {
  if (v.tape == nullptr || v.id < 0) throw std::logic_error("use of uninitialized Var");
  return *v.tape;
}

void same_tape(Var a, Var b) {
  if (a.tape != b.tape) throw std::logic_error("vars belong to different tapes");
}

constexpr double kInvSqrt2 = 0.7071067811865475244;
constexpr double kInvSqrt2Pi = 0.3989422804014326779;

double gelu_scalar(double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }
double gelu_deriv(double x) {
  const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
  const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
  return cdf + x * pdf;
}

}  // namespace

Var Tape::input(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = true;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::constant(Tensor value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = false;
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::apply(Tensor value, const std::vector<Var>& parents, ForwardFn fwd, BackwardFn bwd) {
  Node n;
  n.value = std::move(value);
  if (record_) {
    for (Var p : parents) {
      if (p.tape != this) throw std::logic_error("parent var from another tape");
      n.parents.push_back(p.id);
      n.requires_grad = n.requires_grad || nodes_[p.id].requires_grad;
    }
    n.forward = std::move(fwd);
    if (n.requires_grad) n.backward = std::move(bwd);
  }
  nodes_.push_back(std::move(n));
  return Var{this, static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::value(Var v) const {
  if (v.tape != this) throw std::logic_error("var from another tape");
  return nodes_.at(static_cast<std::size_t>(v.id)).value;
}

bool Tape::requires_grad(Var v) const {
  return nodes_.at(static_cast<std::size_t>(v.id)).requires_grad;
}

void Tape::backward(Var scalar_output) {
  if (!record_) throw std::logic_error("backward() on a non-recording tape");
  if (scalar_output.tape != this) throw std::logic_error("output var from another tape");
  const Tensor& ov = value(scalar_output);
  if (ov.size() != 1) throw std::invalid_argument("backward() requires a scalar output");
  grads_.assign(nodes_.size(), Tensor());
  grads_[scalar_output.id] = Tensor({1}, {1.0});
  for (int i = scalar_output.id; i >= 0; --i) {
    Node& n = nodes_[static_cast<std::size_t>(i)];
    if (grads_[static_cast<std::size_t>(i)].size() == 0 || !n.backward) continue;
    std::vector<const Tensor*> pvals;
    std::vector<Tensor*> pgrads;
    pvals.reserve(n.parents.size());
    pgrads.reserve(n.parents.size());
    for (int p : n.parents) {
      pvals.push_back(&nodes_[static_cast<std::size_t>(p)].value);
      if (nodes_[static_cast<std::size_t>(p)].requires_grad) {
        if (grads_[static_cast<std::size_t>(p)].size() == 0) {
          grads_[static_cast<std::size_t>(p)] =
              Tensor::zeros(nodes_[static_cast<std::size_t>(p)].value.dims());
        }
        pgrads.push_back(&grads_[static_cast<std::size_t>(p)]);
      } else {
        pgrads.push_back(nullptr);
      }
    }
    n.backward(grads_[static_cast<std::size_t>(i)], pvals, n.value, pgrads);
  }
}

Tensor Tape::grad(Var v) const {
  if (v.tape != this) throw std::logic_error("var from another tape");
  if (grads_.empty()) throw std::logic_error("grad() before backward()");
  const Tensor& g = grads_.at(static_cast<std::size_t>(v.id));
  if (g.size() == 0) return Tensor::zeros(nodes_[static_cast<std::size_t>(v.id)].value.dims());
  return g;
}

bool Tape::replay_matches_recorded() const {
  if (!record_) throw std::logic_error("replay on a non-recording tape");
  for (const Node& n : nodes_) {
    if (!n.forward) continue;
    std::vector<const Tensor*> pvals;
    pvals.reserve(n.parents.size());
    for (int p : n.parents) pvals.push_back(&nodes_[static_cast<std::size_t>(p)].value);
    Tensor redo = n.forward(pvals);
    if (!redo.same_shape(n.value)) return false;
    if (std::memcmp(redo.data().data(), n.value.data().data(),
                    redo.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

// ---------------------------------------------------------------------------
// Elementwise helpers

namespace {

using ScalarFn = double (*)(double);
using ScalarDeriv = double (*)(double x, double out);

Var unary_op(Var x, ScalarFn f, ScalarDeriv d) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  Tensor out = xv;
  for (double& v : out.mut_data()) v = f(v);
  return t.apply(
      std::move(out), {x},
      [f](const std::vector<const Tensor*>& ps) {
        Tensor o = *ps[0];
        for (double& v : o.mut_data()) v = f(v);
        return o;
      },
      [d](const Tensor& g, const std::vector<const Tensor*>& ps, const Tensor& val,
          const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        const Tensor& xval = *ps[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
          pg[0]->mut_data()[i] += g[i] * d(xval[i], val[i]);
        }
      });
}

}  // namespace

Var add(Var a, Var b) {
  same_tape(a, b);
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  check_shape(av.same_shape(bv), "add: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.mut_data()[i] += bv[i];
  return t.apply(
      std::move(out), {a, b},
      [](const std::vector<const Tensor*>& ps) {
        Tensor o = *ps[0];
        for (std::size_t i = 0; i < o.size(); ++i) o.mut_data()[i] += (*ps[1])[i];
        return o;
      },
      [](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
         const std::vector<Tensor*>& pg) {
        for (int side = 0; side < 2; ++side) {
          if (!pg[side]) continue;
          for (std::size_t i = 0; i < g.size(); ++i) pg[side]->mut_data()[i] += g[i];
        }
      });
}

Var sub(Var a, Var b) {
  same_tape(a, b);
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  check_shape(av.same_shape(bv), "sub: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.mut_data()[i] -= bv[i];
  return t.apply(
      std::move(out), {a, b},
      [](const std::vector<const Tensor*>& ps) {
        Tensor o = *ps[0];
        for (std::size_t i = 0; i < o.size(); ++i) o.mut_data()[i] -= (*ps[1])[i];
        return o;
      },
      [](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
         const std::vector<Tensor*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) pg[0]->mut_data()[i] += g[i];
        if (pg[1])
          for (std::size_t i = 0; i < g.size(); ++i) pg[1]->mut_data()[i] -= g[i];
      });
}

Var mul(Var a, Var b) {
  same_tape(a, b);
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  check_shape(av.same_shape(bv), "mul: shape mismatch " + av.shape_str() + " vs " + bv.shape_str());
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.mut_data()[i] *= bv[i];
  return t.apply(
      std::move(out), {a, b},
      [](const std::vector<const Tensor*>& ps) {
        Tensor o = *ps[0];
        for (std::size_t i = 0; i < o.size(); ++i) o.mut_data()[i] *= (*ps[1])[i];
        return o;
      },
      [](const Tensor& g, const std::vector<const Tensor*>& ps, const Tensor&,
         const std::vector<Tensor*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) pg[0]->mut_data()[i] += g[i] * (*ps[1])[i];
        if (pg[1])
          for (std::size_t i = 0; i < g.size(); ++i) pg[1]->mut_data()[i] += g[i] * (*ps[0])[i];
      });
}

Var scale(Var a, double c) {
  Tape& t = tape_of(a);
  Tensor out = t.value(a);
  for (double& v : out.mut_data()) v *= c;
  return t.apply(
      std::move(out), {a},
      [c](const std::vector<const Tensor*>& ps) {
        Tensor o = *ps[0];
        for (double& v : o.mut_data()) v *= c;
        return o;
      },
      [c](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
          const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) pg[0]->mut_data()[i] += g[i] * c;
      });
}

Var add_scalar(Var a, double c) {
  Tape& t = tape_of(a);
  Tensor out = t.value(a);
  for (double& v : out.mut_data()) v += c;
  return t.apply(
      std::move(out), {a},
      [c](const std::vector<const Tensor*>& ps) {
        Tensor o = *ps[0];
        for (double& v : o.mut_data()) v += c;
        return o;
      },
      [](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
         const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) pg[0]->mut_data()[i] += g[i];
      });
}

Var relu(Var x) {
  return unary_op(
      x, +[](double v) { return v > 0.0 ? v : 0.0; },
      +[](double xv, double) { return xv > 0.0 ? 1.0 : 0.0; });
}

Var exp_elem(Var x) {
  return unary_op(
      x, +[](double v) { return std::exp(v); }, +[](double, double out) { return out; });
}

Var log1p_elem(Var x) {
  return unary_op(
      x, +[](double v) { return std::log1p(v); },
      +[](double xv, double) { return 1.0 / (1.0 + xv); });
}

Var gelu(Var x) {
  return unary_op(
      x, +[](double v) { return gelu_scalar(v); },
      +[](double xv, double) { return gelu_deriv(xv); });
}

Var smooth_l1(Var x, double gamma) {
  if (!(gamma > 0.0)) throw std::invalid_argument("smooth_l1: gamma must be positive");
  Tape& t = tape_of(x);
  Tensor out = t.value(x);
  auto f = [gamma](double v) { return v < gamma ? 0.5 * v * v / gamma : v - 0.5 * gamma; };
  for (double& v : out.mut_data()) v = f(v);
  return t.apply(
      std::move(out), {x},
      [f](const std::vector<const Tensor*>& ps) {
        Tensor o = *ps[0];
        for (double& v : o.mut_data()) v = f(v);
        return o;
      },
      [gamma](const Tensor& g, const std::vector<const Tensor*>& ps, const Tensor&,
              const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        const Tensor& xv = *ps[0];
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double d = xv[i] < gamma ? xv[i] / gamma : 1.0;
          pg[0]->mut_data()[i] += g[i] * d;
        }
      });
}

Var sub_const(Var a, const Tensor& c) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  check_shape(av.same_shape(c), "sub_const: shape mismatch");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.mut_data()[i] -= c[i];
  Tensor cc = c;
  return t.apply(
      std::move(out), {a},
      [cc](const std::vector<const Tensor*>& ps) {
        Tensor o = *ps[0];
        for (std::size_t i = 0; i < o.size(); ++i) o.mut_data()[i] -= cc[i];
        return o;
      },
      [](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
         const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) pg[0]->mut_data()[i] += g[i];
      });
}

Var mul_const(Var a, const Tensor& c) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  check_shape(av.same_shape(c), "mul_const: shape mismatch");
  Tensor out = av;
  for (std::size_t i = 0; i < out.size(); ++i) out.mut_data()[i] *= c[i];
  Tensor cc = c;
  return t.apply(
      std::move(out), {a},
      [cc](const std::vector<const Tensor*>& ps) {
        Tensor o = *ps[0];
        for (std::size_t i = 0; i < o.size(); ++i) o.mut_data()[i] *= cc[i];
        return o;
      },
      [cc](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
           const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) pg[0]->mut_data()[i] += g[i] * cc[i];
      });
}

Var reshape(Var a, std::vector<std::size_t> dims) {
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  Tensor out(dims, av.data());
  std::vector<std::size_t> in_dims = av.dims();
  return t.apply(
      std::move(out), {a},
      [dims](const std::vector<const Tensor*>& ps) { return Tensor(dims, ps[0]->data()); },
      [in_dims](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
                const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < g.size(); ++i) pg[0]->mut_data()[i] += g[i];
      });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  same_tape(a, b);
  Tape& t = tape_of(a);
  Tensor out = matmul_value(t.value(a), t.value(b));
  return t.apply(
      std::move(out), {a, b},
      [](const std::vector<const Tensor*>& ps) { return matmul_value(*ps[0], *ps[1]); },
      [](const Tensor& g, const std::vector<const Tensor*>& ps, const Tensor&,
         const std::vector<Tensor*>& pg) {
        const Tensor& av = *ps[0];
        const Tensor& bv = *ps[1];
        const std::size_t m = av.rows(), k = av.cols(), n = bv.cols();
        if (pg[0]) {  // dA += g * B^T
          double* da = pg[0]->mut_data().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
              const double gij = g[i * n + j];
              const double* brow = bv.data().data();
              for (std::size_t kk = 0; kk < k; ++kk) da[i * k + kk] += gij * brow[kk * n + j];
            }
        }
        if (pg[1]) {  // dB += A^T * g
          double* db = pg[1]->mut_data().data();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t kk = 0; kk < k; ++kk) {
              const double aik = av[i * k + kk];
              for (std::size_t j = 0; j < n; ++j) db[kk * n + j] += aik * g[i * n + j];
            }
        }
      });
}

Var transpose(Var a) {
  Tape& t = tape_of(a);
  Tensor out = transpose_value(t.value(a));
  return t.apply(
      std::move(out), {a},
      [](const std::vector<const Tensor*>& ps) { return transpose_value(*ps[0]); },
      [](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
         const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        const std::size_t n = g.rows(), m = g.cols();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < m; ++j) pg[0]->mut_data()[j * n + i] += g[i * m + j];
      });
}

Var add_rowvec(Var a, Var v) {
  same_tape(a, v);
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const Tensor& vv = t.value(v);
  check_shape(av.rank() == 2, "add_rowvec: matrix required");
  check_shape(vv.size() == av.cols(), "add_rowvec: vector length mismatch");
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out = av;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.mut_data()[i * n + j] += vv[j];
  return t.apply(
      std::move(out), {a, v},
      [m, n](const std::vector<const Tensor*>& ps) {
        Tensor o = *ps[0];
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) o.mut_data()[i * n + j] += (*ps[1])[j];
        return o;
      },
      [m, n](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
             const std::vector<Tensor*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) pg[0]->mut_data()[i] += g[i];
        if (pg[1])
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) pg[1]->mut_data()[j] += g[i * n + j];
      });
}

Var sub_colvec(Var a, Var v) {
  same_tape(a, v);
  Tape& t = tape_of(a);
  const Tensor& av = t.value(a);
  const Tensor& vv = t.value(v);
  check_shape(av.rank() == 2, "sub_colvec: matrix required");
  check_shape(vv.size() == av.rows(), "sub_colvec: vector length mismatch");
  const std::size_t m = av.rows(), n = av.cols();
  Tensor out = av;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.mut_data()[i * n + j] -= vv[i];
  return t.apply(
      std::move(out), {a, v},
      [m, n](const std::vector<const Tensor*>& ps) {
        Tensor o = *ps[0];
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) o.mut_data()[i * n + j] -= (*ps[1])[i];
        return o;
      },
      [m, n](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
             const std::vector<Tensor*>& pg) {
        if (pg[0])
          for (std::size_t i = 0; i < g.size(); ++i) pg[0]->mut_data()[i] += g[i];
        if (pg[1])
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) pg[1]->mut_data()[i] -= g[i * n + j];
      });
}

Var sparse_rows_apply(Var x, const SparseRowMap& map) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  check_shape(xv.rank() == 2, "sparse_rows_apply: matrix required");
  check_shape(xv.rows() == map.in_rows, "sparse_rows_apply: row count mismatch");
  const std::size_t d = xv.cols();
  auto run = [d, &map](const Tensor& in) {
    Tensor o = Tensor::zeros({map.out_rows, d});
    for (std::size_t r = 0; r < map.out_rows; ++r) {
      double* orow = o.mut_data().data() + r * d;
      for (const auto& [src, w] : map.entries[r]) {
        const double* irow = in.data().data() + src * d;
        for (std::size_t j = 0; j < d; ++j) orow[j] += w * irow[j];
      }
    }
    return o;
  };
  Tensor out = run(xv);
  SparseRowMap m = map;
  return t.apply(
      std::move(out), {x},
      [m, d](const std::vector<const Tensor*>& ps) {
        Tensor o = Tensor::zeros({m.out_rows, d});
        for (std::size_t r = 0; r < m.out_rows; ++r) {
          double* orow = o.mut_data().data() + r * d;
          for (const auto& [src, w] : m.entries[r]) {
            const double* irow = ps[0]->data().data() + src * d;
            for (std::size_t j = 0; j < d; ++j) orow[j] += w * irow[j];
          }
        }
        return o;
      },
      [m, d](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
             const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t r = 0; r < m.out_rows; ++r) {
          const double* grow = g.data().data() + r * d;
          for (const auto& [src, w] : m.entries[r]) {
            double* drow = pg[0]->mut_data().data() + src * d;
            for (std::size_t j = 0; j < d; ++j) drow[j] += w * grow[j];
          }
        }
      });
}

// ---------------------------------------------------------------------------
// Normalization and reductions

Var softmax_rows(Var x) {
  Tape& t = tape_of(x);
  Tensor out = softmax_rows_value(t.value(x));
  return t.apply(
      std::move(out), {x},
      [](const std::vector<const Tensor*>& ps) { return softmax_rows_value(*ps[0]); },
      [](const Tensor& g, const std::vector<const Tensor*>&, const Tensor& y,
         const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        const std::size_t m = y.rows(), n = y.cols();
        for (std::size_t i = 0; i < m; ++i) {
          const double* yrow = y.data().data() + i * n;
          const double* grow = g.data().data() + i * n;
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += grow[j] * yrow[j];
          double* drow = pg[0]->mut_data().data() + i * n;
          for (std::size_t j = 0; j < n; ++j) drow[j] += yrow[j] * (grow[j] - s);
        }
      });
}

Var layernorm_rows(Var x, Var gain, Var shift, double eps) {
  same_tape(x, gain);
  same_tape(x, shift);
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  check_shape(xv.rank() == 2, "layernorm_rows: matrix required");
  const std::size_t n = xv.cols();
  check_shape(t.value(gain).size() == n && t.value(shift).size() == n,
              "layernorm_rows: gain/shift length mismatch");
  auto run = [eps, n](const Tensor& in, const Tensor& gn, const Tensor& sh) {
    const std::size_t m = in.rows();
    Tensor o = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = in.data().data() + i * n;
      double mu = 0.0;
      for (std::size_t j = 0; j < n; ++j) mu += row[j];
      mu /= static_cast<double>(n);
      double var = 0.0;
      for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
      var /= static_cast<double>(n);
      const double inv = 1.0 / std::sqrt(var + eps);
      double* orow = o.mut_data().data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] = (row[j] - mu) * inv * gn[j] + sh[j];
    }
    return o;
  };
  Tensor out = run(xv, t.value(gain), t.value(shift));
  return t.apply(
      std::move(out), {x, gain, shift},
      [run](const std::vector<const Tensor*>& ps) { return run(*ps[0], *ps[1], *ps[2]); },
      [eps, n](const Tensor& g, const std::vector<const Tensor*>& ps, const Tensor&,
               const std::vector<Tensor*>& pg) {
        const Tensor& in = *ps[0];
        const Tensor& gn = *ps[1];
        const std::size_t m = in.rows();
        const double dn = static_cast<double>(n);
        for (std::size_t i = 0; i < m; ++i) {
          const double* row = in.data().data() + i * n;
          const double* grow = g.data().data() + i * n;
          double mu = 0.0;
          for (std::size_t j = 0; j < n; ++j) mu += row[j];
          mu /= dn;
          double var = 0.0;
          for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
          var /= dn;
          const double inv = 1.0 / std::sqrt(var + eps);
          // xhat and the two row means the adjoint needs
          double mean_dxhat = 0.0, mean_dxhat_xhat = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            const double xhat = (row[j] - mu) * inv;
            const double dxhat = grow[j] * gn[j];
            mean_dxhat += dxhat;
            mean_dxhat_xhat += dxhat * xhat;
          }
          mean_dxhat /= dn;
          mean_dxhat_xhat /= dn;
          for (std::size_t j = 0; j < n; ++j) {
            const double xhat = (row[j] - mu) * inv;
            const double dxhat = grow[j] * gn[j];
            if (pg[0]) pg[0]->mut_data()[i * n + j] += inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            if (pg[1]) pg[1]->mut_data()[j] += grow[j] * xhat;
            if (pg[2]) pg[2]->mut_data()[j] += grow[j];
          }
        }
      });
}

Var l2_normalize_rows(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  check_shape(xv.rank() == 2, "l2_normalize_rows: matrix required");
  const std::size_t n = xv.cols();
  auto run = [n](const Tensor& in) {
    const std::size_t m = in.rows();
    Tensor o = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
      const double* row = in.data().data() + i * n;
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += row[j] * row[j];
      const double r = std::sqrt(s);
      if (r == 0.0) throw std::domain_error("l2_normalize_rows: zero-norm row");
      double* orow = o.mut_data().data() + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] = row[j] / r;
    }
    return o;
  };
  Tensor out = run(xv);
  return t.apply(
      std::move(out), {x},
      [run](const std::vector<const Tensor*>& ps) { return run(*ps[0]); },
      [n](const Tensor& g, const std::vector<const Tensor*>& ps, const Tensor& y,
          const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        const Tensor& in = *ps[0];
        const std::size_t m = in.rows();
        for (std::size_t i = 0; i < m; ++i) {
          const double* row = in.data().data() + i * n;
          const double* yrow = y.data().data() + i * n;
          const double* grow = g.data().data() + i * n;
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += row[j] * row[j];
          const double r = std::sqrt(s);
          double gy = 0.0;
          for (std::size_t j = 0; j < n; ++j) gy += grow[j] * yrow[j];
          double* drow = pg[0]->mut_data().data() + i * n;
          for (std::size_t j = 0; j < n; ++j) drow[j] += (grow[j] - yrow[j] * gy) / r;
        }
      });
}

Var sum_all(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  double s = 0.0;
  for (double v : xv.data()) s += v;
  return t.apply(
      Tensor({1}, {s}), {x},
      [](const std::vector<const Tensor*>& ps) {
        double acc = 0.0;
        for (double v : ps[0]->data()) acc += v;
        return Tensor({1}, {acc});
      },
      [](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
         const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (double& v : pg[0]->mut_data()) v += g[0];
      });
}

Var mean_all(Var x) {
  Tape& t = tape_of(x);
  const std::size_t n = t.value(x).size();
  return scale(sum_all(x), 1.0 / static_cast<double>(n));
}

Var sum_cols(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  check_shape(xv.rank() == 2, "sum_cols: matrix required");
  const std::size_t m = xv.rows(), n = xv.cols();
  auto run = [m, n](const Tensor& in) {
    Tensor o = Tensor::zeros({m, 1});
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += in[i * n + j];
      o.mut_data()[i] = s;
    }
    return o;
  };
  Tensor out = run(xv);
  return t.apply(
      std::move(out), {x},
      [run](const std::vector<const Tensor*>& ps) { return run(*ps[0]); },
      [m, n](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
             const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) pg[0]->mut_data()[i * n + j] += g[i];
      });
}

Var mean_rows(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  check_shape(xv.rank() == 2, "mean_rows: matrix required");
  const std::size_t m = xv.rows(), n = xv.cols();
  auto run = [m, n](const Tensor& in) {
    Tensor o = Tensor::zeros({1, n});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) o.mut_data()[j] += in[i * n + j];
    for (std::size_t j = 0; j < n; ++j) o.mut_data()[j] /= static_cast<double>(m);
    return o;
  };
  Tensor out = run(xv);
  return t.apply(
      std::move(out), {x},
      [run](const std::vector<const Tensor*>& ps) { return run(*ps[0]); },
      [m, n](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
             const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        const double inv = 1.0 / static_cast<double>(m);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < n; ++j) pg[0]->mut_data()[i * n + j] += g[j] * inv;
      });
}

// ---------------------------------------------------------------------------
// Indexing

Var gather_rows(Var x, std::vector<std::size_t> rows) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  check_shape(xv.rank() == 2, "gather_rows: matrix required");
  const std::size_t n = xv.cols();
  for (std::size_t r : rows) check_shape(r < xv.rows(), "gather_rows: index out of range");
  auto run = [rows, n](const Tensor& in) {
    Tensor o = Tensor::zeros({rows.size(), n});
    for (std::size_t i = 0; i < rows.size(); ++i)
      for (std::size_t j = 0; j < n; ++j) o.mut_data()[i * n + j] = in[rows[i] * n + j];
    return o;
  };
  Tensor out = run(xv);
  return t.apply(
      std::move(out), {x},
      [run](const std::vector<const Tensor*>& ps) { return run(*ps[0]); },
      [rows, n](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
                const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < rows.size(); ++i)
          for (std::size_t j = 0; j < n; ++j)
            pg[0]->mut_data()[rows[i] * n + j] += g[i * n + j];
      });
}

Var gather_cols(Var x, std::vector<std::vector<std::size_t>> cols) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  check_shape(xv.rank() == 2, "gather_cols: matrix required");
  const std::size_t m = xv.rows(), n = xv.cols();
  check_shape(cols.size() == m, "gather_cols: one index list per row required");
  const std::size_t k = cols.empty() ? 0 : cols[0].size();
  for (const auto& c : cols) {
    check_shape(c.size() == k, "gather_cols: ragged index lists");
    for (std::size_t j : c) check_shape(j < n, "gather_cols: index out of range");
  }
  check_shape(k >= 1, "gather_cols: empty selection");
  auto run = [cols, n, k](const Tensor& in) {
    Tensor o = Tensor::zeros({cols.size(), k});
    for (std::size_t i = 0; i < cols.size(); ++i)
      for (std::size_t j = 0; j < k; ++j) o.mut_data()[i * k + j] = in[i * n + cols[i][j]];
    return o;
  };
  Tensor out = run(xv);
  return t.apply(
      std::move(out), {x},
      [run](const std::vector<const Tensor*>& ps) { return run(*ps[0]); },
      [cols, n, k](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
                   const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < cols.size(); ++i)
          for (std::size_t j = 0; j < k; ++j)
            pg[0]->mut_data()[i * n + cols[i][j]] += g[i * k + j];
      });
}

Var concat_rows(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_rows: empty input list");
  Tape& t = tape_of(xs[0]);
  std::size_t n = t.value(xs[0]).cols();
  std::size_t total = 0;
  for (Var v : xs) {
    same_tape(xs[0], v);
    check_shape(t.value(v).rank() == 2 && t.value(v).cols() == n,
                "concat_rows: column count mismatch");
    total += t.value(v).rows();
  }
  std::vector<std::size_t> row_counts;
  for (Var v : xs) row_counts.push_back(t.value(v).rows());
  auto run = [row_counts, n, total](const std::vector<const Tensor*>& ps) {
    Tensor o = Tensor::zeros({total, n});
    std::size_t at = 0;
    for (std::size_t s = 0; s < ps.size(); ++s) {
      std::copy(ps[s]->data().begin(), ps[s]->data().end(), o.mut_data().begin() + at * n);
      at += row_counts[s];
    }
    return o;
  };
  std::vector<const Tensor*> pv;
  for (Var v : xs) pv.push_back(&t.value(v));
  Tensor out = run(pv);
  return t.apply(
      std::move(out), xs, run,
      [row_counts, n](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
                      const std::vector<Tensor*>& pg) {
        std::size_t at = 0;
        for (std::size_t s = 0; s < row_counts.size(); ++s) {
          if (pg[s]) {
            for (std::size_t i = 0; i < row_counts[s] * n; ++i)
              pg[s]->mut_data()[i] += g[at * n + i];
          }
          at += row_counts[s];
        }
      });
}

Var slice_cols(Var x, std::size_t from, std::size_t count) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  check_shape(xv.rank() == 2, "slice_cols: matrix required");
  const std::size_t m = xv.rows(), n = xv.cols();
  check_shape(from + count <= n && count >= 1, "slice_cols: range out of bounds");
  auto run = [from, count, m, n](const Tensor& in) {
    Tensor o = Tensor::zeros({m, count});
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < count; ++j) o.mut_data()[i * count + j] = in[i * n + from + j];
    return o;
  };
  Tensor out = run(xv);
  return t.apply(
      std::move(out), {x},
      [run](const std::vector<const Tensor*>& ps) { return run(*ps[0]); },
      [from, count, m, n](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
                          const std::vector<Tensor*>& pg) {
        if (!pg[0]) return;
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t j = 0; j < count; ++j)
            pg[0]->mut_data()[i * n + from + j] += g[i * count + j];
      });
}

Var concat_cols(const std::vector<Var>& xs) {
  if (xs.empty()) throw std::invalid_argument("concat_cols: empty input list");
  Tape& t = tape_of(xs[0]);
  const std::size_t m = t.value(xs[0]).rows();
  std::size_t total = 0;
  std::vector<std::size_t> widths;
  for (Var v : xs) {
    same_tape(xs[0], v);
    check_shape(t.value(v).rank() == 2 && t.value(v).rows() == m,
                "concat_cols: row count mismatch");
    widths.push_back(t.value(v).cols());
    total += widths.back();
  }
  auto run = [widths, m, total](const std::vector<const Tensor*>& ps) {
    Tensor o = Tensor::zeros({m, total});
    std::size_t at = 0;
    for (std::size_t s = 0; s < ps.size(); ++s) {
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < widths[s]; ++j)
          o.mut_data()[i * total + at + j] = (*ps[s])[i * widths[s] + j];
      at += widths[s];
    }
    return o;
  };
  std::vector<const Tensor*> pv;
  for (Var v : xs) pv.push_back(&t.value(v));
  Tensor out = run(pv);
  return t.apply(
      std::move(out), xs, run,
      [widths, m, total](const Tensor& g, const std::vector<const Tensor*>&, const Tensor&,
                         const std::vector<Tensor*>& pg) {
        std::size_t at = 0;
        for (std::size_t s = 0; s < widths.size(); ++s) {
          if (pg[s]) {
            for (std::size_t i = 0; i < m; ++i)
              for (std::size_t j = 0; j < widths[s]; ++j)
                pg[s]->mut_data()[i * widths[s] + j] += g[i * total + at + j];
          }
          at += widths[s];
        }
      });
}

// ---------------------------------------------------------------------------
// Gradient checking

double grad_check(const TapeFnEx& f, const std::vector<Tensor>& inputs, double step) {
  if (inputs.empty()) throw std::invalid_argument("grad_check: no inputs");
  Tape tape(true);
  std::vector<Var> vars;
  vars.reserve(inputs.size());
  for (const Tensor& x : inputs) vars.push_back(tape.input(x));
  Var out = f(tape, vars, /*base_pass=*/true);
  const Tensor& oval = tape.value(out);
  if (oval.size() != 1) throw std::invalid_argument("grad_check: f must be scalar-valued");
  if (!oval.all_finite()) throw std::runtime_error("grad_check: non-finite value at base point");
  tape.backward(out);
  std::vector<Tensor> analytic;
  for (Var v : vars) {
    analytic.push_back(tape.grad(v));
    if (!analytic.back().all_finite())
      throw std::runtime_error("grad_check: non-finite analytic gradient");
  }

  struct Coord {
    std::size_t tensor, index;
  };
  std::vector<Coord> coords;
  for (std::size_t k = 0; k < inputs.size(); ++k)
    for (std::size_t i = 0; i < inputs[k].size(); ++i) coords.push_back({k, i});

  std::vector<double> errs(coords.size(), 0.0);
  parallel_for(coords.size(), [&](std::size_t c) {
    const auto [k, i] = coords[c];
    auto eval = [&](double delta) {
      std::vector<Tensor> pert = inputs;
      pert[k].mut_data()[i] += delta;
      Tape t2(false);
      std::vector<Var> vs;
      vs.reserve(pert.size());
      for (Tensor& x : pert) vs.push_back(t2.input(std::move(x)));
      Var o = f(t2, vs, /*base_pass=*/false);
      const double val = t2.value(o)[0];
      if (!std::isfinite(val)) throw std::runtime_error("grad_check: non-finite FD evaluation");
      return val;
    };
    const double numeric = (eval(step) - eval(-step)) / (2.0 * step);
    const double ana = analytic[k][i];
    const double denom = std::max({std::fabs(ana), std::fabs(numeric), 1e-8});
    errs[c] = std::fabs(ana - numeric) / denom;
  });
  return *std::max_element(errs.begin(), errs.end());
}

double grad_check(const TapeFn& f, const std::vector<Tensor>& inputs, double step) {
  return grad_check(
      [&f](Tape& t, const std::vector<Var>& vs, bool) { return f(t, vs); }, inputs, step);
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double step) {
  return grad_check(
      [&f](Tape& t, const std::vector<Var>& vs, bool) { return f(t, vs[0]); }, {x}, step);
}

}  // namespace omniret
