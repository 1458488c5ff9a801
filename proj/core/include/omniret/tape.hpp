#pragma once

#include <functional>
#include <utility>
#include <vector>

#include "omniret/tensor.hpp"

namespace omniret {

class Tape;

/// Handle to a value recorded on a tape.
struct Var {
  Tape* tape = nullptr;
  int id = -1;
};

/// Precomputed sparse linear map applied row-wise: each output row is a
/// fixed weighted combination of input rows. Backbone of trilinear resizing.
struct SparseRowMap {
  std::size_t in_rows = 0;
  std::size_t out_rows = 0;
  // entries[r] lists (input_row, weight) pairs for output row r.
  std::vector<std::vector<std::pair<std::size_t, double>>> entries;
};

/// Reverse-mode tape. Records primitive applications; backward() computes
/// vector-Jacobian products for a scalar output. Single-owner,
/// single-threaded. With record=false the ops only compute values, which is
/// what finite-difference probes and inference use.
class Tape {
 public:
  using ForwardFn = std::function<Tensor(const std::vector<const Tensor*>&)>;
  // gout: gradient of the scalar output w.r.t. this node's value.
  // pvals: parent values; value: this node's recorded value.
  // pgrads: accumulation targets, nullptr for parents not needing gradients.
  using BackwardFn = std::function<void(const Tensor& gout, const std::vector<const Tensor*>& pvals,
                                        const Tensor& value, const std::vector<Tensor*>& pgrads)>;

  explicit Tape(bool record = true) : record_(record) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  /// Differentiable leaf.
  Var input(Tensor value);
  /// Non-differentiable leaf.
  Var constant(Tensor value);

  /// Registers a primitive application. Modules use this to add their own
  /// ops (the sliced-pool gather and the straight-through max live outside
  /// this header). Parents must belong to this tape.
  Var apply(Tensor value, const std::vector<Var>& parents, ForwardFn fwd, BackwardFn bwd);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;

  /// Reverse pass from a scalar ([1]) output. Gradients of all
  /// differentiable leaves (and intermediates) become available via grad().
  void backward(Var scalar_output);

  /// Gradient of the last backward() w.r.t. v; zero tensor if v never
  /// received gradient.
  Tensor grad(Var v) const;

  /// Recomputes every recorded non-leaf value from the leaves and checks
  /// the results against the recorded values bit for bit.
  bool replay_matches_recorded() const;

  std::size_t node_count() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    std::vector<int> parents;
    bool requires_grad = false;
    ForwardFn forward;    // empty for leaves
    BackwardFn backward;  // empty for leaves and grad-free nodes
  };

  bool record_;
  std::vector<Node> nodes_;
  std::vector<Tensor> grads_;

  friend struct Var;
};

// ---- Elementwise and structural primitives ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double c);
Var add_scalar(Var a, double c);
Var relu(Var x);
Var exp_elem(Var x);
Var log1p_elem(Var x);
Var gelu(Var x);
Var smooth_l1(Var x, double gamma);
Var sub_const(Var a, const Tensor& c);
Var mul_const(Var a, const Tensor& c);
Var reshape(Var a, std::vector<std::size_t> dims);

// ---- Linear algebra ----
Var matmul(Var a, Var b);
Var transpose(Var a);
Var add_rowvec(Var a, Var v);  // [M x D] + [1 x D]
Var sub_colvec(Var a, Var v);  // [M x N] - [M x 1] broadcast across columns
Var sparse_rows_apply(Var x, const SparseRowMap& map);

// ---- Normalization and reductions ----
Var softmax_rows(Var x);
Var layernorm_rows(Var x, Var gain, Var shift, double eps = 1e-5);
Var l2_normalize_rows(Var x);
Var sum_all(Var x);
Var mean_all(Var x);
Var sum_cols(Var x);   // [M x N] -> [M x 1]
Var mean_rows(Var x);  // [M x N] -> [1 x N]

// ---- Indexing ----
Var gather_rows(Var x, std::vector<std::size_t> rows);
Var gather_cols(Var x, std::vector<std::vector<std::size_t>> cols);
Var concat_rows(const std::vector<Var>& xs);
Var slice_cols(Var x, std::size_t from, std::size_t count);
Var concat_cols(const std::vector<Var>& xs);

// ---- Gradient checking ----

/// f builds a scalar-valued computation from the given leaves.
using TapeFn = std::function<Var(Tape&, const std::vector<Var>&)>;
/// Variant receiving base_pass=true exactly once, on the recorded pass that
/// the analytic gradient is taken from; finite-difference probes get false.
/// Non-smooth selections made on the base pass can thereby be frozen.
using TapeFnEx = std::function<Var(Tape&, const std::vector<Var>&, bool base_pass)>;

/// Compares the taped gradient of f at `inputs` against central finite
/// differences with the given step, coordinate by coordinate over every
/// input. Returns the worst relative error, with denominator
/// max(|analytic|, |numeric|, 1e-8). Throws if any evaluation or gradient
/// is non-finite.
double grad_check(const TapeFnEx& f, const std::vector<Tensor>& inputs, double step);
double grad_check(const TapeFn& f, const std::vector<Tensor>& inputs, double step);
/// Single-input convenience form.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x, double step);

}  // namespace omniret
