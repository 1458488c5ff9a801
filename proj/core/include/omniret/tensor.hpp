#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace omniret {

/// Dense row-major array of doubles, rank 1..4. Never mutated by library
/// operations after construction; cheap to copy at the sizes this project
/// uses.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::vector<std::size_t> dims, std::vector<double> data);

  /// Zero-initialized tensor of the given shape.
  static Tensor zeros(std::vector<std::size_t> dims);

  /// Rank-1 tensor from values.
  static Tensor vector(std::vector<double> values);

  /// Rank-2 tensor from nested initializer rows (test convenience).
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

  /// Identity matrix n x n.
  static Tensor identity(std::size_t n);

  const std::vector<std::size_t>& dims() const { return dims_; }
  std::size_t rank() const { return dims_.size(); }
  std::size_t dim(std::size_t i) const { return dims_.at(i); }
  std::size_t size() const { return data_.size(); }

  const std::vector<double>& data() const { return data_; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Rank-2 element access.
  double at(std::size_t r, std::size_t c) const;

  /// Number of rows / columns for rank-2 tensors.
  std::size_t rows() const;
  std::size_t cols() const;

  bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }
  bool all_finite() const;

  std::string shape_str() const;

  // Mutable access for construction and optimizer updates. Library
  // operations treat their inputs as read-only.
  std::vector<double>& mut_data() { return data_; }

 private:
  std::vector<std::size_t> dims_;
  std::vector<double> data_;
};

/// Thrown on rank/shape mismatches.
struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

void check_shape(bool cond, const std::string& msg);

/// Stable ascending argsort; ties keep the lower original index, so the
/// result is the lexicographically smallest valid sorting permutation.
std::vector<std::size_t> argsort(const std::vector<double>& values);

/// Inverse permutation: out[p[i]] = i.
std::vector<std::size_t> invert_permutation(const std::vector<std::size_t>& p);

// Plain value-level kernels shared by the tape ops and the tests.
Tensor matmul_value(const Tensor& a, const Tensor& b);
Tensor transpose_value(const Tensor& a);
Tensor softmax_rows_value(const Tensor& x);

double dot(const std::vector<double>& a, const std::vector<double>& b);
double l2_norm(const std::vector<double>& v);

}  // namespace omniret
