#include "omniret/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace omniret {

Tensor::Tensor(std::vector<std::size_t> dims, std::vector<double> data)
    : dims_(std::move(dims)), data_(std::move(data)) {
  if (dims_.empty() || dims_.size() > 4) {
    throw ShapeError("tensor rank must be 1..4, got " + std::to_string(dims_.size()));
  }
  std::size_t n = 1;
  for (std::size_t d : dims_) {
    if (d == 0) throw ShapeError("tensor dims must be positive");
    n *= d;
  }
  if (n != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape product " + std::to_string(n));
  }
}

Tensor Tensor::zeros(std::vector<std::size_t> dims) {
  std::size_t n = 1;
  for (std::size_t d : dims) n *= d;
  return Tensor(std::move(dims), std::vector<double>(n, 0.0));
}

Tensor Tensor::vector(std::vector<double> values) {
  std::size_t n = values.size();
  return Tensor({n}, std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  std::size_t r = rows.size();
  std::size_t c = rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("ragged matrix initializer");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) t.mut_data()[i * n + i] = 1.0;
  return t;
}

double Tensor::at(std::size_t r, std::size_t c) const {
  if (rank() != 2) throw ShapeError("at(r,c) requires rank 2, have " + shape_str());
  return data_[r * dims_[1] + c];
}

std::size_t Tensor::rows() const {
  if (rank() != 2) throw ShapeError("rows() requires rank 2, have " + shape_str());
  return dims_[0];
}

std::size_t Tensor::cols() const {
  if (rank() != 2) throw ShapeError("cols() requires rank 2, have " + shape_str());
  return dims_[1];
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < dims_.size(); ++i) os << (i ? "x" : "") << dims_[i];
  os << "]";
  return os.str();
}

void check_shape(bool cond, const std::string& msg) {
  if (!cond) throw ShapeError(msg);
}

std::vector<std::size_t> argsort(const std::vector<double>& values) {
  std::vector<std::size_t> idx(values.size());
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  std::stable_sort(idx.begin(), idx.end(),
                   [&](std::size_t a, std::size_t b) { return values[a] < values[b]; });
  return idx;
}

std::vector<std::size_t> invert_permutation(const std::vector<std::size_t>& p) {
  std::vector<std::size_t> inv(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) inv[p[i]] = i;
  return inv;
}

Tensor matmul_value(const Tensor& a, const Tensor& b) {
  check_shape(a.rank() == 2 && b.rank() == 2,
              "matmul requires rank-2 operands, got " + a.shape_str() + " and " + b.shape_str());
  check_shape(a.cols() == b.rows(),
              "matmul inner dims disagree: " + a.shape_str() + " vs " + b.shape_str());
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({m, n});
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  double* po = out.mut_data().data();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t kk = 0; kk < k; ++kk) {
      const double aik = pa[i * k + kk];
      const double* brow = pb + kk * n;
      double* orow = po + i * n;
      for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
    }
  }
  return out;
}

Tensor transpose_value(const Tensor& a) {
  check_shape(a.rank() == 2, "transpose requires rank 2");
  const std::size_t m = a.rows(), n = a.cols();
  Tensor out = Tensor::zeros({n, m});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out.mut_data()[j * m + i] = a.data()[i * n + j];
  return out;
}

Tensor softmax_rows_value(const Tensor& x) {
  check_shape(x.rank() == 2, "softmax_rows requires rank 2");
  const std::size_t m = x.rows(), n = x.cols();
  Tensor out = Tensor::zeros({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data().data() + i * n;
    double mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    double sum = 0.0;
    double* orow = out.mut_data().data() + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      orow[j] = std::exp(row[j] - mx);
      sum += orow[j];
    }
    for (std::size_t j = 0; j < n; ++j) orow[j] /= sum;
  }
  return out;
}

double dot(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double l2_norm(const std::vector<double>& v) { return std::sqrt(dot(v, v)); }

}  // namespace omniret
