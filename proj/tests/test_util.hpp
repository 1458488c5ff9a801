#pragma once

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>

#include "omniret/rng.hpp"
#include "omniret/tensor.hpp"

namespace omniret::testing {

inline Tensor random_tensor(std::vector<std::size_t> dims, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(dims));
  for (double& v : t.mut_data()) v = rng.normal() * scale;
  return t;
}

inline bool bitwise_equal(const Tensor& a, const Tensor& b) {
  return a.dims() == b.dims() &&
         std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) == 0;
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  EXPECT_EQ(a.dims(), b.dims());
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::fabs(a[i] - b[i]));
  return worst;
}

#define EXPECT_TENSOR_NEAR(a, b, tol) EXPECT_LE(omniret::testing::max_abs_diff((a), (b)), (tol))

/// Frozen output of the pooled-embedding path on the seed-13 fixture of
/// AswpPool.DuplicatePaddingStateChangesOutput; pins the whole stack
/// (resampler blocks, slice embedding, straight-through selection).
inline Tensor aswp_regression_snapshot() {
  return Tensor({1, 5},
                {0.44662729152993441, -0.62623860628147354, -1.0301851792201189,
                 0.90274647132178598, 2.3108459656628639});
}

}  // namespace omniret::testing
