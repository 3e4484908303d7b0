#pragma once

// Dense kernels backing the tensor operations. Row-major throughout.

#include <cstddef>

namespace lrsa::kernels {

/// C (m x n) = op(A) * op(B), or C += ... when accumulate is set.
/// op(A) is m x k; with trans_a, A is stored k x m. Likewise for B.
void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool trans_a, bool trans_b, bool accumulate);

}  // namespace lrsa::kernels
