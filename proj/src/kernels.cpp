#include "kernels.hpp"

#include <Eigen/Core>

namespace lrsa::kernels {

namespace {
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using Map = Eigen::Map<RowMajor>;
using Index = Eigen::Index;
}  // namespace

void gemm(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
          std::size_t n, bool trans_a, bool trans_b, bool accumulate) {
  Map out(c, static_cast<Index>(m), static_cast<Index>(n));
  if (!accumulate) out.setZero();
  if (m == 0 || n == 0 || k == 0) return;
  const auto mi = static_cast<Index>(m), ki = static_cast<Index>(k), ni = static_cast<Index>(n);
  // Eigen is used single-threaded, so the reduction order is fixed per shape.
  if (!trans_a && !trans_b) {
    out.noalias() += ConstMap(a, mi, ki) * ConstMap(b, ki, ni);
  } else if (!trans_a && trans_b) {
    out.noalias() += ConstMap(a, mi, ki) * ConstMap(b, ni, ki).transpose();
  } else if (trans_a && !trans_b) {
    out.noalias() += ConstMap(a, ki, mi).transpose() * ConstMap(b, ki, ni);
  } else {
    out.noalias() += ConstMap(a, ki, mi).transpose() * ConstMap(b, ni, ki).transpose();
  }
}

}  // namespace lrsa::kernels
