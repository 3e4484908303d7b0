#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "lrsa/tensor.hpp"

namespace lrsa::spectral {

/// Thin SVD A = U diag(sigma) V^T with k = min(m, n) columns, sigma
/// descending.
struct SVD {
  Tensor u;                    // m x k
  std::vector<double> sigma;   // k
  Tensor v;                    // n x k
  std::size_t sweeps = 0;
};

inline constexpr std::size_t kMaxSvdDim = 1024;
inline constexpr std::size_t kMaxSweeps = 30;

/// One-sided (Hestenes) Jacobi SVD. Converged once every column pair in a
/// sweep has |<a_p, a_q>| <= 1e-14 ||a_p|| ||a_q||.
SVD svd(const Tensor& a);

struct RankError {
  std::size_t rank;
  double error;  // relative Frobenius error of the best rank-r approximation
};

struct KernelReport {
  std::vector<double> singular_values;
  std::vector<RankError> rank_errors;
  double tolerance = 0.0;  // absolute threshold used for the numerical rank
  std::size_t numerical_rank = 0;
};

/// Rank errors sqrt(sum_{k>r} s_k^2 / sum s_k^2) for every r in `ranks`
/// (default 1..min(m,n)); numerical rank counts s_k > rel_tol * s_1.
KernelReport spectral_report(const Tensor& a, double rel_tol = 1e-10,
                             std::optional<std::vector<std::size_t>> ranks = std::nullopt);

/// Least-squares slope of log(sigma_k) against log(k) for k in [k_first, k_last]
/// (1-based, inclusive).
double loglog_slope(const std::vector<double>& sigma, std::size_t k_first, std::size_t k_last);

/// "k,sigma_k,rank_k_error" rows, 17 significant digits, LF line endings.
std::string decay_csv(const KernelReport& report);
void emit_decay_csv(const KernelReport& report, const std::filesystem::path& path);

}  // namespace lrsa::spectral
