#include "lrsa/spectral.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "lrsa/errors.hpp"

namespace lrsa::spectral {

namespace {

// Column-major working copy so column pairs are contiguous.
struct Columns {
  std::size_t rows, cols;
  std::vector<double> data;
  double* col(std::size_t j) { return data.data() + j * rows; }
  const double* col(std::size_t j) const { return data.data() + j * rows; }
};

double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

// Extends the orthonormal set `basis` (vectors of length n) with a unit vector
// orthogonal to all of them, starting from `start` when it has enough
// component outside the span, otherwise from coordinate axes.
std::vector<double> complete(const std::vector<std::vector<double>>& basis,
                             std::vector<double> start, std::size_t n) {
  auto orthogonalize = [&](std::vector<double>& v) {
    for (int pass = 0; pass < 2; ++pass) {
      for (const auto& b : basis) {
        const double c = dot(v.data(), b.data(), n);
        for (std::size_t i = 0; i < n; ++i) v[i] -= c * b[i];
      }
    }
    return std::sqrt(dot(v.data(), v.data(), n));
  };
  const double norm0 = std::sqrt(dot(start.data(), start.data(), n));
  if (norm0 > 0.0) {
    for (double& x : start) x /= norm0;
    const double r = orthogonalize(start);
    if (r > 0.5) {
      for (double& x : start) x /= r;
      return start;
    }
  }
  for (std::size_t axis = 0; axis < n; ++axis) {
    std::vector<double> e(n, 0.0);
    e[axis] = 1.0;
    const double r = orthogonalize(e);
    if (r > 0.5) {
      for (double& x : e) x /= r;
      return e;
    }
  }
  throw ConvergenceError("cannot complete an orthonormal basis");
}

}  // namespace

SVD svd(const Tensor& a) {
  if (a.rank() != 2) throw DimensionError("svd expects a matrix, got " + to_string(a.shape()));
  if (a.dim(0) > kMaxSvdDim || a.dim(1) > kMaxSvdDim) {
    throw ResourceError("svd limited to " + std::to_string(kMaxSvdDim) + " rows and columns");
  }
  if (!a.all_finite()) throw DomainError("svd input contains non-finite values");
  const bool flip = a.dim(0) < a.dim(1);
  const Tensor work = flip ? transpose(a) : a;
  const std::size_t m = work.dim(0), n = work.dim(1);

  Columns w{m, n, std::vector<double>(m * n)};
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) w.col(j)[i] = work.at(i, j);
  Columns v{n, n, std::vector<double>(n * n, 0.0)};
  for (std::size_t j = 0; j < n; ++j) v.col(j)[j] = 1.0;

  constexpr double kOffTol = 1e-14;
  std::size_t sweeps = 0;
  bool converged = n < 2;
  while (!converged) {
    if (sweeps == kMaxSweeps) {
      throw ConvergenceError("Jacobi SVD did not converge within " +
                             std::to_string(kMaxSweeps) + " sweeps");
    }
    ++sweeps;
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double* ap = w.col(p);
        double* aq = w.col(q);
        const double alpha = dot(ap, ap, m), beta = dot(aq, aq, m), gamma = dot(ap, aq, m);
        if (alpha == 0.0 || beta == 0.0) continue;
        if (std::abs(gamma) <= kOffTol * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::hypot(1.0, zeta));
        const double c = 1.0 / std::hypot(1.0, t), s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double x = ap[i], y = aq[i];
          ap[i] = c * x - s * y;
          aq[i] = s * x + c * y;
        }
        double* vp = v.col(p);
        double* vq = v.col(q);
        for (std::size_t i = 0; i < n; ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
  }

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) sigma[j] = std::sqrt(dot(w.col(j), w.col(j), m));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  const double smax = n ? sigma[order[0]] : 0.0;
  const double tiny = smax * 1e-13;
  std::vector<std::vector<double>> ucols;
  SVD out;
  out.sweeps = sweeps;
  out.sigma.resize(n);
  Tensor uu({m, n}), vv({n, n});
  for (std::size_t k = 0; k < n; ++k) {
    const std::size_t j = order[k];
    out.sigma[k] = sigma[j];
    std::vector<double> col(w.col(j), w.col(j) + m);
    if (sigma[j] > tiny && sigma[j] > 0.0) {
      for (double& x : col) x /= sigma[j];
    } else {
      col = complete(ucols, std::move(col), m);
    }
    ucols.push_back(col);
    for (std::size_t i = 0; i < m; ++i) uu.at(i, k) = col[i];
    for (std::size_t i = 0; i < n; ++i) vv.at(i, k) = v.col(j)[i];
  }
  if (flip) {
    out.u = std::move(vv);
    out.v = std::move(uu);
  } else {
    out.u = std::move(uu);
    out.v = std::move(vv);
  }
  return out;
}

KernelReport spectral_report(const Tensor& a, double rel_tol,
                             std::optional<std::vector<std::size_t>> ranks) {
  if (!(rel_tol >= 0.0)) throw ContractError("rank tolerance must be non-negative");
  const SVD s = svd(a);
  KernelReport r;
  r.singular_values = s.sigma;
  const std::size_t k = s.sigma.size();
  // tail[i] = sum_{j >= i} sigma_j^2, accumulated from the small end.
  std::vector<double> tail(k + 1, 0.0);
  for (std::size_t i = k; i-- > 0;) tail[i] = tail[i + 1] + s.sigma[i] * s.sigma[i];
  std::vector<std::size_t> grid;
  if (ranks) {
    grid = *ranks;
  } else {
    grid.resize(k);
    std::iota(grid.begin(), grid.end(), 1);
  }
  for (std::size_t rank : grid) {
    if (rank > k) {
      throw ContractError("rank " + std::to_string(rank) + " exceeds min(m, n) = " +
                          std::to_string(k));
    }
    const double err = tail[0] > 0.0 ? std::sqrt(tail[rank] / tail[0]) : 0.0;
    r.rank_errors.push_back({rank, err});
  }
  r.tolerance = k ? rel_tol * s.sigma[0] : 0.0;
  r.numerical_rank = static_cast<std::size_t>(
      std::count_if(s.sigma.begin(), s.sigma.end(), [&](double x) { return x > r.tolerance; }));
  return r;
}

double loglog_slope(const std::vector<double>& sigma, std::size_t k_first, std::size_t k_last) {
  if (k_first < 1 || k_last <= k_first || k_last > sigma.size()) {
    throw ContractError("loglog_slope needs 1 <= k_first < k_last <= len(sigma)");
  }
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  const double cnt = static_cast<double>(k_last - k_first + 1);
  for (std::size_t k = k_first; k <= k_last; ++k) {
    if (!(sigma[k - 1] > 0.0)) throw DomainError("loglog_slope over a zero singular value");
    const double x = std::log(static_cast<double>(k)), y = std::log(sigma[k - 1]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return (cnt * sxy - sx * sy) / (cnt * sxx - sx * sx);
}

std::string decay_csv(const KernelReport& report) {
  std::string out = "k,sigma_k,rank_k_error\n";
  char buf[96];
  for (const auto& [rank, err] : report.rank_errors) {
    const double s = rank >= 1 && rank <= report.singular_values.size()
                         ? report.singular_values[rank - 1]
                         : 0.0;
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", rank, s, err);
    out += buf;
  }
  return out;
}

void emit_decay_csv(const KernelReport& report, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << decay_csv(report);
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace lrsa::spectral
