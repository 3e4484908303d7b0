#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "doctest.h"
#include "lrsa/errors.hpp"
#include "lrsa/pde.hpp"
#include "lrsa/spectral.hpp"
#include "test_util.hpp"

using namespace lrsa;
using namespace lrsa::spectral;
using lrsa::test::max_diff;
using lrsa::test::naive_matmul;
using lrsa::test::naive_transpose;
using lrsa::test::random_tensor;

namespace {

Tensor reconstruct(const SVD& s, std::size_t rank) {
  Tensor us({s.u.dim(0), rank});
  for (std::size_t i = 0; i < s.u.dim(0); ++i)
    for (std::size_t k = 0; k < rank; ++k) us.at(i, k) = s.u.at(i, k) * s.sigma[k];
  Tensor vt({rank, s.v.dim(0)});
  for (std::size_t k = 0; k < rank; ++k)
    for (std::size_t j = 0; j < s.v.dim(0); ++j) vt.at(k, j) = s.v.at(j, k);
  return naive_matmul(us, vt);
}

double frobenius(const Tensor& a) {
  long double s = 0.0L;
  for (double v : a.values()) s += static_cast<long double>(v) * v;
  return static_cast<double>(std::sqrt(s));
}

Tensor random_orthogonal(std::size_t n, std::mt19937_64& rng) {
  // Gram-Schmidt on a Gaussian matrix, twice for stability.
  Tensor q = random_tensor({n, n}, rng);
  for (int pass = 0; pass < 2; ++pass) {
    for (std::size_t j = 0; j < n; ++j) {
      for (std::size_t p = 0; p < j; ++p) {
        double d = 0.0;
        for (std::size_t i = 0; i < n; ++i) d += q.at(i, j) * q.at(i, p);
        for (std::size_t i = 0; i < n; ++i) q.at(i, j) -= d * q.at(i, p);
      }
      double norm = 0.0;
      for (std::size_t i = 0; i < n; ++i) norm += q.at(i, j) * q.at(i, j);
      norm = std::sqrt(norm);
      for (std::size_t i = 0; i < n; ++i) q.at(i, j) /= norm;
    }
  }
  return q;
}

}  // namespace

TEST_CASE("svd examples") {
  SUBCASE("identity") {
    const SVD s = svd(Tensor::identity(5));
    for (double v : s.sigma) CHECK(v == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("rank one") {
    const Tensor u = Tensor({4, 1}, {1.0, -2.0, 0.5, 3.0});
    const Tensor v = Tensor({1, 3}, {2.0, 1.0, -1.0});
    const SVD s = svd(naive_matmul(u, v));
    const double expected = std::sqrt(1 + 4 + 0.25 + 9) * std::sqrt(6.0);
    CHECK(s.sigma[0] == doctest::Approx(expected).epsilon(1e-14));
    CHECK(s.sigma[1] <= 1e-12);
    CHECK(s.sigma[2] <= 1e-12);
  }
  SUBCASE("diagonal") {
    const SVD s = svd(Tensor::from_rows({{1.0, 0.0}, {0.0, 3.0}}));
    CHECK(s.sigma[0] == doctest::Approx(3.0).epsilon(1e-15));
    CHECK(s.sigma[1] == doctest::Approx(1.0).epsilon(1e-15));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(svd(Tensor({1025, 2})), ResourceError);
    CHECK_THROWS_AS(svd(Tensor({3})), DimensionError);
    Tensor bad({2, 2});
    bad[1] = NAN;
    CHECK_THROWS_AS(svd(bad), DomainError);
  }
}

TEST_CASE("svd reconstruction and orthogonality over random matrices") {
  std::mt19937_64 rng(2024);
  for (int t = 0; t < 100; ++t) {
    const std::size_t m = 1 + rng() % 40, n = 1 + rng() % 40, k = std::min(m, n);
    Tensor a = random_tensor({m, n}, rng);
    if (t % 4 == 0 && k > 2) {
      // Rank-deficient case.
      a = naive_matmul(random_tensor({m, 2}, rng), random_tensor({2, n}, rng));
    }
    const SVD s = svd(a);
    CHECK(s.u.shape() == Shape{m, k});
    CHECK(s.v.shape() == Shape{n, k});
    CHECK(frobenius(reconstruct(s, k) - a) <= 1e-10 * frobenius(a));
    CHECK(max_diff(naive_matmul(naive_transpose(s.u), s.u), Tensor::identity(k)) <= 1e-10);
    CHECK(max_diff(naive_matmul(naive_transpose(s.v), s.v), Tensor::identity(k)) <= 1e-10);
    for (std::size_t i = 0; i < k; ++i) {
      CHECK(s.sigma[i] >= 0.0);
      if (i > 0) CHECK(s.sigma[i] <= s.sigma[i - 1]);
    }
    // Independent singular values.
    const std::vector<double> ref = test::singular_values(a);
    for (std::size_t i = 0; i < k; ++i) CHECK(std::abs(s.sigma[i] - ref[i]) <= 1e-12 * ref[0]);
  }
}

TEST_CASE("spectral report") {
  std::mt19937_64 rng(7);
  SUBCASE("rank errors match truncated reconstructions") {
    for (int t = 0; t < 20; ++t) {
      const Tensor a = random_tensor({12, 9}, rng);
      const KernelReport r = spectral_report(a);
      const SVD s = svd(a);
      REQUIRE(r.rank_errors.size() == 9);
      for (const auto& [rank, err] : r.rank_errors) {
        const double direct = frobenius(a - reconstruct(s, rank)) / frobenius(a);
        CHECK(std::abs(err - direct) <= 1e-9);
      }
      for (std::size_t i = 1; i < r.rank_errors.size(); ++i)
        CHECK(r.rank_errors[i].error <= r.rank_errors[i - 1].error);
      CHECK(r.rank_errors.back().error <= 1e-12);
      CHECK(r.numerical_rank == 9);
    }
  }
  SUBCASE("orthogonal matrix has a flat spectrum") {
    const std::size_t n = 10;
    const KernelReport r = spectral_report(random_orthogonal(n, rng));
    for (const auto& [rank, err] : r.rank_errors)
      CHECK(std::abs(err - std::sqrt(static_cast<double>(n - rank) / n)) <= 1e-12);
  }
  SUBCASE("rank-one matrix") {
    const Tensor a = naive_matmul(random_tensor({8, 1}, rng), random_tensor({1, 6}, rng));
    const KernelReport r = spectral_report(a);
    CHECK(r.rank_errors[0].error <= 1e-12);
    CHECK(r.numerical_rank == 1);
  }
  SUBCASE("Green kernel decay") {
    const std::size_t n = 256;
    const Tensor g = (1.0 / (n + 1)) * pde::green_kernel_1d_poisson(n);
    const KernelReport r = spectral_report(g, 1e-10, std::vector<std::size_t>{16});
    CHECK(r.rank_errors.at(0).error <= 1e-2);
    const double slope = loglog_slope(r.singular_values, 2, 32);
    CHECK(slope >= -2.2);
    CHECK(slope <= -1.8);
    // Eigenvalues of the discrete inverse Laplacian, in closed form.
    const double h = 1.0 / (n + 1);
    for (std::size_t k = 1; k <= 8; ++k) {
      const double lam = 4.0 / (h * h) * std::pow(std::sin(k * M_PI * h / 2.0), 2);
      CHECK(r.singular_values[k - 1] == doctest::Approx(1.0 / lam).epsilon(1e-10));
    }
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(spectral_report(Tensor::identity(3), -1.0), ContractError);
    CHECK_THROWS_AS(spectral_report(Tensor::identity(3), 1e-10, std::vector<std::size_t>{4}),
                    ContractError);
    CHECK_THROWS_AS(loglog_slope({1.0, 0.5}, 2, 2), ContractError);
    CHECK(loglog_slope({1.0, 0.25, 1.0 / 9.0}, 1, 3) == doctest::Approx(-2.0).epsilon(1e-14));
  }
}

TEST_CASE("decay csv") {
  SUBCASE("empty grid gives the header only") {
    const KernelReport r = spectral_report(Tensor::identity(3), 1e-10, std::vector<std::size_t>{});
    CHECK(decay_csv(r) == "k,sigma_k,rank_k_error\n");
  }
  SUBCASE("round trip through a file") {
    std::mt19937_64 rng(3);
    const Tensor a = random_tensor({8, 8}, rng);
    const KernelReport r = spectral_report(a);
    const auto path = std::filesystem::temp_directory_path() / "lrsa_test_decay.csv";
    emit_decay_csv(r, path);
    std::ifstream is(path, std::ios::binary);
    std::string line;
    std::getline(is, line);
    CHECK(line == "k,sigma_k,rank_k_error");
    const SVD s = svd(a);
    std::size_t rows = 0;
    while (std::getline(is, line)) {
      CHECK(line.find('\r') == std::string::npos);
      std::size_t k = 0;
      double sigma = 0.0, err = 0.0;
      REQUIRE(std::sscanf(line.c_str(), "%zu,%lf,%lf", &k, &sigma, &err) == 3);
      CHECK(k == rows + 1);
      CHECK(sigma == r.singular_values[rows]);
      CHECK(err == r.rank_errors[rows].error);
      CHECK(std::abs(sigma - s.sigma[rows]) <= 1e-13 * s.sigma[0]);
      ++rows;
    }
    CHECK(rows == 8);
    std::filesystem::remove(path);
    CHECK_THROWS_AS(emit_decay_csv(r, "/nonexistent_dir/decay.csv"), IoError);
  }
}
