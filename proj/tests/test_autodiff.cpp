#include <cmath>
#include <functional>
#include <numbers>
#include <random>
#include <vector>

#include "doctest.h"
#include "lrsa/autodiff.hpp"
#include "lrsa/errors.hpp"
#include "test_util.hpp"

using namespace lrsa;
using lrsa::test::max_diff;
using lrsa::test::random_tensor;

TEST_CASE("matmul examples") {
  const Tensor a = Tensor::from_rows({{1, 2}, {3, 4}});
  const Tensor b = Tensor::from_rows({{5, 6}, {7, 8}});
  CHECK(matmul(Tensor::identity(2), a) == a);
  CHECK(matmul(Tensor({2, 2}), a) == Tensor({2, 2}));
  CHECK(matmul(a, b) == Tensor::from_rows({{19, 22}, {43, 50}}));
  CHECK_THROWS_AS(matmul(a, Tensor({3, 2})), DimensionError);

  Tape tape;
  CHECK_THROWS_AS(matmul(tape.constant(a), tape.constant(Tensor({3, 1}))), DimensionError);
  CHECK(tape.value(matmul(tape.constant(a), tape.constant(b))) ==
        Tensor::from_rows({{19, 22}, {43, 50}}));
}

TEST_CASE("matmul agrees with a naive loop on random shapes") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t m = 1 + rng() % 9, k = 1 + rng() % 9, n = 1 + rng() % 9;
    const Tensor a = random_tensor({m, k}, rng), b = random_tensor({k, n}, rng);
    CHECK(max_diff(matmul(a, b), test::naive_matmul(a, b)) <= 1e-13);
    Tape tape;
    const Tensor bt = test::naive_transpose(b);
    CHECK(max_diff(tape.value(matmul_nt(tape.constant(a), tape.constant(bt))),
                   test::naive_matmul(a, b)) <= 1e-13);
  }
}

TEST_CASE("softmax examples and properties") {
  Tape tape;
  const Tensor u = tape.value(softmax_lastdim(tape.constant(Tensor({1, 3}))));
  for (double v : u.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(tape.value(softmax_lastdim(tape.constant(Tensor({1, 1}, {-7.5}))))[0] == 1.0);
  const Tensor s = tape.value(softmax_lastdim(tape.constant(Tensor::from_rows({{1, 2, 3}}))));
  const Tensor ref = test::naive_softmax_rows(Tensor::from_rows({{1, 2, 3}}));
  CHECK(max_diff(s, ref) <= 1e-15);
  CHECK(s[0] == doctest::Approx(0.09003057317038046).epsilon(1e-14));
  CHECK(s[1] == doctest::Approx(0.24472847105479767).epsilon(1e-14));
  CHECK(s[2] == doctest::Approx(0.6652409557748219).epsilon(1e-14));
  CHECK_THROWS_AS(softmax_lastdim(tape.constant(Tensor({2, 0}))), DimensionError);

  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const Tensor x = random_tensor({4, 7}, rng, 10.0);
    const Tensor y = tape.value(softmax_lastdim(tape.constant(x)));
    Tensor shifted = x;
    for (std::size_t r = 0; r < 4; ++r) {
      const double c = 100.0 * (static_cast<double>(rng() % 1000) / 1000.0 - 0.5);
      for (double& v : shifted.row(r)) v += c;
    }
    const Tensor ys = tape.value(softmax_lastdim(tape.constant(shifted)));
    for (std::size_t r = 0; r < 4; ++r) {
      double sum = 0.0;
      for (double v : y.row(r)) {
        CHECK(v >= 0.0);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-12);
    }
    CHECK(max_diff(y, ys) <= 1e-12);
  }
}

TEST_CASE("layer_norm examples") {
  Tape tape;
  const Var ones = tape.constant(Tensor({3}, 1.0));
  const Var zeros = tape.constant(Tensor({3}));
  const Tensor c = tape.value(layer_norm(tape.constant(Tensor({1, 3}, 4.2)), ones, zeros));
  for (double v : c.values()) CHECK(v == 0.0);

  const Var g2 = tape.constant(Tensor({2}, 1.0));
  const Var b2 = tape.constant(Tensor({2}));
  const Tensor y = tape.value(layer_norm(tape.constant(Tensor::from_rows({{-1, 1}})), g2, b2));
  CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-5));
  CHECK(y[1] == doctest::Approx(1.0).epsilon(1e-5));

  const Tensor z = tape.value(layer_norm(tape.constant(Tensor::from_rows({{0, 2}})),
                                         tape.constant(Tensor({2}, 2.0)),
                                         tape.constant(Tensor({2}, 1.0)), 1e-300));
  CHECK(z[0] == doctest::Approx(-1.0).epsilon(1e-14));
  CHECK(z[1] == doctest::Approx(3.0).epsilon(1e-14));
  CHECK_THROWS_AS(layer_norm(tape.constant(Tensor({1, 3})), g2, b2), DimensionError);
}

TEST_CASE("elementwise examples") {
  std::mt19937_64 rng(5);
  const Tensor a = random_tensor({3, 4}, rng);
  Tape tape;
  const Var va = tape.constant(a);
  CHECK(tape.value(add(va, tape.constant(Tensor({3, 4})))) == a);
  const Tensor e = tape.value(exp(tape.constant(Tensor({2, 2}))));
  for (double v : e.values()) CHECK(v == 1.0);
  CHECK(tape.value(transpose(transpose(va))) == a);
  CHECK(tape.value(reshape(va, {4, 3})).shape() == Shape{4, 3});
  CHECK_THROWS_AS(add(va, tape.constant(Tensor({4, 3}))), DimensionError);
  CHECK(max_diff(tape.value(gelu(va)), test::naive_gelu(a)) <= 1e-15);

  const Var parts[] = {va, tape.constant(Tensor({3, 2}, 7.0))};
  const Tensor cat = tape.value(concat_cols(parts));
  CHECK(cat.shape() == Shape{3, 6});
  CHECK(test::naive_columns(cat, 0, 4) == a);
  CHECK(tape.value(slice_cols(va, 1, 3)) == test::naive_columns(a, 1, 3));
  CHECK_THROWS_AS(slice_cols(va, 3, 5), DimensionError);
}

TEST_CASE("backward examples") {
  {
    Tape tape;
    const Var x = tape.variable(Tensor({1}, 2.5));
    const Var y = scale(x, 1.0);
    tape.backward(y);
    CHECK(tape.grad(x)[0] == 1.0);
  }
  {
    Tape tape;
    const Var x = tape.variable(Tensor({1}, 3.0));
    tape.backward(mul(x, x));
    CHECK(tape.grad(x)[0] == 6.0);
  }
  {
    // x feeds two consumers: d(x*x + x)/dx = 2x + 1.
    Tape tape;
    const Var x = tape.variable(Tensor({1}, 3.0));
    tape.backward(add(mul(x, x), x));
    CHECK(tape.grad(x)[0] == 7.0);
  }
  {
    Tape a, b;
    const Var x = a.variable(Tensor({1}, 1.0));
    const Var y = b.variable(Tensor({1}, 1.0));
    CHECK_THROWS_AS(a.backward(y), LookupError);
    CHECK_THROWS_AS(a.backward(x, Tensor({2})), DimensionError);
  }
}

TEST_CASE("softmax composite matches central differences") {
  std::mt19937_64 rng(17);
  const Tensor x0 = random_tensor({3, 5}, rng);
  const Tensor w = random_tensor({3, 5}, rng);
  auto f = [&](const Tensor& x) {
    Tape tape;
    return tape.value(sum(mul(softmax_lastdim(tape.constant(x)), tape.constant(w))))[0];
  };
  Tape tape;
  const Var x = tape.variable(x0);
  tape.backward(sum(mul(softmax_lastdim(x), tape.constant(w))));
  const Tensor g = tape.grad(x);
  const double h = 1e-5;
  for (std::size_t i = 0; i < x0.size(); ++i) {
    Tensor up = x0, down = x0;
    up[i] += h;
    down[i] -= h;
    const double numeric = (f(up) - f(down)) / (2 * h);
    CHECK(std::abs(numeric - g[i]) / std::max({std::abs(g[i]), std::abs(numeric), 1e-12}) <= 1e-6);
  }
}

TEST_CASE("backward is bit-identical when repeated") {
  std::mt19937_64 rng(23);
  Tape tape;
  const Var a = tape.variable(random_tensor({6, 4}, rng));
  const Var b = tape.variable(random_tensor({4, 5}, rng));
  const Var y = sum(gelu(softmax_lastdim(matmul(a, b))));
  tape.backward(y);
  const Tensor ga = tape.grad(a), gb = tape.grad(b);
  tape.backward(y);
  CHECK(tape.grad(a) == ga);
  CHECK(tape.grad(b) == gb);
}

TEST_CASE("grad_check examples") {
  std::mt19937_64 rng(1);
  const std::vector<Tensor> p = {random_tensor({4, 3}, rng)};
  const ScalarProgram total = [](Tape&, std::span<const Var> v) { return sum(v[0]); };
  CHECK(grad_check(total, p).max_relative_error <= 1e-10);

  const std::vector<Tensor> q = {Tensor({2}, {1.0, 2.0})};
  const ScalarProgram squares = [](Tape&, std::span<const Var> v) { return sum(mul(v[0], v[0])); };
  const GradCheckReport r = grad_check(squares, q);
  CHECK(r.max_relative_error <= 1e-8);
  CHECK(r.entries_checked == 2);

  const ScalarProgram vector_out = [](Tape&, std::span<const Var> v) { return v[0]; };
  CHECK_THROWS_AS(grad_check(vector_out, q), ContractError);
  CHECK_THROWS_AS(grad_check(total, p, 0.0), ContractError);

  // A wrong backward rule is caught.
  const ScalarProgram wrong = [](Tape& tape, std::span<const Var> v) {
    const Var doubled = tape.record(tape.value(v[0]), {v[0]}, [v](Tape& t, const Tensor& g) {
      Tensor& acc = t.grad_buffer(v[0]);
      for (std::size_t i = 0; i < g.size(); ++i) acc[i] += 2.0 * g[i];
    });
    return sum(doubled);
  };
  CHECK(grad_check(wrong, p).max_relative_error > 0.4);
}

namespace {

// Weighted sum of an op's output, so every output entry carries a distinct weight.
Var weighted(Tape& tape, Var y, std::mt19937_64& rng) {
  return sum(mul(y, tape.constant(random_tensor(y.shape(), rng))));
}

struct OpCase {
  const char* name;
  std::function<std::vector<Tensor>(std::mt19937_64&)> inputs;
  std::function<Var(Tape&, std::span<const Var>)> op;
};

}  // namespace

TEST_CASE("every differentiable op passes grad_check over 100 seeds") {
  const std::size_t grid[] = {3, 4};
  const std::vector<OpCase> cases = {
      {"matmul", [](auto& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({4, 2}, r)}; },
       [](Tape&, auto v) { return matmul(v[0], v[1]); }},
      {"matmul_nt", [](auto& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({5, 4}, r)}; },
       [](Tape&, auto v) { return matmul_nt(v[0], v[1]); }},
      {"add", [](auto& r) { return std::vector{random_tensor({2, 3}, r), random_tensor({2, 3}, r)}; },
       [](Tape&, auto v) { return add(v[0], v[1]); }},
      {"sub", [](auto& r) { return std::vector{random_tensor({2, 3}, r), random_tensor({2, 3}, r)}; },
       [](Tape&, auto v) { return sub(v[0], v[1]); }},
      {"mul", [](auto& r) { return std::vector{random_tensor({2, 3}, r), random_tensor({2, 3}, r)}; },
       [](Tape&, auto v) { return mul(v[0], v[1]); }},
      {"scale", [](auto& r) { return std::vector{random_tensor({2, 3}, r)}; },
       [](Tape&, auto v) { return scale(v[0], -1.7); }},
      {"add_scalar", [](auto& r) { return std::vector{random_tensor({2, 3}, r)}; },
       [](Tape&, auto v) { return add_scalar(v[0], 0.3); }},
      {"exp", [](auto& r) { return std::vector{random_tensor({2, 3}, r)}; },
       [](Tape&, auto v) { return exp(v[0]); }},
      {"sqrt",
       [](auto& r) {
         Tensor t = random_tensor({2, 3}, r);
         for (double& x : t.values()) x = 0.5 + std::abs(x);
         return std::vector{t};
       },
       [](Tape&, auto v) { return sqrt(v[0]); }},
      {"gelu", [](auto& r) { return std::vector{random_tensor({2, 5}, r)}; },
       [](Tape&, auto v) { return gelu(v[0]); }},
      {"transpose", [](auto& r) { return std::vector{random_tensor({2, 3}, r)}; },
       [](Tape&, auto v) { return transpose(v[0]); }},
      {"reshape", [](auto& r) { return std::vector{random_tensor({2, 3}, r)}; },
       [](Tape&, auto v) { return reshape(v[0], {3, 2}); }},
      {"concat_cols", [](auto& r) { return std::vector{random_tensor({2, 3}, r), random_tensor({2, 1}, r)}; },
       [](Tape&, auto v) { return concat_cols(v); }},
      {"slice_cols", [](auto& r) { return std::vector{random_tensor({3, 5}, r)}; },
       [](Tape&, auto v) { return slice_cols(v[0], 1, 4); }},
      {"add_bias", [](auto& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({4}, r)}; },
       [](Tape&, auto v) { return add_bias(v[0], v[1]); }},
      {"sum", [](auto& r) { return std::vector{random_tensor({3, 4}, r)}; },
       [](Tape&, auto v) { return sum(v[0]); }},
      {"softmax", [](auto& r) { return std::vector{random_tensor({3, 4}, r)}; },
       [](Tape&, auto v) { return softmax_lastdim(v[0]); }},
      {"layer_norm",
       [](auto& r) {
         return std::vector{random_tensor({3, 4}, r), random_tensor({4}, r), random_tensor({4}, r)};
       },
       [](Tape&, auto v) { return layer_norm(v[0], v[1], v[2]); }},
      {"rms_norm", [](auto& r) { return std::vector{random_tensor({3, 4}, r), random_tensor({4}, r)}; },
       [](Tape&, auto v) { return rms_norm(v[0], v[1]); }},
      {"grid_gradient", [](auto& r) { return std::vector{random_tensor({12, 2}, r)}; },
       [&grid](Tape&, auto v) { return grid_gradient(v[0], grid); }},
  };
  for (const OpCase& c : cases) {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      std::mt19937_64 rng(seed);
      const std::vector<Tensor> in = c.inputs(rng);
      const std::uint64_t wseed = rng();
      const ScalarProgram program = [&](Tape& tape, std::span<const Var> v) {
        std::mt19937_64 wr(wseed);
        return weighted(tape, c.op(tape, v), wr);
      };
      worst = std::max(worst, grad_check(program, in).max_relative_error);
    }
    INFO(c.name << std::string(" worst ") << worst);
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("gelu value and slope stay accurate in both tails") {
  // Closed-form derivative in long double as the oracle; central differences
  // cannot resolve slopes of 1e-11 against an O(1) loss.
  const long double c = std::sqrt(2.0L / std::numbers::pi_v<long double>), k = 0.044715L;
  for (double x = -12.0; x <= 12.0; x += 0.37) {
    Tape tape;
    const Var v = tape.variable(Tensor({1}, {x}));
    const Var y = gelu(v);
    tape.backward(y);
    const long double xl = x;
    const long double u = c * (xl + k * xl * xl * xl);
    const long double one_plus = 2.0L / (1.0L + std::exp(-2.0L * u));
    const long double one_minus = 2.0L / (1.0L + std::exp(2.0L * u));
    const long double value = 0.5L * xl * one_plus;
    const long double slope =
        0.5L * one_plus + 0.5L * xl * one_minus * one_plus * c * (1.0L + 3.0L * k * xl * xl);
    const auto rel = [](long double a, long double b) {
      return static_cast<double>(std::fabs(a - b) / std::max(std::fabs(b), 1e-300L));
    };
    INFO("x = " << x);
    CHECK(rel(tape.value(y)[0], value) <= 1e-12);
    CHECK(rel(tape.grad(v)[0], slope) <= 1e-12);
  }
}

TEST_CASE("grid_gradient matches hand-computed differences") {
  const std::size_t grid[] = {4};
  Tensor ramp({4, 1}, {0.0, 1.0, 4.0, 9.0});
  const Tensor g = grid_gradient(ramp, grid);
  CHECK(g[0] == 1.0);   // one-sided
  CHECK(g[1] == 2.0);   // (4 - 0) / 2
  CHECK(g[2] == 4.0);   // (9 - 1) / 2
  CHECK(g[3] == 5.0);   // one-sided
}

TEST_CASE("flop counter records 2mkn per product") {
  std::mt19937_64 rng(2);
  Tape tape;
  const Var a = tape.constant(random_tensor({3, 4}, rng));
  const Var b = tape.constant(random_tensor({4, 5}, rng));
  ScopedFlopCounter counter;
  matmul(a, b);
  {
    FlopCategoryScope mixing(FlopCategory::mixing);
    matmul(a, b);
  }
  CHECK(counter.count().other == 2u * 3 * 4 * 5);
  CHECK(counter.count().mixing == 2u * 3 * 4 * 5);
}

TEST_CASE("tns round trip and corrupt payloads") {
  std::mt19937_64 rng(9);
  const Tensor t = random_tensor({2, 3, 4}, rng);
  const auto bytes = encode_tns(t);
  CHECK(bytes.size() == 4 + 1 + 3 * 8 + t.size() * 8);
  CHECK(bytes[0] == 'T');
  CHECK(bytes[4] == 3);
  CHECK(decode_tns(bytes) == t);
  auto bad = bytes;
  bad[0] = 'X';
  CHECK_THROWS_AS(decode_tns(bad), LoadError);
  bad = bytes;
  bad.pop_back();
  CHECK_THROWS_AS(decode_tns(bad), LoadError);
}

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), DimensionError);
  const Tensor t({2, 3}, 1.5);
  CHECK(t.size() == 6);
  CHECK(t.rows() == 2);
  CHECK(t.cols() == 3);
  CHECK(t.all_finite());
  Tensor n = t;
  n[2] = std::nan("");
  CHECK_FALSE(n.all_finite());
}
