#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <vector>

#include "doctest.h"
#include "lrsa/errors.hpp"
#include "lrsa/nn.hpp"
#include "test_util.hpp"

using namespace lrsa;
using lrsa::test::max_diff;
using lrsa::test::naive_matmul;
using lrsa::test::naive_sdpa;
using lrsa::test::random_tensor;

namespace {

// Per-row FFN oracle: gelu(x W1 + b1) W2 + b2 for a single row.
Tensor ffn_row_oracle(const Tensor& row, const nn::FFNParams& p) {
  Tensor h = naive_matmul(row, p.w1);
  for (std::size_t j = 0; j < h.size(); ++j) h[j] += p.b1[j];
  Tensor y = naive_matmul(test::naive_gelu(h), p.w2);
  for (std::size_t j = 0; j < y.size(); ++j) y[j] += p.b2[j];
  return y;
}

Tensor row_of(const Tensor& a, std::size_t i) {
  Tensor r({1, a.cols()});
  for (std::size_t j = 0; j < a.cols(); ++j) r[j] = a.at(i, j);
  return r;
}

}  // namespace

TEST_CASE("positional encoding examples") {
  const Tensor x = Tensor::from_rows({{0.0}, {1.0}, {0.25}});
  const Tensor pe = nn::positional_encoding(x, 3);
  CHECK(pe.shape() == Shape{3, 6});
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(pe.at(0, 2 * j) == 0.0);
    CHECK(pe.at(0, 2 * j + 1) == 1.0);
  }
  CHECK(std::abs(pe.at(1, 0)) <= 1e-15);
  CHECK(pe.at(1, 1) == -1.0);
  CHECK(pe.at(2, 2) == doctest::Approx(1.0).epsilon(1e-15));  // sin(2 pi 0.25)

  // Two coordinates: the second block starts after 2 * num_freqs columns.
  const Tensor pe2 = nn::positional_encoding(Tensor::from_rows({{0.0, 0.5}}), 2);
  CHECK(pe2.shape() == Shape{1, 8});
  CHECK(pe2.at(0, 4) == doctest::Approx(1.0).epsilon(1e-15));  // sin(pi 0.5)
  CHECK_THROWS_AS(nn::positional_encoding(x, 0), ContractError);
}

TEST_CASE("lift examples") {
  std::mt19937_64 rng(4);
  const Tensor f = random_tensor({5, 2}, rng);
  const Tensor pe = random_tensor({5, 4}, rng);
  nn::FFNParams p = nn::init_ffn(6, 12, 8, rng);
  {
    nn::FFNParams z = p;
    z.w1 = Tensor(z.w1.shape());
    z.w2 = Tensor(z.w2.shape());
    z.b2 = random_tensor({8}, rng);
    Tape tape;
    const Tensor y =
        tape.value(nn::lift(tape.constant(f), tape.constant(pe), nn::bind(tape, z)));
    for (std::size_t i = 0; i < 5; ++i)
      for (std::size_t j = 0; j < 8; ++j) CHECK(y.at(i, j) == z.b2[j]);
  }
  Tensor f2 = f, pe2 = pe;
  for (std::size_t j = 0; j < 2; ++j) f2.at(3, j) = f2.at(1, j);
  for (std::size_t j = 0; j < 4; ++j) pe2.at(3, j) = pe2.at(1, j);
  p.b1 = random_tensor({12}, rng);
  p.b2 = random_tensor({8}, rng);
  Tape tape;
  const Tensor y = tape.value(nn::lift(tape.constant(f2), tape.constant(pe2), nn::bind(tape, p)));
  CHECK(max_diff(row_of(y, 1), row_of(y, 3)) == 0.0);
  for (std::size_t i = 0; i < 5; ++i) {
    Tensor joined({1, 6});
    for (std::size_t j = 0; j < 2; ++j) joined[j] = f2.at(i, j);
    for (std::size_t j = 0; j < 4; ++j) joined[2 + j] = pe2.at(i, j);
    CHECK(max_diff(row_of(y, i), ffn_row_oracle(joined, p)) <= 1e-13);
  }
  CHECK_THROWS_AS(nn::lift(tape.constant(f), tape.constant(Tensor({5, 3})), nn::bind(tape, p)),
                  DimensionError);
}

TEST_CASE("sdpa examples") {
  std::mt19937_64 rng(8);
  Tape tape;
  const Tensor q = random_tensor({3, 4}, rng);
  const Tensor v1 = random_tensor({1, 5}, rng);
  const Tensor one = tape.value(
      nn::sdpa(tape.constant(q), tape.constant(random_tensor({1, 4}, rng)), tape.constant(v1)));
  for (std::size_t i = 0; i < 3; ++i) CHECK(max_diff(row_of(one, i), v1) == 0.0);

  const Tensor v = random_tensor({6, 5}, rng);
  const Tensor uniform =
      tape.value(nn::sdpa(tape.constant(q), tape.constant(Tensor({6, 4})), tape.constant(v)));
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 5; ++j) {
      double mean = 0.0;
      for (std::size_t r = 0; r < 6; ++r) mean += v.at(r, j) / 6.0;
      CHECK(std::abs(uniform.at(i, j) - mean) <= 1e-14);
    }

  const Tensor q2 = Tensor::from_rows({{0.3, -1.2}, {0.7, 0.4}});
  const Tensor k2 = Tensor::from_rows({{1.1, 0.5}, {-0.2, 0.9}});
  const Tensor v2 = Tensor::from_rows({{2.0, -1.0}, {0.5, 3.0}});
  const Tensor got = tape.value(nn::sdpa(tape.constant(q2), tape.constant(k2), tape.constant(v2)));
  CHECK(max_diff(got, naive_sdpa(q2, k2, v2, 1.0 / std::sqrt(2.0))) <= 1e-15);

  CHECK_THROWS_AS(nn::sdpa(tape.constant(q), tape.constant(Tensor({0, 4})),
                           tape.constant(Tensor({0, 5}))),
                  ContractError);
  CHECK_THROWS_AS(nn::sdpa(tape.constant(q), tape.constant(Tensor({2, 3})),
                           tape.constant(Tensor({2, 5}))),
                  DimensionError);
}

TEST_CASE("sdpa weight rows are distributions and joint K/V permutations are invisible") {
  std::mt19937_64 rng(12);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t m = 1 + rng() % 6, n = 1 + rng() % 10;
    const Tensor q = random_tensor({m, 4}, rng, 2.0);
    const Tensor k = random_tensor({n, 4}, rng, 2.0);
    const Tensor v = random_tensor({n, 3}, rng);
    Tape tape;
    nn::AttentionTrace trace;
    const Tensor y =
        tape.value(nn::sdpa(tape.constant(q), tape.constant(k), tape.constant(v), {}, &trace));
    const Tensor& w = trace.weights().at(0);
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (double x : w.row(i)) {
        CHECK(x >= 0.0);
        s += x;
      }
      CHECK(std::abs(s - 1.0) <= 1e-12);
    }
    std::vector<std::size_t> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    const Tensor yp = tape.value(nn::sdpa(tape.constant(q),
                                          tape.constant(test::permute_rows(k, perm)),
                                          tape.constant(test::permute_rows(v, perm))));
    CHECK(max_diff(y, yp) <= 1e-12);
  }
}

TEST_CASE("multi-head attention against per-head oracles") {
  std::mt19937_64 rng(21);
  const std::size_t d = 6;
  const Tensor qin = random_tensor({4, d}, rng);
  const Tensor kvin = random_tensor({7, d}, rng);
  nn::MHAParams p = nn::init_attention(d, rng);

  SUBCASE("one head reduces to sdpa of the projections") {
    Tape tape;
    const Tensor y = tape.value(
        nn::multi_head_attention(tape.constant(qin), tape.constant(kvin), nn::bind(tape, p), 1));
    const Tensor ref = naive_matmul(
        naive_sdpa(naive_matmul(qin, p.wq), naive_matmul(kvin, p.wk), naive_matmul(kvin, p.wv),
                   1.0 / std::sqrt(static_cast<double>(d))),
        p.wo);
    CHECK(max_diff(y, ref) <= 1e-12);

    nn::MHAParams id = p;
    id.wo = Tensor::identity(d);
    const Tensor yi = tape.value(
        nn::multi_head_attention(tape.constant(qin), tape.constant(kvin), nn::bind(tape, id), 1));
    const Tensor s = tape.value(nn::sdpa(tape.constant(naive_matmul(qin, p.wq)),
                                         tape.constant(naive_matmul(kvin, p.wk)),
                                         tape.constant(naive_matmul(kvin, p.wv))));
    CHECK(max_diff(yi, s) <= 1e-12);
  }

  SUBCASE("heads are independent half-width attentions") {
    Tape tape;
    const Tensor y = tape.value(
        nn::multi_head_attention(tape.constant(qin), tape.constant(kvin), nn::bind(tape, p), 2));
    const Tensor q = naive_matmul(qin, p.wq), k = naive_matmul(kvin, p.wk),
                 v = naive_matmul(kvin, p.wv);
    Tensor merged({4, d});
    for (std::size_t h = 0; h < 2; ++h) {
      const Tensor o = naive_sdpa(test::naive_columns(q, 3 * h, 3 * h + 3),
                                  test::naive_columns(k, 3 * h, 3 * h + 3),
                                  test::naive_columns(v, 3 * h, 3 * h + 3), 1.0 / std::sqrt(3.0));
      for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t j = 0; j < 3; ++j) merged.at(i, 3 * h + j) = o.at(i, j);
    }
    CHECK(max_diff(y, naive_matmul(merged, p.wo)) <= 1e-12);
  }

  SUBCASE("key/value order does not matter") {
    std::vector<std::size_t> perm = {3, 0, 6, 1, 5, 2, 4};
    Tape tape;
    const auto w = nn::bind(tape, p);
    const Tensor y = tape.value(nn::multi_head_attention(tape.constant(qin), tape.constant(kvin), w, 3));
    const Tensor yp = tape.value(nn::multi_head_attention(
        tape.constant(qin), tape.constant(test::permute_rows(kvin, perm)), w, 3));
    CHECK(max_diff(y, yp) <= 1e-12);
  }

  SUBCASE("errors") {
    Tape tape;
    const auto w = nn::bind(tape, p);
    CHECK_THROWS_AS(nn::multi_head_attention(tape.constant(qin), tape.constant(kvin), w, 4),
                    ContractError);
    CHECK_THROWS_AS(
        nn::multi_head_attention(tape.constant(qin), tape.constant(Tensor({7, 5})), w, 2),
        DimensionError);
  }
}

TEST_CASE("ffn examples") {
  std::mt19937_64 rng(31);
  nn::FFNParams p = nn::init_ffn(4, 8, 4, rng);
  p.b1 = random_tensor({8}, rng);
  p.b2 = random_tensor({4}, rng);
  Tensor x = random_tensor({5, 4}, rng);
  for (std::size_t j = 0; j < 4; ++j) x.at(4, j) = x.at(0, j);
  Tape tape;
  const Tensor y = tape.value(nn::ffn_apply(tape.constant(x), nn::bind(tape, p)));
  CHECK(max_diff(row_of(y, 0), row_of(y, 4)) == 0.0);
  for (std::size_t i = 0; i < 5; ++i) CHECK(max_diff(row_of(y, i), ffn_row_oracle(row_of(x, i), p)) <= 1e-13);

  nn::FFNParams z = p;
  z.w2 = Tensor(z.w2.shape());
  const Tensor yz = tape.value(nn::ffn_apply(tape.constant(x), nn::bind(tape, z)));
  for (std::size_t i = 0; i < 5; ++i)
    for (std::size_t j = 0; j < 4; ++j) CHECK(yz.at(i, j) == p.b2[j]);
  CHECK_THROWS_AS(nn::ffn_apply(tape.constant(Tensor({2, 3})), nn::bind(tape, p)), DimensionError);
}

TEST_CASE("initialisation statistics") {
  std::mt19937_64 rng(77);
  const Tensor w = nn::init_weight(256, 256, rng);
  double mean = 0.0, sq = 0.0;
  for (double v : w.values()) {
    mean += v;
    sq += v * v;
  }
  mean /= w.size();
  const double var = sq / w.size() - mean * mean;
  CHECK(std::abs(mean) <= 3e-3);
  CHECK(var == doctest::Approx(1.0 / 256.0).epsilon(0.02));
  const nn::FFNParams f = nn::init_ffn(3, 5, 2, rng);
  for (double v : f.b1.values()) CHECK(v == 0.0);
  const auto n = nn::init_norm(4, nn::NormKind::layer_norm);
  for (double v : n.gain.values()) CHECK(v == 1.0);
  for (double v : n.bias.values()) CHECK(v == 0.0);
  CHECK(nn::init_norm(4, nn::NormKind::rms_norm).bias.empty());
}

TEST_CASE("attention trace replays frozen weights") {
  std::mt19937_64 rng(5);
  const Tensor q = random_tensor({3, 4}, rng), k = random_tensor({5, 4}, rng);
  const Tensor v = random_tensor({5, 2}, rng), v2 = random_tensor({5, 2}, rng);
  nn::AttentionTrace trace;
  Tape tape;
  nn::sdpa(tape.constant(q), tape.constant(k), tape.constant(v), {}, &trace);
  trace.start_replay();
  // Keys are ignored on replay: the recorded pattern drives the new values.
  const Tensor y = tape.value(
      nn::sdpa(tape.constant(q), tape.constant(random_tensor({5, 4}, rng)), tape.constant(v2), {}, &trace));
  CHECK(max_diff(y, naive_matmul(trace.weights()[0], v2)) <= 1e-14);
  CHECK_THROWS_AS(
      nn::sdpa(tape.constant(q), tape.constant(k), tape.constant(v), {}, &trace), ContractError);
}

TEST_CASE("primitives pass grad_check") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    const std::size_t d = 4;
    const nn::MHAParams a = nn::init_attention(d, rng);
    const nn::FFNParams f = nn::init_ffn(d, 6, d, rng);
    const Tensor qin = random_tensor({3, d}, rng), kvin = random_tensor({5, d}, rng);
    const Tensor w = random_tensor({3, d}, rng);
    std::vector<Tensor> params = {a.wq, a.wk, a.wv, a.wo, f.w1, f.b1, f.w2, f.b2,
                                  Tensor({d}, 1.0), Tensor({d}), qin, kvin};
    const ScalarProgram program = [&](Tape& tape, std::span<const Var> v) {
      const nn::AttentionWeights<Var> aw{v[0], v[1], v[2], v[3]};
      const nn::FeedForwardWeights<Var> fw{v[4], v[5], v[6], v[7]};
      const nn::NormWeights<Var> nw{v[8], v[9]};
      const Var kv = nn::normalize(v[11], nw, nn::NormKind::layer_norm);
      const Var att = nn::multi_head_attention(v[10], kv, aw, 2);
      return sum(mul(nn::ffn_apply(att, fw), tape.constant(w)));
    };
    const GradCheckReport r = grad_check(program, params);
    INFO("seed " << seed);
    CHECK(r.max_relative_error <= 1e-5);
  }
}
