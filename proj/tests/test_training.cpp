#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>
#include <vector>

#include "doctest.h"
#include "lrsa/config.hpp"
#include "lrsa/errors.hpp"
#include "lrsa/training.hpp"
#include "test_util.hpp"

using namespace lrsa;
using namespace lrsa::training;
using lrsa::test::random_tensor;

namespace {

model::LRSAConfig tiny_model() {
  model::LRSAConfig cfg;
  cfg.depth = 1;
  cfg.width = 8;
  cfg.heads = 2;
  cfg.latents = 2;
  cfg.num_freqs = 2;
  return cfg;
}

TrainConfig quick_train(std::size_t epochs) {
  TrainConfig cfg;
  cfg.epochs = epochs;
  cfg.batch_size = 4;
  cfg.max_lr = 5e-3;
  cfg.seed = 3;
  return cfg;
}

struct ScopedEnv {
  ScopedEnv(const char* name, const char* value) : name_(name) {
    if (const char* old = std::getenv(name)) saved_ = old;
    setenv(name, value, 1);
  }
  ~ScopedEnv() {
    if (saved_.empty()) {
      unsetenv(name_);
    } else {
      setenv(name_, saved_.c_str(), 1);
    }
  }
  const char* name_;
  std::string saved_;
};

}  // namespace

TEST_CASE("adamw examples") {
  SUBCASE("zero gradient applies only the decay") {
    Tensor p({3}, {1.0, -2.0, 4.0});
    const Tensor before = p;
    OptimizerState st;
    Tensor* slots[] = {&p};
    const Tensor g[] = {Tensor({3})};
    adamw_step(slots, g, st, 0.1, 0.01);
    for (std::size_t i = 0; i < 3; ++i) CHECK(p[i] == before[i] * (1.0 - 0.1 * 0.01));
    CHECK(st.step == 1);
  }
  SUBCASE("first step from zero state") {
    Tensor p({1}, 0.0);
    OptimizerState st;
    Tensor* slots[] = {&p};
    const Tensor g[] = {Tensor({1}, 0.5)};
    adamw_step(slots, g, st, 1e-3, 0.0);
    CHECK(p[0] == doctest::Approx(-1e-3 * 0.5 / (0.5 + 1e-8)).epsilon(1e-12));
  }
  SUBCASE("constant gradient gives unit-size steps") {
    Tensor p({1}, 0.0);
    OptimizerState st;
    Tensor* slots[] = {&p};
    const Tensor g[] = {Tensor({1}, -3.0)};
    double last = 0.0;
    for (int k = 0; k < 2000; ++k) {
      last = p[0];
      adamw_step(slots, g, st, 1e-2, 0.0);
    }
    CHECK(p[0] - last == doctest::Approx(1e-2).epsilon(1e-6));
  }
  SUBCASE("matches a scalar reference") {
    std::mt19937_64 rng(5);
    std::normal_distribution<double> dist;
    Tensor p({1}, 0.7);
    double ref = 0.7, m = 0.0, v = 0.0;
    OptimizerState st;
    Tensor* slots[] = {&p};
    for (int t = 1; t <= 200; ++t) {
      const double g = dist(rng), lr = 1e-2 * (1.0 + 0.5 * std::sin(t)), wd = 0.05;
      const Tensor grads[] = {Tensor({1}, g)};
      adamw_step(slots, grads, st, lr, wd);
      m = 0.9 * m + 0.1 * g;
      v = 0.999 * v + 0.001 * g * g;
      const double mh = m / (1.0 - std::pow(0.9, t)), vh = v / (1.0 - std::pow(0.999, t));
      ref = ref - lr * wd * ref - lr * mh / (std::sqrt(vh) + 1e-8);
      CHECK(std::abs(p[0] - ref) <= 1e-12);
    }
  }
  SUBCASE("non-finite gradients abort") {
    Tensor p({2}, 1.0);
    OptimizerState st;
    Tensor* slots[] = {&p};
    const Tensor g[] = {Tensor({2}, {0.1, NAN})};
    CHECK_THROWS_AS(adamw_step(slots, g, st, 1e-3, 0.0), TrainingError);
    const Tensor wrong[] = {Tensor({3})};
    CHECK_THROWS_AS(adamw_step(slots, wrong, st, 1e-3, 0.0), DimensionError);
  }
}

TEST_CASE("onecycle schedule") {
  TrainConfig cfg;
  cfg.max_lr = 1e-3;
  const std::size_t total = 1000;
  CHECK(onecycle_lr(0, total, cfg) == doctest::Approx(1e-3 / 25.0).epsilon(1e-15));
  CHECK(onecycle_lr(300, total, cfg) == doctest::Approx(1e-3).epsilon(1e-15));
  CHECK(onecycle_lr(total, total, cfg) == doctest::Approx(1e-3 / 1e4).epsilon(1e-15));
  double max_jump = 0.0, peak = 0.0;
  for (std::size_t s = 0; s <= total; ++s) {
    const double lr = onecycle_lr(s, total, cfg);
    peak = std::max(peak, lr);
    if (s > 0) max_jump = std::max(max_jump, std::abs(lr - onecycle_lr(s - 1, total, cfg)));
  }
  CHECK(peak == doctest::Approx(1e-3).epsilon(1e-15));
  // A cosine over 300 steps moves at most pi/2 * range / 300 per step.
  CHECK(max_jump <= M_PI / 2.0 * 1e-3 / 300.0);
  CHECK_THROWS_AS(onecycle_lr(0, 0, cfg), ContractError);
  CHECK_THROWS_AS(onecycle_lr(11, 10, cfg), ContractError);
}

TEST_CASE("training runs") {
  const pde::OperatorDataset data = pde::make_dataset(pde::Task::poisson1d, 10, 16, 1);
  const model::LRSAConfig mcfg = tiny_model();

  SUBCASE("zero epochs return the initial parameters") {
    const TrainResult r = train(mcfg, data, quick_train(0));
    CHECK(r.history.empty());
    CHECK(model::flatten_params(r.params, mcfg) ==
          model::flatten_params(model::init_params(mcfg, 3), mcfg));
  }

  SUBCASE("deterministic and independent of the thread cap") {
    const TrainResult a = train(mcfg, data, quick_train(3));
    TrainResult b;
    {
      ScopedEnv env("LRSA_THREADS", "1");
      b = train(mcfg, data, quick_train(3));
    }
    CHECK(model::flatten_params(a.params, mcfg) == model::flatten_params(b.params, mcfg));
    REQUIRE(a.history.size() == 3);
    for (std::size_t e = 0; e < 3; ++e) {
      CHECK(a.history[e].train_loss == b.history[e].train_loss);
      CHECK(a.history[e].test_rel_l2 == b.history[e].test_rel_l2);
      CHECK(a.history[e].epoch == e + 1);
    }
    CHECK(a.steps == 3 * 2);
  }

  SUBCASE("a zero target is learned") {
    const pde::OperatorDataset many = pde::make_dataset(pde::Task::poisson1d, 256, 16, 1);
    const pde::OperatorDataset zero =
        pde::assemble_dataset(pde::Task::poisson1d, 16, 0, {16}, many.coords, many.inputs,
                              Tensor(many.targets.shape()), 256);
    model::LRSAConfig cfg = mcfg;
    cfg.zero_init_residual = true;
    TrainConfig tc = quick_train(50);
    tc.loss = LossKind::mse;
    tc.batch_size = 1;
    tc.max_lr = 1e-2;
    tc.weight_decay = 0.0;
    const TrainResult r = train(cfg, zero, tc);
    REQUIRE(r.history.size() == 50);
    CHECK(r.history.back().train_loss < 1e-6);
  }

  SUBCASE("outputs and checkpoints") {
    const auto dir = std::filesystem::temp_directory_path() / "lrsa_test_train";
    std::filesystem::remove_all(dir);
    std::size_t callbacks = 0;
    const TrainResult r =
        train(mcfg, data, quick_train(2), {dir, [&](const EpochRecord&) { ++callbacks; }});
    CHECK(callbacks == 2);
    std::ifstream is(dir / "history.csv");
    std::string header;
    std::getline(is, header);
    CHECK(header == "epoch,train_loss,test_rel_l2,lr");
    const model::Checkpoint ck = model::load_checkpoint(dir / "checkpoint");
    CHECK(ck.step == r.steps);
    CHECK(model::flatten_params(ck.params, mcfg) == model::flatten_params(r.params, mcfg));
    std::filesystem::remove_all(dir);
  }

  SUBCASE("divergence keeps the last good checkpoint") {
    const auto dir = std::filesystem::temp_directory_path() / "lrsa_test_diverge";
    std::filesystem::remove_all(dir);
    TrainConfig cfg = quick_train(20);
    cfg.loss = LossKind::mse;
    cfg.max_lr = 1e4;
    cfg.div_factor = 1.0;
    CHECK_THROWS_AS(train(mcfg, data, cfg, {dir, {}}), TrainingError);
    CHECK(std::filesystem::exists(dir / "checkpoint" / "manifest.json"));
    const model::Checkpoint ck = model::load_checkpoint(dir / "checkpoint");
    for (const Tensor& t : model::flatten_params(ck.params, mcfg)) CHECK(t.all_finite());
    std::filesystem::remove_all(dir);
  }

  SUBCASE("incompatible model") {
    model::LRSAConfig bad = mcfg;
    bad.in_channels = 2;
    CHECK_THROWS_AS(train(bad, data, quick_train(1)), ContractError);
  }
}

TEST_CASE("evaluation") {
  const pde::OperatorDataset data = pde::make_dataset(pde::Task::darcy2d, 6, 8, 2);
  model::Checkpoint ckpt;
  ckpt.config = tiny_model();
  ckpt.config.coord_dims = 2;
  ckpt.params = model::init_params(ckpt.config, 9);

  SUBCASE("repeatable") {
    const Metrics a = evaluate(ckpt, data, Split::train);
    const Metrics b = evaluate(ckpt, data, Split::train);
    CHECK(a.rel_l2 == b.rel_l2);
    CHECK(a.mse == b.mse);
    CHECK(a.lg == b.lg);
    CHECK(a.samples == 5);
  }

  SUBCASE("oracle predictions score zero") {
    model::Checkpoint oracle = ckpt;
    oracle.kind = "oracle";
    const Metrics m = evaluate(oracle, data, Split::all);
    CHECK(m.rel_l2 == 0.0);
    CHECK(m.mse == 0.0);
    CHECK(m.lg.value() == 0.0);
  }

  SUBCASE("metrics agree with scalar loops") {
    const auto [begin, end] = split_range(data, Split::test);
    const Tensor pred = predict(ckpt.params, ckpt.config, data, begin, end);
    const Metrics m = evaluate(ckpt, data, Split::test);
    const std::size_t per = data.points();
    double rel = 0.0, sq = 0.0;
    for (std::size_t s = begin; s < end; ++s) {
      double num = 0.0, den = 0.0;
      for (std::size_t i = 0; i < per; ++i) {
        const double d = pred[(s - begin) * per + i] - data.targets[s * per + i];
        num += d * d;
        den += data.targets[s * per + i] * data.targets[s * per + i];
      }
      rel += std::sqrt(num / den);
      sq += num;
    }
    CHECK(m.samples == end - begin);
    CHECK(std::abs(m.rel_l2 - rel / (end - begin)) <= 1e-13);
    CHECK(std::abs(m.mse - sq / (end - begin)) <= 1e-13 * std::max(1.0, m.mse));
  }

  SUBCASE("splits") {
    CHECK(split_range(data, Split::train) == std::pair<std::size_t, std::size_t>{0, 5});
    CHECK(split_range(data, Split::test) == std::pair<std::size_t, std::size_t>{5, 6});
    CHECK_THROWS_AS(parse_split("valid"), UsageError);
  }
}

TEST_CASE("config files") {
  const RunConfig cfg = parse_config(
      "# comment\n"
      "depth = 3\n"
      "width=32\n"
      "  M = 4  \n"
      "heads = 2\n"
      "loss = rel_l2_plus_lg\n"
      "max_lr = 2e-3\n"
      "variant = symmetric_tied\n"
      "\n");
  CHECK(cfg.model.depth == 3);
  CHECK(cfg.model.width == 32);
  CHECK(cfg.model.latents == 4);
  CHECK(cfg.model.variant == model::Variant::symmetric_tied);
  CHECK(cfg.train.loss == LossKind::rel_l2_plus_lg);
  CHECK(cfg.train.max_lr == 2e-3);
  CHECK(cfg.train.weight_decay == 1e-5);

  const RunConfig back = parse_config(format_config(cfg));
  CHECK(back.model == cfg.model);
  CHECK(back.train == cfg.train);

  auto message = [](const char* text) {
    try {
      parse_config(text);
    } catch (const UsageError& e) {
      return std::string(e.what());
    }
    return std::string();
  };
  CHECK(message("depth = 2\ncolour = red\n").find("line 2") != std::string::npos);
  CHECK(message("width = -4\n").find("line 1") != std::string::npos);
  CHECK(message("no equals sign\n").find("line 1") != std::string::npos);
  CHECK(!message("width = 10\nheads = 4\n").empty());
  CHECK_THROWS_AS(load_config("/nonexistent/run.cfg"), IoError);
}
