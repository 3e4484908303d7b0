#include "lrsa/training.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "lrsa/errors.hpp"
#include "parallel.hpp"

namespace lrsa::training {

using model::LRSAConfig;
using model::ModelParams;
using lrsa::to_string;

std::string_view to_string(LossKind kind) {
  switch (kind) {
    case LossKind::rel_l2: return "rel_l2";
    case LossKind::rel_l2_plus_lg: return "rel_l2_plus_lg";
    case LossKind::mse: return "mse";
  }
  return "rel_l2";
}

LossKind parse_loss(std::string_view name) {
  for (LossKind k : {LossKind::rel_l2, LossKind::rel_l2_plus_lg, LossKind::mse}) {
    if (to_string(k) == name) return k;
  }
  throw UsageError("unknown loss '" + std::string(name) +
                   "' (expected rel_l2, rel_l2_plus_lg or mse)");
}

std::string_view to_string(Split split) {
  switch (split) {
    case Split::train: return "train";
    case Split::test: return "test";
    case Split::all: return "all";
  }
  return "test";
}

Split parse_split(std::string_view name) {
  for (Split s : {Split::train, Split::test, Split::all}) {
    if (to_string(s) == name) return s;
  }
  throw UsageError("unknown split '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (!(max_lr > 0.0)) throw ContractError("max_lr must be positive");
  if (batch_size == 0) throw ContractError("batch size must be at least 1");
  if (!(weight_decay >= 0.0)) throw ContractError("weight_decay must be non-negative");
  if (!(div_factor > 0.0) || !(final_div_factor > 0.0)) {
    throw ContractError("scheduler division factors must be positive");
  }
  if (!(pct_start >= 0.0 && pct_start <= 1.0)) throw ContractError("pct_start must be in [0, 1]");
  if (!(lg_weight >= 0.0)) throw ContractError("lg_weight must be non-negative");
  if (!(grad_clip >= 0.0)) throw ContractError("grad_clip must be non-negative");
}

void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads,
                OptimizerState& state, double lr, double weight_decay) {
  if (params.size() != grads.size()) {
    throw DimensionError("adamw_step: " + std::to_string(params.size()) + " parameters but " +
                         std::to_string(grads.size()) + " gradients");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) {
      throw DimensionError("adamw_step: gradient " + std::to_string(i) + " has shape " +
                           to_string(grads[i].shape()) + ", parameter has " +
                           to_string(params[i]->shape()));
    }
    if (!grads[i].all_finite()) {
      throw TrainingError("non-finite gradient for parameter " + std::to_string(i) +
                          " at optimizer step " + std::to_string(state.step + 1));
    }
  }
  if (state.m.empty()) {
    for (const Tensor* p : params) {
      state.m.emplace_back(p->shape());
      state.v.emplace_back(p->shape());
    }
  }
  if (state.m.size() != params.size()) {
    throw DimensionError("optimizer state does not match the parameter list");
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double c1 = 1.0 - std::pow(state.beta1, t);
  const double c2 = 1.0 - std::pow(state.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& p = *params[i];
    Tensor& m = state.m[i];
    Tensor& v = state.v[i];
    const Tensor& g = grads[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g[j];
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g[j] * g[j];
      const double mhat = m[j] / c1, vhat = v[j] / c2;
      p[j] -= lr * weight_decay * p[j];
      p[j] -= lr * mhat / (std::sqrt(vhat) + state.eps);
    }
  }
}

double onecycle_lr(std::size_t step, std::size_t total_steps, const TrainConfig& cfg) {
  if (total_steps == 0) throw ContractError("onecycle_lr needs total_steps >= 1");
  if (step > total_steps) throw ContractError("onecycle_lr step beyond total_steps");
  const double initial = cfg.max_lr / cfg.div_factor;
  const double final_lr = cfg.max_lr / cfg.final_div_factor;
  const double peak = cfg.pct_start * static_cast<double>(total_steps);
  const double s = static_cast<double>(step);
  auto cosine = [](double from, double to, double frac) {
    return to + (from - to) * 0.5 * (1.0 + std::cos(std::numbers::pi * frac));
  };
  if (s <= peak) return peak > 0.0 ? cosine(initial, cfg.max_lr, s / peak) : cfg.max_lr;
  const double rest = static_cast<double>(total_steps) - peak;
  return cosine(cfg.max_lr, final_lr, (s - peak) / rest);
}

// ---------------------------------------------------------------------------

Var sample_loss(Var pred, const Tensor& target, LossKind kind, double lg_weight,
                std::span<const std::size_t> grid) {
  Tape& tape = *pred.tape;
  if (pred.value().shape() != target.shape()) {
    throw DimensionError("loss: prediction " + to_string(pred.value().shape()) + " vs target " +
                         to_string(target.shape()));
  }
  auto sq_norm = [](const Tensor& t) {
    double s = 0.0;
    for (double x : t.values()) s += x * x;
    return s;
  };
  const Var diff = sub(pred, tape.constant(target));
  const Var sq = sum(mul(diff, diff));
  if (kind == LossKind::mse) return sq;
  const double tn = std::sqrt(sq_norm(target));
  if (tn == 0.0) throw DomainError("relative loss with a zero-norm target");
  Var loss = scale(sqrt(sq), 1.0 / tn);
  if (kind == LossKind::rel_l2_plus_lg) {
    const Tensor gt = grid_gradient(target, grid);
    const double gn = std::sqrt(sq_norm(gt));
    if (gn == 0.0) throw DomainError("gradient loss with a constant target");
    const Var gd = sub(grid_gradient(pred, grid), tape.constant(gt));
    loss = add(loss, scale(sqrt(sum(mul(gd, gd))), lg_weight / gn));
  }
  return loss;
}

namespace {

Tensor sample_slice(const Tensor& stacked, std::size_t s) {
  const std::size_t rows = stacked.dim(1), cols = stacked.dim(2);
  Tensor out({rows, cols});
  std::copy_n(stacked.data() + s * rows * cols, rows * cols, out.data());
  return out;
}

// Maps normalised network outputs to physical units on the tape.
Var denormalize_on_tape(Var y, const pde::ChannelStats& stats) {
  Tape& tape = *y.tape;
  const std::size_t c = stats.mean.size();
  Tensor diag({c, c});
  for (std::size_t k = 0; k < c; ++k) diag.at(k, k) = stats.stddev[k];
  return add_bias(matmul(y, tape.constant(diag)), tape.constant(Tensor({c}, stats.mean)));
}

Var forward_physical(Tape& tape, const model::ModelWeights<Var>& w, const LRSAConfig& cfg,
                     const pde::OperatorDataset& data, std::size_t s) {
  const Tensor x = pde::normalize(sample_slice(data.inputs, s), data.normalization.inputs);
  const Var y = model::backbone_forward(tape, w, cfg, data.coords, tape.constant(x));
  return denormalize_on_tape(y, data.normalization.targets);
}

std::vector<Tensor*> parameter_slots(ModelParams& params, const LRSAConfig& cfg) {
  std::vector<Tensor*> slots;
  model::for_each_weight(params, cfg, [&](const std::string&, Tensor& t) { slots.push_back(&t); });
  return slots;
}

std::vector<Tensor> take_gradients(Tape& tape, const model::ModelWeights<Var>& w,
                                   const LRSAConfig& cfg) {
  std::vector<Tensor> out;
  model::for_each_weight(w, cfg, [&](const std::string&, const Var& v) {
    out.push_back(tape.take_grad(v));
  });
  return out;
}

void check_compatible(const LRSAConfig& cfg, const pde::OperatorDataset& data) {
  if (data.count() == 0) throw ContractError("dataset is empty");
  if (cfg.in_channels != data.in_channels() || cfg.out_channels != data.out_channels() ||
      cfg.coord_dims != data.coords.dim(1)) {
    throw ContractError("model expects " + std::to_string(cfg.in_channels) + " -> " +
                        std::to_string(cfg.out_channels) + " channels on " +
                        std::to_string(cfg.coord_dims) + "-D coordinates; dataset provides " +
                        std::to_string(data.in_channels()) + " -> " +
                        std::to_string(data.out_channels()) + " on " +
                        std::to_string(data.coords.dim(1)) + "-D");
  }
}

}  // namespace

std::pair<std::size_t, std::size_t> split_range(const pde::OperatorDataset& data, Split split) {
  const std::size_t split_at = std::min(data.train_count, data.count());
  switch (split) {
    case Split::train: return {0, split_at};
    case Split::test: return {split_at, data.count()};
    case Split::all: return {0, data.count()};
  }
  return {0, 0};
}

Tensor predict(const ModelParams& params, const LRSAConfig& cfg, const pde::OperatorDataset& data,
               std::size_t begin, std::size_t end) {
  check_compatible(cfg, data);
  if (begin > end || end > data.count()) throw LookupError("sample range out of bounds");
  const std::size_t np = data.points(), c = cfg.out_channels;
  Tensor out({end - begin, np, c});
  parallel_for(end - begin, [&](std::size_t i) {
    Tape tape;
    const auto w = model::bind(tape, params, cfg);
    const Var y = forward_physical(tape, w, cfg, data, begin + i);
    std::copy_n(y.value().data(), np * c, out.data() + i * np * c);
  });
  return out;
}

Metrics compute_metrics(const Tensor& pred, const Tensor& target, const pde::OperatorDataset& data) {
  Metrics m;
  m.samples = pred.rank() == 3 ? pred.dim(0) : 1;
  if (pred.empty()) {
    m.samples = 0;
    return m;
  }
  m.rel_l2 = pde::relative_l2(pred, target);
  m.mse = pde::mse(pred, target);
  if (data.task == pde::Task::darcy2d) m.lg = pde::grad_metric_lg(pred, target, data.grid);
  return m;
}

Metrics evaluate(const model::Checkpoint& ckpt, const pde::OperatorDataset& data, Split split) {
  const auto [begin, end] = split_range(data, split);
  if (begin == end) throw ContractError("split '" + std::string(to_string(split)) + "' is empty");
  Tensor target({end - begin, data.points(), data.out_channels()});
  std::copy_n(data.targets.data() + begin * target.size() / (end - begin), target.size(),
              target.data());
  if (ckpt.kind == "oracle") return compute_metrics(target, target, data);
  return compute_metrics(predict(ckpt.params, ckpt.config, data, begin, end), target, data);
}

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << "epoch,train_loss,test_rel_l2,lr\n";
  char buf[128];
  for (const auto& r : history) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", r.epoch, r.train_loss,
                  r.test_rel_l2, r.lr);
    os << buf;
  }
  if (!os) throw IoError("failed writing " + path.string());
}

TrainResult train(const LRSAConfig& model_cfg, const pde::OperatorDataset& data,
                  const TrainConfig& cfg, const TrainOptions& options) {
  model_cfg.validate();
  cfg.validate();
  check_compatible(model_cfg, data);
  const auto [train_begin, train_end] = split_range(data, Split::train);
  const auto [test_begin, test_end] = split_range(data, Split::test);
  const std::size_t train_n = train_end - train_begin;
  if (train_n == 0) throw ContractError("training split is empty");

  TrainResult result;
  result.params = model::init_params(model_cfg, cfg.seed);
  if (cfg.epochs == 0) return result;

  const std::size_t batches = (train_n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = cfg.epochs * batches;
  std::vector<Tensor*> slots = parameter_slots(result.params, model_cfg);
  OptimizerState opt;

  Tensor test_target;
  if (test_end > test_begin) {
    test_target = Tensor({test_end - test_begin, data.points(), data.out_channels()});
    const std::size_t per = data.points() * data.out_channels();
    std::copy_n(data.targets.data() + test_begin * per, test_target.size(), test_target.data());
  }

  auto checkpoint = [&](std::size_t step) {
    if (!options.out_dir) return;
    model::save_checkpoint(*options.out_dir / "checkpoint",
                           {"lrsa", model_cfg, result.params, step});
    write_history_csv(result.history, *options.out_dir / "history.csv");
  };
  checkpoint(0);

  std::vector<std::size_t> order(train_n);
  std::vector<std::vector<Tensor>> sample_grads;
  std::vector<double> sample_losses;
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), train_begin);
    std::mt19937_64 shuffle_rng(pde::sample_seed(cfg.seed, epoch));
    std::shuffle(order.begin(), order.end(), shuffle_rng);

    double epoch_loss = 0.0;
    double lr = 0.0;
    for (std::size_t b = 0; b < batches; ++b) {
      const std::size_t first = b * cfg.batch_size;
      const std::size_t size = std::min(cfg.batch_size, train_n - first);
      sample_grads.assign(size, {});
      sample_losses.assign(size, 0.0);
      parallel_for(size, [&](std::size_t i) {
        const std::size_t s = order[first + i];
        Tape tape;
        const auto w = model::bind(tape, result.params, model_cfg);
        const Var pred = forward_physical(tape, w, model_cfg, data, s);
        const Var loss = sample_loss(pred, sample_slice(data.targets, s), cfg.loss, cfg.lg_weight,
                                     data.grid);
        tape.backward(loss);
        sample_losses[i] = loss.value()[0];
        sample_grads[i] = take_gradients(tape, w, model_cfg);
      });
      // Fixed accumulation order keeps results independent of the thread count.
      std::vector<Tensor> grads = std::move(sample_grads[0]);
      double batch_loss = sample_losses[0];
      for (std::size_t i = 1; i < size; ++i) {
        batch_loss += sample_losses[i];
        for (std::size_t p = 0; p < grads.size(); ++p) {
          const Tensor& g = sample_grads[i][p];
          for (std::size_t j = 0; j < g.size(); ++j) grads[p][j] += g[j];
        }
      }
      const double inv = 1.0 / static_cast<double>(size);
      batch_loss *= inv;
      for (auto& g : grads)
        for (double& x : g.values()) x *= inv;
      if (!std::isfinite(batch_loss) || batch_loss > 1e6) {
        throw TrainingError("training diverged at epoch " + std::to_string(epoch) + ", step " +
                            std::to_string(step + 1) + " (batch loss " +
                            std::to_string(batch_loss) + ")");
      }
      if (cfg.grad_clip > 0.0) {
        double norm2 = 0.0;
        for (const auto& g : grads)
          for (double x : g.values()) norm2 += x * x;
        const double norm = std::sqrt(norm2);
        if (norm > cfg.grad_clip) {
          const double f = cfg.grad_clip / norm;
          for (auto& g : grads)
            for (double& x : g.values()) x *= f;
        }
      }
      lr = onecycle_lr(step, total_steps, cfg);
      adamw_step(slots, grads, opt, lr, cfg.weight_decay);
      ++step;
      epoch_loss += batch_loss * static_cast<double>(size);
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = epoch_loss / static_cast<double>(train_n);
    rec.lr = lr;
    rec.test_rel_l2 = test_target.empty()
                          ? std::numeric_limits<double>::quiet_NaN()
                          : pde::relative_l2(predict(result.params, model_cfg, data, test_begin,
                                                     test_end),
                                             test_target);
    result.history.push_back(rec);
    if (options.on_epoch) options.on_epoch(rec);
    checkpoint(step);
  }
  result.steps = step;
  return result;
}

}  // namespace lrsa::training
