#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "lrsa/model.hpp"
#include "lrsa/pde.hpp"
#include "lrsa/tensor.hpp"

namespace lrsa::training {

enum class LossKind { rel_l2, rel_l2_plus_lg, mse };

std::string_view to_string(LossKind kind);
LossKind parse_loss(std::string_view name);

struct TrainConfig {
  double max_lr = 1e-3;
  double weight_decay = 1e-5;
  std::size_t epochs = 200;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  LossKind loss = LossKind::rel_l2;
  double lg_weight = 0.1;
  double div_factor = 25.0;
  double final_div_factor = 1e4;
  double pct_start = 0.3;
  double grad_clip = 0.0;  // global-norm clip; 0 disables

  void validate() const;
  friend bool operator==(const TrainConfig&, const TrainConfig&) = default;
};

struct OptimizerState {
  std::vector<Tensor> m, v;
  std::size_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
};

/// One AdamW update in place: p <- p - lr*wd*p - lr * m_hat / (sqrt(v_hat) + eps).
/// Moments are created on the first call.
void adamw_step(std::span<Tensor* const> params, std::span<const Tensor> grads,
                OptimizerState& state, double lr, double weight_decay);

/// Cosine warm-up from max_lr/div_factor to max_lr over pct_start*total_steps,
/// then cosine annealing to max_lr/final_div_factor at total_steps.
double onecycle_lr(std::size_t step, std::size_t total_steps, const TrainConfig& cfg);

struct EpochRecord {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  double test_rel_l2 = 0.0;
  double lr = 0.0;
};

struct TrainResult {
  model::ModelParams params;
  std::vector<EpochRecord> history;
  std::size_t steps = 0;
};

struct TrainOptions {
  /// When set: history.csv and checkpoint/ are written here; the checkpoint
  /// is refreshed after every epoch so a diverged run keeps its last good state.
  std::optional<std::filesystem::path> out_dir;
  std::function<void(const EpochRecord&)> on_epoch;
};

/// Trains from init_params(model_cfg, cfg.seed) on samples [0, train_count)
/// and reports the relative L2 on the remaining samples after every epoch.
TrainResult train(const model::LRSAConfig& model_cfg, const pde::OperatorDataset& data,
                  const TrainConfig& cfg, const TrainOptions& options = {});

/// Per-sample training loss in physical units, on the tape.
Var sample_loss(Var pred, const Tensor& target, LossKind kind, double lg_weight,
                std::span<const std::size_t> grid);

enum class Split { train, test, all };

std::string_view to_string(Split split);
Split parse_split(std::string_view name);

/// Sample index range of a split.
std::pair<std::size_t, std::size_t> split_range(const pde::OperatorDataset& data, Split split);

/// Model predictions in physical units for samples [begin, end), shape
/// [S x N x C_out].
Tensor predict(const model::ModelParams& params, const model::LRSAConfig& cfg,
               const pde::OperatorDataset& data, std::size_t begin, std::size_t end);

struct Metrics {
  std::size_t samples = 0;
  double rel_l2 = 0.0;
  double mse = 0.0;
  std::optional<double> lg;  // darcy2d only
};

Metrics compute_metrics(const Tensor& pred, const Tensor& target, const pde::OperatorDataset& data);
Metrics evaluate(const model::Checkpoint& ckpt, const pde::OperatorDataset& data, Split split);

void write_history_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path);

}  // namespace lrsa::training
