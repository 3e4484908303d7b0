#include "lrsa/lab.hpp"

#include <algorithm>
#include <chrono>
#include <numeric>
#include <random>

#include "lrsa/errors.hpp"
#include "lrsa/nn.hpp"
#include "lrsa/pde.hpp"

namespace lrsa::lab {

using model::LRSAConfig;

Tensor interior_grid(std::size_t n, std::size_t dims) {
  if (n == 0 || dims == 0) throw ContractError("interior_grid needs n >= 1 and dims >= 1");
  std::size_t total = 1;
  for (std::size_t d = 0; d < dims; ++d) total *= n;
  Tensor coords({total, dims});
  const double h = 1.0 / static_cast<double>(n + 1);
  for (std::size_t i = 0; i < total; ++i) {
    std::size_t rem = i;
    for (std::size_t d = dims; d-- > 0;) {
      coords.at(i, d) = static_cast<double>(rem % n + 1) * h;
      rem /= n;
    }
  }
  return coords;
}

ModelKernelAnalysis analyze_model_kernel(const model::Checkpoint& ckpt, std::size_t n,
                                         std::uint64_t seed, std::size_t layer,
                                         std::size_t out_channel, std::size_t in_channel,
                                         bool probe) {
  if (ckpt.kind != "lrsa") throw ContractError("kernel analysis needs a trained LRSA checkpoint");
  const LRSAConfig& cfg = ckpt.config;
  if (layer >= cfg.depth) {
    throw LookupError("layer " + std::to_string(layer) + " does not exist (depth " +
                      std::to_string(cfg.depth) + ")");
  }
  const Tensor coords = interior_grid(n, cfg.coord_dims);
  const std::size_t np = coords.dim(0);
  if (np > model::kMaxKernelPoints) {
    throw ResourceError("induced kernel limited to " + std::to_string(model::kMaxKernelPoints) +
                        " points, requested " + std::to_string(np));
  }
  Tensor features({np, cfg.in_channels});
  for (std::size_t c = 0; c < cfg.in_channels; ++c) {
    const Tensor f = pde::sample_smooth_field(coords, pde::kFieldLengthScale,
                                              pde::sample_seed(seed, c));
    for (std::size_t i = 0; i < np; ++i) features.at(i, c) = f[i];
  }
  Tape tape;
  const auto w = model::bind(tape, ckpt.params, cfg);
  std::vector<Var> inputs;
  model::backbone_forward(tape, w, cfg, coords, tape.constant(features), &inputs);
  const Tensor& h = inputs[layer].value();
  const model::LayerParams& params = ckpt.params.layers[layer];

  const model::InducedKernel k =
      model::materialize_induced_kernel(params, cfg, h, coords, out_channel, in_channel);
  ModelKernelAnalysis out;
  out.points = np;
  out.layer = layer;
  out.out_channel = out_channel;
  out.in_channel = in_channel;
  out.rank_bound = k.rank_bound;
  out.report = spectral::spectral_report(k.kernel);
  const auto& s = out.report.singular_values;
  if (s.size() > k.rank_bound && s[0] > 0.0) out.sigma_ratio_after_bound = s[k.rank_bound] / s[0];
  if (probe) {
    std::vector<std::size_t> cols(np);
    std::iota(cols.begin(), cols.end(), 0);
    const Tensor probed =
        model::probe_induced_kernel(params, cfg, h, coords, out_channel, in_channel, cols);
    const double scale = std::max(max_abs(k.kernel), 1e-300);
    out.probe_mismatch = max_abs_diff(k.kernel, probed) / scale;
  }
  return out;
}

spectral::KernelReport analyze_green1d(std::size_t n) {
  const Tensor g = pde::green_kernel_1d_poisson(n);
  return spectral::spectral_report((1.0 / static_cast<double>(n + 1)) * g);
}

LRSAConfig gradcheck_config() {
  LRSAConfig c;
  c.depth = 2;
  c.width = 8;
  c.heads = 2;
  c.latents = 4;
  c.ffn_ratio = 2.0;
  c.num_freqs = 2;
  return c;
}

GradCheckReport model_gradcheck(const LRSAConfig& cfg, std::uint64_t seed, std::size_t points) {
  cfg.validate();
  if (points == 0) throw ContractError("gradcheck needs at least one point");
  if (cfg.variant == model::Variant::fixed_basis && cfg.latents > points) {
    throw ContractError("fixed_basis gradcheck needs points >= M");
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  Tensor coords({points, cfg.coord_dims});
  if (cfg.variant == model::Variant::fixed_basis) {
    for (std::size_t i = 0; i < points; ++i) coords.at(i, 0) = static_cast<double>(i) / points;
  } else {
    for (double& v : coords.values()) v = unit(rng);
  }
  const Tensor features = nn::normal_tensor({points, cfg.in_channels}, 1.0, rng);
  const Tensor weights = nn::normal_tensor({points, cfg.out_channels}, 1.0, rng);
  const model::ModelParams params = model::init_params(cfg, seed + 1);
  const std::vector<Tensor> flat = model::flatten_params(params, cfg);
  const ScalarProgram program = [&](Tape& tape, std::span<const Var> vars) {
    const auto w = model::assemble_weights(vars, cfg);
    const Var y = model::backbone_forward(tape, w, cfg, coords, tape.constant(features));
    return sum(mul(y, tape.constant(weights)));
  };
  return grad_check(program, flat);
}

namespace {

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

}  // namespace

std::vector<BenchRow> bench_blocks(const LRSAConfig& cfg, std::span<const std::size_t> n_grid,
                                   std::size_t repeat, std::uint64_t seed) {
  cfg.validate();
  if (repeat == 0) throw ContractError("bench needs repeat >= 1");
  std::mt19937_64 rng(seed);
  const model::LayerParams layer = model::init_layer(cfg, rng);
  const nn::MHAParams dense_attn = nn::init_attention(cfg.width, rng);
  std::vector<BenchRow> rows;
  for (std::size_t np : n_grid) {
    if (np == 0) throw ContractError("bench point counts must be positive");
    BenchRow row;
    row.points = np;
    row.predicted = model::block_flops(cfg, np);
    row.dense = model::dense_block_flops(cfg, np);
    Tensor coords({np, 1});
    for (std::size_t i = 0; i < np; ++i) coords.at(i, 0) = (static_cast<double>(i) + 0.5) / np;
    const Tensor h = nn::normal_tensor({np, cfg.width}, 1.0, rng);
    row.seconds = 1e300;
    for (std::size_t r = 0; r < repeat; ++r) {
      Tape tape;
      const auto w = model::bind(tape, layer, cfg);
      const Var x = tape.constant(h);
      const auto t0 = std::chrono::steady_clock::now();
      ScopedFlopCounter counter;
      model::lrsa_block(x, w, cfg, coords);
      row.seconds = std::min(row.seconds, seconds_since(t0));
      row.measured = {counter.count().mixing, counter.count().total()};
    }
    if (np <= kMaxDenseBenchPoints) {
      double best = 1e300;
      for (std::size_t r = 0; r < repeat; ++r) {
        Tape tape;
        const auto w = model::bind(tape, layer, cfg);
        const auto attn = nn::bind(tape, dense_attn);
        const Var x = tape.constant(h);
        const auto t0 = std::chrono::steady_clock::now();
        const Var hn = nn::normalize(x, w.norm_block, cfg.norm);
        const Var g = add(x, nn::multi_head_attention(hn, hn, attn, cfg.heads));
        add(g, nn::ffn_apply(nn::normalize(g, w.norm_point, cfg.norm), w.ffn_point));
        best = std::min(best, seconds_since(t0));
      }
      row.dense_seconds = best;
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace lrsa::lab
