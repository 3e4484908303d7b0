#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "lrsa/autodiff.hpp"
#include "lrsa/model.hpp"
#include "lrsa/spectral.hpp"

namespace lrsa::lab {

/// Uniform interior grid x = (i+1)/(n+1) per axis; n^dims points, last axis fastest.
Tensor interior_grid(std::size_t n, std::size_t dims);

struct ModelKernelAnalysis {
  std::size_t points = 0;
  std::size_t layer = 0;
  std::size_t out_channel = 0, in_channel = 0;
  std::size_t rank_bound = 0;
  /// sigma_{bound+1} / sigma_1, or 0 when the kernel has no more than
  /// `rank_bound` singular values.
  double sigma_ratio_after_bound = 0.0;
  /// max |K_factored - K_probed| over all columns, relative to max |K|.
  double probe_mismatch = 0.0;
  spectral::KernelReport report;
};

/// Induced kernel of block `layer` of a trained model, at the block input
/// produced by a smooth random input field on an n-per-axis interior grid.
ModelKernelAnalysis analyze_model_kernel(const model::Checkpoint& ckpt, std::size_t n,
                                         std::uint64_t seed, std::size_t layer = 0,
                                         std::size_t out_channel = 0, std::size_t in_channel = 0,
                                         bool probe = true);

/// Green's kernel of 1-D Poisson scaled by dx, with its spectral report.
spectral::KernelReport analyze_green1d(std::size_t n);

/// Configuration small enough for an exhaustive finite-difference check.
model::LRSAConfig gradcheck_config();

/// grad_check of a random weighted sum of backbone outputs over every
/// parameter of a freshly initialised model on `points` random points.
GradCheckReport model_gradcheck(const model::LRSAConfig& cfg, std::uint64_t seed,
                                std::size_t points = 8);

struct BenchRow {
  std::size_t points = 0;
  model::BlockFlops measured;   // counted while running one block forward
  model::BlockFlops predicted;  // closed form
  model::BlockFlops dense;      // closed form, dense-attention reference
  double seconds = 0.0;         // best of `repeat` block forwards
  std::optional<double> dense_seconds;  // dense reference forward, small N only
};

inline constexpr std::size_t kMaxDenseBenchPoints = 2048;

std::vector<BenchRow> bench_blocks(const model::LRSAConfig& cfg, std::span<const std::size_t> n_grid,
                                   std::size_t repeat, std::uint64_t seed = 0);

}  // namespace lrsa::lab
