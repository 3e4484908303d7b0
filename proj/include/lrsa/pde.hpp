#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lrsa/tensor.hpp"

namespace lrsa::pde {

// ---------------------------------------------------------------------------
// Oracles

/// G[i,j] = min(x_i,x_j) (1 - max(x_i,x_j)) on interior nodes x_i = i/(n+1),
/// i = 1..n: the Green's function of -u'' = f, u(0) = u(1) = 0.
Tensor green_kernel_1d_poisson(std::size_t n);

/// u = G f dx with dx = 1/(n+1); f has length n.
Tensor solve_poisson_1d(const Tensor& f);

struct SolverStats {
  std::size_t iterations = 0;
  double relative_residual = 0.0;
};

/// -div(a grad u) = f on the n x n interior nodes of the unit square
/// (h = 1/(n+1)), u = 0 on the boundary. Five-point conservative stencil with
/// harmonic-mean face coefficients; a boundary face uses the node's own a.
/// Solved by conjugate gradients to relative residual 1e-12.
Tensor solve_darcy_2d(const Tensor& a, const Tensor& f, SolverStats* stats = nullptr);

/// Applies the Darcy operator to u (all [n x n]).
Tensor darcy_operator_apply(const Tensor& a, const Tensor& u);

inline constexpr std::size_t kMaxDarcyGrid = 64;

/// Band-limited periodic random field with spectrum exp(-(2 pi m l)^2) per
/// mode m (per axis, product form in 2-D), normalised to unit pointwise
/// variance. Evaluated at arbitrary coordinates [N x d], d in {1, 2}.
Tensor sample_smooth_field(const Tensor& coords, double length_scale, std::uint64_t seed);
/// Same field on the periodic grid x_i = i/n, shape [n] or [n x n].
Tensor sample_smooth_field(std::size_t n, std::size_t dims, double length_scale,
                           std::uint64_t seed);

/// Periodic translation u(x - shift) of samples on x_i = i/n, via the
/// discrete Fourier series.
Tensor advect_periodic(const Tensor& u0, double shift);

/// Independent per-sample seed: a splitmix64 hash of seed ^ index.
std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index);

// ---------------------------------------------------------------------------
// Datasets

enum class Task { poisson1d, darcy2d, advection1d };

std::string_view to_string(Task task);
Task parse_task(std::string_view name);

inline constexpr double kAdvectionShift = 0.1;
inline constexpr double kFieldLengthScale = 0.1;

/// Samples at points with uniform quadrature weight |Omega|/N.
struct PointSet {
  Tensor coords;    // N x d_phys
  Tensor features;  // N x d_in
  double quad_weight = 0.0;
};

PointSet uniform_point_set(Tensor coords, Tensor features);

struct ChannelStats {
  std::vector<double> mean, stddev;
};

struct Normalization {
  ChannelStats inputs, targets;
};

struct OperatorDataset {
  Task task = Task::poisson1d;
  std::size_t n = 0;
  std::uint64_t seed = 0;
  std::size_t train_count = 0;      // samples [0, train_count) form the training split
  std::vector<std::size_t> grid;    // regular-grid extents, product = N
  Tensor coords;                    // N x d_phys, shared by all samples
  Tensor inputs;                    // S x N x C_in (physical units)
  Tensor targets;                   // S x N x C_out (physical units)
  Normalization normalization;

  std::size_t count() const { return inputs.rank() == 3 ? inputs.dim(0) : 0; }
  std::size_t points() const { return coords.dim(0); }
  std::size_t in_channels() const { return inputs.dim(2); }
  std::size_t out_channels() const { return targets.dim(2); }
  PointSet point_set(std::size_t sample) const;
};

/// Default training split: all but the last fifth.
std::size_t default_train_count(std::size_t count);

/// Deterministic in (task, count, n, seed). Normalisation statistics come
/// from the training split only.
OperatorDataset make_dataset(Task task, std::size_t count, std::size_t n, std::uint64_t seed,
                             std::optional<std::size_t> train_count = std::nullopt);

/// Builds a dataset from explicit tensors and computes the normalisation.
OperatorDataset assemble_dataset(Task task, std::size_t n, std::uint64_t seed,
                                 std::vector<std::size_t> grid, Tensor coords, Tensor inputs,
                                 Tensor targets, std::size_t train_count);

/// Per-channel z-score statistics over samples [0, count) and all points of
/// an S x N x C tensor. A channel with zero spread gets stddev 1.
ChannelStats channel_stats(const Tensor& stacked, std::size_t count);
Tensor normalize(const Tensor& x, const ChannelStats& stats);
Tensor denormalize(const Tensor& x, const ChannelStats& stats);

void save_dataset(const OperatorDataset& ds, const std::filesystem::path& dir);
OperatorDataset load_dataset(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Metrics. Tensors carry a leading sample axis; a rank-1 tensor is a single
// sample.

/// Mean over samples of ||pred - target|| / ||target||.
double relative_l2(const Tensor& pred, const Tensor& target);
/// Mean over samples of ||pred - target||^2.
double mse(const Tensor& pred, const Tensor& target);
/// relative_l2 of finite-difference spatial gradients on the regular grid
/// `grid` (each sample holds prod(grid) * C values, point-major).
double grad_metric_lg(const Tensor& pred, const Tensor& target,
                      std::span<const std::size_t> grid);

}  // namespace lrsa::pde
