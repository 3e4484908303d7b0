#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "lrsa/tensor.hpp"

namespace lrsa {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; only valid while its tape lives.
struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  bool valid() const noexcept { return tape != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
};

/// Reverse-mode gradient tape.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// backward() clears previous gradients first; running it twice on the same
/// tape yields bit-identical results.
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, const Tensor& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf whose gradient is tracked.
  Var variable(Tensor value);
  /// Tracked leaf that refers to `value` without copying it. The tensor must
  /// outlive the tape and stay unchanged while the tape is in use.
  Var variable_view(const Tensor& value);
  /// Leaf excluded from differentiation.
  Var constant(Tensor value);
  /// Appends the result of a primitive. The node tracks gradients iff any input does.
  Var record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward);
  Var record(Tensor value, std::span<const Var> inputs, BackwardFn backward);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;
  /// Gradient after backward(); zeros for nodes the seed does not reach.
  Tensor grad(Var v) const;
  /// Mutable gradient accumulator, zero-initialised on first use.
  Tensor& grad_buffer(Var v);
  /// Moves the gradient out of the tape (zeros if untouched).
  Tensor take_grad(Var v);

  void backward(Var seed, const Tensor& seed_grad);
  /// Seeds a single-element node with 1.
  void backward(Var seed);

  std::size_t size() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    const Tensor* view = nullptr;  // external storage for variable_view leaves
    Tensor grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
    const Tensor& get() const { return view ? *view : value; }
  };

  void check(Var v) const;

  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// FLOP accounting. Only forward matrix products are counted (2*m*k*n each),
// split between attention mixing (score and aggregation products inside
// attention) and everything else.

enum class FlopCategory { other, mixing };

struct FlopCount {
  std::uint64_t mixing = 0;
  std::uint64_t other = 0;
  std::uint64_t total() const noexcept { return mixing + other; }
};

/// Counts matmul FLOPs issued on this thread while alive.
class ScopedFlopCounter {
 public:
  ScopedFlopCounter();
  ~ScopedFlopCounter();
  ScopedFlopCounter(const ScopedFlopCounter&) = delete;
  ScopedFlopCounter& operator=(const ScopedFlopCounter&) = delete;
  FlopCount count() const noexcept { return count_; }

 private:
  friend void record_flops(std::uint64_t);
  FlopCount count_;
  ScopedFlopCounter* previous_;
};

/// Routes counted FLOPs to a category for the lifetime of the scope.
class FlopCategoryScope {
 public:
  explicit FlopCategoryScope(FlopCategory category);
  ~FlopCategoryScope();
  FlopCategoryScope(const FlopCategoryScope&) = delete;
  FlopCategoryScope& operator=(const FlopCategoryScope&) = delete;

 private:
  FlopCategory previous_;
};

void record_flops(std::uint64_t flops);

// ---------------------------------------------------------------------------
// Differentiable primitives. All inputs must live on the same tape.

Var matmul(Var a, Var b);
/// a * b^T without materialising the transpose.
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double s);
Var add_scalar(Var x, double s);
Var exp(Var x);
Var sqrt(Var x);
/// GELU, tanh form: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3))).
Var gelu(Var x);
Var transpose(Var x);
Var reshape(Var x, Shape shape);
/// Concatenate along the last axis; leading shapes must agree.
Var concat_cols(std::span<const Var> parts);
/// Columns [begin, end) of the last axis.
Var slice_cols(Var x, std::size_t begin, std::size_t end);
/// Adds a length-k vector to every last-axis row of x.
Var add_bias(Var x, Var bias);
/// Sum of all entries, shape [1].
Var sum(Var x);
/// Softmax over the last axis, computed with max subtraction.
Var softmax_lastdim(Var x);
/// Per-row normalisation with population variance, then x_hat * gain + bias.
Var layer_norm(Var x, Var gain, Var bias, double eps = 1e-5);
/// x / sqrt(mean(x^2) + eps) * gain.
Var rms_norm(Var x, Var gain, double eps = 1e-5);
/// Finite-difference spatial gradient of an [N x C] field sampled on a
/// regular grid with extents `grid` (product = N, last extent fastest).
/// Central differences inside, one-sided at the boundary, unit spacing.
/// Output is [N x (C * grid.size())], channel-major per axis.
Var grid_gradient(Var x, std::span<const std::size_t> grid);

/// Plain-tensor version of grid_gradient.
Tensor grid_gradient(const Tensor& x, std::span<const std::size_t> grid);

// ---------------------------------------------------------------------------

using ScalarProgram = std::function<Var(Tape&, std::span<const Var>)>;

struct GradCheckReport {
  /// Worst |a - n| / max(|a|, |n|, 1e-12) over all entries.
  double max_relative_error = 0.0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
  double max_abs_error = 0.0;
  double gradient_scale = 0.0;  // max |analytic| over all entries
  /// Worst |a - n| / max(|a|, |n|, kGradScaleFloor * gradient_scale, 1e-12):
  /// entries far below the gradient scale are judged against that scale,
  /// which is where central differences lose resolution to rounding.
  double max_scaled_error = 0.0;
  std::size_t entries_checked = 0;
};

inline constexpr double kGradScaleFloor = 1e-3;

/// Compares tape gradients of a scalar program against central differences
/// (f(p+h) - f(p-h)) / 2h for every entry of every parameter.
GradCheckReport grad_check(const ScalarProgram& program, std::span<const Tensor> params,
                           double step = 1e-5);

}  // namespace lrsa
