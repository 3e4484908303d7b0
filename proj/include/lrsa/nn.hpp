#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <random>
#include <vector>

#include "lrsa/autodiff.hpp"
#include "lrsa/tensor.hpp"

namespace lrsa::nn {

/// Projection weights of one multi-head attention. Instantiated with T = Tensor
/// for storage and T = Var once bound to a tape.
template <class T>
struct AttentionWeights {
  T wq, wk, wv, wo;  // each d x d
};

/// Two-layer pointwise MLP: act(x W1 + b1) W2 + b2.
template <class T>
struct FeedForwardWeights {
  T w1, b1, w2, b2;
};

template <class T>
struct NormWeights {
  T gain, bias;  // bias unused by RMSNorm
};

using MHAParams = AttentionWeights<Tensor>;
using FFNParams = FeedForwardWeights<Tensor>;

enum class NormKind { layer_norm, rms_norm };

/// Records softmax weights of every attention call in evaluation order, or
/// replays previously recorded weights in place of freshly computed ones.
/// Replay freezes the attention pattern so the value pathway becomes the
/// only dependence on the inputs.
class AttentionTrace {
 public:
  enum class Mode { record, replay };

  explicit AttentionTrace(Mode mode = Mode::record) : mode_(mode) {}

  Mode mode() const noexcept { return mode_; }
  void start_replay() noexcept {
    mode_ = Mode::replay;
    cursor_ = 0;
  }
  void push(Tensor weights) { weights_.push_back(std::move(weights)); }
  const Tensor& next();
  const std::vector<Tensor>& weights() const noexcept { return weights_; }

 private:
  Mode mode_;
  std::vector<Tensor> weights_;
  std::size_t cursor_ = 0;
};

// ---------------------------------------------------------------------------
// Initialisation

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng);
/// d_in x d_out weight with entries ~ Normal(0, 1/fan_in).
Tensor init_weight(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng);
MHAParams init_attention(std::size_t width, std::mt19937_64& rng, bool zero_output = false);
FFNParams init_ffn(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng,
                   bool zero_output = false);
NormWeights<Tensor> init_norm(std::size_t width, NormKind kind);

// ---------------------------------------------------------------------------
// Forward primitives

/// Fourier features: for each coordinate k and frequency j < num_freqs,
/// sin(2^j pi x_k) then cos(2^j pi x_k). Output [N x 2*num_freqs*d_phys],
/// ordered coordinate-major, then frequency, then (sin, cos).
Tensor positional_encoding(const Tensor& coords, std::size_t num_freqs);

Var ffn_apply(Var x, const FeedForwardWeights<Var>& w);

/// H0 = FFN([features, pe]) per point.
Var lift(Var features, Var pe, const FeedForwardWeights<Var>& w);

/// softmax(Q K^T * scale) V with the softmax over keys; scale defaults to
/// 1/sqrt(d_h).
Var sdpa(Var q, Var k, Var v, std::optional<double> scale = std::nullopt,
         AttentionTrace* trace = nullptr);

/// Project, split into heads, attend per head with scale 1/sqrt(d_h),
/// concatenate, apply W_O.
Var multi_head_attention(Var q_in, Var kv_in, const AttentionWeights<Var>& w, std::size_t heads,
                         AttentionTrace* trace = nullptr);

Var normalize(Var x, const NormWeights<Var>& w, NormKind kind);

// ---------------------------------------------------------------------------
// Binding helpers. Bound leaves refer to the tensors without copying, so the
// weights must outlive the tape.

AttentionWeights<Var> bind(Tape& tape, const AttentionWeights<Tensor>& w);
FeedForwardWeights<Var> bind(Tape& tape, const FeedForwardWeights<Tensor>& w);
NormWeights<Var> bind(Tape& tape, const NormWeights<Tensor>& w);

}  // namespace lrsa::nn
