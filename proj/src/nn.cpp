#include "lrsa/nn.hpp"

#include <cmath>
#include <numbers>

#include "lrsa/errors.hpp"

namespace lrsa::nn {

const Tensor& AttentionTrace::next() {
  if (cursor_ >= weights_.size()) {
    throw ContractError("attention trace exhausted after " + std::to_string(cursor_) + " calls");
  }
  return weights_[cursor_++];
}

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

Tensor init_weight(std::size_t fan_in, std::size_t fan_out, std::mt19937_64& rng) {
  return normal_tensor({fan_in, fan_out}, 1.0 / std::sqrt(static_cast<double>(fan_in)), rng);
}

MHAParams init_attention(std::size_t width, std::mt19937_64& rng, bool zero_output) {
  MHAParams p;
  p.wq = init_weight(width, width, rng);
  p.wk = init_weight(width, width, rng);
  p.wv = init_weight(width, width, rng);
  p.wo = zero_output ? Tensor({width, width}) : init_weight(width, width, rng);
  return p;
}

FFNParams init_ffn(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng,
                   bool zero_output) {
  FFNParams p;
  p.w1 = init_weight(in, hidden, rng);
  p.b1 = Tensor({hidden});
  p.w2 = zero_output ? Tensor({hidden, out}) : init_weight(hidden, out, rng);
  p.b2 = Tensor({out});
  return p;
}

NormWeights<Tensor> init_norm(std::size_t width, NormKind kind) {
  NormWeights<Tensor> n;
  n.gain = Tensor({width}, 1.0);
  if (kind == NormKind::layer_norm) n.bias = Tensor({width});
  return n;
}

Tensor positional_encoding(const Tensor& coords, std::size_t num_freqs) {
  if (coords.rank() != 2) {
    throw DimensionError("positional_encoding expects [N x d_phys] coordinates, got " +
                         to_string(coords.shape()));
  }
  if (num_freqs == 0) throw ContractError("positional_encoding needs num_freqs >= 1");
  const std::size_t n = coords.dim(0), dp = coords.dim(1);
  const std::size_t width = 2 * num_freqs * dp;
  Tensor out({n, width});
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t c = 0;
    for (std::size_t k = 0; k < dp; ++k) {
      double freq = std::numbers::pi;
      for (std::size_t j = 0; j < num_freqs; ++j, freq *= 2.0) {
        const double arg = freq * coords.at(i, k);
        out.at(i, c++) = std::sin(arg);
        out.at(i, c++) = std::cos(arg);
      }
    }
  }
  return out;
}

Var ffn_apply(Var x, const FeedForwardWeights<Var>& w) {
  Var h = gelu(add_bias(matmul(x, w.w1), w.b1));
  return add_bias(matmul(h, w.w2), w.b2);
}

Var lift(Var features, Var pe, const FeedForwardWeights<Var>& w) {
  const Var parts[] = {features, pe};
  const Var joined = concat_cols(parts);
  if (joined.value().cols() != w.w1.value().dim(0)) {
    throw DimensionError("lift input width " + std::to_string(joined.value().cols()) +
                         " does not match FFN input " + to_string(w.w1.shape()));
  }
  return ffn_apply(joined, w);
}

Var sdpa(Var q, Var k, Var v, std::optional<double> scale, AttentionTrace* trace) {
  const Tensor& qv = q.value();
  const Tensor& kv = k.value();
  const Tensor& vv = v.value();
  if (qv.rank() != 2 || kv.rank() != 2 || vv.rank() != 2) {
    throw DimensionError("sdpa expects rank-2 Q, K, V; got " + to_string(qv.shape()) + ", " +
                         to_string(kv.shape()) + ", " + to_string(vv.shape()));
  }
  if (kv.dim(0) == 0) throw ContractError("sdpa over zero keys: softmax is undefined");
  if (qv.dim(1) != kv.dim(1)) {
    throw DimensionError("sdpa head width mismatch: Q " + to_string(qv.shape()) + ", K " +
                         to_string(kv.shape()));
  }
  if (vv.dim(0) != kv.dim(0)) {
    throw DimensionError("sdpa keys/values row mismatch: K " + to_string(kv.shape()) + ", V " +
                         to_string(vv.shape()));
  }
  FlopCategoryScope mixing(FlopCategory::mixing);
  if (trace && trace->mode() == AttentionTrace::Mode::replay) {
    const Tensor& frozen = trace->next();
    if (frozen.shape() != Shape{qv.dim(0), kv.dim(0)}) {
      throw DimensionError("replayed attention weights " + to_string(frozen.shape()) +
                           " do not match " + std::to_string(qv.dim(0)) + "x" +
                           std::to_string(kv.dim(0)));
    }
    return matmul(q.tape->constant(frozen), v);
  }
  const double s = scale.value_or(1.0 / std::sqrt(static_cast<double>(qv.dim(1))));
  const Var weights = softmax_lastdim(lrsa::scale(matmul_nt(q, k), s));
  if (trace) trace->push(weights.value());
  return matmul(weights, v);
}

Var multi_head_attention(Var q_in, Var kv_in, const AttentionWeights<Var>& w, std::size_t heads,
                         AttentionTrace* trace) {
  const std::size_t d = w.wq.value().dim(0);
  if (heads == 0 || d % heads != 0) {
    throw ContractError("width " + std::to_string(d) + " is not divisible by " +
                        std::to_string(heads) + " heads");
  }
  if (q_in.value().cols() != d || kv_in.value().cols() != d) {
    throw DimensionError("attention inputs " + to_string(q_in.shape()) + ", " +
                         to_string(kv_in.shape()) + " do not match width " + std::to_string(d));
  }
  const Var q = matmul(q_in, w.wq);
  const Var k = matmul(kv_in, w.wk);
  const Var v = matmul(kv_in, w.wv);
  const std::size_t dh = d / heads;
  Var merged;
  if (heads == 1) {
    merged = sdpa(q, k, v, std::nullopt, trace);
  } else {
    std::vector<Var> outs;
    outs.reserve(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t b = h * dh, e = b + dh;
      outs.push_back(sdpa(slice_cols(q, b, e), slice_cols(k, b, e), slice_cols(v, b, e),
                          std::nullopt, trace));
    }
    merged = concat_cols(outs);
  }
  return matmul(merged, w.wo);
}

Var normalize(Var x, const NormWeights<Var>& w, NormKind kind) {
  return kind == NormKind::layer_norm ? layer_norm(x, w.gain, w.bias) : rms_norm(x, w.gain);
}

namespace {
Var bind_one(Tape& tape, const Tensor& t) { return t.empty() ? Var{} : tape.variable_view(t); }
}  // namespace

AttentionWeights<Var> bind(Tape& tape, const AttentionWeights<Tensor>& w) {
  return {bind_one(tape, w.wq), bind_one(tape, w.wk), bind_one(tape, w.wv), bind_one(tape, w.wo)};
}

FeedForwardWeights<Var> bind(Tape& tape, const FeedForwardWeights<Tensor>& w) {
  return {bind_one(tape, w.w1), bind_one(tape, w.b1), bind_one(tape, w.w2), bind_one(tape, w.b2)};
}

NormWeights<Var> bind(Tape& tape, const NormWeights<Tensor>& w) {
  return {bind_one(tape, w.gain), bind_one(tape, w.bias)};
}

}  // namespace lrsa::nn
