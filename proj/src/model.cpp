#include "lrsa/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>

#include "json_config.hpp"
#include "lrsa/errors.hpp"

namespace lrsa::model {

using nlohmann::json;
using lrsa::to_string;

std::string_view to_string(Variant v) {
  switch (v) {
    case Variant::full: return "full";
    case Variant::no_intra_attn: return "no_intra_attn";
    case Variant::symmetric_tied: return "symmetric_tied";
    case Variant::linear_no: return "linear_no";
    case Variant::fixed_basis: return "fixed_basis";
  }
  return "full";
}

Variant parse_variant(std::string_view name) {
  for (Variant v : {Variant::full, Variant::no_intra_attn, Variant::symmetric_tied,
                    Variant::linear_no, Variant::fixed_basis}) {
    if (to_string(v) == name) return v;
  }
  throw UsageError("unknown variant '" + std::string(name) + "'");
}

void LRSAConfig::validate() const {
  if (width == 0) throw ContractError("width must be positive");
  if (heads == 0 || width % heads != 0) {
    throw ContractError("width " + std::to_string(width) + " is not divisible by heads " +
                        std::to_string(heads));
  }
  if (latents == 0) throw ContractError("latent count M must be at least 1");
  if (!(ffn_ratio > 0.0)) throw ContractError("ffn_ratio must be positive");
  if (num_freqs == 0) throw ContractError("num_freqs must be at least 1");
  if (in_channels == 0 || out_channels == 0 || coord_dims == 0) {
    throw ContractError("channel and coordinate counts must be positive");
  }
  if (variant == Variant::fixed_basis && coord_dims != 1) {
    throw ContractError("the fixed_basis variant is only defined for 1-D coordinates");
  }
}

std::size_t LRSAConfig::ffn_width() const {
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(ffn_ratio * width)));
}

std::size_t LRSAConfig::latent_mlp_width() const {
  const double d = static_cast<double>(width);
  return std::max<std::size_t>(1, static_cast<std::size_t>(std::lround((4 * d * d - d) / (2 * d + 1))));
}

// ---------------------------------------------------------------------------
// Parameters

LayerParams init_layer(const LRSAConfig& cfg, std::mt19937_64& rng) {
  const std::size_t d = cfg.width, m = cfg.latents, f = cfg.ffn_width();
  const bool z = cfg.zero_init_residual;
  LayerParams L;
  L.norm_block = nn::init_norm(d, cfg.norm);
  if (cfg.variant == Variant::fixed_basis) {
    L.basis_mix = nn::init_weight(m, m, rng);
    L.basis_proj = z ? Tensor({d, d}) : nn::init_weight(d, d, rng);
  } else {
    // Latent queries: variance 1/sqrt(d).
    L.latents = nn::normal_tensor({m, d}, std::pow(static_cast<double>(d), -0.25), rng);
    L.down = nn::init_attention(d, rng, z);
    if (cfg.variant != Variant::linear_no) {
      L.norm_in = nn::init_norm(d, cfg.norm);
      L.ffn_in = nn::init_ffn(d, f, d, rng, z);
      L.norm_mix = nn::init_norm(d, cfg.norm);
      if (cfg.variant == Variant::no_intra_attn) {
        L.latent_mlp = nn::init_ffn(d, cfg.latent_mlp_width(), d, rng, z);
      } else {
        L.latent_attn = nn::init_attention(d, rng, z);
      }
      L.norm_out = nn::init_norm(d, cfg.norm);
      L.ffn_out = nn::init_ffn(d, f, d, rng, z);
    }
    L.up = nn::init_attention(d, rng, z);
    if (cfg.variant == Variant::symmetric_tied) L.up.wq = Tensor();
  }
  L.norm_point = nn::init_norm(d, cfg.norm);
  L.ffn_point = nn::init_ffn(d, f, d, rng, z);
  return L;
}

ModelParams init_params(const LRSAConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  std::mt19937_64 rng(seed);
  ModelParams W;
  W.lift = nn::init_ffn(cfg.in_channels + cfg.pe_width(), cfg.ffn_width(), cfg.width, rng);
  W.layers.reserve(cfg.depth);
  for (std::size_t l = 0; l < cfg.depth; ++l) W.layers.push_back(init_layer(cfg, rng));
  W.readout_w = nn::init_weight(cfg.width, cfg.out_channels, rng);
  W.readout_b = Tensor({cfg.out_channels});
  return W;
}

LayerWeights<Var> bind(Tape& tape, const LayerParams& params, const LRSAConfig& cfg) {
  LayerWeights<Var> out;
  // Walk storage and binding in lockstep; unvisited slots stay unbound.
  std::vector<Var*> slots;
  for_each_layer_weight(out, cfg, "", [&](const std::string&, Var& v) { slots.push_back(&v); });
  std::size_t i = 0;
  for_each_layer_weight(params, cfg, "", [&](const std::string& name, const Tensor& t) {
    if (t.empty()) throw LoadError("parameter " + name + " is empty");
    *slots[i++] = tape.variable_view(t);
  });
  if (cfg.variant == Variant::symmetric_tied) out.up.wq = out.down.wk;
  return out;
}

ModelWeights<Var> bind(Tape& tape, const ModelParams& params, const LRSAConfig& cfg) {
  ModelWeights<Var> out;
  out.lift = nn::bind(tape, params.lift);
  for (const auto& L : params.layers) out.layers.push_back(bind(tape, L, cfg));
  out.readout_w = tape.variable_view(params.readout_w);
  out.readout_b = tape.variable_view(params.readout_b);
  return out;
}

ModelParams collect_gradients(const Tape& tape, const ModelWeights<Var>& bound,
                              const LRSAConfig& cfg) {
  ModelParams grads;
  grads.layers.resize(bound.layers.size());
  std::vector<Tensor*> slots;
  for_each_weight(grads, cfg, [&](const std::string&, Tensor& t) { slots.push_back(&t); });
  std::size_t i = 0;
  for_each_weight(bound, cfg, [&](const std::string&, const Var& v) { *slots[i++] = tape.grad(v); });
  return grads;
}

std::size_t layer_parameter_count(const LayerParams& params, const LRSAConfig& cfg) {
  std::size_t n = 0;
  for_each_layer_weight(params, cfg, "", [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

std::size_t parameter_count(const ModelParams& params, const LRSAConfig& cfg) {
  std::size_t n = 0;
  for_each_weight(params, cfg, [&](const std::string&, const Tensor& t) { n += t.size(); });
  return n;
}

std::vector<Tensor> flatten_params(const ModelParams& params, const LRSAConfig& cfg) {
  std::vector<Tensor> out;
  for_each_weight(params, cfg, [&](const std::string&, const Tensor& t) { out.push_back(t); });
  return out;
}

ModelWeights<Var> assemble_weights(std::span<const Var> vars, const LRSAConfig& cfg) {
  ModelWeights<Var> w;
  w.layers.resize(cfg.depth);
  std::size_t i = 0;
  for_each_weight(w, cfg, [&](const std::string& name, Var& v) {
    if (i >= vars.size()) throw DimensionError("too few tensors to assemble weight " + name);
    v = vars[i++];
  });
  if (i != vars.size()) {
    throw DimensionError("assemble_weights: " + std::to_string(vars.size()) + " tensors for " +
                         std::to_string(i) + " weights");
  }
  if (cfg.variant == Variant::symmetric_tied) {
    for (auto& L : w.layers) L.up.wq = L.down.wk;
  }
  return w;
}

// ---------------------------------------------------------------------------
// Forward

namespace {

Var compress_normed(Var hn, const LayerWeights<Var>& L, const LRSAConfig& cfg,
                    nn::AttentionTrace* trace) {
  if (hn.value().dim(0) == 0) throw ContractError("compress needs at least one point");
  return nn::multi_head_attention(L.latents, hn, L.down, cfg.heads, trace);
}

Var reconstruct_normed(Var hn, Var z_mixed, const LayerWeights<Var>& L, const LRSAConfig& cfg,
                       nn::AttentionTrace* trace) {
  if (z_mixed.value().dim(0) == 0) throw ContractError("reconstruct needs at least one latent");
  nn::AttentionWeights<Var> up = L.up;
  if (cfg.variant == Variant::symmetric_tied) up.wq = L.down.wk;
  return nn::multi_head_attention(hn, z_mixed, up, cfg.heads, trace);
}

Var basis_mix_normed(Var hn, const LayerWeights<Var>& L, const LRSAConfig& cfg,
                     const Tensor& coords) {
  Tape& tape = *hn.tape;
  const Tensor phi = fourier_basis(coords, cfg.latents);
  if (phi.dim(0) != hn.value().dim(0)) {
    throw DimensionError("basis has " + std::to_string(phi.dim(0)) + " rows for " +
                         std::to_string(hn.value().dim(0)) + " points");
  }
  Var mixed;
  {
    FlopCategoryScope mixing(FlopCategory::mixing);
    const Var coeff = matmul(tape.constant(transpose(phi)), hn);
    mixed = matmul(tape.constant(phi), matmul(L.basis_mix, coeff));
  }
  return matmul(mixed, L.basis_proj);
}

}  // namespace

Var compress(Var h, const LayerWeights<Var>& L, const LRSAConfig& cfg, nn::AttentionTrace* trace) {
  return compress_normed(nn::normalize(h, L.norm_block, cfg.norm), L, cfg, trace);
}

Var latent_mix(Var z, const LayerWeights<Var>& L, const LRSAConfig& cfg, nn::AttentionTrace* trace) {
  if (z.value().dim(0) == 0) throw ContractError("latent_mix needs at least one latent");
  const Var z1 = add(z, nn::ffn_apply(nn::normalize(z, L.norm_in, cfg.norm), L.ffn_in));
  const Var n1 = nn::normalize(z1, L.norm_mix, cfg.norm);
  const Var mixed = cfg.variant == Variant::no_intra_attn
                        ? nn::ffn_apply(n1, L.latent_mlp)
                        : nn::multi_head_attention(n1, n1, L.latent_attn, cfg.heads, trace);
  const Var z2 = add(z1, mixed);
  return add(z2, nn::ffn_apply(nn::normalize(z2, L.norm_out, cfg.norm), L.ffn_out));
}

Var reconstruct(Var h, Var z_mixed, const LayerWeights<Var>& L, const LRSAConfig& cfg,
                nn::AttentionTrace* trace) {
  return reconstruct_normed(nn::normalize(h, L.norm_block, cfg.norm), z_mixed, L, cfg, trace);
}

Var global_mix(Var h_normed, const LayerWeights<Var>& L, const LRSAConfig& cfg,
               const Tensor& coords, nn::AttentionTrace* trace) {
  if (cfg.variant == Variant::fixed_basis) return basis_mix_normed(h_normed, L, cfg, coords);
  Var z = compress_normed(h_normed, L, cfg, trace);
  if (cfg.variant != Variant::linear_no) z = latent_mix(z, L, cfg, trace);
  return reconstruct_normed(h_normed, z, L, cfg, trace);
}

Var lrsa_block(Var h, const LayerWeights<Var>& L, const LRSAConfig& cfg, const Tensor& coords,
               nn::AttentionTrace* trace) {
  const Var hn = nn::normalize(h, L.norm_block, cfg.norm);
  const Var g = add(h, global_mix(hn, L, cfg, coords, trace));
  return add(g, nn::ffn_apply(nn::normalize(g, L.norm_point, cfg.norm), L.ffn_point));
}

Var backbone_forward(Tape& tape, const ModelWeights<Var>& W, const LRSAConfig& cfg,
                     const Tensor& coords, Var features, std::vector<Var>* layer_inputs) {
  const Tensor& f = features.value();
  if (f.rank() != 2 || coords.rank() != 2 || f.dim(0) != coords.dim(0)) {
    throw DimensionError("features " + to_string(f.shape()) + " and coordinates " +
                         to_string(coords.shape()) + " must be [N x C] with equal N");
  }
  if (f.dim(1) != cfg.in_channels || coords.dim(1) != cfg.coord_dims) {
    throw DimensionError("features " + to_string(f.shape()) + " / coordinates " +
                         to_string(coords.shape()) + " do not match the configured channels");
  }
  const Var pe = tape.constant(nn::positional_encoding(coords, cfg.num_freqs));
  Var h = nn::lift(features, pe, W.lift);
  for (const auto& L : W.layers) {
    if (layer_inputs) layer_inputs->push_back(h);
    h = lrsa_block(h, L, cfg, coords);
  }
  return add_bias(matmul(h, W.readout_w), W.readout_b);
}

// ---------------------------------------------------------------------------
// Fixed basis and slicing

Tensor fourier_basis(const Tensor& coords, std::size_t modes) {
  if (coords.rank() != 2 || coords.dim(1) != 1) {
    throw ContractError("fourier_basis needs [N x 1] coordinates, got " +
                        to_string(coords.shape()));
  }
  const std::size_t n = coords.dim(0);
  if (modes == 0 || modes > n) {
    throw ContractError("fourier_basis needs 1 <= M <= N, got M=" + std::to_string(modes) +
                        ", N=" + std::to_string(n));
  }
  const double nd = static_cast<double>(n);
  Tensor phi({n, modes});
  for (std::size_t c = 0; c < modes; ++c) {
    const std::size_t k = (c + 1) / 2;
    const bool is_cos = c % 2 == 1 || c == 0;
    const bool nyquist = n % 2 == 0 && 2 * k == n;
    const double amp = (c == 0 || nyquist) ? 1.0 / std::sqrt(nd) : std::sqrt(2.0 / nd);
    for (std::size_t i = 0; i < n; ++i) {
      const double arg = 2.0 * std::numbers::pi * static_cast<double>(k) * coords.at(i, 0);
      phi.at(i, c) = amp * (is_cos ? std::cos(arg) : std::sin(arg));
    }
  }
  return phi;
}

Tensor fixed_basis_mix(const Tensor& h, const BasisMatrix& basis) {
  if (h.rank() != 2 || basis.phi.rank() != 2 || basis.phi.dim(0) != h.dim(0)) {
    throw DimensionError("basis " + to_string(basis.phi.shape()) + " does not match features " +
                         to_string(h.shape()));
  }
  const std::size_t m = basis.phi.dim(1);
  Tensor coeff = matmul(transpose(basis.phi), h);
  if (basis.g.rank() == 1 && basis.g.size() == m) {
    for (std::size_t r = 0; r < m; ++r)
      for (double& v : coeff.row(r)) v *= basis.g[r];
  } else if (basis.g.shape() == Shape{m, m}) {
    coeff = matmul(basis.g, coeff);
  } else {
    throw DimensionError("latent operator " + to_string(basis.g.shape()) +
                         " does not match a basis of " + std::to_string(m) + " modes");
  }
  return matmul(basis.phi, coeff);
}

Tensor slicing_compress(const Tensor& h, const Tensor& w_slice, SliceAxis axis) {
  if (h.rank() != 2 || w_slice.rank() != 2 || h.dim(1) != w_slice.dim(1)) {
    throw DimensionError("slicing_compress: features " + to_string(h.shape()) +
                         " and slice weights " + to_string(w_slice.shape()) + " do not match");
  }
  const std::size_t n = h.dim(0), m = w_slice.dim(0), d = h.dim(1);
  if (n == 0 || m == 0) throw ContractError("slicing needs at least one point and one slice");
  Tensor w = matmul(h, transpose(w_slice));  // N x M
  auto softmax_strided = [&](std::size_t base, std::size_t count, std::size_t stride) {
    double mx = w[base];
    for (std::size_t t = 1; t < count; ++t) mx = std::max(mx, w[base + t * stride]);
    double s = 0.0;
    for (std::size_t t = 0; t < count; ++t) {
      double& v = w[base + t * stride];
      v = std::exp(v - mx);
      s += v;
    }
    for (std::size_t t = 0; t < count; ++t) w[base + t * stride] /= s;
  };
  if (axis == SliceAxis::slices) {
    for (std::size_t i = 0; i < n; ++i) softmax_strided(i * m, m, 1);
  } else {
    for (std::size_t j = 0; j < m; ++j) softmax_strided(j, n, m);
  }
  Tensor tokens({m, d});
  for (std::size_t j = 0; j < m; ++j) {
    double mass = 0.0;
    for (std::size_t i = 0; i < n; ++i) mass += w.at(i, j);
    if (!(mass >= 1e-300)) {
      throw DomainError("slice " + std::to_string(j) + " has total weight " +
                        std::to_string(mass) + " (degenerate slice)");
    }
    for (std::size_t i = 0; i < n; ++i) {
      const double a = w.at(i, j) / mass;
      for (std::size_t c = 0; c < d; ++c) tokens.at(j, c) += a * h.at(i, c);
    }
  }
  return tokens;
}

// ---------------------------------------------------------------------------
// Induced kernel

namespace {

struct RecordedMix {
  nn::AttentionTrace trace;
  Tensor normalized;
  Tensor latents_in;  // Z before latent mixing
};

RecordedMix record_mix(const LayerParams& layer, const LRSAConfig& cfg, const Tensor& h) {
  RecordedMix rec;
  Tape tape;
  const LayerWeights<Var> L = bind(tape, layer, cfg);
  const Var hn = nn::normalize(tape.constant(h), L.norm_block, cfg.norm);
  rec.normalized = hn.value();
  if (cfg.variant == Variant::fixed_basis) return rec;
  const Var z = compress_normed(hn, L, cfg, &rec.trace);
  rec.latents_in = z.value();
  const Var zm = cfg.variant == Variant::linear_no ? z : latent_mix(z, L, cfg, &rec.trace);
  reconstruct_normed(hn, zm, L, cfg, &rec.trace);
  return rec;
}

void check_kernel_request(const LRSAConfig& cfg, const Tensor& h, std::size_t out_channel,
                          std::size_t in_channel) {
  cfg.validate();
  if (h.rank() != 2 || h.dim(1) != cfg.width) {
    throw DimensionError("features " + to_string(h.shape()) + " do not have width " +
                         std::to_string(cfg.width));
  }
  if (h.dim(0) > kMaxKernelPoints) {
    throw ResourceError("induced kernel limited to " + std::to_string(kMaxKernelPoints) +
                        " points, got " + std::to_string(h.dim(0)));
  }
  if (out_channel >= cfg.width || in_channel >= cfg.width) {
    throw DimensionError("channel pair (" + std::to_string(out_channel) + ", " +
                         std::to_string(in_channel) + ") outside width " +
                         std::to_string(cfg.width));
  }
}

}  // namespace

Tensor block_normalized(const LayerParams& layer, const LRSAConfig& cfg, const Tensor& h) {
  Tape tape;
  const auto norm = nn::bind(tape, layer.norm_block);
  return nn::normalize(tape.constant(h), norm, cfg.norm).value();
}

InducedKernel materialize_induced_kernel(const LayerParams& layer, const LRSAConfig& cfg,
                                         const Tensor& h, const Tensor& coords,
                                         std::size_t out_channel, std::size_t in_channel) {
  check_kernel_request(cfg, h, out_channel, in_channel);
  const std::size_t n = h.dim(0), m = cfg.latents, d = cfg.width;
  InducedKernel out;

  if (cfg.variant == Variant::fixed_basis) {
    const Tensor phi = fourier_basis(coords, m);
    out.reconstruction = phi;
    out.compression = transpose(phi);
    out.latent = layer.basis_proj.at(in_channel, out_channel) * layer.basis_mix;
    out.kernel = matmul(matmul(out.reconstruction, out.latent), out.compression);
    out.rank_bound = m;
    return out;
  }

  const std::size_t heads = cfg.heads, dh = d / heads, r = heads * m;
  RecordedMix rec = record_mix(layer, cfg, h);
  const auto& w = rec.trace.weights();
  const std::size_t latent_calls = w.size() - 2 * heads;

  // Stacked factors.
  Tensor a({r, n}), b({n, r});
  for (std::size_t hd = 0; hd < heads; ++hd) {
    const Tensor& down = w[hd];                             // M x N
    const Tensor& up = w[heads + latent_calls + hd];        // N x M
    for (std::size_t k = 0; k < m; ++k)
      for (std::size_t j = 0; j < n; ++j) a.at(hd * m + k, j) = down.at(k, j);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < m; ++k) b.at(i, hd * m + k) = up.at(i, k);
  }

  // Per-head channel maps: row in_channel of Wv_h Wo_h (compression) and
  // column out_channel of the same product (reconstruction).
  std::vector<std::vector<double>> d_row(heads, std::vector<double>(d, 0.0));
  std::vector<std::vector<double>> u_col(heads, std::vector<double>(d, 0.0));
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t t = hd * dh; t < (hd + 1) * dh; ++t) {
      for (std::size_t e = 0; e < d; ++e) {
        d_row[hd][e] += layer.down.wv.at(in_channel, t) * layer.down.wo.at(t, e);
        u_col[hd][e] += layer.up.wv.at(e, t) * layer.up.wo.at(t, out_channel);
      }
    }
  }

  // Latent value transformation: seed row m of Z' with u_col, pull back to Z.
  Tape latent_tape;
  nn::AttentionTrace latent_trace;
  for (std::size_t c = 0; c < latent_calls; ++c) latent_trace.push(w[heads + c]);
  latent_trace.start_replay();
  const LayerWeights<Var> L = bind(latent_tape, layer, cfg);
  const Var z = latent_tape.variable(rec.latents_in);
  const Var zm = cfg.variant == Variant::linear_no ? z : latent_mix(z, L, cfg, &latent_trace);

  Tensor g_hat({r, r});
  for (std::size_t hd = 0; hd < heads; ++hd) {
    for (std::size_t mi = 0; mi < m; ++mi) {
      Tensor pulled({m, d});
      if (cfg.variant == Variant::linear_no) {
        for (std::size_t e = 0; e < d; ++e) pulled.at(mi, e) = u_col[hd][e];
      } else {
        Tensor seed({m, d});
        for (std::size_t e = 0; e < d; ++e) seed.at(mi, e) = u_col[hd][e];
        latent_tape.backward(zm, seed);
        pulled = latent_tape.grad(z);
      }
      for (std::size_t hk = 0; hk < heads; ++hk) {
        for (std::size_t k = 0; k < m; ++k) {
          double s = 0.0;
          for (std::size_t e = 0; e < d; ++e) s += pulled.at(k, e) * d_row[hk][e];
          g_hat.at(hd * m + mi, hk * m + k) = s;
        }
      }
    }
  }

  out.reconstruction = std::move(b);
  out.latent = std::move(g_hat);
  out.compression = std::move(a);
  out.kernel = matmul(matmul(out.reconstruction, out.latent), out.compression);
  out.rank_bound = std::min(r, n);
  return out;
}

Tensor frozen_global_mix(const LayerParams& layer, const LRSAConfig& cfg, const Tensor& h,
                         const Tensor& coords, const Tensor& value_input) {
  if (value_input.shape() != h.shape()) {
    throw DimensionError("value input " + to_string(value_input.shape()) +
                         " does not match features " + to_string(h.shape()));
  }
  RecordedMix rec = record_mix(layer, cfg, h);
  rec.trace.start_replay();
  Tape tape;
  const LayerWeights<Var> L = bind(tape, layer, cfg);
  return global_mix(tape.constant(value_input), L, cfg, coords, &rec.trace).value();
}

Tensor probe_induced_kernel(const LayerParams& layer, const LRSAConfig& cfg, const Tensor& h,
                            const Tensor& coords, std::size_t out_channel,
                            std::size_t in_channel, std::span<const std::size_t> columns,
                            double step) {
  check_kernel_request(cfg, h, out_channel, in_channel);
  if (!(step > 0.0)) throw ContractError("probe step must be positive");
  const std::size_t n = h.dim(0);
  RecordedMix rec = record_mix(layer, cfg, h);
  auto evaluate = [&](const Tensor& v) {
    rec.trace.start_replay();
    Tape tape;
    const LayerWeights<Var> Lt = bind(tape, layer, cfg);
    return global_mix(tape.constant(v), Lt, cfg, coords, &rec.trace).value();
  };
  Tensor out({n, columns.size()});
  Tensor v = rec.normalized;
  for (std::size_t c = 0; c < columns.size(); ++c) {
    const std::size_t j = columns[c];
    if (j >= n) throw DimensionError("probe column " + std::to_string(j) + " out of range");
    const double original = v.at(j, in_channel);
    v.at(j, in_channel) = original + step;
    const Tensor up = evaluate(v);
    v.at(j, in_channel) = original - step;
    const Tensor down = evaluate(v);
    v.at(j, in_channel) = original;
    for (std::size_t i = 0; i < n; ++i) {
      out.at(i, c) = (up.at(i, out_channel) - down.at(i, out_channel)) / (2.0 * step);
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// FLOP closed forms

BlockFlops block_flops(const LRSAConfig& cfg, std::size_t points) {
  using U = std::uint64_t;
  const U n = points, d = cfg.width, m = cfg.latents, f = cfg.ffn_width();
  BlockFlops out;
  U other = 4 * n * d * f;  // pointwise FFN
  switch (cfg.variant) {
    case Variant::fixed_basis:
      out.mixing = 4 * n * m * d + 2 * m * m * d;
      other += 2 * n * d * d;
      break;
    default: {
      // Compression: P W_Q, H W_K, H W_V, output projection.
      other += 2 * m * d * d + 4 * n * d * d + 2 * m * d * d;
      out.mixing += 4 * m * n * d;
      if (cfg.variant != Variant::linear_no) {
        other += 8 * m * d * f;  // FFN_in, FFN_out
        if (cfg.variant == Variant::no_intra_attn) {
          other += 4 * m * d * cfg.latent_mlp_width();
        } else {
          other += 8 * m * d * d;
          out.mixing += 4 * m * m * d;
        }
      }
      // Reconstruction: H W_Q, Z' W_K, Z' W_V, output projection.
      other += 2 * n * d * d + 4 * m * d * d + 2 * n * d * d;
      out.mixing += 4 * n * m * d;
    }
  }
  out.total = out.mixing + other;
  return out;
}

BlockFlops dense_block_flops(const LRSAConfig& cfg, std::size_t points) {
  using U = std::uint64_t;
  const U n = points, d = cfg.width, f = cfg.ffn_width();
  BlockFlops out;
  out.mixing = 4 * n * n * d;
  out.total = out.mixing + 8 * n * d * d + 4 * n * d * f;
  return out;
}

// ---------------------------------------------------------------------------
// Config JSON and checkpoints

void to_json(json& j, const LRSAConfig& c) {
  j = json{{"depth", c.depth},
           {"width", c.width},
           {"heads", c.heads},
           {"M", c.latents},
           {"ffn_ratio", c.ffn_ratio},
           {"num_freqs", c.num_freqs},
           {"norm", c.norm == nn::NormKind::layer_norm ? "layer_norm" : "rms_norm"},
           {"variant", std::string(to_string(c.variant))},
           {"in_channels", c.in_channels},
           {"out_channels", c.out_channels},
           {"coord_dims", c.coord_dims},
           {"zero_init_residual", c.zero_init_residual}};
}

void from_json(const json& j, LRSAConfig& c) {
  c.depth = j.at("depth").get<std::size_t>();
  c.width = j.at("width").get<std::size_t>();
  c.heads = j.at("heads").get<std::size_t>();
  c.latents = j.at("M").get<std::size_t>();
  c.ffn_ratio = j.at("ffn_ratio").get<double>();
  c.num_freqs = j.at("num_freqs").get<std::size_t>();
  const auto norm = j.at("norm").get<std::string>();
  if (norm == "layer_norm") {
    c.norm = nn::NormKind::layer_norm;
  } else if (norm == "rms_norm") {
    c.norm = nn::NormKind::rms_norm;
  } else {
    throw LoadError("unknown norm '" + norm + "'");
  }
  c.variant = parse_variant(j.at("variant").get<std::string>());
  c.in_channels = j.at("in_channels").get<std::size_t>();
  c.out_channels = j.at("out_channels").get<std::size_t>();
  c.coord_dims = j.at("coord_dims").get<std::size_t>();
  c.zero_init_residual = j.value("zero_init_residual", false);
}

namespace {
constexpr const char* kCheckpointFormat = "lrsa-checkpoint/1";
}

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create checkpoint directory " + dir.string() + ": " + ec.message());
  json manifest;
  manifest["format"] = kCheckpointFormat;
  manifest["kind"] = ckpt.kind;
  manifest["config"] = ckpt.config;
  manifest["step"] = ckpt.step;
  json tensors = json::object();
  if (ckpt.kind == "lrsa") {
    for_each_weight(ckpt.params, ckpt.config, [&](const std::string& name, const Tensor& t) {
      const std::string file = name + ".tns";
      write_tns(t, dir / file);
      tensors[name] = file;
    });
  }
  manifest["tensors"] = tensors;
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << manifest.dump(2) << '\n';
}

Checkpoint load_checkpoint(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("no manifest.json in " + dir.string());
  json manifest;
  try {
    manifest = json::parse(is);
  } catch (const json::exception& e) {
    throw LoadError("malformed checkpoint manifest: " + std::string(e.what()));
  }
  Checkpoint ckpt;
  try {
    if (manifest.value("format", "") != kCheckpointFormat) {
      throw LoadError("unsupported checkpoint format in " + dir.string());
    }
    ckpt.kind = manifest.value("kind", "lrsa");
    ckpt.config = manifest.at("config").get<LRSAConfig>();
    ckpt.step = manifest.value("step", std::size_t{0});
  } catch (const json::exception& e) {
    throw LoadError("checkpoint manifest: " + std::string(e.what()));
  }
  ckpt.config.validate();
  if (ckpt.kind == "oracle") return ckpt;
  if (ckpt.kind != "lrsa") throw LoadError("unknown checkpoint kind '" + ckpt.kind + "'");
  ckpt.params = init_params(ckpt.config, 0);
  const json& tensors = manifest.at("tensors");
  for_each_weight(ckpt.params, ckpt.config, [&](const std::string& name, Tensor& t) {
    if (!tensors.contains(name)) throw LoadError("checkpoint is missing tensor " + name);
    Tensor loaded = read_tns(dir / tensors.at(name).get<std::string>());
    if (loaded.shape() != t.shape()) {
      throw LoadError("tensor " + name + " has shape " + to_string(loaded.shape()) +
                      " but the config expects " + to_string(t.shape()));
    }
    t = std::move(loaded);
  });
  return ckpt;
}

}  // namespace lrsa::model
