#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "lrsa/autodiff.hpp"
#include "lrsa/nn.hpp"
#include "lrsa/tensor.hpp"

namespace lrsa::model {

enum class Variant {
  full,            // compress -> latent transformer -> reconstruct
  no_intra_attn,   // latent self-attention replaced by a per-token MLP
  symmetric_tied,  // compression keys and reconstruction queries share one projection
  linear_no,       // latent processing skipped (identity)
  fixed_basis,     // Phi G Phi^T H with a Fourier basis on the sample points
};

std::string_view to_string(Variant v);
Variant parse_variant(std::string_view name);

struct LRSAConfig {
  std::size_t depth = 2;
  std::size_t width = 64;
  std::size_t heads = 4;
  std::size_t latents = 8;  // M
  double ffn_ratio = 2.0;
  std::size_t num_freqs = 8;
  nn::NormKind norm = nn::NormKind::layer_norm;
  Variant variant = Variant::full;
  std::size_t in_channels = 1;
  std::size_t out_channels = 1;
  std::size_t coord_dims = 1;
  /// Zero attention output projections and FFN second layers inside blocks,
  /// so that every block starts as the identity map.
  bool zero_init_residual = false;

  void validate() const;
  std::size_t ffn_width() const;
  /// Hidden width of the latent MLP that replaces self-attention in the
  /// no_intra_attn variant, sized to match the 4 d^2 attention parameters.
  std::size_t latent_mlp_width() const;
  std::size_t pe_width() const { return 2 * num_freqs * coord_dims; }
  friend bool operator==(const LRSAConfig&, const LRSAConfig&) = default;
};

template <class T>
struct LayerWeights {
  T latents;  // P, M x d
  nn::AttentionWeights<T> down, up, latent_attn;
  nn::FeedForwardWeights<T> ffn_in, ffn_out, latent_mlp, ffn_point;
  nn::NormWeights<T> norm_block, norm_in, norm_mix, norm_out, norm_point;
  T basis_mix;   // fixed_basis: G, M x M
  T basis_proj;  // fixed_basis: d x d channel map
};

template <class T>
struct ModelWeights {
  nn::FeedForwardWeights<T> lift;
  std::vector<LayerWeights<T>> layers;
  T readout_w, readout_b;
};

using LayerParams = LayerWeights<Tensor>;
using ModelParams = ModelWeights<Tensor>;

/// Visits every weight the variant uses, in a fixed order, as fn(name, w).
/// Tied or unused slots are skipped.
template <class Layer, class Fn>
void for_each_layer_weight(Layer& L, const LRSAConfig& cfg, const std::string& prefix, Fn&& fn) {
  auto attn = [&](const std::string& n, auto& a, bool skip_q) {
    if (!skip_q) fn(n + ".wq", a.wq);
    fn(n + ".wk", a.wk);
    fn(n + ".wv", a.wv);
    fn(n + ".wo", a.wo);
  };
  auto ffn = [&](const std::string& n, auto& f) {
    fn(n + ".w1", f.w1);
    fn(n + ".b1", f.b1);
    fn(n + ".w2", f.w2);
    fn(n + ".b2", f.b2);
  };
  auto norm = [&](const std::string& n, auto& w) {
    fn(n + ".gain", w.gain);
    if (cfg.norm == nn::NormKind::layer_norm) fn(n + ".bias", w.bias);
  };
  const Variant v = cfg.variant;
  norm(prefix + "norm_block", L.norm_block);
  if (v == Variant::fixed_basis) {
    fn(prefix + "basis_mix", L.basis_mix);
    fn(prefix + "basis_proj", L.basis_proj);
  } else {
    fn(prefix + "latents", L.latents);
    attn(prefix + "down", L.down, false);
    if (v != Variant::linear_no) {
      norm(prefix + "norm_in", L.norm_in);
      ffn(prefix + "ffn_in", L.ffn_in);
      norm(prefix + "norm_mix", L.norm_mix);
      if (v == Variant::no_intra_attn) {
        ffn(prefix + "latent_mlp", L.latent_mlp);
      } else {
        attn(prefix + "latent_attn", L.latent_attn, false);
      }
      norm(prefix + "norm_out", L.norm_out);
      ffn(prefix + "ffn_out", L.ffn_out);
    }
    attn(prefix + "up", L.up, v == Variant::symmetric_tied);
  }
  norm(prefix + "norm_point", L.norm_point);
  ffn(prefix + "ffn_point", L.ffn_point);
}

template <class Model, class Fn>
void for_each_weight(Model& W, const LRSAConfig& cfg, Fn&& fn) {
  fn(std::string("lift.w1"), W.lift.w1);
  fn(std::string("lift.b1"), W.lift.b1);
  fn(std::string("lift.w2"), W.lift.w2);
  fn(std::string("lift.b2"), W.lift.b2);
  for (std::size_t l = 0; l < W.layers.size(); ++l) {
    for_each_layer_weight(W.layers[l], cfg, "layers." + std::to_string(l) + ".", fn);
  }
  fn(std::string("readout.w"), W.readout_w);
  fn(std::string("readout.b"), W.readout_b);
}

ModelParams init_params(const LRSAConfig& cfg, std::uint64_t seed);
LayerParams init_layer(const LRSAConfig& cfg, std::mt19937_64& rng);
/// Binds weights as tracked leaves without copying; `params` must outlive the tape.
ModelWeights<Var> bind(Tape& tape, const ModelParams& params, const LRSAConfig& cfg);
LayerWeights<Var> bind(Tape& tape, const LayerParams& params, const LRSAConfig& cfg);
/// Gradients of every visited weight, shaped like the parameters.
ModelParams collect_gradients(const Tape& tape, const ModelWeights<Var>& bound,
                              const LRSAConfig& cfg);
std::size_t parameter_count(const ModelParams& params, const LRSAConfig& cfg);
/// Visited weights in for_each_weight order.
std::vector<Tensor> flatten_params(const ModelParams& params, const LRSAConfig& cfg);
/// Inverse of flatten_params for tape handles: distributes `vars` (in
/// for_each_weight order) over a ModelWeights skeleton, restoring tied slots.
ModelWeights<Var> assemble_weights(std::span<const Var> vars, const LRSAConfig& cfg);
std::size_t layer_parameter_count(const LayerParams& params, const LRSAConfig& cfg);

// ---------------------------------------------------------------------------
// Forward pass. `coords` are the N x d_phys sample coordinates; only the
// fixed_basis variant reads them inside blocks.

/// Z = MHA(P, Norm(H)): M latent tokens regardless of N.
Var compress(Var h, const LayerWeights<Var>& L, const LRSAConfig& cfg,
             nn::AttentionTrace* trace = nullptr);
/// The three residual sub-steps: FFN_in, latent self-attention, FFN_out.
Var latent_mix(Var z, const LayerWeights<Var>& L, const LRSAConfig& cfg,
               nn::AttentionTrace* trace = nullptr);
/// Delta H = MHA(Norm(H), Z'). The caller adds the residual.
Var reconstruct(Var h, Var z_mixed, const LayerWeights<Var>& L, const LRSAConfig& cfg,
                nn::AttentionTrace* trace = nullptr);
/// Global mixing on already-normalised features; returns Delta H.
Var global_mix(Var h_normed, const LayerWeights<Var>& L, const LRSAConfig& cfg,
               const Tensor& coords, nn::AttentionTrace* trace = nullptr);
/// G = H + GlobalMix(Norm(H)); H' = G + FFN(Norm(G)).
Var lrsa_block(Var h, const LayerWeights<Var>& L, const LRSAConfig& cfg, const Tensor& coords,
               nn::AttentionTrace* trace = nullptr);
/// lift -> depth blocks -> linear readout. When `layer_inputs` is given it
/// receives the block inputs H^0 .. H^{L-1}.
Var backbone_forward(Tape& tape, const ModelWeights<Var>& W, const LRSAConfig& cfg,
                     const Tensor& coords, Var features,
                     std::vector<Var>* layer_inputs = nullptr);

// ---------------------------------------------------------------------------
// Fixed-basis and slicing forms of the low-rank template.

struct BasisMatrix {
  Tensor phi;  // N x M basis evaluations
  Tensor g;    // [M] diagonal or [M x M] full
};

/// Columns 1, sqrt2 cos(2 pi k x), sqrt2 sin(2 pi k x), ... scaled by
/// 1/sqrt(N), plus the Nyquist cosine when M = N is even. Orthonormal on the
/// uniform grid x_i = i/N. Requires 1-D coordinates.
Tensor fourier_basis(const Tensor& coords, std::size_t modes);
/// Phi G (Phi^T H).
Tensor fixed_basis_mix(const Tensor& h, const BasisMatrix& basis);

enum class SliceAxis { slices, points };

/// Token generation by slicing: w = softmax(H W_slice^T) over `axis`, then
/// z_j = sum_i w_ij h_i / sum_i w_ij.
Tensor slicing_compress(const Tensor& h, const Tensor& w_slice,
                        SliceAxis axis = SliceAxis::slices);

// ---------------------------------------------------------------------------
// Induced interaction kernel of one block's global mixing.
//
// Attention weights are frozen at the current H. The remaining map from the
// normalised value input to Delta H is linearised, giving per channel pair
// (out, in) an N x N kernel K = B * G_hat * A with B the stacked
// reconstruction weights (N x hM), A the stacked compression weights (hM x N)
// and G_hat the latent value transformation (hM x hM).

struct InducedKernel {
  Tensor kernel;          // N x N
  Tensor reconstruction;  // B
  Tensor latent;          // G_hat
  Tensor compression;     // A
  std::size_t rank_bound = 0;
};

inline constexpr std::size_t kMaxKernelPoints = 512;

InducedKernel materialize_induced_kernel(const LayerParams& layer, const LRSAConfig& cfg,
                                         const Tensor& h, const Tensor& coords,
                                         std::size_t out_channel, std::size_t in_channel);

/// Global mixing output with every attention pattern frozen at `h`, driven by
/// `value_input` in place of Norm(h).
Tensor frozen_global_mix(const LayerParams& layer, const LRSAConfig& cfg, const Tensor& h,
                         const Tensor& coords, const Tensor& value_input);

/// Columns of the induced kernel by central differences of frozen_global_mix
/// under unit perturbations of the value input. Returns N x |columns|.
Tensor probe_induced_kernel(const LayerParams& layer, const LRSAConfig& cfg, const Tensor& h,
                            const Tensor& coords, std::size_t out_channel,
                            std::size_t in_channel, std::span<const std::size_t> columns,
                            double step = 1e-5);

/// Norm(h) with the block's entry normalisation.
Tensor block_normalized(const LayerParams& layer, const LRSAConfig& cfg, const Tensor& h);

// ---------------------------------------------------------------------------
// Closed-form FLOP counts (matrix products only, 2mkn each) of one block
// forward pass on N points. "mixing" covers attention score and aggregation
// products (and basis projections for fixed_basis).

struct BlockFlops {
  std::uint64_t mixing = 0;
  std::uint64_t total = 0;
};

BlockFlops block_flops(const LRSAConfig& cfg, std::size_t points);
/// Same block with the global mixing replaced by dense single-layer
/// self-attention over all N points.
BlockFlops dense_block_flops(const LRSAConfig& cfg, std::size_t points);

// ---------------------------------------------------------------------------
// Checkpoints: directory with manifest.json plus one .tns per parameter.

struct Checkpoint {
  std::string kind = "lrsa";  // "lrsa", or "oracle" (predictions = targets)
  LRSAConfig config;
  ModelParams params;
  std::size_t step = 0;
};

void save_checkpoint(const std::filesystem::path& dir, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace lrsa::model
