#include "lrsa/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "kernels.hpp"
#include "lrsa/errors.hpp"

namespace lrsa {

// ---------------------------------------------------------------------------
// Tape

const Tensor& Var::value() const {
  if (!tape) throw LookupError("unbound Var");
  return tape->value(*this);
}

void Tape::check(Var v) const {
  if (v.tape != this || v.id >= nodes_.size()) throw LookupError("node is not on this tape");
}

Var Tape::variable(Tensor value) {
  nodes_.push_back(Node{std::move(value), nullptr, Tensor(), false, true, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::variable_view(const Tensor& value) {
  nodes_.push_back(Node{Tensor(), &value, Tensor(), false, true, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), nullptr, Tensor(), false, false, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn backward) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()),
                std::move(backward));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn backward) {
  bool needs = false;
  for (const Var& in : inputs) {
    check(in);
    needs = needs || nodes_[in.id].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), nullptr, Tensor(), false, needs,
                        needs ? std::move(backward) : BackwardFn{}});
  return Var{this, nodes_.size() - 1};
}

const Tensor& Tape::value(Var v) const {
  check(v);
  return nodes_[v.id].get();
}

bool Tape::requires_grad(Var v) const {
  check(v);
  return nodes_[v.id].requires_grad;
}

Tensor Tape::grad(Var v) const {
  check(v);
  const Node& n = nodes_[v.id];
  return n.has_grad ? n.grad : Tensor(n.get().shape());
}

Tensor& Tape::grad_buffer(Var v) {
  check(v);
  Node& n = nodes_[v.id];
  if (!n.has_grad) {
    n.grad = Tensor(n.get().shape());
    n.has_grad = true;
  }
  return n.grad;
}

Tensor Tape::take_grad(Var v) {
  check(v);
  Node& n = nodes_[v.id];
  if (!n.has_grad) return Tensor(n.get().shape());
  n.has_grad = false;
  return std::move(n.grad);
}

void Tape::backward(Var seed, const Tensor& seed_grad) {
  check(seed);
  if (seed_grad.shape() != nodes_[seed.id].get().shape()) {
    throw DimensionError("seed gradient shape " + to_string(seed_grad.shape()) +
                         " does not match node shape " +
                         to_string(nodes_[seed.id].get().shape()));
  }
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad = Tensor();
  }
  Node& s = nodes_[seed.id];
  s.grad = seed_grad;
  s.has_grad = true;
  for (std::size_t i = seed.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (n.has_grad && n.backward) n.backward(*this, n.grad);
  }
}

void Tape::backward(Var seed) {
  check(seed);
  const Tensor& v = nodes_[seed.id].get();
  if (v.size() != 1) {
    throw ContractError("backward without a seed gradient needs a single-element node, got " +
                        to_string(v.shape()));
  }
  backward(seed, Tensor(v.shape(), 1.0));
}

// ---------------------------------------------------------------------------
// FLOP accounting

namespace {
thread_local ScopedFlopCounter* g_counter = nullptr;
thread_local FlopCategory g_category = FlopCategory::other;
}  // namespace

ScopedFlopCounter::ScopedFlopCounter() : previous_(g_counter) { g_counter = this; }

ScopedFlopCounter::~ScopedFlopCounter() {
  g_counter = previous_;
  if (previous_) {
    previous_->count_.mixing += count_.mixing;
    previous_->count_.other += count_.other;
  }
}

FlopCategoryScope::FlopCategoryScope(FlopCategory category) : previous_(g_category) {
  g_category = category;
}

FlopCategoryScope::~FlopCategoryScope() { g_category = previous_; }

void record_flops(std::uint64_t flops) {
  if (!g_counter) return;
  if (g_category == FlopCategory::mixing) {
    g_counter->count_.mixing += flops;
  } else {
    g_counter->count_.other += flops;
  }
}

// ---------------------------------------------------------------------------
// Primitives

namespace {

Tape& tape_of(Var a) {
  if (!a.tape) throw LookupError("unbound Var");
  return *a.tape;
}

Tape& tape_of(Var a, Var b) {
  if (a.tape != b.tape || !a.tape) throw LookupError("operands live on different tapes");
  return *a.tape;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                         to_string(b.shape()));
  }
}

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + " expects a rank-2 tensor, got " + to_string(a.shape()));
  }
}

void add_into(Tensor& dst, const Tensor& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <class F>
Var unary(Var x, F&& f, Tape::BackwardFn backward_for_output) {
  Tape& t = tape_of(x);
  Tensor out = t.value(x);
  for (auto& v : out.values()) v = f(v);
  return t.record(std::move(out), {x}, std::move(backward_for_output));
}

}  // namespace

Var matmul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_rank2(av, "matmul");
  require_rank2(bv, "matmul");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  if (bv.dim(0) != k) {
    throw DimensionError("matmul inner extents differ: " + to_string(av.shape()) + " * " +
                         to_string(bv.shape()));
  }
  Tensor out({m, n});
  kernels::gemm(av.data(), bv.data(), out.data(), m, k, n, false, false, false);
  record_flops(2ull * m * k * n);
  return t.record(std::move(out), {a, b}, [a, b, m, k, n](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) {
      kernels::gemm(g.data(), tp.value(b).data(), tp.grad_buffer(a).data(), m, n, k, false, true,
                    true);
    }
    if (tp.requires_grad(b)) {
      kernels::gemm(tp.value(a).data(), g.data(), tp.grad_buffer(b).data(), k, m, n, true, false,
                    true);
    }
  });
}

Var matmul_nt(Var a, Var b) {
  Tape& t = tape_of(a, b);
  const Tensor& av = t.value(a);
  const Tensor& bv = t.value(b);
  require_rank2(av, "matmul_nt");
  require_rank2(bv, "matmul_nt");
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(0);
  if (bv.dim(1) != k) {
    throw DimensionError("matmul_nt inner extents differ: " + to_string(av.shape()) + " * " +
                         to_string(bv.shape()) + "^T");
  }
  Tensor out({m, n});
  kernels::gemm(av.data(), bv.data(), out.data(), m, k, n, false, true, false);
  record_flops(2ull * m * k * n);
  return t.record(std::move(out), {a, b}, [a, b, m, k, n](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) {
      kernels::gemm(g.data(), tp.value(b).data(), tp.grad_buffer(a).data(), m, n, k, false, false,
                    true);
    }
    if (tp.requires_grad(b)) {
      kernels::gemm(g.data(), tp.value(a).data(), tp.grad_buffer(b).data(), n, m, k, true, false,
                    true);
    }
  });
}

Var add(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(t.value(a), t.value(b), "add");
  Tensor out = t.value(a);
  add_into(out, t.value(b));
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) add_into(tp.grad_buffer(a), g);
    if (tp.requires_grad(b)) add_into(tp.grad_buffer(b), g);
  });
}

Var sub(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(t.value(a), t.value(b), "sub");
  Tensor out = t.value(a);
  const Tensor& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) add_into(tp.grad_buffer(a), g);
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_buffer(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = tape_of(a, b);
  require_same_shape(t.value(a), t.value(b), "mul");
  Tensor out = t.value(a);
  const Tensor& bv = t.value(b);
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  return t.record(std::move(out), {a, b}, [a, b](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_buffer(a);
      const Tensor& bv = tp.value(b);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_buffer(b);
      const Tensor& av = tp.value(a);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var x, double s) {
  return unary(x, [s](double v) { return s * v; }, [x, s](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += s * g[i];
  });
}

Var add_scalar(Var x, double s) {
  return unary(x, [s](double v) { return v + s; },
               [x](Tape& tp, const Tensor& g) { add_into(tp.grad_buffer(x), g); });
}

Var exp(Var x) {
  Tape& t = tape_of(x);
  Tensor out = t.value(x);
  for (auto& v : out.values()) v = std::exp(v);
  return t.record(std::move(out), {x}, [x, id = t.size()](Tape& tp, const Tensor& g) {
    const Tensor& yv = tp.value(Var{&tp, id});
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * yv[i];
  });
}

Var sqrt(Var x) {
  Tape& t = tape_of(x);
  Tensor out = t.value(x);
  for (auto& v : out.values()) {
    if (v < 0.0) throw DomainError("sqrt of a negative entry");
    v = std::sqrt(v);
  }
  return t.record(std::move(out), {x}, [x, id = t.size()](Tape& tp, const Tensor& g) {
    const Tensor& yv = tp.value(Var{&tp, id});
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (yv[i] > 0.0) gx[i] += g[i] / (2.0 * yv[i]);
    }
  });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}  // namespace

Var gelu(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  Tensor out(xv.shape());
  Tensor slope(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double v = xv[i];
    // With e = exp(2u): 1 - tanh(u) = 2 / (1 + e), 1 + tanh(u) = e (1 - tanh(u)).
    // Each form avoids cancellation on its side of u = 0.
    const double u = kGeluC * (v + kGeluA * v * v * v);
    const double e = std::exp(2.0 * u);
    const double one_minus = 2.0 / (1.0 + e);
    const double one_plus = u < 0.0 ? e * one_minus : 2.0 - one_minus;
    out[i] = 0.5 * v * one_plus;
    slope[i] = 0.5 * one_plus +
               0.5 * v * one_minus * one_plus * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
  }
  return t.record(std::move(out), {x}, [x, slope = std::move(slope)](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * slope[i];
  });
}

Var transpose(Var x) {
  Tape& t = tape_of(x);
  Tensor out = lrsa::transpose(t.value(x));
  return t.record(std::move(out), {x}, [x](Tape& tp, const Tensor& g) {
    add_into(tp.grad_buffer(x), lrsa::transpose(g));
  });
}

Var reshape(Var x, Shape shape) {
  Tape& t = tape_of(x);
  Tensor out = t.value(x).reshaped(std::move(shape));
  return t.record(std::move(out), {x}, [x](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ContractError("concat_cols of zero tensors");
  Tape& t = tape_of(parts.front());
  const Tensor& first = t.value(parts.front());
  Shape lead(first.shape().begin(), first.shape().end() - (first.rank() ? 1 : 0));
  std::vector<std::size_t> widths;
  std::size_t total = 0;
  for (const Var& p : parts) {
    tape_of(parts.front(), p);
    const Tensor& v = t.value(p);
    Shape l(v.shape().begin(), v.shape().end() - (v.rank() ? 1 : 0));
    if (l != lead) {
      throw DimensionError("concat_cols leading shapes differ: " + to_string(first.shape()) +
                           " vs " + to_string(v.shape()));
    }
    widths.push_back(v.cols());
    total += v.cols();
  }
  const std::size_t rows = first.rows();
  Shape shape = lead;
  shape.push_back(total);
  Tensor out(shape);
  std::size_t offset = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    const Tensor& v = t.value(parts[p]);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(v.data() + r * widths[p], widths[p], out.data() + r * total + offset);
    offset += widths[p];
  }
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record(std::move(out), parts,
                  [inputs, widths, rows, total](Tape& tp, const Tensor& g) {
                    std::size_t off = 0;
                    for (std::size_t p = 0; p < inputs.size(); ++p) {
                      if (tp.requires_grad(inputs[p])) {
                        Tensor& gp = tp.grad_buffer(inputs[p]);
                        for (std::size_t r = 0; r < rows; ++r)
                          for (std::size_t c = 0; c < widths[p]; ++c)
                            gp[r * widths[p] + c] += g[r * total + off + c];
                      }
                      off += widths[p];
                    }
                  });
}

Var slice_cols(Var x, std::size_t begin, std::size_t end) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  const std::size_t width = xv.cols();
  if (begin > end || end > width) {
    throw DimensionError("column slice [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + to_string(xv.shape()));
  }
  Shape shape = xv.shape();
  shape.back() = end - begin;
  Tensor out(shape);
  const std::size_t rows = xv.rows(), w = end - begin;
  for (std::size_t r = 0; r < rows; ++r)
    std::copy_n(xv.data() + r * width + begin, w, out.data() + r * w);
  return t.record(std::move(out), {x}, [x, begin, w, width, rows](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t r = 0; r < rows; ++r)
      for (std::size_t c = 0; c < w; ++c) gx[r * width + begin + c] += g[r * w + c];
  });
}

Var add_bias(Var x, Var bias) {
  Tape& t = tape_of(x, bias);
  const Tensor& xv = t.value(x);
  const Tensor& bv = t.value(bias);
  if (bv.size() != xv.cols()) {
    throw DimensionError("add_bias: bias " + to_string(bv.shape()) + " does not match rows of " +
                         to_string(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t rows = xv.rows(), k = xv.cols();
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < k; ++c) out[r * k + c] += bv[c];
  return t.record(std::move(out), {x, bias}, [x, bias, rows, k](Tape& tp, const Tensor& g) {
    if (tp.requires_grad(x)) add_into(tp.grad_buffer(x), g);
    if (tp.requires_grad(bias)) {
      Tensor& gb = tp.grad_buffer(bias);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < k; ++c) gb[c] += g[r * k + c];
    }
  });
}

Var sum(Var x) {
  Tape& t = tape_of(x);
  double s = 0.0;
  for (double v : t.value(x).values()) s += v;
  return t.record(Tensor::scalar(s), {x}, [x](Tape& tp, const Tensor& g) {
    Tensor& gx = tp.grad_buffer(x);
    for (auto& v : gx.values()) v += g[0];
  });
}

Var softmax_lastdim(Var x) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  const std::size_t k = xv.cols();
  if (k == 0 || xv.rank() == 0) {
    throw DimensionError("softmax over an empty last dimension, shape " + to_string(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t rows = xv.rows();
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.data() + r * k;
    const double mx = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t c = 0; c < k; ++c) {
      row[c] = std::exp(row[c] - mx);
      s += row[c];
    }
    const double inv = 1.0 / s;
    for (std::size_t c = 0; c < k; ++c) row[c] *= inv;
  }
  return t.record(std::move(out), {x}, [x, id = t.size(), rows, k](Tape& tp, const Tensor& g) {
    const Tensor& s = tp.value(Var{&tp, id});
    Tensor& gx = tp.grad_buffer(x);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* sr = s.data() + r * k;
      const double* gr = g.data() + r * k;
      double dot = 0.0;
      for (std::size_t c = 0; c < k; ++c) dot += gr[c] * sr[c];
      for (std::size_t c = 0; c < k; ++c) gx[r * k + c] += sr[c] * (gr[c] - dot);
    }
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  Tape& t = tape_of(x, gain);
  tape_of(x, bias);
  if (!(eps > 0.0)) throw ContractError("layer_norm eps must be positive");
  const Tensor& xv = t.value(x);
  const std::size_t d = xv.cols(), rows = xv.rows();
  if (d == 0) throw DimensionError("layer_norm over an empty last dimension");
  if (t.value(gain).size() != d || t.value(bias).size() != d) {
    throw DimensionError("layer_norm gain/bias " + to_string(t.value(gain).shape()) + "/" +
                         to_string(t.value(bias).shape()) + " do not match " +
                         to_string(xv.shape()));
  }
  const Tensor& gv = t.value(gain);
  const Tensor& bv = t.value(bias);
  Tensor xhat(xv.shape());
  std::vector<double> rstd(rows);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * d;
    double mean = 0.0;
    for (std::size_t c = 0; c < d; ++c) mean += xr[c];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t c = 0; c < d; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(d);
    rstd[r] = 1.0 / std::sqrt(var + eps);
    for (std::size_t c = 0; c < d; ++c) {
      const double h = (xr[c] - mean) * rstd[r];
      xhat[r * d + c] = h;
      out[r * d + c] = h * gv[c] + bv[c];
    }
  }
  return t.record(std::move(out), {x, gain, bias},
                  [x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd), rows, d](
                      Tape& tp, const Tensor& g) {
                    const Tensor& gv = tp.value(gain);
                    if (tp.requires_grad(gain)) {
                      Tensor& gg = tp.grad_buffer(gain);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < d; ++c) gg[c] += g[r * d + c] * xhat[r * d + c];
                    }
                    if (tp.requires_grad(bias)) {
                      Tensor& gb = tp.grad_buffer(bias);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < d; ++c) gb[c] += g[r * d + c];
                    }
                    if (tp.requires_grad(x)) {
                      Tensor& gx = tp.grad_buffer(x);
                      const double inv_d = 1.0 / static_cast<double>(d);
                      for (std::size_t r = 0; r < rows; ++r) {
                        double m1 = 0.0, m2 = 0.0;
                        for (std::size_t c = 0; c < d; ++c) {
                          const double dh = g[r * d + c] * gv[c];
                          m1 += dh;
                          m2 += dh * xhat[r * d + c];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for (std::size_t c = 0; c < d; ++c) {
                          const double dh = g[r * d + c] * gv[c];
                          gx[r * d + c] += rstd[r] * (dh - m1 - xhat[r * d + c] * m2);
                        }
                      }
                    }
                  });
}

Var rms_norm(Var x, Var gain, double eps) {
  Tape& t = tape_of(x, gain);
  if (!(eps > 0.0)) throw ContractError("rms_norm eps must be positive");
  const Tensor& xv = t.value(x);
  const std::size_t d = xv.cols(), rows = xv.rows();
  if (d == 0) throw DimensionError("rms_norm over an empty last dimension");
  if (t.value(gain).size() != d) {
    throw DimensionError("rms_norm gain " + to_string(t.value(gain).shape()) +
                         " does not match " + to_string(xv.shape()));
  }
  const Tensor& gv = t.value(gain);
  std::vector<double> rinv(rows);
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    double ms = 0.0;
    for (std::size_t c = 0; c < d; ++c) ms += xv[r * d + c] * xv[r * d + c];
    rinv[r] = 1.0 / std::sqrt(ms / static_cast<double>(d) + eps);
    for (std::size_t c = 0; c < d; ++c) out[r * d + c] = xv[r * d + c] * rinv[r] * gv[c];
  }
  return t.record(std::move(out), {x, gain},
                  [x, gain, rinv = std::move(rinv), rows, d](Tape& tp, const Tensor& g) {
                    const Tensor& xv = tp.value(x);
                    const Tensor& gv = tp.value(gain);
                    if (tp.requires_grad(gain)) {
                      Tensor& gg = tp.grad_buffer(gain);
                      for (std::size_t r = 0; r < rows; ++r)
                        for (std::size_t c = 0; c < d; ++c)
                          gg[c] += g[r * d + c] * xv[r * d + c] * rinv[r];
                    }
                    if (tp.requires_grad(x)) {
                      Tensor& gx = tp.grad_buffer(x);
                      for (std::size_t r = 0; r < rows; ++r) {
                        double dot = 0.0;
                        for (std::size_t c = 0; c < d; ++c)
                          dot += g[r * d + c] * gv[c] * xv[r * d + c];
                        const double k = rinv[r] * rinv[r] * rinv[r] * dot / static_cast<double>(d);
                        for (std::size_t c = 0; c < d; ++c)
                          gx[r * d + c] += rinv[r] * g[r * d + c] * gv[c] - k * xv[r * d + c];
                      }
                    }
                  });
}

namespace {

struct GridLayout {
  std::vector<std::size_t> extents;
  std::vector<std::size_t> strides;
  std::size_t points = 1;
};

GridLayout grid_layout(std::span<const std::size_t> grid, const Tensor& x) {
  GridLayout g;
  g.extents.assign(grid.begin(), grid.end());
  g.strides.resize(grid.size());
  for (std::size_t a = grid.size(); a-- > 0;) {
    g.strides[a] = g.points;
    g.points *= grid[a];
  }
  if (grid.empty() || x.rank() != 2 || x.dim(0) != g.points) {
    throw ContractError("grid_gradient: field " + to_string(x.shape()) +
                        " is not an [N x C] sample of grid " +
                        to_string(Shape(grid.begin(), grid.end())));
  }
  return g;
}

// out[p, a*C + c] = D_a x[:, c]; adjoint when `adjoint` is set (then src is the
// gradient-shaped tensor and dst the field-shaped one).
void apply_grid_gradient(const GridLayout& g, std::size_t channels, const Tensor& src,
                         Tensor& dst, bool adjoint) {
  const std::size_t axes = g.extents.size();
  const std::size_t out_w = channels * axes;
  for (std::size_t a = 0; a < axes; ++a) {
    const std::size_t n = g.extents[a], s = g.strides[a];
    for (std::size_t p = 0; p < g.points; ++p) {
      const std::size_t i = (p / s) % n;
      std::size_t lo, hi;
      double w;
      if (n == 1) {
        continue;
      } else if (i == 0) {
        lo = p, hi = p + s, w = 1.0;
      } else if (i == n - 1) {
        lo = p - s, hi = p, w = 1.0;
      } else {
        lo = p - s, hi = p + s, w = 0.5;
      }
      for (std::size_t c = 0; c < channels; ++c) {
        if (!adjoint) {
          dst[p * out_w + a * channels + c] += w * (src[hi * channels + c] - src[lo * channels + c]);
        } else {
          const double gv = w * src[p * out_w + a * channels + c];
          dst[hi * channels + c] += gv;
          dst[lo * channels + c] -= gv;
        }
      }
    }
  }
}

}  // namespace

Tensor grid_gradient(const Tensor& x, std::span<const std::size_t> grid) {
  const GridLayout g = grid_layout(grid, x);
  const std::size_t channels = x.dim(1);
  Tensor out({g.points, channels * grid.size()});
  apply_grid_gradient(g, channels, x, out, false);
  return out;
}

Var grid_gradient(Var x, std::span<const std::size_t> grid) {
  Tape& t = tape_of(x);
  const Tensor& xv = t.value(x);
  GridLayout g = grid_layout(grid, xv);
  const std::size_t channels = xv.dim(1);
  Tensor out({g.points, channels * grid.size()});
  apply_grid_gradient(g, channels, xv, out, false);
  return t.record(std::move(out), {x}, [x, g = std::move(g), channels](Tape& tp, const Tensor& gr) {
    apply_grid_gradient(g, channels, gr, tp.grad_buffer(x), true);
  });
}

// ---------------------------------------------------------------------------

GradCheckReport grad_check(const ScalarProgram& program, std::span<const Tensor> params,
                           double step) {
  if (!(step > 0.0)) throw ContractError("grad_check step must be positive");
  std::vector<Tensor> analytic;
  {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(params.size());
    for (const Tensor& p : params) vars.push_back(tape.variable(p));
    const Var out = program(tape, vars);
    if (tape.value(out).size() != 1) {
      throw ContractError("grad_check program must return a scalar, got " +
                          to_string(tape.value(out).shape()));
    }
    tape.backward(out);
    for (const Var& v : vars) analytic.push_back(tape.grad(v));
  }

  std::vector<Tensor> work(params.begin(), params.end());
  auto evaluate = [&]() {
    Tape tape;
    std::vector<Var> vars;
    vars.reserve(work.size());
    for (const Tensor& p : work) vars.push_back(tape.constant(p));
    return tape.value(program(tape, vars))[0];
  };

  GradCheckReport report;
  for (const Tensor& g : analytic) report.gradient_scale = std::max(report.gradient_scale, max_abs(g));
  const double scaled_floor = std::max(kGradScaleFloor * report.gradient_scale, 1e-12);
  for (std::size_t p = 0; p < work.size(); ++p) {
    for (std::size_t i = 0; i < work[p].size(); ++i) {
      const double original = work[p][i];
      work[p][i] = original + step;
      const double up = evaluate();
      work[p][i] = original - step;
      const double down = evaluate();
      work[p][i] = original;
      const double numeric = (up - down) / (2.0 * step);
      const double a = analytic[p][i];
      const double diff = std::abs(a - numeric);
      const double mag = std::max(std::abs(a), std::abs(numeric));
      const double rel = diff / std::max(mag, 1e-12);
      ++report.entries_checked;
      report.max_abs_error = std::max(report.max_abs_error, diff);
      report.max_scaled_error = std::max(report.max_scaled_error, diff / std::max(mag, scaled_floor));
      if (rel > report.max_relative_error || report.entries_checked == 1) {
        report.max_relative_error = rel;
        report.worst_param = p;
        report.worst_index = i;
        report.worst_analytic = a;
        report.worst_numeric = numeric;
      }
    }
  }
  return report;
}

}  // namespace lrsa
