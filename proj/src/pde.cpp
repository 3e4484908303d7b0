#include "lrsa/pde.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <random>

#include "json.hpp"
#include "lrsa/autodiff.hpp"
#include "lrsa/errors.hpp"
#include "parallel.hpp"

namespace lrsa::pde {

using nlohmann::json;
using lrsa::to_string;

namespace {

constexpr double kPi = std::numbers::pi;
constexpr const char* kDatasetFormat = "lrsa-dataset/1";

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Oracles

Tensor green_kernel_1d_poisson(std::size_t n) {
  if (n < 2) throw ContractError("green_kernel_1d_poisson needs n >= 2");
  const double h = 1.0 / static_cast<double>(n + 1);
  Tensor g({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double xi = static_cast<double>(i + 1) * h, xj = static_cast<double>(j + 1) * h;
      g.at(i, j) = std::min(xi, xj) * (1.0 - std::max(xi, xj));
    }
  }
  return g;
}

Tensor solve_poisson_1d(const Tensor& f) {
  const std::size_t n = f.size();
  const Tensor g = green_kernel_1d_poisson(n);
  const double h = 1.0 / static_cast<double>(n + 1);
  Tensor u({n});
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) s += g.at(i, j) * f[j];
    u[i] = s * h;
  }
  return u;
}

namespace {

void check_darcy_inputs(const Tensor& a, const Tensor& other, const char* what) {
  if (a.rank() != 2 || a.dim(0) != a.dim(1)) {
    throw DimensionError("darcy coefficient must be square [n x n], got " + to_string(a.shape()));
  }
  if (other.shape() != a.shape()) {
    throw DimensionError(std::string("darcy ") + what + " " + to_string(other.shape()) +
                         " does not match coefficient " + to_string(a.shape()));
  }
  if (a.dim(0) == 0 || a.dim(0) > kMaxDarcyGrid) {
    throw ResourceError("darcy grid must satisfy 1 <= n <= " + std::to_string(kMaxDarcyGrid) +
                        ", got " + std::to_string(a.dim(0)));
  }
}

double face(double ai, double aj) { return 2.0 * ai * aj / (ai + aj); }

}  // namespace

Tensor darcy_operator_apply(const Tensor& a, const Tensor& u) {
  check_darcy_inputs(a, u, "field");
  const std::size_t n = a.dim(0);
  const double inv_h2 = static_cast<double>((n + 1) * (n + 1));
  Tensor out({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      const double ai = a.at(i, j), ui = u.at(i, j);
      double s = 0.0;
      // Neighbours outside the grid are boundary nodes with u = 0.
      s += (i > 0 ? face(ai, a.at(i - 1, j)) * (ui - u.at(i - 1, j)) : ai * ui);
      s += (i + 1 < n ? face(ai, a.at(i + 1, j)) * (ui - u.at(i + 1, j)) : ai * ui);
      s += (j > 0 ? face(ai, a.at(i, j - 1)) * (ui - u.at(i, j - 1)) : ai * ui);
      s += (j + 1 < n ? face(ai, a.at(i, j + 1)) * (ui - u.at(i, j + 1)) : ai * ui);
      out.at(i, j) = s * inv_h2;
    }
  }
  return out;
}

Tensor solve_darcy_2d(const Tensor& a, const Tensor& f, SolverStats* stats) {
  check_darcy_inputs(a, f, "forcing");
  for (double v : a.values()) {
    if (!(v > 0.0)) throw DomainError("darcy coefficient must be positive, found " + std::to_string(v));
  }
  const std::size_t n = a.dim(0);
  Tensor u({n, n});
  const double fnorm = std::sqrt(dot(f.values(), f.values()));
  if (stats) *stats = {};
  if (fnorm == 0.0) return u;

  Tensor r = f;  // residual for u = 0
  Tensor p = r;
  double rr = dot(r.values(), r.values());
  const std::size_t max_iter = 10 * n * n;
  constexpr double kTol = 1e-12;
  for (std::size_t it = 1; it <= max_iter; ++it) {
    const Tensor ap = darcy_operator_apply(a, p);
    const double alpha = rr / dot(p.values(), ap.values());
    for (std::size_t i = 0; i < u.size(); ++i) {
      u[i] += alpha * p[i];
      r[i] -= alpha * ap[i];
    }
    const double rr_new = dot(r.values(), r.values());
    const double rel = std::sqrt(rr_new) / fnorm;
    if (rel <= kTol) {
      if (stats) *stats = {it, rel};
      return u;
    }
    const double beta = rr_new / rr;
    for (std::size_t i = 0; i < p.size(); ++i) p[i] = r[i] + beta * p[i];
    rr = rr_new;
  }
  throw SolverError("conjugate gradients did not reach relative residual 1e-12 in " +
                    std::to_string(max_iter) + " iterations");
}

std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t index) {
  std::uint64_t z = seed ^ (index + 0x9E3779B97F4A7C15ull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

namespace {

// Highest mode with non-negligible power exp(-(2 pi m l)^2) > 1e-18.
std::size_t mode_cutoff(double length_scale) {
  const double m = std::sqrt(18.0 * std::log(10.0)) / (2.0 * kPi * length_scale);
  return std::min<std::size_t>(64, static_cast<std::size_t>(std::floor(m)));
}

}  // namespace

Tensor sample_smooth_field(const Tensor& coords, double length_scale, std::uint64_t seed) {
  if (!(length_scale > 0.0)) throw ContractError("length_scale must be positive");
  if (coords.rank() != 2 || (coords.dim(1) != 1 && coords.dim(1) != 2)) {
    throw DimensionError("smooth field coordinates must be [N x 1] or [N x 2], got " +
                         to_string(coords.shape()));
  }
  const std::size_t dims = coords.dim(1), npts = coords.dim(0);
  const std::size_t kmax = mode_cutoff(length_scale);
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> power(kmax + 1);
  for (std::size_t m = 0; m <= kmax; ++m) {
    const double w = 2.0 * kPi * static_cast<double>(m) * length_scale;
    power[m] = std::exp(-w * w);
  }
  Tensor out({npts});
  if (dims == 1) {
    double total = 0.0;
    for (double p : power) total += p;
    std::vector<double> ca(kmax + 1), cb(kmax + 1);
    for (std::size_t m = 0; m <= kmax; ++m) {
      ca[m] = normal(rng);
      cb[m] = normal(rng);
    }
    for (std::size_t i = 0; i < npts; ++i) {
      const double x = coords.at(i, 0);
      double s = 0.0;
      for (std::size_t m = 0; m <= kmax; ++m) {
        const double arg = 2.0 * kPi * static_cast<double>(m) * x;
        s += std::sqrt(power[m]) * (ca[m] * std::cos(arg) + cb[m] * std::sin(arg));
      }
      out[i] = s / std::sqrt(total);
    }
    return out;
  }
  double total = 0.0;
  const std::size_t km = kmax + 1;
  std::vector<double> coef(km * km * 4);
  for (std::size_t m1 = 0; m1 < km; ++m1) {
    for (std::size_t m2 = 0; m2 < km; ++m2) {
      total += power[m1] * power[m2];
      for (std::size_t t = 0; t < 4; ++t) coef[(m1 * km + m2) * 4 + t] = normal(rng);
    }
  }
  std::vector<double> cx(km), sx(km), cy(km), sy(km);
  for (std::size_t i = 0; i < npts; ++i) {
    for (std::size_t m = 0; m < km; ++m) {
      const double ax = 2.0 * kPi * static_cast<double>(m) * coords.at(i, 0);
      const double ay = 2.0 * kPi * static_cast<double>(m) * coords.at(i, 1);
      cx[m] = std::cos(ax);
      sx[m] = std::sin(ax);
      cy[m] = std::cos(ay);
      sy[m] = std::sin(ay);
    }
    double s = 0.0;
    for (std::size_t m1 = 0; m1 < km; ++m1) {
      for (std::size_t m2 = 0; m2 < km; ++m2) {
        const double* c = &coef[(m1 * km + m2) * 4];
        s += std::sqrt(power[m1] * power[m2]) *
             (c[0] * cx[m1] * cy[m2] + c[1] * cx[m1] * sy[m2] + c[2] * sx[m1] * cy[m2] +
              c[3] * sx[m1] * sy[m2]);
      }
    }
    out[i] = s / std::sqrt(total);
  }
  return out;
}

Tensor sample_smooth_field(std::size_t n, std::size_t dims, double length_scale,
                           std::uint64_t seed) {
  if (n == 0) throw ContractError("smooth field needs n >= 1");
  if (dims != 1 && dims != 2) throw ContractError("smooth field supports 1 or 2 dimensions");
  const double h = 1.0 / static_cast<double>(n);
  Tensor coords({dims == 1 ? n : n * n, dims});
  for (std::size_t i = 0; i < coords.dim(0); ++i) {
    if (dims == 1) {
      coords.at(i, 0) = static_cast<double>(i) * h;
    } else {
      coords.at(i, 0) = static_cast<double>(i / n) * h;
      coords.at(i, 1) = static_cast<double>(i % n) * h;
    }
  }
  Tensor field = sample_smooth_field(coords, length_scale, seed);
  return dims == 1 ? field : field.reshaped({n, n});
}

Tensor advect_periodic(const Tensor& u0, double shift) {
  const std::size_t n = u0.size();
  if (n == 0) throw ContractError("advect_periodic needs at least one sample");
  const double nd = static_cast<double>(n);
  Tensor out({n});
  // Real Fourier series over modes 0..n/2; the Nyquist mode of an even grid
  // is a pure cosine.
  for (std::size_t k = 0; k <= n / 2; ++k) {
    double re = 0.0, im = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double arg = 2.0 * kPi * static_cast<double>(k * j % n) / nd;
      re += u0[j] * std::cos(arg);
      im -= u0[j] * std::sin(arg);
    }
    const bool self_conjugate = k == 0 || 2 * k == n;
    const double w = self_conjugate ? 1.0 / nd : 2.0 / nd;
    for (std::size_t i = 0; i < n; ++i) {
      const double x = static_cast<double>(i) / nd - shift;
      const double arg = 2.0 * kPi * static_cast<double>(k) * x;
      out[i] += w * (self_conjugate ? re * std::cos(arg)
                                    : re * std::cos(arg) - im * std::sin(arg));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Datasets

std::string_view to_string(Task task) {
  switch (task) {
    case Task::poisson1d: return "poisson1d";
    case Task::darcy2d: return "darcy2d";
    case Task::advection1d: return "advection1d";
  }
  return "poisson1d";
}

Task parse_task(std::string_view name) {
  for (Task t : {Task::poisson1d, Task::darcy2d, Task::advection1d}) {
    if (to_string(t) == name) return t;
  }
  throw UsageError("unknown task '" + std::string(name) +
                   "' (expected poisson1d, darcy2d or advection1d)");
}

PointSet uniform_point_set(Tensor coords, Tensor features) {
  if (coords.rank() != 2 || coords.dim(0) == 0) {
    throw ContractError("a point set needs at least one point");
  }
  if (features.rank() != 2 || features.dim(0) != coords.dim(0)) {
    throw DimensionError("features " + to_string(features.shape()) + " do not match " +
                         std::to_string(coords.dim(0)) + " points");
  }
  for (double c : coords.values()) {
    if (!(c >= 0.0 && c <= 1.0)) throw DomainError("coordinates must lie in the unit domain");
  }
  PointSet ps;
  ps.quad_weight = 1.0 / static_cast<double>(coords.dim(0));
  ps.coords = std::move(coords);
  ps.features = std::move(features);
  return ps;
}

PointSet OperatorDataset::point_set(std::size_t sample) const {
  if (sample >= count()) throw LookupError("sample " + std::to_string(sample) + " out of range");
  const std::size_t np = points(), c = in_channels();
  Tensor f({np, c});
  std::copy_n(inputs.data() + sample * np * c, np * c, f.data());
  return uniform_point_set(coords, std::move(f));
}

std::size_t default_train_count(std::size_t count) {
  return count <= 1 ? count : count - count / 5;
}

ChannelStats channel_stats(const Tensor& stacked, std::size_t count) {
  if (stacked.rank() != 3) {
    throw DimensionError("channel statistics need [S x N x C], got " + to_string(stacked.shape()));
  }
  if (count == 0 || count > stacked.dim(0)) {
    throw ContractError("channel statistics need 1 <= count <= samples");
  }
  const std::size_t c = stacked.dim(2), rows = count * stacked.dim(1);
  ChannelStats st;
  st.mean.assign(c, 0.0);
  st.stddev.assign(c, 0.0);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t k = 0; k < c; ++k) st.mean[k] += stacked[r * c + k];
  for (double& m : st.mean) m /= static_cast<double>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t k = 0; k < c; ++k) {
      const double d = stacked[r * c + k] - st.mean[k];
      st.stddev[k] += d * d;
    }
  }
  for (double& s : st.stddev) {
    s = std::sqrt(s / static_cast<double>(rows));
    if (!(s > 1e-300)) s = 1.0;
  }
  return st;
}

Tensor normalize(const Tensor& x, const ChannelStats& stats) {
  const std::size_t c = x.cols();
  if (c != stats.mean.size()) throw DimensionError("normalize: channel count mismatch");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = (out[i] - stats.mean[i % c]) / stats.stddev[i % c];
  }
  return out;
}

Tensor denormalize(const Tensor& x, const ChannelStats& stats) {
  const std::size_t c = x.cols();
  if (c != stats.mean.size()) throw DimensionError("denormalize: channel count mismatch");
  Tensor out = x;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = out[i] * stats.stddev[i % c] + stats.mean[i % c];
  }
  return out;
}

OperatorDataset assemble_dataset(Task task, std::size_t n, std::uint64_t seed,
                                 std::vector<std::size_t> grid, Tensor coords, Tensor inputs,
                                 Tensor targets, std::size_t train_count) {
  if (inputs.rank() != 3 || targets.rank() != 3 || inputs.dim(0) != targets.dim(0) ||
      inputs.dim(1) != targets.dim(1)) {
    throw DimensionError("inputs " + to_string(inputs.shape()) + " and targets " +
                         to_string(targets.shape()) + " must be [S x N x C] with equal S, N");
  }
  if (coords.rank() != 2 || coords.dim(0) != inputs.dim(1)) {
    throw DimensionError("coordinates " + to_string(coords.shape()) + " do not match " +
                         std::to_string(inputs.dim(1)) + " points");
  }
  std::size_t grid_points = 1;
  for (std::size_t g : grid) grid_points *= g;
  if (grid.empty() || grid_points != coords.dim(0)) {
    throw ContractError("grid extents do not multiply to the point count");
  }
  OperatorDataset ds;
  ds.task = task;
  ds.n = n;
  ds.seed = seed;
  ds.train_count = train_count;
  ds.grid = std::move(grid);
  ds.coords = std::move(coords);
  ds.inputs = std::move(inputs);
  ds.targets = std::move(targets);
  const std::size_t stats_count = std::max<std::size_t>(1, std::min(train_count, ds.count()));
  ds.normalization.inputs = channel_stats(ds.inputs, stats_count);
  ds.normalization.targets = channel_stats(ds.targets, stats_count);
  return ds;
}

OperatorDataset make_dataset(Task task, std::size_t count, std::size_t n, std::uint64_t seed,
                             std::optional<std::size_t> train_count) {
  if (count == 0) throw UsageError("dataset count must be at least 1");
  const std::size_t split = train_count.value_or(default_train_count(count));
  if (split == 0 || split > count) {
    throw UsageError("train count must be in [1, count]");
  }
  const double nd = static_cast<double>(n);
  Tensor coords;
  std::vector<std::size_t> grid;
  switch (task) {
    case Task::poisson1d:
      if (n < 2) throw UsageError("poisson1d needs n >= 2");
      coords = Tensor({n, 1});
      for (std::size_t i = 0; i < n; ++i) coords.at(i, 0) = static_cast<double>(i + 1) / (nd + 1);
      grid = {n};
      break;
    case Task::advection1d:
      if (n < 2) throw UsageError("advection1d needs n >= 2");
      coords = Tensor({n, 1});
      for (std::size_t i = 0; i < n; ++i) coords.at(i, 0) = static_cast<double>(i) / nd;
      grid = {n};
      break;
    case Task::darcy2d:
      if (n < 2 || n > kMaxDarcyGrid) {
        throw UsageError("darcy2d needs 2 <= n <= " + std::to_string(kMaxDarcyGrid));
      }
      coords = Tensor({n * n, 2});
      for (std::size_t i = 0; i < n * n; ++i) {
        coords.at(i, 0) = static_cast<double>(i / n + 1) / (nd + 1);
        coords.at(i, 1) = static_cast<double>(i % n + 1) / (nd + 1);
      }
      grid = {n, n};
      break;
  }
  const std::size_t np = coords.dim(0);
  Tensor inputs({count, np, 1}), targets({count, np, 1});
  parallel_for(count, [&](std::size_t s) {
    const std::uint64_t sseed = sample_seed(seed, s);
    Tensor in = sample_smooth_field(coords, kFieldLengthScale, sseed);
    Tensor out;
    switch (task) {
      case Task::poisson1d:
        out = solve_poisson_1d(in);
        break;
      case Task::advection1d:
        out = advect_periodic(in, kAdvectionShift);
        break;
      case Task::darcy2d: {
        // Two-phase medium: thresholded smooth field.
        for (double& v : in.values()) v = v >= 0.0 ? 12.0 : 3.0;
        const Tensor a = in.reshaped({n, n});
        out = solve_darcy_2d(a, Tensor({n, n}, 1.0)).reshaped({np});
        break;
      }
    }
    std::copy_n(in.data(), np, inputs.data() + s * np);
    std::copy_n(out.data(), np, targets.data() + s * np);
  });
  return assemble_dataset(task, n, seed, std::move(grid), std::move(coords), std::move(inputs),
                          std::move(targets), split);
}

namespace {

json stats_json(const ChannelStats& s) { return json{{"mean", s.mean}, {"std", s.stddev}}; }

ChannelStats stats_from_json(const json& j) {
  ChannelStats s;
  s.mean = j.at("mean").get<std::vector<double>>();
  s.stddev = j.at("std").get<std::vector<double>>();
  if (s.mean.size() != s.stddev.size()) throw LoadError("normalization mean/std length mismatch");
  for (double v : s.stddev) {
    if (!(v > 0.0)) throw LoadError("normalization std must be positive");
  }
  return s;
}

}  // namespace

void save_dataset(const OperatorDataset& ds, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
  std::vector<Tensor> coords(ds.count(), ds.coords);
  write_tns(ds.inputs, dir / "inputs.tns");
  write_tns(ds.targets, dir / "targets.tns");
  write_tns(stack(coords), dir / "coords.tns");
  json m;
  m["format"] = kDatasetFormat;
  m["task"] = std::string(to_string(ds.task));
  m["n"] = ds.n;
  m["count"] = ds.count();
  m["seed"] = ds.seed;
  m["train_count"] = ds.train_count;
  m["grid"] = ds.grid;
  m["normalization"] = {{"inputs", stats_json(ds.normalization.inputs)},
                        {"targets", stats_json(ds.normalization.targets)}};
  std::ofstream os(dir / "manifest.json", std::ios::trunc);
  if (!os) throw IoError("cannot write " + (dir / "manifest.json").string());
  os << m.dump(2) << '\n';
}

OperatorDataset load_dataset(const std::filesystem::path& dir) {
  std::ifstream is(dir / "manifest.json");
  if (!is) throw IoError("no manifest.json in " + dir.string());
  OperatorDataset ds;
  try {
    const json m = json::parse(is);
    if (m.value("format", "") != kDatasetFormat) {
      throw LoadError("unsupported dataset format in " + dir.string());
    }
    ds.task = parse_task(m.at("task").get<std::string>());
    ds.n = m.at("n").get<std::size_t>();
    ds.seed = m.at("seed").get<std::uint64_t>();
    ds.train_count = m.at("train_count").get<std::size_t>();
    ds.grid = m.at("grid").get<std::vector<std::size_t>>();
    ds.normalization.inputs = stats_from_json(m.at("normalization").at("inputs"));
    ds.normalization.targets = stats_from_json(m.at("normalization").at("targets"));
    ds.inputs = read_tns(dir / "inputs.tns");
    ds.targets = read_tns(dir / "targets.tns");
    const Tensor coords = read_tns(dir / "coords.tns");
    if (ds.inputs.rank() != 3 || ds.targets.rank() != 3 || coords.rank() != 3 ||
        ds.inputs.dim(0) != m.at("count").get<std::size_t>() ||
        ds.targets.dim(0) != ds.inputs.dim(0) || coords.dim(0) != ds.inputs.dim(0) ||
        ds.targets.dim(1) != ds.inputs.dim(1) || coords.dim(1) != ds.inputs.dim(1)) {
      throw LoadError("dataset tensors in " + dir.string() + " have inconsistent shapes");
    }
    const std::vector<Tensor> per_sample = unstack(coords);
    for (const Tensor& c : per_sample) {
      if (!(c == per_sample.front())) {
        throw LoadError("samples do not share one coordinate layout");
      }
    }
    ds.coords = per_sample.front();
  } catch (const json::exception& e) {
    throw LoadError("dataset manifest: " + std::string(e.what()));
  }
  if (ds.normalization.inputs.mean.size() != ds.in_channels() ||
      ds.normalization.targets.mean.size() != ds.out_channels()) {
    throw LoadError("normalization statistics do not match channel counts");
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Metrics

namespace {

struct SampleView {
  std::size_t samples, per_sample;
};

SampleView sample_view(const Tensor& pred, const Tensor& target, const char* what) {
  if (pred.shape() != target.shape()) {
    throw DimensionError(std::string(what) + ": prediction " + to_string(pred.shape()) +
                         " and target " + to_string(target.shape()) + " differ");
  }
  if (pred.empty()) throw ContractError(std::string(what) + " of empty tensors");
  if (pred.rank() <= 1) return {1, pred.size()};
  return {pred.dim(0), pred.size() / pred.dim(0)};
}

}  // namespace

double relative_l2(const Tensor& pred, const Tensor& target) {
  const auto v = sample_view(pred, target, "relative_l2");
  double total = 0.0;
  for (std::size_t s = 0; s < v.samples; ++s) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = s * v.per_sample; i < (s + 1) * v.per_sample; ++i) {
      const double d = pred[i] - target[i];
      num += d * d;
      den += target[i] * target[i];
    }
    if (den == 0.0) {
      throw DomainError("relative_l2: target sample " + std::to_string(s) + " has zero norm");
    }
    total += std::sqrt(num / den);
  }
  return total / static_cast<double>(v.samples);
}

double mse(const Tensor& pred, const Tensor& target) {
  const auto v = sample_view(pred, target, "mse");
  double total = 0.0;
  for (std::size_t s = 0; s < v.samples; ++s) {
    double acc = 0.0;
    for (std::size_t i = s * v.per_sample; i < (s + 1) * v.per_sample; ++i) {
      const double d = pred[i] - target[i];
      acc += d * d;
    }
    total += acc;
  }
  return total / static_cast<double>(v.samples);
}

double grad_metric_lg(const Tensor& pred, const Tensor& target,
                      std::span<const std::size_t> grid) {
  const auto v = sample_view(pred, target, "grad_metric_lg");
  std::size_t points = 1;
  for (std::size_t g : grid) points *= g;
  if (grid.empty() || points == 0 || v.per_sample % points != 0) {
    throw ContractError("grad_metric_lg: samples of " + std::to_string(v.per_sample) +
                        " values do not lie on grid " + to_string(Shape(grid.begin(), grid.end())));
  }
  const std::size_t channels = v.per_sample / points;
  std::vector<Tensor> gp, gt;
  for (std::size_t s = 0; s < v.samples; ++s) {
    Tensor p({points, channels}), t({points, channels});
    std::copy_n(pred.data() + s * v.per_sample, v.per_sample, p.data());
    std::copy_n(target.data() + s * v.per_sample, v.per_sample, t.data());
    gp.push_back(grid_gradient(p, grid));
    gt.push_back(grid_gradient(t, grid));
  }
  return relative_l2(stack(gp), stack(gt));
}

}  // namespace lrsa::pde
