#include "lrsa/config.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "lrsa/errors.hpp"

namespace lrsa {

namespace {

std::string_view trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

struct LineError {
  std::size_t line;
  std::string_view key;
  [[noreturn]] void fail(const std::string& why) const {
    throw UsageError("config line " + std::to_string(line) + " (" + std::string(key) +
                     "): " + why);
  }
};

std::size_t to_size(std::string_view v, const LineError& at) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) at.fail("expected a non-negative integer");
  return out;
}

double to_real(std::string_view v, const LineError& at) {
  // from_chars for doubles is unavailable in older libstdc++; strtod on a copy.
  const std::string s(v);
  char* end = nullptr;
  const double out = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size()) at.fail("expected a number");
  return out;
}

bool to_bool(std::string_view v, const LineError& at) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  at.fail("expected true or false");
}

std::string real(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

RunConfig parse_config(std::string_view text) {
  RunConfig cfg;
  auto& m = cfg.model;
  auto& t = cfg.train;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw UsageError("config line " + std::to_string(line_no) + ": expected key = value");
    }
    const std::string_view key = trim(line.substr(0, eq));
    const std::string_view val = trim(line.substr(eq + 1));
    const LineError at{line_no, key};
    try {
      if (key == "depth") m.depth = to_size(val, at);
      else if (key == "width") m.width = to_size(val, at);
      else if (key == "heads") m.heads = to_size(val, at);
      else if (key == "M") m.latents = to_size(val, at);
      else if (key == "ffn_ratio") m.ffn_ratio = to_real(val, at);
      else if (key == "num_freqs") m.num_freqs = to_size(val, at);
      else if (key == "norm") {
        if (val == "layer_norm") m.norm = nn::NormKind::layer_norm;
        else if (val == "rms_norm") m.norm = nn::NormKind::rms_norm;
        else at.fail("expected layer_norm or rms_norm");
      }
      else if (key == "variant") m.variant = model::parse_variant(val);
      else if (key == "in_channels") m.in_channels = to_size(val, at);
      else if (key == "out_channels") m.out_channels = to_size(val, at);
      else if (key == "coord_dims") m.coord_dims = to_size(val, at);
      else if (key == "zero_init_residual") m.zero_init_residual = to_bool(val, at);
      else if (key == "max_lr") t.max_lr = to_real(val, at);
      else if (key == "weight_decay") t.weight_decay = to_real(val, at);
      else if (key == "epochs") t.epochs = to_size(val, at);
      else if (key == "batch") t.batch_size = to_size(val, at);
      else if (key == "loss") t.loss = training::parse_loss(val);
      else if (key == "seed") t.seed = to_size(val, at);
      else if (key == "lg_weight") t.lg_weight = to_real(val, at);
      else if (key == "div_factor") t.div_factor = to_real(val, at);
      else if (key == "final_div_factor") t.final_div_factor = to_real(val, at);
      else if (key == "pct_start") t.pct_start = to_real(val, at);
      else if (key == "grad_clip") t.grad_clip = to_real(val, at);
      else at.fail("unknown key");
    } catch (const UsageError&) {
      throw;
    } catch (const Error& e) {
      at.fail(e.what());
    }
  }
  try {
    m.validate();
    t.validate();
  } catch (const ContractError& e) {
    throw UsageError(std::string("invalid config: ") + e.what());
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot read config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const RunConfig& cfg) {
  const auto& m = cfg.model;
  const auto& t = cfg.train;
  std::ostringstream os;
  os << "depth = " << m.depth << '\n'
     << "width = " << m.width << '\n'
     << "heads = " << m.heads << '\n'
     << "M = " << m.latents << '\n'
     << "ffn_ratio = " << real(m.ffn_ratio) << '\n'
     << "num_freqs = " << m.num_freqs << '\n'
     << "norm = " << (m.norm == nn::NormKind::layer_norm ? "layer_norm" : "rms_norm") << '\n'
     << "variant = " << model::to_string(m.variant) << '\n'
     << "in_channels = " << m.in_channels << '\n'
     << "out_channels = " << m.out_channels << '\n'
     << "coord_dims = " << m.coord_dims << '\n'
     << "zero_init_residual = " << (m.zero_init_residual ? "true" : "false") << '\n'
     << "max_lr = " << real(t.max_lr) << '\n'
     << "weight_decay = " << real(t.weight_decay) << '\n'
     << "epochs = " << t.epochs << '\n'
     << "batch = " << t.batch_size << '\n'
     << "loss = " << training::to_string(t.loss) << '\n'
     << "seed = " << t.seed << '\n'
     << "lg_weight = " << real(t.lg_weight) << '\n'
     << "div_factor = " << real(t.div_factor) << '\n'
     << "final_div_factor = " << real(t.final_div_factor) << '\n'
     << "pct_start = " << real(t.pct_start) << '\n'
     << "grad_clip = " << real(t.grad_clip) << '\n';
  return os.str();
}

}  // namespace lrsa
