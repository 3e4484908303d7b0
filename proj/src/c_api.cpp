#include "lrsa/lrsa.h"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <memory>
#include <new>
#include <string>

#include "json_config.hpp"
#include "lrsa/config.hpp"
#include "lrsa/errors.hpp"
#include "lrsa/lab.hpp"
#include "lrsa/pde.hpp"
#include "lrsa/spectral.hpp"
#include "lrsa/training.hpp"

struct lrsa_dataset {
  lrsa::pde::OperatorDataset data;
};

struct lrsa_model {
  lrsa::model::Checkpoint ckpt;
};

namespace {

using nlohmann::json;
using namespace lrsa;

constexpr const char* kVersion = "0.1.0";

thread_local std::string g_last_error;

lrsa_status status_for(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::usage: return LRSA_ERR_USAGE;
    case ErrorKind::dimension: return LRSA_ERR_DIMENSION;
    case ErrorKind::contract: return LRSA_ERR_CONTRACT;
    case ErrorKind::domain: return LRSA_ERR_DOMAIN;
    case ErrorKind::lookup: return LRSA_ERR_LOOKUP;
    case ErrorKind::io: return LRSA_ERR_IO;
    case ErrorKind::load: return LRSA_ERR_LOAD;
    case ErrorKind::resource: return LRSA_ERR_RESOURCE;
    case ErrorKind::convergence: return LRSA_ERR_CONVERGENCE;
    case ErrorKind::solver: return LRSA_ERR_SOLVER;
    case ErrorKind::training: return LRSA_ERR_TRAINING;
  }
  return LRSA_ERR_INTERNAL;
}

// Runs fn, translating exceptions into status codes and the thread-local
// error message.
template <class F>
lrsa_status try_(F&& fn) {
  g_last_error.clear();
  try {
    fn();
    return LRSA_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return status_for(e.kind());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return LRSA_ERR_RESOURCE;
  } catch (const json::exception& e) {
    g_last_error = std::string("json: ") + e.what();
    return LRSA_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return LRSA_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return LRSA_ERR_INTERNAL;
  }
}

char* dup_string(const std::string& s) {
  char* out = new char[s.size() + 1];
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

// NaN is not representable in JSON.
json number(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }

json channel_json(const pde::ChannelStats& s) { return {{"mean", s.mean}, {"std", s.stddev}}; }

json train_config_json(const training::TrainConfig& t) {
  return {{"max_lr", t.max_lr},
          {"weight_decay", t.weight_decay},
          {"epochs", t.epochs},
          {"batch", t.batch_size},
          {"seed", t.seed},
          {"loss", std::string(training::to_string(t.loss))},
          {"lg_weight", t.lg_weight},
          {"div_factor", t.div_factor},
          {"final_div_factor", t.final_div_factor},
          {"pct_start", t.pct_start},
          {"grad_clip", t.grad_clip}};
}

json report_json(const spectral::KernelReport& r) {
  json errors = json::array();
  for (const auto& e : r.rank_errors) errors.push_back({{"rank", e.rank}, {"error", e.error}});
  return {{"singular_values", r.singular_values},
          {"rank_errors", errors},
          {"error_metric", "relative_frobenius"},
          {"tolerance", r.tolerance},
          {"numerical_rank", r.numerical_rank}};
}

RunConfig config_from(const char* text) { return parse_config(text ? text : ""); }

json metrics_json(const training::Metrics& m) {
  json j = {{"samples", m.samples}, {"rel_l2", number(m.rel_l2)}, {"mse", number(m.mse)}};
  if (m.lg) j["lg"] = number(*m.lg);
  return j;
}

}  // namespace

extern "C" {

const char* lrsa_version(void) { return kVersion; }

const char* lrsa_status_name(lrsa_status status) {
  switch (status) {
    case LRSA_OK: return "ok";
    case LRSA_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case LRSA_ERR_USAGE: return "usage";
    case LRSA_ERR_DIMENSION: return "dimension";
    case LRSA_ERR_CONTRACT: return "contract";
    case LRSA_ERR_DOMAIN: return "domain";
    case LRSA_ERR_LOOKUP: return "lookup";
    case LRSA_ERR_IO: return "io";
    case LRSA_ERR_LOAD: return "load";
    case LRSA_ERR_RESOURCE: return "resource";
    case LRSA_ERR_CONVERGENCE: return "convergence";
    case LRSA_ERR_SOLVER: return "solver";
    case LRSA_ERR_TRAINING: return "training";
    case LRSA_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

const char* lrsa_last_error(void) { return g_last_error.c_str(); }

void lrsa_string_free(char* s) { delete[] s; }

lrsa_status lrsa_config_resolve(const char* config_text, char** out_json) {
  if (!out_json) return LRSA_ERR_INVALID_ARGUMENT;
  return try_([&] {
    const RunConfig cfg = config_from(config_text);
    const json j = {{"model", cfg.model}, {"train", train_config_json(cfg.train)}};
    *out_json = dup_string(j.dump());
  });
}

lrsa_status lrsa_dataset_generate(const char* task, size_t count, size_t n, uint64_t seed,
                                  lrsa_dataset** out) {
  if (!task || !out) return LRSA_ERR_INVALID_ARGUMENT;
  return try_([&] {
    auto ds = std::make_unique<lrsa_dataset>();
    ds->data = pde::make_dataset(pde::parse_task(task), count, n, seed);
    *out = ds.release();
  });
}

lrsa_status lrsa_dataset_load(const char* dir, lrsa_dataset** out) {
  if (!dir || !out) return LRSA_ERR_INVALID_ARGUMENT;
  return try_([&] {
    auto ds = std::make_unique<lrsa_dataset>();
    ds->data = pde::load_dataset(dir);
    *out = ds.release();
  });
}

lrsa_status lrsa_dataset_save(const lrsa_dataset* ds, const char* dir) {
  if (!ds || !dir) return LRSA_ERR_INVALID_ARGUMENT;
  return try_([&] { pde::save_dataset(ds->data, dir); });
}

lrsa_status lrsa_dataset_summary_json(const lrsa_dataset* ds, char** out_json) {
  if (!ds || !out_json) return LRSA_ERR_INVALID_ARGUMENT;
  return try_([&] {
    const auto& d = ds->data;
    auto range = [](const Tensor& t) {
      double lo = t.size() ? t[0] : 0.0, hi = lo, s = 0.0;
      for (double v : t.values()) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
        s += v;
      }
      return json{{"min", lo}, {"max", hi}, {"mean", t.size() ? s / t.size() : 0.0}};
    };
    const json j = {{"task", std::string(pde::to_string(d.task))},
                    {"n", d.n},
                    {"count", d.count()},
                    {"train_count", d.train_count},
                    {"seed", d.seed},
                    {"points", d.points()},
                    {"grid", d.grid},
                    {"in_channels", d.in_channels()},
                    {"out_channels", d.out_channels()},
                    {"inputs", range(d.inputs)},
                    {"targets", range(d.targets)},
                    {"normalization",
                     {{"inputs", channel_json(d.normalization.inputs)},
                      {"targets", channel_json(d.normalization.targets)}}}};
    *out_json = dup_string(j.dump());
  });
}

void lrsa_dataset_destroy(lrsa_dataset* ds) { delete ds; }

lrsa_status lrsa_model_create(const char* config_text, lrsa_model** out) {
  if (!out) return LRSA_ERR_INVALID_ARGUMENT;
  return try_([&] {
    const RunConfig cfg = config_from(config_text);
    auto m = std::make_unique<lrsa_model>();
    m->ckpt.config = cfg.model;
    m->ckpt.params = model::init_params(cfg.model, cfg.train.seed);
    *out = m.release();
  });
}

lrsa_status lrsa_model_load(const char* checkpoint_dir, lrsa_model** out) {
  if (!checkpoint_dir || !out) return LRSA_ERR_INVALID_ARGUMENT;
  return try_([&] {
    auto m = std::make_unique<lrsa_model>();
    m->ckpt = model::load_checkpoint(checkpoint_dir);
    *out = m.release();
  });
}

lrsa_status lrsa_model_save(const lrsa_model* model, const char* checkpoint_dir) {
  if (!model || !checkpoint_dir) return LRSA_ERR_INVALID_ARGUMENT;
  return try_([&] { model::save_checkpoint(checkpoint_dir, model->ckpt); });
}

lrsa_status lrsa_model_config_json(const lrsa_model* model, char** out_json) {
  if (!model || !out_json) return LRSA_ERR_INVALID_ARGUMENT;
  return try_([&] {
    json j = model->ckpt.config;
    j["kind"] = model->ckpt.kind;
    *out_json = dup_string(j.dump());
  });
}

lrsa_status lrsa_model_parameter_count(const lrsa_model* model, size_t* out) {
  if (!model || !out) return LRSA_ERR_INVALID_ARGUMENT;
  return try_([&] {
    *out = model->ckpt.kind == "lrsa"
               ? model::parameter_count(model->ckpt.params, model->ckpt.config)
               : 0;
  });
}

void lrsa_model_destroy(lrsa_model* model) { delete model; }

lrsa_status lrsa_train(const char* config_text, const lrsa_dataset* ds, const char* out_dir,
                       lrsa_model** out_model, char** out_summary_json) {
  if (!ds) return LRSA_ERR_INVALID_ARGUMENT;
  return try_([&] {
    const RunConfig cfg = config_from(config_text);
    training::TrainOptions opts;
    if (out_dir) opts.out_dir = std::filesystem::path(out_dir);
    const auto t0 = std::chrono::steady_clock::now();
    training::TrainResult result = training::train(cfg.model, ds->data, cfg.train, opts);
    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (out_summary_json) {
      json j = {{"epochs", result.history.size()},
                {"steps", result.steps},
                {"seconds", secs},
                {"parameter_count", model::parameter_count(result.params, cfg.model)},
                {"model", cfg.model},
                {"train", train_config_json(cfg.train)}};
      if (!result.history.empty()) {
        j["final_train_loss"] = number(result.history.back().train_loss);
        j["final_test_rel_l2"] = number(result.history.back().test_rel_l2);
      }
      if (out_dir) {
        j["checkpoint"] = (std::filesystem::path(out_dir) / "checkpoint").string();
        j["history"] = (std::filesystem::path(out_dir) / "history.csv").string();
      }
      *out_summary_json = dup_string(j.dump());
    }
    if (out_model) {
      auto m = std::make_unique<lrsa_model>();
      m->ckpt = {"lrsa", cfg.model, std::move(result.params), result.steps};
      *out_model = m.release();
    }
  });
}

lrsa_status lrsa_evaluate(const lrsa_model* model, const lrsa_dataset* ds, const char* split,
                          char** out_json) {
  if (!model || !ds || !out_json) return LRSA_ERR_INVALID_ARGUMENT;
  return try_([&] {
    const training::Split s = training::parse_split(split ? split : "test");
    json j = metrics_json(training::evaluate(model->ckpt, ds->data, s));
    j["split"] = std::string(training::to_string(s));
    j["task"] = std::string(pde::to_string(ds->data.task));
    *out_json = dup_string(j.dump());
  });
}

lrsa_status lrsa_analyze_green1d(size_t n, const char* csv_path, char** out_json) {
  return try_([&] {
    const spectral::KernelReport r = lab::analyze_green1d(n);
    if (csv_path) spectral::emit_decay_csv(r, csv_path);
    if (out_json) {
      json j = report_json(r);
      j["source"] = "green1d";
      j["n"] = n;
      const std::size_t last = std::min<std::size_t>(32, r.singular_values.size());
      if (last > 2) j["loglog_slope_2_32"] = spectral::loglog_slope(r.singular_values, 2, last);
      *out_json = dup_string(j.dump());
    }
  });
}

lrsa_status lrsa_analyze_model_kernel(const lrsa_model* model, size_t n, uint64_t seed,
                                      size_t layer, size_t out_channel, size_t in_channel,
                                      const char* csv_path, char** out_json) {
  if (!model) return LRSA_ERR_INVALID_ARGUMENT;
  return try_([&] {
    const lab::ModelKernelAnalysis a =
        lab::analyze_model_kernel(model->ckpt, n, seed, layer, out_channel, in_channel);
    if (csv_path) spectral::emit_decay_csv(a.report, csv_path);
    if (out_json) {
      json j = report_json(a.report);
      j["source"] = "model";
      j["n"] = n;
      j["points"] = a.points;
      j["layer"] = a.layer;
      j["channels"] = {a.out_channel, a.in_channel};
      j["rank_bound"] = a.rank_bound;
      j["sigma_ratio_after_bound"] = a.sigma_ratio_after_bound;
      j["probe_mismatch"] = a.probe_mismatch;
      *out_json = dup_string(j.dump());
    }
  });
}

lrsa_status lrsa_gradcheck(const char* config_text, uint64_t seed, size_t points,
                           char** out_json) {
  if (!out_json) return LRSA_ERR_INVALID_ARGUMENT;
  return try_([&] {
    const model::LRSAConfig cfg = config_text && *config_text ? parse_config(config_text).model
                                                              : lab::gradcheck_config();
    const GradCheckReport r = lab::model_gradcheck(cfg, seed, points);
    const json j = {{"max_relative_error", r.max_relative_error},
                    {"max_scaled_error", r.max_scaled_error},
                    {"max_abs_error", r.max_abs_error},
                    {"gradient_scale", r.gradient_scale},
                    {"entries_checked", r.entries_checked},
                    {"worst_param", r.worst_param},
                    {"worst_index", r.worst_index},
                    {"worst_analytic", r.worst_analytic},
                    {"worst_numeric", r.worst_numeric},
                    {"points", points},
                    {"seed", seed},
                    {"model", cfg}};
    *out_json = dup_string(j.dump());
  });
}

lrsa_status lrsa_bench(const char* config_text, const size_t* n_grid, size_t n_count,
                       size_t latents, size_t repeat, char** out_json) {
  if (!n_grid || !out_json) return LRSA_ERR_INVALID_ARGUMENT;
  return try_([&] {
    model::LRSAConfig cfg = config_from(config_text).model;
    cfg.latents = latents;
    cfg.validate();
    const auto rows = lab::bench_blocks(cfg, {n_grid, n_count}, repeat);
    json arr = json::array();
    for (const auto& r : rows) {
      json row = {{"n", r.points},
                  {"flops_mixing", r.measured.mixing},
                  {"flops_total", r.measured.total},
                  {"closed_form_mixing", r.predicted.mixing},
                  {"closed_form_total", r.predicted.total},
                  {"dense_flops_mixing", r.dense.mixing},
                  {"dense_flops_total", r.dense.total},
                  {"seconds", r.seconds},
                  {"dense_seconds", r.dense_seconds ? json(*r.dense_seconds) : json(nullptr)}};
      arr.push_back(row);
    }
    json j = {{"M", latents}, {"repeat", repeat}, {"model", cfg}, {"rows", arr}};
    if (rows.size() >= 2 && rows.front().measured.mixing > 0) {
      const auto& a = rows.front();
      const auto& b = rows.back();
      j["mixing_flop_ratio"] = static_cast<double>(b.measured.mixing) / a.measured.mixing;
      j["total_flop_ratio"] = static_cast<double>(b.measured.total) / a.measured.total;
      j["dense_mixing_flop_ratio"] = static_cast<double>(b.dense.mixing) / a.dense.mixing;
    }
    *out_json = dup_string(j.dump());
  });
}

}  // extern "C"
