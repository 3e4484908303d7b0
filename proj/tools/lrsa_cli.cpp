// Command-line front end over the lrsa C API.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lrsa/lrsa.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kUsage = 2, kData = 3, kNumerical = 4 };

int exit_code_for(lrsa_status s) {
  switch (s) {
    case LRSA_OK: return kOk;
    case LRSA_ERR_USAGE: return kUsage;
    case LRSA_ERR_CONVERGENCE:
    case LRSA_ERR_SOLVER:
    case LRSA_ERR_TRAINING: return kNumerical;
    default: return kData;
  }
}

// Carries a status out of a command so the manifest can record it.
struct CommandError : std::runtime_error {
  int code;
  CommandError(int c, const std::string& msg) : std::runtime_error(msg), code(c) {}
};

void check(lrsa_status s) {
  if (s != LRSA_OK) {
    throw CommandError(exit_code_for(s),
                       std::string(lrsa_status_name(s)) + ": " + lrsa_last_error());
  }
}

// Takes ownership of a string returned by the library.
json take_json(char* s) {
  json j = json::parse(s);
  lrsa_string_free(s);
  return j;
}

struct Dataset {
  lrsa_dataset* h = nullptr;
  ~Dataset() { lrsa_dataset_destroy(h); }
};

struct Model {
  lrsa_model* h = nullptr;
  ~Model() { lrsa_model_destroy(h); }
};

std::string read_file(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw CommandError(kData, "cannot read " + path);
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json resolve_config(const std::string& text) {
  char* out = nullptr;
  check(lrsa_config_resolve(text.c_str(), &out));
  return take_json(out);
}

bool non_empty_dir(const fs::path& p) {
  std::error_code ec;
  if (!fs::exists(p, ec)) return false;
  if (!fs::is_directory(p, ec)) return true;
  return fs::directory_iterator(p, ec) != fs::directory_iterator();
}

void print_json(const json& j) { std::cout << j.dump(2) << '\n'; }

// Per-run record written to run_manifest.json.
struct Run {
  std::string command;
  json config = json::object();
  json artifacts = json::object();
  json result;
  fs::path out_dir;  // manifest goes here once the command owns the directory
};

struct Options {
  std::string task = "poisson1d";
  std::size_t n = 64, count = 640;
  std::uint64_t seed = 0;
  std::string out, data, config, checkpoint, split = "test", source = "green1d";
  bool force = false;
  std::size_t layer = 0, out_channel = 0, in_channel = 0, points = 8;
  std::vector<std::size_t> n_grid = {512, 1024, 2048, 4096};
  std::size_t latents = 64, repeat = 3;
  std::string manifest;
};

void cmd_gen_data(const Options& o, Run& run) {
  run.config = {{"task", o.task}, {"n", o.n}, {"count", o.count}, {"seed", o.seed}};
  if (o.count == 0) throw CommandError(kUsage, "--count must be positive");
  if (non_empty_dir(o.out) && !o.force) {
    throw CommandError(kData, "refusing to overwrite non-empty " + o.out + " (use --force)");
  }
  Dataset ds;
  check(lrsa_dataset_generate(o.task.c_str(), o.count, o.n, o.seed, &ds.h));
  fs::create_directories(o.out);
  run.out_dir = o.out;
  check(lrsa_dataset_save(ds.h, o.out.c_str()));
  run.artifacts["dataset"] = o.out;
  char* summary = nullptr;
  check(lrsa_dataset_summary_json(ds.h, &summary));
  run.result = take_json(summary);
  print_json(run.result);
  std::fprintf(stderr, "%-10s %6s %6s %6s\n", "task", "n", "count", "seed");
  std::fprintf(stderr, "%-10s %6zu %6zu %6llu\n", o.task.c_str(), o.n, o.count,
               static_cast<unsigned long long>(o.seed));
}

void cmd_train(const Options& o, Run& run) {
  const std::string text = o.config.empty() ? std::string() : read_file(o.config);
  run.config = resolve_config(text);
  run.config["data"] = o.data;
  Dataset ds;
  check(lrsa_dataset_load(o.data.c_str(), &ds.h));
  fs::create_directories(o.out);
  run.out_dir = o.out;
  char* summary = nullptr;
  check(lrsa_train(text.c_str(), ds.h, o.out.c_str(), nullptr, &summary));
  run.result = take_json(summary);
  run.artifacts["checkpoint"] = run.result.value("checkpoint", "");
  run.artifacts["history"] = run.result.value("history", "");
  print_json(run.result);
  std::fprintf(stderr, "%-8s %-8s %-14s %-14s %-8s\n", "epochs", "steps", "train_loss",
               "test_rel_l2", "seconds");
  const auto num = [&](const char* k) {
    const json& v = run.result.value(k, json());
    return v.is_number() ? v.get<double>() : std::nan("");
  };
  std::fprintf(stderr, "%-8zu %-8zu %-14.6g %-14.6g %-8.1f\n",
               run.result["epochs"].get<std::size_t>(), run.result["steps"].get<std::size_t>(),
               num("final_train_loss"), num("final_test_rel_l2"), num("seconds"));
}

void cmd_eval(const Options& o, Run& run) {
  run.config = {{"checkpoint", o.checkpoint}, {"data", o.data}, {"split", o.split}};
  Model m;
  check(lrsa_model_load(o.checkpoint.c_str(), &m.h));
  char* cfg = nullptr;
  check(lrsa_model_config_json(m.h, &cfg));
  run.config["model"] = take_json(cfg);
  Dataset ds;
  check(lrsa_dataset_load(o.data.c_str(), &ds.h));
  char* metrics = nullptr;
  check(lrsa_evaluate(m.h, ds.h, o.split.c_str(), &metrics));
  run.result = take_json(metrics);
  print_json(run.result);
  std::fprintf(stderr, "%-6s %8s %14s %14s\n", "split", "samples", "rel_l2", "mse");
  const auto num = [&](const char* k) {
    const json& v = run.result.value(k, json());
    return v.is_number() ? v.get<double>() : std::nan("");
  };
  std::fprintf(stderr, "%-6s %8zu %14.6g %14.6g\n", o.split.c_str(),
               run.result["samples"].get<std::size_t>(), num("rel_l2"), num("mse"));
}

void cmd_analyze_kernel(const Options& o, Run& run) {
  run.config = {{"source", o.source}, {"n", o.n}};
  if (o.source != "green1d" && o.source != "model") {
    throw CommandError(kUsage, "--source must be green1d or model");
  }
  fs::create_directories(o.out);
  run.out_dir = o.out;
  const std::string csv = (fs::path(o.out) / "decay.csv").string();
  char* report = nullptr;
  if (o.source == "green1d") {
    check(lrsa_analyze_green1d(o.n, csv.c_str(), &report));
  } else {
    if (o.checkpoint.empty()) throw CommandError(kUsage, "--source model needs --checkpoint");
    run.config.update({{"checkpoint", o.checkpoint},
                       {"seed", o.seed},
                       {"layer", o.layer},
                       {"out_channel", o.out_channel},
                       {"in_channel", o.in_channel}});
    Model m;
    check(lrsa_model_load(o.checkpoint.c_str(), &m.h));
    check(lrsa_analyze_model_kernel(m.h, o.n, o.seed, o.layer, o.out_channel, o.in_channel,
                                    csv.c_str(), &report));
  }
  run.result = take_json(report);
  const std::string report_path = (fs::path(o.out) / "kernel_report.json").string();
  std::ofstream(report_path) << run.result.dump(2) << '\n';
  run.artifacts["decay_csv"] = csv;
  run.artifacts["report"] = report_path;
  print_json(run.result);
  std::fprintf(stderr, "%-6s %14s\n", "rank", "rel_error");
  for (const auto& e : run.result["rank_errors"]) {
    std::fprintf(stderr, "%-6zu %14.6e\n", e["rank"].get<std::size_t>(),
                 e["error"].get<double>());
  }
}

constexpr double kGradcheckLimit = 1e-4;

void cmd_gradcheck(const Options& o, Run& run) {
  const std::string text = o.config.empty() ? std::string() : read_file(o.config);
  char* out = nullptr;
  check(lrsa_gradcheck(text.c_str(), o.seed, o.points, &out));
  run.result = take_json(out);
  run.config = {{"model", run.result["model"]}, {"seed", o.seed}, {"points", o.points}};
  print_json(run.result);
  const double err = run.result["max_relative_error"].get<double>();
  std::fprintf(stderr, "max relative error %.3e over %zu entries (worst: param %zu, entry %zu)\n",
               err, run.result["entries_checked"].get<std::size_t>(),
               run.result["worst_param"].get<std::size_t>(),
               run.result["worst_index"].get<std::size_t>());
  if (!(err <= kGradcheckLimit)) {
    throw CommandError(kNumerical, "gradient check failed: max relative error " +
                                       std::to_string(err));
  }
}

void cmd_bench(const Options& o, Run& run) {
  const std::string text = o.config.empty() ? std::string() : read_file(o.config);
  char* out = nullptr;
  check(lrsa_bench(text.c_str(), o.n_grid.data(), o.n_grid.size(), o.latents, o.repeat, &out));
  run.result = take_json(out);
  run.config = {{"model", run.result["model"]}, {"n_grid", o.n_grid}, {"repeat", o.repeat}};
  print_json(run.result);
  std::fprintf(stderr, "%8s %16s %16s %16s %12s %12s\n", "N", "mixing_flops", "total_flops",
               "dense_mixing", "seconds", "dense_sec");
  for (const auto& r : run.result["rows"]) {
    const json& ds = r["dense_seconds"];
    std::fprintf(stderr, "%8zu %16llu %16llu %16llu %12.4g %12s\n", r["n"].get<std::size_t>(),
                 r["flops_mixing"].get<unsigned long long>(),
                 r["flops_total"].get<unsigned long long>(),
                 r["dense_flops_mixing"].get<unsigned long long>(), r["seconds"].get<double>(),
                 ds.is_number() ? std::to_string(ds.get<double>()).c_str() : "-");
  }
}

void write_manifest(const Run& run, const Options& o, double seconds, int code,
                    const std::string& error) {
  fs::path path;
  if (!o.manifest.empty()) {
    path = o.manifest;
  } else if (!run.out_dir.empty()) {
    path = run.out_dir / "run_manifest.json";
  } else {
    path = "run_manifest.json";
  }
  json j = {{"command", run.command},
            {"config", run.config},
            {"artifacts", run.artifacts},
            {"wall_time_seconds", seconds},
            {"version", lrsa_version()},
            {"exit_code", code}};
  if (!run.result.is_null()) j["result"] = run.result;
  if (!error.empty()) j["error"] = error;
  std::ofstream os(path, std::ios::trunc);
  if (!os) {
    std::cerr << "warning: cannot write " << path.string() << '\n';
    return;
  }
  os << j.dump(2) << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Low-rank spatial attention neural-operator laboratory"};
  app.set_version_flag("--version", std::string(lrsa_version()));
  app.require_subcommand(1);
  Options o;
  app.add_option("--manifest", o.manifest, "Path of the run manifest JSON");

  auto* gen = app.add_subcommand("gen-data", "Generate an operator-learning dataset");
  gen->add_option("--task", o.task, "poisson1d, darcy2d or advection1d")->capture_default_str();
  gen->add_option("--n", o.n, "Grid points per axis")->capture_default_str();
  gen->add_option("--count", o.count, "Number of samples")->capture_default_str();
  gen->add_option("--seed", o.seed, "Random seed")->capture_default_str();
  gen->add_option("--out", o.out, "Output directory")->required();
  gen->add_flag("--force", o.force, "Overwrite a non-empty output directory");

  auto* train = app.add_subcommand("train", "Train a model on a dataset");
  train->add_option("--data", o.data, "Dataset directory")->required();
  train->add_option("--config", o.config, "key=value configuration file");
  train->add_option("--out", o.out, "Run directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  eval->add_option("--checkpoint", o.checkpoint, "Checkpoint directory")->required();
  eval->add_option("--data", o.data, "Dataset directory")->required();
  eval->add_option("--split", o.split, "train, test or all")->capture_default_str();

  auto* analyze = app.add_subcommand("analyze-kernel", "Spectral analysis of a kernel");
  analyze->add_option("--source", o.source, "green1d or model")->capture_default_str();
  analyze->add_option("--n", o.n, "Grid points per axis")->capture_default_str();
  analyze->add_option("--checkpoint", o.checkpoint, "Checkpoint directory (model source)");
  analyze->add_option("--out", o.out, "Output directory")->required();
  analyze->add_option("--seed", o.seed, "Seed of the probing input field")->capture_default_str();
  analyze->add_option("--layer", o.layer, "Block index")->capture_default_str();
  analyze->add_option("--out-channel", o.out_channel, "Output channel")->capture_default_str();
  analyze->add_option("--in-channel", o.in_channel, "Input channel")->capture_default_str();

  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  grad->add_option("--config", o.config, "key=value configuration file");
  grad->add_option("--seed", o.seed, "Random seed")->capture_default_str();
  grad->add_option("--points", o.points, "Sample points")->capture_default_str();

  auto* bench = app.add_subcommand("bench", "FLOP counts and timings of one block");
  bench->add_option("--n-grid", o.n_grid, "Comma-separated point counts")
      ->delimiter(',')
      ->capture_default_str();
  bench->add_option("--m", o.latents, "Number of latents")->capture_default_str();
  bench->add_option("--repeat", o.repeat, "Timing repetitions")->capture_default_str();
  bench->add_option("--config", o.config, "key=value configuration file");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kUsage;
  }

  Run run;
  run.command = app.get_subcommands().front()->get_name();
  const auto t0 = std::chrono::steady_clock::now();
  int code = kOk;
  std::string error;
  try {
    if (*gen) cmd_gen_data(o, run);
    else if (*train) cmd_train(o, run);
    else if (*eval) cmd_eval(o, run);
    else if (*analyze) cmd_analyze_kernel(o, run);
    else if (*grad) cmd_gradcheck(o, run);
    else if (*bench) cmd_bench(o, run);
  } catch (const CommandError& e) {
    code = e.code;
    error = e.what();
  } catch (const std::exception& e) {
    code = kData;
    error = e.what();
  }
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  write_manifest(run, o, secs, code, error);
  if (code != kOk) std::cerr << "error: " << error << '\n';
  return code;
}
