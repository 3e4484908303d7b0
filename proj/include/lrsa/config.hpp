#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "lrsa/model.hpp"
#include "lrsa/training.hpp"

namespace lrsa {

/// Model and optimisation settings read from a flat key=value file.
///
///   # comment
///   depth = 2
///   width = 64
///   M = 8
///   loss = rel_l2
///
/// Unset keys keep their defaults. Unknown keys and malformed values are
/// usage errors that name the offending line.
struct RunConfig {
  model::LRSAConfig model;
  training::TrainConfig train;
};

RunConfig parse_config(std::string_view text);
RunConfig load_config(const std::filesystem::path& path);
/// Every key with its resolved value, one per line, in a stable order.
std::string format_config(const RunConfig& cfg);

}  // namespace lrsa
