#pragma once

// JSON (de)serialisation of configuration structs, shared by the on-disk
// manifests and the C API.

#include "json.hpp"

#include "lrsa/model.hpp"

namespace lrsa::model {

void to_json(nlohmann::json& j, const LRSAConfig& c);
void from_json(const nlohmann::json& j, LRSAConfig& c);

}  // namespace lrsa::model
