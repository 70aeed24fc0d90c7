#pragma once

#include <json.hpp>
#include <string>

#include "headlab/model.hpp"

namespace headlab {

using Json = nlohmann::json;

/// The shortest decimal that reads back as f, widened to double, so that
/// 0.1f is written as 0.1 rather than 0.10000000149011612.
double float_json(float f);

Json to_json(const ModelConfig& c);
/// Missing keys keep their defaults; wrong types or unknown keys raise
/// ConfigError naming the field under the given path prefix.
ModelConfig model_config_from_json(const Json& j, const std::string& path = "model");

std::string to_string(TaskKind k);
std::string to_string(Pooling p);
std::string to_string(Activation a);
TaskKind task_kind_from_string(const std::string& s);
Pooling pooling_from_string(const std::string& s);
Activation activation_from_string(const std::string& s);

}  // namespace headlab
