#include "headlab/json_io.hpp"

#include <charconv>
#include <cstdlib>

#include "headlab/error.hpp"

namespace headlab {

double float_json(float f) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf - 1, f);
  *res.ptr = '\0';
  return std::strtod(buf, nullptr);
}

Json to_json(const ModelConfig& c) {
  return Json{{"n_layers", c.n_layers},     {"n_heads", c.n_heads},
              {"model_dim", c.model_dim},   {"key_dim", c.key_dim},
              {"value_dim", c.value_dim},   {"ff_dim", c.ff_dim},
              {"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
              {"n_segments", c.n_segments}, {"dropout", float_json(c.dropout)},
              {"activation", to_string(c.activation)}, {"causal", c.causal}};
}

namespace {

std::size_t read_size(const Json& v, const std::string& field) {
  if (!v.is_number_integer() || v.get<long long>() < 0)
    throw ConfigError(field + " must be a non-negative integer");
  return v.get<std::size_t>();
}

}  // namespace

ModelConfig model_config_from_json(const Json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path + " must be an object");
  ModelConfig c;
  for (const auto& [key, v] : j.items()) {
    const std::string field = path + "." + key;
    if (key == "n_layers") c.n_layers = read_size(v, field);
    else if (key == "n_heads") c.n_heads = read_size(v, field);
    else if (key == "model_dim") c.model_dim = read_size(v, field);
    else if (key == "key_dim") c.key_dim = read_size(v, field);
    else if (key == "value_dim") c.value_dim = read_size(v, field);
    else if (key == "ff_dim") c.ff_dim = read_size(v, field);
    else if (key == "vocab_size") c.vocab_size = read_size(v, field);
    else if (key == "max_seq_len") c.max_seq_len = read_size(v, field);
    else if (key == "n_segments") c.n_segments = read_size(v, field);
    else if (key == "dropout") {
      if (!v.is_number()) throw ConfigError(field + " must be a number");
      c.dropout = v.get<float>();
    } else if (key == "activation") {
      if (!v.is_string()) throw ConfigError(field + " must be a string");
      try {
        c.activation = activation_from_string(v.get<std::string>());
      } catch (const ConfigError& e) {
        throw ConfigError(field + ": " + e.what());
      }
    } else if (key == "causal") {
      if (!v.is_boolean()) throw ConfigError(field + " must be a boolean");
      c.causal = v.get<bool>();
    } else {
      throw ConfigError("unknown field " + field);
    }
  }
  return c;
}

std::string to_string(TaskKind k) {
  return k == TaskKind::Regression ? "regression" : "classification";
}
std::string to_string(Pooling p) { return p == Pooling::Mean ? "mean" : "first"; }
std::string to_string(Activation a) { return a == Activation::Relu ? "relu" : "gelu"; }

TaskKind task_kind_from_string(const std::string& s) {
  if (s == "classification") return TaskKind::Classification;
  if (s == "regression") return TaskKind::Regression;
  throw ConfigError("unknown task kind '" + s + "'");
}

Pooling pooling_from_string(const std::string& s) {
  if (s == "first") return Pooling::First;
  if (s == "mean") return Pooling::Mean;
  throw ConfigError("unknown pooling '" + s + "'");
}

Activation activation_from_string(const std::string& s) {
  if (s == "gelu") return Activation::Gelu;
  if (s == "relu") return Activation::Relu;
  throw ConfigError("unknown activation '" + s + "'");
}

}  // namespace headlab
