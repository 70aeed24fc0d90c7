#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "headlab/json_io.hpp"
#include "headlab/model.hpp"

namespace headlab {

/// Everything stored next to the model parameters.
struct CheckpointExtras {
  std::vector<std::string> vocab;       // token strings by id; empty when absent
  std::vector<Parameter> tensors;       // e.g. optimizer moments, same blob
  Json state;                           // free-form training state, null when absent
};

struct LoadedCheckpoint {
  Model model;
  CheckpointExtras extras;
};

/// Writes <dir>/manifest.json and <dir>/params.bin. The blob holds every
/// model parameter followed by every extra tensor as little-endian float32,
/// row-major, in manifest order.
void save_checkpoint(const std::filesystem::path& dir, const Model& model,
                     const CheckpointExtras& extras = {});
LoadedCheckpoint load_checkpoint(const std::filesystem::path& dir);

/// Hex SHA-256 of a file's bytes.
std::string file_digest(const std::filesystem::path& file);

}  // namespace headlab
