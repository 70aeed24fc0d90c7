#include "headlab/checkpoint.hpp"

#include <openssl/evp.h>

#include <bit>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "headlab/error.hpp"

namespace headlab {

namespace fs = std::filesystem;

namespace {

constexpr const char* kFormat = "headlab-checkpoint";
constexpr int kVersion = 1;

void append_le(std::string& out, const Tensor& t) {
  const std::size_t start = out.size();
  out.resize(start + t.size() * 4);
  char* dst = out.data() + start;
  for (float v : t.values()) {
    auto bits = std::bit_cast<std::uint32_t>(v);
    for (int b = 0; b < 4; ++b) *dst++ = static_cast<char>((bits >> (8 * b)) & 0xffu);
  }
}

void read_le(const std::string& blob, std::size_t offset, Tensor& t) {
  const auto* src = reinterpret_cast<const unsigned char*>(blob.data() + offset);
  for (auto& v : t.values()) {
    std::uint32_t bits = 0;
    for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(*src++) << (8 * b);
    v = std::bit_cast<float>(bits);
  }
}

Json tensor_entry(const Parameter& p, std::size_t offset) {
  return Json{{"name", p.name}, {"shape", p.value.shape()}, {"offset", offset}};
}

std::string read_file(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + file.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& file, const std::string& bytes) {
  std::ofstream out(file, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("cannot write " + file.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw CheckpointError("short write to " + file.string());
}

// Checks one manifest tensor entry against the blob and returns its tensor.
Tensor read_entry(const Json& e, const std::string& blob, std::size_t& expected_offset) {
  const auto name = e.at("name").get<std::string>();
  const auto shape = e.at("shape").get<std::vector<std::size_t>>();
  const auto offset = e.at("offset").get<std::size_t>();
  if (offset != expected_offset) {
    throw CheckpointError("tensor " + name + ": offset " + std::to_string(offset) +
                          " but the previous tensors end at " + std::to_string(expected_offset));
  }
  Tensor t(shape, 0.0f);
  const std::size_t bytes = t.size() * 4;
  if (offset + bytes > blob.size()) {
    throw CheckpointError("tensor " + name + " needs bytes [" + std::to_string(offset) + ", " +
                          std::to_string(offset + bytes) + ") but params.bin has " +
                          std::to_string(blob.size()) + " bytes");
  }
  read_le(blob, offset, t);
  expected_offset = offset + bytes;
  return t;
}

}  // namespace

void save_checkpoint(const fs::path& dir, const Model& model, const CheckpointExtras& extras) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw CheckpointError("cannot create " + dir.string() + ": " + ec.message());

  std::string blob;
  Json tensors = Json::array();
  for (const auto& p : model.params()) {
    tensors.push_back(tensor_entry(p, blob.size()));
    append_le(blob, p.value);
  }
  Json extra = Json::array();
  for (const auto& p : extras.tensors) {
    if (model.find_param(p.name)) throw CheckpointError("extra tensor " + p.name + " shadows a parameter");
    extra.push_back(tensor_entry(p, blob.size()));
    append_le(blob, p.value);
  }

  Json tasks = Json::array();
  for (const auto& t : model.tasks()) {
    tasks.push_back({{"name", t.name},
                     {"kind", to_string(t.kind)},
                     {"n_class", t.n_class},
                     {"pooling", to_string(t.pooling)}});
  }
  Json gates = Json::array();
  for (float g : model.gates().values()) gates.push_back(g);

  Json manifest{{"format", kFormat},
                {"version", kVersion},
                {"model_config", to_json(model.config())},
                {"tasks", tasks},
                {"gates", gates},
                {"tensors", tensors},
                {"extra_tensors", extra},
                {"blob_bytes", blob.size()}};
  if (!extras.vocab.empty()) manifest["vocab"] = extras.vocab;
  if (!extras.state.is_null()) manifest["state"] = extras.state;

  write_file(dir / "params.bin", blob);
  write_file(dir / "manifest.json", manifest.dump(1) + "\n");
}

LoadedCheckpoint load_checkpoint(const fs::path& dir) {
  Json manifest;
  try {
    manifest = Json::parse(read_file(dir / "manifest.json"));
  } catch (const Json::exception& e) {
    throw CheckpointError("manifest.json: " + std::string(e.what()));
  }
  try {
    if (manifest.value("format", "") != kFormat) throw CheckpointError("manifest.json: not a headlab checkpoint");
    if (manifest.at("version").get<int>() != kVersion) {
      throw CheckpointError("manifest.json: unsupported version " + manifest.at("version").dump());
    }
    const std::string blob = read_file(dir / "params.bin");
    const auto expected = manifest.at("blob_bytes").get<std::size_t>();
    if (blob.size() != expected) {
      throw CheckpointError("params.bin size mismatch: manifest expects " + std::to_string(expected) +
                            " bytes, found " + std::to_string(blob.size()));
    }

    ModelConfig config = model_config_from_json(manifest.at("model_config"), "model_config");
    Model model(config, 0);
    for (const auto& t : manifest.at("tasks")) {
      model.add_task(t.at("name").get<std::string>(), task_kind_from_string(t.at("kind").get<std::string>()),
                     t.at("n_class").get<std::size_t>(),
                     pooling_from_string(t.at("pooling").get<std::string>()), 0);
    }

    std::size_t offset = 0;
    const auto& entries = manifest.at("tensors");
    if (entries.size() != model.params().size()) {
      throw CheckpointError("manifest lists " + std::to_string(entries.size()) +
                            " parameters, the model has " + std::to_string(model.params().size()));
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
      auto& p = model.params()[i];
      const auto name = entries[i].at("name").get<std::string>();
      if (name != p.name) throw CheckpointError("tensor " + std::to_string(i) + " is " + name + ", expected " + p.name);
      Tensor t = read_entry(entries[i], blob, offset);
      if (!t.same_shape(p.value)) {
        throw CheckpointError("tensor " + name + " has shape " + shape_string(t.shape()) +
                              ", the model expects " + shape_string(p.value.shape()));
      }
      p.value = std::move(t);
    }

    LoadedCheckpoint out{std::move(model), {}};
    for (const auto& e : manifest.at("extra_tensors")) {
      Tensor t = read_entry(e, blob, offset);
      out.extras.tensors.emplace_back(e.at("name").get<std::string>(), std::move(t));
    }
    if (offset != blob.size()) {
      throw CheckpointError("params.bin has " + std::to_string(blob.size() - offset) + " trailing bytes");
    }

    const auto& gates = manifest.at("gates");
    auto& gv = out.model.gates();
    if (gates.size() != gv.size()) throw CheckpointError("gate vector length does not match the model");
    for (std::size_t i = 0; i < gates.size(); ++i) gv.set(gv.head_at(i), gates[i].get<float>());

    if (manifest.contains("vocab")) out.extras.vocab = manifest["vocab"].get<std::vector<std::string>>();
    if (manifest.contains("state")) out.extras.state = manifest["state"];
    return out;
  } catch (const Json::exception& e) {
    throw CheckpointError("manifest.json: " + std::string(e.what()));
  } catch (const ConfigError& e) {
    throw CheckpointError("manifest.json: " + std::string(e.what()));
  }
}

std::string file_digest(const fs::path& file) {
  const std::string bytes = read_file(file);
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw CheckpointError("sha256 failed for " + file.string());
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

}  // namespace headlab
