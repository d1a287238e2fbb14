// SPDX-License-Identifier: Apache-2.0
//
// Binary checkpoint format:
//
//   "BERTESE1" | u32 LE header length | JSON header | f32 LE tensor data
//
// The header is {"format_version", "kind", "config", "tensors": [{"name",
// "shape", "dtype": "f32"}]}; tensor data is concatenated in manifest order.

#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>
#include <openssl/evp.h>

#include "bertese/model.hpp"

namespace bertese {

inline constexpr std::string_view kCheckpointMagic = "BERTESE1";
inline constexpr int kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  enum class Kind { Io, BadMagic, BadHeader, BadVersion, WrongKind, ConfigMismatch, ShapeMismatch,
                    MissingTensor, Truncated, TrailingData };

  CheckpointError(Kind kind, const std::string& what, std::string tensor = {})
      : std::runtime_error(what), kind_(kind), tensor_(std::move(tensor)) {}

  Kind kind() const { return kind_; }
  const std::string& tensor() const { return tensor_; }

 private:
  Kind kind_;
  std::string tensor_;
};

inline nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"dim", c.dim},         {"layers", c.layers},   {"heads", c.heads},
          {"ffn_dim", c.ffn_dim}, {"max_len", c.max_len}, {"vocab_size", c.vocab_size}};
}

inline ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.dim = j.at("dim").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.max_len = j.at("max_len").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  return c;
}

namespace detail {

inline void put_f32_le(std::string& out, float v) {
  auto bits = std::bit_cast<std::uint32_t>(v);
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((bits >> (8 * b)) & 0xFFu));
}

inline float get_f32_le(const unsigned char* p) {
  std::uint32_t bits = 0;
  for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
  return std::bit_cast<float>(bits);
}

}  // namespace detail

/// Serializes a model (Predictor or Rewriter) to checkpoint bytes.
template <typename Model>
std::string serialize_checkpoint(const Model& model, const std::string& kind) {
  const auto params = model.parameters();
  nlohmann::json header;
  header["format_version"] = kCheckpointVersion;
  header["kind"] = kind;
  header["config"] = config_to_json(model.config());
  header["tensors"] = nlohmann::json::array();
  for (const auto& p : params)
    header["tensors"].push_back({{"name", p.name},
                                 {"shape", {p.tensor.rows(), p.tensor.cols()}},
                                 {"dtype", "f32"}});
  const std::string h = header.dump();
  std::string out(kCheckpointMagic);
  const auto len = static_cast<std::uint32_t>(h.size());
  for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((len >> (8 * b)) & 0xFFu));
  out += h;
  for (const auto& p : params)
    for (auto v : p.tensor.data()) detail::put_f32_le(out, static_cast<float>(v));
  return out;
}

/// Parses checkpoint bytes into a model of the given kind. Validates magic,
/// version, kind, the optional expected config, and every tensor's shape
/// against the layout implied by the header config.
template <typename Model>
Model deserialize_checkpoint(std::string_view bytes, const std::string& kind,
                             const std::optional<ModelConfig>& expected = std::nullopt) {
  using K = CheckpointError::Kind;
  const std::size_t prefix = kCheckpointMagic.size() + 4;
  if (bytes.size() < prefix || bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw CheckpointError(K::BadMagic, "checkpoint: bad magic (expected BERTESE1)");
  }
  const auto* raw = reinterpret_cast<const unsigned char*>(bytes.data());
  std::uint32_t hlen = 0;
  for (int b = 0; b < 4; ++b) hlen |= static_cast<std::uint32_t>(raw[kCheckpointMagic.size() + b]) << (8 * b);
  if (hlen == 0 || prefix + hlen > bytes.size()) {
    throw CheckpointError(K::BadHeader, "checkpoint: corrupted header length " + std::to_string(hlen) +
                                            " exceeds file size " + std::to_string(bytes.size()));
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(prefix, hlen));
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(K::BadHeader, std::string("checkpoint: unreadable header: ") + e.what());
  }
  if (!header.is_object() || !header.contains("format_version") || !header.contains("config") ||
      !header.contains("tensors") || !header.contains("kind")) {
    throw CheckpointError(K::BadHeader, "checkpoint: header lacks required fields");
  }
  if (header["format_version"] != kCheckpointVersion) {
    throw CheckpointError(K::BadVersion, "checkpoint: unsupported format_version " +
                                             header["format_version"].dump());
  }
  if (header["kind"] != kind) {
    throw CheckpointError(K::WrongKind, "checkpoint: holds a " + header["kind"].dump() +
                                            ", expected \"" + kind + "\"");
  }
  ModelConfig config;
  try {
    config = config_from_json(header["config"]);
    config.validate();
  } catch (const std::exception& e) {
    throw CheckpointError(K::BadHeader, std::string("checkpoint: invalid config: ") + e.what());
  }
  if (expected && !(*expected == config)) {
    throw CheckpointError(K::ConfigMismatch, "checkpoint: model config " + header["config"].dump() +
                                                 " differs from the run configuration " +
                                                 config_to_json(*expected).dump());
  }

  std::mt19937_64 rng(0);
  Model model = Model::init(config, rng);
  auto params = model.parameters();
  const auto& manifest = header["tensors"];
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (i >= manifest.size()) {
      throw CheckpointError(K::MissingTensor, "checkpoint: tensor '" + params[i].name + "' missing from manifest",
                            params[i].name);
    }
    const auto& entry = manifest[i];
    const std::string name = entry.value("name", std::string{});
    if (name != params[i].name) {
      throw CheckpointError(K::MissingTensor, "checkpoint: expected tensor '" + params[i].name +
                                                  "' at manifest slot " + std::to_string(i) + ", found '" +
                                                  name + "'",
                            params[i].name);
    }
    const auto shape = entry.value("shape", std::vector<std::size_t>{});
    if (shape != std::vector<std::size_t>{params[i].tensor.rows(), params[i].tensor.cols()}) {
      throw CheckpointError(K::ShapeMismatch, "checkpoint: tensor '" + name + "' has shape " +
                                                  entry.value("shape", nlohmann::json()).dump() +
                                                  " but the config implies " + params[i].tensor.shape().str(),
                            name);
    }
    if (entry.value("dtype", std::string{}) != "f32") {
      throw CheckpointError(K::BadHeader, "checkpoint: tensor '" + name + "' has unsupported dtype", name);
    }
  }
  if (manifest.size() != params.size()) {
    throw CheckpointError(K::ShapeMismatch, "checkpoint: manifest lists " + std::to_string(manifest.size()) +
                                                " tensors, config implies " + std::to_string(params.size()));
  }
  std::size_t off = prefix + hlen;
  for (auto& p : params) {
    const std::size_t need = p.tensor.numel() * 4;
    if (off + need > bytes.size()) {
      throw CheckpointError(K::Truncated, "checkpoint: truncated data in tensor '" + p.name + "'", p.name);
    }
    auto values = p.tensor.data();
    for (std::size_t k = 0; k < values.size(); ++k)
      values[k] = static_cast<typename decltype(values)::value_type>(detail::get_f32_le(raw + off + 4 * k));
    off += need;
  }
  if (off != bytes.size()) {
    throw CheckpointError(K::TrailingData, "checkpoint: " + std::to_string(bytes.size() - off) +
                                               " trailing bytes after the last tensor");
  }
  return model;
}

inline std::string read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(CheckpointError::Kind::Io, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file_bytes(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError(CheckpointError::Kind::Io, "cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

template <typename Model>
void save_checkpoint(const std::filesystem::path& path, const Model& model, const std::string& kind) {
  write_file_bytes(path, serialize_checkpoint(model, kind));
}

template <typename Model>
Model load_checkpoint(const std::filesystem::path& path, const std::string& kind,
                      const std::optional<ModelConfig>& expected = std::nullopt) {
  return deserialize_checkpoint<Model>(read_file_bytes(path), kind, expected);
}

inline std::string sha256_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1) {
    throw std::runtime_error("sha256 failed");
  }
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(md[i]);
  return hex.str();
}

/// Digest of a model's serialized checkpoint bytes.
template <typename Model>
std::string model_digest(const Model& model, const std::string& kind) {
  return sha256_hex(serialize_checkpoint(model, kind));
}

}  // namespace bertese
