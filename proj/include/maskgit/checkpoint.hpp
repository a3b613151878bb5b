#pragma once

// Checkpoint container: 8-byte magic "MGITCKPT", u64 little-endian header
// length, UTF-8 JSON header (version, model config, array manifest), then
// little-endian f32 arrays back to back.

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "maskgit/errors.hpp"
#include "maskgit/model.hpp"
#include "maskgit/tokenizer.hpp"

namespace maskgit {

static_assert(std::endian::native == std::endian::little,
              "checkpoint arrays are written in host order, which must be little-endian");

inline constexpr int kCheckpointVersion = 1;
inline constexpr char kCheckpointMagic[8] = {'M', 'G', 'I', 'T', 'C', 'K', 'P', 'T'};

struct Checkpoint {
  int version = kCheckpointVersion;
  std::optional<ModelConfig> config;  // absent for codebook-only files
  std::optional<Codebook> codebook;
  ModelParams<float> params;
  std::vector<Tensor<float>> adam_m;  // empty when no optimizer state
  std::vector<Tensor<float>> adam_v;
  std::uint64_t step = 0;
  std::string rng_state;
  nlohmann::json metadata = nlohmann::json::object();
};

inline std::uint64_t fnv1a64(const std::uint8_t* data, std::size_t n,
                             std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

namespace detail {

struct ArrayRef {
  std::string name;
  Shape shape;
  const float* data;
  std::size_t count;
};

inline std::vector<ArrayRef> checkpoint_arrays(const Checkpoint& ck) {
  std::vector<ArrayRef> out;
  for (std::size_t i = 0; i < ck.params.size(); ++i) {
    const auto& t = ck.params.tensors[i];
    out.push_back({ck.params.names[i], t.shape(), t.data().data(), t.size()});
  }
  for (std::size_t i = 0; i < ck.adam_m.size(); ++i) {
    const auto& t = ck.adam_m[i];
    out.push_back({"adam.m." + ck.params.names[i], t.shape(), t.data().data(), t.size()});
  }
  for (std::size_t i = 0; i < ck.adam_v.size(); ++i) {
    const auto& t = ck.adam_v[i];
    out.push_back({"adam.v." + ck.params.names[i], t.shape(), t.data().data(), t.size()});
  }
  if (ck.codebook) {
    const Codebook& cb = *ck.codebook;
    out.push_back({"codebook",
                   {static_cast<std::size_t>(cb.size), static_cast<std::size_t>(cb.dim())},
                   cb.codes.data(), cb.codes.size()});
  }
  return out;
}

inline std::string hex64(std::uint64_t v) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = digits[v & 15];
  return s;
}

}  // namespace detail

inline void validate_checkpoint(const Checkpoint& ck) {
  if (ck.config) {
    ck.config->validate();
    const auto layout = parameter_layout(*ck.config);
    if (layout.size() != ck.params.size()) {
      throw CheckpointError("corrupt_checkpoint", "parameter count does not match the model config");
    }
    for (std::size_t i = 0; i < layout.size(); ++i) {
      if (layout[i].first != ck.params.names[i] || layout[i].second != ck.params.tensors[i].shape()) {
        throw CheckpointError("corrupt_checkpoint", "parameter '" + ck.params.names[i] +
                                                         "' does not match the model config");
      }
    }
  } else if (ck.params.size() != 0) {
    throw CheckpointError("corrupt_checkpoint", "parameters present without a model config");
  }
  for (const auto* moments : {&ck.adam_m, &ck.adam_v}) {
    if (moments->empty()) continue;
    if (moments->size() != ck.params.size()) {
      throw CheckpointError("corrupt_checkpoint", "optimizer state does not match the parameters");
    }
    for (std::size_t i = 0; i < moments->size(); ++i) {
      if ((*moments)[i].shape() != ck.params.tensors[i].shape()) {
        throw CheckpointError("corrupt_checkpoint", "optimizer moment shape mismatch");
      }
    }
  }
  if (ck.adam_m.size() != ck.adam_v.size()) {
    throw CheckpointError("corrupt_checkpoint", "optimizer moments are incomplete");
  }
  if (ck.codebook) ck.codebook->validate();
}

/// Serialized bytes of a checkpoint. Deterministic: equal checkpoints give
/// equal bytes.
inline std::string serialize_checkpoint(const Checkpoint& ck) {
  validate_checkpoint(ck);
  const auto arrays = detail::checkpoint_arrays(ck);
  nlohmann::json manifest = nlohmann::json::array();
  std::uint64_t offset = 0;
  std::uint64_t checksum = 0xcbf29ce484222325ULL;
  for (const auto& a : arrays) {
    manifest.push_back({{"name", a.name}, {"dtype", "f32"}, {"shape", a.shape}, {"offset", offset}});
    const std::size_t bytes = a.count * sizeof(float);
    checksum = fnv1a64(reinterpret_cast<const std::uint8_t*>(a.data), bytes, checksum);
    offset += bytes;
  }
  nlohmann::json header = {
      {"version", ck.version},
      {"arrays", manifest},
      {"data_bytes", offset},
      {"checksum", detail::hex64(checksum)},
      {"step", ck.step},
      {"rng_state", ck.rng_state},
      {"metadata", ck.metadata},
  };
  if (ck.config) header["model"] = *ck.config;
  if (ck.codebook) {
    header["codebook"] = {{"size", ck.codebook->size},
                          {"patch", ck.codebook->patch},
                          {"channels", ck.codebook->channels}};
  }
  const std::string text = header.dump();
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  std::uint64_t len = text.size();
  out.append(reinterpret_cast<const char*>(&len), sizeof(len));
  out += text;
  for (const auto& a : arrays) out.append(reinterpret_cast<const char*>(a.data), a.count * sizeof(float));
  return out;
}

inline Checkpoint parse_checkpoint(const std::string& bytes) {
  auto corrupt = [](const std::string& why) {
    return CheckpointError("corrupt_checkpoint", "corrupt checkpoint: " + why);
  };
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw corrupt("missing MGITCKPT magic");
  }
  std::uint64_t len = 0;
  std::memcpy(&len, bytes.data() + 8, sizeof(len));
  if (len > bytes.size() - 16) throw corrupt("header truncated");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.substr(16, len));
  } catch (const nlohmann::json::exception& e) {
    throw corrupt(std::string("header is not valid JSON (") + e.what() + ")");
  }
  Checkpoint ck;
  try {
    ck.version = header.at("version").get<int>();
    if (ck.version != kCheckpointVersion) {
      throw CheckpointError("checkpoint_version", "checkpoint version " + std::to_string(ck.version) +
                                                      " is not supported (expected " +
                                                      std::to_string(kCheckpointVersion) + ")");
    }
    const std::size_t data_start = 16 + len;
    const auto data_bytes = header.at("data_bytes").get<std::uint64_t>();
    if (bytes.size() - data_start != data_bytes) {
      throw corrupt(bytes.size() - data_start < data_bytes ? "array data truncated" : "trailing bytes");
    }
    const std::uint64_t checksum = fnv1a64(
        reinterpret_cast<const std::uint8_t*>(bytes.data() + data_start), data_bytes);
    if (detail::hex64(checksum) != header.at("checksum").get<std::string>()) {
      throw corrupt("checksum mismatch");
    }
    ck.step = header.at("step").get<std::uint64_t>();
    ck.rng_state = header.at("rng_state").get<std::string>();
    ck.metadata = header.at("metadata");
    if (header.contains("model")) ck.config = header.at("model").get<ModelConfig>();
    std::uint64_t expected_offset = 0;
    for (const auto& entry : header.at("arrays")) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      if (entry.at("dtype").get<std::string>() != "f32") throw corrupt("unsupported dtype for '" + name + "'");
      if (offset != expected_offset) throw corrupt("array offsets are not contiguous");
      const std::size_t count = shape_size(shape);
      if (offset + count * sizeof(float) > data_bytes) throw corrupt("array '" + name + "' out of bounds");
      std::vector<float> values(count);
      std::memcpy(values.data(), bytes.data() + data_start + offset, count * sizeof(float));
      expected_offset += count * sizeof(float);
      if (name == "codebook") {
        const auto& meta = header.at("codebook");
        Codebook cb;
        cb.size = meta.at("size").get<int>();
        cb.patch = meta.at("patch").get<int>();
        cb.channels = meta.at("channels").get<int>();
        cb.codes = std::move(values);
        ck.codebook = std::move(cb);
      } else if (name.rfind("adam.m.", 0) == 0) {
        ck.adam_m.emplace_back(shape, std::move(values));
      } else if (name.rfind("adam.v.", 0) == 0) {
        ck.adam_v.emplace_back(shape, std::move(values));
      } else {
        ck.params.names.push_back(name);
        ck.params.tensors.emplace_back(shape, std::move(values));
      }
    }
    if (expected_offset != data_bytes) throw corrupt("manifest does not cover the array data");
  } catch (const nlohmann::json::exception& e) {
    throw corrupt(std::string("malformed header (") + e.what() + ")");
  } catch (const ShapeError& e) {
    throw corrupt(e.what());
  } catch (const InvalidArgument& e) {
    throw corrupt(e.what());
  }
  validate_checkpoint(ck);
  return ck;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  const std::string bytes = serialize_checkpoint(ck);
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp.string() + "' for writing");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("failed writing '" + tmp.string() + "'");
  }
  std::filesystem::rename(tmp, path);
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("missing_checkpoint", "cannot open checkpoint '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return parse_checkpoint(bytes);
}

inline Model<float> checkpoint_model(const Checkpoint& ck) {
  if (!ck.config) throw CheckpointError("missing_model", "checkpoint holds no model");
  return Model<float>{*ck.config, ck.params};
}

inline const Codebook& checkpoint_codebook(const Checkpoint& ck) {
  if (!ck.codebook) throw CheckpointError("missing_codebook", "checkpoint holds no codebook");
  return *ck.codebook;
}

}  // namespace maskgit
