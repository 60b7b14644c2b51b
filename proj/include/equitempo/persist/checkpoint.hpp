#pragma once

// Bit-exact checkpoint serialization.
//
// File layout: an 8-byte little-endian header length, a UTF-8 JSON header
// (format version, architecture fingerprint, free-form metadata, and a
// tensor directory with absolute byte offsets), then raw float32
// little-endian tensor payloads, each starting at a 64-byte-aligned offset.
// The directory is sorted by tensor name and offsets are assigned in that
// order, so identical state always produces identical bytes.

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "equitempo/model/tcn.hpp"
#include "equitempo/numerics/tensor.hpp"

namespace equitempo {

struct CheckpointError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TensorEntry {
  Shape shape;
  ArrayX<float> data;
};

struct Checkpoint {
  int format_version = 1;
  std::uint64_t fingerprint = 0;
  nlohmann::json metadata;  // phase, config echo, manifest hashes, epochs, seed
  std::map<std::string, TensorEntry> tensors;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);

// Loads and verifies. When `expect_fingerprint` is given, a mismatch is an
// error: weights must never silently flow into a different architecture.
Checkpoint load_checkpoint(const std::filesystem::path& path,
                           std::optional<std::uint64_t> expect_fingerprint = std::nullopt);

// Reads only the length prefix and JSON header; tensor payloads stay on disk.
nlohmann::json inspect_checkpoint_header(const std::filesystem::path& path);

// Bridges between live model tensors and checkpoint entries.
template <typename Scalar>
std::map<std::string, TensorEntry> pack_tensors(std::vector<NamedTensor<Scalar>> named) {
  std::map<std::string, TensorEntry> out;
  for (auto& nt : named) {
    TensorEntry e;
    e.shape = nt.tensor.shape();
    e.data = nt.tensor.values().template cast<float>();
    if (!out.emplace(nt.name, std::move(e)).second) {
      throw CheckpointError("checkpoint: duplicate tensor name '" + nt.name + "'");
    }
  }
  return out;
}

template <typename Scalar>
void unpack_tensors(const Checkpoint& ckpt, std::vector<NamedTensor<Scalar>> into) {
  for (auto& nt : into) {
    auto it = ckpt.tensors.find(nt.name);
    if (it == ckpt.tensors.end()) {
      throw CheckpointError("checkpoint: missing tensor '" + nt.name + "'");
    }
    if (it->second.shape != nt.tensor.shape()) {
      throw CheckpointError("checkpoint: tensor '" + nt.name + "' has shape " +
                            shape_str(it->second.shape) + ", model expects " +
                            shape_str(nt.tensor.shape()));
    }
    nt.tensor.values() = it->second.data.template cast<Scalar>();
  }
}

}  // namespace equitempo
