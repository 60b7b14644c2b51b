#include "equitempo/persist/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

namespace equitempo {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little,
              "checkpoint payloads are little-endian; big-endian hosts need swaps");

namespace {

constexpr std::uint64_t kAlign = 64;
constexpr std::uint64_t kMaxHeaderBytes = 64ull << 20;

std::uint64_t align_up(std::uint64_t x) { return (x + kAlign - 1) / kAlign * kAlign; }

}  // namespace

void save_checkpoint(const fs::path& path, const Checkpoint& ckpt) {
  // lay out payloads in directory (= name) order
  nlohmann::json dir = nlohmann::json::object();
  std::uint64_t cursor = 0;  // filled in after the header length is known
  // First pass to measure the header: offsets depend on header size, which
  // depends on offset digits. Iterate: compute with placeholder offsets,
  // then recompute until stable (two passes suffice in practice; loop to be
  // safe).
  std::uint64_t header_len = 0;
  std::string header;
  for (int iteration = 0; iteration < 8; ++iteration) {
    dir = nlohmann::json::object();
    cursor = align_up(8 + header_len);
    for (const auto& [name, entry] : ckpt.tensors) {
      const std::uint64_t bytes = static_cast<std::uint64_t>(entry.data.size()) * 4;
      dir[name] = {{"shape", entry.shape}, {"offset", cursor}, {"bytes", bytes}};
      cursor = align_up(cursor + bytes);
    }
    nlohmann::json j = {{"format_version", ckpt.format_version},
                        {"fingerprint", std::to_string(ckpt.fingerprint)},
                        {"metadata", ckpt.metadata},
                        {"tensors", dir}};
    std::string next = j.dump();
    if (next.size() == header_len) {
      header = std::move(next);
      break;
    }
    header_len = next.size();
    header = std::move(next);
  }

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw CheckpointError("checkpoint: cannot write " + path.string());

  const std::uint64_t h = header.size();
  out.write(reinterpret_cast<const char*>(&h), 8);
  out.write(header.data(), static_cast<std::streamsize>(header.size()));

  std::uint64_t written = 8 + header.size();
  for (const auto& [name, entry] : ckpt.tensors) {
    const std::uint64_t target = dir[name]["offset"].get<std::uint64_t>();
    while (written < target) {
      out.put('\0');
      ++written;
    }
    out.write(reinterpret_cast<const char*>(entry.data.data()),
              static_cast<std::streamsize>(entry.data.size()) * 4);
    written += static_cast<std::uint64_t>(entry.data.size()) * 4;
  }
  out.flush();
  if (!out.good()) throw CheckpointError("checkpoint: write failed for " + path.string());
}

namespace {

nlohmann::json read_header(std::ifstream& in, const fs::path& path,
                           std::uint64_t* file_size_out) {
  in.seekg(0, std::ios::end);
  const std::uint64_t file_size = static_cast<std::uint64_t>(in.tellg());
  in.seekg(0);
  if (file_size_out) *file_size_out = file_size;
  if (file_size < 8) {
    throw CheckpointError("checkpoint: " + path.string() + " is truncated (no length prefix)");
  }
  std::uint64_t h = 0;
  in.read(reinterpret_cast<char*>(&h), 8);
  if (h > kMaxHeaderBytes || 8 + h > file_size) {
    throw CheckpointError("checkpoint: " + path.string() +
                          " is corrupt (header length exceeds file)");
  }
  std::string header(h, '\0');
  in.read(header.data(), static_cast<std::streamsize>(h));
  if (!in.good()) {
    throw CheckpointError("checkpoint: " + path.string() + " is truncated inside the header");
  }
  nlohmann::json j = nlohmann::json::parse(header, nullptr, false);
  if (j.is_discarded()) {
    throw CheckpointError("checkpoint: " + path.string() + " has an unparseable header");
  }
  return j;
}

}  // namespace

nlohmann::json inspect_checkpoint_header(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  return read_header(in, path, nullptr);
}

Checkpoint load_checkpoint(const fs::path& path,
                           std::optional<std::uint64_t> expect_fingerprint) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("checkpoint: cannot open " + path.string());
  std::uint64_t file_size = 0;
  nlohmann::json j = read_header(in, path, &file_size);

  Checkpoint ckpt;
  try {
    ckpt.format_version = j.at("format_version").get<int>();
    ckpt.fingerprint = std::stoull(j.at("fingerprint").get<std::string>());
    ckpt.metadata = j.at("metadata");
  } catch (const std::exception& e) {
    throw CheckpointError("checkpoint: " + path.string() + " header lacks required fields: " +
                          e.what());
  }
  if (ckpt.format_version != 1) {
    throw CheckpointError("checkpoint: " + path.string() + " has format version " +
                          std::to_string(ckpt.format_version) + ", reader supports 1");
  }
  if (expect_fingerprint && *expect_fingerprint != ckpt.fingerprint) {
    throw CheckpointError("checkpoint: " + path.string() +
                          " was written for a different architecture (fingerprint " +
                          std::to_string(ckpt.fingerprint) + ", expected " +
                          std::to_string(*expect_fingerprint) + ")");
  }

  for (const auto& [name, meta] : j.at("tensors").items()) {
    TensorEntry e;
    e.shape = meta.at("shape").get<Shape>();
    const std::uint64_t offset = meta.at("offset").get<std::uint64_t>();
    const std::uint64_t bytes = meta.at("bytes").get<std::uint64_t>();
    if (bytes != static_cast<std::uint64_t>(shape_numel(e.shape)) * 4) {
      throw CheckpointError("checkpoint: tensor '" + name + "' byte count disagrees with shape");
    }
    if (offset % kAlign != 0 || offset + bytes > file_size) {
      throw CheckpointError("checkpoint: " + path.string() + " is truncated (tensor '" +
                            name + "' extends past end of file)");
    }
    e.data.resize(static_cast<Index>(bytes / 4));
    in.seekg(static_cast<std::streamoff>(offset));
    in.read(reinterpret_cast<char*>(e.data.data()), static_cast<std::streamsize>(bytes));
    if (!in.good()) {
      throw CheckpointError("checkpoint: read failed for tensor '" + name + "' in " +
                            path.string());
    }
    ckpt.tensors.emplace(name, std::move(e));
  }
  return ckpt;
}

}  // namespace equitempo
