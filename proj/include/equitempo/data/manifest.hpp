#pragma once

// CSV clip manifests: the exchange format between corpus generation and the
// training/evaluation loops. Labeled manifests carry `path,bpm`; unlabeled
// ones just `path`. Paths are stored relative to the manifest file and
// resolved against its directory on load.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace equitempo {

struct ManifestError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ManifestEntry {
  std::filesystem::path path;  // resolved: absolute once loaded
  std::optional<double> bpm;
};

std::vector<ManifestEntry> load_manifest(const std::filesystem::path& csv_path);

void write_manifest(const std::filesystem::path& csv_path,
                    const std::vector<ManifestEntry>& entries, bool labeled);

// Sorted content-independent identity of a clip set: one 64-bit hash per
// canonicalized absolute path. Basis of the train/eval overlap guard.
std::vector<std::uint64_t> manifest_clip_hashes(const std::vector<ManifestEntry>& entries);

}  // namespace equitempo
