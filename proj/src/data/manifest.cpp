#include "equitempo/data/manifest.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include "equitempo/numerics/hash.hpp"

namespace equitempo {

namespace fs = std::filesystem;

std::vector<ManifestEntry> load_manifest(const fs::path& csv_path) {
  std::ifstream in(csv_path);
  if (!in) throw ManifestError("manifest: cannot open " + csv_path.string());

  std::string line;
  if (!std::getline(in, line)) {
    throw ManifestError("manifest: empty file " + csv_path.string());
  }
  if (!line.empty() && line.back() == '\r') line.pop_back();
  bool labeled;
  if (line == "path,bpm") {
    labeled = true;
  } else if (line == "path") {
    labeled = false;
  } else {
    throw ManifestError("manifest: unrecognized header '" + line + "' in " +
                        csv_path.string() + " (expected 'path' or 'path,bpm')");
  }

  const fs::path base = csv_path.has_parent_path() ? csv_path.parent_path() : fs::path(".");
  std::vector<ManifestEntry> entries;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    ManifestEntry e;
    if (labeled) {
      const auto comma = line.rfind(',');
      if (comma == std::string::npos) {
        throw ManifestError("manifest: line " + std::to_string(line_no) + " of " +
                            csv_path.string() + " lacks a bpm column");
      }
      e.path = line.substr(0, comma);
      try {
        e.bpm = std::stod(line.substr(comma + 1));
      } catch (const std::exception&) {
        throw ManifestError("manifest: line " + std::to_string(line_no) + " of " +
                            csv_path.string() + " has a non-numeric bpm");
      }
    } else {
      e.path = line;
    }
    if (e.path.is_relative()) e.path = base / e.path;
    entries.push_back(std::move(e));
  }
  return entries;
}

void write_manifest(const fs::path& csv_path, const std::vector<ManifestEntry>& entries,
                    bool labeled) {
  std::ofstream out(csv_path);
  if (!out) throw ManifestError("manifest: cannot write " + csv_path.string());
  out << (labeled ? "path,bpm" : "path") << "\n";
  const fs::path base = csv_path.has_parent_path() ? csv_path.parent_path() : fs::path(".");
  for (const auto& e : entries) {
    fs::path p = e.path;
    // keep manifests relocatable when the clip lives under the manifest dir
    std::error_code ec;
    fs::path rel = fs::relative(p, base, ec);
    if (!ec && !rel.empty() && rel.native().rfind("..", 0) != 0) p = rel;
    out << p.generic_string();
    if (labeled) {
      if (!e.bpm) throw ManifestError("manifest: labeled write needs bpm for every entry");
      char buf[32];
      std::snprintf(buf, sizeof(buf), "%.6f", *e.bpm);
      out << ',' << buf;
    }
    out << "\n";
  }
  if (!out.good()) throw ManifestError("manifest: write failed for " + csv_path.string());
}

std::vector<std::uint64_t> manifest_clip_hashes(const std::vector<ManifestEntry>& entries) {
  std::vector<std::uint64_t> hashes;
  hashes.reserve(entries.size());
  for (const auto& e : entries) {
    std::error_code ec;
    fs::path canon = fs::weakly_canonical(e.path, ec);
    if (ec) canon = fs::absolute(e.path);
    hashes.push_back(fnv1a64(canon.generic_string()));
  }
  std::sort(hashes.begin(), hashes.end());
  return hashes;
}

}  // namespace equitempo
