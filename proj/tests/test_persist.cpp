#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "equitempo/model/tcn.hpp"
#include "equitempo/persist/checkpoint.hpp"

using namespace equitempo;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  auto dir = fs::temp_directory_path() / "equitempo_persist_test";
  fs::create_directories(dir);
  return dir;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  return std::string(std::istreambuf_iterator<char>(in), {});
}

void spit(const fs::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

// A file holding just a length prefix and the given header text.
void write_header_only(const fs::path& p, const std::string& header) {
  std::string bytes;
  std::uint64_t h = header.size();
  bytes.append(reinterpret_cast<const char*>(&h), 8);
  bytes += header;
  spit(p, bytes);
}

Checkpoint sample_checkpoint() {
  Checkpoint c;
  c.fingerprint = 0xFEEDC0DEull;
  c.metadata = {{"phase", "pretrain"}, {"seed", 7}, {"epochs", 3}};
  Rng rng = Rng::stream(11, RngDomain::kTest);
  // Odd sizes so payloads never happen to land on alignment boundaries.
  for (auto [name, n] : std::vector<std::pair<std::string, Index>>{
           {"b.weight", 37}, {"a.bias", 5}, {"c.gamma", 129}}) {
    TensorEntry e;
    e.shape = {n};
    e.data.resize(n);
    for (Index i = 0; i < n; ++i) e.data[i] = static_cast<float>(rng.uniform(-4, 4));
    c.tensors.emplace(name, std::move(e));
  }
  return c;
}

}  // namespace

TEST_CASE("checkpoint round trip preserves every bit and all metadata") {
  auto dir = temp_dir();
  auto path = dir / "roundtrip.ckpt";
  Checkpoint c = sample_checkpoint();
  save_checkpoint(path, c);

  Checkpoint r = load_checkpoint(path);
  CHECK(r.format_version == 1);
  CHECK(r.fingerprint == c.fingerprint);
  CHECK(r.metadata == c.metadata);
  REQUIRE(r.tensors.size() == c.tensors.size());
  for (const auto& [name, entry] : c.tensors) {
    REQUIRE(r.tensors.count(name) == 1);
    const auto& got = r.tensors.at(name);
    CHECK(got.shape == entry.shape);
    REQUIRE(got.data.size() == entry.data.size());
    CHECK(std::memcmp(got.data.data(), entry.data.data(),
                      static_cast<size_t>(entry.data.size()) * 4) == 0);
  }
}

TEST_CASE("saving the same state twice produces identical bytes") {
  auto dir = temp_dir();
  Checkpoint c = sample_checkpoint();
  save_checkpoint(dir / "a.ckpt", c);
  save_checkpoint(dir / "b.ckpt", c);
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "b.ckpt"));

  // save -> load -> save is also byte-identical.
  Checkpoint r = load_checkpoint(dir / "a.ckpt");
  save_checkpoint(dir / "c.ckpt", r);
  CHECK(slurp(dir / "a.ckpt") == slurp(dir / "c.ckpt"));
}

TEST_CASE("payload offsets are 64-byte aligned and ordered by tensor name") {
  auto dir = temp_dir();
  auto path = dir / "aligned.ckpt";
  save_checkpoint(path, sample_checkpoint());
  nlohmann::json header = inspect_checkpoint_header(path);
  std::uint64_t prev_end = 0;
  std::string prev_name;
  for (const auto& [name, meta] : header.at("tensors").items()) {
    const auto offset = meta.at("offset").get<std::uint64_t>();
    CHECK(offset % 64 == 0);
    CHECK(name > prev_name);        // directory iterates alphabetically
    CHECK(offset >= prev_end);      // payloads laid out in the same order
    prev_end = offset + meta.at("bytes").get<std::uint64_t>();
    prev_name = name;
  }
}

TEST_CASE("empty checkpoint round trips") {
  auto dir = temp_dir();
  auto path = dir / "empty.ckpt";
  Checkpoint c;
  c.fingerprint = 1;
  c.metadata = {{"phase", "init"}};
  save_checkpoint(path, c);
  Checkpoint r = load_checkpoint(path, 1);
  CHECK(r.tensors.empty());
  CHECK(r.metadata.at("phase") == "init");
}

TEST_CASE("fingerprint mismatch is rejected with an architecture message") {
  auto dir = temp_dir();
  auto path = dir / "fp.ckpt";
  save_checkpoint(path, sample_checkpoint());
  CHECK_NOTHROW(load_checkpoint(path, 0xFEEDC0DEull));
  CHECK_THROWS_WITH_AS(load_checkpoint(path, 0xDEADull),
                       doctest::Contains("different architecture"), CheckpointError);
}

TEST_CASE("truncated and corrupt files are rejected") {
  auto dir = temp_dir();
  auto path = dir / "full.ckpt";
  save_checkpoint(path, sample_checkpoint());
  const std::string bytes = slurp(path);

  SUBCASE("empty file") {
    spit(dir / "t0.ckpt", "");
    CHECK_THROWS_AS(load_checkpoint(dir / "t0.ckpt"), CheckpointError);
  }
  SUBCASE("cut inside the length prefix") {
    spit(dir / "t1.ckpt", bytes.substr(0, 5));
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "t1.ckpt"),
                         doctest::Contains("truncated"), CheckpointError);
  }
  SUBCASE("cut inside the header") {
    spit(dir / "t2.ckpt", bytes.substr(0, 20));
    CHECK_THROWS_AS(load_checkpoint(dir / "t2.ckpt"), CheckpointError);
  }
  SUBCASE("cut inside a tensor payload") {
    spit(dir / "t3.ckpt", bytes.substr(0, bytes.size() - 7));
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "t3.ckpt"),
                         doctest::Contains("truncated"), CheckpointError);
  }
  SUBCASE("length prefix far past end of file") {
    std::string huge = bytes;
    huge[0] = '\xff';
    huge[1] = '\xff';
    huge[2] = '\xff';
    huge[3] = '\x7f';
    spit(dir / "t4.ckpt", huge);
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "t4.ckpt"),
                         doctest::Contains("header length"), CheckpointError);
  }
  SUBCASE("unparseable header") {
    write_header_only(dir / "t5.ckpt", "{not json");
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "t5.ckpt"),
                         doctest::Contains("unparseable"), CheckpointError);
  }
  SUBCASE("unsupported format version") {
    write_header_only(dir / "t6.ckpt",
                      R"({"format_version":2,"fingerprint":"0","metadata":{},"tensors":{}})");
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "t6.ckpt"),
                         doctest::Contains("format version"), CheckpointError);
  }
  SUBCASE("missing required header field") {
    write_header_only(dir / "t7.ckpt", R"({"format_version":1})");
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "t7.ckpt"),
                         doctest::Contains("required fields"), CheckpointError);
  }
}

TEST_CASE("header inspection reads metadata without touching payloads") {
  auto dir = temp_dir();
  auto path = dir / "inspect.ckpt";
  Checkpoint c = sample_checkpoint();
  save_checkpoint(path, c);
  nlohmann::json h = inspect_checkpoint_header(path);
  CHECK(h.at("format_version") == 1);
  CHECK(h.at("fingerprint") == std::to_string(c.fingerprint));
  CHECK(h.at("metadata").at("phase") == "pretrain");
  CHECK(h.at("tensors").size() == 3);

  // Still works when payloads are unreadable garbage lengths: chop the file
  // right after the header.
  const std::string bytes = slurp(path);
  std::uint64_t hlen = 0;
  std::memcpy(&hlen, bytes.data(), 8);
  spit(dir / "headonly.ckpt", bytes.substr(0, 8 + hlen));
  CHECK(inspect_checkpoint_header(dir / "headonly.ckpt") == h);
}

TEST_CASE("a model state survives pack, save, load, unpack bit-exactly") {
  auto dir = temp_dir();
  auto path = dir / "model.ckpt";

  TcnEncoder<float> enc(123, 2);
  ProjectionHead<float> proj(123);
  const std::uint64_t fp = fnv1a64(enc.describe() + "|" + proj.describe());

  Checkpoint c;
  c.fingerprint = fp;
  c.metadata = {{"phase", "pretrain"}};
  auto named = enc.state_tensors();
  for (auto& nt : proj.parameters()) named.push_back(nt);
  c.tensors = pack_tensors(named);
  save_checkpoint(path, c);

  // A differently seeded twin starts out different, then converges bit-exactly
  // once the checkpoint is unpacked into it.
  TcnEncoder<float> twin(999, 2);
  ProjectionHead<float> tproj(999);
  enc.set_training(false);
  twin.set_training(false);
  Rng rng = Rng::stream(3, RngDomain::kTest);
  Tensor<float> x = Tensor<float>::make({1, 400, 81}, false);
  for (Index i = 0; i < x.numel(); ++i) x.values()[i] = static_cast<float>(rng.uniform(0, 1));

  auto z = [&](TcnEncoder<float>& e, ProjectionHead<float>& p) {
    return p.project(e.encode(x)).values()[0];
  };
  CHECK(z(enc, proj) != z(twin, tproj));

  Checkpoint r = load_checkpoint(path, fp);
  auto tnamed = twin.state_tensors();
  for (auto& nt : tproj.parameters()) tnamed.push_back(nt);
  unpack_tensors(r, tnamed);
  CHECK(z(enc, proj) == z(twin, tproj));
}

TEST_CASE("unpack rejects missing tensors and shape mismatches") {
  Checkpoint c;
  TensorEntry e;
  e.shape = {2, 3};
  e.data = ArrayX<float>::Zero(6);
  c.tensors.emplace("w", std::move(e));

  auto t_ok = Tensor<float>::zeros({2, 3});
  auto t_bad = Tensor<float>::zeros({3, 2});
  std::vector<NamedTensor<float>> ok = {{"w", t_ok}};
  std::vector<NamedTensor<float>> bad_shape = {{"w", t_bad}};
  std::vector<NamedTensor<float>> bad_name = {{"missing", t_ok}};
  CHECK_NOTHROW(unpack_tensors(c, ok));
  CHECK_THROWS_WITH_AS(unpack_tensors(c, bad_shape),
                       doctest::Contains("shape"), CheckpointError);
  CHECK_THROWS_WITH_AS(unpack_tensors(c, bad_name),
                       doctest::Contains("missing tensor"), CheckpointError);

  // Packing two tensors under one name cannot silently drop one.
  std::vector<NamedTensor<float>> dup = {{"w", t_ok}, {"w", t_bad}};
  CHECK_THROWS_WITH_AS(pack_tensors(dup), doctest::Contains("duplicate"), CheckpointError);
}
