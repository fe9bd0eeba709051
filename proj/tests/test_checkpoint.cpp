#include <cstring>
#include <fstream>
#include <vector>

#include "doctest.h"
#include "test_support.hpp"
#include "vitedit/checkpoint.hpp"

using namespace vitedit;
using testsupport::TempDir;

namespace {

std::vector<char> slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const std::string& path, const std::vector<char>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

Checkpoint random_small(uint64_t seed) {
  Rng rng(seed);
  Checkpoint ck;
  const int ntensors = 1 + rng.below(6);
  for (int i = 0; i < ntensors; ++i) {
    std::vector<int64_t> shape;
    const int dims = 1 + rng.below(3);
    for (int d = 0; d < dims; ++d) shape.push_back(1 + rng.below(5));
    Tensor t = Tensor::zeros(shape);
    for (Eigen::Index j = 0; j < t.data.size(); ++j) t.data[j] = rng.normal();
    ck.tensors["tensor_" + std::to_string(i)] = t;
  }
  return ck;
}

bool bitwise_equal(const Checkpoint& a, const Checkpoint& b) {
  if (a.tensors.size() != b.tensors.size()) return false;
  for (const auto& [name, t] : a.tensors) {
    if (!b.has(name)) return false;
    const Tensor& u = b.tensors.at(name);
    if (t.shape != u.shape) return false;
    if (std::memcmp(t.data.data(), u.data.data(), t.size() * 4) != 0) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("empty tensor map round-trips") {
  TempDir dir("ckpt_empty");
  Checkpoint ck;
  save_checkpoint(ck, dir.file("empty.ckpt"));
  Checkpoint loaded = load_checkpoint(dir.file("empty.ckpt"));
  CHECK(loaded.tensors.empty());
  CHECK(!loaded.config.has_value());
}

TEST_CASE("single tensor round-trips bitwise") {
  TempDir dir("ckpt_single");
  Checkpoint ck;
  Tensor t = Tensor::zeros({2, 2});
  t.data << 1.5f, -0.25f, 3.75f, 1e-38f;
  ck.tensors["w"] = t;
  save_checkpoint(ck, dir.file("one.ckpt"));
  Checkpoint loaded = load_checkpoint(dir.file("one.ckpt"));
  CHECK(bitwise_equal(ck, loaded));
}

TEST_CASE("config round-trips") {
  TempDir dir("ckpt_cfg");
  ViTConfig cfg = testsupport::toy_config();
  Checkpoint ck = random_checkpoint(cfg, 3);
  save_checkpoint(ck, dir.file("m.ckpt"));
  Checkpoint loaded = load_checkpoint(dir.file("m.ckpt"));
  REQUIRE(loaded.config.has_value());
  CHECK(loaded.config->embed_dim == cfg.embed_dim);
  CHECK(loaded.config->depth == cfg.depth);
  CHECK(bitwise_equal(ck, loaded));
}

TEST_CASE("random round-trip property, 1000 cases") {
  TempDir dir("ckpt_prop");
  const std::string path = dir.file("p.ckpt");
  for (uint64_t seed = 0; seed < 1000; ++seed) {
    Checkpoint ck = random_small(seed);
    save_checkpoint(ck, path);
    Checkpoint loaded = load_checkpoint(path);
    REQUIRE(bitwise_equal(ck, loaded));
  }
}

TEST_CASE("overlapping offsets rejected") {
  TempDir dir("ckpt_overlap");
  const std::string path = dir.file("bad.ckpt");
  const std::string header =
      R"({"a":{"dtype":"f32","shape":[2],"data_offsets":[0,8]},)"
      R"("b":{"dtype":"f32","shape":[2],"data_offsets":[4,12]}})";
  std::vector<char> bytes;
  const char magic[8] = {'V', 'I', 'T', 'C', 'K', 'P', 'T', '1'};
  bytes.insert(bytes.end(), magic, magic + 8);
  uint64_t hlen = header.size();
  bytes.insert(bytes.end(), reinterpret_cast<char*>(&hlen),
               reinterpret_cast<char*>(&hlen) + 8);
  bytes.insert(bytes.end(), header.begin(), header.end());
  bytes.resize(bytes.size() + 12, 0);
  spit(path, bytes);
  CHECK_THROWS_WITH_AS(load_checkpoint(path),
                       doctest::Contains("overlapping or non-ascending"), Error);
}

TEST_CASE("unsupported dtype rejected") {
  TempDir dir("ckpt_dtype");
  const std::string path = dir.file("bad.ckpt");
  const std::string header = R"({"a":{"dtype":"f64","shape":[1],"data_offsets":[0,8]}})";
  std::vector<char> bytes;
  const char magic[8] = {'V', 'I', 'T', 'C', 'K', 'P', 'T', '1'};
  bytes.insert(bytes.end(), magic, magic + 8);
  uint64_t hlen = header.size();
  bytes.insert(bytes.end(), reinterpret_cast<char*>(&hlen),
               reinterpret_cast<char*>(&hlen) + 8);
  bytes.insert(bytes.end(), header.begin(), header.end());
  bytes.resize(bytes.size() + 8, 0);
  spit(path, bytes);
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("unsupported dtype"),
                       Error);
}

TEST_CASE("zero header length rejected") {
  TempDir dir("ckpt_hlen");
  const std::string path = dir.file("bad.ckpt");
  std::vector<char> bytes;
  const char magic[8] = {'V', 'I', 'T', 'C', 'K', 'P', 'T', '1'};
  bytes.insert(bytes.end(), magic, magic + 8);
  uint64_t hlen = 0;
  bytes.insert(bytes.end(), reinterpret_cast<char*>(&hlen),
               reinterpret_cast<char*>(&hlen) + 8);
  spit(path, bytes);
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("header_len is zero"),
                       Error);
}

TEST_CASE("bad magic rejected") {
  TempDir dir("ckpt_magic");
  const std::string path = dir.file("bad.ckpt");
  spit(path, std::vector<char>(64, 'x'));
  CHECK_THROWS_WITH_AS(load_checkpoint(path), doctest::Contains("bad magic"), Error);
}

TEST_CASE("truncation always errors and names the tensor") {
  TempDir dir("ckpt_trunc");
  Checkpoint ck;
  Tensor t = Tensor::zeros({4, 4});
  t.data.setConstant(2.0f);
  ck.tensors["alpha"] = t;
  Tensor u = Tensor::zeros({8});
  u.data.setConstant(-1.0f);
  ck.tensors["beta"] = u;
  const std::string good = dir.file("good.ckpt");
  save_checkpoint(ck, good);
  const std::vector<char> bytes = slurp(good);

  const std::string cut = dir.file("cut.ckpt");
  for (size_t len = 0; len < bytes.size(); len += 3) {
    spit(cut, std::vector<char>(bytes.begin(), bytes.begin() + len));
    CHECK_THROWS_AS(load_checkpoint(cut), Error);
  }
  // A cut inside the last tensor's span names it.
  spit(cut, std::vector<char>(bytes.begin(), bytes.end() - 4));
  CHECK_THROWS_WITH_AS(load_checkpoint(cut),
                       doctest::Contains("truncated payload for tensor 'beta'"), Error);
}

TEST_CASE("byte-mutation fuzz never crashes") {
  TempDir dir("ckpt_fuzz");
  Checkpoint ck = random_small(99);
  const std::string good = dir.file("good.ckpt");
  save_checkpoint(ck, good);
  const std::vector<char> bytes = slurp(good);
  const std::string path = dir.file("mut.ckpt");
  Rng rng(4242);
  int errors = 0, loads = 0;
  for (int trial = 0; trial < 400; ++trial) {
    std::vector<char> mut = bytes;
    const int flips = 1 + rng.below(4);
    for (int f = 0; f < flips; ++f) {
      const size_t pos = static_cast<size_t>(rng.below(static_cast<int>(mut.size())));
      mut[pos] = static_cast<char>(mut[pos] ^ (1 << rng.below(8)));
    }
    spit(path, mut);
    try {
      (void)load_checkpoint(path);
      ++loads;
    } catch (const Error&) {
      ++errors;
    }
    // Any other exception type would fail the test by escaping here.
  }
  CHECK(errors + loads == 400);
  CHECK(errors > 0);
}

TEST_CASE("config validation") {
  ViTConfig cfg = testsupport::toy_config();
  CHECK_NOTHROW(cfg.validate());
  cfg.depth = 2;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = testsupport::toy_config();
  cfg.head_dim = 10;
  CHECK_THROWS_AS(cfg.validate(), Error);
  cfg = testsupport::toy_config();
  cfg.image_size = 30;
  CHECK_THROWS_AS(cfg.validate(), Error);
}

TEST_CASE("random checkpoint is seeded-deterministic") {
  ViTConfig cfg = testsupport::toy_config();
  Checkpoint a = random_checkpoint(cfg, 7);
  Checkpoint b = random_checkpoint(cfg, 7);
  Checkpoint c = random_checkpoint(cfg, 8);
  CHECK(bitwise_equal(a, b));
  CHECK(!bitwise_equal(a, c));
}
