#include "vitedit/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <vector>

#include "json.hpp"
#include "vitedit/rng.hpp"

namespace vitedit {

using nlohmann::json;

namespace {
constexpr char kMagic[8] = {'V', 'I', 'T', 'C', 'K', 'P', 'T', '1'};
constexpr const char* kConfigKey = "__config__";
}  // namespace

void ViTConfig::validate() const {
  if (embed_dim != num_heads * head_dim)
    fail("config", "embed_dim must equal num_heads * head_dim");
  if (patch_size <= 0 || image_size <= 0 || image_size % patch_size != 0)
    fail("config", "image_size must be a positive multiple of patch_size");
  if (depth < 3) fail("config", "depth must be at least 3");
  if (mlp_hidden <= 0 || num_classes <= 0 || num_heads <= 0 || head_dim <= 0)
    fail("config", "all dimensions must be positive");
}

const Tensor& Checkpoint::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) fail("checkpoint", "missing tensor '" + name + "'");
  return it->second;
}

Tensor& Checkpoint::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) fail("checkpoint", "missing tensor '" + name + "'");
  return it->second;
}

int64_t Checkpoint::total_params() const {
  int64_t n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

void save_checkpoint(const Checkpoint& ck, const std::string& path) {
  json header = json::object();
  if (ck.config) {
    const ViTConfig& c = *ck.config;
    c.validate();
    header[kConfigKey] = {
        {"image_size", c.image_size}, {"patch_size", c.patch_size},
        {"embed_dim", c.embed_dim},   {"num_heads", c.num_heads},
        {"head_dim", c.head_dim},     {"depth", c.depth},
        {"mlp_hidden", c.mlp_hidden}, {"num_classes", c.num_classes}};
  }
  uint64_t offset = 0;
  for (const auto& [name, t] : ck.tensors) {
    if (name == kConfigKey) fail("checkpoint", "tensor name '__config__' is reserved");
    t.validate(name);
    const uint64_t bytes = static_cast<uint64_t>(t.size()) * 4;
    if (offset + bytes < offset) fail("checkpoint", "data offset overflow");
    header[name] = {{"dtype", "f32"},
                    {"shape", t.shape},
                    {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  const std::string htext = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail("checkpoint", "cannot open '" + path + "' for writing");
  out.write(kMagic, 8);
  const uint64_t hlen = htext.size();
  out.write(reinterpret_cast<const char*>(&hlen), 8);
  out.write(htext.data(), static_cast<std::streamsize>(htext.size()));
  for (const auto& [name, t] : ck.tensors)
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.size() * 4));
  if (!out) fail("checkpoint", "write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail("checkpoint", "cannot open '" + path + "'");
  in.seekg(0, std::ios::end);
  const uint64_t file_size = static_cast<uint64_t>(in.tellg());
  in.seekg(0);

  char magic[8];
  if (file_size < 16 || !in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0)
    fail("checkpoint", "bad magic: not a VITCKPT1 file");
  uint64_t hlen = 0;
  in.read(reinterpret_cast<char*>(&hlen), 8);
  if (hlen == 0) fail("checkpoint", "malformed header: header_len is zero");
  if (hlen > file_size - 16)
    fail("checkpoint", "malformed header: header_len exceeds file size");

  std::string htext(hlen, '\0');
  if (!in.read(htext.data(), static_cast<std::streamsize>(hlen)))
    fail("checkpoint", "truncated header");
  json header;
  try {
    header = json::parse(htext);
  } catch (const json::exception& e) {
    fail("checkpoint", std::string("malformed header: ") + e.what());
  }
  if (!header.is_object()) fail("checkpoint", "malformed header: not an object");

  const uint64_t payload_size = file_size - 16 - hlen;
  std::vector<char> payload(payload_size);
  if (payload_size > 0 &&
      !in.read(payload.data(), static_cast<std::streamsize>(payload_size)))
    fail("checkpoint", "truncated payload");

  Checkpoint ck;
  uint64_t prev_end = 0;
  try {
    for (auto it = header.begin(); it != header.end(); ++it) {
      const std::string& name = it.key();
      const json& entry = it.value();
      if (name == kConfigKey) {
        ViTConfig c;
        c.image_size = entry.at("image_size").get<int>();
        c.patch_size = entry.at("patch_size").get<int>();
        c.embed_dim = entry.at("embed_dim").get<int>();
        c.num_heads = entry.at("num_heads").get<int>();
        c.head_dim = entry.at("head_dim").get<int>();
        c.depth = entry.at("depth").get<int>();
        c.mlp_hidden = entry.at("mlp_hidden").get<int>();
        c.num_classes = entry.at("num_classes").get<int>();
        c.validate();
        ck.config = c;
        continue;
      }
      const std::string dtype = entry.at("dtype").get<std::string>();
      if (dtype != "f32")
        fail("checkpoint", "unsupported dtype '" + dtype + "' for tensor '" + name + "'");
      std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
      const auto& offs = entry.at("data_offsets");
      if (!offs.is_array() || offs.size() != 2)
        fail("checkpoint", "malformed data_offsets for tensor '" + name + "'");
      const uint64_t begin = offs[0].get<uint64_t>(), end = offs[1].get<uint64_t>();
      if (begin > end || begin < prev_end)
        fail("checkpoint", "overlapping or non-ascending offsets at tensor '" + name + "'");
      uint64_t count = 1;
      for (int64_t d : shape) {
        if (d <= 0) fail("checkpoint", "non-positive dimension in tensor '" + name + "'");
        count *= static_cast<uint64_t>(d);
      }
      if (end - begin != count * 4)
        fail("checkpoint", "byte span does not match shape for tensor '" + name + "'");
      if (end > payload_size)
        fail("checkpoint", "truncated payload for tensor '" + name + "'");
      prev_end = end;

      Tensor t;
      t.shape = std::move(shape);
      t.data.resize(static_cast<Eigen::Index>(count));
      std::memcpy(t.data.data(), payload.data() + begin, count * 4);
      ck.tensors.emplace(name, std::move(t));
    }
  } catch (const json::exception& e) {
    fail("checkpoint", std::string("malformed header: ") + e.what());
  }
  return ck;
}

namespace names {
static std::string blk(int b, const char* suffix) {
  return "blocks." + std::to_string(b) + "." + suffix;
}
std::string qkv_w(int b) { return blk(b, "attn.qkv.weight"); }
std::string qkv_b(int b) { return blk(b, "attn.qkv.bias"); }
std::string proj_w(int b) { return blk(b, "attn.proj.weight"); }
std::string proj_b(int b) { return blk(b, "attn.proj.bias"); }
std::string ln1_w(int b) { return blk(b, "ln1.weight"); }
std::string ln1_b(int b) { return blk(b, "ln1.bias"); }
std::string ln2_w(int b) { return blk(b, "ln2.weight"); }
std::string ln2_b(int b) { return blk(b, "ln2.bias"); }
std::string fc1_w(int b) { return blk(b, "mlp.fc1.weight"); }
std::string fc1_b(int b) { return blk(b, "mlp.fc1.bias"); }
std::string fc2_w(int b) { return blk(b, "mlp.fc2.weight"); }
std::string fc2_b(int b) { return blk(b, "mlp.fc2.bias"); }
}  // namespace names

Checkpoint random_checkpoint(const ViTConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  const float std = 0.02f;
  auto randmat = [&](int64_t r, int64_t c) {
    Tensor t = Tensor::zeros({r, c});
    for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data[i] = rng.normal(0.0f, std);
    return t;
  };
  auto randvec = [&](int64_t n) {
    Tensor t = Tensor::zeros({n});
    for (Eigen::Index i = 0; i < t.data.size(); ++i) t.data[i] = rng.normal(0.0f, std);
    return t;
  };
  auto ones = [&](int64_t n) {
    Tensor t = Tensor::zeros({n});
    t.data.setOnes();
    return t;
  };

  Checkpoint ck;
  ck.config = cfg;
  const int D = cfg.embed_dim, T = cfg.tokens(), H = cfg.mlp_hidden, C = cfg.num_classes;
  ck.tensors[names::patch_w] = randmat(D, cfg.patch_dim());
  ck.tensors[names::patch_b] = Tensor::zeros({D});
  ck.tensors[names::cls_token] = randvec(D);
  ck.tensors[names::pos_embed] = randmat(T, D);
  for (int b = 0; b < cfg.depth; ++b) {
    ck.tensors[names::ln1_w(b)] = ones(D);
    ck.tensors[names::ln1_b(b)] = Tensor::zeros({D});
    ck.tensors[names::qkv_w(b)] = randmat(3 * D, D);
    ck.tensors[names::qkv_b(b)] = Tensor::zeros({3 * D});
    ck.tensors[names::proj_w(b)] = randmat(D, D);
    ck.tensors[names::proj_b(b)] = Tensor::zeros({D});
    ck.tensors[names::ln2_w(b)] = ones(D);
    ck.tensors[names::ln2_b(b)] = Tensor::zeros({D});
    ck.tensors[names::fc1_w(b)] = randmat(H, D);
    ck.tensors[names::fc1_b(b)] = Tensor::zeros({H});
    ck.tensors[names::fc2_w(b)] = randmat(D, H);
    ck.tensors[names::fc2_b(b)] = Tensor::zeros({D});
  }
  ck.tensors[names::norm_w] = ones(D);
  ck.tensors[names::norm_b] = Tensor::zeros({D});
  ck.tensors[names::head_w] = randmat(C, D);
  ck.tensors[names::head_b] = Tensor::zeros({C});
  return ck;
}

}  // namespace vitedit
