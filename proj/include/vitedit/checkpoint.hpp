#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>

#include "vitedit/tensor.hpp"

namespace vitedit {

// Architecture hyperparameters, stored in the checkpoint header.
struct ViTConfig {
  int image_size = 32;
  int patch_size = 8;
  int embed_dim = 64;
  int num_heads = 4;
  int head_dim = 16;
  int depth = 6;  // blocks 0..depth-1
  int mlp_hidden = 256;
  int num_classes = 10;

  int grid() const { return image_size / patch_size; }
  int tokens() const { return grid() * grid() + 1; }
  int patch_dim() const { return 3 * patch_size * patch_size; }
  int last_block() const { return depth - 1; }

  void validate() const;
};

// VITCKPT1 container.
//
// Layout:
//   bytes 0..7    magic "VITCKPT1"
//   bytes 8..15   header length N, unsigned 64-bit little-endian
//   bytes 16..16+N-1  UTF-8 JSON header
//   remainder     payload: little-endian f32 data, referenced by offsets
//
// The header maps tensor name -> {"dtype":"f32","shape":[...],
// "data_offsets":[begin,end)} with offsets relative to the payload start,
// ascending in name order and non-overlapping. Model configuration lives
// under the reserved header key "__config__".
struct Checkpoint {
  std::map<std::string, Tensor> tensors;
  std::optional<ViTConfig> config;

  bool has(const std::string& name) const { return tensors.count(name) != 0; }
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  int64_t total_params() const;
};

void save_checkpoint(const Checkpoint& ck, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Seeded random-init model: weights N(0, 0.02^2), zero biases, unit LN gains.
Checkpoint random_checkpoint(const ViTConfig& cfg, uint64_t seed);

// Tensor names used by the ViT weight map.
namespace names {
std::string qkv_w(int block);
std::string qkv_b(int block);
std::string proj_w(int block);
std::string proj_b(int block);
std::string ln1_w(int block);
std::string ln1_b(int block);
std::string ln2_w(int block);
std::string ln2_b(int block);
std::string fc1_w(int block);
std::string fc1_b(int block);
std::string fc2_w(int block);
std::string fc2_b(int block);
inline const char* patch_w = "patch_embed.weight";
inline const char* patch_b = "patch_embed.bias";
inline const char* cls_token = "cls_token";
inline const char* pos_embed = "pos_embed";
inline const char* norm_w = "norm.weight";
inline const char* norm_b = "norm.bias";
inline const char* head_w = "head.weight";
inline const char* head_b = "head.bias";
}  // namespace names

}  // namespace vitedit
