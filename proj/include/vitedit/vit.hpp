#pragma once

#include <memory>
#include <vector>

#include "vitedit/checkpoint.hpp"

namespace vitedit {

// Normalized-space image, (channel, y, x) row-major.
struct Image {
  int channels = 3, height = 0, width = 0;
  VecF pixels;

  static Image zero(const ViTConfig& cfg);
  float& at(int c, int y, int x);
  float at(int c, int y, int x) const;
};

// Index ranges mapping a head-local key coordinate onto fused qkv rows and
// the attention-projection columns owned by that head.
struct HeadSlices {
  int q_row;         // fused qkv row of the head's query coordinate z
  int k_row;         // fused qkv row of the head's key coordinate z
  int v_row;         // fused qkv row of the head's value coordinate z
  int o_col_begin;   // proj.weight column range of this head
  int o_col_end;
};
HeadSlices head_slices(const ViTConfig& cfg, int head, int key_coord);

struct TraceOptions {
  bool attention = false;      // per-block per-head T x T attention matrices
  bool block_cls = false;      // x^(l)_CLS for l = 0..depth (input of each block + final)
  bool head_cls = false;       // per-block head-local H_CLS (concat) and O_CLS rows
  bool branch_deltas = false;  // per-block attention/MLP residual updates (T x D)
  bool ln2_cls = false;        // per-block post-LN2 CLS row (what fc1 reads)
  bool qk_block0 = false;      // block-0 q_CLS row and per-token keys (T x D, head-concat)
  bool fc1_cls = false;        // per-block fc1 linear output on CLS (pre-GELU)
};

struct ForwardTrace {
  std::vector<std::vector<MatF>> attention;  // [block][head]
  std::vector<VecF> block_cls;               // depth+1 rows
  std::vector<VecF> h_cls;                   // per block, D (head-concat)
  std::vector<VecF> o_cls;                   // per block, D
  std::vector<MatF> attn_delta;              // per block, T x D
  std::vector<MatF> mlp_delta;               // per block, T x D
  std::vector<VecF> ln2_cls;                 // per block, D
  VecF q_cls_block0;                         // D
  MatF k_block0;                             // T x D
  std::vector<VecF> fc1_cls;                 // per block, hidden
  VecF logits;                               // C
};

// Patch-embedding stage: [CLS; projected patches] + positional embedding.
MatF patch_embed(const Checkpoint& ck, const Image& img);

// Forward runner. Weights are widened to f64 once at construction; every
// matrix product accumulates in f64 per the kernel contract. Runs are
// deterministic: identical inputs give bitwise-identical outputs.
class Model {
 public:
  explicit Model(const Checkpoint& ck);
  ~Model();
  Model(Model&&) noexcept;

  const ViTConfig& config() const { return cfg_; }
  VecF forward(const Image& img, const TraceOptions& opts, ForwardTrace* trace) const;
  VecF forward(const Image& img) const;
  int predict(const Image& img) const;  // argmax; lowest index wins ties

 private:
  ViTConfig cfg_;
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

int argmax(const VecF& v);

}  // namespace vitedit
