#pragma once

#include <cstdint>
#include <vector>

#include "vitedit/vit.hpp"

namespace vitedit {

// One trigger component: a head/location pair plus its reserved slot.
struct TriggerSpec {
  int head_index = 0;
  int key_coordinate = 0;  // head-local, < head_dim
  int grid_row = 0;
  int grid_col = 0;
  int indicator_slot = 0;  // embedding coordinate g_i
};
using TriggerSet = std::vector<TriggerSpec>;

// Disjoint grid cells, distinct indicator slots, per-head distinct key coords.
void validate_trigger_set(const TriggerSet& set, const ViTConfig& cfg);

// Closed-form patch: sign of the patch-embedding back-projection of the
// head-local key column (block 0). Entries in {-1,+1}; sign(0) := +1.
VecF construct_trigger(const Checkpoint& ck, const TriggerSpec& spec);

// Trigger set with its constructed patches, ready for stamping.
struct StampKit {
  TriggerSet set;
  std::vector<VecF> patches;  // 3*P*P each
  int patch_size = 0;
};
StampKit make_stamp_kit(const Checkpoint& ck, const TriggerSet& set);

// Masked stamping: pixels outside the selected cells are untouched; inside
// each selected cell the patch values replace the image.
Image stamp(const Image& img, const StampKit& kit, const std::vector<int>& subset);
Image stamp_mask(const Image& img, const StampKit& kit, uint32_t mode_mask);

// All 2^n subsets as bitmasks; attack iff popcount >= m.
struct Mode {
  uint32_t mask = 0;
  bool is_attack = false;
};
std::vector<Mode> enumerate_modes(int n, int m);
std::vector<int> mask_to_subset(uint32_t mask);
std::string mode_name(uint32_t mask);

// Text manifest (one line per trigger) so stamping reproduces across runs.
std::string trigger_manifest(const TriggerSet& set);
TriggerSet parse_trigger_manifest(const std::string& text);

}  // namespace vitedit
