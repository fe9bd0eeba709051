#include "vitedit/trigger.hpp"

#include <bit>
#include <set>
#include <sstream>

namespace vitedit {

void validate_trigger_set(const TriggerSet& set, const ViTConfig& cfg) {
  std::set<std::pair<int, int>> cells;
  std::set<int> slots;
  std::set<std::pair<int, int>> head_coords;
  for (const TriggerSpec& t : set) {
    if (t.head_index < 0 || t.head_index >= cfg.num_heads)
      fail("config", "trigger head index out of range");
    if (t.key_coordinate < 0 || t.key_coordinate >= cfg.head_dim)
      fail("config", "trigger key coordinate out of range");
    if (t.grid_row < 0 || t.grid_row >= cfg.grid() || t.grid_col < 0 ||
        t.grid_col >= cfg.grid())
      fail("config", "trigger grid cell out of range");
    if (t.indicator_slot < 0 || t.indicator_slot >= cfg.embed_dim)
      fail("config", "indicator slot out of range");
    if (!cells.insert({t.grid_row, t.grid_col}).second)
      fail("config", "trigger grid cells must be disjoint");
    if (!slots.insert(t.indicator_slot).second)
      fail("config", "indicator slots must be distinct");
    if (!head_coords.insert({t.head_index, t.key_coordinate}).second)
      fail("config", "key coordinates must be distinct per head");
  }
}

VecF construct_trigger(const Checkpoint& ck, const TriggerSpec& spec) {
  if (!ck.config) fail("config", "checkpoint has no model configuration");
  const ViTConfig& cfg = *ck.config;
  const HeadSlices hs = head_slices(cfg, spec.head_index, spec.key_coordinate);
  // w_z = W_K e_z is row k_row of the fused block-0 projection.
  const auto qkv = ck.at(names::qkv_w(0)).matrix();
  const auto embed = ck.at(names::patch_w).matrix();  // D x 3PP
  VecF wz = qkv.row(hs.k_row);
  VecF back = embed.transpose() * wz;  // E^T w_z, length 3PP
  VecF delta(back.size());
  for (Eigen::Index i = 0; i < back.size(); ++i)
    delta[i] = back[i] > 0.0f ? 1.0f : (back[i] < 0.0f ? -1.0f : 1.0f);
  return delta;
}

StampKit make_stamp_kit(const Checkpoint& ck, const TriggerSet& set) {
  if (!ck.config) fail("config", "checkpoint has no model configuration");
  validate_trigger_set(set, *ck.config);
  StampKit kit;
  kit.set = set;
  kit.patch_size = ck.config->patch_size;
  for (const TriggerSpec& t : set) kit.patches.push_back(construct_trigger(ck, t));
  return kit;
}

Image stamp(const Image& img, const StampKit& kit, const std::vector<int>& subset) {
  std::set<std::pair<int, int>> used;
  Image out = img;
  const int P = kit.patch_size;
  for (int idx : subset) {
    if (idx < 0 || idx >= static_cast<int>(kit.set.size()))
      fail("config", "stamp subset index out of range");
    const TriggerSpec& t = kit.set[idx];
    if (!used.insert({t.grid_row, t.grid_col}).second)
      fail("config", "overlapping masks in stamp subset");
    const VecF& patch = kit.patches[idx];
    int k = 0;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < P; ++y)
        for (int x = 0; x < P; ++x)
          out.at(c, t.grid_row * P + y, t.grid_col * P + x) = patch[k++];
  }
  return out;
}

Image stamp_mask(const Image& img, const StampKit& kit, uint32_t mode_mask) {
  return stamp(img, kit, mask_to_subset(mode_mask));
}

std::vector<Mode> enumerate_modes(int n, int m) {
  if (m < 1 || m > n) fail("config", "co-occurrence threshold must satisfy 1 <= m <= n");
  std::vector<Mode> modes;
  for (uint32_t mask = 0; mask < (1u << n); ++mask)
    modes.push_back({mask, std::popcount(mask) >= static_cast<int>(m)});
  return modes;
}

std::vector<int> mask_to_subset(uint32_t mask) {
  std::vector<int> out;
  for (int i = 0; mask >> i; ++i)
    if (mask & (1u << i)) out.push_back(i);
  return out;
}

std::string mode_name(uint32_t mask) {
  if (mask == 0) return "clean";
  std::string s;
  for (int i = 0; mask >> i; ++i)
    if (mask & (1u << i)) {
      if (!s.empty()) s += "+";
      s += "t" + std::to_string(i);
    }
  return s;
}

std::string trigger_manifest(const TriggerSet& set) {
  std::ostringstream os;
  for (const TriggerSpec& t : set)
    os << "trigger head_index=" << t.head_index << " key_coordinate=" << t.key_coordinate
       << " grid_row=" << t.grid_row << " grid_col=" << t.grid_col
       << " indicator_slot=" << t.indicator_slot << "\n";
  return os.str();
}

TriggerSet parse_trigger_manifest(const std::string& text) {
  TriggerSet set;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string tag;
    ls >> tag;
    if (tag != "trigger") continue;
    TriggerSpec t;
    std::string kv;
    while (ls >> kv) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) fail("config", "malformed trigger manifest line: " + line);
      const std::string key = kv.substr(0, eq);
      const int val = std::stoi(kv.substr(eq + 1));
      if (key == "head_index") t.head_index = val;
      else if (key == "key_coordinate") t.key_coordinate = val;
      else if (key == "grid_row") t.grid_row = val;
      else if (key == "grid_col") t.grid_col = val;
      else if (key == "indicator_slot") t.indicator_slot = val;
      else fail("config", "unknown trigger manifest key: " + key);
    }
    set.push_back(t);
  }
  return set;
}

}  // namespace vitedit
