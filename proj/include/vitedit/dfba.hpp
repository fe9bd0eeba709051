#pragma once

#include "vitedit/metrics.hpp"

namespace vitedit {

// CNN-style single-path baseline, ported onto the ViT checkpoint.
struct DfbaPlan {
  int switch_channel = -1;  // -1: pick by select_switch
  int box = 0;              // decoupling box side; 0: half the patch side
  float path_gain = 2.0f;
  float head_scale = 3.0f;
  int grid_row = -1, grid_col = -1;  // stamp cell; default bottom-left
  int target_class = 1;
  int path_neuron = -1;  // fc1 hidden index reserved in every block; -1: last
};

// Embedding output channel with the largest row norm; lowest index on ties.
int select_switch(const Checkpoint& ck);

// Pixel-space {0,1} trigger on the decoupling box; stamping replaces only
// the box region of the stamp cell.
struct DfbaTrigger {
  int grid_row = 0, grid_col = 0;
  int box = 0, box_offset = 0;
  VecF values;  // 3 * box * box, (c, y, x)
};

std::pair<Checkpoint, DfbaTrigger> dfba_inject(const Checkpoint& ck, const DfbaPlan& plan);

Image dfba_stamp(const Image& img, const ViTConfig& cfg, const DfbaTrigger& trigger);

struct DfbaDiagnosis {
  std::vector<double> auc_baseline;  // per block, switch coordinate
  std::vector<double> auc_gated;     // per block, gate coordinate
  double baseline_logit_clean = 0, baseline_logit_trigger = 0;
  double gated_logit_clean = 0, gated_logit_trigger = 0;
  double baseline_cacc = 0, baseline_asr = 0;
  double gated_cacc = 0, gated_asr = 0;
  std::string to_csv() const;
};

// Side-by-side depth diagnosis of the failing single-path baseline and the
// logic-gated attack on the same original model.
DfbaDiagnosis dfba_diagnose(const Checkpoint& original, const Checkpoint& dfba_edited,
                            const DfbaTrigger& trigger, int switch_channel,
                            const Checkpoint& gated_edited, const InjectionPlan& plan,
                            const LabeledDataset& data);

}  // namespace vitedit
