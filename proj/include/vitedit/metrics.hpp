#pragma once

#include "vitedit/inject.hpp"

namespace vitedit {

// Desk-scale labeled data: seeded Gaussian-mixture images with fixed
// per-class means; labels are the frozen label-source model's predictions
// on the clean images, so benign accuracy reads as agreement with it.
struct LabeledDataset {
  std::vector<Image> images;
  std::vector<int> labels;
  int num_classes = 0;
};
LabeledDataset make_dataset(const Checkpoint& label_source, int count, uint64_t seed);

struct ModeMetrics {
  uint32_t mask = 0;
  bool is_attack = false;
  int count = 0;      // evaluated inputs (all labels)
  int nontarget = 0;  // inputs whose label differs from the target class
  double cacc = 0;    // agreement with the label, percent
  double asr = 0;     // attack modes: non-target inputs predicted as target, percent
  double tllr = 0;    // benign modes: non-target inputs predicted as target, percent
  double far = 0;     // benign modes: all inputs predicted as target, percent
};

struct EvalReport {
  std::vector<ModeMetrics> modes;
  double benign_cacc = 0, benign_tllr = 0, benign_far = 0, attack_asr = 0;
  int samples = 0;
  std::string to_csv() const;
};

EvalReport evaluate(const Checkpoint& ck, const TriggerSet& triggers, int m,
                    const LabeledDataset& data, int target_class);

// Benign-vs-attack separation of the stored gate state: the block-0 gate
// output x^(1)_CLS[g] and the last-block pre-activation w_g x^(L)_CLS[g] + b_g.
struct MarginHistograms {
  std::vector<double> gate_benign, gate_attack;      // x^(1)_CLS[g]
  std::vector<double> preact_benign, preact_attack;  // w_g x^(L)_CLS[g] + b_g
  double gate_margin = 0;    // min attack - max benign
  double preact_margin = 0;
  std::string to_csv(int bins = 40) const;
};
MarginHistograms margin_histograms(const Checkpoint& ck, const InjectionPlan& plan,
                                   const std::vector<Image>& probes);

// x^(l)_CLS[coord] for l = 1..last_block, one row per input.
MatD depth_trace(const Checkpoint& ck, const std::vector<Image>& inputs, int coord);

// Mann-Whitney rank AUC of xs vs ys, ties counted half. Reflected around
// one half so auc(x,y) and auc(y,x) sum to exactly 1.
double auc_separability(const std::vector<double>& xs, const std::vector<double>& ys);

std::vector<Image> noise_images(const ViTConfig& cfg, int count, uint64_t seed);

}  // namespace vitedit
