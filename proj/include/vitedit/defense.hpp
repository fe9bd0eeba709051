#pragma once

#include "vitedit/metrics.hpp"

namespace vitedit {

// ---------------------------------------------------------------------------
// PatchDrop

struct PatchDropConfig {
  int grid_side = 8;      // drop grid; cells = grid_side^2
  double drop_ratio = 0;  // r; dropped cells M = round(r * cells)
  float fill = 0.0f;      // dataset mean in normalized space
  int trials = 20;
  uint64_t seed = 0;
};

// Zeroes M seeded-uniform cells (without replacement); other pixels untouched.
Image patchdrop(const Image& img, const PatchDropConfig& cfg);

// Pr[Binom(stamped, p_survive) >= m].
double survival_model(double p_survive, int stamped, int m);

struct PatchDropPoint {
  double r = 0;
  double cacc = 0;
  double asr2_measured = 0, asr2_predicted = 0, asr2_se = 0;
  double asr3_measured = 0, asr3_predicted = 0, asr3_se = 0;
};
struct PatchDropCurve {
  std::vector<PatchDropPoint> points;
  double baseline_asr2 = 0, baseline_asr3 = 0;
  std::string to_csv() const;
};

// Robustness curve: measured attack-mode activation under PatchDrop next to
// the binomial survival prediction scaled by the r=0 baseline. Requires each
// trigger cell to lie inside a single drop cell.
PatchDropCurve patchdrop_curve(const Checkpoint& edited, const TriggerSet& triggers, int m,
                               const LabeledDataset& data, const std::vector<double>& r_grid,
                               int grid_side, int trials_per_point, uint64_t seed,
                               int target_class);

// Prediction-instability detector: label flips over seeded drop trials.
struct DetectorScore {
  int flips = 0;
  bool flagged = false;
};
DetectorScore patchdrop_detector(const Model& model, const Image& img,
                                 const PatchDropConfig& cfg, int k_d);
// k_d from the 90th-percentile rule on a clean calibration set.
int detector_threshold(const Model& model, const std::vector<Image>& clean,
                       const PatchDropConfig& cfg);

// ---------------------------------------------------------------------------
// Fine-Pruning (pure pruning sweep, no recovery step)

struct PruneProtocol {
  double batch_fraction = 0.005;  // 0.5% of all fc1 hidden units per batch
  double stop_drop_points = 4.0;  // clean-accuracy budget, percentage points
};

struct PrunePoint {
  double ratio = 0;
  int pruned = 0;
  double cacc = 0;
  double asr = 0;
};

struct PruneSweep {
  std::vector<std::pair<int, int>> ranking;  // (block, neuron), ascending activation
  std::vector<PrunePoint> curve;
  int stop_batch = -1;            // first batch exceeding the budget
  std::vector<int64_t> gate_ranks;  // positions of the two gate neurons in the ranking
  std::string to_csv() const;
};

// Ranks every fc1 hidden unit by mean |fc1 linear output| on the CLS token
// over the probe set (ascending), prunes in batches by zeroing the fc1 row,
// its bias, and the fc2 column, and reports the agreement/ASR trade-off.
PruneSweep fine_prune_sweep(const Checkpoint& edited, const PruneProtocol& protocol,
                            const LabeledDataset& probe, const LabeledDataset& evalset,
                            const InjectionPlan& plan, double max_ratio);

// ---------------------------------------------------------------------------
// Top-1 window blocking with forward-only occlusion localization

struct OcclusionConfig {
  int window_px = 12;
  int stride = 8;
  float fill = 0.0f;
};

struct OcclusionOutcome {
  int row = 0, col = 0;       // window origin, pixels
  int original_pred = 0, new_pred = 0;
};

// Slides the window on the stride grid, scores each position by the drop in
// the current top-class logit when masked, blocks the max-drop window
// (first position wins ties), and re-infers.
OcclusionOutcome occlusion_block(const Model& model, const Image& img,
                                 const OcclusionConfig& cfg);

bool window_hits_trigger(const OcclusionOutcome& win, const OcclusionConfig& cfg,
                         const TriggerSpec& trig, int patch_size);

struct HitMissRow {
  uint32_t mask = 0;
  int n = 0;
  double hit_rate = 0, miss_rate = 0;
  double residual_asr = 0;  // non-target inputs still predicted target after blocking
};
struct HitMissReport {
  std::vector<HitMissRow> rows;
  std::string to_csv() const;
};
HitMissReport hit_miss_stats(const Checkpoint& edited, const TriggerSet& triggers, int m,
                             const LabeledDataset& data, int target_class,
                             const OcclusionConfig& cfg);

}  // namespace vitedit
