#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "vitedit/trigger.hpp"

namespace vitedit {

enum class HighwayMode { hard_zero, min_norm };
enum class CalibrationMode { paper_constants, autocal };

// Everything the rewrite needs: trigger set, reserved coordinates, gains,
// gate parameters, hijacked neuron indices, and calibration policy.
struct InjectionPlan {
  TriggerSet triggers;
  int m = 2;
  int target_class = 1;
  int gate_coord = 0;  // [CLS] coordinate g carrying the aggregated gate state

  float alpha = 3.0f;  // Q/K gain on the designated key coordinate
  float beta = 1.5f;   // attention-projection routing gain
  float gamma = 90.0f; // last-block injection strength

  // Boolean-gate and last-gate parameters; autocal overwrites these.
  std::vector<float> boolean_w;
  float boolean_b = -10.0f;
  float last_w = 8.0f;
  float last_b = -2.0f;

  int gate_neuron_block0 = 3;
  int gate_neuron_last = 5;
  HighwayMode highway = HighwayMode::min_norm;
  CalibrationMode calibration = CalibrationMode::autocal;

  // Probe budget for auto calibration; all probe noise flows from calib_seed.
  int calib_probes = 256;
  int attack_probes = 64;
  int carrier_probes = 128;
  int attack_mode_probes = 32;
  uint64_t calib_seed = 1;

  int n() const { return static_cast<int>(triggers.size()); }
  void validate(const ViTConfig& cfg) const;
};

struct PlanOptions {
  int n = 3;
  int m = 2;
  int target_class = 1;
  uint64_t seed = 7;
  int probes = 256;
  // Bound-margin target: the solved Q/K gain aims the analytic evidence
  // margin at this fraction of the full kappa-tau separation.
  double bound_margin = 0.3;
  HighwayMode highway = HighwayMode::min_norm;
};

// Weight-only plan construction. `plan_auto` scans key coordinates and
// reserved [CLS] coordinates with a seeded probe batch and solves the Q/K
// gain from the analytic margin; `plan_paper` uses the fixed constants
// (alpha 3.0, beta 1.5, gamma 90, w_i 3.0, b -10, w_g 8, b_g -2) and fixed
// indices, with no probe forwards.
InjectionPlan plan_auto(const Checkpoint& ck, const PlanOptions& opts);
InjectionPlan plan_paper(const Checkpoint& ck, int n, int m, int target_class);

struct SliceEdit {
  std::string name;
  double norm_before = 0;
  double norm_after = 0;
};

struct CalibrationResult {
  std::vector<float> boolean_w;
  float boolean_b = 0;
  float last_w = 0;
  float last_b = 0;
  // Measured design points (post-LN2 readings) kept for reports.
  std::vector<double> slot_benign_point, slot_attack_point, slot_v_hi;
  double carrier_benign_point = 0, carrier_attack_point = 0;
  bool from_paper_constants = false;
};

struct InjectionReport {
  int64_t edited_count = 0;
  int64_t total_params = 0;
  double edited_fraction = 0;
  std::vector<SliceEdit> stage_edits[4];
  CalibrationResult calibration;
  double elapsed_seconds = 0;
  std::string to_text() const;
};

struct InjectOptions {
  bool stage1 = true, stage2 = true, stage3 = true, stage4 = true;
  int payload_class_override = -1;  // wrong-payload ablation
};

// The four rewrite stages; each edits the checkpoint in place and records
// the touched slices.
void stage1_evidence(Checkpoint& ck, const InjectionPlan& plan,
                     std::vector<SliceEdit>* edits = nullptr);
void stage2_boolean_gate(Checkpoint& ck, const InjectionPlan& plan,
                         const CalibrationResult& calib,
                         std::vector<SliceEdit>* edits = nullptr);
void stage3_highway(Checkpoint& ck, const InjectionPlan& plan,
                    std::vector<SliceEdit>* edits = nullptr);
void stage4_conditional_injection(Checkpoint& ck, const InjectionPlan& plan,
                                  const CalibrationResult& calib, int payload_class,
                                  std::vector<SliceEdit>* edits = nullptr);

// Gate calibration on a stage-1-edited checkpoint. paper_constants echoes the
// fixed values; autocal measures the post-LN2 indicator and carrier readings
// on seeded probes and solves the two-point rule (benign design point to -5,
// attack design point to +3). Throws Error("calibration") when the measured
// distributions do not separate.
CalibrationResult calibrate(const Checkpoint& stage1_edited, const InjectionPlan& plan);

// Two-point solver on raw design points, exposed for direct testing.
// Returns weights w_i and bias b so that the worst benign subset maps to -5
// and the worst attack subset to +3.
struct GateSolve {
  std::vector<float> w;
  float b;
};
GateSolve solve_boolean_gate(const std::vector<double>& benign_lo,
                             const std::vector<double>& benign_hi,
                             const std::vector<double>& attack_lo,
                             const std::vector<double>& attack_hi, int m);

inline const char* kInjectionMarker = "__dflogit__";
inline const char* kBaselineMarker = "__dfba__";

// Full pipeline: calibrate, then stages 1..4 on a private copy; the input
// checkpoint is never mutated. Re-injection is rejected via the marker
// tensor. Ablation flags skip a stage's edits while keeping the constants
// calibrated for the full pipeline.
std::pair<Checkpoint, InjectionReport> inject(const Checkpoint& ck,
                                              const InjectionPlan& plan,
                                              const InjectOptions& opts = {});

// Plan manifest (text, one field per line) for reproducible runs.
std::string plan_manifest(const InjectionPlan& plan);
InjectionPlan parse_plan_manifest(const std::string& text);

}  // namespace vitedit
