#pragma once

#include "vitedit/inject.hpp"

namespace vitedit {

// Weight-only margin calculator inputs. All key/query quantities are in the
// pre-gain convention (the z-coordinate scaling is divided out), so the gain
// enters only through the explicit alpha^2 term of the logit gap.
struct BoundInputs {
  double alpha = 1;
  double beta = 1;
  int head_dim = 0;
  int tokens = 0;
  double b_q = 0;      // CLS query norm bound
  double b_k = 0;      // token key norm bound
  double kappa = 0;    // stamped trigger key activation on coordinate z
  double tau = 0;      // benign (1-eta)-quantile of max |k_j[z]|
  double eta = 0.01;
  double q_cls_z = 0;  // CLS query coordinate z
  double lambda = 0;   // 1 / |W_K e_z| on the original weights

  void validate() const;
};

// Gamma(alpha) = (alpha^2 q_CLS[z] (kappa - tau) - 2 B_Q B_K) / sqrt(d_h).
// May be negative; reported as-is.
double logit_gap(const BoundInputs& in);

// A_t^LB = 1 / (1 + (T-1) e^(-Gamma)).
double attention_mass_lower_bound(double gamma, int tokens);

struct MarginChain {
  double gamma = 0;       // logit gap
  double a_lb = 0;        // attention-mass lower bound
  double lambda = 0;
  double delta_h = 0;     // evidence margin at H_CLS[z]
  double delta_gate = 0;  // beta * delta_h
};
MarginChain margin(const BoundInputs& in);

// Measures the assumption inputs on a stage-1-edited checkpoint with a
// seeded probe batch. The z-coordinate gain is divided out so the returned
// numbers are in the pre-gain convention expected by logit_gap.
BoundInputs estimate_assumption_inputs(const Checkpoint& stage1_edited,
                                       const InjectionPlan& plan, int trigger_index,
                                       uint64_t probe_seed, int probe_count, double eta);

// Empirical counterpart of the margin statement: per probe pair, the gap of
// the written indicator O_CLS[g_i] between the i-stamped and clean input,
// restricted to pairs where the measured assumptions hold at level eta.
struct EmpiricalMargin {
  std::vector<double> gaps;       // one per assumption-satisfying pair
  int pairs_total = 0;
  int pairs_satisfying = 0;
  double violation_fraction = 0;  // gaps below the analytic bound
};
EmpiricalMargin empirical_margin(const Checkpoint& stage1_edited, const InjectionPlan& plan,
                                 int trigger_index, const BoundInputs& inputs,
                                 uint64_t pair_seed, int pair_count);

// Text table for the CLI `bound` command.
std::string bound_report(const BoundInputs& in, const MarginChain& chain,
                         const EmpiricalMargin& emp);

}  // namespace vitedit
