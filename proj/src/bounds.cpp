#include "vitedit/bounds.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "vitedit/rng.hpp"

namespace vitedit {

void BoundInputs::validate() const {
  if (b_q <= 0 || b_k <= 0) fail("config", "norm bounds must be positive");
  if (eta <= 0 || eta >= 1) fail("config", "eta must lie in (0,1)");
  if (head_dim <= 0 || tokens < 2) fail("config", "bad head_dim or token count");
  if (lambda <= 0) fail("numeric", "degenerate key column (lambda <= 0)");
}

double logit_gap(const BoundInputs& in) {
  in.validate();
  return (in.alpha * in.alpha * in.q_cls_z * (in.kappa - in.tau) - 2.0 * in.b_q * in.b_k) /
         std::sqrt(static_cast<double>(in.head_dim));
}

double attention_mass_lower_bound(double gamma, int tokens) {
  if (tokens < 2) fail("config", "token count must be at least 2");
  return 1.0 / (1.0 + (tokens - 1) * std::exp(-gamma));
}

MarginChain margin(const BoundInputs& in) {
  MarginChain chain;
  chain.gamma = logit_gap(in);
  chain.a_lb = attention_mass_lower_bound(chain.gamma, in.tokens);
  chain.lambda = in.lambda;
  chain.delta_h = in.lambda * (chain.a_lb * in.kappa - (2.0 - chain.a_lb) * in.tau);
  chain.delta_gate = in.beta * chain.delta_h;
  return chain;
}

namespace {

Image noise_image(const ViTConfig& cfg, Rng& rng) {
  Image img = Image::zero(cfg);
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) img.pixels[i] = rng.normal();
  return img;
}

double quantile_nearest_rank(std::vector<double> v, double q) {
  if (v.empty()) fail("calibration", "empty probe batch");
  std::sort(v.begin(), v.end());
  const auto idx = static_cast<size_t>(
      std::max<int64_t>(0, static_cast<int64_t>(std::ceil(q * v.size())) - 1));
  return v[std::min(idx, v.size() - 1)];
}

}  // namespace

BoundInputs estimate_assumption_inputs(const Checkpoint& stage1_edited,
                                       const InjectionPlan& plan, int trigger_index,
                                       uint64_t probe_seed, int probe_count, double eta) {
  if (!stage1_edited.config) fail("config", "checkpoint has no model configuration");
  const ViTConfig& cfg = *stage1_edited.config;
  if (trigger_index < 0 || trigger_index >= plan.n())
    fail("config", "trigger index out of range");
  if (probe_count < 1) fail("config", "probe batch empty");
  const TriggerSpec& trig = plan.triggers[trigger_index];
  const int dh = cfg.head_dim, T = cfg.tokens(), h = trig.head_index;
  const double alpha = plan.alpha;

  Model model(stage1_edited);
  StampKit kit = make_stamp_kit(stage1_edited, plan.triggers);
  TraceOptions topt;
  topt.qk_block0 = true;

  // Pre-gain convention: the scaled z-coordinate is divided by alpha.
  auto pre_q = [&](const VecF& q, int z) {
    double v = q[h * dh + z];
    return z == trig.key_coordinate ? v / alpha : v;
  };
  auto pre_k = [&](const MatF& k, int tok, int z) {
    double v = k(tok, h * dh + z);
    return z == trig.key_coordinate ? v / alpha : v;
  };

  BoundInputs in;
  in.alpha = alpha;
  in.beta = plan.beta;
  in.head_dim = dh;
  in.tokens = T;
  in.eta = eta;

  Rng rng(probe_seed);
  std::vector<double> max_abs;
  max_abs.reserve(probe_count);
  for (int p = 0; p < probe_count; ++p) {
    ForwardTrace tr;
    model.forward(noise_image(cfg, rng), topt, &tr);
    double q_norm_sq = 0, mx = 0;
    for (int z = 0; z < dh; ++z) {
      const double qv = pre_q(tr.q_cls_block0, z);
      q_norm_sq += qv * qv;
    }
    in.b_q = std::max(in.b_q, std::sqrt(q_norm_sq));
    for (int tok = 0; tok < T; ++tok) {
      double k_norm_sq = 0;
      for (int z = 0; z < dh; ++z) {
        const double kv = pre_k(tr.k_block0, tok, z);
        k_norm_sq += kv * kv;
      }
      in.b_k = std::max(in.b_k, std::sqrt(k_norm_sq));
      mx = std::max(mx, std::abs(pre_k(tr.k_block0, tok, trig.key_coordinate)));
    }
    max_abs.push_back(mx);
    if (p == 0) in.q_cls_z = pre_q(tr.q_cls_block0, trig.key_coordinate);
  }
  in.tau = quantile_nearest_rank(max_abs, 1.0 - eta);

  // kappa: the stamped trigger token's key coordinate (deterministic).
  ForwardTrace tr;
  model.forward(stamp(Image::zero(cfg), kit, {trigger_index}), topt, &tr);
  const int token = 1 + trig.grid_row * cfg.grid() + trig.grid_col;
  in.kappa = pre_k(tr.k_block0, token, trig.key_coordinate);

  // lambda from the original key column; the gain is divided out.
  const HeadSlices hs = head_slices(cfg, h, trig.key_coordinate);
  const double norm_scaled = stage1_edited.at(names::qkv_w(0)).matrix().row(hs.k_row).norm();
  in.lambda = alpha / norm_scaled;
  in.validate();
  return in;
}

EmpiricalMargin empirical_margin(const Checkpoint& stage1_edited, const InjectionPlan& plan,
                                 int trigger_index, const BoundInputs& inputs,
                                 uint64_t pair_seed, int pair_count) {
  const ViTConfig& cfg = *stage1_edited.config;
  const TriggerSpec& trig = plan.triggers[trigger_index];
  const int dh = cfg.head_dim, T = cfg.tokens(), h = trig.head_index;
  const int token = 1 + trig.grid_row * cfg.grid() + trig.grid_col;
  const double alpha = plan.alpha;
  const MarginChain chain = margin(inputs);

  Model model(stage1_edited);
  StampKit kit = make_stamp_kit(stage1_edited, plan.triggers);
  TraceOptions topt;
  topt.qk_block0 = true;
  topt.head_cls = true;

  EmpiricalMargin out;
  Rng rng(pair_seed);
  int violations = 0;
  for (int p = 0; p < pair_count; ++p) {
    const Image clean = noise_image(cfg, rng);
    const Image stamped = stamp(clean, kit, {trigger_index});
    ForwardTrace tc, ts;
    model.forward(clean, topt, &tc);
    model.forward(stamped, topt, &ts);
    ++out.pairs_total;

    // Assumption check: every clean token and every non-trigger stamped
    // token stays within the tau band (pre-gain convention).
    auto k_pre = [&](const ForwardTrace& t, int tok) {
      return std::abs(t.k_block0(tok, h * dh + trig.key_coordinate)) / alpha;
    };
    bool ok = true;
    for (int tok = 0; tok < T && ok; ++tok) {
      if (k_pre(tc, tok) > inputs.tau) ok = false;
      if (tok != token && k_pre(ts, tok) > inputs.tau) ok = false;
    }
    if (!ok) continue;
    ++out.pairs_satisfying;
    const double gap = static_cast<double>(ts.o_cls[0][trig.indicator_slot]) -
                       static_cast<double>(tc.o_cls[0][trig.indicator_slot]);
    out.gaps.push_back(gap);
    if (gap < chain.delta_gate) ++violations;
  }
  out.violation_fraction =
      out.pairs_satisfying ? static_cast<double>(violations) / out.pairs_satisfying : 0.0;
  return out;
}

std::string bound_report(const BoundInputs& in, const MarginChain& chain,
                         const EmpiricalMargin& emp) {
  std::ostringstream os;
  os.precision(9);
  os << "eta " << in.eta << "\n";
  os << "alpha " << in.alpha << "\n";
  os << "beta " << in.beta << "\n";
  os << "b_q " << in.b_q << "\n";
  os << "b_k " << in.b_k << "\n";
  os << "kappa " << in.kappa << "\n";
  os << "tau " << in.tau << "\n";
  os << "q_cls_z " << in.q_cls_z << "\n";
  os << "gamma " << chain.gamma << "\n";
  os << "attention_mass_lb " << chain.a_lb << "\n";
  os << "lambda " << chain.lambda << "\n";
  os << "delta_h " << chain.delta_h << "\n";
  os << "delta_gate " << chain.delta_gate << "\n";
  os << "pairs_total " << emp.pairs_total << "\n";
  os << "pairs_satisfying " << emp.pairs_satisfying << "\n";
  os << "violation_fraction " << emp.violation_fraction << "\n";
  if (!emp.gaps.empty()) {
    std::vector<double> sorted = emp.gaps;
    std::sort(sorted.begin(), sorted.end());
    auto q = [&](double f) {
      return sorted[static_cast<size_t>(f * (sorted.size() - 1))];
    };
    os << "empirical_gap_min " << sorted.front() << "\n";
    os << "empirical_gap_p01 " << q(0.01) << "\n";
    os << "empirical_gap_p50 " << q(0.50) << "\n";
    os << "empirical_gap_max " << sorted.back() << "\n";
  }
  return os.str();
}

}  // namespace vitedit
