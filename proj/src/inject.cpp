#include "vitedit/inject.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <numeric>
#include <sstream>

#include "vitedit/rng.hpp"

namespace vitedit {

namespace {

constexpr double kBenignTarget = -5.0;
constexpr double kAttackTarget = 3.0;

Image noise_image(const ViTConfig& cfg, Rng& rng) {
  Image img = Image::zero(cfg);
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i) img.pixels[i] = rng.normal();
  return img;
}

std::vector<Image> noise_batch(const ViTConfig& cfg, uint64_t seed, int count) {
  Rng rng(seed);
  std::vector<Image> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(noise_image(cfg, rng));
  return out;
}

struct MeanVar {
  double sum = 0, sumsq = 0;
  int64_t n = 0;
  void add(double x) {
    sum += x;
    sumsq += x * x;
    ++n;
  }
  double mean() const { return n ? sum / n : 0.0; }
  double sd() const {
    if (n < 2) return 0.0;
    const double m = mean();
    return std::sqrt(std::max(0.0, sumsq / n - m * m));
  }
};

double nearest_rank_quantile(std::vector<double> v, double q) {
  if (v.empty()) fail("calibration", "empty sample for quantile");
  std::sort(v.begin(), v.end());
  const auto idx = static_cast<size_t>(
      std::max<int64_t>(0, static_cast<int64_t>(std::ceil(q * v.size())) - 1));
  return v[std::min(idx, v.size() - 1)];
}

void record(std::vector<SliceEdit>* edits, const std::string& name, double before,
            double after) {
  if (edits) edits->push_back({name, before, after});
}

std::vector<std::pair<int, int>> default_cells(int grid, int n) {
  // Corner layout first (bottom-left, bottom-right, top), then raster fill.
  std::vector<std::pair<int, int>> cells = {
      {grid - 1, 0}, {grid - 1, grid - 1}, {0, 1}};
  for (int r = 0; r < grid && static_cast<int>(cells.size()) < n; ++r)
    for (int c = 0; c < grid && static_cast<int>(cells.size()) < n; ++c) {
      const std::pair<int, int> cell{r, c};
      if (std::find(cells.begin(), cells.end(), cell) == cells.end())
        cells.push_back(cell);
    }
  cells.resize(n);
  return cells;
}

}  // namespace

void InjectionPlan::validate(const ViTConfig& cfg) const {
  cfg.validate();
  if (triggers.empty()) fail("config", "plan has no triggers");
  validate_trigger_set(triggers, cfg);
  if (m < 1 || m > n()) fail("config", "threshold m must satisfy 1 <= m <= n");
  if (target_class < 0 || target_class >= cfg.num_classes)
    fail("config", "target class out of range");
  if (gate_coord < 0 || gate_coord >= cfg.embed_dim)
    fail("config", "gate coordinate out of range");
  for (const TriggerSpec& t : triggers)
    if (t.indicator_slot == gate_coord)
      fail("config", "gate coordinate must differ from every indicator slot");
  if (!(alpha > 1.0f)) fail("config", "alpha must exceed 1");
  if (!(beta > 0.0f) || !(gamma > 0.0f)) fail("config", "beta and gamma must be positive");
  if (gate_neuron_block0 < 0 || gate_neuron_block0 >= cfg.mlp_hidden ||
      gate_neuron_last < 0 || gate_neuron_last >= cfg.mlp_hidden)
    fail("config", "gate neuron index out of range");
  if (!boolean_w.empty() && static_cast<int>(boolean_w.size()) != n())
    fail("config", "boolean gate weight count must match trigger count");
}

// ---------------------------------------------------------------------------
// Stages

void stage1_evidence(Checkpoint& ck, const InjectionPlan& plan,
                     std::vector<SliceEdit>* edits) {
  const ViTConfig& cfg = *ck.config;
  auto qkv = ck.at(names::qkv_w(0)).matrix();
  auto& qkv_b = ck.at(names::qkv_b(0)).vec();
  auto proj = ck.at(names::proj_w(0)).matrix();
  auto& proj_b = ck.at(names::proj_b(0)).vec();
  for (const TriggerSpec& t : plan.triggers) {
    const HeadSlices hs = head_slices(cfg, t.head_index, t.key_coordinate);
    const VecF w_pre = qkv.row(hs.k_row);
    const double norm = w_pre.norm();
    if (norm < 1e-8)
      fail("numeric", "degenerate key column: |W_K e_z| = " + std::to_string(norm) +
                          " at head " + std::to_string(t.head_index) + ", z " +
                          std::to_string(t.key_coordinate));
    const std::string where = " (head " + std::to_string(t.head_index) + ")";
    record(edits, "block0 qkv q-row" + where, qkv.row(hs.q_row).norm(),
           plan.alpha * qkv.row(hs.q_row).norm());
    qkv.row(hs.q_row) *= plan.alpha;
    qkv_b[hs.q_row] *= plan.alpha;
    record(edits, "block0 qkv k-row" + where, norm, plan.alpha * norm);
    qkv.row(hs.k_row) *= plan.alpha;
    qkv_b[hs.k_row] *= plan.alpha;
    record(edits, "block0 qkv v-row" + where, qkv.row(hs.v_row).norm(), 1.0);
    qkv.row(hs.v_row) = (w_pre / static_cast<float>(norm)).transpose();

    const double before = proj.row(t.indicator_slot).norm();
    proj.row(t.indicator_slot).setZero();
    proj(t.indicator_slot, hs.o_col_begin + t.key_coordinate) = plan.beta;
    proj_b[t.indicator_slot] = 0.0f;
    record(edits, "block0 proj row g_" + std::to_string(t.indicator_slot), before,
           plan.beta);
  }
}

void stage2_boolean_gate(Checkpoint& ck, const InjectionPlan& plan,
                         const CalibrationResult& calib, std::vector<SliceEdit>* edits) {
  if (static_cast<int>(calib.boolean_w.size()) != plan.n())
    fail("config", "boolean gate weights do not match trigger count");
  if (ck.has(kBaselineMarker)) {
    const auto& marker = ck.at(kBaselineMarker).vec();
    if (marker.size() >= 2 && static_cast<int>(marker[1]) == plan.gate_neuron_block0)
      fail("config", "gate neuron collides with baseline path reservation");
  }
  auto fc1 = ck.at(names::fc1_w(0)).matrix();
  auto& fc1_b = ck.at(names::fc1_b(0)).vec();
  auto fc2 = ck.at(names::fc2_w(0)).matrix();
  auto& fc2_b = ck.at(names::fc2_b(0)).vec();
  const int j = plan.gate_neuron_block0;

  record(edits, "block0 fc1 row " + std::to_string(j), fc1.row(j).norm(), 0.0);
  fc1.row(j).setZero();
  for (int i = 0; i < plan.n(); ++i)
    fc1(j, plan.triggers[i].indicator_slot) = calib.boolean_w[i];
  fc1_b[j] = calib.boolean_b;
  record(edits, "block0 fc2 col " + std::to_string(j), fc2.col(j).norm(), 1.0);
  fc2.col(j).setZero();
  fc2(plan.gate_coord, j) = 1.0f;
  fc2_b[plan.gate_coord] = 0.0f;
}

void stage3_highway(Checkpoint& ck, const InjectionPlan& plan,
                    std::vector<SliceEdit>* edits) {
  const ViTConfig& cfg = *ck.config;
  const int L = cfg.last_block();
  if (L - 1 < 1) fail("config", "no intermediate blocks for the highway");
  const int g = plan.gate_coord;
  for (int b = 1; b <= L - 1; ++b) {
    auto proj = ck.at(names::proj_w(b)).matrix();
    auto& proj_b = ck.at(names::proj_b(b)).vec();
    auto fc2 = ck.at(names::fc2_w(b)).matrix();
    auto& fc2_b = ck.at(names::fc2_b(b)).vec();
    const double pb = proj.row(g).norm(), fb = fc2.row(g).norm();
    if (plan.highway == HighwayMode::hard_zero) {
      proj.row(g).setZero();
      proj_b[g] = 0.0f;
      fc2.row(g).setZero();
      fc2_b[g] = 0.0f;
    } else {
      // Replace the write-back slice with the minimum-norm row of the same
      // matrix; weight distribution stays in the native low-norm range.
      auto min_row = [](Eigen::Map<MatF> mat) {
        Eigen::Index best = 0;
        double bestn = mat.row(0).norm();
        for (Eigen::Index r = 1; r < mat.rows(); ++r) {
          const double nn = mat.row(r).norm();
          if (nn < bestn) {
            bestn = nn;
            best = r;
          }
        }
        return best;
      };
      proj.row(g) = proj.row(min_row(proj)).eval();
      fc2.row(g) = fc2.row(min_row(fc2)).eval();
    }
    record(edits, "block" + std::to_string(b) + " proj row g", pb, proj.row(g).norm());
    record(edits, "block" + std::to_string(b) + " fc2 row g", fb, fc2.row(g).norm());
  }
}

void stage4_conditional_injection(Checkpoint& ck, const InjectionPlan& plan,
                                  const CalibrationResult& calib, int payload_class,
                                  std::vector<SliceEdit>* edits) {
  const ViTConfig& cfg = *ck.config;
  const int L = cfg.last_block();
  if (payload_class < 0 || payload_class >= cfg.num_classes)
    fail("config", "payload class out of range");
  const VecF wrow = ck.at(names::head_w).matrix().row(payload_class);
  const double norm = wrow.norm();
  if (norm < 1e-8) fail("numeric", "degenerate classifier row for target class");
  const VecF v_dir = wrow / static_cast<float>(norm);

  auto fc1 = ck.at(names::fc1_w(L)).matrix();
  auto& fc1_b = ck.at(names::fc1_b(L)).vec();
  auto fc2 = ck.at(names::fc2_w(L)).matrix();
  const int j = plan.gate_neuron_last;
  record(edits, "last fc1 row " + std::to_string(j), fc1.row(j).norm(),
         std::abs(calib.last_w));
  fc1.row(j).setZero();
  fc1(j, plan.gate_coord) = calib.last_w;
  fc1_b[j] = calib.last_b;
  record(edits, "last fc2 col " + std::to_string(j), fc2.col(j).norm(), plan.gamma);
  fc2.col(j) = plan.gamma * v_dir;
}

// ---------------------------------------------------------------------------
// Calibration

GateSolve solve_boolean_gate(const std::vector<double>& benign_lo,
                             const std::vector<double>& benign_hi,
                             const std::vector<double>& attack_lo,
                             const std::vector<double>& attack_hi, int m) {
  const int n = static_cast<int>(benign_lo.size());
  if (m < 1 || m > n) fail("config", "threshold m out of range");
  std::vector<double> u(n), a_lo(n), a_hi(n), b_lo(n), b_hi(n);
  for (int i = 0; i < n; ++i) {
    const double gap = attack_lo[i] - benign_hi[i];
    if (!(gap > 0))
      fail("calibration",
           "inseparable indicator slot " + std::to_string(i) +
               ": attack point " + std::to_string(attack_lo[i]) +
               " <= benign point " + std::to_string(benign_hi[i]));
    u[i] = 2.0 / gap;
    a_lo[i] = u[i] * attack_lo[i];
    a_hi[i] = u[i] * attack_hi[i];
    b_lo[i] = u[i] * benign_lo[i];
    b_hi[i] = u[i] * benign_hi[i];
  }
  double ben_max = -1e300, att_min = 1e300;
  for (uint32_t mask = 0; mask < (1u << n); ++mask) {
    double hi = 0, lo = 0;
    for (int i = 0; i < n; ++i) {
      const bool in = mask & (1u << i);
      hi += in ? a_hi[i] : b_hi[i];
      lo += in ? a_lo[i] : b_lo[i];
    }
    if (std::popcount(mask) < static_cast<int>(m)) ben_max = std::max(ben_max, hi);
    else att_min = std::min(att_min, lo);
  }
  if (!(att_min > ben_max))
    fail("calibration", "inseparable gate design points: worst attack sum " +
                            std::to_string(att_min) + " <= worst benign sum " +
                            std::to_string(ben_max));
  const double w = (kAttackTarget - kBenignTarget) / (att_min - ben_max);
  const double b = kBenignTarget - w * ben_max;
  GateSolve out;
  out.b = static_cast<float>(b);
  for (int i = 0; i < n; ++i) out.w.push_back(static_cast<float>(w * u[i]));
  return out;
}

CalibrationResult calibrate(const Checkpoint& stage1_edited, const InjectionPlan& plan) {
  const ViTConfig& cfg = *stage1_edited.config;
  plan.validate(cfg);
  CalibrationResult out;
  if (plan.calibration == CalibrationMode::paper_constants) {
    out.boolean_w = plan.boolean_w.empty()
                        ? std::vector<float>(plan.n(), 3.0f)
                        : plan.boolean_w;
    out.boolean_b = plan.boolean_b;
    out.last_w = plan.last_w;
    out.last_b = plan.last_b;
    out.from_paper_constants = true;
    return out;
  }

  const int n = plan.n(), L = cfg.last_block();
  Model model(stage1_edited);
  StampKit kit = make_stamp_kit(stage1_edited, plan.triggers);
  std::vector<Image> probes = noise_batch(cfg, plan.calib_seed, plan.calib_probes);
  TraceOptions topt;
  topt.ln2_cls = true;

  // Benign indicator statistics from clean probes.
  std::vector<MeanVar> slot_benign(n);
  for (const Image& img : probes) {
    ForwardTrace tr;
    model.forward(img, topt, &tr);
    for (int i = 0; i < n; ++i)
      slot_benign[i].add(tr.ln2_cls[0][plan.triggers[i].indicator_slot]);
  }
  // Attack-side indicator value: the constructed trigger alone on the empty
  // input, plus the spread seen when stamping it onto probes.
  std::vector<double> v_hi(n);
  std::vector<MeanVar> slot_attack(n);
  const Image empty = Image::zero(cfg);
  for (int i = 0; i < n; ++i) {
    ForwardTrace tr;
    model.forward(stamp(empty, kit, {i}), topt, &tr);
    v_hi[i] = tr.ln2_cls[0][plan.triggers[i].indicator_slot];
    for (int p = 0; p < std::min<int>(plan.attack_probes, probes.size()); ++p) {
      ForwardTrace ts;
      model.forward(stamp(probes[p], kit, {i}), topt, &ts);
      slot_attack[i].add(ts.ln2_cls[0][plan.triggers[i].indicator_slot]);
    }
  }
  std::vector<double> ben_lo(n), ben_hi(n), att_lo(n), att_hi(n);
  for (int i = 0; i < n; ++i) {
    const double sb = slot_benign[i].sd(), sa = std::max(slot_attack[i].sd(), sb);
    ben_lo[i] = slot_benign[i].mean() - 3 * sb;
    ben_hi[i] = slot_benign[i].mean() + 3 * sb;
    att_lo[i] = std::min(v_hi[i], slot_attack[i].mean()) - 3 * sa;
    att_hi[i] = std::max(v_hi[i], slot_attack[i].mean()) + 3 * sa;
  }
  GateSolve gate = solve_boolean_gate(ben_lo, ben_hi, att_lo, att_hi, plan.m);
  out.boolean_w = gate.w;
  out.boolean_b = gate.b;
  out.slot_benign_point = ben_hi;
  out.slot_attack_point = att_lo;
  out.slot_v_hi = v_hi;

  // Carrier statistics need the gate and highway in place.
  Checkpoint scratch = stage1_edited;
  stage2_boolean_gate(scratch, plan, out);
  stage3_highway(scratch, plan);
  Model carrier_model(scratch);

  MeanVar carrier_benign;
  for (int p = 0; p < std::min<int>(plan.carrier_probes, probes.size()); ++p) {
    ForwardTrace tr;
    carrier_model.forward(probes[p], topt, &tr);
    carrier_benign.add(tr.ln2_cls[L][plan.gate_coord]);
  }
  double benign_point = carrier_benign.mean() + 3 * carrier_benign.sd();
  for (int i = 0; i < n; ++i) {
    ForwardTrace tr;
    carrier_model.forward(stamp(empty, kit, {i}), topt, &tr);
    benign_point =
        std::max(benign_point, tr.ln2_cls[L][plan.gate_coord] + 3 * carrier_benign.sd());
  }
  double attack_point = 1e300;
  for (const Mode& mode : enumerate_modes(n, plan.m)) {
    if (!mode.is_attack) continue;
    MeanVar mv;
    for (int p = 0; p < std::min<int>(plan.attack_mode_probes, probes.size()); ++p) {
      ForwardTrace tr;
      carrier_model.forward(stamp_mask(probes[p], kit, mode.mask), topt, &tr);
      mv.add(tr.ln2_cls[L][plan.gate_coord]);
    }
    attack_point = std::min(attack_point, mv.mean() - 3 * mv.sd());
  }
  if (!(attack_point > benign_point))
    fail("calibration", "inseparable carrier readings: attack point " +
                            std::to_string(attack_point) + " <= benign point " +
                            std::to_string(benign_point));
  out.last_w = static_cast<float>((kAttackTarget - kBenignTarget) /
                                  (attack_point - benign_point));
  out.last_b = static_cast<float>(kBenignTarget - out.last_w * benign_point);
  out.carrier_benign_point = benign_point;
  out.carrier_attack_point = attack_point;
  return out;
}

// ---------------------------------------------------------------------------
// Plan construction

InjectionPlan plan_paper(const Checkpoint& ck, int n, int m, int target_class) {
  if (!ck.config) fail("config", "checkpoint has no model configuration");
  const ViTConfig& cfg = *ck.config;
  cfg.validate();
  if (n < 1 || n > cfg.num_heads * cfg.head_dim) fail("config", "bad trigger count");

  // Fixed non-overlapping indices; gains and gate constants verbatim.
  Model model(ck);
  TraceOptions topt;
  topt.qk_block0 = true;
  ForwardTrace tr;
  model.forward(Image::zero(cfg), topt, &tr);

  InjectionPlan plan;
  plan.m = m;
  plan.target_class = target_class;
  plan.calibration = CalibrationMode::paper_constants;
  plan.alpha = 3.0f;
  plan.beta = 1.5f;
  plan.gamma = 90.0f;
  plan.boolean_w.assign(n, 3.0f);
  plan.boolean_b = -10.0f;
  plan.last_w = 8.0f;
  plan.last_b = -2.0f;
  plan.gate_coord = cfg.embed_dim - 1;
  const auto cells = default_cells(cfg.grid(), n);
  for (int i = 0; i < n; ++i) {
    TriggerSpec t;
    t.head_index = i % cfg.num_heads;
    // Deterministic weight-only choice: key coordinate with the largest
    // CLS query response on this head.
    const int base = t.head_index * cfg.head_dim;
    int best = 0;
    for (int z = 1; z < cfg.head_dim; ++z)
      if (tr.q_cls_block0[base + z] > tr.q_cls_block0[base + best]) best = z;
    t.key_coordinate = best;
    t.grid_row = cells[i].first;
    t.grid_col = cells[i].second;
    t.indicator_slot = cfg.embed_dim - 2 - i;
    plan.triggers.push_back(t);
  }
  plan.validate(cfg);
  return plan;
}

InjectionPlan plan_auto(const Checkpoint& ck, const PlanOptions& opts) {
  if (!ck.config) fail("config", "checkpoint has no model configuration");
  const ViTConfig& cfg = *ck.config;
  cfg.validate();
  const int n = opts.n, D = cfg.embed_dim, T = cfg.tokens(), dh = cfg.head_dim;
  if (n < 1) fail("config", "bad trigger count");

  Model model(ck);
  TraceOptions topt;
  topt.qk_block0 = true;
  topt.ln2_cls = true;

  // One probe pass: benign key statistics per (head, z), CLS activation
  // ranking for reserved coordinates, and norm bounds.
  std::vector<Image> probes = noise_batch(cfg, opts.seed, opts.probes);
  std::vector<std::vector<double>> max_abs_k(cfg.num_heads * dh);
  VecD slot_activity = VecD::Zero(D);
  std::vector<double> b_q(cfg.num_heads, 0.0), b_k(cfg.num_heads, 0.0);
  VecF q_cls;
  for (const Image& img : probes) {
    ForwardTrace tr;
    model.forward(img, topt, &tr);
    q_cls = tr.q_cls_block0;
    for (int h = 0; h < cfg.num_heads; ++h) {
      b_q[h] = std::max(b_q[h], (double)tr.q_cls_block0.segment(h * dh, dh).norm());
      for (int z = 0; z < dh; ++z) {
        double mx = 0;
        for (int t = 0; t < T; ++t)
          mx = std::max(mx, std::abs((double)tr.k_block0(t, h * dh + z)));
        max_abs_k[h * dh + z].push_back(mx);
      }
      for (int t = 0; t < T; ++t)
        b_k[h] = std::max(b_k[h], (double)tr.k_block0.row(t).segment(h * dh, dh).norm());
    }
    for (int d = 0; d < D; ++d) slot_activity[d] += std::abs(tr.ln2_cls[0][d]);
  }
  slot_activity /= static_cast<double>(probes.size());

  // Reserved coordinates: the least-active post-LN2 CLS coordinates; the
  // quietest one carries the gate state.
  std::vector<int> order(D);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](int a, int b) { return slot_activity[a] < slot_activity[b]; });

  InjectionPlan plan;
  plan.m = opts.m;
  plan.target_class = opts.target_class;
  plan.highway = opts.highway;
  plan.calibration = CalibrationMode::autocal;
  plan.calib_seed = opts.seed + 1;
  plan.gate_coord = order[0];

  const auto cells = default_cells(cfg.grid(), n);
  const auto ln1_w = ck.at(names::ln1_w(0)).vec();
  const auto ln1_b = ck.at(names::ln1_b(0)).vec();
  const auto pos = ck.at(names::pos_embed).matrix();
  const auto embed_b = ck.at(names::patch_b).vec();
  const auto embed = ck.at(names::patch_w).matrix();
  const auto qkv0 = ck.at(names::qkv_w(0)).matrix();
  const auto qkv0_b = ck.at(names::qkv_b(0)).vec();

  double alpha_sq_needed = 0.0;
  std::vector<std::vector<bool>> taken(cfg.num_heads, std::vector<bool>(dh, false));
  for (int i = 0; i < n; ++i) {
    TriggerSpec t;
    t.head_index = i % cfg.num_heads;
    t.grid_row = cells[i].first;
    t.grid_col = cells[i].second;
    t.indicator_slot = order[1 + i];
    const int h = t.head_index;
    const int token = 1 + t.grid_row * cfg.grid() + t.grid_col;

    double best_cost = 1e300;
    int best_z = -1;
    double best_need = 0;
    for (int z = 0; z < dh; ++z) {
      if (taken[h][z]) continue;
      const double qz = q_cls[h * dh + z];
      if (qz <= 0) continue;
      const HeadSlices hs = head_slices(cfg, h, z);
      TriggerSpec cand = t;
      cand.key_coordinate = z;
      const VecF delta = construct_trigger(ck, cand);
      VecF token_pre = embed * delta + embed_b + pos.row(token).transpose();
      MatF row(1, D);
      row.row(0) = token_pre.transpose();
      MatF u = layer_norm(row, ln1_w, ln1_b);
      const double kappa =
          u.row(0).cast<double>().dot(qkv0.row(hs.k_row).cast<double>()) + qkv0_b[hs.k_row];
      const double tau = nearest_rank_quantile(max_abs_k[h * dh + z], 0.99);
      if (kappa <= tau) continue;
      // Aim the attention-mass lower bound so the analytic evidence margin
      // lands at opts.bound_margin of the full kappa-tau separation.
      const double a_star =
          (2.0 * tau + opts.bound_margin * (kappa - tau)) / (kappa + tau);
      const double gamma_star = std::log((T - 1) * a_star / (1.0 - a_star));
      const double need =
          (std::sqrt((double)dh) * std::max(gamma_star, 0.0) + 2.0 * b_q[h] * b_k[h]) /
          (qz * (kappa - tau));
      if (need < best_cost) {
        best_cost = need;
        best_z = z;
        best_need = need;
      }
    }
    if (best_z < 0)
      fail("calibration", "no feasible key coordinate on head " + std::to_string(h) +
                              ": every candidate lacks separation");
    t.key_coordinate = best_z;
    taken[h][best_z] = true;
    alpha_sq_needed = std::max(alpha_sq_needed, best_need);
    plan.triggers.push_back(t);
  }
  plan.alpha = static_cast<float>(std::max(1.5, std::sqrt(alpha_sq_needed)));
  plan.validate(cfg);
  return plan;
}

// ---------------------------------------------------------------------------
// Full pipeline

std::pair<Checkpoint, InjectionReport> inject(const Checkpoint& ck,
                                              const InjectionPlan& plan,
                                              const InjectOptions& opts) {
  if (!ck.config) fail("config", "checkpoint has no model configuration");
  plan.validate(*ck.config);
  if (ck.has(kInjectionMarker))
    fail("config", "checkpoint already carries an injection (marker tensor present)");
  const auto t0 = std::chrono::steady_clock::now();

  InjectionReport report;
  // Constants are always calibrated against the full pipeline so ablations
  // only remove a stage's edits.
  Checkpoint staged = ck;
  stage1_evidence(staged, plan);
  report.calibration = calibrate(staged, plan);

  Checkpoint out = ck;
  if (opts.stage1) stage1_evidence(out, plan, &report.stage_edits[0]);
  if (opts.stage2) stage2_boolean_gate(out, plan, report.calibration, &report.stage_edits[1]);
  if (opts.stage3) stage3_highway(out, plan, &report.stage_edits[2]);
  if (opts.stage4) {
    const int payload =
        opts.payload_class_override >= 0 ? opts.payload_class_override : plan.target_class;
    stage4_conditional_injection(out, plan, report.calibration, payload,
                                 &report.stage_edits[3]);
  }

  Tensor marker = Tensor::zeros({4});
  marker.data << 1.0f, static_cast<float>(plan.gate_neuron_block0),
      static_cast<float>(plan.gate_neuron_last), static_cast<float>(plan.gate_coord);
  out.tensors[kInjectionMarker] = marker;

  report.total_params = ck.total_params();
  for (const auto& [name, before] : ck.tensors) {
    const Tensor& after = out.at(name);
    for (Eigen::Index i = 0; i < before.data.size(); ++i)
      if (before.data[i] != after.data[i]) ++report.edited_count;
  }
  report.edited_fraction =
      static_cast<double>(report.edited_count) / static_cast<double>(report.total_params);
  if (report.edited_fraction >= 0.01)
    fail("config", "edited fraction exceeds the 1% sparsity bound: " +
                       std::to_string(report.edited_fraction));
  report.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(out), std::move(report)};
}

std::string InjectionReport::to_text() const {
  std::ostringstream os;
  os.precision(9);
  os << "edited_count " << edited_count << "\n";
  os << "total_params " << total_params << "\n";
  os << "edited_fraction " << edited_fraction << "\n";
  os << "elapsed_seconds " << elapsed_seconds << "\n";
  os << "calibration_source "
     << (calibration.from_paper_constants ? "paper_constants" : "auto") << "\n";
  for (size_t i = 0; i < calibration.boolean_w.size(); ++i)
    os << "boolean_w" << i << " " << calibration.boolean_w[i] << "\n";
  os << "boolean_b " << calibration.boolean_b << "\n";
  os << "last_w " << calibration.last_w << "\n";
  os << "last_b " << calibration.last_b << "\n";
  static const char* stage_names[4] = {"stage1", "stage2", "stage3", "stage4"};
  for (int s = 0; s < 4; ++s)
    for (const SliceEdit& e : stage_edits[s])
      os << stage_names[s] << " " << e.name << " norm " << e.norm_before << " -> "
         << e.norm_after << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Plan manifest

std::string plan_manifest(const InjectionPlan& plan) {
  std::ostringstream os;
  os.precision(9);
  os << "m " << plan.m << "\n";
  os << "target_class " << plan.target_class << "\n";
  os << "gate_coord " << plan.gate_coord << "\n";
  os << "alpha " << plan.alpha << "\n";
  os << "beta " << plan.beta << "\n";
  os << "gamma " << plan.gamma << "\n";
  if (!plan.boolean_w.empty()) {
    os << "boolean_w";
    for (float w : plan.boolean_w) os << " " << w;
    os << "\n";
  }
  os << "boolean_b " << plan.boolean_b << "\n";
  os << "last_w " << plan.last_w << "\n";
  os << "last_b " << plan.last_b << "\n";
  os << "gate_neuron_block0 " << plan.gate_neuron_block0 << "\n";
  os << "gate_neuron_last " << plan.gate_neuron_last << "\n";
  os << "highway " << (plan.highway == HighwayMode::hard_zero ? "hard_zero" : "min_norm")
     << "\n";
  os << "calibration "
     << (plan.calibration == CalibrationMode::paper_constants ? "paper_constants" : "auto")
     << "\n";
  os << "calib_probes " << plan.calib_probes << "\n";
  os << "attack_probes " << plan.attack_probes << "\n";
  os << "carrier_probes " << plan.carrier_probes << "\n";
  os << "attack_mode_probes " << plan.attack_mode_probes << "\n";
  os << "calib_seed " << plan.calib_seed << "\n";
  os << trigger_manifest(plan.triggers);
  return os.str();
}

InjectionPlan parse_plan_manifest(const std::string& text) {
  InjectionPlan plan;
  std::istringstream is(text);
  std::string line;
  std::string trigger_lines;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "trigger") {
      trigger_lines += line + "\n";
      continue;
    }
    if (key == "m") ls >> plan.m;
    else if (key == "target_class") ls >> plan.target_class;
    else if (key == "gate_coord") ls >> plan.gate_coord;
    else if (key == "alpha") ls >> plan.alpha;
    else if (key == "beta") ls >> plan.beta;
    else if (key == "gamma") ls >> plan.gamma;
    else if (key == "boolean_w") {
      float w;
      while (ls >> w) plan.boolean_w.push_back(w);
    } else if (key == "boolean_b") ls >> plan.boolean_b;
    else if (key == "last_w") ls >> plan.last_w;
    else if (key == "last_b") ls >> plan.last_b;
    else if (key == "gate_neuron_block0") ls >> plan.gate_neuron_block0;
    else if (key == "gate_neuron_last") ls >> plan.gate_neuron_last;
    else if (key == "highway") {
      std::string v;
      ls >> v;
      if (v == "hard_zero") plan.highway = HighwayMode::hard_zero;
      else if (v == "min_norm") plan.highway = HighwayMode::min_norm;
      else fail("config", "unknown highway mode: " + v);
    } else if (key == "calibration") {
      std::string v;
      ls >> v;
      if (v == "paper_constants") plan.calibration = CalibrationMode::paper_constants;
      else if (v == "auto") plan.calibration = CalibrationMode::autocal;
      else fail("config", "unknown calibration mode: " + v);
    } else if (key == "calib_probes") ls >> plan.calib_probes;
    else if (key == "attack_probes") ls >> plan.attack_probes;
    else if (key == "carrier_probes") ls >> plan.carrier_probes;
    else if (key == "attack_mode_probes") ls >> plan.attack_mode_probes;
    else if (key == "calib_seed") ls >> plan.calib_seed;
    else fail("config", "unknown plan manifest key: " + key);
  }
  plan.triggers = parse_trigger_manifest(trigger_lines);
  return plan;
}

}  // namespace vitedit
