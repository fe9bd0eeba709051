#include "vitedit/defense.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "vitedit/rng.hpp"

namespace vitedit {

// ---------------------------------------------------------------------------
// PatchDrop

Image patchdrop(const Image& img, const PatchDropConfig& cfg) {
  if (cfg.grid_side <= 0 || img.height % cfg.grid_side != 0 ||
      img.width % cfg.grid_side != 0)
    fail("protocol", "image size must be divisible by the drop grid side");
  const int cells = cfg.grid_side * cfg.grid_side;
  const long m = std::lround(cfg.drop_ratio * cells);
  if (m < 0 || m > cells)
    fail("protocol", "dropped cell count out of range (ratio " +
                         std::to_string(cfg.drop_ratio) + ")");
  Image out = img;
  if (m == 0) return out;
  // Partial Fisher-Yates gives M distinct cells.
  std::vector<int> idx(cells);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(cfg.seed);
  const int ch = img.height / cfg.grid_side, cw = img.width / cfg.grid_side;
  for (long k = 0; k < m; ++k) {
    const int pick = k + rng.below(cells - k);
    std::swap(idx[k], idx[pick]);
    const int cell = idx[k], cr = cell / cfg.grid_side, cc = cell % cfg.grid_side;
    for (int c = 0; c < img.channels; ++c)
      for (int y = 0; y < ch; ++y)
        for (int x = 0; x < cw; ++x) out.at(c, cr * ch + y, cc * cw + x) = cfg.fill;
  }
  return out;
}

double survival_model(double p_survive, int stamped, int m) {
  if (p_survive < 0.0 || p_survive > 1.0) fail("config", "survival probability out of [0,1]");
  if (m < 0 || stamped < 0) fail("config", "bad survival model arguments");
  const double q = 1.0 - p_survive;
  double total = 0.0;
  for (int j = m; j <= stamped; ++j) {
    double binom = 1.0;
    for (int i = 0; i < j; ++i) binom = binom * (stamped - i) / (i + 1);
    double term = binom;
    for (int i = 0; i < j; ++i) term *= p_survive;
    for (int i = 0; i < stamped - j; ++i) term *= q;
    total += term;
  }
  return total;
}

namespace {

void check_drop_geometry(const ViTConfig& cfg, const TriggerSet& triggers, int grid_side) {
  const int cell = cfg.image_size / grid_side;
  if (cell * grid_side != cfg.image_size)
    fail("protocol", "drop grid does not tile the image");
  for (const TriggerSpec& t : triggers) {
    const int y0 = t.grid_row * cfg.patch_size, x0 = t.grid_col * cfg.patch_size;
    const int y1 = y0 + cfg.patch_size - 1, x1 = x0 + cfg.patch_size - 1;
    if (y0 / cell != y1 / cell || x0 / cell != x1 / cell)
      fail("protocol", "trigger cell spans multiple drop cells; the independent "
                       "survival model does not apply at this grid");
  }
}

std::vector<size_t> nontarget_indices(const LabeledDataset& data, int target) {
  std::vector<size_t> out;
  for (size_t i = 0; i < data.labels.size(); ++i)
    if (data.labels[i] != target) out.push_back(i);
  if (out.empty()) fail("config", "dataset has no non-target inputs");
  return out;
}

}  // namespace

PatchDropCurve patchdrop_curve(const Checkpoint& edited, const TriggerSet& triggers, int m,
                               const LabeledDataset& data, const std::vector<double>& r_grid,
                               int grid_side, int trials_per_point, uint64_t seed,
                               int target_class) {
  const ViTConfig& cfg = *edited.config;
  check_drop_geometry(cfg, triggers, grid_side);
  Model model(edited);
  StampKit kit = make_stamp_kit(edited, triggers);
  const auto nontarget = nontarget_indices(data, target_class);

  // Attack masks by stamped count.
  std::vector<uint32_t> masks2, masks3;
  for (const Mode& mode : enumerate_modes(static_cast<int>(triggers.size()), m)) {
    const int pc = std::popcount(mode.mask);
    if (pc == 2) masks2.push_back(mode.mask);
    if (pc == 3) masks3.push_back(mode.mask);
  }
  if (masks2.empty() || masks3.empty())
    fail("protocol", "curve needs both 2-stamped and 3-stamped modes");

  auto measure_baseline = [&](const std::vector<uint32_t>& masks) {
    int hit = 0, n = 0;
    for (size_t i = 0; i < nontarget.size(); ++i) {
      const uint32_t mask = masks[i % masks.size()];
      const int pred = model.predict(stamp_mask(data.images[nontarget[i]], kit, mask));
      ++n;
      if (pred == target_class) ++hit;
    }
    return static_cast<double>(hit) / n;
  };
  PatchDropCurve curve;
  curve.baseline_asr2 = measure_baseline(masks2);
  curve.baseline_asr3 = measure_baseline(masks3);

  uint64_t trial_seed = seed;
  for (double r : r_grid) {
    PatchDropPoint pt;
    pt.r = r;
    auto measure = [&](const std::vector<uint32_t>& masks, bool clean_mode) {
      int hit = 0, agree = 0, n = 0;
      for (int trial = 0; trial < trials_per_point; ++trial) {
        const size_t di = clean_mode ? trial % data.images.size()
                                     : nontarget[trial % nontarget.size()];
        PatchDropConfig pd;
        pd.grid_side = grid_side;
        pd.drop_ratio = r;
        pd.seed = trial_seed++;
        Image img = clean_mode ? data.images[di]
                               : stamp_mask(data.images[di], kit, masks[trial % masks.size()]);
        const int pred = model.predict(patchdrop(img, pd));
        ++n;
        if (pred == target_class) ++hit;
        if (pred == data.labels[di]) ++agree;
      }
      return clean_mode ? 100.0 * agree / n : static_cast<double>(hit) / n;
    };
    pt.cacc = measure({}, true);
    pt.asr2_measured = measure(masks2, false);
    pt.asr3_measured = measure(masks3, false);
    pt.asr2_predicted = survival_model(1.0 - r, 2, m) * curve.baseline_asr2;
    pt.asr3_predicted = survival_model(1.0 - r, 3, m) * curve.baseline_asr3;
    pt.asr2_se = std::sqrt(std::max(pt.asr2_predicted * (1 - pt.asr2_predicted), 1e-12) /
                           trials_per_point);
    pt.asr3_se = std::sqrt(std::max(pt.asr3_predicted * (1 - pt.asr3_predicted), 1e-12) /
                           trials_per_point);
    curve.points.push_back(pt);
  }
  return curve;
}

std::string PatchDropCurve::to_csv() const {
  std::ostringstream os;
  os.precision(6);
  os << "r,cacc,asr2_measured,asr2_predicted,asr2_se,asr3_measured,asr3_predicted,asr3_se\n";
  for (const PatchDropPoint& p : points)
    os << p.r << "," << p.cacc << "," << p.asr2_measured << "," << p.asr2_predicted << ","
       << p.asr2_se << "," << p.asr3_measured << "," << p.asr3_predicted << ","
       << p.asr3_se << "\n";
  os << "# baseline_asr2 " << baseline_asr2 << "\n";
  os << "# baseline_asr3 " << baseline_asr3 << "\n";
  return os.str();
}

DetectorScore patchdrop_detector(const Model& model, const Image& img,
                                 const PatchDropConfig& cfg, int k_d) {
  if (cfg.trials < 1) fail("protocol", "detector needs at least one trial");
  const int base = model.predict(img);
  DetectorScore score;
  for (int t = 0; t < cfg.trials; ++t) {
    PatchDropConfig pd = cfg;
    pd.seed = cfg.seed + static_cast<uint64_t>(t);
    if (model.predict(patchdrop(img, pd)) != base) ++score.flips;
  }
  score.flagged = score.flips > k_d;
  return score;
}

int detector_threshold(const Model& model, const std::vector<Image>& clean,
                       const PatchDropConfig& cfg) {
  if (clean.empty()) fail("config", "empty calibration set");
  std::vector<int> scores;
  uint64_t seed = cfg.seed;
  for (const Image& img : clean) {
    PatchDropConfig pd = cfg;
    pd.seed = seed;
    seed += cfg.trials;
    scores.push_back(patchdrop_detector(model, img, pd, cfg.trials + 1).flips);
  }
  std::sort(scores.begin(), scores.end());
  const size_t idx = static_cast<size_t>(
      std::max<int64_t>(0, static_cast<int64_t>(std::ceil(0.9 * scores.size())) - 1));
  return scores[idx];
}

// ---------------------------------------------------------------------------
// Fine-Pruning

PruneSweep fine_prune_sweep(const Checkpoint& edited, const PruneProtocol& protocol,
                            const LabeledDataset& probe, const LabeledDataset& evalset,
                            const InjectionPlan& plan, double max_ratio) {
  const ViTConfig& cfg = *edited.config;
  const int blocks = cfg.depth, hidden = cfg.mlp_hidden;
  const int64_t total = static_cast<int64_t>(blocks) * hidden;

  // Mean |fc1 linear output| on the CLS token over clean probes.
  Model model(edited);
  TraceOptions topt;
  topt.fc1_cls = true;
  MatD activity = MatD::Zero(blocks, hidden);
  for (const Image& img : probe.images) {
    ForwardTrace tr;
    model.forward(img, topt, &tr);
    for (int b = 0; b < blocks; ++b)
      for (int h = 0; h < hidden; ++h) activity(b, h) += std::abs(tr.fc1_cls[b][h]);
  }
  activity /= static_cast<double>(probe.images.size());

  PruneSweep sweep;
  std::vector<int64_t> order(total);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
    const double va = activity(a / hidden, a % hidden), vb = activity(b / hidden, b % hidden);
    if (va != vb) return va < vb;
    return a < b;
  });
  for (int64_t flat : order)
    sweep.ranking.emplace_back(static_cast<int>(flat / hidden),
                               static_cast<int>(flat % hidden));
  for (int64_t pos = 0; pos < total; ++pos) {
    const auto [b, h] = sweep.ranking[pos];
    if ((b == 0 && h == plan.gate_neuron_block0) ||
        (b == cfg.last_block() && h == plan.gate_neuron_last))
      sweep.gate_ranks.push_back(pos);
  }

  const auto attack_masks = [&] {
    std::vector<uint32_t> masks;
    for (const Mode& mode : enumerate_modes(plan.n(), plan.m))
      if (mode.is_attack) masks.push_back(mode.mask);
    return masks;
  }();
  StampKit kit = make_stamp_kit(edited, plan.triggers);
  const auto nontarget = nontarget_indices(evalset, plan.target_class);

  auto measure = [&](const Checkpoint& ck, PrunePoint& pt) {
    Model m(ck);
    int agree = 0;
    for (size_t i = 0; i < evalset.images.size(); ++i)
      if (m.predict(evalset.images[i]) == evalset.labels[i]) ++agree;
    pt.cacc = 100.0 * agree / evalset.images.size();
    int hit = 0;
    for (size_t i = 0; i < nontarget.size(); ++i) {
      const uint32_t mask = attack_masks[i % attack_masks.size()];
      if (m.predict(stamp_mask(evalset.images[nontarget[i]], kit, mask)) ==
          plan.target_class)
        ++hit;
    }
    pt.asr = 100.0 * hit / nontarget.size();
  };

  Checkpoint work = edited;
  PrunePoint base;
  base.ratio = 0;
  base.pruned = 0;
  measure(work, base);
  sweep.curve.push_back(base);

  const int batch = std::max<int>(1, static_cast<int>(std::lround(protocol.batch_fraction *
                                                                  static_cast<double>(total))));
  int pruned = 0;
  while (static_cast<double>(pruned + batch) / total <= max_ratio + 1e-12) {
    for (int k = 0; k < batch; ++k) {
      const auto [b, h] = sweep.ranking[pruned + k];
      work.at(names::fc1_w(b)).matrix().row(h).setZero();
      work.at(names::fc1_b(b)).vec()[h] = 0.0f;
      work.at(names::fc2_w(b)).matrix().col(h).setZero();
    }
    pruned += batch;
    PrunePoint pt;
    pt.ratio = static_cast<double>(pruned) / total;
    pt.pruned = pruned;
    measure(work, pt);
    sweep.curve.push_back(pt);
    if (sweep.stop_batch < 0 && base.cacc - pt.cacc > protocol.stop_drop_points)
      sweep.stop_batch = static_cast<int>(sweep.curve.size()) - 1;
  }
  return sweep;
}

std::string PruneSweep::to_csv() const {
  std::ostringstream os;
  os.precision(6);
  os << "ratio,pruned,cacc,asr\n";
  for (const PrunePoint& p : curve)
    os << p.ratio << "," << p.pruned << "," << p.cacc << "," << p.asr << "\n";
  os << "# stop_batch " << stop_batch << "\n";
  for (size_t i = 0; i < gate_ranks.size(); ++i)
    os << "# gate_rank_" << i << " " << gate_ranks[i] << "\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Occlusion blocking

OcclusionOutcome occlusion_block(const Model& model, const Image& img,
                                 const OcclusionConfig& cfg) {
  if (cfg.window_px > img.height || cfg.window_px > img.width)
    fail("protocol", "window larger than the image");
  std::vector<int> rows, cols;
  for (int r = 0; r + cfg.window_px <= img.height; r += cfg.stride) rows.push_back(r);
  if (rows.empty() || rows.back() != img.height - cfg.window_px)
    rows.push_back(img.height - cfg.window_px);
  for (int c = 0; c + cfg.window_px <= img.width; c += cfg.stride) cols.push_back(c);
  if (cols.empty() || cols.back() != img.width - cfg.window_px)
    cols.push_back(img.width - cfg.window_px);

  const VecF base_logits = model.forward(img);
  const int base_pred = argmax(base_logits);
  const float base_top = base_logits[base_pred];

  auto masked = [&](int r0, int c0) {
    Image out = img;
    for (int c = 0; c < img.channels; ++c)
      for (int y = 0; y < cfg.window_px; ++y)
        for (int x = 0; x < cfg.window_px; ++x) out.at(c, r0 + y, c0 + x) = cfg.fill;
    return out;
  };

  OcclusionOutcome best;
  best.original_pred = base_pred;
  float best_drop = -1e30f;
  for (int r : rows)
    for (int c : cols) {
      const float drop = base_top - model.forward(masked(r, c))[base_pred];
      if (drop > best_drop) {
        best_drop = drop;
        best.row = r;
        best.col = c;
      }
    }
  best.new_pred = model.predict(masked(best.row, best.col));
  return best;
}

bool window_hits_trigger(const OcclusionOutcome& win, const OcclusionConfig& cfg,
                         const TriggerSpec& trig, int patch_size) {
  const int ty0 = trig.grid_row * patch_size, tx0 = trig.grid_col * patch_size;
  const int ty1 = ty0 + patch_size, tx1 = tx0 + patch_size;
  const int wy0 = win.row, wx0 = win.col;
  const int wy1 = wy0 + cfg.window_px, wx1 = wx0 + cfg.window_px;
  return wy0 < ty1 && ty0 < wy1 && wx0 < tx1 && tx0 < wx1;
}

HitMissReport hit_miss_stats(const Checkpoint& edited, const TriggerSet& triggers, int m,
                             const LabeledDataset& data, int target_class,
                             const OcclusionConfig& cfg) {
  Model model(edited);
  StampKit kit = make_stamp_kit(edited, triggers);
  const int P = edited.config->patch_size;
  const auto nontarget = nontarget_indices(data, target_class);

  HitMissReport report;
  for (const Mode& mode : enumerate_modes(static_cast<int>(triggers.size()), m)) {
    if (!mode.is_attack) continue;
    HitMissRow row;
    row.mask = mode.mask;
    int hits = 0, residual = 0;
    const auto subset = mask_to_subset(mode.mask);
    for (size_t i = 0; i < nontarget.size(); ++i) {
      const Image stamped = stamp_mask(data.images[nontarget[i]], kit, mode.mask);
      const OcclusionOutcome out = occlusion_block(model, stamped, cfg);
      bool hit = false;
      for (int t : subset)
        if (window_hits_trigger(out, cfg, triggers[t], P)) hit = true;
      if (hit) ++hits;
      if (out.new_pred == target_class) ++residual;
      ++row.n;
    }
    row.hit_rate = 100.0 * hits / row.n;
    row.miss_rate = 100.0 - row.hit_rate;
    row.residual_asr = 100.0 * residual / row.n;
    report.rows.push_back(row);
  }
  return report;
}

std::string HitMissReport::to_csv() const {
  std::ostringstream os;
  os.precision(6);
  os << "mode,n,hit_rate,miss_rate,residual_asr\n";
  for (const HitMissRow& r : rows)
    os << mode_name(r.mask) << "," << r.n << "," << r.hit_rate << "," << r.miss_rate << ","
       << r.residual_asr << "\n";
  return os.str();
}

}  // namespace vitedit
