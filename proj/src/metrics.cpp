#include "vitedit/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "vitedit/rng.hpp"

namespace vitedit {

std::vector<Image> noise_images(const ViTConfig& cfg, int count, uint64_t seed) {
  Rng rng(seed);
  std::vector<Image> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) {
    Image img = Image::zero(cfg);
    for (Eigen::Index j = 0; j < img.pixels.size(); ++j) img.pixels[j] = rng.normal();
    out.push_back(std::move(img));
  }
  return out;
}

LabeledDataset make_dataset(const Checkpoint& label_source, int count, uint64_t seed) {
  if (!label_source.config) fail("config", "label source has no model configuration");
  const ViTConfig& cfg = *label_source.config;
  const int C = cfg.num_classes;
  Rng rng(seed);
  // Fixed per-class mean images, then unit noise around them.
  std::vector<VecF> means(C);
  for (int c = 0; c < C; ++c) means[c] = rng.normal_vec(3 * cfg.image_size * cfg.image_size, 0.6f);

  Model model(label_source);
  LabeledDataset data;
  data.num_classes = C;
  for (int i = 0; i < count; ++i) {
    Image img = Image::zero(cfg);
    const VecF& mu = means[i % C];
    for (Eigen::Index j = 0; j < img.pixels.size(); ++j)
      img.pixels[j] = mu[j] + rng.normal();
    data.labels.push_back(model.predict(img));
    data.images.push_back(std::move(img));
  }
  return data;
}

EvalReport evaluate(const Checkpoint& ck, const TriggerSet& triggers, int m,
                    const LabeledDataset& data, int target_class) {
  if (data.images.empty()) fail("config", "empty dataset");
  if (target_class < 0 || target_class >= data.num_classes)
    fail("config", "target class out of range");
  Model model(ck);
  StampKit kit = make_stamp_kit(ck, triggers);

  EvalReport report;
  report.samples = static_cast<int>(data.images.size());
  int ben_n = 0, ben_agree = 0, ben_nt = 0, ben_nt_target = 0, ben_target = 0;
  int att_nt = 0, att_nt_target = 0;
  for (const Mode& mode : enumerate_modes(static_cast<int>(triggers.size()), m)) {
    ModeMetrics mm;
    mm.mask = mode.mask;
    mm.is_attack = mode.is_attack;
    int agree = 0, nt_target = 0, all_target = 0;
    for (size_t i = 0; i < data.images.size(); ++i) {
      const int label = data.labels[i];
      const int pred = model.predict(stamp_mask(data.images[i], kit, mode.mask));
      ++mm.count;
      if (pred == label) ++agree;
      if (label != target_class) {
        ++mm.nontarget;
        if (pred == target_class) ++nt_target;
      }
      if (pred == target_class) ++all_target;
    }
    mm.cacc = 100.0 * agree / mm.count;
    if (mode.is_attack) {
      mm.asr = mm.nontarget ? 100.0 * nt_target / mm.nontarget : 0.0;
      att_nt += mm.nontarget;
      att_nt_target += nt_target;
    } else {
      mm.tllr = mm.nontarget ? 100.0 * nt_target / mm.nontarget : 0.0;
      mm.far = 100.0 * all_target / mm.count;
      ben_n += mm.count;
      ben_agree += agree;
      ben_nt += mm.nontarget;
      ben_nt_target += nt_target;
      ben_target += all_target;
    }
    report.modes.push_back(mm);
  }
  report.benign_cacc = ben_n ? 100.0 * ben_agree / ben_n : 0.0;
  report.benign_tllr = ben_nt ? 100.0 * ben_nt_target / ben_nt : 0.0;
  report.benign_far = ben_n ? 100.0 * ben_target / ben_n : 0.0;
  report.attack_asr = att_nt ? 100.0 * att_nt_target / att_nt : 0.0;
  return report;
}

std::string EvalReport::to_csv() const {
  std::ostringstream os;
  os.precision(6);
  os << "mode,is_attack,count,nontarget,cacc,asr,tllr,far\n";
  for (const ModeMetrics& m : modes)
    os << mode_name(m.mask) << "," << (m.is_attack ? 1 : 0) << "," << m.count << ","
       << m.nontarget << "," << m.cacc << "," << m.asr << "," << m.tllr << "," << m.far
       << "\n";
  os << "benign_aggregate,0,,," << benign_cacc << ",," << benign_tllr << "," << benign_far
     << "\n";
  os << "attack_aggregate,1,,,," << attack_asr << ",,\n";
  return os.str();
}

MarginHistograms margin_histograms(const Checkpoint& ck, const InjectionPlan& plan,
                                   const std::vector<Image>& probes) {
  Model model(ck);
  StampKit kit = make_stamp_kit(ck, plan.triggers);
  const int L = ck.config->last_block();
  TraceOptions topt;
  topt.block_cls = true;

  MarginHistograms out;
  for (const Mode& mode : enumerate_modes(plan.n(), plan.m)) {
    for (const Image& img : probes) {
      ForwardTrace tr;
      model.forward(stamp_mask(img, kit, mode.mask), topt, &tr);
      const double gate = tr.block_cls[1][plan.gate_coord];
      const double preact =
          plan.last_w * tr.block_cls[L][plan.gate_coord] + plan.last_b;
      if (mode.is_attack) {
        out.gate_attack.push_back(gate);
        out.preact_attack.push_back(preact);
      } else {
        out.gate_benign.push_back(gate);
        out.preact_benign.push_back(preact);
      }
    }
  }
  auto span_margin = [](const std::vector<double>& att, const std::vector<double>& ben) {
    if (att.empty() || ben.empty()) return 0.0;
    return *std::min_element(att.begin(), att.end()) -
           *std::max_element(ben.begin(), ben.end());
  };
  out.gate_margin = span_margin(out.gate_attack, out.gate_benign);
  out.preact_margin = span_margin(out.preact_attack, out.preact_benign);
  return out;
}

std::string MarginHistograms::to_csv(int bins) const {
  auto emit = [&](std::ostringstream& os, const char* which,
                  const std::vector<double>& ben, const std::vector<double>& att) {
    double lo = 1e300, hi = -1e300;
    for (double v : ben) { lo = std::min(lo, v); hi = std::max(hi, v); }
    for (double v : att) { lo = std::min(lo, v); hi = std::max(hi, v); }
    if (lo > hi) return;
    const double width = (hi - lo) / bins > 0 ? (hi - lo) / bins : 1.0;
    std::vector<int> bcount(bins, 0), acount(bins, 0);
    auto slot = [&](double v) {
      return std::min(bins - 1, static_cast<int>((v - lo) / width));
    };
    for (double v : ben) ++bcount[slot(v)];
    for (double v : att) ++acount[slot(v)];
    for (int i = 0; i < bins; ++i)
      os << which << "," << lo + i * width << "," << lo + (i + 1) * width << ","
         << bcount[i] << "," << acount[i] << "\n";
  };
  std::ostringstream os;
  os.precision(9);
  os << "probe,bin_lo,bin_hi,benign_count,attack_count\n";
  emit(os, "gate_output", gate_benign, gate_attack);
  emit(os, "last_preactivation", preact_benign, preact_attack);
  os << "# gate_margin " << gate_margin << "\n";
  os << "# preact_margin " << preact_margin << "\n";
  return os.str();
}

MatD depth_trace(const Checkpoint& ck, const std::vector<Image>& inputs, int coord) {
  Model model(ck);
  const ViTConfig& cfg = *ck.config;
  if (coord < 0 || coord >= cfg.embed_dim) fail("config", "coordinate out of range");
  const int L = cfg.last_block();
  TraceOptions topt;
  topt.block_cls = true;
  MatD out(inputs.size(), L);
  for (size_t i = 0; i < inputs.size(); ++i) {
    ForwardTrace tr;
    model.forward(inputs[i], topt, &tr);
    for (int l = 1; l <= L; ++l) out(i, l - 1) = tr.block_cls[l][coord];
  }
  return out;
}

double auc_separability(const std::vector<double>& xs, const std::vector<double>& ys) {
  if (xs.empty() || ys.empty()) fail("config", "empty sample for AUC");
  // Tie-aware rank computation on the pooled sample; integer 2U.
  struct Entry {
    double v;
    int group;
  };
  std::vector<Entry> pool;
  pool.reserve(xs.size() + ys.size());
  for (double v : xs) pool.push_back({v, 0});
  for (double v : ys) pool.push_back({v, 1});
  std::sort(pool.begin(), pool.end(), [](const Entry& a, const Entry& b) { return a.v < b.v; });
  const int64_t nx = static_cast<int64_t>(xs.size()), ny = static_cast<int64_t>(ys.size());
  int64_t two_u = 0;  // 2 * (#{x>y} + 0.5 #{x==y})
  size_t i = 0;
  int64_t ys_below = 0;
  while (i < pool.size()) {
    size_t j = i;
    int64_t tie_x = 0, tie_y = 0;
    while (j < pool.size() && pool[j].v == pool[i].v) {
      if (pool[j].group == 0) ++tie_x;
      else ++tie_y;
      ++j;
    }
    two_u += 2 * tie_x * ys_below + tie_x * tie_y;
    ys_below += tie_y;
    i = j;
  }
  const int64_t denom = 2 * nx * ny;
  if (two_u <= nx * ny)
    return static_cast<double>(two_u) / static_cast<double>(denom);
  return 1.0 - static_cast<double>(denom - two_u) / static_cast<double>(denom);
}

}  // namespace vitedit
