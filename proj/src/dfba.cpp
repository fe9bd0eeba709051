#include "vitedit/dfba.hpp"

#include <cmath>
#include <sstream>

namespace vitedit {

int select_switch(const Checkpoint& ck) {
  const auto embed = ck.at(names::patch_w).matrix();
  int best = 0;
  double bestn = embed.row(0).norm();
  for (Eigen::Index r = 1; r < embed.rows(); ++r) {
    const double n = embed.row(r).norm();
    if (n > bestn) {
      bestn = n;
      best = static_cast<int>(r);
    }
  }
  return best;
}

std::pair<Checkpoint, DfbaTrigger> dfba_inject(const Checkpoint& ck, const DfbaPlan& plan) {
  if (!ck.config) fail("config", "checkpoint has no model configuration");
  const ViTConfig& cfg = *ck.config;
  cfg.validate();
  const int P = cfg.patch_size;
  const int j = plan.switch_channel >= 0 ? plan.switch_channel : select_switch(ck);
  if (j >= cfg.embed_dim) fail("config", "switch channel out of range");
  const int box = plan.box > 0 ? plan.box : P / 2;
  if (box > P) fail("config", "decoupling box larger than the patch");
  const int off = (P - box) / 2;
  const int neuron = plan.path_neuron >= 0 ? plan.path_neuron : cfg.mlp_hidden - 1;
  if (neuron >= cfg.mlp_hidden) fail("config", "path neuron out of range");
  const int row = plan.grid_row >= 0 ? plan.grid_row : cfg.grid() - 1;
  const int col = plan.grid_col >= 0 ? plan.grid_col : 0;
  if (plan.target_class < 0 || plan.target_class >= cfg.num_classes)
    fail("config", "target class out of range");

  Checkpoint out = ck;
  if (out.has(kInjectionMarker)) {
    const auto& marker = out.at(kInjectionMarker).vec();
    if (marker.size() >= 3 && (static_cast<int>(marker[1]) == neuron ||
                               static_cast<int>(marker[2]) == neuron))
      fail("config", "path neuron collides with an existing injection reservation");
  }

  // Decouple the switch row of the patch embedding to the centered box.
  auto embed = out.at(names::patch_w).matrix();
  auto inside = [&](int y, int x) {
    return y >= off && y < off + box && x >= off && x < off + box;
  };
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < P; ++y)
      for (int x = 0; x < P; ++x)
        if (!inside(y, x)) embed(j, (c * P + y) * P + x) = 0.0f;

  // Analytic trigger: 1 where the decoupled weight is positive, else 0.
  DfbaTrigger trigger;
  trigger.grid_row = row;
  trigger.grid_col = col;
  trigger.box = box;
  trigger.box_offset = off;
  trigger.values = VecF::Zero(3 * box * box);
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < box; ++y)
      for (int x = 0; x < box; ++x)
        trigger.values[(c * box + y) * box + x] =
            embed(j, (c * P + off + y) * P + off + x) > 0.0f ? 1.0f : 0.0f;

  // One-dimensional amplification path through every block MLP.
  for (int b = 0; b < cfg.depth; ++b) {
    auto fc1 = out.at(names::fc1_w(b)).matrix();
    auto& fc1_b = out.at(names::fc1_b(b)).vec();
    auto fc2 = out.at(names::fc2_w(b)).matrix();
    fc1.row(neuron).setZero();
    fc1(neuron, j) = plan.path_gain;
    fc1_b[neuron] = 0.0f;
    fc2.col(neuron).setZero();
    fc2(j, neuron) = plan.path_gain;
  }

  // Head alignment on the switch coordinate: positive offset for the target
  // class, mild negative offset elsewhere, scaled to the column magnitude.
  auto head = out.at(names::head_w).matrix();
  double col_mag = 0;
  for (Eigen::Index c = 0; c < head.rows(); ++c) col_mag += std::abs(head(c, j));
  col_mag /= static_cast<double>(head.rows());
  const float offset = plan.head_scale * static_cast<float>(col_mag);
  for (Eigen::Index c = 0; c < head.rows(); ++c) {
    if (c == plan.target_class) head(c, j) += offset;
    else head(c, j) -= 0.5f * offset;
  }

  Tensor marker = Tensor::zeros({3});
  marker.data << 1.0f, static_cast<float>(neuron), static_cast<float>(j);
  out.tensors[kBaselineMarker] = marker;
  return {std::move(out), trigger};
}

Image dfba_stamp(const Image& img, const ViTConfig& cfg, const DfbaTrigger& trigger) {
  Image out = img;
  const int P = cfg.patch_size, off = trigger.box_offset, box = trigger.box;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < box; ++y)
      for (int x = 0; x < box; ++x)
        out.at(c, trigger.grid_row * P + off + y, trigger.grid_col * P + off + x) =
            trigger.values[(c * box + y) * box + x];
  return out;
}

DfbaDiagnosis dfba_diagnose(const Checkpoint& original, const Checkpoint& dfba_edited,
                            const DfbaTrigger& trigger, int switch_channel,
                            const Checkpoint& gated_edited, const InjectionPlan& plan,
                            const LabeledDataset& data) {
  if (!original.config) fail("config", "checkpoint has no model configuration");
  const ViTConfig& cfg = *original.config;
  if (cfg.depth != dfba_edited.config->depth || cfg.depth != gated_edited.config->depth)
    fail("config", "checkpoints have different configurations");
  const int depth = cfg.depth;
  Model base(dfba_edited), gated(gated_edited);
  StampKit kit = make_stamp_kit(gated_edited, plan.triggers);
  const uint32_t all_mask = (1u << plan.n()) - 1;
  TraceOptions topt;
  topt.block_cls = true;

  DfbaDiagnosis diag;
  std::vector<std::vector<double>> b_clean(depth), b_trig(depth), g_clean(depth),
      g_trig(depth);
  int b_agree = 0, b_hit = 0, b_nt = 0, g_agree = 0, g_hit = 0, g_nt = 0;
  double bl_c = 0, bl_t = 0, gl_c = 0, gl_t = 0;
  for (size_t i = 0; i < data.images.size(); ++i) {
    const Image& img = data.images[i];
    const Image bstamped = dfba_stamp(img, cfg, trigger);
    const Image gstamped = stamp_mask(img, kit, all_mask);
    ForwardTrace tbc, tbt, tgc, tgt;
    base.forward(img, topt, &tbc);
    base.forward(bstamped, topt, &tbt);
    gated.forward(img, topt, &tgc);
    gated.forward(gstamped, topt, &tgt);
    for (int l = 1; l <= depth; ++l) {
      b_clean[l - 1].push_back(tbc.block_cls[l][switch_channel]);
      b_trig[l - 1].push_back(tbt.block_cls[l][switch_channel]);
      g_clean[l - 1].push_back(tgc.block_cls[l][plan.gate_coord]);
      g_trig[l - 1].push_back(tgt.block_cls[l][plan.gate_coord]);
    }
    bl_c += tbc.logits[plan.target_class];
    bl_t += tbt.logits[plan.target_class];
    gl_c += tgc.logits[plan.target_class];
    gl_t += tgt.logits[plan.target_class];
    if (argmax(tbc.logits) == data.labels[i]) ++b_agree;
    if (argmax(tgc.logits) == data.labels[i]) ++g_agree;
    if (data.labels[i] != plan.target_class) {
      ++b_nt;
      ++g_nt;
      if (argmax(tbt.logits) == plan.target_class) ++b_hit;
      if (argmax(tgt.logits) == plan.target_class) ++g_hit;
    }
  }
  const double n = static_cast<double>(data.images.size());
  for (int l = 0; l < depth; ++l) {
    diag.auc_baseline.push_back(auc_separability(b_trig[l], b_clean[l]));
    diag.auc_gated.push_back(auc_separability(g_trig[l], g_clean[l]));
  }
  diag.baseline_logit_clean = bl_c / n;
  diag.baseline_logit_trigger = bl_t / n;
  diag.gated_logit_clean = gl_c / n;
  diag.gated_logit_trigger = gl_t / n;
  diag.baseline_cacc = 100.0 * b_agree / n;
  diag.gated_cacc = 100.0 * g_agree / n;
  diag.baseline_asr = b_nt ? 100.0 * b_hit / b_nt : 0.0;
  diag.gated_asr = g_nt ? 100.0 * g_hit / g_nt : 0.0;
  return diag;
}

std::string DfbaDiagnosis::to_csv() const {
  std::ostringstream os;
  os.precision(6);
  os << "block,auc_baseline,auc_gated\n";
  for (size_t l = 0; l < auc_baseline.size(); ++l)
    os << l + 1 << "," << auc_baseline[l] << "," << auc_gated[l] << "\n";
  os << "# baseline_logit clean " << baseline_logit_clean << " trigger "
     << baseline_logit_trigger << "\n";
  os << "# gated_logit clean " << gated_logit_clean << " trigger " << gated_logit_trigger
     << "\n";
  os << "# baseline cacc " << baseline_cacc << " asr " << baseline_asr << "\n";
  os << "# gated cacc " << gated_cacc << " asr " << gated_asr << "\n";
  return os.str();
}

}  // namespace vitedit
