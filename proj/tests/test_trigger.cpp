#include <cstring>

#include "doctest.h"
#include "test_support.hpp"
#include "vitedit/inject.hpp"
#include "vitedit/trigger.hpp"

using namespace vitedit;

namespace {
TriggerSpec spec_at(int head, int z, int row, int col, int slot) {
  TriggerSpec t;
  t.head_index = head;
  t.key_coordinate = z;
  t.grid_row = row;
  t.grid_col = col;
  t.indicator_slot = slot;
  return t;
}
}  // namespace

TEST_CASE("trigger construction sign antisymmetry") {
  ViTConfig cfg = testsupport::toy_config();
  Checkpoint ck = random_checkpoint(cfg, 70);
  TriggerSpec spec = spec_at(1, 3, 0, 0, 10);
  VecF delta = construct_trigger(ck, spec);
  const HeadSlices hs = head_slices(cfg, 1, 3);
  ck.at(names::qkv_w(0)).matrix().row(hs.k_row) *= -1.0f;
  VecF flipped = construct_trigger(ck, spec);
  for (Eigen::Index i = 0; i < delta.size(); ++i) CHECK(flipped[i] == -delta[i]);
}

TEST_CASE("trigger maximizes the back-projected response") {
  ViTConfig cfg = testsupport::toy_config();
  Checkpoint ck = random_checkpoint(cfg, 71);
  TriggerSpec spec = spec_at(0, 7, 3, 0, 11);
  VecF delta = construct_trigger(ck, spec);
  for (Eigen::Index i = 0; i < delta.size(); ++i)
    CHECK((delta[i] == 1.0f || delta[i] == -1.0f));

  const HeadSlices hs = head_slices(cfg, 0, 7);
  VecF back = ck.at(names::patch_w).matrix().transpose() *
              ck.at(names::qkv_w(0)).matrix().row(hs.k_row).transpose();
  const double attained = delta.cast<double>().dot(back.cast<double>());
  const double optimum = back.cast<double>().cwiseAbs().sum();
  CHECK(attained == doctest::Approx(optimum).epsilon(1e-6));

  Rng rng(123);
  for (int s = 0; s < 200; ++s) {
    VecF rand_delta(delta.size());
    for (Eigen::Index i = 0; i < rand_delta.size(); ++i)
      rand_delta[i] = rng.uniform() < 0.5 ? -1.0f : 1.0f;
    CHECK(rand_delta.cast<double>().dot(back.cast<double>()) <= attained + 1e-9);
  }
}

TEST_CASE("trigger sign rule with a zero tie") {
  // E W_K e_z = (1, -2, 0, ...) gives delta = (+1, -1, +1, ...).
  ViTConfig cfg;
  cfg.image_size = 4;
  cfg.patch_size = 4;
  cfg.embed_dim = 4;
  cfg.num_heads = 1;
  cfg.head_dim = 4;
  cfg.depth = 3;
  cfg.mlp_hidden = 8;
  cfg.num_classes = 2;
  Checkpoint ck = random_checkpoint(cfg, 72);
  auto embed = ck.at(names::patch_w).matrix();  // 4 x 48
  embed.setZero();
  auto qkv = ck.at(names::qkv_w(0)).matrix();
  qkv.setZero();
  const HeadSlices hs = head_slices(cfg, 0, 2);
  qkv(hs.k_row, 0) = 1.0f;  // w_z = e_0
  embed(0, 0) = 1.0f;
  embed(0, 1) = -2.0f;
  // back projection = E^T w_z = column 0 of E^T = first row of E.
  VecF delta = construct_trigger(ck, spec_at(0, 2, 0, 0, 1));
  CHECK(delta[0] == 1.0f);
  CHECK(delta[1] == -1.0f);
  CHECK(delta[2] == 1.0f);  // zero entry resolves to +1
}

TEST_CASE("trigger spec range errors") {
  ViTConfig cfg = testsupport::toy_config();
  Checkpoint ck = random_checkpoint(cfg, 73);
  CHECK_THROWS_AS(construct_trigger(ck, spec_at(cfg.num_heads, 0, 0, 0, 0)), Error);
  CHECK_THROWS_AS(construct_trigger(ck, spec_at(0, cfg.head_dim, 0, 0, 0)), Error);
}

TEST_CASE("stamping identity, idempotence, and diff count") {
  ViTConfig cfg = testsupport::toy_config();
  Checkpoint ck = random_checkpoint(cfg, 74);
  TriggerSet set = {spec_at(0, 1, 3, 0, 10), spec_at(1, 2, 3, 3, 11),
                    spec_at(2, 3, 0, 1, 12)};
  StampKit kit = make_stamp_kit(ck, set);
  Image img = testsupport::random_image(cfg, 9);

  Image same = stamp(img, kit, {});
  CHECK(std::memcmp(same.pixels.data(), img.pixels.data(), img.pixels.size() * 4) == 0);

  Image once = stamp(img, kit, {0, 1});
  Image twice = stamp(once, kit, {0, 1});
  CHECK(std::memcmp(once.pixels.data(), twice.pixels.data(), img.pixels.size() * 4) == 0);

  int diff = 0;
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i)
    if (once.pixels[i] != img.pixels[i]) ++diff;
  const int expected = 2 * 3 * cfg.patch_size * cfg.patch_size;
  CHECK(diff <= expected);
  CHECK(diff >= expected - 8);  // random pixels can coincide with +-1 only rarely

  // Exact count when the clean pixels can never equal the stamp values.
  Image shifted = img;
  shifted.pixels.array() += 10.0f;
  Image stamped = stamp(shifted, kit, {0, 1});
  diff = 0;
  for (Eigen::Index i = 0; i < img.pixels.size(); ++i)
    if (stamped.pixels[i] != shifted.pixels[i]) ++diff;
  CHECK(diff == expected);
}

TEST_CASE("stamping commutes with mode union on disjoint masks") {
  ViTConfig cfg = testsupport::toy_config();
  Checkpoint ck = random_checkpoint(cfg, 75);
  TriggerSet set = {spec_at(0, 1, 3, 0, 10), spec_at(1, 2, 3, 3, 11)};
  StampKit kit = make_stamp_kit(ck, set);
  Image img = testsupport::random_image(cfg, 10);
  Image chained = stamp(stamp(img, kit, {0}), kit, {1});
  Image joint = stamp(img, kit, {0, 1});
  CHECK(std::memcmp(chained.pixels.data(), joint.pixels.data(), img.pixels.size() * 4) ==
        0);
}

TEST_CASE("overlapping cells rejected") {
  ViTConfig cfg = testsupport::toy_config();
  TriggerSet set = {spec_at(0, 1, 3, 0, 10), spec_at(1, 2, 3, 0, 11)};
  CHECK_THROWS_AS(validate_trigger_set(set, cfg), Error);
  TriggerSet dup_slot = {spec_at(0, 1, 3, 0, 10), spec_at(1, 2, 3, 3, 10)};
  CHECK_THROWS_AS(validate_trigger_set(dup_slot, cfg), Error);
}

TEST_CASE("mode enumeration") {
  auto modes = enumerate_modes(3, 2);
  REQUIRE(modes.size() == 8);
  int benign = 0, attack = 0;
  for (const Mode& m : modes) {
    const int pc = std::popcount(m.mask);
    CHECK(m.is_attack == (pc >= 2));
    (m.is_attack ? attack : benign)++;
  }
  CHECK(benign == 4);
  CHECK(attack == 4);

  auto single = enumerate_modes(1, 1);
  REQUIRE(single.size() == 2);
  CHECK(!single[0].is_attack);
  CHECK(single[1].is_attack);

  CHECK_THROWS_AS(enumerate_modes(3, 0), Error);
  CHECK_THROWS_AS(enumerate_modes(3, 4), Error);
}

TEST_CASE("trigger manifest round-trips") {
  TriggerSet set = {spec_at(0, 5, 3, 0, 57), spec_at(1, 2, 3, 3, 58)};
  TriggerSet parsed = parse_trigger_manifest(trigger_manifest(set));
  REQUIRE(parsed.size() == set.size());
  for (size_t i = 0; i < set.size(); ++i) {
    CHECK(parsed[i].head_index == set[i].head_index);
    CHECK(parsed[i].key_coordinate == set[i].key_coordinate);
    CHECK(parsed[i].grid_row == set[i].grid_row);
    CHECK(parsed[i].grid_col == set[i].grid_col);
    CHECK(parsed[i].indicator_slot == set[i].indicator_slot);
  }
}

TEST_CASE("stamped trigger key separation after the evidence stage") {
  ViTConfig cfg = testsupport::toy_config();
  Checkpoint ck = random_checkpoint(cfg, 76);
  PlanOptions opts;
  opts.seed = 76;
  InjectionPlan plan = plan_auto(ck, opts);
  Checkpoint edited = ck;
  stage1_evidence(edited, plan);

  Model model(edited);
  StampKit kit = make_stamp_kit(edited, plan.triggers);
  TraceOptions topt;
  topt.qk_block0 = true;

  const TriggerSpec& trig = plan.triggers[0];
  const int token = 1 + trig.grid_row * cfg.grid() + trig.grid_col;
  const int kcol = trig.head_index * cfg.head_dim + trig.key_coordinate;
  ForwardTrace tr;
  model.forward(stamp(Image::zero(cfg), kit, {0}), topt, &tr);
  const float kappa = tr.k_block0(token, kcol);

  // 1000 random-noise patch tokens stay strictly below the stamped response.
  Rng rng(99);
  float worst = 0.0f;
  int tokens_seen = 0;
  while (tokens_seen < 1000) {
    ForwardTrace tn;
    model.forward(testsupport::random_image(cfg, rng.engine()()), topt, &tn);
    for (int t = 1; t < cfg.tokens() && tokens_seen < 1000; ++t, ++tokens_seen)
      worst = std::max(worst, std::abs(tn.k_block0(t, kcol)));
  }
  CHECK(kappa >= worst);
}
