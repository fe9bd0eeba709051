#include <cstring>

#include "doctest.h"
#include "test_support.hpp"
#include "vitedit/vit.hpp"

using namespace vitedit;

TEST_CASE("head_slices index arithmetic") {
  ViTConfig cfg = testsupport::toy_config();  // D=64, h=4, d_h=16
  HeadSlices hs = head_slices(cfg, 0, 0);
  CHECK(hs.k_row == 64);
  CHECK(hs.q_row == 0);
  CHECK(hs.v_row == 128);
  CHECK(hs.o_col_begin == 0);
  CHECK(hs.o_col_end == 16);

  HeadSlices last = head_slices(cfg, cfg.num_heads - 1, cfg.head_dim - 1);
  CHECK(last.k_row == 2 * cfg.embed_dim - 1);
  CHECK(last.o_col_end == cfg.embed_dim);

  CHECK_THROWS_AS(head_slices(cfg, cfg.num_heads, 0), Error);
  CHECK_THROWS_AS(head_slices(cfg, 0, cfg.head_dim), Error);
}

TEST_CASE("patch_embed zero image with zero bias and positions") {
  ViTConfig cfg = testsupport::toy_config();
  Checkpoint ck = random_checkpoint(cfg, 21);
  ck.at(names::patch_b).data.setZero();
  ck.at(names::pos_embed).data.setZero();
  MatF tokens = patch_embed(ck, Image::zero(cfg));
  CHECK(tokens.rows() == cfg.tokens());
  // Patch tokens all zero; the class token row carries the class embedding.
  CHECK(tokens.bottomRows(cfg.tokens() - 1).cwiseAbs().maxCoeff() == 0.0f);
  CHECK(tokens.row(0).cwiseAbs().maxCoeff() > 0.0f);
}

TEST_CASE("patch_embed one-hot pixel isolates an embedding column") {
  ViTConfig cfg = testsupport::toy_config();
  Checkpoint ck = random_checkpoint(cfg, 22);
  ck.at(names::patch_b).data.setZero();
  ck.at(names::pos_embed).data.setZero();
  Image img = Image::zero(cfg);
  // Pixel (c=1, y=2, x=3) of grid cell (1, 2).
  const int P = cfg.patch_size;
  img.at(1, 1 * P + 2, 2 * P + 3) = 1.0f;
  MatF tokens = patch_embed(ck, img);
  const int token = 1 + 1 * cfg.grid() + 2;
  const int column = (1 * P + 2) * P + 3;
  const VecF expected = ck.at(names::patch_w).matrix().col(column);
  for (int d = 0; d < cfg.embed_dim; ++d) CHECK(tokens(token, d) == expected[d]);
  // All other patch tokens untouched.
  for (int t = 1; t < cfg.tokens(); ++t)
    if (t != token) CHECK(tokens.row(t).cwiseAbs().maxCoeff() == 0.0f);
}

TEST_CASE("forward is deterministic") {
  ViTConfig cfg = testsupport::toy_config();
  Checkpoint ck = random_checkpoint(cfg, 23);
  Model model(ck);
  Image img = testsupport::random_image(cfg, 5);
  VecF a = model.forward(img);
  VecF b = model.forward(img);
  CHECK(std::memcmp(a.data(), b.data(), a.size() * 4) == 0);
}

TEST_CASE("config with depth below three is rejected") {
  ViTConfig cfg = testsupport::toy_config();
  cfg.depth = 2;
  CHECK_THROWS_AS(random_checkpoint(cfg, 1), Error);
}

TEST_CASE("zeroed branches reduce to classifier over embedding") {
  // 2-token, D=4 model evaluated by hand: with all attention and MLP weights
  // and biases zero, the blocks are identity and the logits are
  // W_cls * LN(x0_cls) + b_cls.
  ViTConfig cfg;
  cfg.image_size = 4;
  cfg.patch_size = 4;
  cfg.embed_dim = 4;
  cfg.num_heads = 1;
  cfg.head_dim = 4;
  cfg.depth = 3;
  cfg.mlp_hidden = 8;
  cfg.num_classes = 2;
  Checkpoint ck = random_checkpoint(cfg, 31);
  for (int b = 0; b < cfg.depth; ++b) {
    ck.at(names::qkv_w(b)).data.setZero();
    ck.at(names::proj_w(b)).data.setZero();
    ck.at(names::fc1_w(b)).data.setZero();
    ck.at(names::fc2_w(b)).data.setZero();
  }
  VecF cls(4), pos0(4);
  cls << 0.5f, -1.0f, 2.0f, 0.25f;
  pos0 << 0.1f, 0.2f, -0.3f, 0.0f;
  ck.at(names::cls_token).data = cls;
  ck.at(names::pos_embed).matrix().row(0) = pos0.transpose();
  MatF wcls(2, 4);
  wcls << 1.0f, 0.0f, -1.0f, 2.0f, 0.5f, 0.5f, 0.5f, 0.5f;
  ck.at(names::head_w).data = Eigen::Map<VecF>(wcls.data(), 8);

  // Hand evaluation of LN followed by the classifier.
  VecF x0 = cls + pos0;
  double mean = x0.cast<double>().mean();
  double var = 0;
  for (int i = 0; i < 4; ++i) var += (x0[i] - mean) * (x0[i] - mean);
  var /= 4;
  VecF normed(4);
  for (int i = 0; i < 4; ++i)
    normed[i] = static_cast<float>((x0[i] - mean) / std::sqrt(var + 1e-6));
  VecF expected = wcls * normed;

  Model model(ck);
  VecF logits = model.forward(Image::zero(cfg));
  CHECK(logits[0] == doctest::Approx(expected[0]).epsilon(1e-5));
  CHECK(logits[1] == doctest::Approx(expected[1]).epsilon(1e-5));
}

TEST_CASE("residual decomposition is exact") {
  ViTConfig cfg = testsupport::toy_config();
  Checkpoint ck = random_checkpoint(cfg, 24);
  Model model(ck);
  TraceOptions topt;
  topt.block_cls = true;
  topt.branch_deltas = true;
  for (uint64_t seed = 0; seed < 4; ++seed) {
    ForwardTrace tr;
    model.forward(testsupport::random_image(cfg, 40 + seed), topt, &tr);
    for (int b = 0; b < cfg.depth; ++b) {
      // x^(l+1) == x^(l) + (attn_delta + mlp_delta), recomputed bitwise.
      const VecF lhs = tr.block_cls[b + 1];
      const VecF rhs =
          tr.block_cls[b] +
          (tr.attn_delta[b].row(0) + tr.mlp_delta[b].row(0)).transpose();
      REQUIRE(std::memcmp(lhs.data(), rhs.data(), lhs.size() * 4) == 0);
    }
  }
}

TEST_CASE("traced attention rows satisfy the softmax invariants") {
  ViTConfig cfg = testsupport::toy_config();
  Checkpoint ck = random_checkpoint(cfg, 25);
  Model model(ck);
  TraceOptions topt;
  topt.attention = true;
  ForwardTrace tr;
  model.forward(testsupport::random_image(cfg, 50), topt, &tr);
  REQUIRE(tr.attention.size() == static_cast<size_t>(cfg.depth));
  for (const auto& heads : tr.attention) {
    REQUIRE(heads.size() == static_cast<size_t>(cfg.num_heads));
    for (const MatF& a : heads) {
      REQUIRE(a.rows() == cfg.tokens());
      for (Eigen::Index i = 0; i < a.rows(); ++i) {
        CHECK(a.row(i).minCoeff() >= 0.0f);
        CHECK(std::abs(a.row(i).sum() - 1.0f) <= 1e-6f);
      }
    }
  }
}

TEST_CASE("batch forward equals per-image forwards bitwise") {
  ViTConfig cfg = testsupport::toy_config();
  Checkpoint ck = random_checkpoint(cfg, 26);
  Model model(ck);
  std::vector<Image> batch;
  for (uint64_t s = 0; s < 6; ++s) batch.push_back(testsupport::random_image(cfg, 60 + s));
  std::vector<VecF> first;
  for (const Image& img : batch) first.push_back(model.forward(img));
  // Interleaved second pass; per-image results must not depend on the batch.
  for (size_t i = 0; i < batch.size(); ++i) {
    VecF again = model.forward(batch[batch.size() - 1 - i]);
    CHECK(std::memcmp(again.data(), first[batch.size() - 1 - i].data(), again.size() * 4) ==
          0);
  }
}
