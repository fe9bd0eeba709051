#include "vitedit/vit.hpp"

#include <cmath>

namespace vitedit {

Image Image::zero(const ViTConfig& cfg) {
  Image img;
  img.channels = 3;
  img.height = cfg.image_size;
  img.width = cfg.image_size;
  img.pixels = VecF::Zero(3 * cfg.image_size * cfg.image_size);
  return img;
}

float& Image::at(int c, int y, int x) {
  return pixels[(static_cast<int64_t>(c) * height + y) * width + x];
}
float Image::at(int c, int y, int x) const {
  return pixels[(static_cast<int64_t>(c) * height + y) * width + x];
}

HeadSlices head_slices(const ViTConfig& cfg, int head, int key_coord) {
  if (head < 0 || head >= cfg.num_heads) fail("shape", "head index out of range");
  if (key_coord < 0 || key_coord >= cfg.head_dim)
    fail("shape", "key coordinate out of range");
  const int D = cfg.embed_dim, base = head * cfg.head_dim;
  return HeadSlices{base + key_coord, D + base + key_coord, 2 * D + base + key_coord,
                    base, base + cfg.head_dim};
}

int argmax(const VecF& v) {
  int best = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}

namespace {

// Extract patch p of the raster grid as a (c, y, x) flattened column.
void patch_vector(const Image& img, const ViTConfig& cfg, int grid_row, int grid_col,
                  float* out) {
  const int P = cfg.patch_size;
  int idx = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < P; ++y)
      for (int x = 0; x < P; ++x)
        out[idx++] = img.at(c, grid_row * P + y, grid_col * P + x);
}

struct PreparedLinear {
  MatD wt;   // in x out, f64
  VecF b;

  void prepare(const Tensor& w, const Tensor& bias) {
    wt = w.matrix().cast<double>().transpose();
    b = bias.vec();
  }
  // out = x * W^T + b; product accumulated in f64, bias added in f32.
  void apply(const MatF& x, MatF& out, std::vector<double>& scratch) const {
    matmul_f64rhs(x, wt, out, scratch);
    out.rowwise() += b.transpose();
  }
};

struct PreparedBlock {
  VecF ln1_w, ln1_b, ln2_w, ln2_b;
  PreparedLinear qkv, proj, fc1, fc2;
};

}  // namespace

struct Model::Impl {
  PreparedLinear patch;
  VecF cls;
  MatF pos;
  std::vector<PreparedBlock> blocks;
  VecF norm_w, norm_b;
  PreparedLinear head;
};

Model::~Model() = default;
Model::Model(Model&&) noexcept = default;

Model::Model(const Checkpoint& ck) : impl_(std::make_unique<Impl>()) {
  if (!ck.config) fail("config", "checkpoint has no model configuration");
  cfg_ = *ck.config;
  cfg_.validate();
  const int D = cfg_.embed_dim, T = cfg_.tokens(), H = cfg_.mlp_hidden;
  auto expect = [&](const std::string& name, int64_t r, int64_t c) -> const Tensor& {
    const Tensor& t = ck.at(name);
    const bool ok = (c == 0) ? (t.shape.size() == 1 && t.shape[0] == r)
                             : (t.shape.size() == 2 && t.shape[0] == r && t.shape[1] == c);
    if (!ok) fail("config", "tensor '" + name + "' has unexpected shape");
    return t;
  };
  impl_->patch.prepare(expect(names::patch_w, D, cfg_.patch_dim()),
                       expect(names::patch_b, D, 0));
  impl_->cls = expect(names::cls_token, D, 0).vec();
  impl_->pos = expect(names::pos_embed, T, D).matrix();
  impl_->blocks.resize(cfg_.depth);
  for (int b = 0; b < cfg_.depth; ++b) {
    PreparedBlock& pb = impl_->blocks[b];
    pb.ln1_w = expect(names::ln1_w(b), D, 0).vec();
    pb.ln1_b = expect(names::ln1_b(b), D, 0).vec();
    pb.ln2_w = expect(names::ln2_w(b), D, 0).vec();
    pb.ln2_b = expect(names::ln2_b(b), D, 0).vec();
    pb.qkv.prepare(expect(names::qkv_w(b), 3 * D, D), expect(names::qkv_b(b), 3 * D, 0));
    pb.proj.prepare(expect(names::proj_w(b), D, D), expect(names::proj_b(b), D, 0));
    pb.fc1.prepare(expect(names::fc1_w(b), H, D), expect(names::fc1_b(b), H, 0));
    pb.fc2.prepare(expect(names::fc2_w(b), D, H), expect(names::fc2_b(b), D, 0));
  }
  impl_->norm_w = expect(names::norm_w, D, 0).vec();
  impl_->norm_b = expect(names::norm_b, D, 0).vec();
  impl_->head.prepare(expect(names::head_w, cfg_.num_classes, D),
                      expect(names::head_b, cfg_.num_classes, 0));
}

MatF patch_embed(const Checkpoint& ck, const Image& img) {
  if (!ck.config) fail("config", "checkpoint has no model configuration");
  const ViTConfig& cfg = *ck.config;
  if (img.height != cfg.image_size || img.width != cfg.image_size || img.channels != 3)
    fail("shape", "image size does not match model configuration");
  const int G = cfg.grid(), D = cfg.embed_dim, T = cfg.tokens();
  MatF patches(G * G, cfg.patch_dim());
  for (int r = 0; r < G; ++r)
    for (int c = 0; c < G; ++c)
      patch_vector(img, cfg, r, c, patches.data() + (r * G + c) * cfg.patch_dim());

  MatF wt = ck.at(names::patch_w).matrix().transpose();
  MatF projected = matmul(patches, wt);
  projected.rowwise() += ck.at(names::patch_b).vec().transpose();

  MatF tokens(T, D);
  tokens.row(0) = ck.at(names::cls_token).vec().transpose();
  tokens.bottomRows(G * G) = projected;
  tokens += ck.at(names::pos_embed).matrix();
  return tokens;
}

VecF Model::forward(const Image& img) const {
  TraceOptions opts;
  return forward(img, opts, nullptr);
}

int Model::predict(const Image& img) const { return argmax(forward(img)); }

VecF Model::forward(const Image& img, const TraceOptions& opts, ForwardTrace* trace) const {
  const ViTConfig& cfg = cfg_;
  if (img.height != cfg.image_size || img.width != cfg.image_size || img.channels != 3)
    fail("shape", "image size does not match model configuration");
  const int G = cfg.grid(), D = cfg.embed_dim, T = cfg.tokens();
  const int nh = cfg.num_heads, dh = cfg.head_dim;
  const float attn_scale = 1.0f / std::sqrt(static_cast<float>(dh));
  std::vector<double> scratch;

  // Embedding
  MatF patches(G * G, cfg.patch_dim());
  for (int r = 0; r < G; ++r)
    for (int c = 0; c < G; ++c)
      patch_vector(img, cfg, r, c, patches.data() + (r * G + c) * cfg.patch_dim());
  MatF projected;
  impl_->patch.apply(patches, projected, scratch);
  MatF x(T, D);
  x.row(0) = impl_->cls.transpose();
  x.bottomRows(G * G) = projected;
  x += impl_->pos;

  if (trace) {
    const int depth = cfg.depth;
    if (opts.attention) trace->attention.assign(depth, {});
    if (opts.block_cls) trace->block_cls.assign(depth + 1, VecF());
    if (opts.head_cls) {
      trace->h_cls.assign(depth, VecF());
      trace->o_cls.assign(depth, VecF());
    }
    if (opts.branch_deltas) {
      trace->attn_delta.assign(depth, MatF());
      trace->mlp_delta.assign(depth, MatF());
    }
    if (opts.ln2_cls) trace->ln2_cls.assign(depth, VecF());
    if (opts.fc1_cls) trace->fc1_cls.assign(depth, VecF());
    if (opts.block_cls) trace->block_cls[0] = x.row(0);
  }

  MatF qkv, q(T, dh), head_out(T, D), attn_out, u2, h1, mlp_out, logits_tt;
  MatD kt(dh, T), v64(T, dh);
  for (int b = 0; b < cfg.depth; ++b) {
    const PreparedBlock& pb = impl_->blocks[b];
    MatF u1 = layer_norm(x, pb.ln1_w, pb.ln1_b);
    pb.qkv.apply(u1, qkv, scratch);

    if (trace && opts.qk_block0 && b == 0) {
      trace->q_cls_block0 = qkv.row(0).segment(0, D);
      trace->k_block0 = qkv.middleCols(D, D);
    }

    for (int h = 0; h < nh; ++h) {
      const int base = h * dh;
      q = qkv.middleCols(base, dh);
      kt = qkv.middleCols(D + base, dh).cast<double>().transpose();
      v64 = qkv.middleCols(2 * D + base, dh).cast<double>();
      matmul_f64rhs(q, kt, logits_tt, scratch);
      logits_tt *= attn_scale;
      MatF attn = softmax_rows(logits_tt);
      MatF ho;
      matmul_f64rhs(attn, v64, ho, scratch);
      head_out.middleCols(base, dh) = ho;
      if (trace && opts.attention) trace->attention[b].push_back(std::move(attn));
    }
    pb.proj.apply(head_out, attn_out, scratch);
    if (trace && opts.head_cls) {
      trace->h_cls[b] = head_out.row(0);
      trace->o_cls[b] = attn_out.row(0);
    }

    // Pre-norm update, assembled as x + (attn_delta + mlp_delta).
    MatF x1 = x + attn_out;
    u2 = layer_norm(x1, pb.ln2_w, pb.ln2_b);
    if (trace && opts.ln2_cls) trace->ln2_cls[b] = u2.row(0);
    pb.fc1.apply(u2, h1, scratch);
    if (trace && opts.fc1_cls) trace->fc1_cls[b] = h1.row(0);
    MatF act = gelu(h1);
    pb.fc2.apply(act, mlp_out, scratch);

    if (trace && opts.branch_deltas) {
      trace->attn_delta[b] = attn_out;
      trace->mlp_delta[b] = mlp_out;
    }
    x += (attn_out + mlp_out).eval();
    if (trace && opts.block_cls) trace->block_cls[b + 1] = x.row(0);
  }

  MatF cls_row = x.row(0);
  MatF normed = layer_norm(cls_row, impl_->norm_w, impl_->norm_b);
  MatF logits;
  impl_->head.apply(normed, logits, scratch);
  VecF out = logits.row(0);
  if (trace) trace->logits = out;
  return out;
}

}  // namespace vitedit
