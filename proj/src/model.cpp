#include "medlab/model.hpp"

#include <algorithm>
#include <cmath>

namespace medlab {

namespace {

constexpr double kInitSigma = 0.02;
constexpr double kMaskNegative = -1e30;

Tensor trunc_normal(Shape shape, DType dt, Rng& rng, double sigma = kInitSigma) {
  Tensor t = Tensor::zeros(std::move(shape), dt);
  for (int64_t i = 0; i < t.numel(); ++i) t.set(i, rng.truncated_normal(sigma));
  return t;
}

AttnWeights make_attn(int64_t d, int64_t kv_dim, DType dt, Rng& rng) {
  AttnWeights w;
  w.wq = trunc_normal({d, d}, dt, rng);
  w.bq = Tensor::zeros({d}, dt);
  w.wk = trunc_normal({kv_dim, d}, dt, rng);
  w.bk = Tensor::zeros({d}, dt);
  w.wv = trunc_normal({kv_dim, d}, dt, rng);
  w.bv = Tensor::zeros({d}, dt);
  w.wo = trunc_normal({d, d}, dt, rng);
  w.bo = Tensor::zeros({d}, dt);
  return w;
}

Block make_block(int64_t d, int64_t ffn, bool cross, int64_t kv_dim, DType dt, Rng& rng) {
  Block b;
  b.ln1_g = Tensor::full({d}, 1.0, dt);
  b.ln1_b = Tensor::zeros({d}, dt);
  b.self_attn = make_attn(d, d, dt, rng);
  b.has_cross = cross;
  if (cross) {
    b.lnc_g = Tensor::full({d}, 1.0, dt);
    b.lnc_b = Tensor::zeros({d}, dt);
    b.cross_attn = make_attn(d, kv_dim, dt, rng);
  }
  b.ln2_g = Tensor::full({d}, 1.0, dt);
  b.ln2_b = Tensor::zeros({d}, dt);
  b.ffn_w1 = trunc_normal({d, ffn}, dt, rng);
  b.ffn_b1 = Tensor::zeros({ffn}, dt);
  b.ffn_w2 = trunc_normal({ffn, d}, dt, rng);
  b.ffn_b2 = Tensor::zeros({d}, dt);
  return b;
}

template <class Self, class Fn>
void visit_attn(Self& w, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".wq", w.wq);
  fn(prefix + ".bq", w.bq);
  fn(prefix + ".wk", w.wk);
  fn(prefix + ".bk", w.bk);
  fn(prefix + ".wv", w.wv);
  fn(prefix + ".bv", w.bv);
  fn(prefix + ".wo", w.wo);
  fn(prefix + ".bo", w.bo);
}

template <class BlockT, class Fn>
void visit_block(BlockT& b, const std::string& prefix, Fn&& fn) {
  fn(prefix + ".ln1.g", b.ln1_g);
  fn(prefix + ".ln1.b", b.ln1_b);
  visit_attn(b.self_attn, prefix + ".attn", fn);
  if (b.has_cross) {
    fn(prefix + ".lnc.g", b.lnc_g);
    fn(prefix + ".lnc.b", b.lnc_b);
    visit_attn(b.cross_attn, prefix + ".cross", fn);
  }
  fn(prefix + ".ln2.g", b.ln2_g);
  fn(prefix + ".ln2.b", b.ln2_b);
  fn(prefix + ".ffn.w1", b.ffn_w1);
  fn(prefix + ".ffn.b1", b.ffn_b1);
  fn(prefix + ".ffn.w2", b.ffn_w2);
  fn(prefix + ".ffn.b2", b.ffn_b2);
}

template <class ModelT, class Fn>
void visit_model(ModelT& m, Fn&& fn) {
  fn("vision.patch.w", m.patch_w);
  fn("vision.patch.b", m.patch_b);
  fn("vision.cls", m.cls_token);
  fn("vision.pos", m.vis_pos);
  for (size_t i = 0; i < m.vis_blocks.size(); ++i)
    visit_block(m.vis_blocks[i], "vision.block" + std::to_string(i), fn);
  fn("vision.lnf.g", m.vis_lnf_g);
  fn("vision.lnf.b", m.vis_lnf_b);

  fn("text.tok_emb", m.tok_emb);
  fn("text.pos", m.txt_pos);
  for (size_t i = 0; i < m.txt_blocks.size(); ++i)
    visit_block(m.txt_blocks[i], "text.block" + std::to_string(i), fn);
  fn("text.lnf.g", m.txt_lnf_g);
  fn("text.lnf.b", m.txt_lnf_b);

  for (size_t i = 0; i < m.dec_blocks.size(); ++i)
    visit_block(m.dec_blocks[i], "decoder.block" + std::to_string(i), fn);
  if (!m.dec_blocks.empty()) {
    fn("decoder.lnf.g", m.dec_lnf_g);
    fn("decoder.lnf.b", m.dec_lnf_b);
    fn("decoder.lm_bias", m.lm_bias);
  }

  fn("heads.itc_img.w", m.itc_img_w);
  fn("heads.itc_img.b", m.itc_img_b);
  fn("heads.itc_txt.w", m.itc_txt_w);
  fn("heads.itc_txt.b", m.itc_txt_b);
  fn("heads.itm.w", m.itm_w);
  fn("heads.itm.b", m.itm_b);
  fn("heads.temperature", m.temperature);
}

}  // namespace

MEDModel MEDModel::build(const ModelConfig& cfg, DType dtype, Rng rng) {
  cfg.validate();
  MEDModel m;
  m.cfg = cfg;
  m.dtype = dtype;
  const auto& v = cfg.vision;
  const auto& t = cfg.text;
  int64_t patch_in = v.in_channels * v.patch_size * v.patch_size;

  m.patch_w = trunc_normal({patch_in, v.embed_dim}, dtype, rng);
  m.patch_b = Tensor::zeros({v.embed_dim}, dtype);
  m.cls_token = trunc_normal({v.embed_dim}, dtype, rng);
  m.vis_pos = trunc_normal({cfg.vision_tokens(), v.embed_dim}, dtype, rng);
  for (int64_t i = 0; i < v.n_layers; ++i)
    m.vis_blocks.push_back(make_block(v.embed_dim, cfg.vision_ffn(), false, 0, dtype, rng));
  m.vis_lnf_g = Tensor::full({v.embed_dim}, 1.0, dtype);
  m.vis_lnf_b = Tensor::zeros({v.embed_dim}, dtype);

  m.tok_emb = trunc_normal({t.vocab_size, t.embed_dim}, dtype, rng);
  m.txt_pos = trunc_normal({t.max_len, t.embed_dim}, dtype, rng);
  int64_t fusion_from = t.n_layers - cfg.fusion_layers();
  for (int64_t i = 0; i < t.n_layers; ++i) {
    bool cross = i >= fusion_from;
    m.txt_blocks.push_back(make_block(t.embed_dim, cfg.text_ffn(), cross, v.embed_dim, dtype, rng));
  }
  m.txt_lnf_g = Tensor::full({t.embed_dim}, 1.0, dtype);
  m.txt_lnf_b = Tensor::zeros({t.embed_dim}, dtype);

  for (int64_t i = 0; i < cfg.decoder.n_layers; ++i)
    m.dec_blocks.push_back(make_block(t.embed_dim, cfg.text_ffn(), true, v.embed_dim, dtype, rng));
  if (cfg.has_decoder()) {
    m.dec_lnf_g = Tensor::full({t.embed_dim}, 1.0, dtype);
    m.dec_lnf_b = Tensor::zeros({t.embed_dim}, dtype);
    m.lm_bias = Tensor::zeros({t.vocab_size}, dtype);
  }

  int64_t e = cfg.resolved_itc_dim();
  m.itc_img_w = trunc_normal({v.embed_dim, e}, dtype, rng);
  m.itc_img_b = Tensor::zeros({e}, dtype);
  m.itc_txt_w = trunc_normal({t.embed_dim, e}, dtype, rng);
  m.itc_txt_b = Tensor::zeros({e}, dtype);
  m.itm_w = trunc_normal({t.embed_dim, 2}, dtype, rng);
  m.itm_b = Tensor::zeros({2}, dtype);
  m.temperature = Tensor::scalar(0.07, dtype);
  return m;
}

void MEDModel::for_each_param(const std::function<void(const std::string&, Tensor&)>& fn) {
  visit_model(*this, fn);
}

void MEDModel::for_each_param(
    const std::function<void(const std::string&, const Tensor&)>& fn) const {
  visit_model(*this, fn);
}

int64_t MEDModel::param_count() const {
  int64_t n = 0;
  for_each_param([&](const std::string&, const Tensor& t) { n += t.numel(); });
  return n;
}

std::vector<std::pair<std::string, Shape>> MEDModel::shape_inventory() const {
  std::vector<std::pair<std::string, Shape>> out;
  for_each_param([&](const std::string& name, const Tensor& t) { out.emplace_back(name, t.shape()); });
  return out;
}

void MEDModel::set_requires_grad(bool b) {
  for_each_param([&](const std::string&, Tensor& t) { t.set_requires_grad(b); });
}

void MEDModel::zero_grads() {
  for_each_param([&](const std::string&, Tensor& t) { t.zero_grad(); });
}

MEDModel MEDModel::clone() const { return *this; }

// --------------------------------------------------------------- forwards

namespace {

Var linear(Graph& g, Var x2d, Tensor& w, Tensor& b) {
  return g.add_rowvec(g.matmul(x2d, g.leaf(w)), g.leaf(b));
}

Var norm_last(Graph& g, Var x, Tensor& gamma, Tensor& beta) {
  return g.layer_norm(x, g.leaf(gamma), g.leaf(beta), 1e-6);
}

// Additive attention mask [B*h, Lq, Lkv]: 0 where the key is attendable,
// a large negative value otherwise. Underflows to exact zero probability
// after the stabilized softmax.
Tensor build_mask(int64_t batch, int64_t heads, int64_t q_len, int64_t kv_len,
                  const TokenBatch* key_pad, bool causal, DType dt) {
  Tensor mask = Tensor::zeros({batch * heads, q_len, kv_len}, dt);
  for (int64_t b = 0; b < batch; ++b) {
    for (int64_t q = 0; q < q_len; ++q) {
      for (int64_t k = 0; k < kv_len; ++k) {
        bool blocked = false;
        if (causal && k > q) blocked = true;
        if (key_pad && !key_pad->valid_at(b, k)) blocked = true;
        if (!blocked) continue;
        for (int64_t h = 0; h < heads; ++h)
          mask.set(((b * heads + h) * q_len + q) * kv_len + k, kMaskNegative);
      }
    }
  }
  return mask;
}

struct AttnArgs {
  int64_t heads = 0;
  const Tensor* additive_mask = nullptr;  // may be null
  AttentionRecord* record = nullptr;
  int layer = 0;
  AttnKind kind = AttnKind::Self;
};

// x: [B, Lq, d] queries; kv: [B, Lkv, kv_dim] keys/values source.
Var attention(Graph& g, AttnWeights& w, Var x, Var kv, const AttnArgs& args) {
  const Shape xs = g.value(x).shape();
  const Shape ks = g.value(kv).shape();
  int64_t B = xs[0], Lq = xs[1], d = xs[2];
  int64_t Lkv = ks[1], kv_dim = ks[2];
  int64_t h = args.heads;
  int64_t dh = d / h;

  Var x2 = g.reshape(x, {B * Lq, d});
  Var kv2 = g.reshape(kv, {B * Lkv, kv_dim});
  Var q = g.split_heads(g.reshape(linear(g, x2, w.wq, w.bq), {B, Lq, d}), h);
  Var k = g.split_heads(g.reshape(linear(g, kv2, w.wk, w.bk), {B, Lkv, d}), h);
  Var v = g.split_heads(g.reshape(linear(g, kv2, w.wv, w.bv), {B, Lkv, d}), h);

  Var scores = g.scale(g.bmm(q, k, /*trans_b=*/true), 1.0 / std::sqrt(static_cast<double>(dh)));
  if (args.additive_mask) scores = g.add(scores, g.constant(*args.additive_mask));
  Var probs = g.row_softmax(scores);
  if (args.record) {
    *args.record = AttentionRecord{args.layer, args.kind, h, B, Lq, Lkv, probs};
  }
  Var mixed = g.merge_heads(g.bmm(probs, v), h);
  Var out2 = linear(g, g.reshape(mixed, {B * Lq, d}), w.wo, w.bo);
  return g.reshape(out2, {B, Lq, d});
}

Var ffn(Graph& g, Block& blk, Var x) {
  const Shape xs = g.value(x).shape();
  int64_t B = xs[0], L = xs[1], d = xs[2];
  Var x2 = g.reshape(x, {B * L, d});
  Var hmid = g.gelu(linear(g, x2, blk.ffn_w1, blk.ffn_b1));
  Var out = linear(g, hmid, blk.ffn_w2, blk.ffn_b2);
  return g.reshape(out, {B, L, d});
}

// Pre-norm residual block; cross-attention between self-attention and FFN
// when active (queries text, keys/values vision).
Var run_block(Graph& g, Block& blk, Var x, const Tensor* self_mask, int64_t heads,
              bool use_cross, Var cross_kv, const Tensor* cross_mask, int layer,
              std::vector<AttentionRecord>* self_rec, std::vector<AttentionRecord>* cross_rec) {
  AttnArgs sa;
  sa.heads = heads;
  sa.additive_mask = self_mask;
  sa.layer = layer;
  sa.kind = AttnKind::Self;
  AttentionRecord srec;
  if (self_rec) sa.record = &srec;
  Var xn = norm_last(g, x, blk.ln1_g, blk.ln1_b);
  Var y = g.add(x, attention(g, blk.self_attn, xn, xn, sa));
  if (self_rec) self_rec->push_back(srec);

  if (use_cross && blk.has_cross) {
    AttnArgs ca;
    ca.heads = heads;
    ca.additive_mask = cross_mask;
    ca.layer = layer;
    ca.kind = AttnKind::Cross;
    AttentionRecord crec;
    if (cross_rec) ca.record = &crec;
    Var qn = norm_last(g, y, blk.lnc_g, blk.lnc_b);
    y = g.add(y, attention(g, blk.cross_attn, qn, cross_kv, ca));
    if (cross_rec) cross_rec->push_back(crec);
  }

  return g.add(y, ffn(g, blk, norm_last(g, y, blk.ln2_g, blk.ln2_b)));
}

// [B, C, H, W] image batch -> [B*Np, C*p*p] patch matrix (plain data).
Tensor patchify(const Tensor& images, const ModelConfig& cfg, DType dt) {
  const auto& v = cfg.vision;
  if (images.rank() != 4 || images.dim(1) != v.in_channels || images.dim(2) != v.image_size ||
      images.dim(3) != v.image_size)
    throw ShapeError("encode_image: images " + shape_str(images.shape()) + " vs expected [B," +
                     std::to_string(v.in_channels) + "," + std::to_string(v.image_size) + "," +
                     std::to_string(v.image_size) + "]");
  int64_t B = images.dim(0);
  int64_t p = v.patch_size;
  int64_t grid = v.image_size / p;
  int64_t np = grid * grid;
  int64_t pin = v.in_channels * p * p;
  Tensor out = Tensor::zeros({B * np, pin}, dt);
  Tensor img = images.dtype() == dt ? images : images.to_dtype(dt);
  with_dtype(dt, [&](auto s) {
    using S = decltype(s);
    auto src = img.data<S>();
    auto dst = out.data<S>();
    int64_t hw = v.image_size * v.image_size;
    for (int64_t b = 0; b < B; ++b)
      for (int64_t gy = 0; gy < grid; ++gy)
        for (int64_t gx = 0; gx < grid; ++gx) {
          int64_t row = (b * np + gy * grid + gx) * pin;
          for (int64_t c = 0; c < v.in_channels; ++c)
            for (int64_t py = 0; py < p; ++py)
              for (int64_t px = 0; px < p; ++px) {
                int64_t sp = b * v.in_channels * hw + c * hw + (gy * p + py) * v.image_size +
                             (gx * p + px);
                dst[row + c * p * p + py * p + px] = src[sp];
              }
        }
    return 0;
  });
  return out;
}

// pos: [max, d] parameter; adds rows [0, L) to x [B, L, d].
Var add_positions(Graph& g, Tensor& pos, Var x) {
  const Shape xs = g.value(x).shape();
  int64_t B = xs[0], L = xs[1], d = xs[2];
  Var rows = g.slice(g.leaf(pos), 0, 0, L);
  Var flat = g.reshape(rows, {L * d});
  return g.add(x, g.reshape(g.broadcast_rows(flat, B), {B, L, d}));
}

void check_tokens(const MEDModel& m, const TokenBatch& toks) {
  if (toks.batch <= 0 || toks.len <= 0 ||
      toks.ids.size() != static_cast<size_t>(toks.batch * toks.len) ||
      toks.mask.size() != toks.ids.size())
    throw ContractError("token batch is malformed");
  if (toks.len > m.cfg.text.max_len)
    throw ContractError("token length " + std::to_string(toks.len) + " exceeds max_len " +
                        std::to_string(m.cfg.text.max_len));
}

}  // namespace

Var vision_forward(Graph& g, MEDModel& m, const Tensor& images, ForwardTrace* tr) {
  const auto& vc = m.cfg.vision;
  Tensor patches = patchify(images, m.cfg, m.dtype);
  int64_t B = images.dim(0);
  int64_t np = m.cfg.n_patches();
  Var emb2 = linear(g, g.constant(patches), m.patch_w, m.patch_b);
  Var emb = g.reshape(emb2, {B, np, vc.embed_dim});
  Var cls = g.reshape(g.broadcast_rows(g.leaf(m.cls_token), B), {B, 1, vc.embed_dim});
  Var x = g.concat(cls, emb, 1);
  x = add_positions(g, m.vis_pos, x);
  for (size_t i = 0; i < m.vis_blocks.size(); ++i) {
    x = run_block(g, m.vis_blocks[i], x, nullptr, vc.n_heads, false, Var{}, nullptr,
                  static_cast<int>(i), tr ? &tr->vision_attn : nullptr, nullptr);
    if (tr) tr->vision_states.push_back(x);
  }
  Var final = norm_last(g, x, m.vis_lnf_g, m.vis_lnf_b);
  if (tr) {
    tr->vision_final = final;
    tr->batch = B;
  }
  return final;
}

Var pool_image(Graph& g, MEDModel& m, Var vision_final) {
  const Shape s = g.value(vision_final).shape();
  Var cls = g.reshape(g.slice(vision_final, 1, 0, 1), {s[0], s[2]});
  return g.l2_normalize_rows(linear(g, cls, m.itc_img_w, m.itc_img_b));
}

Var text_forward(Graph& g, MEDModel& m, const TokenBatch& toks, TextMode mode, Var vision_final,
                 ForwardTrace* tr) {
  check_tokens(m, toks);
  const auto& tc = m.cfg.text;
  if (mode == TextMode::Fused) {
    if (m.cfg.fusion_layers() == 0)
      throw ConfigError("fused text pass requested but n_fusion_layers == 0");
    if (!vision_final.defined())
      throw ContractError("fused text pass needs vision states");
  }
  int64_t B = toks.batch, L = toks.len;
  Var x = g.reshape(g.embedding(g.leaf(m.tok_emb), toks.ids), {B, L, tc.embed_dim});
  x = add_positions(g, m.txt_pos, x);
  bool causal = mode == TextMode::CausalUnimodal;
  Tensor self_mask = build_mask(B, tc.n_heads, L, L, &toks, causal, m.dtype);
  bool fused = mode == TextMode::Fused;
  auto* self_rec = tr ? (fused ? &tr->fused_self_attn : &tr->text_attn) : nullptr;
  auto* cross_rec = tr && fused ? &tr->fused_cross_attn : nullptr;
  auto* states = tr ? (fused ? &tr->fused_states : &tr->text_states) : nullptr;
  for (size_t i = 0; i < m.txt_blocks.size(); ++i) {
    x = run_block(g, m.txt_blocks[i], x, &self_mask, tc.n_heads, fused, vision_final, nullptr,
                  static_cast<int>(i), self_rec, cross_rec);
    if (states) states->push_back(x);
  }
  Var final = norm_last(g, x, m.txt_lnf_g, m.txt_lnf_b);
  if (tr) {
    if (fused)
      tr->fused_final = final;
    else {
      tr->text_final = final;
      tr->tokens = toks;
    }
    tr->batch = B;
  }
  return final;
}

Var pool_text(Graph& g, MEDModel& m, Var text_final) {
  const Shape s = g.value(text_final).shape();
  Var first = g.reshape(g.slice(text_final, 1, 0, 1), {s[0], s[2]});
  return g.l2_normalize_rows(linear(g, first, m.itc_txt_w, m.itc_txt_b));
}

Var decoder_forward(Graph& g, MEDModel& m, const TokenBatch& toks, Var vision_final,
                    ForwardTrace* tr) {
  if (!m.cfg.has_decoder()) throw ConfigError("decoder requested but decoder.n_layers == 0");
  check_tokens(m, toks);
  if (!vision_final.defined()) throw ContractError("decoder needs vision states");
  const auto& tc = m.cfg.text;
  int64_t B = toks.batch, L = toks.len;
  Var x = g.reshape(g.embedding(g.leaf(m.tok_emb), toks.ids), {B, L, tc.embed_dim});
  x = add_positions(g, m.txt_pos, x);
  Tensor causal_mask = build_mask(B, tc.n_heads, L, L, &toks, true, m.dtype);
  for (size_t i = 0; i < m.dec_blocks.size(); ++i) {
    x = run_block(g, m.dec_blocks[i], x, &causal_mask, tc.n_heads, true, vision_final, nullptr,
                  static_cast<int>(i), tr ? &tr->dec_self_attn : nullptr,
                  tr ? &tr->dec_cross_attn : nullptr);
    if (tr) tr->decoder_states.push_back(x);
  }
  Var final = norm_last(g, x, m.dec_lnf_g, m.dec_lnf_b);
  if (tr) tr->decoder_final = final;
  return final;
}

Var lm_logits(Graph& g, MEDModel& m, Var decoder_states) {
  const Shape s = g.value(decoder_states).shape();
  Var flat = g.reshape(decoder_states, {s[0] * s[1], s[2]});
  return g.add_rowvec(g.matmul(flat, g.transpose(g.leaf(m.tok_emb))), g.leaf(m.lm_bias));
}

Var encode_image(Graph& g, MEDModel& m, const Tensor& images, ForwardTrace* tr) {
  Var final = vision_forward(g, m, images, tr);
  Var pooled = pool_image(g, m, final);
  if (tr) tr->image_embed = pooled;
  return pooled;
}

Var encode_text(Graph& g, MEDModel& m, const TokenBatch& toks, ForwardTrace* tr) {
  Var final = text_forward(g, m, toks, TextMode::Unimodal, Var{}, tr);
  Var pooled = pool_text(g, m, final);
  if (tr) tr->text_embed = pooled;
  return pooled;
}

ForwardTrace forward_collect(Graph& g, MEDModel& m, const Tensor& images, const TokenBatch& toks) {
  ForwardTrace tr;
  Var vfinal = vision_forward(g, m, images, &tr);
  tr.image_embed = pool_image(g, m, vfinal);
  Var tfinal = text_forward(g, m, toks, TextMode::Unimodal, Var{}, &tr);
  tr.text_embed = pool_text(g, m, tfinal);
  text_forward(g, m, toks, TextMode::Fused, vfinal, &tr);
  if (m.cfg.has_decoder()) decoder_forward(g, m, toks, vfinal, &tr);
  return tr;
}

std::vector<std::vector<int64_t>> generate_greedy(MEDModel& m, const Tensor& images,
                                                  const std::vector<int64_t>& prompt_ids,
                                                  int64_t max_new, int64_t bos_id, int64_t eos_id) {
  if (!m.cfg.has_decoder()) throw ConfigError("generate: model has no decoder");
  int64_t B = images.dim(0);
  Graph g(m.dtype);
  Var vfinal = vision_forward(g, m, images, nullptr);

  std::vector<std::vector<int64_t>> rows(static_cast<size_t>(B));
  for (auto& r : rows) {
    r.push_back(bos_id);
    r.insert(r.end(), prompt_ids.begin(), prompt_ids.end());
  }
  std::vector<uint8_t> done(static_cast<size_t>(B), 0);
  int64_t vocab = m.cfg.text.vocab_size;

  for (int64_t step = 0; step < max_new; ++step) {
    int64_t L = static_cast<int64_t>(rows[0].size());
    if (L >= m.cfg.text.max_len) break;
    TokenBatch tb;
    tb.batch = B;
    tb.len = L;
    tb.ids.reserve(static_cast<size_t>(B * L));
    tb.mask.assign(static_cast<size_t>(B * L), 1);
    for (const auto& r : rows) tb.ids.insert(tb.ids.end(), r.begin(), r.end());
    Var states = decoder_forward(g, m, tb, vfinal, nullptr);
    Var logits = lm_logits(g, m, states);
    const Tensor& lv = g.value(logits);  // [B*L, V]
    bool all_done = true;
    for (int64_t b = 0; b < B; ++b) {
      if (done[(size_t)b]) {
        rows[(size_t)b].push_back(eos_id);
        continue;
      }
      int64_t base = (b * L + (L - 1)) * vocab;
      int64_t best = 0;
      double best_v = lv.at(base);
      for (int64_t j = 1; j < vocab; ++j) {
        double v = lv.at(base + j);
        if (v > best_v) {  // ties resolve to the lowest id
          best_v = v;
          best = j;
        }
      }
      rows[(size_t)b].push_back(best);
      if (best == eos_id)
        done[(size_t)b] = 1;
      else
        all_done = false;
    }
    if (all_done) break;
  }

  // Strip BOS and anything from EOS on.
  std::vector<std::vector<int64_t>> out(static_cast<size_t>(B));
  for (int64_t b = 0; b < B; ++b) {
    const auto& r = rows[(size_t)b];
    for (size_t i = 1; i < r.size(); ++i) {
      if (r[i] == eos_id) break;
      out[(size_t)b].push_back(r[i]);
    }
  }
  return out;
}

namespace {
Tensor last_probs(const Graph& g, const std::vector<AttentionRecord>& recs) {
  if (recs.empty()) return Tensor{};
  return g.value(recs.back().probs);
}
}  // namespace

TraceSnapshot snapshot_trace(const Graph& g, const ForwardTrace& tr, const MEDModel& m) {
  TraceSnapshot s;
  s.batch = tr.batch;
  s.tokens = tr.tokens;
  s.vision_heads = m.cfg.vision.n_heads;
  s.text_heads = m.cfg.text.n_heads;
  if (tr.vision_final.defined()) s.vision_final = g.value(tr.vision_final);
  if (tr.text_final.defined()) s.text_final = g.value(tr.text_final);
  if (tr.fused_final.defined()) s.fused_final = g.value(tr.fused_final);
  if (tr.decoder_final.defined()) s.decoder_final = g.value(tr.decoder_final);
  s.vision_self_probs = last_probs(g, tr.vision_attn);
  s.text_self_probs = last_probs(g, tr.text_attn);
  s.fused_self_probs = last_probs(g, tr.fused_self_attn);
  s.fused_cross_probs = last_probs(g, tr.fused_cross_attn);
  s.dec_self_probs = last_probs(g, tr.dec_self_attn);
  s.dec_cross_probs = last_probs(g, tr.dec_cross_attn);
  return s;
}

}  // namespace medlab
