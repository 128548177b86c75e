#include "medlab/pretrain.hpp"

#include <cmath>

namespace medlab {

MomentumEncoder MomentumEncoder::init(const MEDModel& online, double mu) {
  MomentumEncoder mom;
  mom.ema = online.clone();
  mom.ema.set_requires_grad(false);
  mom.mu = mu;
  return mom;
}

void MomentumEncoder::update(const MEDModel& online) {
  std::vector<const Tensor*> src;
  online.for_each_param([&](const std::string&, const Tensor& t) { src.push_back(&t); });
  size_t i = 0;
  ema.for_each_param([&](const std::string&, Tensor& t) {
    t.lerp_toward(*src[i], 1.0 - mu);
    ++i;
  });
}

MomentumTargets momentum_soft_targets(MomentumEncoder& mom, const Tensor& images,
                                      const TokenBatch& toks) {
  Graph g(mom.ema.dtype);
  Var img = encode_image(g, mom.ema, images, nullptr);
  Var txt = encode_text(g, mom.ema, toks, nullptr);
  Var sim = g.div_by_scalar(g.matmul(img, g.transpose(txt)), g.leaf(mom.ema.temperature));
  MomentumTargets t;
  t.i2t = g.value(g.row_softmax(sim));
  t.t2i = g.value(g.row_softmax(g.transpose(sim)));
  return t;
}

namespace {

Tensor mix_targets(int64_t B, const Tensor* soft, double alpha, DType dt) {
  Tensor t = Tensor::zeros({B, B}, dt);
  for (int64_t i = 0; i < B; ++i) {
    for (int64_t j = 0; j < B; ++j) {
      double hard = i == j ? 1.0 : 0.0;
      double s = soft ? soft->at(i * B + j) : hard;
      t.set(i * B + j, (1.0 - alpha) * hard + alpha * s);
    }
  }
  return t;
}

}  // namespace

Var itc_loss(Graph& g, Var image_emb, Var text_emb, const MomentumTargets* mom,
             double alpha_soft, Var tau) {
  const Tensor& ie = g.value(image_emb);
  const Tensor& te = g.value(text_emb);
  if (ie.rank() != 2 || te.rank() != 2 || ie.shape() != te.shape())
    throw ShapeError("itc_loss: embeddings " + shape_str(ie.shape()) + " vs " +
                     shape_str(te.shape()));
  int64_t B = ie.dim(0);
  if (B < 2) throw ContractError("itc_loss: batch must be >= 2 (needs in-batch negatives)");
  double alpha = mom ? alpha_soft : 0.0;
  Var logits_i2t = g.div_by_scalar(g.matmul(image_emb, g.transpose(text_emb)), tau);
  Var logits_t2i = g.transpose(logits_i2t);
  Tensor tgt_i2t = mix_targets(B, mom ? &mom->i2t : nullptr, alpha, g.mode());
  Tensor tgt_t2i = mix_targets(B, mom ? &mom->t2i : nullptr, alpha, g.mode());
  Var a = g.cross_entropy_soft(logits_i2t, tgt_i2t);
  Var b = g.cross_entropy_soft(logits_t2i, tgt_t2i);
  return g.scale(g.add(a, b), 0.5);
}

HardNegatives sample_hard_negatives(const Tensor& similarity, Rng& rng) {
  if (similarity.rank() != 2 || similarity.dim(0) != similarity.dim(1))
    throw ShapeError("hard negatives: similarity must be square, got " +
                     shape_str(similarity.shape()));
  int64_t B = similarity.dim(0);
  if (B < 2) throw ContractError("hard negatives: batch must be >= 2");

  auto sample_row = [&](int64_t anchor, bool row_major) {
    // weights exp(sim) over the off-diagonal entries, max-stabilized
    double mx = -1e300;
    for (int64_t j = 0; j < B; ++j) {
      if (j == anchor) continue;
      double v = row_major ? similarity.at(anchor * B + j) : similarity.at(j * B + anchor);
      mx = std::max(mx, v);
    }
    std::vector<double> w(static_cast<size_t>(B), 0.0);
    double total = 0;
    for (int64_t j = 0; j < B; ++j) {
      if (j == anchor) continue;
      double v = row_major ? similarity.at(anchor * B + j) : similarity.at(j * B + anchor);
      w[(size_t)j] = std::exp(v - mx);
      total += w[(size_t)j];
    }
    double u = rng.uniform() * total;
    double acc = 0;
    for (int64_t j = 0; j < B; ++j) {
      if (j == anchor) continue;
      acc += w[(size_t)j];
      if (u < acc) return j;
    }
    return anchor == B - 1 ? B - 2 : B - 1;  // numeric edge: last off-diagonal
  };

  HardNegatives out;
  for (int64_t i = 0; i < B; ++i) out.text_for_image.push_back(sample_row(i, true));
  for (int64_t j = 0; j < B; ++j) out.image_for_text.push_back(sample_row(j, false));
  return out;
}

Var itm_binary_loss(Graph& g, Var pos_logits, Var neg_logits) {
  int64_t np = g.value(pos_logits).dim(0);
  int64_t nn = g.value(neg_logits).dim(0);
  Var lp = g.cross_entropy(pos_logits, std::vector<int64_t>((size_t)np, 1), -100);
  Var ln = g.cross_entropy(neg_logits, std::vector<int64_t>((size_t)nn, 0), -100);
  return g.scale(g.add(lp, ln), 0.5);
}

namespace {

Var itm_head(Graph& g, MEDModel& m, Var fused_final) {
  const Shape s = g.value(fused_final).shape();
  Var cls = g.reshape(g.slice(fused_final, 1, 0, 1), {s[0], s[2]});
  return g.add_rowvec(g.matmul(cls, g.leaf(m.itm_w)), g.leaf(m.itm_b));
}

}  // namespace

Var itm_loss(Graph& g, MEDModel& m, const TokenBatch& toks, Var vision_final,
             Var fused_final_pos, const HardNegatives& negs) {
  int64_t B = toks.batch;
  if (B < 2) throw ContractError("itm_loss: batch must be >= 2");

  // negative pairs: (image_i, text_{n(i)}) then (image_{n(j)}, text_j)
  TokenBatch neg_toks;
  neg_toks.batch = 2 * B;
  neg_toks.len = toks.len;
  auto push_row = [&](int64_t src_row) {
    for (int64_t t = 0; t < toks.len; ++t) {
      neg_toks.ids.push_back(toks.id_at(src_row, t));
      neg_toks.mask.push_back(toks.valid_at(src_row, t) ? 1 : 0);
    }
  };
  std::vector<int64_t> vis_idx;
  for (int64_t i = 0; i < B; ++i) {
    push_row(negs.text_for_image[(size_t)i]);
    vis_idx.push_back(i);
  }
  for (int64_t j = 0; j < B; ++j) {
    push_row(j);
    vis_idx.push_back(negs.image_for_text[(size_t)j]);
  }
  Var neg_vision = g.gather_rows0(vision_final, vis_idx);
  Var fused_neg = text_forward(g, m, neg_toks, TextMode::Fused, neg_vision, nullptr);

  Var pos_logits = itm_head(g, m, fused_final_pos);
  Var neg_logits = itm_head(g, m, fused_neg);
  return itm_binary_loss(g, pos_logits, neg_logits);
}

Var lm_loss_from_states(Graph& g, MEDModel& m, Var decoder_final, const TokenBatch& toks,
                        double label_smoothing) {
  if (!m.cfg.has_decoder()) throw ConfigError("lm_loss: model has no decoder");
  constexpr int64_t kIgnore = -100;
  std::vector<int64_t> targets;
  targets.reserve(toks.ids.size());
  for (int64_t b = 0; b < toks.batch; ++b)
    for (int64_t t = 0; t < toks.len; ++t) {
      bool has_next = t + 1 < toks.len && toks.valid_at(b, t + 1);
      targets.push_back(has_next && toks.valid_at(b, t) ? toks.id_at(b, t + 1) : kIgnore);
    }
  Var logits = lm_logits(g, m, decoder_final);
  return g.cross_entropy(logits, std::move(targets), kIgnore, label_smoothing);
}

PretrainOutputs pretrain_losses(Graph& g, MEDModel& m, const Batch& batch, MomentumEncoder* mom,
                                Rng& itm_rng, const PretrainParams& params) {
  if (!m.cfg.has_decoder())
    throw ConfigError("pretraining needs a decoder: the objective includes the LM term");
  PretrainOutputs out;
  Tensor images = batch.images.to_dtype(m.dtype);
  out.trace = forward_collect(g, m, images, batch.tokens);

  MomentumTargets targets;
  if (mom) targets = momentum_soft_targets(*mom, images, batch.tokens);
  Var tau = g.leaf(m.temperature);
  out.itc = itc_loss(g, out.trace.image_embed, out.trace.text_embed, mom ? &targets : nullptr,
                     params.alpha_soft, tau);

  Var sim_var = g.div_by_scalar(g.matmul(out.trace.image_embed, g.transpose(out.trace.text_embed)),
                                tau);
  out.similarity = g.value(sim_var);
  HardNegatives negs = sample_hard_negatives(out.similarity, itm_rng);
  out.itm = itm_loss(g, m, batch.tokens, out.trace.vision_final, out.trace.fused_final, negs);

  out.lm = lm_loss_from_states(g, m, out.trace.decoder_final, batch.tokens,
                               params.label_smoothing);
  out.vlp = g.add(g.add(out.itc, out.itm), out.lm);
  return out;
}

}  // namespace medlab
