#pragma once

#include "medlab/data.hpp"
#include "medlab/model.hpp"
#include "medlab/rng.hpp"

namespace medlab {

// EMA copy of the online model. Produces stop-gradient soft targets for the
// contrastive loss; never receives gradients.
struct MomentumEncoder {
  MEDModel ema;
  double mu = 0.995;

  static MomentumEncoder init(const MEDModel& online, double mu);
  // ema <- mu * ema + (1 - mu) * online, applied after each optimizer step.
  void update(const MEDModel& online);
};

// Row-stochastic [B,B] similarity softmaxes from the momentum encoder,
// one per retrieval direction. Plain data (already detached).
struct MomentumTargets {
  Tensor i2t;
  Tensor t2i;
};

MomentumTargets momentum_soft_targets(MomentumEncoder& mom, const Tensor& images,
                                      const TokenBatch& toks);

// Bidirectional contrastive loss over in-batch similarities at learnable
// temperature tau. Targets are (1-alpha_soft) one-hot + alpha_soft momentum
// softmax; pass mom=nullptr (or alpha_soft=0) for plain one-hot targets.
// Embeddings must be L2-normalized rows; batch must be >= 2.
Var itc_loss(Graph& g, Var image_emb, Var text_emb, const MomentumTargets* mom,
             double alpha_soft, Var tau);

// In-batch hard negatives: one negative text per image and one negative image
// per text, sampled with probability proportional to exp(similarity) off the
// diagonal. `similarity` is the [B,B] temperature-scaled matrix.
struct HardNegatives {
  std::vector<int64_t> text_for_image;  // j != i
  std::vector<int64_t> image_for_text;
};

HardNegatives sample_hard_negatives(const Tensor& similarity, Rng& rng);

// Class-balanced binary cross-entropy over match logits [N,2] (label 1 =
// matched): mean over positives and mean over negatives, equally weighted.
Var itm_binary_loss(Graph& g, Var pos_logits, Var neg_logits);

// Runs one fused pass over the 2B sampled negative pairs, reuses the positive
// pass's fused states, and applies the ITM head.
Var itm_loss(Graph& g, MEDModel& m, const TokenBatch& toks, Var vision_final,
             Var fused_final_pos, const HardNegatives& negs);

// Next-token cross-entropy over the caption conditioned on the image through
// the decoder's cross-attention. PAD positions are ignored.
Var lm_loss_from_states(Graph& g, MEDModel& m, Var decoder_final, const TokenBatch& toks,
                        double label_smoothing);

struct PretrainLossReport {
  double l_itc = 0, l_itm = 0, l_lm = 0, l_vlp = 0;
  Tensor similarity;  // diagnostic [B,B]
};

struct PretrainOutputs {
  ForwardTrace trace;
  Var itc, itm, lm, vlp;
  Tensor similarity;  // value of the scaled similarity matrix
};

struct PretrainParams {
  double alpha_soft = 0.4;
  double label_smoothing = 0.1;
};

// Full pretraining objective on one batch: forward_collect + ITC + ITM + LM,
// vlp = unweighted sum. Requires a decoder (LM is part of the sum).
PretrainOutputs pretrain_losses(Graph& g, MEDModel& m, const Batch& batch, MomentumEncoder* mom,
                                Rng& itm_rng, const PretrainParams& params);

}  // namespace medlab
