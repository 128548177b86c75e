#pragma once

#include <functional>
#include <string>
#include <vector>

#include "medlab/config.hpp"
#include "medlab/graph.hpp"
#include "medlab/rng.hpp"
#include "medlab/tensor.hpp"

namespace medlab {

// A padded batch of token rows. mask[i]=1 marks a real token, 0 padding.
struct TokenBatch {
  int64_t batch = 0;
  int64_t len = 0;
  std::vector<int64_t> ids;    // row-major [batch, len]
  std::vector<uint8_t> mask;   // same layout

  int64_t id_at(int64_t b, int64_t t) const { return ids[(size_t)(b * len + t)]; }
  bool valid_at(int64_t b, int64_t t) const { return mask[(size_t)(b * len + t)] != 0; }
};

struct AttnWeights {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct Block {
  Tensor ln1_g, ln1_b;
  AttnWeights self_attn;
  bool has_cross = false;
  Tensor lnc_g, lnc_b;
  AttnWeights cross_attn;  // keys/values read a kv_dim-wide sequence
  Tensor ln2_g, ln2_b;
  Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
};

// Mixture of encoder-decoder weights: ViT vision encoder, text encoder whose
// top layers cross-attend to vision states, and a causal decoder that shares
// the token/position embeddings with the text encoder.
struct MEDModel {
  ModelConfig cfg;
  DType dtype = DType::F64;

  Tensor patch_w, patch_b, cls_token, vis_pos;
  std::vector<Block> vis_blocks;
  Tensor vis_lnf_g, vis_lnf_b;

  Tensor tok_emb, txt_pos;
  std::vector<Block> txt_blocks;
  Tensor txt_lnf_g, txt_lnf_b;

  std::vector<Block> dec_blocks;
  Tensor dec_lnf_g, dec_lnf_b;
  Tensor lm_bias;  // LM head is tied to tok_emb; only the bias is separate

  Tensor itc_img_w, itc_img_b, itc_txt_w, itc_txt_b;
  Tensor itm_w, itm_b;
  Tensor temperature;  // scalar, learnable, clamped by the optimizer step

  static MEDModel build(const ModelConfig& cfg, DType dtype, Rng rng);

  // Visits every parameter in a fixed order with a hierarchical name.
  void for_each_param(const std::function<void(const std::string&, Tensor&)>& fn);
  void for_each_param(const std::function<void(const std::string&, const Tensor&)>& fn) const;

  int64_t param_count() const;
  // (name, shape) pairs in visit order; a pure function of cfg.
  std::vector<std::pair<std::string, Shape>> shape_inventory() const;
  void set_requires_grad(bool b);
  void zero_grads();
  MEDModel clone() const;
};

enum class AttnKind { Self, Cross };

struct AttentionRecord {
  int layer = 0;
  AttnKind kind = AttnKind::Self;
  int64_t heads = 0, batch = 0, q_len = 0, kv_len = 0;
  Var probs;  // [batch*heads, q_len, kv_len], rows are distributions
};

// Everything one batch's forward produced that training and distillation
// consume: per-layer states [B,L,d], attention maps, pooled embeddings.
struct ForwardTrace {
  int64_t batch = 0;
  std::vector<Var> vision_states;   // one per vision block
  Var vision_final;                 // post final-LN, feeds fusion/pooling
  std::vector<AttentionRecord> vision_attn;

  TokenBatch tokens;                // the text batch the trace was built from
  std::vector<Var> text_states;     // unimodal pass
  Var text_final;
  std::vector<AttentionRecord> text_attn;

  std::vector<Var> fused_states;    // fused pass (positive pairs)
  Var fused_final;
  std::vector<AttentionRecord> fused_self_attn;
  std::vector<AttentionRecord> fused_cross_attn;

  std::vector<Var> decoder_states;
  Var decoder_final;
  std::vector<AttentionRecord> dec_self_attn;
  std::vector<AttentionRecord> dec_cross_attn;

  Var image_embed;  // [B, itc_dim], L2-normalized
  Var text_embed;
};

// Unimodal: bidirectional self-attention only. Fused: top layers cross-attend
// to vision states. CausalUnimodal: causal self-attention, no cross (used by
// the text-only proxy pretraining task).
enum class TextMode { Unimodal, Fused, CausalUnimodal };

// ---- forward passes (all batched; single-threaded; deterministic) ----

// images: [B, C, H, W] with H == W == cfg.vision.image_size.
// Returns final vision states [B, Lv, d_v]; fills trace states/attention.
Var vision_forward(Graph& g, MEDModel& m, const Tensor& images, ForwardTrace* tr);

// Pooled, projected, L2-normalized class-token embedding [B, itc_dim].
Var pool_image(Graph& g, MEDModel& m, Var vision_final);

// mode Unimodal: bidirectional self-attention only. mode Fused: the top
// n_fusion_layers additionally cross-attend to vision_final (which must be
// given). Returns final states [B, L, d_t].
Var text_forward(Graph& g, MEDModel& m, const TokenBatch& toks, TextMode mode,
                 Var vision_final, ForwardTrace* tr);

Var pool_text(Graph& g, MEDModel& m, Var text_final);

// Causal decoder over prefix tokens, cross-attending to vision states.
// Returns decoder states [B, L, d_t].
Var decoder_forward(Graph& g, MEDModel& m, const TokenBatch& toks, Var vision_final,
                    ForwardTrace* tr);

// Vocabulary logits [B*L, V] from decoder states (tied LM head).
Var lm_logits(Graph& g, MEDModel& m, Var decoder_states);

// Convenience wrappers matching the coarse operations.
Var encode_image(Graph& g, MEDModel& m, const Tensor& images, ForwardTrace* tr);  // pooled
Var encode_text(Graph& g, MEDModel& m, const TokenBatch& toks, ForwardTrace* tr); // pooled

// One pass over a batch of aligned pairs computing every state the three
// pretraining losses and both distillation losses need. The vision encoder
// runs once; fused/decoder passes reuse its output.
ForwardTrace forward_collect(Graph& g, MEDModel& m, const Tensor& images, const TokenBatch& toks);

// Greedy autoregressive decoding; returns caption token ids per row
// (prompt included, BOS/EOS stripped). max_new bounds generated tokens.
std::vector<std::vector<int64_t>> generate_greedy(MEDModel& m, const Tensor& images,
                                                  const std::vector<int64_t>& prompt_ids,
                                                  int64_t max_new, int64_t bos_id, int64_t eos_id);

// Plain-data teacher-side copy of a trace (values only, detached).
struct TraceSnapshot {
  int64_t batch = 0;
  TokenBatch tokens;
  Tensor vision_final, text_final, fused_final, decoder_final;
  Tensor vision_self_probs, text_self_probs;       // last layer
  Tensor fused_self_probs, fused_cross_probs;
  Tensor dec_self_probs, dec_cross_probs;
  int64_t vision_heads = 0, text_heads = 0;
};

TraceSnapshot snapshot_trace(const Graph& g, const ForwardTrace& tr, const MEDModel& m);

}  // namespace medlab
