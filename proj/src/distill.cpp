#include "medlab/distill.hpp"

#include <cmath>

namespace medlab {

const char* channel_name(Channel c) {
  switch (c) {
    case Channel::Img: return "img";
    case Channel::Text: return "text";
    case Channel::VL_E: return "vl_e";
    case Channel::VL_D: return "vl_d";
  }
  return "?";
}

Channel channel_from_name(const std::string& s) {
  if (s == "img") return Channel::Img;
  if (s == "text") return Channel::Text;
  if (s == "vl_e") return Channel::VL_E;
  if (s == "vl_d") return Channel::VL_D;
  throw ConfigError("unknown distillation channel '" + s + "'");
}

void DistillPlan::validate(const ModelConfig& teacher, const ModelConfig& student) const {
  if (alpha != 0.0 && channels.empty() && (use_hr || use_at))
    throw ConfigError("distillation enabled but no channels selected");
  if (use_at && !at_self && !at_cross && alpha != 0.0 && !channels.empty())
    throw ConfigError("attention transfer enabled but both kinds disabled");
  for (Channel c : channels) {
    if (c == Channel::VL_D && (!teacher.has_decoder() || !student.has_decoder()))
      throw ConfigError("channel vl_d requires a decoder on both teacher and student");
  }
  if (common_dim <= 0) throw ConfigError("common_dim must be positive");
}

namespace {

int64_t channel_dim(const ModelConfig& cfg, Channel c) {
  return c == Channel::Img ? cfg.vision.embed_dim : cfg.text.embed_dim;
}

}  // namespace

DistillProjections DistillProjections::init(const DistillPlan& plan, const ModelConfig& teacher,
                                            const ModelConfig& student, DType dtype, Rng rng) {
  DistillProjections p;
  for (Channel c : plan.channels) {
    ProjectionPair pair;
    pair.wt = Tensor::zeros({channel_dim(teacher, c), plan.common_dim}, dtype);
    pair.ws = Tensor::zeros({channel_dim(student, c), plan.common_dim}, dtype);
    for (int64_t i = 0; i < pair.wt.numel(); ++i) pair.wt.set(i, rng.truncated_normal(0.02));
    for (int64_t i = 0; i < pair.ws.numel(); ++i) pair.ws.set(i, rng.truncated_normal(0.02));
    p.pairs.emplace(c, std::move(pair));
  }
  return p;
}

DistillProjections DistillProjections::identity(const DistillPlan& plan,
                                                const ModelConfig& teacher,
                                                const ModelConfig& student, DType dtype) {
  DistillProjections p;
  for (Channel c : plan.channels) {
    int64_t td = channel_dim(teacher, c), sd = channel_dim(student, c);
    if (td != plan.common_dim || sd != plan.common_dim)
      throw ConfigError("identity projections need matching dims for channel " +
                        std::string(channel_name(c)));
    ProjectionPair pair;
    pair.wt = Tensor::zeros({td, plan.common_dim}, dtype);
    pair.ws = Tensor::zeros({sd, plan.common_dim}, dtype);
    for (int64_t i = 0; i < td; ++i) pair.wt.set(i * plan.common_dim + i, 1.0);
    for (int64_t i = 0; i < sd; ++i) pair.ws.set(i * plan.common_dim + i, 1.0);
    p.pairs.emplace(c, std::move(pair));
  }
  return p;
}

void DistillProjections::for_each_param(
    const std::function<void(const std::string&, Tensor&)>& fn) {
  for (auto& [c, pair] : pairs) {
    fn(std::string("distill.") + channel_name(c) + ".wt", pair.wt);
    fn(std::string("distill.") + channel_name(c) + ".ws", pair.ws);
  }
}

void DistillProjections::set_requires_grad(bool b) {
  for_each_param([&](const std::string&, Tensor& t) { t.set_requires_grad(b); });
}

void DistillProjections::zero_grads() {
  for_each_param([&](const std::string&, Tensor& t) { t.zero_grad(); });
}

namespace {

struct ChannelStates {
  Tensor teacher;       // [B, L, dt]
  Var student;          // [B, L, ds]
  std::vector<uint8_t> row_mask;  // per B*L row; empty = all valid
};

std::vector<uint8_t> token_row_mask(const TokenBatch& toks) {
  std::vector<uint8_t> m;
  m.reserve(toks.mask.size());
  for (uint8_t v : toks.mask) m.push_back(v);
  return m;
}

ChannelStates channel_states(const TraceSnapshot& t, const ForwardTrace& s, Channel c) {
  ChannelStates st;
  switch (c) {
    case Channel::Img:
      st.teacher = t.vision_final;
      st.student = s.vision_final;
      break;
    case Channel::Text:
      st.teacher = t.text_final;
      st.student = s.text_final;
      st.row_mask = token_row_mask(s.tokens);
      break;
    case Channel::VL_E:
      st.teacher = t.fused_final;
      st.student = s.fused_final;
      st.row_mask = token_row_mask(s.tokens);
      break;
    case Channel::VL_D:
      st.teacher = t.decoder_final;
      st.student = s.decoder_final;
      st.row_mask = token_row_mask(s.tokens);
      break;
  }
  if (!st.teacher.defined() || !st.student.defined())
    throw ConfigError("distillation channel " + std::string(channel_name(c)) +
                      " requested but absent from the forward trace");
  return st;
}

}  // namespace

Var hr_loss(Graph& g, const TraceSnapshot& teacher, const ForwardTrace& student,
            const DistillPlan& plan, DistillProjections& proj) {
  if (plan.channels.empty()) throw ConfigError("hr_loss: no channels selected");
  Var acc;
  for (Channel c : plan.channels) {
    ChannelStates st = channel_states(teacher, student, c);
    auto it = proj.pairs.find(c);
    if (it == proj.pairs.end())
      throw ConfigError("hr_loss: no projection pair for channel " +
                        std::string(channel_name(c)));
    const Shape& ts = st.teacher.shape();
    const Shape ss = g.value(st.student).shape();
    if (ts[0] != ss[0] || ts[1] != ss[1])
      throw ContractError("hr_loss: teacher/student sequence mismatch on channel " +
                          std::string(channel_name(c)) + ": " + shape_str(ts) + " vs " +
                          shape_str(ss));
    Var t2 = g.constant(st.teacher.reshaped({ts[0] * ts[1], ts[2]}).to_dtype(g.mode()));
    Var s2 = g.reshape(st.student, {ss[0] * ss[1], ss[2]});
    Var tp = g.matmul(t2, g.leaf(it->second.wt));
    Var sp = g.matmul(s2, g.leaf(it->second.ws));
    Var cos = g.cosine_rows(tp, sp);
    Var mean_cos = st.row_mask.empty() ? g.mean_all(cos) : g.mean_masked(cos, st.row_mask);
    // cosineLoss = 1 - cosine, averaged over tokens
    Var channel_loss = g.add(g.constant(Tensor::scalar(1.0, g.mode())), g.scale(mean_cos, -1.0));
    acc = acc.defined() ? g.add(acc, channel_loss) : channel_loss;
  }
  return g.scale(acc, 1.0 / static_cast<double>(plan.channels.size()));
}

namespace {

struct AttnPair {
  Tensor teacher;  // [B*ht, Lq, Lkv]
  Var student;     // [B*hs, Lq, Lkv]
  int64_t teacher_heads = 0, student_heads = 0;
  std::string label;
};

Var head_mean(Graph& g, Var probs, int64_t batch, int64_t heads) {
  const Shape s = g.value(probs).shape();  // [B*h, Lq, Lkv]
  int64_t lq = s[1], lkv = s[2];
  Var r = g.reshape(probs, {batch, heads, lq * lkv});
  Var p = g.permute(r, {0, 2, 1});  // [B, Lq*Lkv, h]
  Tensor ones = Tensor::full({batch, heads, 1}, 1.0 / static_cast<double>(heads), g.mode());
  Var m = g.bmm(p, g.constant(ones));  // [B, Lq*Lkv, 1]
  return g.reshape(m, {batch, lq, lkv});
}

Tensor head_mean_plain(const Tensor& probs, int64_t batch, int64_t heads) {
  int64_t lq = probs.dim(1), lkv = probs.dim(2);
  Tensor out = Tensor::zeros({batch, lq, lkv}, probs.dtype());
  for (int64_t b = 0; b < batch; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t i = 0; i < lq * lkv; ++i) {
        int64_t src = (b * heads + h) * lq * lkv + i;
        int64_t dst = b * lq * lkv + i;
        out.set(dst, out.at(dst) + probs.at(src) / static_cast<double>(heads));
      }
  return out;
}

// Query-position validity replicated per head (or once when head-averaged).
std::vector<uint8_t> attn_row_mask(const TokenBatch& toks, int64_t heads, int64_t q_len) {
  std::vector<uint8_t> m;
  m.reserve(static_cast<size_t>(toks.batch * heads * q_len));
  for (int64_t b = 0; b < toks.batch; ++b)
    for (int64_t h = 0; h < heads; ++h)
      for (int64_t q = 0; q < q_len; ++q)
        m.push_back(q < toks.len && toks.valid_at(b, q) ? 1 : 0);
  return m;
}

Var kl_of_pair(Graph& g, const AttnPair& pair, const TokenBatch& toks, bool mask_queries) {
  const Shape& ts = pair.teacher.shape();
  const Shape ss = g.value(pair.student).shape();
  int64_t B = ts[0] / pair.teacher_heads;
  if (ss[0] / pair.student_heads != B || ts[1] != ss[1] || ts[2] != ss[2])
    throw ContractError("at_loss: attention geometry mismatch on " + pair.label + ": teacher " +
                        shape_str(ts) + " (" + std::to_string(pair.teacher_heads) +
                        " heads) vs student " + shape_str(ss) + " (" +
                        std::to_string(pair.student_heads) + " heads)");
  Tensor t_rows;
  Var s_rows;
  int64_t rows_heads;
  if (pair.teacher_heads == pair.student_heads) {
    t_rows = pair.teacher;
    s_rows = pair.student;
    rows_heads = pair.teacher_heads;
  } else {
    t_rows = head_mean_plain(pair.teacher, B, pair.teacher_heads);
    s_rows = head_mean(g, pair.student, B, pair.student_heads);
    rows_heads = 1;
  }
  int64_t lq = ts[1], lkv = ts[2];
  Tensor t2 = t_rows.reshaped({B * rows_heads * lq, lkv}).to_dtype(g.mode());
  Var s2 = g.reshape(s_rows, {B * rows_heads * lq, lkv});
  std::vector<uint8_t> mask;
  if (mask_queries) mask = attn_row_mask(toks, rows_heads, lq);
  return g.kl_rows_const_teacher(std::move(t2), s2, std::move(mask));
}

}  // namespace

Var at_loss(Graph& g, const TraceSnapshot& teacher, const ForwardTrace& student,
            const DistillPlan& plan) {
  if (plan.channels.empty()) throw ConfigError("at_loss: no channels selected");
  if (!plan.at_self && !plan.at_cross)
    throw ConfigError("at_loss: both attention kinds disabled");

  auto last = [&](const std::vector<AttentionRecord>& recs) -> const AttentionRecord* {
    return recs.empty() ? nullptr : &recs.back();
  };

  std::vector<AttnPair> pairs;
  auto add_pair = [&](const Tensor& t, const AttentionRecord* s, int64_t th,
                      const std::string& label) {
    if (!t.defined() || !s)
      throw ConfigError("at_loss: attention maps for " + label + " absent from trace");
    pairs.push_back({t, s->probs, th, s->heads, label});
  };

  for (Channel c : plan.channels) {
    switch (c) {
      case Channel::Img:
        if (plan.at_self)
          add_pair(teacher.vision_self_probs, last(student.vision_attn), teacher.vision_heads,
                   "img/self");
        break;
      case Channel::Text:
        if (plan.at_self)
          add_pair(teacher.text_self_probs, last(student.text_attn), teacher.text_heads,
                   "text/self");
        break;
      case Channel::VL_E:
        if (plan.at_self)
          add_pair(teacher.fused_self_probs, last(student.fused_self_attn), teacher.text_heads,
                   "vl_e/self");
        if (plan.at_cross)
          add_pair(teacher.fused_cross_probs, last(student.fused_cross_attn), teacher.text_heads,
                   "vl_e/cross");
        break;
      case Channel::VL_D:
        if (plan.at_self)
          add_pair(teacher.dec_self_probs, last(student.dec_self_attn), teacher.text_heads,
                   "vl_d/self");
        if (plan.at_cross)
          add_pair(teacher.dec_cross_probs, last(student.dec_cross_attn), teacher.text_heads,
                   "vl_d/cross");
        break;
    }
  }
  if (pairs.empty())
    throw ConfigError("at_loss: selection produced no attention maps");

  Var acc;
  for (const AttnPair& p : pairs) {
    bool text_queries = p.label.rfind("img", 0) != 0;
    Var kl = kl_of_pair(g, p, student.tokens, text_queries);
    acc = acc.defined() ? g.add(acc, kl) : kl;
  }
  return g.scale(acc, 1.0 / static_cast<double>(pairs.size()));
}

Var combined_objective(Graph& g, Var vlp, Var at, Var hr, const DistillPlan& plan) {
  Var total = vlp;
  Var distill;
  if (at.defined() && plan.use_at) {
    Var term = g.scale(at, plan.lambda_at);
    distill = distill.defined() ? g.add(distill, term) : term;
  }
  if (hr.defined() && plan.use_hr) {
    Var term = g.scale(hr, plan.lambda_hr);
    distill = distill.defined() ? g.add(distill, term) : term;
  }
  if (distill.defined()) total = g.add(total, g.scale(distill, plan.alpha));
  return total;
}

}  // namespace medlab
