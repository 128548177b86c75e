#include "medlab/accounting.hpp"

#include <algorithm>
#include <chrono>
#include <fstream>

#include "medlab/rng.hpp"

namespace medlab {

const char* component_name(Component c) {
  switch (c) {
    case Component::Vision: return "vision";
    case Component::Text: return "text";
    case Component::Decoder: return "decoder";
    case Component::Heads: return "heads";
    case Component::All: return "all";
  }
  return "?";
}

const char* convention_name(FlopConvention c) {
  return c == FlopConvention::MacX2 ? "mac_x2" : "linear_macs";
}

namespace {

int64_t attn_params(int64_t d, int64_t kv) {
  // wq/wo are d x d, wk/wv are kv x d, four biases of size d
  return 2 * d * d + 2 * kv * d + 4 * d;
}

int64_t block_params(int64_t d, int64_t ffn, bool cross, int64_t kv) {
  int64_t p = 2 * d + attn_params(d, d);           // ln1 + self
  if (cross) p += 2 * d + attn_params(d, kv);      // lnc + cross
  p += 2 * d;                                      // ln2
  p += d * ffn + ffn + ffn * d + d;                // ffn
  return p;
}

int64_t vision_params(const ModelConfig& cfg) {
  const auto& v = cfg.vision;
  int64_t pin = v.in_channels * v.patch_size * v.patch_size;
  int64_t p = pin * v.embed_dim + v.embed_dim;              // patch proj
  p += v.embed_dim;                                         // cls
  p += cfg.vision_tokens() * v.embed_dim;                   // pos
  p += v.n_layers * block_params(v.embed_dim, cfg.vision_ffn(), false, 0);
  p += 2 * v.embed_dim;                                     // final ln
  return p;
}

int64_t text_params(const ModelConfig& cfg) {
  const auto& t = cfg.text;
  int64_t p = t.vocab_size * t.embed_dim + t.max_len * t.embed_dim;
  int64_t fusion_from = t.n_layers - cfg.fusion_layers();
  for (int64_t i = 0; i < t.n_layers; ++i)
    p += block_params(t.embed_dim, cfg.text_ffn(), i >= fusion_from, cfg.vision.embed_dim);
  p += 2 * t.embed_dim;
  return p;
}

int64_t decoder_params(const ModelConfig& cfg) {
  if (!cfg.has_decoder()) return 0;
  const auto& t = cfg.text;
  int64_t p = cfg.decoder.n_layers *
              block_params(t.embed_dim, cfg.text_ffn(), true, cfg.vision.embed_dim);
  p += 2 * t.embed_dim;       // final ln
  p += t.vocab_size;          // lm bias (head weights tied to the embedding)
  return p;
}

int64_t heads_params(const ModelConfig& cfg) {
  int64_t e = cfg.resolved_itc_dim();
  int64_t p = cfg.vision.embed_dim * e + e;  // itc image proj
  p += cfg.text.embed_dim * e + e;           // itc text proj
  p += cfg.text.embed_dim * 2 + 2;           // itm head
  p += 1;                                    // temperature
  return p;
}

}  // namespace

int64_t count_params(const ModelConfig& cfg, Component c) {
  cfg.validate();
  switch (c) {
    case Component::Vision: return vision_params(cfg);
    case Component::Text: return text_params(cfg);
    case Component::Decoder: return decoder_params(cfg);
    case Component::Heads: return heads_params(cfg);
    case Component::All:
      return vision_params(cfg) + text_params(cfg) + decoder_params(cfg) + heads_params(cfg);
  }
  return 0;
}

std::vector<std::pair<std::string, int64_t>> param_breakdown(const ModelConfig& cfg) {
  return {{"vision", vision_params(cfg)},
          {"text", text_params(cfg)},
          {"decoder", decoder_params(cfg)},
          {"heads", heads_params(cfg)}};
}

namespace {

void add_self_layer(FlopBreakdown& b, int64_t L, int64_t d, int64_t ffn) {
  b.proj += 4 * L * d * d;
  b.attn_quad += 2 * L * L * d;  // scores + value mixing
  b.ffn += 2 * L * d * ffn;
}

void add_cross_terms(FlopBreakdown& b, int64_t Lq, int64_t Lkv, int64_t d, int64_t kv_dim) {
  b.proj += 2 * Lq * d * d;           // q and o projections
  b.proj += 2 * Lkv * kv_dim * d;     // k and v projections over the vision sequence
  b.attn_quad += 2 * Lq * Lkv * d;
}

FlopBreakdown vision_flops(const ModelConfig& cfg, int64_t resolution) {
  const auto& v = cfg.vision;
  if (resolution <= 0) resolution = v.image_size;
  if (resolution % v.patch_size != 0)
    throw ConfigError("flops: resolution " + std::to_string(resolution) +
                      " not divisible by patch " + std::to_string(v.patch_size));
  int64_t grid = resolution / v.patch_size;
  int64_t np = grid * grid;
  int64_t L = np + 1;
  int64_t pin = v.in_channels * v.patch_size * v.patch_size;
  FlopBreakdown b;
  b.patch = np * pin * v.embed_dim;
  for (int64_t i = 0; i < v.n_layers; ++i) add_self_layer(b, L, v.embed_dim, cfg.vision_ffn());
  return b;
}

FlopBreakdown text_flops(const ModelConfig& cfg, int64_t text_len, bool fused, int64_t Lv) {
  const auto& t = cfg.text;
  FlopBreakdown b;
  int64_t fusion_from = t.n_layers - cfg.fusion_layers();
  for (int64_t i = 0; i < t.n_layers; ++i) {
    add_self_layer(b, text_len, t.embed_dim, cfg.text_ffn());
    if (fused && i >= fusion_from)
      add_cross_terms(b, text_len, Lv, t.embed_dim, cfg.vision.embed_dim);
  }
  return b;
}

FlopBreakdown decoder_flops(const ModelConfig& cfg, int64_t text_len, int64_t Lv) {
  FlopBreakdown b;
  for (int64_t i = 0; i < cfg.decoder.n_layers; ++i) {
    add_self_layer(b, text_len, cfg.text.embed_dim, cfg.text_ffn());
    add_cross_terms(b, text_len, Lv, cfg.text.embed_dim, cfg.vision.embed_dim);
  }
  return b;
}

void merge(FlopBreakdown& into, const FlopBreakdown& x) {
  into.patch += x.patch;
  into.proj += x.proj;
  into.ffn += x.ffn;
  into.attn_quad += x.attn_quad;
}

}  // namespace

FlopBreakdown flop_breakdown(const ModelConfig& cfg, int64_t resolution, int64_t text_len,
                             Component c) {
  cfg.validate();
  int64_t res = resolution > 0 ? resolution : cfg.vision.image_size;
  int64_t Lv = (res / cfg.vision.patch_size) * (res / cfg.vision.patch_size) + 1;
  switch (c) {
    case Component::Vision: return vision_flops(cfg, res);
    case Component::Text: return text_flops(cfg, text_len, false, Lv);
    case Component::Decoder: return decoder_flops(cfg, text_len, Lv);
    case Component::Heads: return {};
    case Component::All: {
      FlopBreakdown b = vision_flops(cfg, res);
      merge(b, text_flops(cfg, text_len, true, Lv));
      merge(b, decoder_flops(cfg, text_len, Lv));
      return b;
    }
  }
  return {};
}

int64_t count_flops(const ModelConfig& cfg, int64_t resolution, int64_t text_len, Component c,
                    FlopConvention conv) {
  FlopBreakdown b = flop_breakdown(cfg, resolution, text_len, c);
  if (conv == FlopConvention::MacX2) return 2 * b.total_macs();
  return b.linear_macs();
}

std::string hardware_string() {
  std::ifstream f("/proc/cpuinfo");
  std::string line;
  while (std::getline(f, line)) {
    if (line.rfind("model name", 0) == 0) {
      auto pos = line.find(':');
      if (pos != std::string::npos) return line.substr(pos + 2);
    }
  }
  return "unknown-cpu";
}

double measure_inference_ms(MEDModel& m, const InferenceSpec& spec, int repetitions) {
  if (repetitions < 1) throw ContractError("measure_inference: repetitions must be >= 1");
  Rng rng(1234);
  Tensor images;
  TokenBatch toks;
  if (spec.component == Component::Vision || spec.component == Component::All) {
    const auto& v = m.cfg.vision;
    images = Tensor::zeros({spec.batch, v.in_channels, v.image_size, v.image_size}, m.dtype);
    for (int64_t i = 0; i < images.numel(); ++i) images.set(i, rng.uniform());
  }
  if (spec.component != Component::Vision) {
    toks.batch = spec.batch;
    toks.len = std::min<int64_t>(spec.text_len, m.cfg.text.max_len);
    toks.ids.resize(static_cast<size_t>(toks.batch * toks.len));
    toks.mask.assign(toks.ids.size(), 1);
    for (auto& id : toks.ids) id = static_cast<int64_t>(rng.below((uint64_t)m.cfg.text.vocab_size));
  }

  auto run_once = [&]() {
    Graph g(m.dtype);
    switch (spec.component) {
      case Component::Vision:
        vision_forward(g, m, images, nullptr);
        break;
      case Component::Text:
        text_forward(g, m, toks, TextMode::Unimodal, Var{}, nullptr);
        break;
      default: {
        Var v = vision_forward(g, m, images, nullptr);
        text_forward(g, m, toks, TextMode::Fused, v, nullptr);
        if (m.cfg.has_decoder()) decoder_forward(g, m, toks, v, nullptr);
        break;
      }
    }
  };

  run_once();  // warmup
  std::vector<double> times;
  times.reserve(static_cast<size_t>(repetitions));
  for (int i = 0; i < repetitions; ++i) {
    auto t0 = std::chrono::steady_clock::now();
    run_once();
    auto t1 = std::chrono::steady_clock::now();
    times.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
  }
  std::sort(times.begin(), times.end());
  size_t n = times.size();
  return n % 2 ? times[n / 2] : 0.5 * (times[n / 2 - 1] + times[n / 2]);
}

CostReport make_cost_report(const ModelConfig& cfg, Component c, int64_t resolution,
                            int64_t text_len, FlopConvention conv, double wallclock_ms) {
  CostReport r;
  r.component = component_name(c);
  r.params = count_params(cfg, c);
  r.flops = count_flops(cfg, resolution, text_len, c, conv);
  r.convention = convention_name(conv);
  r.wallclock_ms = wallclock_ms;
  r.hardware = hardware_string();
  if (c == Component::All)
    r.param_breakdown = param_breakdown(cfg);
  else
    r.param_breakdown = {{component_name(c), r.params}};
  r.flop_terms = flop_breakdown(cfg, resolution, text_len, c);
  return r;
}

}  // namespace medlab
