#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "medlab/config.hpp"
#include "medlab/model.hpp"

namespace medlab {

enum class Component { Vision, Text, Decoder, Heads, All };

// Two documented FLOP conventions:
//  MacX2      — every multiply-accumulate counts as 2 FLOPs, including the
//               sequence-quadratic attention terms (scores and value mixing).
//  LinearMacs — multiply-accumulates of dense projections only (patch
//               embedding, QKVO, FFN), attention matmuls excluded, 1 MAC = 1.
//               This is the convention module-level profilers report and the
//               one that reproduces published ViT/BERT figures.
enum class FlopConvention { MacX2, LinearMacs };

const char* component_name(Component c);
const char* convention_name(FlopConvention c);

struct FlopBreakdown {
  int64_t patch = 0;      // patch embedding projection MACs
  int64_t proj = 0;       // attention q/k/v/o projection MACs
  int64_t ffn = 0;        // feed-forward MACs
  int64_t attn_quad = 0;  // score + value-mixing MACs (quadratic in sequence length)
  int64_t total_macs() const { return patch + proj + ffn + attn_quad; }
  int64_t linear_macs() const { return patch + proj + ffn; }
};

struct CostReport {
  std::string component;
  int64_t params = 0;
  int64_t flops = 0;  // under `convention`
  std::string convention;
  double wallclock_ms = -1.0;  // < 0 when not measured
  std::string hardware;
  std::vector<std::pair<std::string, int64_t>> param_breakdown;  // sums to params exactly
  FlopBreakdown flop_terms;
};

// Closed-form parameter count; equals the constructed model's tensor-size
// sum exactly for the same config/component.
int64_t count_params(const ModelConfig& cfg, Component c);
std::vector<std::pair<std::string, int64_t>> param_breakdown(const ModelConfig& cfg);

// Closed-form MAC breakdown for a forward pass at the given input geometry.
// resolution overrides cfg.vision.image_size; text_len is the token count.
// Component::Text counts a unimodal pass; Component::All counts vision +
// fused text + decoder.
FlopBreakdown flop_breakdown(const ModelConfig& cfg, int64_t resolution, int64_t text_len,
                             Component c);
int64_t count_flops(const ModelConfig& cfg, int64_t resolution, int64_t text_len, Component c,
                    FlopConvention conv = FlopConvention::MacX2);

struct InferenceSpec {
  Component component = Component::Vision;  // Vision or Text (unimodal)
  int64_t batch = 1;
  int64_t text_len = 16;
};

// Median wall-clock of `repetitions` forward passes after one warmup pass.
double measure_inference_ms(MEDModel& m, const InferenceSpec& spec, int repetitions);

std::string hardware_string();

CostReport make_cost_report(const ModelConfig& cfg, Component c, int64_t resolution,
                            int64_t text_len, FlopConvention conv, double wallclock_ms = -1.0);

}  // namespace medlab
