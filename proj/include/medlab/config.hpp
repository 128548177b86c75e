#pragma once

#include <cstdint>
#include <string>

#include "medlab/errors.hpp"

namespace medlab {

// Architecture hyperparameters. Model weights, parameter counts and FLOP
// counts are all derived from this one description.
struct VisionConfig {
  int64_t embed_dim = 64;
  int64_t n_heads = 4;
  int64_t n_layers = 4;
  int64_t patch_size = 4;
  int64_t image_size = 32;
  int64_t in_channels = 3;
  int64_t ffn_hidden = 0;  // 0 = ffn_ratio * embed_dim
};

struct TextConfig {
  int64_t embed_dim = 64;
  int64_t n_heads = 4;
  int64_t n_layers = 4;
  int64_t vocab_size = 21;
  int64_t max_len = 16;
  int64_t n_fusion_layers = -1;  // -1 = all layers; fusion occupies the TOP layers
  int64_t ffn_hidden = 0;
};

struct DecoderConfig {
  int64_t n_layers = 0;  // 0 = no decoder
};

struct ModelConfig {
  VisionConfig vision;
  TextConfig text;
  DecoderConfig decoder;
  int64_t ffn_ratio = 4;
  int64_t itc_dim = 0;  // 0 = min(256, min(vision.embed_dim, text.embed_dim))

  int64_t vision_ffn() const { return vision.ffn_hidden > 0 ? vision.ffn_hidden : ffn_ratio * vision.embed_dim; }
  int64_t text_ffn() const { return text.ffn_hidden > 0 ? text.ffn_hidden : ffn_ratio * text.embed_dim; }
  int64_t n_patches() const {
    int64_t g = vision.image_size / vision.patch_size;
    return g * g;
  }
  int64_t vision_tokens() const { return n_patches() + 1; }  // class token
  int64_t fusion_layers() const { return text.n_fusion_layers < 0 ? text.n_layers : text.n_fusion_layers; }
  int64_t resolved_itc_dim() const {
    if (itc_dim > 0) return itc_dim;
    int64_t d = std::min(vision.embed_dim, text.embed_dim);
    return std::min<int64_t>(256, d);
  }
  bool has_decoder() const { return decoder.n_layers > 0; }

  void validate() const {
    auto fail = [](const std::string& m) { throw ConfigError(m); };
    if (vision.embed_dim <= 0 || vision.n_heads <= 0 || vision.n_layers <= 0)
      fail("vision dims/heads/layers must be positive");
    if (vision.embed_dim % vision.n_heads != 0)
      fail("vision.embed_dim " + std::to_string(vision.embed_dim) +
           " not divisible by vision.n_heads " + std::to_string(vision.n_heads));
    if (vision.image_size <= 0 || vision.patch_size <= 0 ||
        vision.image_size % vision.patch_size != 0)
      fail("vision.image_size " + std::to_string(vision.image_size) +
           " not divisible by vision.patch_size " + std::to_string(vision.patch_size));
    if (vision.in_channels <= 0) fail("vision.in_channels must be positive");
    if (text.embed_dim <= 0 || text.n_heads <= 0 || text.n_layers <= 0)
      fail("text dims/heads/layers must be positive");
    if (text.embed_dim % text.n_heads != 0)
      fail("text.embed_dim " + std::to_string(text.embed_dim) +
           " not divisible by text.n_heads " + std::to_string(text.n_heads));
    if (text.vocab_size < 5) fail("text.vocab_size must cover specials");
    if (text.max_len < 2) fail("text.max_len must be at least 2");
    int64_t f = fusion_layers();
    if (f < 0 || f > text.n_layers)
      fail("n_fusion_layers " + std::to_string(f) + " outside [0," +
           std::to_string(text.n_layers) + "]");
    if (decoder.n_layers < 0) fail("decoder.n_layers must be >= 0");
    if (ffn_ratio <= 0) fail("ffn_ratio must be positive");
  }
};

}  // namespace medlab
