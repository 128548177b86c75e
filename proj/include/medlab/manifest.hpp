#pragma once

#include <string>

#include "medlab/config.hpp"
#include "medlab/data.hpp"
#include "medlab/distill.hpp"
#include "medlab/optim.hpp"
#include "medlab/pretrain.hpp"

namespace medlab {

enum class InitSource { Random, Proxy };

struct InitStrategy {
  InitSource vision = InitSource::Random;
  InitSource text = InitSource::Random;
  std::string vision_checkpoint;  // required when vision == Proxy
  std::string text_checkpoint;
};

struct TrainControl {
  int64_t batch_size = 32;
  int64_t steps = 2000;
  int64_t eval_every = 200;
  int64_t log_every = 25;
};

struct ItcControl {
  double alpha_soft = 0.4;
  double label_smoothing = 0.1;
  double mu = 0.995;       // momentum-encoder coefficient
  double tau_min = 0.001;  // temperature clamp after each step
  double tau_max = 0.5;
};

// Everything needed to reproduce a run bit-identically in 64-bit
// single-thread mode. Parsing is fail-closed: unknown keys are rejected and
// every default is materialized back out, so persisted manifests are
// self-contained.
struct RunManifest {
  std::string version = "medlab-run-v1";
  std::string task = "pretrain";  // pretrain | distill | proxy-vision | proxy-text
  uint64_t seed = 1;
  DType mode = DType::F32;        // "train" = f32, "verify" = f64
  ModelConfig model;
  DatasetSpec dataset;
  OptimParams optim;
  TrainControl train;
  ItcControl itc;
  DistillPlan plan;               // used by task == distill
  std::string teacher_checkpoint;
  InitStrategy init;

  void validate() const;
};

std::string manifest_to_json(const RunManifest& m);    // all defaults materialized
RunManifest manifest_from_json(const std::string& js); // fail-closed
RunManifest parse_config(const std::string& path);     // reads a file
void save_manifest(const RunManifest& m, const std::string& path);  // atomic write

}  // namespace medlab
