#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "medlab/tensor.hpp"

namespace medlab {

struct OptimParams {
  double peak_lr = 5e-4;
  int64_t warmup_steps = 200;     // linear ramp to peak
  double decay_rate = 0.85;       // multiplicative, per decay interval
  int64_t decay_interval = 200;   // steps per "epoch" for the decay; 0 = no decay
  double weight_decay = 0.02;     // decoupled, applied to rank>=2 tensors
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double clip_norm = 1.0;         // global-norm gradient clip; 0 disables
};

// lr(step), step counted from 0. Linear warmup to peak, then
// peak * decay_rate^(completed intervals).
double schedule_lr(const OptimParams& p, int64_t step);

// Decoupled AdamW over externally owned parameter tensors. Moments are kept
// in 64-bit regardless of the parameter dtype.
class AdamW {
 public:
  explicit AdamW(OptimParams params) : params_(params) {}

  void add_param(const std::string& name, Tensor* param);
  int64_t step_count() const { return step_; }
  const OptimParams& params() const { return params_; }

  // Clips gradients (global norm), applies one update, advances the step.
  // Returns the pre-clip gradient norm.
  double step();
  void zero_grads();

  struct Slot {
    std::string name;
    Tensor* param = nullptr;
    Tensor m, v;   // f64 moments
    bool decay = false;
  };
  std::vector<Slot>& slots() { return slots_; }
  void set_step_count(int64_t s) { step_ = s; }

 private:
  OptimParams params_;
  std::vector<Slot> slots_;
  int64_t step_ = 0;
};

}  // namespace medlab
