#include "medlab/optim.hpp"

#include <cmath>

namespace medlab {

double schedule_lr(const OptimParams& p, int64_t step) {
  if (p.warmup_steps > 0 && step < p.warmup_steps)
    return p.peak_lr * static_cast<double>(step + 1) / static_cast<double>(p.warmup_steps);
  if (p.decay_interval <= 0) return p.peak_lr;
  int64_t since = step - p.warmup_steps;
  int64_t epochs = since / p.decay_interval;
  return p.peak_lr * std::pow(p.decay_rate, static_cast<double>(epochs));
}

void AdamW::add_param(const std::string& name, Tensor* param) {
  Slot s;
  s.name = name;
  s.param = param;
  s.m = Tensor::zeros(param->shape(), DType::F64);
  s.v = Tensor::zeros(param->shape(), DType::F64);
  s.decay = param->rank() >= 2;
  slots_.push_back(std::move(s));
}

double AdamW::step() {
  double norm_sq = 0.0;
  for (Slot& s : slots_) {
    if (!s.param->has_grad()) continue;
    norm_sq += s.param->grad().l2_norm_sq();
  }
  double norm = std::sqrt(norm_sq);
  double clip_scale = 1.0;
  if (params_.clip_norm > 0 && norm > params_.clip_norm) clip_scale = params_.clip_norm / norm;

  double lr = schedule_lr(params_, step_);
  int64_t t = step_ + 1;
  double bc1 = 1.0 - std::pow(params_.beta1, static_cast<double>(t));
  double bc2 = 1.0 - std::pow(params_.beta2, static_cast<double>(t));

  for (Slot& s : slots_) {
    Tensor& p = *s.param;
    double wd = s.decay ? params_.weight_decay : 0.0;
    auto pm = s.m.data<double>();
    auto pv = s.v.data<double>();
    const double b1 = params_.beta1, b2 = params_.beta2, eps = params_.eps;
    auto update = [&](auto* pd, const auto* gd) {
      using S = std::remove_cvref_t<decltype(*pd)>;
      for (int64_t i = 0; i < p.numel(); ++i) {
        double grad = gd ? static_cast<double>(gd[i]) * clip_scale : 0.0;
        double m = b1 * pm[i] + (1.0 - b1) * grad;
        double v = b2 * pv[i] + (1.0 - b2) * grad * grad;
        pm[i] = m;
        pv[i] = v;
        double w = static_cast<double>(pd[i]);
        w -= lr * wd * w;
        w -= lr * (m / bc1) / (std::sqrt(v / bc2) + eps);
        pd[i] = static_cast<S>(w);
      }
    };
    if (p.dtype() == DType::F64)
      update(p.data<double>().data(),
             p.has_grad() ? p.grad().data<double>().data() : nullptr);
    else
      update(p.data<float>().data(), p.has_grad() ? p.grad().data<float>().data() : nullptr);
  }
  ++step_;
  return norm;
}

void AdamW::zero_grads() {
  for (Slot& s : slots_) s.param->zero_grad();
}

}  // namespace medlab
