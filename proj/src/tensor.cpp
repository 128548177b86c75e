#include "medlab/tensor.hpp"

#include <cmath>
#include <sstream>

namespace medlab {

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ",";
    os << s[i];
  }
  os << "]";
  return os.str();
}

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) {
    if (d <= 0) throw ShapeError("non-positive dimension in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

void Tensor::alloc() {
  numel_ = shape_numel(shape_);
  if (dtype_ == DType::F64) {
    storage_ = AlignedVec<double>(static_cast<size_t>(numel_), 0.0);
  } else {
    storage_ = AlignedVec<float>(static_cast<size_t>(numel_), 0.0f);
  }
}

Tensor Tensor::zeros(Shape shape, DType dtype) {
  Tensor t;
  t.shape_ = std::move(shape);
  t.dtype_ = dtype;
  t.alloc();
  return t;
}

Tensor Tensor::full(Shape shape, double value, DType dtype) {
  Tensor t = zeros(std::move(shape), dtype);
  t.fill(value);
  return t;
}

Tensor Tensor::scalar(double value, DType dtype) {
  Tensor t = zeros(Shape{}, dtype);
  t.set(0, value);
  return t;
}

Tensor Tensor::from_values(Shape shape, const std::vector<double>& values, DType dtype) {
  Tensor t = zeros(std::move(shape), dtype);
  if (static_cast<int64_t>(values.size()) != t.numel_)
    throw ShapeError("from_values: " + std::to_string(values.size()) + " values for shape " +
                     shape_str(t.shape_));
  for (int64_t i = 0; i < t.numel_; ++i) t.set(i, values[static_cast<size_t>(i)]);
  return t;
}

Tensor::Tensor(const Tensor& other)
    : shape_(other.shape_),
      numel_(other.numel_),
      dtype_(other.dtype_),
      storage_(other.storage_),
      requires_grad_(other.requires_grad_) {
  if (other.grad_) grad_ = std::make_unique<Tensor>(*other.grad_);
}

Tensor& Tensor::operator=(const Tensor& other) {
  if (this == &other) return *this;
  shape_ = other.shape_;
  numel_ = other.numel_;
  dtype_ = other.dtype_;
  storage_ = other.storage_;
  requires_grad_ = other.requires_grad_;
  grad_ = other.grad_ ? std::make_unique<Tensor>(*other.grad_) : nullptr;
  return *this;
}

int64_t Tensor::dim(int i) const {
  if (i < 0) i += rank();
  if (i < 0 || i >= rank()) throw IndexError("dim index " + std::to_string(i) + " out of rank " + std::to_string(rank()));
  return shape_[static_cast<size_t>(i)];
}

Tensor& Tensor::grad() {
  if (!grad_) {
    grad_ = std::make_unique<Tensor>(Tensor::zeros(shape_, dtype_));
  }
  return *grad_;
}

const Tensor& Tensor::grad() const {
  if (!grad_) throw ContractError("tensor has no gradient buffer");
  return *grad_;
}

void Tensor::zero_grad() {
  if (grad_) grad_->fill(0.0);
}

double Tensor::at(int64_t i) const {
  if (i < 0 || i >= numel_) throw IndexError("flat index " + std::to_string(i) + " out of " + std::to_string(numel_));
  if (dtype_ == DType::F64) return std::get<AlignedVec<double>>(storage_)[static_cast<size_t>(i)];
  return static_cast<double>(std::get<AlignedVec<float>>(storage_)[static_cast<size_t>(i)]);
}

void Tensor::set(int64_t i, double v) {
  if (i < 0 || i >= numel_) throw IndexError("flat index " + std::to_string(i) + " out of " + std::to_string(numel_));
  if (dtype_ == DType::F64)
    std::get<AlignedVec<double>>(storage_)[static_cast<size_t>(i)] = v;
  else
    std::get<AlignedVec<float>>(storage_)[static_cast<size_t>(i)] = static_cast<float>(v);
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<size_t>(numel_));
  for (int64_t i = 0; i < numel_; ++i) out[static_cast<size_t>(i)] = at(i);
  return out;
}

Tensor Tensor::to_dtype(DType target) const {
  if (target == dtype_) return *this;
  Tensor t = zeros(shape_, target);
  for (int64_t i = 0; i < numel_; ++i) t.set(i, at(i));
  return t;
}

void Tensor::fill(double v) {
  if (dtype_ == DType::F64) {
    auto& d = std::get<AlignedVec<double>>(storage_);
    std::fill(d.begin(), d.end(), v);
  } else {
    auto& d = std::get<AlignedVec<float>>(storage_);
    std::fill(d.begin(), d.end(), static_cast<float>(v));
  }
}

void Tensor::add_scaled(const Tensor& other, double alpha) {
  if (shape_ != other.shape_ || dtype_ != other.dtype_)
    throw ShapeError("add_scaled shape/dtype mismatch: " + shape_str(shape_) + " vs " + shape_str(other.shape_));
  if (dtype_ == DType::F64) {
    auto a = data<double>();
    auto b = other.data<double>();
    for (size_t i = 0; i < a.size(); ++i) a[i] += alpha * b[i];
  } else {
    auto a = data<float>();
    auto b = other.data<float>();
    float af = static_cast<float>(alpha);
    for (size_t i = 0; i < a.size(); ++i) a[i] += af * b[i];
  }
}

void Tensor::scale_inplace(double alpha) {
  if (dtype_ == DType::F64) {
    for (auto& v : std::get<AlignedVec<double>>(storage_)) v *= alpha;
  } else {
    float af = static_cast<float>(alpha);
    for (auto& v : std::get<AlignedVec<float>>(storage_)) v *= af;
  }
}

void Tensor::lerp_toward(const Tensor& other, double w) {
  if (shape_ != other.shape_ || dtype_ != other.dtype_)
    throw ShapeError("lerp_toward shape/dtype mismatch");
  if (dtype_ == DType::F64) {
    auto a = data<double>();
    auto b = other.data<double>();
    for (size_t i = 0; i < a.size(); ++i) a[i] = (1.0 - w) * a[i] + w * b[i];
  } else {
    auto a = data<float>();
    auto b = other.data<float>();
    float wf = static_cast<float>(w);
    for (size_t i = 0; i < a.size(); ++i) a[i] = (1.0f - wf) * a[i] + wf * b[i];
  }
}

double Tensor::l2_norm_sq() const {
  double s = 0.0;
  if (dtype_ == DType::F64) {
    for (double v : std::get<AlignedVec<double>>(storage_)) s += v * v;
  } else {
    for (float v : std::get<AlignedVec<float>>(storage_)) s += static_cast<double>(v) * v;
  }
  return s;
}

Tensor Tensor::reshaped(Shape new_shape) const {
  if (shape_numel(new_shape) != numel_)
    throw ShapeError("reshape " + shape_str(shape_) + " -> " + shape_str(new_shape) + " changes element count");
  Tensor t = *this;
  t.shape_ = std::move(new_shape);
  t.grad_.reset();
  return t;
}

}  // namespace medlab
