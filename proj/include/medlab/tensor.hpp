#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "medlab/errors.hpp"

namespace medlab {

// Numeric mode for a whole run: F64 for verification (finite differences,
// bit-exact replay), F32 for training speed.
enum class DType { F32, F64 };

inline const char* dtype_name(DType d) { return d == DType::F32 ? "f32" : "f64"; }

// All numeric buffers are 64-byte aligned so vectorized kernels always take
// the same code path; mixed alignment would make summation order (and thus
// low bits) depend on where the allocator placed a buffer.
template <class T>
struct AlignedAlloc {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};
  AlignedAlloc() = default;
  template <class U>
  AlignedAlloc(const AlignedAlloc<U>&) {}
  T* allocate(size_t n) {
    return static_cast<T*>(::operator new(n * sizeof(T), kAlign));
  }
  void deallocate(T* p, size_t) noexcept { ::operator delete(p, kAlign); }
  bool operator==(const AlignedAlloc&) const { return true; }
};

template <class T>
using AlignedVec = std::vector<T, AlignedAlloc<T>>;

using Shape = std::vector<int64_t>;

std::string shape_str(const Shape& s);
int64_t shape_numel(const Shape& s);

// Dense row-major array. Value semantics: copying copies the buffer.
// Gradients live in an optional same-shape buffer (used for leaf/parameter
// tensors; intermediate gradients live inside Graph).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, DType dtype);
  static Tensor full(Shape shape, double value, DType dtype);
  static Tensor scalar(double value, DType dtype);
  static Tensor from_values(Shape shape, const std::vector<double>& values, DType dtype);

  bool defined() const { return !shape_.empty() || numel_ == 1; }
  const Shape& shape() const { return shape_; }
  int64_t dim(int i) const;
  int rank() const { return static_cast<int>(shape_.size()); }
  int64_t numel() const { return numel_; }
  DType dtype() const { return dtype_; }

  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool b) { requires_grad_ = b; }

  bool has_grad() const { return grad_ != nullptr; }
  Tensor& grad();             // allocates zero grad on first use
  const Tensor& grad() const; // throws if absent
  void zero_grad();
  void drop_grad() { grad_.reset(); }

  template <class S>
  std::span<S> data();
  template <class S>
  std::span<const S> data() const;

  // Generic element access (converts through double).
  double at(int64_t flat_index) const;
  void set(int64_t flat_index, double value);

  std::vector<double> to_vector() const;
  Tensor to_dtype(DType target) const;

  // Same shape + dtype, elementwise equal bit-for-bit after conversion to
  // the common representation.
  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

  // In-place helpers used by optimizer / EMA code (plain data math, no graph).
  void fill(double v);
  void add_scaled(const Tensor& other, double alpha);  // this += alpha * other
  void scale_inplace(double alpha);
  void lerp_toward(const Tensor& other, double weight_other);  // this = (1-w)*this + w*other
  double l2_norm_sq() const;

  Tensor reshaped(Shape new_shape) const;  // numel must match; shares nothing (copies)

 private:
  Shape shape_;
  int64_t numel_ = 0;
  DType dtype_ = DType::F64;
  std::variant<AlignedVec<float>, AlignedVec<double>> storage_;
  bool requires_grad_ = false;
  std::unique_ptr<Tensor> grad_;

  void alloc();

 public:
  Tensor(const Tensor& other);
  Tensor& operator=(const Tensor& other);
  Tensor(Tensor&&) = default;
  Tensor& operator=(Tensor&&) = default;
};

template <class S>
inline std::span<S> Tensor::data() {
  auto* v = std::get_if<AlignedVec<S>>(&storage_);
  if (!v) throw ShapeError("tensor dtype mismatch: stored " + std::string(dtype_name(dtype_)));
  return std::span<S>(v->data(), v->size());
}

template <class S>
inline std::span<const S> Tensor::data() const {
  auto* v = std::get_if<AlignedVec<S>>(&storage_);
  if (!v) throw ShapeError("tensor dtype mismatch: stored " + std::string(dtype_name(dtype_)));
  return std::span<const S>(v->data(), v->size());
}

// Calls f with a value of the scalar type matching dt: f(double{}) or f(float{}).
template <class F>
decltype(auto) with_dtype(DType dt, F&& f) {
  if (dt == DType::F64) return f(double{});
  return f(float{});
}

}  // namespace medlab
