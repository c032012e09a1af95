#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace lavi {

using Scalar = double;
using Shape = std::vector<std::int64_t>;

// Cache-line aligned allocation. Vectorized kernels peel loops by address, so
// fixed alignment keeps floating-point results identical from run to run.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlign); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Storage = std::vector<Scalar, AlignedAllocator<Scalar>>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

// Dense row-major array of Scalar. Value semantics: copies duplicate storage.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Scalar fill = 0);
  Tensor(Shape shape, Storage data);
  Tensor(Shape shape, const std::vector<Scalar>& data) : Tensor(std::move(shape), Storage(data.begin(), data.end())) {}

  static Tensor scalar(Scalar v) { return Tensor({}, Storage{v}); }

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t dim(int i) const;
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty() && shape_.empty(); }

  Scalar* ptr() { return data_.data(); }
  const Scalar* ptr() const { return data_.data(); }
  std::span<Scalar> data() { return data_; }
  std::span<const Scalar> data() const { return data_; }
  Storage& storage() { return data_; }
  const Storage& storage() const { return data_; }

  Scalar& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  Scalar operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  Scalar item() const;

  // Same storage reinterpreted; numel must agree.
  Tensor reshaped(Shape shape) const&;
  Tensor reshaped(Shape shape) &&;

  void fill(Scalar v);
  Tensor& operator+=(const Tensor& other);
  Tensor& operator*=(Scalar s);

  // Bitwise equality of shape and contents.
  bool identical(const Tensor& other) const;

 private:
  Shape shape_;
  Storage data_;
};

Scalar max_abs_diff(const Tensor& a, const Tensor& b);
Scalar max_abs(const Tensor& a);
bool all_finite(const Tensor& a);

}  // namespace lavi
