#include "lavi/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "lavi/error.hpp"

namespace lavi {

namespace detail {
void throw_contract(const std::string& what) { throw ContractViolation(what); }
}  // namespace detail

std::int64_t shape_numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    LAVI_EXPECT(d >= 0, "negative dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Scalar fill)
    : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}

Tensor::Tensor(Shape shape, Storage data) : shape_(std::move(shape)), data_(std::move(data)) {
  LAVI_EXPECT(static_cast<std::int64_t>(data_.size()) == shape_numel(shape_),
              "tensor data size " + std::to_string(data_.size()) + " does not match shape " + shape_str(shape_));
}

std::int64_t Tensor::dim(int i) const {
  if (i < 0) i += rank();
  LAVI_EXPECT(i >= 0 && i < rank(), "dimension index out of range for shape " + shape_str(shape_));
  return shape_[static_cast<std::size_t>(i)];
}

Scalar Tensor::item() const {
  LAVI_EXPECT(data_.size() == 1, "item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const& {
  Tensor out = *this;
  return std::move(out).reshaped(std::move(shape));
}

Tensor Tensor::reshaped(Shape shape) && {
  LAVI_EXPECT(shape_numel(shape) == numel(),
              "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  shape_ = std::move(shape);
  return std::move(*this);
}

void Tensor::fill(Scalar v) { std::fill(data_.begin(), data_.end(), v); }

Tensor& Tensor::operator+=(const Tensor& other) {
  LAVI_EXPECT(other.numel() == numel(), "+= size mismatch " + shape_str(shape_) + " vs " + shape_str(other.shape_));
  const Scalar* src = other.ptr();
  Scalar* dst = ptr();
  const std::size_t n = data_.size();
  for (std::size_t i = 0; i < n; ++i) dst[i] += src[i];
  return *this;
}

Tensor& Tensor::operator*=(Scalar s) {
  for (auto& v : data_) v *= s;
  return *this;
}

bool Tensor::identical(const Tensor& other) const {
  return shape_ == other.shape_ &&
         std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(Scalar)) == 0;
}

Scalar max_abs_diff(const Tensor& a, const Tensor& b) {
  LAVI_EXPECT(a.numel() == b.numel(), "max_abs_diff size mismatch");
  Scalar m = 0;
  for (std::int64_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Scalar max_abs(const Tensor& a) {
  Scalar m = 0;
  for (auto v : a.data()) m = std::max(m, std::abs(v));
  return m;
}

bool all_finite(const Tensor& a) {
  return std::all_of(a.data().begin(), a.data().end(), [](Scalar v) { return std::isfinite(v); });
}

}  // namespace lavi
