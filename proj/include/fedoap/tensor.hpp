#pragma once

#include <cstddef>
#include <initializer_list>
#include <new>
#include <span>
#include <string>
#include <vector>

namespace fedoap {

using Shape = std::vector<std::size_t>;

// Cache-line aligned allocation. Vectorized kernels pick their code path from
// the address alignment, so a fixed alignment keeps results bit-reproducible
// no matter where the heap places a buffer.
template <typename T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlignment{64};

  AlignedAllocator() = default;
  template <typename U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlignment)); }
  void deallocate(T* p, std::size_t) noexcept { ::operator delete(p, kAlignment); }

  template <typename U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

// Dense row-major array of 64-bit reals. Extents are strictly positive; the
// flattened storage always holds exactly product(shape) values.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);
  Tensor(Shape shape, Buffer values);
  Tensor(Shape shape, std::initializer_list<double> values) : Tensor(std::move(shape), Buffer(values)) {}

  static Tensor scalar(double value) { return Tensor({1}, std::vector<double>{value}); }
  static Tensor from(std::initializer_list<double> values);
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape(), 0.0); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t numel() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  std::span<double> values() noexcept { return values_; }
  std::span<const double> values() const noexcept { return values_; }
  double* data() noexcept { return values_.data(); }
  const double* data() const noexcept { return values_.data(); }
  Buffer& storage() noexcept { return values_; }
  const Buffer& storage() const noexcept { return values_; }

  double& operator[](std::size_t i) { return values_[i]; }
  double operator[](std::size_t i) const { return values_[i]; }

  double item() const;

  // Same values, new extents; the element count must match.
  Tensor reshaped(Shape shape) const;

  bool all_finite() const;
  // Throws NonFiniteValue naming `context` when any entry is NaN or infinite.
  void check_finite(const char* context) const;

  // Bitwise equality of shape and every stored value.
  friend bool operator==(const Tensor& a, const Tensor& b);

 private:
  Shape shape_;
  Buffer values_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace fedoap
