#include "fedoap/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

#include "fedoap/error.hpp"

namespace fedoap {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  require(!shape.empty(), ErrorCode::ShapeMismatch, "tensor needs at least one axis");
  for (auto extent : shape) {
    require(extent > 0, ErrorCode::ShapeMismatch, "zero extent in shape " + shape_to_string(shape));
  }
}

}  // namespace

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  validate_shape(shape_);
  values_.assign(shape_numel(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : Tensor(std::move(shape), Buffer(values.begin(), values.end())) {}

Tensor::Tensor(Shape shape, Buffer values) : shape_(std::move(shape)), values_(std::move(values)) {
  validate_shape(shape_);
  require(values_.size() == shape_numel(shape_), ErrorCode::ShapeMismatch,
          "value count " + std::to_string(values_.size()) + " does not fill shape " +
              shape_to_string(shape_));
}

Tensor Tensor::from(std::initializer_list<double> values) {
  return Tensor({values.size()}, Buffer(values));
}

double Tensor::item() const {
  require(values_.size() == 1, ErrorCode::ShapeMismatch,
          "item() on non-scalar tensor " + shape_to_string(shape_));
  return values_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  require(shape_numel(shape) == values_.size(), ErrorCode::ShapeMismatch,
          "cannot reshape " + shape_to_string(shape_) + " to " + shape_to_string(shape));
  return Tensor(std::move(shape), values_);
}

bool Tensor::all_finite() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::check_finite(const char* context) const {
  if (!all_finite()) fail(ErrorCode::NonFiniteValue, std::string("non-finite value produced by ") + context);
}

bool operator==(const Tensor& a, const Tensor& b) {
  if (a.shape_ != b.shape_) return false;
  return a.values_.empty() ||
         std::memcmp(a.values_.data(), b.values_.data(), a.values_.size() * sizeof(double)) == 0;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), ErrorCode::ShapeMismatch,
          "max_abs_diff " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace fedoap
