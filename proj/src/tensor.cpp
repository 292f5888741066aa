#include "repfuse/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

#include "repfuse/error.hpp"

namespace repfuse {

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
  for (auto d : shape_) {
    if (d == 0) throw Error(ErrorKind::ShapeMismatch, "zero-sized dimension in " + shape_str(shape_));
  }
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_) {
    if (d == 0) throw Error(ErrorKind::ShapeMismatch, "zero-sized dimension in " + shape_str(shape_));
  }
  if (shape_size(shape_) != data_.size()) {
    throw Error(ErrorKind::ShapeMismatch, "shape " + shape_str(shape_) + " does not hold " +
                                              std::to_string(data_.size()) + " values");
  }
}

double Tensor::item() const {
  if (data_.size() != 1) throw Error(ErrorKind::ShapeMismatch, "item() on tensor of shape " + shape_str(shape_));
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw Error(ErrorKind::ShapeMismatch, "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  // v * 0 is 0 for finite v and nan otherwise; independent lanes vectorize.
  double acc[8] = {};
  const double* p = data_.data();
  const std::size_t n = data_.size(), blocks = n / 8 * 8;
  for (std::size_t i = 0; i < blocks; i += 8)
    for (std::size_t j = 0; j < 8; ++j) acc[j] += p[i + j] * 0.0;
  for (std::size_t i = blocks; i < n; ++i) acc[0] += p[i] * 0.0;
  double total = 0.0;
  for (double a : acc) total += a;
  return total == 0.0;
}

double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

double dot(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorKind::ShapeMismatch, "dot of unequal lengths");
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

}  // namespace repfuse
