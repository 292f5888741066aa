#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "repfuse/tensor.hpp"

namespace repfuse {

struct ParamDesc {
  std::string name;
  Shape shape;

  friend bool operator==(const ParamDesc&, const ParamDesc&) = default;
};

using Layout = std::vector<ParamDesc>;

/// Flat parameter-shaped vector (weights, gradients, residuals) with the
/// ordered block layout it was built for.
class GradVector {
 public:
  GradVector() = default;
  explicit GradVector(std::shared_ptr<const Layout> layout, double fill = 0.0);
  GradVector(std::shared_ptr<const Layout> layout, std::vector<double> values);

  static GradVector from_tensors(std::shared_ptr<const Layout> layout, std::span<const Tensor> blocks);

  const Layout& layout() const { return *layout_; }
  const std::shared_ptr<const Layout>& layout_ptr() const { return layout_; }
  std::size_t num_blocks() const { return layout_ ? layout_->size() : 0; }
  std::size_t size() const { return values_.size(); }

  std::span<const double> values() const { return values_; }
  std::span<double> values() { return values_; }

  std::span<const double> block(std::size_t i) const;
  std::span<double> block(std::size_t i);
  Tensor block_tensor(std::size_t i) const;
  std::vector<Tensor> to_tensors() const;

  bool same_layout(const GradVector& other) const;
  // Throws a layout error naming `what` unless layouts match.
  void check_layout(const GradVector& other, const char* what) const;

  GradVector& operator+=(const GradVector& o);
  GradVector& operator-=(const GradVector& o);
  GradVector& operator*=(double c);
  friend GradVector operator+(GradVector a, const GradVector& b) { return a += b; }
  friend GradVector operator-(GradVector a, const GradVector& b) { return a -= b; }
  friend GradVector operator*(GradVector a, double c) { return a *= c; }

  double norm() const;

  friend bool operator==(const GradVector& a, const GradVector& b) {
    return a.same_layout(b) && a.values_ == b.values_;
  }

 private:
  std::shared_ptr<const Layout> layout_;
  std::vector<std::size_t> offsets_;
  std::vector<double> values_;

  void build_offsets();
};

std::size_t layout_size(const Layout& layout);

}  // namespace repfuse
