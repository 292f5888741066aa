#include "repfuse/grad_vector.hpp"

#include "repfuse/error.hpp"

namespace repfuse {

std::size_t layout_size(const Layout& layout) {
  std::size_t n = 0;
  for (const auto& d : layout) n += shape_size(d.shape);
  return n;
}

GradVector::GradVector(std::shared_ptr<const Layout> layout, double fill) : layout_(std::move(layout)) {
  build_offsets();
  values_.assign(offsets_.back(), fill);
}

GradVector::GradVector(std::shared_ptr<const Layout> layout, std::vector<double> values)
    : layout_(std::move(layout)), values_(std::move(values)) {
  build_offsets();
  if (values_.size() != offsets_.back()) {
    throw Error(ErrorKind::Layout, "layout holds " + std::to_string(offsets_.back()) + " values, got " +
                                       std::to_string(values_.size()));
  }
}

GradVector GradVector::from_tensors(std::shared_ptr<const Layout> layout, std::span<const Tensor> blocks) {
  GradVector g(std::move(layout));
  if (blocks.size() != g.num_blocks()) throw Error(ErrorKind::Layout, "block count does not match layout");
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    if (blocks[i].shape() != g.layout()[i].shape) {
      throw Error(ErrorKind::Layout, "block '" + g.layout()[i].name + "' has shape " + shape_str(blocks[i].shape()) +
                                         ", layout says " + shape_str(g.layout()[i].shape));
    }
    auto dst = g.block(i);
    std::copy(blocks[i].data().begin(), blocks[i].data().end(), dst.begin());
  }
  return g;
}

void GradVector::build_offsets() {
  if (!layout_) throw Error(ErrorKind::Layout, "null layout");
  offsets_.assign(1, 0);
  for (const auto& d : *layout_) offsets_.push_back(offsets_.back() + shape_size(d.shape));
}

std::span<const double> GradVector::block(std::size_t i) const {
  return std::span<const double>(values_).subspan(offsets_.at(i), offsets_.at(i + 1) - offsets_[i]);
}

std::span<double> GradVector::block(std::size_t i) {
  return std::span<double>(values_).subspan(offsets_.at(i), offsets_.at(i + 1) - offsets_[i]);
}

Tensor GradVector::block_tensor(std::size_t i) const {
  auto b = block(i);
  return Tensor((*layout_)[i].shape, std::vector<double>(b.begin(), b.end()));
}

std::vector<Tensor> GradVector::to_tensors() const {
  std::vector<Tensor> out;
  out.reserve(num_blocks());
  for (std::size_t i = 0; i < num_blocks(); ++i) out.push_back(block_tensor(i));
  return out;
}

bool GradVector::same_layout(const GradVector& other) const {
  if (layout_ == other.layout_) return true;
  if (!layout_ || !other.layout_) return false;
  return *layout_ == *other.layout_;
}

void GradVector::check_layout(const GradVector& other, const char* what) const {
  if (!same_layout(other)) throw Error(ErrorKind::Layout, std::string(what) + ": parameter layouts differ");
}

GradVector& GradVector::operator+=(const GradVector& o) {
  check_layout(o, "add");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
  return *this;
}

GradVector& GradVector::operator-=(const GradVector& o) {
  check_layout(o, "sub");
  for (std::size_t i = 0; i < values_.size(); ++i) values_[i] -= o.values_[i];
  return *this;
}

GradVector& GradVector::operator*=(double c) {
  for (double& v : values_) v *= c;
  return *this;
}

double GradVector::norm() const { return l2_norm(values_); }

}  // namespace repfuse
