#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "repfuse/autodiff.hpp"
#include "repfuse/grad_vector.hpp"
#include "repfuse/rng.hpp"
#include "repfuse/tensor.hpp"

namespace repfuse {

enum class ModelKind { Mlp, Cnn };

/// Architecture description. input_shape is {d} for flat data and
/// {H, W, C} for images.
struct ModelSpec {
  ModelKind kind = ModelKind::Mlp;
  Shape input_shape;
  std::vector<std::size_t> hidden{128, 64};  // mlp only
  std::size_t conv1_channels = 8;            // cnn only
  std::size_t conv2_channels = 16;
  std::size_t kernel = 5;
  std::size_t num_classes = 10;

  void validate() const;
  // Single-line text form, e.g. "mlp in=19 hidden=128,64 classes=7".
  std::string describe() const;
  static ModelSpec parse(const std::string& text);
};

/// A differentiable classifier over a fixed parameter layout. Implementations
/// are stateless; parameters are passed in on every call.
class Architecture {
 public:
  virtual ~Architecture() = default;

  virtual const std::shared_ptr<const Layout>& layout() const = 0;
  virtual const Shape& input_shape() const = 0;
  virtual std::size_t num_classes() const = 0;
  virtual std::string describe() const = 0;

  /// Logits [N, M] for x of shape [N, input_shape...] (or input_shape for a
  /// single sample). params follow layout() order.
  virtual ad::Var logits(std::span<const ad::Var> params, const ad::Var& x) const = 0;

  /// Writes initial values into params; biases zero.
  virtual void initialize(GradVector& params, Rng& rng) const = 0;
};

std::shared_ptr<const Architecture> make_architecture(const ModelSpec& spec);

struct ModelState {
  std::shared_ptr<const Architecture> arch;
  GradVector params;
};

ModelState init_params(const ModelSpec& spec, std::uint64_t seed);
ModelState init_params(std::shared_ptr<const Architecture> arch, std::uint64_t seed);

/// One recorded variable per parameter block.
std::vector<ad::Var> param_vars(const GradVector& params);

/// Number of samples in x (leading dimension, or 1 for a single unbatched
/// sample). Throws on a shape the architecture cannot take.
std::size_t batch_count(const Architecture& arch, const Shape& x_shape);

/// Summed cross-entropy over the samples of x, as a graph node.
ad::Var loss(const Architecture& arch, std::span<const ad::Var> params, const ad::Var& x, std::span<const int> y);
ad::Var loss(const ModelState& state, const Tensor& x, std::span<const int> y);

/// Gradient of the summed loss with respect to the parameters.
GradVector param_gradient(const ModelState& state, const Tensor& x, std::span<const int> y);
/// Gradient of the summed loss with respect to the input.
Tensor input_gradient(const ModelState& state, const Tensor& x, std::span<const int> y);

/// Logits without recording.
Tensor predict_logits(const ModelState& state, const Tensor& x);

// Checkpoint: "RFCKPT01" magic, u32 format version, architecture line,
// block descriptors, then raw little-endian doubles.
void save_checkpoint(const ModelState& state, const std::filesystem::path& path);
ModelState load_checkpoint(const std::filesystem::path& path);

}  // namespace repfuse
