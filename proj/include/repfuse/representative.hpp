#pragma once
// Representative construction: a single synthetic point near a same-label
// batch's mean whose parameter gradient tracks the batch's mean gradient.

#include <cstddef>
#include <vector>

#include "repfuse/autodiff.hpp"
#include "repfuse/grad_vector.hpp"
#include "repfuse/models.hpp"
#include "repfuse/tensor.hpp"

namespace repfuse {

struct RepConfig {
  double budget = 2.0;            // s: L2 radius around the batch mean
  std::size_t inner_epochs = 10;  // H
  double eta_delta = 0.1;
  bool use_residual = true;

  void validate() const;
};

struct Representative {
  Tensor x;
  int label = 0;
  std::size_t batch_size = 0;
  double matching_loss = 0.0;
};

struct Residual {
  GradVector tau;

  static Residual zeros(const std::shared_ptr<const Layout>& layout) { return Residual{GradVector(layout)}; }
};

/// Mean over the leading axis: [B, ...] -> [...].
Tensor batch_mean(const Tensor& batch);

/// ||grad_w L(w, x_cand, label) - target + tau||_2 as a recorded scalar.
/// x_cand is a single sample; make it a variable to differentiate through.
ad::Var matching_loss(const ModelState& model, const ad::Var& x_cand, int label, const GradVector& target,
                      const GradVector& tau);

struct DeltaResult {
  Tensor delta;                      // best perturbation found
  double loss = 0.0;                 // matching loss at delta
  std::vector<double> loss_history;  // value at each visited iterate, starting at delta = 0
};

/// Projected gradient descent on delta around `center`: H steps of
/// delta -= eta_delta * grad, each followed by projection onto the L2 ball of
/// radius s. Returns the visited iterate with the lowest matching loss.
DeltaResult optimize_delta(const ModelState& model, const Tensor& center, int label, const GradVector& target,
                           const GradVector& tau, const RepConfig& cfg);

struct RepOutcome {
  Representative rep;
  Residual residual;     // gradient at the representative minus the target
  GradVector rep_grad;   // gradient at the representative, at model.params
  GradVector target;     // batch gradient divided by B
  DeltaResult search;
};

/// Builds the representative of a same-label batch x [B, ...] and the
/// residual it leaves. The representative is clipped to [0, 1].
RepOutcome build_representative(const ModelState& model, const Tensor& x, std::span<const int> labels,
                                const Residual& residual, const RepConfig& cfg);

}  // namespace repfuse
