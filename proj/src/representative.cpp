#include "repfuse/representative.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "repfuse/error.hpp"

namespace repfuse {

void RepConfig::validate() const {
  if (!(budget >= 0.0) || !std::isfinite(budget)) throw Error(ErrorKind::Config, "budget must be >= 0");
  if (inner_epochs < 1) throw Error(ErrorKind::Config, "inner_epochs must be >= 1");
  if (!(eta_delta > 0.0) || !std::isfinite(eta_delta)) throw Error(ErrorKind::Config, "eta_delta must be > 0");
}

Tensor batch_mean(const Tensor& batch) {
  if (batch.shape().size() < 2) {
    throw Error(ErrorKind::ShapeMismatch, "batch_mean expects [B, ...], got " + shape_str(batch.shape()));
  }
  const std::size_t b = batch.shape()[0];
  const Shape sample(batch.shape().begin() + 1, batch.shape().end());
  const std::size_t d = shape_size(sample);
  Tensor out(sample, 0.0);
  auto src = batch.data();
  for (std::size_t i = 0; i < b; ++i)
    for (std::size_t k = 0; k < d; ++k) out[k] += src[i * d + k];
  for (std::size_t k = 0; k < d; ++k) out[k] /= static_cast<double>(b);
  return out;
}

ad::Var matching_loss(const ModelState& model, const ad::Var& x_cand, int label, const GradVector& target,
                      const GradVector& tau) {
  model.params.check_layout(target, "matching target");
  model.params.check_layout(tau, "residual");
  const auto params = param_vars(model.params);
  const int y[] = {label};
  const auto grads = ad::grad(loss(*model.arch, params, x_cand, y), params, /*create_graph=*/true);
  ad::Var total;
  for (std::size_t i = 0; i < grads.size(); ++i) {
    Tensor shift = target.block_tensor(i);
    auto t = tau.block(i);
    for (std::size_t k = 0; k < shift.size(); ++k) shift[k] -= t[k];
    const ad::Var diff = ad::sub(grads[i], ad::constant(std::move(shift)));
    const ad::Var sq = ad::dot(diff, diff);
    total = total.defined() ? ad::add(total, sq) : sq;
  }
  return ad::sqrt(total);
}

namespace {

Tensor plus(const Tensor& a, const Tensor& b) {
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
  return out;
}

}  // namespace

DeltaResult optimize_delta(const ModelState& model, const Tensor& center, int label, const GradVector& target,
                           const GradVector& tau, const RepConfig& cfg) {
  cfg.validate();
  DeltaResult out;
  Tensor delta(center.shape(), 0.0);
  out.delta = delta;
  out.loss = INFINITY;
  // With a zero budget every projected step lands back on 0.
  const std::size_t steps = cfg.budget == 0.0 ? 0 : cfg.inner_epochs;
  for (std::size_t it = 0; it <= steps; ++it) {
    double value = 0.0;
    Tensor g;
    try {
      if (it == steps) {
        value = matching_loss(model, ad::constant(plus(center, delta)), label, target, tau).value().item();
      } else {
        const ad::Var x = ad::variable(plus(center, delta));
        const ad::Var l = matching_loss(model, x, label, target, tau);
        value = l.value().item();
        g = ad::grad_of_grad(l, x).value();
      }
    } catch (const Error& e) {
      if (e.kind() != ErrorKind::NumericFault) throw;
      throw e.with_context("representative search, inner iteration " + std::to_string(it));
    }
    if (!std::isfinite(value) || (it < steps && !g.all_finite())) {
      throw Error(ErrorKind::NumericFault, "representative search, inner iteration " + std::to_string(it) +
                                               ": non-finite matching loss or gradient");
    }
    out.loss_history.push_back(value);
    if (value < out.loss) {
      out.loss = value;
      out.delta = delta;
    }
    if (it == steps) break;
    for (std::size_t k = 0; k < delta.size(); ++k) delta[k] -= cfg.eta_delta * g[k];
    const double n = l2_norm(delta.data());
    if (n > cfg.budget) {
      const double f = cfg.budget / n;
      for (std::size_t k = 0; k < delta.size(); ++k) delta[k] *= f;
    }
  }
  return out;
}

RepOutcome build_representative(const ModelState& model, const Tensor& x, std::span<const int> labels,
                                const Residual& residual, const RepConfig& cfg) {
  if (labels.empty()) throw Error(ErrorKind::InvalidArgument, "empty batch");
  const int label = labels.front();
  for (int y : labels) {
    if (y != label) throw Error(ErrorKind::InvalidArgument, "representative batch mixes labels");
  }
  const std::size_t b = labels.size();
  if (batch_count(*model.arch, x.shape()) != b || x.shape().size() != model.arch->input_shape().size() + 1) {
    throw Error(ErrorKind::ShapeMismatch, "batch " + shape_str(x.shape()) + " with " + std::to_string(b) + " labels");
  }
  model.params.check_layout(residual.tau, "residual");

  RepOutcome out;
  out.target = param_gradient(model, x, labels) * (1.0 / static_cast<double>(b));
  const Tensor center = batch_mean(x);
  const GradVector tau = cfg.use_residual ? residual.tau : GradVector(model.params.layout_ptr());
  out.search = optimize_delta(model, center, label, out.target, tau, cfg);

  Tensor xr = plus(center, out.search.delta);
  for (std::size_t k = 0; k < xr.size(); ++k) xr[k] = std::clamp(xr[k], 0.0, 1.0);
  const int y[] = {label};
  out.rep_grad = param_gradient(model, xr, y);
  out.residual = Residual{out.rep_grad - out.target};
  out.rep = Representative{std::move(xr), label, b, out.search.loss};
  return out;
}

}  // namespace repfuse
