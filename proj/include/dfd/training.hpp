#pragma once

// Focused-training loss: mean cross-entropy of the temperature-scaled
// output distribution, with a per-position temperature from the KA
// pipeline. Temperatures are constants of the loss (no gradient through T).

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "dfd/dist.hpp"
#include "dfd/error.hpp"
#include "dfd/focus.hpp"
#include "dfd/ka.hpp"
#include "dfd/model.hpp"
#include "dfd/rng.hpp"

namespace dfd {

/// -(1/k) Σ_i log softmax(logits_i / T_i)[target_i]
inline double ft_loss(const std::vector<std::vector<double>>& logits, std::span<const TokenId> targets,
                      std::span<const double> temps) {
  require(logits.size() == targets.size() && logits.size() == temps.size(),
          ErrorKind::InvalidArgument, "ft_loss: logits, targets and temperatures differ in length");
  require(!logits.empty(), ErrorKind::InvalidArgument, "ft_loss: empty batch");
  double sum = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    require(temps[i] > 0.0, ErrorKind::InvalidArgument, "ft_loss: temperatures must be positive");
    require(targets[i] < logits[i].size(), ErrorKind::InvalidArgument, "ft_loss: target out of range");
    sum -= log_softmax(std::span<const double>(logits[i]), temps[i])[targets[i]];
  }
  return sum / static_cast<double>(logits.size());
}

/// dL/dlogits_i = (softmax(logits_i / T_i) - onehot(target_i)) / (k T_i)
inline std::vector<std::vector<double>> ft_loss_grad(const std::vector<std::vector<double>>& logits,
                                                     std::span<const TokenId> targets,
                                                     std::span<const double> temps) {
  require(logits.size() == targets.size() && logits.size() == temps.size() && !logits.empty(),
          ErrorKind::InvalidArgument, "ft_loss_grad: length mismatch");
  const double k = static_cast<double>(logits.size());
  std::vector<std::vector<double>> grad(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    grad[i] = softmax_with_temperature(std::span<const double>(logits[i]), temps[i]);
    grad[i][targets[i]] -= 1.0;
    for (double& g : grad[i]) g /= k * temps[i];
  }
  return grad;
}

/// Teacher-forced sequence x_1..x_{k+1} with one temperature per predicted position.
struct FTBatch {
  std::vector<TokenId> tokens;
  std::vector<double> temps;

  std::span<const TokenId> inputs() const { return {tokens.data(), tokens.size() - 1}; }
  std::span<const TokenId> targets() const { return {tokens.data() + 1, tokens.size() - 1}; }

  void validate() const {
    require(tokens.size() >= 2, ErrorKind::InvalidArgument, "FT batch needs at least 2 tokens");
    require(temps.size() + 1 == tokens.size(), ErrorKind::InvalidArgument,
            "FT batch needs one temperature per predicted token");
  }
};

/// Temperatures from the inference KA pipeline on the teacher-forced forward pass.
inline FTBatch make_ft_batch(const TinyTransformer& model, std::vector<TokenId> tokens,
                             const FocusConfig& focus) {
  require(tokens.size() >= 2, ErrorKind::InvalidArgument, "FT batch needs at least 2 tokens");
  require(tokens.size() - 1 <= model.config().max_context, ErrorKind::InvalidArgument,
          "FT batch longer than the model context");
  FTBatch batch;
  batch.tokens = std::move(tokens);
  const Activations act = model.forward(batch.inputs());
  for (std::size_t pos = 0; pos < act.len; ++pos) {
    const KASignal sig = compute_ka(model.layer_logits_at(act, pos), focus.ka_options());
    batch.temps.push_back(apply_focus(sig.ka, focus));
  }
  return batch;
}

inline FTBatch uniform_ft_batch(std::vector<TokenId> tokens, double temperature = 1.0) {
  FTBatch b;
  b.temps.assign(tokens.size() - (tokens.empty() ? 0 : 1), temperature);
  b.tokens = std::move(tokens);
  return b;
}

inline double model_ft_loss(const TinyTransformer& model, const FTBatch& batch) {
  batch.validate();
  const Activations act = model.forward(batch.inputs());
  return ft_loss(model.output_logits(act), batch.targets(), batch.temps);
}

struct LossAndGrad {
  double loss = 0.0;
  std::vector<double> grad;
};

inline LossAndGrad model_ft_loss_and_grad(const TinyTransformer& model, const FTBatch& batch) {
  batch.validate();
  require(batch.inputs().size() <= model.config().max_context, ErrorKind::InvalidArgument,
          "FT batch longer than the model context");
  const Activations act = model.forward(batch.inputs());
  const auto logits = model.output_logits(act);
  LossAndGrad out;
  out.loss = ft_loss(logits, batch.targets(), batch.temps);
  require(std::isfinite(out.loss), ErrorKind::Numerical, "non-finite FT loss");
  out.grad.assign(model.parameter_count(), 0.0);
  model.backward(act, ft_loss_grad(logits, batch.targets(), batch.temps), out.grad);
  return out;
}

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Relative error |a - n| / max(|a|, |n|, floor); gradients smaller than the
/// floor are compared on an absolute scale.
inline constexpr double kGradCheckFloor = 1e-6;

/// Analytic FT-loss gradients against central differences on `num_params`
/// parameters drawn uniformly (with a seeded stream) from the whole model.
inline GradCheckResult grad_check(TinyTransformer& model, const FTBatch& batch, double eps = 1e-5,
                                  std::size_t num_params = 64, std::uint64_t seed = 1) {
  require(batch.tokens.size() >= 2, ErrorKind::InvalidArgument, "grad_check: zero-length batch");
  require(eps > 0.0, ErrorKind::InvalidArgument, "grad_check: eps must be positive");
  const LossAndGrad analytic = model_ft_loss_and_grad(model, batch);
  auto params = model.parameters();
  SplitMix64 rng(seed);
  GradCheckResult res;
  for (std::size_t n = 0; n < num_params; ++n) {
    const auto idx = static_cast<std::size_t>(rng.uniform() * static_cast<double>(params.size()));
    const double saved = params[idx];
    params[idx] = saved + eps;
    const double up = model_ft_loss(model, batch);
    params[idx] = saved - eps;
    const double down = model_ft_loss(model, batch);
    params[idx] = saved;
    require(std::isfinite(up) && std::isfinite(down), ErrorKind::Numerical,
            "non-finite loss during gradient check");
    const double numeric = (up - down) / (2.0 * eps);
    const double a = analytic.grad[idx];
    const double denom = std::max({std::abs(a), std::abs(numeric), kGradCheckFloor});
    res.max_rel_error = std::max(res.max_rel_error, std::abs(a - numeric) / denom);
    ++res.checked;
  }
  return res;
}

inline void sgd_step(TinyTransformer& model, std::span<const double> grad, double lr) {
  auto params = model.parameters();
  require(grad.size() == params.size(), ErrorKind::InvalidArgument, "gradient size mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) params[i] -= lr * grad[i];
}

}  // namespace dfd
