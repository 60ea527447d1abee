#include "catlab/cal.hpp"

#include <algorithm>
#include <cmath>

#include "catlab/errors.hpp"

namespace catlab {

void CALConfig::validate() const {
  if (!(gamma >= 0.0) || !(eta >= 0.0)) throw ConfigError("cal: gamma and eta must be >= 0");
  if (!(p >= 1.0)) throw ConfigError("cal: norm order p must be >= 1");
  if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("cal: adversarial rate must be > 0");
  if (!(clip_lo <= clip_hi) || clip_lo < 0.0 || clip_hi > 1.0)
    throw ConfigError("cal: clip interval must lie inside [0, 1]");
}

Tensor counterfactual_states(const CounterfactualContext& ctx, const Tensor& lambda) {
  if (!ctx.model) throw std::invalid_argument("cal: context has no model");
  Tensor mixed = interpolate(ctx.h_i, ctx.h_j, lambda, ctx.position_mask);
  if (!ctx.attention) {
    if (ctx.mix_layer != ctx.model->num_layers())
      throw ConfigError("cal: a missing attention mask is only valid when mixing after the last layer");
    return mixed;
  }
  return ctx.model->forward_layers(mixed, ctx.mix_layer, ctx.model->num_layers(), *ctx.attention);
}

Tensor cal_objective(const Tensor& lambda, const CounterfactualContext& ctx, const CALConfig& config) {
  const HeadOutput out = ctx.head(counterfactual_states(ctx, lambda));
  Tensor per_sample = ad::scale(ad::abs(lambda), -1.0);
  per_sample = ad::add(per_sample, ad::scale(out.loss, config.gamma));
  per_sample = ad::add(per_sample, ad::scale(out.phi, config.eta));
  return ad::sum(per_sample);
}

std::vector<double> optimize_lambda(const std::vector<double>& lambda,
                                    const CounterfactualContext& ctx, const CALConfig& config,
                                    const CALObserver& observer) {
  config.validate();
  std::vector<double> current = lambda;
  const std::size_t n = current.size();
  for (std::size_t step = 1; step <= config.steps; ++step) {
    Tensor lam({n}, current, true);
    const Tensor objective = cal_objective(lam, ctx, config);
    const Tensor wrt[] = {lam};
    const Tensor grad = ad::backward(objective, wrt)[lam];
    const auto g = grad.values();
    for (std::size_t i = 0; i < n; ++i) {
      const double next = current[i] + config.lr * g[i];
      if (!std::isfinite(next)) throw DivergenceError("cal: non-finite coefficient after ascent");
      current[i] = std::clamp(next, config.clip_lo, config.clip_hi);
    }
    if (observer) observer(step, current);
  }
  return current;
}

}  // namespace catlab
