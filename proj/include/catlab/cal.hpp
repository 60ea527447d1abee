#pragma once

// Adversarial search over the interpolation coefficient. The objective
//   -|lambda| + gamma * CE(M(h~), y) + eta * phi(M(h~))
// is maximized per sample by projected gradient ascent with the model frozen.

#include <functional>
#include <optional>
#include <vector>

#include "catlab/autodiff.hpp"
#include "catlab/cmix.hpp"
#include "catlab/crm.hpp"
#include "catlab/encoder.hpp"

namespace catlab {

struct CALConfig {
  double gamma = 10.0;
  double eta = 20.0;
  double p = 2.0;  // norm order; every p gives |lambda| for a scalar coefficient
  std::size_t steps = 3;
  double lr = 2e-2;
  double clip_lo = 0.0;
  double clip_hi = 1.0;

  void validate() const;
};

/// Maps final-layer states to per-sample loss / phi against the original targets.
using HeadFn = std::function<HeadOutput(const Tensor& h_last)>;

/// Everything needed to rebuild the counterfactual from a coefficient vector.
struct CounterfactualContext {
  const EncoderModel* model = nullptr;
  Tensor h_i;  // (batch, seq, d) at the mix layer
  Tensor h_j;  // partner states, aligned row by row with h_i
  std::size_t mix_layer = 0;
  std::optional<AttentionMask> attention;  // nullopt: no layers after mixing
  std::optional<std::vector<std::uint8_t>> position_mask;
  HeadFn head;
};

/// Final-layer counterfactual states for the given coefficients.
Tensor counterfactual_states(const CounterfactualContext& ctx, const Tensor& lambda);

/// Per-sample objectives summed over the batch, so each coefficient receives
/// exactly the gradient of its own term.
Tensor cal_objective(const Tensor& lambda, const CounterfactualContext& ctx, const CALConfig& config);

/// Called after every ascent step with the step index (from 1) and the coefficients.
using CALObserver = std::function<void(std::size_t step, const std::vector<double>& lambda)>;

/// `config.steps` ascent steps on lambda, clipped after each step. Gradients
/// are taken with respect to lambda only; model parameters are read, never written.
std::vector<double> optimize_lambda(const std::vector<double>& lambda,
                                    const CounterfactualContext& ctx, const CALConfig& config,
                                    const CALObserver& observer = {});

}  // namespace catlab
