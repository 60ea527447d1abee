#pragma once

// Empirical and counterfactual risk: per-sample losses, the max-probability
// statistic, importance ratios between original and counterfactual
// predictions, bounding, and the reweighted loss.

#include <span>
#include <string>
#include <vector>

#include "catlab/autodiff.hpp"
#include "catlab/cmix.hpp"
#include "catlab/encoder.hpp"

namespace catlab {

enum class WeightEstimator { kMaxProb, kTrueLabelProb };

WeightEstimator parse_weight_estimator(const std::string& s);
std::string to_string(WeightEstimator e);

struct CRMConfig {
  double a1 = 0.0;
  double a2 = 10.0;
  bool detach_weights = true;
  WeightEstimator estimator = WeightEstimator::kMaxProb;

  // A1 == A2 is accepted: it pins every weight to one constant.
  void validate() const;
};

/// Per-sample quantities a task head produces for one forward pass. All (batch).
struct HeadOutput {
  Tensor loss;        // cross-entropy against the original target
  Tensor phi;         // maximum predicted probability
  Tensor label_prob;  // probability assigned to the original target
};

/// -log softmax(logits)[label] per row. logits (batch x k).
Tensor per_sample_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels);

/// Mean cross-entropy over the batch.
Tensor erm_loss(const Tensor& logits, std::span<const std::size_t> labels);

/// Row-wise maximum of a (batch x k) probability table. The gradient flows
/// to the arg-max entry.
Tensor phi(const Tensor& probs);

/// probs[b, labels[b]] per row.
Tensor label_probability(const Tensor& probs, std::span<const std::size_t> labels);

HeadOutput classification_outcome(const Tensor& logits, std::span<const std::size_t> labels);

/// Start and end distributions are scored separately: loss is their summed
/// cross-entropy, phi and label_prob are products of the two factors.
HeadOutput span_outcome(const SpanLogits& logits, std::span<const Span> spans);

/// numerator / max(denominator, 1e-12), per sample. Detached when `detach`.
Tensor omega_hat(const Tensor& numerator, const Tensor& denominator, bool detach = true);

double bound(double omega, const CRMConfig& config);
Tensor bound(const Tensor& omega, const CRMConfig& config);

struct CRMWeights {
  Tensor omega;    // (batch)
  Tensor bounded;  // (batch), within [A1, A2]
};

CRMWeights crm_weights(const HeadOutput& original, const HeadOutput& counterfactual,
                       const CRMConfig& config);

/// mean(weights * per_sample_losses)
Tensor crm_loss(const Tensor& per_sample_losses, const Tensor& weights);
Tensor crm_loss(const Tensor& logits, std::span<const std::size_t> labels, const CRMWeights& weights);

}  // namespace catlab
