#include "catlab/crm.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "catlab/errors.hpp"

namespace catlab {

namespace {

constexpr double kDenominatorFloor = 1e-12;

void require_rows(const Tensor& t, std::size_t rows, const char* what) {
  if (t.rank() != 2 || t.dim(0) != rows) {
    throw ad::ShapeError(std::string(what) + ": expected " + std::to_string(rows) +
                         " rows, got " + ad::to_string(t.shape()));
  }
}

Tensor one_hot(std::size_t rows, std::size_t cols, std::span<const std::size_t> hot) {
  std::vector<double> v(rows * cols, 0.0);
  for (std::size_t r = 0; r < rows; ++r) {
    if (hot[r] >= cols) {
      throw std::out_of_range("label " + std::to_string(hot[r]) + " out of range for " +
                              std::to_string(cols) + " classes");
    }
    v[r * cols + hot[r]] = 1.0;
  }
  return Tensor({rows, cols}, std::move(v));
}

std::vector<std::size_t> row_argmax(const Tensor& t) {
  const std::size_t rows = t.dim(0);
  const std::size_t cols = t.dim(1);
  std::vector<std::size_t> out(rows);
  const auto v = t.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const auto row = v.subspan(r * cols, cols);
    out[r] = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
  }
  return out;
}

}  // namespace

WeightEstimator parse_weight_estimator(const std::string& s) {
  if (s == "max_prob") return WeightEstimator::kMaxProb;
  if (s == "true_label_prob") return WeightEstimator::kTrueLabelProb;
  throw ConfigError("unknown weight estimator '" + s + "' (max_prob|true_label_prob)");
}

std::string to_string(WeightEstimator e) {
  return e == WeightEstimator::kMaxProb ? "max_prob" : "true_label_prob";
}

void CRMConfig::validate() const {
  if (!std::isfinite(a1) || !std::isfinite(a2) || a1 < 0.0 || a2 < a1 || a2 <= 0.0) {
    throw ConfigError("crm: bounds must satisfy 0 <= A1 <= A2, A2 > 0 (got A1=" +
                      std::to_string(a1) + ", A2=" + std::to_string(a2) + ")");
  }
}

Tensor per_sample_cross_entropy(const Tensor& logits, std::span<const std::size_t> labels) {
  require_rows(logits, labels.size(), "cross_entropy");
  const Tensor target = one_hot(labels.size(), logits.dim(1), labels);
  return ad::scale(ad::sum_last(ad::mul(ad::log_softmax(logits), target)), -1.0);
}

Tensor erm_loss(const Tensor& logits, std::span<const std::size_t> labels) {
  return ad::mean(per_sample_cross_entropy(logits, labels));
}

Tensor phi(const Tensor& probs) {
  if (probs.rank() != 2) throw ad::ShapeError("phi: expected (batch, k), got " + ad::to_string(probs.shape()));
  const auto arg = row_argmax(probs);
  return ad::sum_last(ad::mul(probs, one_hot(probs.dim(0), probs.dim(1), arg)));
}

Tensor label_probability(const Tensor& probs, std::span<const std::size_t> labels) {
  require_rows(probs, labels.size(), "label_probability");
  return ad::sum_last(ad::mul(probs, one_hot(labels.size(), probs.dim(1), labels)));
}

HeadOutput classification_outcome(const Tensor& logits, std::span<const std::size_t> labels) {
  const Tensor probs = ad::softmax(logits);
  return {per_sample_cross_entropy(logits, labels), phi(probs), label_probability(probs, labels)};
}

HeadOutput span_outcome(const SpanLogits& logits, std::span<const Span> spans) {
  std::vector<std::size_t> starts(spans.size());
  std::vector<std::size_t> ends(spans.size());
  for (std::size_t i = 0; i < spans.size(); ++i) {
    starts[i] = spans[i].start;
    ends[i] = spans[i].end;
  }
  const Tensor ps = ad::softmax(logits.start);
  const Tensor pe = ad::softmax(logits.end);
  return {ad::add(per_sample_cross_entropy(logits.start, starts),
                  per_sample_cross_entropy(logits.end, ends)),
          ad::mul(phi(ps), phi(pe)),
          ad::mul(label_probability(ps, starts), label_probability(pe, ends))};
}

Tensor omega_hat(const Tensor& numerator, const Tensor& denominator, bool detach) {
  if (numerator.shape() != denominator.shape() || numerator.rank() != 1) {
    throw ad::ShapeError("omega_hat: " + ad::to_string(numerator.shape()) + " vs " +
                         ad::to_string(denominator.shape()));
  }
  const auto d = denominator.values();
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!(d[i] > 0.0) || !std::isfinite(d[i])) {
      throw DivergenceError("omega_hat: counterfactual probability of sample " + std::to_string(i) +
                            " is " + std::to_string(d[i]) + "; the ratio is undefined");
    }
  }
  const Tensor num = detach ? ad::detach(numerator) : numerator;
  const Tensor den = detach ? ad::detach(denominator) : denominator;
  return ad::div(num, ad::clamp(den, kDenominatorFloor, std::numeric_limits<double>::infinity()));
}

double bound(double omega, const CRMConfig& config) {
  return std::clamp(omega, config.a1, config.a2);
}

Tensor bound(const Tensor& omega, const CRMConfig& config) {
  return ad::clamp(omega, config.a1, config.a2);
}

CRMWeights crm_weights(const HeadOutput& original, const HeadOutput& counterfactual,
                       const CRMConfig& config) {
  const bool max_prob = config.estimator == WeightEstimator::kMaxProb;
  const Tensor& num = max_prob ? original.phi : original.label_prob;
  const Tensor& den = max_prob ? counterfactual.phi : counterfactual.label_prob;
  Tensor omega = omega_hat(num, den, config.detach_weights);
  Tensor bounded = bound(omega, config);
  return {std::move(omega), std::move(bounded)};
}

Tensor crm_loss(const Tensor& per_sample_losses, const Tensor& weights) {
  if (per_sample_losses.shape() != weights.shape() || weights.rank() != 1) {
    throw ad::ShapeError("crm_loss: losses " + ad::to_string(per_sample_losses.shape()) +
                         " vs weights " + ad::to_string(weights.shape()));
  }
  return ad::mean(ad::mul(per_sample_losses, weights));
}

Tensor crm_loss(const Tensor& logits, std::span<const std::size_t> labels, const CRMWeights& weights) {
  return crm_loss(per_sample_cross_entropy(logits, labels), weights.bounded);
}

}  // namespace catlab
