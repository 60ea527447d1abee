#include "catlab/cmix.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "catlab/errors.hpp"

namespace catlab {

namespace {

// Uniform on (0, 1].
double open_uniform(std::mt19937_64& rng) {
  return 1.0 - std::generate_canonical<double, 53>(rng);
}

// log of a Gamma(shape, 1) draw; shape >= 1.
double log_gamma_mt(double shape, std::mt19937_64& rng) {
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  std::normal_distribution<double> normal(0.0, 1.0);
  while (true) {
    double x;
    double v;
    do {
      x = normal(rng);
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = open_uniform(rng);
    const double x2 = x * x;
    if (u < 1.0 - 0.0331 * x2 * x2) return std::log(d * v);
    if (std::log(u) < 0.5 * x2 + d * (1.0 - v + std::log(v))) return std::log(d * v);
  }
}

// Works in log space so tiny shapes do not underflow to an exact zero.
double log_gamma_draw(double shape, std::mt19937_64& rng) {
  if (shape < 1.0) {
    const double boosted = log_gamma_mt(shape + 1.0, rng);
    return boosted + std::log(open_uniform(rng)) / shape;
  }
  return log_gamma_mt(shape, rng);
}

}  // namespace

void BetaParams::validate() const {
  if (!(alpha > 0.0) || !(beta > 0.0) || !std::isfinite(alpha) || !std::isfinite(beta)) {
    throw ConfigError("beta: parameters must be positive and finite, got alpha=" +
                      std::to_string(alpha) + " beta=" + std::to_string(beta));
  }
}

double sample_gamma(double shape, std::mt19937_64& rng) {
  if (!(shape > 0.0)) throw ConfigError("gamma: shape must be positive");
  return std::exp(log_gamma_draw(shape, rng));
}

double sample_beta(const BetaParams& params, std::mt19937_64& rng) {
  params.validate();
  const double lx = log_gamma_draw(params.alpha, rng);
  const double ly = log_gamma_draw(params.beta, rng);
  // x / (x + y) = 1 / (1 + exp(ly - lx))
  return 1.0 / (1.0 + std::exp(ly - lx));
}

MaskStrategy parse_mask_strategy(const std::string& s) {
  if (s == "use_i") return MaskStrategy::kUseI;
  if (s == "use_j") return MaskStrategy::kUseJ;
  if (s == "last_layer") return MaskStrategy::kLastLayer;
  throw ConfigError("unknown mask strategy '" + s + "' (use_i|use_j|last_layer)");
}

std::string to_string(MaskStrategy s) {
  switch (s) {
    case MaskStrategy::kUseI: return "use_i";
    case MaskStrategy::kUseJ: return "use_j";
    case MaskStrategy::kLastLayer: return "last_layer";
  }
  return "?";
}

QaMixStrategy parse_qa_mix_strategy(const std::string& s) {
  if (s == "direct") return QaMixStrategy::kDirect;
  if (s == "context_only") return QaMixStrategy::kContextOnly;
  if (s == "query_only") return QaMixStrategy::kQueryOnly;
  if (s == "non_answer_context") return QaMixStrategy::kNonAnswerContext;
  throw ConfigError("unknown QA mix strategy '" + s +
                    "' (direct|context_only|query_only|non_answer_context)");
}

std::string to_string(QaMixStrategy s) {
  switch (s) {
    case QaMixStrategy::kDirect: return "direct";
    case QaMixStrategy::kContextOnly: return "context_only";
    case QaMixStrategy::kQueryOnly: return "query_only";
    case QaMixStrategy::kNonAnswerContext: return "non_answer_context";
  }
  return "?";
}

MixPlan build_mix_plan(std::size_t batch_size, std::span<const std::size_t> candidates,
                       const BetaParams& params, std::mt19937_64& rng,
                       const MixOptions& options) {
  if (batch_size == 0) throw std::invalid_argument("mix plan: empty batch");
  if (candidates.empty()) throw ConfigError("mix plan: mix-layer candidate set is empty");
  params.validate();

  MixPlan plan;
  plan.mask_strategy = options.mask_strategy;
  plan.partner.resize(batch_size);
  std::iota(plan.partner.begin(), plan.partner.end(), 0);
  std::shuffle(plan.partner.begin(), plan.partner.end(), rng);

  plan.lambda.resize(batch_size);
  for (auto& l : plan.lambda) l = sample_beta(params, rng);

  std::uniform_int_distribution<std::size_t> pick(0, candidates.size() - 1);
  if (options.per_sample_layer) {
    plan.mix_layer.resize(batch_size);
    for (auto& m : plan.mix_layer) m = candidates[pick(rng)];
  } else {
    plan.mix_layer.assign(batch_size, candidates[pick(rng)]);
  }
  return plan;
}

Tensor interpolate(const Tensor& h_i, const Tensor& h_j, const Tensor& lambda,
                   const std::optional<std::vector<std::uint8_t>>& position_mask) {
  if (h_i.shape() != h_j.shape()) {
    throw ad::ShapeError("interpolate: shape mismatch " + ad::to_string(h_i.shape()) + " vs " +
                         ad::to_string(h_j.shape()));
  }
  if (h_i.rank() == 0 || lambda.shape() != ad::Shape{h_i.dim(0)}) {
    throw ad::ShapeError("interpolate: lambda " + ad::to_string(lambda.shape()) +
                         " does not match batch of " + ad::to_string(h_i.shape()));
  }
  Tensor weight = lambda;
  if (position_mask) {
    if (h_i.rank() < 2 || position_mask->size() != h_i.dim(0) * h_i.dim(1)) {
      throw ad::ShapeError("interpolate: position mask of " +
                           std::to_string(position_mask->size()) + " entries for " +
                           ad::to_string(h_i.shape()));
    }
    std::vector<double> m(position_mask->begin(), position_mask->end());
    weight = ad::mul_prefix(Tensor({h_i.dim(0), h_i.dim(1)}, std::move(m)), lambda);
  }
  Tensor keep = ad::add_scalar(ad::scale(weight, -1.0), 1.0);
  return ad::add(ad::mul_prefix(h_j, weight), ad::mul_prefix(h_i, keep));
}

std::optional<AttentionMask> resolve_attention_mask(MaskStrategy strategy,
                                                    const AttentionMask& mask_i,
                                                    const AttentionMask& mask_j,
                                                    std::size_t mix_layer,
                                                    std::size_t num_layers) {
  switch (strategy) {
    case MaskStrategy::kUseI: return mask_i;
    case MaskStrategy::kUseJ: return mask_j;
    case MaskStrategy::kLastLayer:
      if (mix_layer != num_layers) {
        throw ConfigError("mask strategy last_layer requires mixing at layer " +
                          std::to_string(num_layers) + ", got " + std::to_string(mix_layer));
      }
      return std::nullopt;
  }
  return mask_i;
}

std::vector<std::uint8_t> qa_position_mask(QaMixStrategy strategy,
                                           std::span<const Segment> segments, Span answer) {
  if (answer.start > answer.end || answer.end >= segments.size()) {
    throw DataError("qa mask: answer span [" + std::to_string(answer.start) + ", " +
                    std::to_string(answer.end) + "] outside sequence");
  }
  for (std::size_t p = answer.start; p <= answer.end; ++p) {
    if (segments[p] != Segment::kContext)
      throw DataError("qa mask: answer span is not inside the context segment");
  }
  std::vector<std::uint8_t> mask(segments.size(), 0);
  for (std::size_t p = 0; p < segments.size(); ++p) {
    const bool in_answer = p >= answer.start && p <= answer.end;
    switch (strategy) {
      case QaMixStrategy::kDirect: mask[p] = 1; break;
      case QaMixStrategy::kContextOnly: mask[p] = segments[p] == Segment::kContext; break;
      case QaMixStrategy::kQueryOnly: mask[p] = segments[p] == Segment::kQuery; break;
      case QaMixStrategy::kNonAnswerContext:
        mask[p] = segments[p] == Segment::kContext && !in_answer;
        break;
    }
  }
  return mask;
}

}  // namespace catlab
