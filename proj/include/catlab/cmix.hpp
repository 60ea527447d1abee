#pragma once

// Counterfactual interpolation in latent space: coefficient sampling, partner
// pairing, mix-layer selection, and the attention / position masks that go
// with a mixed representation.

#include <cstdint>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "catlab/autodiff.hpp"
#include "catlab/encoder.hpp"

namespace catlab {

struct BetaParams {
  double alpha = 0.3;
  double beta = 0.3;

  void validate() const;
  double mean() const { return alpha / (alpha + beta); }
};

/// Gamma(shape, 1) draw (Marsaglia-Tsang; shapes below 1 use the U^(1/a) boost).
double sample_gamma(double shape, std::mt19937_64& rng);

/// Beta draw as X / (X + Y) with X ~ Gamma(alpha), Y ~ Gamma(beta).
double sample_beta(const BetaParams& params, std::mt19937_64& rng);

/// Which attention mask the counterfactual forward pass uses after mixing.
enum class MaskStrategy { kUseI, kUseJ, kLastLayer };

/// Which positions get mixed for span tasks.
enum class QaMixStrategy { kDirect, kContextOnly, kQueryOnly, kNonAnswerContext };

enum class Segment : std::uint8_t { kQuery = 0, kContext = 1, kOther = 2 };

MaskStrategy parse_mask_strategy(const std::string& s);
std::string to_string(MaskStrategy s);
QaMixStrategy parse_qa_mix_strategy(const std::string& s);
std::string to_string(QaMixStrategy s);

struct MixPlan {
  std::vector<std::size_t> partner;     // j for each sample i
  std::vector<double> lambda;           // in [0, 1]
  std::vector<std::size_t> mix_layer;   // m for each sample (all equal unless per-sample)
  MaskStrategy mask_strategy = MaskStrategy::kUseI;
  // (batch x seq) with 1 where mixing applies; absent means every position
  std::optional<std::vector<std::uint8_t>> position_mask;

  std::size_t size() const { return partner.size(); }
};

struct MixOptions {
  bool per_sample_layer = false;
  MaskStrategy mask_strategy = MaskStrategy::kUseI;
};

/// Shuffle pairing within the batch, a fresh lambda per sample, and a mix
/// layer drawn uniformly from `candidates` (once per batch by default).
MixPlan build_mix_plan(std::size_t batch_size, std::span<const std::size_t> candidates,
                       const BetaParams& params, std::mt19937_64& rng,
                       const MixOptions& options = {});

/// lambda * h_j + (1 - lambda) * h_i, lambda of shape (batch). Where a
/// (batch x seq) position mask is 0 the result is h_i exactly.
Tensor interpolate(const Tensor& h_i, const Tensor& h_j, const Tensor& lambda,
                   const std::optional<std::vector<std::uint8_t>>& position_mask = std::nullopt);

/// nullopt means no further attention is applied (mixing after the last layer).
std::optional<AttentionMask> resolve_attention_mask(MaskStrategy strategy,
                                                    const AttentionMask& mask_i,
                                                    const AttentionMask& mask_j,
                                                    std::size_t mix_layer,
                                                    std::size_t num_layers);

/// Inclusive answer span [start, end].
struct Span {
  std::size_t start = 0;
  std::size_t end = 0;
};

std::vector<std::uint8_t> qa_position_mask(QaMixStrategy strategy,
                                           std::span<const Segment> segments, Span answer);

}  // namespace catlab
