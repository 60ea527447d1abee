#pragma once

// Compact pre-LN transformer encoder with a split forward pass.

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "catlab/autodiff.hpp"

namespace catlab {

using ad::Tensor;

inline constexpr std::size_t kPadToken = 0;

struct ModelConfig {
  std::size_t vocab_size = 64;
  std::size_t d_model = 32;
  std::size_t n_heads = 4;
  std::size_t n_layers = 4;
  std::size_t d_ff = 64;
  std::size_t max_seq_len = 24;
  std::size_t n_classes = 3;
  bool span_head = false;
  double dropout = 0.0;

  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Token ids for a padded batch, row-major (batch x seq).
struct TokenBatch {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::size_t> ids;

  static TokenBatch from_rows(const std::vector<std::vector<std::size_t>>& rows);
};

/// keep[b * seq + s] == 1 when position s of row b may be attended to.
struct AttentionMask {
  std::size_t batch = 0;
  std::size_t seq = 0;
  std::vector<std::uint8_t> keep;

  static AttentionMask all_visible(std::size_t batch, std::size_t seq);
  // Rows of this mask picked by `rows` (partner lookup).
  AttentionMask select_rows(std::span<const std::size_t> rows) const;
};

struct Embedded {
  Tensor hidden;  // (batch, seq, d_model)
  AttentionMask mask;
};

struct SpanLogits {
  Tensor start;  // (batch, seq)
  Tensor end;    // (batch, seq)
};

struct NamedParameter {
  std::string name;
  Tensor value;
};

class EncoderModel {
 public:
  EncoderModel(const ModelConfig& config, std::mt19937_64& init_rng);

  EncoderModel(const EncoderModel&) = delete;
  EncoderModel& operator=(const EncoderModel&) = delete;
  EncoderModel(EncoderModel&&) = default;
  EncoderModel& operator=(EncoderModel&&) = default;

  const ModelConfig& config() const { return config_; }
  std::size_t num_layers() const { return config_.n_layers; }

  Embedded embed(const TokenBatch& tokens, std::mt19937_64* dropout_rng = nullptr) const;

  /// Applies layers from_layer+1 .. to_layer. Equal bounds return `h` itself.
  Tensor forward_layers(const Tensor& h, std::size_t from_layer, std::size_t to_layer,
                        const AttentionMask& mask, std::mt19937_64* dropout_rng = nullptr) const;

  /// Final layer norm, first position. (batch, d_model)
  Tensor pooled(const Tensor& h_last) const;

  /// First-position pooling, then affine -> tanh -> affine. (batch, n_classes)
  Tensor classify(const Tensor& h_last, const AttentionMask& mask) const;

  /// Per-position start/end logits; pad positions are pushed to -1e9.
  SpanLogits span_logits(const Tensor& h_last, const AttentionMask& mask) const;

  std::vector<NamedParameter>& parameters() { return params_; }
  const std::vector<NamedParameter>& parameters() const { return params_; }
  std::vector<Tensor> parameter_tensors() const;
  std::size_t parameter_count() const;

  /// Deep copy with independent parameter storage.
  EncoderModel snapshot() const;

  nlohmann::json to_checkpoint() const;
  static EncoderModel from_checkpoint(const nlohmann::json& j);
  void save(const std::filesystem::path& path) const;
  static EncoderModel load(const std::filesystem::path& path);

 private:
  struct LayerParams {
    std::size_t ln1_gain, ln1_bias, wq, bq, wk, bk, wv, bv, wo, bo;
    std::size_t ln2_gain, ln2_bias, w1, b1, w2, b2;
  };

  explicit EncoderModel(const ModelConfig& config) : config_(config) {}
  std::size_t add_param(std::string name, Tensor value);
  void build(std::mt19937_64* init_rng);
  const Tensor& p(std::size_t index) const { return params_[index].value; }

  Tensor attention(const Tensor& x, const LayerParams& lp, const AttentionMask& mask) const;
  Tensor final_norm(const Tensor& h) const;
  Tensor dropout(const Tensor& x, std::mt19937_64* rng) const;

  ModelConfig config_;
  std::vector<NamedParameter> params_;
  std::size_t tok_emb_ = 0, pos_emb_ = 0;
  std::vector<LayerParams> layers_;
  std::size_t lnf_gain_ = 0, lnf_bias_ = 0;
  std::size_t cls_w1_ = 0, cls_b1_ = 0, cls_w2_ = 0, cls_b2_ = 0;
  std::size_t start_w_ = 0, start_b_ = 0, end_w_ = 0, end_b_ = 0;
};

}  // namespace catlab
