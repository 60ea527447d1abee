#pragma once

// Warm-up ERM followed by counterfactual steps (mix, adversarial coefficient
// search, reweighted risk, plain risk), Adam updates, and evaluation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "catlab/cal.hpp"
#include "catlab/cmix.hpp"
#include "catlab/crm.hpp"
#include "catlab/datagen.hpp"
#include "catlab/encoder.hpp"

namespace catlab {

enum class UpdateMode { kSequential, kCombined };
enum class PartnerSource { kBatch, kDataset };
enum class Preset { kErm, kCatStar, kCat };

UpdateMode parse_update_mode(const std::string& s);
std::string to_string(UpdateMode m);
PartnerSource parse_partner_source(const std::string& s);
std::string to_string(PartnerSource p);
Preset parse_preset(const std::string& s);
std::string to_string(Preset p);

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct TrainConfig {
  std::size_t epochs = 3;
  std::size_t max_steps = 0;      // overrides epochs when > 0
  std::size_t warmup_steps = 0;   // K, added to warmup_epochs worth of steps
  std::size_t warmup_epochs = 1;
  std::size_t batch_size = 8;
  double lr = 1e-3;
  double crm_lr = 1e-3;
  AdamConfig adam;
  std::vector<std::size_t> mix_layers{2, 3};  // Q
  BetaParams beta{0.3, 0.3};
  CALConfig cal;
  CRMConfig crm;
  UpdateMode update_mode = UpdateMode::kSequential;
  MixOptions mix;
  PartnerSource partner_source = PartnerSource::kBatch;
  QaMixStrategy qa_strategy = QaMixStrategy::kNonAnswerContext;
  bool use_crm = true;         // false: the main loop does plain ERM steps
  bool verify_freeze = false;  // re-check parameter bits after every inner step
  std::size_t eval_every = 0;  // steps between evaluations; 0 = only at the end
  std::uint64_t seed = 0;

  void validate(std::size_t n_layers) const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

/// Sets only the ablation switches: erm skips the counterfactual branch,
/// cat-star keeps it with zero adversarial steps, cat leaves the config as is.
void apply_preset(TrainConfig& c, Preset p);

/// Hyperparameter rows for classification and span tasks.
TrainConfig classification_defaults();
TrainConfig span_defaults();

struct StepRecord {
  std::size_t step = 0;
  std::size_t epoch = 0;
  std::string phase;  // warmup | erm | cat
  double erm_loss = 0.0;
  std::optional<double> crm_loss;
  std::optional<double> mean_abs_lambda;
  std::optional<double> mean_weight;
  std::optional<std::size_t> mix_layer;  // smallest layer used in the batch
};

struct EvalMetrics {
  std::size_t n = 0;
  double accuracy = 0.0;  // classification
  double em = 0.0;        // span
  double f1 = 0.0;        // span
};

struct EvalRecord {
  std::size_t step = 0;
  std::string split;
  EvalMetrics metrics;
};

struct TrainResult {
  std::vector<StepRecord> history;
  std::vector<EvalRecord> evals;

  const EvalMetrics& final_metrics(const std::string& split) const;
};

/// Token-overlap F1 between inclusive spans.
double span_f1(Span predicted, Span gold);

/// Highest start + end logit pair with start <= end < start + max_len.
Span best_span(std::span<const double> start_logits, std::span<const double> end_logits,
               std::size_t max_len);

EvalMetrics evaluate(const EncoderModel& model, const Dataset& data, std::size_t batch_size = 256);

/// (outer step, inner step, coefficients) after each adversarial ascent step.
using CalHook = std::function<void(std::size_t, std::size_t, const std::vector<double>&)>;

class Trainer {
 public:
  Trainer(const ModelConfig& model_config, const TrainConfig& config, TaskKind task);

  const EncoderModel& model() const { return model_; }
  EncoderModel& model() { return model_; }
  const TrainConfig& config() const { return config_; }
  std::size_t step() const { return step_; }

  StepRecord erm_step(const Dataset& data, std::span<const std::size_t> batch);
  StepRecord cat_step(const Dataset& data, std::span<const std::size_t> batch);

  /// Number of update batches for `n` training examples under this config.
  std::size_t total_steps(std::size_t n) const;
  std::size_t warmup_length(std::size_t n) const;

  TrainResult run(const Dataset& train,
                  const std::vector<std::pair<std::string, const Dataset*>>& evals = {});

  /// History and evaluations recorded before `run` threw.
  const TrainResult& partial_result() const { return partial_; }

  CalHook on_cal_step;
  /// Where the last good parameters go if the divergence guard fires.
  std::optional<std::filesystem::path> divergence_checkpoint;

 private:
  struct Forward;
  Forward forward_original(const Dataset& data, std::span<const std::size_t> batch,
                           std::size_t to_layer);
  HeadOutput head(const Tensor& h_last, const AttentionMask& mask, const Dataset& data,
                  std::span<const std::size_t> rows) const;
  void adam_update(const Tensor& loss, double lr);
  void guard(double value, const char* what, const std::vector<std::vector<double>>& last_good);
  std::vector<std::vector<double>> parameter_values() const;

  ModelConfig model_config_;
  TrainConfig config_;
  TaskKind task_;
  EncoderModel model_;
  std::mt19937_64 rng_;
  std::vector<std::vector<double>> adam_m_, adam_v_;
  std::size_t adam_t_ = 0;
  std::size_t step_ = 0;
  std::size_t epoch_ = 0;
  TrainResult partial_;
};

void write_history_csv(const std::vector<StepRecord>& history, const std::filesystem::path& path);
void write_eval_csv(const std::vector<EvalRecord>& evals, const std::filesystem::path& path);

}  // namespace catlab
