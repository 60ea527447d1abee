#pragma once

// Run plumbing behind the cat_lab command line: dataset generation, replicate
// training runs with artifacts, sweeps, evaluation and representation export.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "catlab/datagen.hpp"
#include "catlab/encoder.hpp"
#include "catlab/trainer.hpp"

namespace catlab {

enum class DatasetKind { kClassification, kCaseStudy, kSpan };

DatasetKind parse_dataset_kind(const std::string& s);
std::string to_string(DatasetKind k);
TaskKind task_of(DatasetKind k);

struct GenerateSpec {
  DatasetKind kind = DatasetKind::kClassification;
  SCMSpec scm;
  CaseStudySpec case_study;
  SpanSpec span;
  std::size_t n_train = 5000;  // ignored by the case study, which carries its own sizes
  std::size_t n_test = 2000;

  std::size_t vocab_size() const;
  std::size_t n_classes() const;  // 0 for span
  std::uint64_t seed() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const GenerateSpec& s);
void from_json(const nlohmann::json& j, GenerateSpec& s);

using NamedSplits = std::vector<std::pair<std::string, Dataset>>;

/// train first, then evaluation splits in a fixed order.
NamedSplits generate_splits(const GenerateSpec& spec);

/// Parses a JSON file; syntax errors become "path:line:col: ..." ConfigErrors.
nlohmann::json read_json_file(const std::filesystem::path& path);

struct LoadedData {
  GenerateSpec spec;
  NamedSplits splits;

  const Dataset& train() const { return splits.front().second; }
  const Dataset& split(const std::string& name) const;
};

/// Writes <split>.jsonl per split plus manifest.json. Returns the file names.
std::vector<std::string> cmd_generate(const GenerateSpec& spec, const std::filesystem::path& out_dir);
LoadedData load_data_dir(const std::filesystem::path& dir);

struct RunConfig {
  std::optional<std::filesystem::path> data_dir;  // output of cmd_generate
  std::optional<GenerateSpec> generate;           // or generate in memory
  ModelConfig model;
  TrainConfig train;
  std::filesystem::path out = "runs/out";
  std::vector<std::uint64_t> seeds;  // empty: {train.seed}

  void validate() const;
};

void to_json(nlohmann::json& j, const RunConfig& c);
void from_json(const nlohmann::json& j, RunConfig& c);

LoadedData load_run_data(const RunConfig& c);

/// Copies task, vocabulary, class count and sequence length from the data into the model config.
ModelConfig resolve_model(const ModelConfig& model, const LoadedData& data);

struct SeedRun {
  std::uint64_t seed = 0;
  std::vector<EvalRecord> final_evals;  // one per evaluation split
  double wall_seconds = 0.0;
};

struct Aggregate {
  double mean = 0.0;
  double sd = 0.0;  // sample standard deviation; 0 for a single seed
};

Aggregate aggregate(const std::vector<double>& values);

struct TrainSummary {
  TaskKind task = TaskKind::kClassification;
  std::vector<SeedRun> runs;
  double wall_seconds = 0.0;

  /// Final value of `metric` (accuracy | em | f1) on `split` per seed.
  std::vector<double> values(const std::string& split, const std::string& metric) const;
};

struct TrainOptions {
  std::size_t workers = 1;
  bool quiet = true;
};

/// One run per seed under out/seed_<s>/ (config.json, history.csv, metrics.csv,
/// model.json) and out/summary.json. Divergence keeps partial artifacts and rethrows.
TrainSummary cmd_train(const RunConfig& config, const TrainOptions& options = {});
TrainSummary cmd_train(const RunConfig& config, const LoadedData& data, const TrainOptions& options);

nlohmann::json summary_json(const RunConfig& config, const TrainSummary& summary);

struct SweepCell {
  std::size_t index = 0;
  std::vector<std::pair<std::string, nlohmann::json>> assignment;
  std::string status;  // ok | error
  std::string message;
  std::optional<TrainSummary> summary;
};

/// Grid file: {"base": RunConfig, "grid": {"a.b": [..], "x.y,x.z": [..]}}. A key
/// listing several comma-separated paths sets all of them to the same value.
/// Cells run in order; a failing cell is recorded and the sweep continues.
std::vector<SweepCell> cmd_sweep(const nlohmann::json& grid, const std::filesystem::path& out,
                                 const TrainOptions& options = {});

/// Sets a dotted path inside a JSON object, creating intermediate objects.
void set_dotted(nlohmann::json& j, const std::string& path, const nlohmann::json& value);

std::vector<EvalMetrics> cmd_eval(const EncoderModel& model, const LoadedData& data,
                                  const std::vector<std::string>& split_names);

struct DumpOptions {
  std::size_t layer = 0;
  std::optional<double> lambda;  // fixed coefficient; otherwise Beta(alpha, beta)
  BetaParams beta{0.3, 0.3};
  std::size_t limit = 0;  // 0: whole split
  std::uint64_t seed = 0;
};

/// Rows: id, flag (original | counterfactual), label, then d_model pooled features.
/// Counterfactual i mixes example i with a random partner at `layer`.
void cmd_dump_representations(const EncoderModel& model, const Dataset& data,
                              const DumpOptions& options, const std::filesystem::path& out_csv);

}  // namespace catlab
