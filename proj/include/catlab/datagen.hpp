#pragma once

// Synthetic confounded datasets. Token ids 0..2 are PAD, CLS and SEP; every
// other id has exactly one role (causal, confounder, marker, trigger, answer,
// distractor or filler), assigned deterministically from the generator settings.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"

#include "catlab/cmix.hpp"

namespace catlab {

inline constexpr std::size_t kClsToken = 1;
inline constexpr std::size_t kSepToken = 2;
inline constexpr std::size_t kFirstFreeToken = 3;

enum class TaskKind { kClassification, kSpan };

TaskKind parse_task_kind(const std::string& s);
std::string to_string(TaskKind t);

struct SCMSpec {
  std::size_t vocab_size = 64;
  std::size_t n_classes = 3;
  std::size_t causal_per_class = 8;
  double rho = 0.95;  // P(confounder aligned with label) in train and iid test
  std::size_t seq_len = 16;
  double label_noise = 0.0;
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const SCMSpec& s);
void from_json(const nlohmann::json& j, SCMSpec& s);

/// Token ids per role for a classification spec.
struct ClassificationRoles {
  std::vector<std::vector<std::size_t>> causal;  // per class
  std::vector<std::size_t> confounder;           // confounder[c] is aligned with class c
  std::vector<std::size_t> filler;
};

ClassificationRoles classification_roles(const SCMSpec& spec);

struct Example {
  std::vector<std::size_t> tokens;
  std::size_t label = 0;                   // classification
  std::optional<Span> span;                // span task, inclusive
  std::vector<Segment> segments;           // span task, one per token
};

struct Dataset {
  TaskKind task = TaskKind::kClassification;
  std::size_t n_classes = 0;  // classification only
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
  bool empty() const { return examples.empty(); }
};

struct Splits {
  Dataset train;
  Dataset iid_test;
  Dataset ood_test;
};

Splits generate_classification(const SCMSpec& spec, std::size_t n_train, std::size_t n_test);

struct CaseStudySpec {
  // vocabulary, classes, causal tokens, sequence length, seed. One causal token
  // per class: a 10-example minority class could not teach eight.
  SCMSpec base{.causal_per_class = 1};
  std::size_t n_train = 100;
  std::size_t n_test = 100;
  std::vector<std::size_t> phrase;  // empty: the first three filler ids
  std::vector<double> train_proportions{0.10, 0.80, 0.10};
  std::vector<double> test_proportions{0.40, 0.20, 0.40};

  void validate() const;
};

void to_json(nlohmann::json& j, const CaseStudySpec& s);
void from_json(const nlohmann::json& j, CaseStudySpec& s);

struct CaseStudySplits {
  Dataset train;
  Dataset test;
  std::vector<std::size_t> phrase;
};

/// Largest-remainder rounding of proportions * n; counts sum to n exactly.
std::vector<std::size_t> class_counts(const std::vector<double>& proportions, std::size_t n);

CaseStudySplits generate_case_study(const CaseStudySpec& spec);

struct SpanSpec {
  std::size_t vocab_size = 64;
  std::size_t query_len = 4;
  std::size_t context_len = 16;
  std::size_t n_answer_tokens = 8;
  std::size_t max_answer_len = 2;
  std::size_t n_decoys = 2;
  double rho = 0.95;  // P(distractor sits right after the answer) in train and iid test
  std::uint64_t seed = 0;

  std::size_t seq_len() const { return query_len + context_len + 2; }
  void validate() const;
};

void to_json(nlohmann::json& j, const SpanSpec& s);
void from_json(const nlohmann::json& j, SpanSpec& s);

struct SpanRoles {
  std::size_t trigger = 0;
  std::size_t distractor = 0;
  std::vector<std::size_t> answer;
  std::vector<std::size_t> filler;
};

SpanRoles span_roles(const SpanSpec& spec);

/// [CLS] query [SEP] context. The answer is the run of answer tokens right
/// after the trigger; decoy runs of answer tokens sit elsewhere in the context.
Splits generate_span_task(const SpanSpec& spec, std::size_t n_train, std::size_t n_test);

/// Validates per-example invariants (lengths, label range, span inside context).
void validate_dataset(const Dataset& d, std::size_t vocab_size);

void write_jsonl(const Dataset& d, const std::filesystem::path& path);
Dataset read_jsonl(const std::filesystem::path& path, TaskKind task, std::size_t n_classes,
                   std::size_t vocab_size);

}  // namespace catlab
