#include "catlab/trainer.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <cstring>
#include <filesystem>
#include <numeric>

#include "catlab/errors.hpp"

namespace ad = catlab::ad;
using ad::Tensor;
using catlab::Dataset;
using catlab::TaskKind;
using catlab::Trainer;
using catlab::TrainConfig;

namespace {

catlab::ModelConfig small_model() {
  catlab::ModelConfig m;
  m.d_model = 16;
  m.n_heads = 2;
  m.n_layers = 2;
  m.d_ff = 32;
  return m;
}

TrainConfig small_config() {
  TrainConfig c = catlab::classification_defaults();
  c.mix_layers = {1, 2};
  c.epochs = 2;
  return c;
}

catlab::Splits small_data(std::size_t n = 48) {
  catlab::SCMSpec spec;
  spec.seq_len = 10;
  spec.seed = 3;
  return catlab::generate_classification(spec, n, n);
}

std::vector<std::vector<double>> params_of(const catlab::EncoderModel& m) {
  std::vector<std::vector<double>> out;
  for (const auto& p : m.parameters()) out.emplace_back(p.value.values().begin(), p.value.values().end());
  return out;
}

bool bit_equal(const std::vector<std::vector<double>>& a, const std::vector<std::vector<double>>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (a[i].size() != b[i].size()) return false;
    if (std::memcmp(a[i].data(), b[i].data(), a[i].size() * sizeof(double)) != 0) return false;
  }
  return true;
}

std::vector<std::size_t> first_rows(std::size_t n) {
  std::vector<std::size_t> r(n);
  std::iota(r.begin(), r.end(), 0);
  return r;
}

}  // namespace

TEST(Schedule, WarmupLengthCountsEpochsAndSteps) {
  auto data = small_data();
  TrainConfig c = small_config();
  c.batch_size = 8;
  c.warmup_epochs = 0;
  c.warmup_steps = 0;
  EXPECT_EQ(Trainer(small_model(), c, TaskKind::kClassification).warmup_length(48), 0u);
  c.warmup_steps = 1;
  EXPECT_EQ(Trainer(small_model(), c, TaskKind::kClassification).warmup_length(48), 1u);
  c.warmup_steps = 0;
  c.warmup_epochs = 1;
  EXPECT_EQ(Trainer(small_model(), c, TaskKind::kClassification).warmup_length(50), 7u);
  c.warmup_epochs = 5;  // capped at the total
  EXPECT_EQ(Trainer(small_model(), c, TaskKind::kClassification).warmup_length(48), 12u);
}

TEST(Schedule, PhasesFollowWarmup) {
  auto data = small_data();
  TrainConfig c = small_config();
  c.warmup_epochs = 0;
  c.warmup_steps = 2;
  c.max_steps = 5;
  Trainer t(small_model(), c, TaskKind::kClassification);
  const auto r = t.run(data.train);
  ASSERT_EQ(r.history.size(), 5u);
  EXPECT_EQ(r.history[0].phase, "warmup");
  EXPECT_EQ(r.history[1].phase, "warmup");
  EXPECT_FALSE(r.history[1].crm_loss.has_value());
  EXPECT_EQ(r.history[2].phase, "cat");
  EXPECT_TRUE(r.history[2].crm_loss.has_value());

  c.warmup_steps = 0;
  c.max_steps = 1;
  Trainer t0(small_model(), c, TaskKind::kClassification);
  EXPECT_EQ(t0.run(data.train).history[0].phase, "cat");
}

TEST(Degeneration, SequentialWithUnitWeightsIsTwoErmSteps) {
  auto data = small_data();
  TrainConfig c = small_config();
  c.cal.steps = 0;
  c.crm.a1 = c.crm.a2 = 1.0;
  c.crm_lr = c.lr;
  Trainer cat(small_model(), c, TaskKind::kClassification);
  Trainer erm(small_model(), c, TaskKind::kClassification);
  const auto rows = first_rows(8);
  ASSERT_TRUE(bit_equal(params_of(cat.model()), params_of(erm.model())));
  for (int s = 0; s < 3; ++s) {
    const auto rec = cat.cat_step(data.train, rows);
    const auto r1 = erm.erm_step(data.train, rows);
    erm.erm_step(data.train, rows);
    EXPECT_EQ(*rec.crm_loss, r1.erm_loss);
    EXPECT_EQ(*rec.mean_weight, 1.0);
    ASSERT_TRUE(bit_equal(params_of(cat.model()), params_of(erm.model()))) << "step " << s;
  }
}

TEST(Degeneration, CombinedWithUnitWeightsIsDoubledErm) {
  auto data = small_data();
  TrainConfig c = small_config();
  c.cal.steps = 0;
  c.crm.a1 = c.crm.a2 = 1.0;
  c.update_mode = catlab::UpdateMode::kCombined;
  Trainer cat(small_model(), c, TaskKind::kClassification);
  Trainer ref(small_model(), c, TaskKind::kClassification);
  const auto rows = first_rows(8);
  cat.cat_step(data.train, rows);

  // Reference: one hand-rolled Adam step on 2 * ERM.
  auto& model = ref.model();
  auto tb = catlab::TokenBatch::from_rows([&] {
    std::vector<std::vector<std::size_t>> r;
    for (auto i : rows) r.push_back(data.train.examples[i].tokens);
    return r;
  }());
  const auto e = model.embed(tb);
  const Tensor h = model.forward_layers(e.hidden, 0, model.num_layers(), e.mask);
  std::vector<std::size_t> labels;
  for (auto i : rows) labels.push_back(data.train.examples[i].label);
  const Tensor loss = ad::scale(catlab::erm_loss(model.classify(h, e.mask), labels), 2.0);
  const auto leaves = model.parameter_tensors();
  const auto g = ad::backward(loss, leaves);
  const double b1 = c.adam.beta1, b2 = c.adam.beta2;
  for (auto& p : model.parameters()) {
    const auto gv = g[p.value].values();
    auto w = p.value.mutable_values();
    for (std::size_t k = 0; k < w.size(); ++k) {
      const double m = (1.0 - b1) * gv[k];
      const double v = (1.0 - b2) * gv[k] * gv[k];
      w[k] -= c.lr * (m / (1.0 - b1)) / (std::sqrt(v / (1.0 - b2)) + c.adam.eps);
    }
  }
  EXPECT_TRUE(bit_equal(params_of(cat.model()), params_of(ref.model())));
}

TEST(Degeneration, CatStarPresetIsZeroAdversarialSteps) {
  auto data = small_data();
  TrainConfig a = small_config();
  a.warmup_epochs = 0;
  a.max_steps = 4;
  TrainConfig b = a;
  catlab::apply_preset(a, catlab::Preset::kCatStar);
  b.cal.steps = 0;
  Trainer ta(small_model(), a, TaskKind::kClassification);
  Trainer tb(small_model(), b, TaskKind::kClassification);
  ta.run(data.train);
  tb.run(data.train);
  EXPECT_TRUE(bit_equal(params_of(ta.model()), params_of(tb.model())));
}

TEST(Degeneration, ZeroStepsKeepsSampledLambda) {
  auto data = small_data();
  TrainConfig c = small_config();
  c.cal.steps = 0;
  Trainer t(small_model(), c, TaskKind::kClassification);
  std::size_t calls = 0;
  t.on_cal_step = [&](std::size_t, std::size_t, const std::vector<double>&) { ++calls; };
  t.cat_step(data.train, first_rows(8));
  EXPECT_EQ(calls, 0u);
}

TEST(Presets, ErmRunsNoCounterfactualSteps) {
  auto data = small_data();
  TrainConfig c = small_config();
  catlab::apply_preset(c, catlab::Preset::kErm);
  Trainer t(small_model(), c, TaskKind::kClassification);
  for (const auto& r : t.run(data.train).history) EXPECT_NE(r.phase, "cat");
}

TEST(CatStep, WeightsStayInsideBounds) {
  auto data = small_data(96);
  TrainConfig c = small_config();
  c.crm.a1 = 0.7;
  c.crm.a2 = 1.5;
  c.warmup_epochs = 0;
  c.max_steps = 10;
  Trainer t(small_model(), c, TaskKind::kClassification);
  for (const auto& r : t.run(data.train).history) {
    ASSERT_TRUE(r.mean_weight.has_value());
    EXPECT_GE(*r.mean_weight, 0.7);
    EXPECT_LE(*r.mean_weight, 1.5);
    EXPECT_GE(*r.mean_abs_lambda, 0.0);
    EXPECT_LE(*r.mean_abs_lambda, 1.0);
  }
}

TEST(CatStep, InnerLoopLeavesParametersUntouched) {
  auto data = small_data();
  TrainConfig c = small_config();
  c.verify_freeze = true;
  c.cal.steps = 4;
  Trainer t(small_model(), c, TaskKind::kClassification);
  std::size_t calls = 0;
  const auto before = params_of(t.model());
  t.on_cal_step = [&](std::size_t, std::size_t, const std::vector<double>&) {
    ++calls;
    EXPECT_TRUE(bit_equal(before, params_of(t.model())));
  };
  t.cat_step(data.train, first_rows(8));
  EXPECT_GE(calls, 4u);  // one group per distinct mix layer
  EXPECT_FALSE(bit_equal(before, params_of(t.model())));
}

TEST(CatStep, PerSampleLayersAndDatasetPartners) {
  auto data = small_data();
  TrainConfig c = small_config();
  c.mix.per_sample_layer = true;
  c.partner_source = catlab::PartnerSource::kDataset;
  c.warmup_epochs = 0;
  c.max_steps = 4;
  Trainer t(small_model(), c, TaskKind::kClassification);
  const auto r = t.run(data.train);
  for (const auto& s : r.history) EXPECT_TRUE(std::isfinite(*s.crm_loss));
}

TEST(CatStep, LastLayerStrategyNeedsTopLayer) {
  TrainConfig c = small_config();
  c.mix.mask_strategy = catlab::MaskStrategy::kLastLayer;
  EXPECT_THROW(Trainer(small_model(), c, TaskKind::kClassification), catlab::ConfigError);
  c.mix_layers = {2};
  EXPECT_NO_THROW(Trainer(small_model(), c, TaskKind::kClassification));
}

TEST(CatStep, SpanTaskRunsEveryQaStrategy) {
  catlab::SpanSpec spec;
  spec.seed = 1;
  auto data = catlab::generate_span_task(spec, 24, 24);
  auto m = small_model();
  m.span_head = true;
  m.max_seq_len = spec.seq_len();
  for (auto s : {catlab::QaMixStrategy::kDirect, catlab::QaMixStrategy::kContextOnly,
                 catlab::QaMixStrategy::kQueryOnly, catlab::QaMixStrategy::kNonAnswerContext}) {
    TrainConfig c = catlab::span_defaults();
    c.mix_layers = {1, 2};
    c.qa_strategy = s;
    c.warmup_epochs = 0;
    c.max_steps = 2;
    Trainer t(m, c, TaskKind::kSpan);
    const auto r = t.run(data.train, {{"ood", &data.ood_test}});
    EXPECT_GE(*r.history.back().mean_weight, 0.7);
    const auto& em = r.final_metrics("ood");
    EXPECT_GE(em.f1, em.em);
  }
}

TEST(Determinism, SameSeedSameHistory) {
  auto data = small_data();
  TrainConfig c = small_config();
  c.warmup_epochs = 1;
  c.epochs = 2;
  c.seed = 11;
  Trainer a(small_model(), c, TaskKind::kClassification);
  Trainer b(small_model(), c, TaskKind::kClassification);
  const auto ra = a.run(data.train, {{"iid", &data.iid_test}});
  const auto rb = b.run(data.train, {{"iid", &data.iid_test}});
  ASSERT_EQ(ra.history.size(), rb.history.size());
  for (std::size_t i = 0; i < ra.history.size(); ++i) {
    EXPECT_EQ(ra.history[i].erm_loss, rb.history[i].erm_loss);
    EXPECT_EQ(ra.history[i].crm_loss, rb.history[i].crm_loss);
  }
  EXPECT_TRUE(bit_equal(params_of(a.model()), params_of(b.model())));

  c.seed = 12;
  Trainer other(small_model(), c, TaskKind::kClassification);
  other.run(data.train);
  EXPECT_FALSE(bit_equal(params_of(a.model()), params_of(other.model())));
}

TEST(Determinism, EpochCounterAdvances) {
  auto data = small_data(16);
  TrainConfig c = small_config();
  c.epochs = 3;
  Trainer t(small_model(), c, TaskKind::kClassification);
  const auto r = t.run(data.train);
  ASSERT_EQ(r.history.size(), 6u);
  EXPECT_EQ(r.history[0].epoch, 0u);
  EXPECT_EQ(r.history[2].epoch, 1u);
  EXPECT_EQ(r.history[5].epoch, 2u);
}

TEST(Guard, NonFiniteLossRestoresAndThrows) {
  auto data = small_data();
  TrainConfig c = small_config();
  Trainer t(small_model(), c, TaskKind::kClassification);
  auto& w = t.model().parameters().back().value;
  w.mutable_values()[0] = std::numeric_limits<double>::quiet_NaN();
  const auto before = params_of(t.model());
  const auto path = std::filesystem::temp_directory_path() / "catlab_guard_ckpt.json";
  std::filesystem::remove(path);
  t.divergence_checkpoint = path;
  EXPECT_THROW(t.erm_step(data.train, first_rows(8)), catlab::DivergenceError);
  EXPECT_TRUE(std::filesystem::exists(path));
  // parameters are the pre-step values, not a half-applied update
  const auto after = params_of(t.model());
  for (std::size_t i = 0; i + 1 < after.size(); ++i) EXPECT_EQ(after[i], before[i]);
  std::filesystem::remove(path);
}

TEST(Metrics, SpanF1) {
  EXPECT_DOUBLE_EQ(catlab::span_f1({6, 7}, {6, 8}), 0.8);
  EXPECT_DOUBLE_EQ(catlab::span_f1({6, 8}, {6, 8}), 1.0);
  EXPECT_DOUBLE_EQ(catlab::span_f1({1, 2}, {6, 8}), 0.0);
}

TEST(Metrics, BestSpanRespectsOrderAndLength) {
  const std::vector<double> st{0, 5, 0, 0}, en{1, 0, 0, 4};
  EXPECT_EQ(catlab::best_span(st, en, 4).start, 1u);
  EXPECT_EQ(catlab::best_span(st, en, 4).end, 3u);
  EXPECT_EQ(catlab::best_span(st, en, 1).end, 1u);  // start 1 only reaches end 1
}

TEST(Metrics, AccuracyOfOwnPredictionsIsOne) {
  auto data = small_data(200);
  Trainer t(small_model(), small_config(), TaskKind::kClassification);
  Dataset relabeled = data.iid_test;
  for (auto& ex : relabeled.examples) {
    Dataset one{TaskKind::kClassification, 3, {ex}};
    for (std::size_t k = 0; k < 3; ++k) {
      one.examples[0].label = k;
      if (catlab::evaluate(t.model(), one).accuracy == 1.0) {
        ex.label = k;
        break;
      }
    }
  }
  EXPECT_DOUBLE_EQ(catlab::evaluate(t.model(), relabeled).accuracy, 1.0);
  EXPECT_DOUBLE_EQ(catlab::evaluate(t.model(), relabeled, 7).accuracy, 1.0);
}

TEST(Metrics, RandomLabelsGiveChance) {
  catlab::SCMSpec spec;
  spec.seq_len = 10;
  spec.label_noise = 0.0;
  auto data = catlab::generate_classification(spec, 10, 3000);
  std::mt19937_64 rng(5);
  std::uniform_int_distribution<std::size_t> pick(0, 2);
  for (auto& ex : data.iid_test.examples) ex.label = pick(rng);
  Trainer t(small_model(), small_config(), TaskKind::kClassification);
  EXPECT_NEAR(catlab::evaluate(t.model(), data.iid_test).accuracy, 1.0 / 3.0, 0.03);
}

TEST(Metrics, EmptyDatasetIsDataError) {
  Trainer t(small_model(), small_config(), TaskKind::kClassification);
  EXPECT_THROW(catlab::evaluate(t.model(), Dataset{}), catlab::DataError);
}

TEST(Config, JsonRoundTripAndUnknownKeys) {
  TrainConfig c = catlab::span_defaults();
  c.update_mode = catlab::UpdateMode::kCombined;
  c.mix_layers = {1, 3};
  c.crm.estimator = catlab::WeightEstimator::kTrueLabelProb;
  nlohmann::json j = c;
  TrainConfig d = j.get<TrainConfig>();
  EXPECT_EQ(nlohmann::json(d), j);

  j["cal"]["stpes"] = 2;
  EXPECT_THROW(j.get<TrainConfig>(), catlab::ConfigError);
  EXPECT_THROW(nlohmann::json({{"update_mode", "both"}}).get<TrainConfig>(), catlab::ConfigError);
}

TEST(Config, ValidationRejectsBadValues) {
  TrainConfig c = small_config();
  c.mix_layers = {};
  EXPECT_THROW(Trainer(small_model(), c, TaskKind::kClassification), catlab::ConfigError);
  c = small_config();
  c.mix_layers = {3};
  EXPECT_THROW(Trainer(small_model(), c, TaskKind::kClassification), catlab::ConfigError);
  c = small_config();
  c.crm.a1 = 2.0;
  c.crm.a2 = 1.0;
  EXPECT_THROW(Trainer(small_model(), c, TaskKind::kClassification), catlab::ConfigError);
  EXPECT_THROW(Trainer(small_model(), small_config(), TaskKind::kSpan), catlab::ConfigError);
}
