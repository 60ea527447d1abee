#include "catlab/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <numeric>
#include <set>

#include "catlab/errors.hpp"

namespace catlab {

namespace {

EncoderModel init_model(const ModelConfig& cfg, std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 0u};
  std::mt19937_64 rng(seq);
  return EncoderModel(cfg, rng);
}

std::mt19937_64 train_rng(std::uint64_t seed) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32), 1u};
  return std::mt19937_64(seq);
}

TokenBatch make_tokens(const Dataset& data, std::span<const std::size_t> rows, std::size_t seq) {
  TokenBatch tb;
  tb.batch = rows.size();
  tb.seq = seq;
  tb.ids.assign(tb.batch * seq, kPadToken);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    const auto& toks = data.examples.at(rows[r]).tokens;
    std::copy(toks.begin(), toks.end(), tb.ids.begin() + r * seq);
  }
  return tb;
}

std::size_t max_len(const Dataset& data, std::span<const std::size_t> rows) {
  std::size_t s = 0;
  for (auto r : rows) s = std::max(s, data.examples.at(r).tokens.size());
  return s;
}

// Rows of a (batch, ...) tensor.
Tensor select_rows(const Tensor& t, std::span<const std::size_t> rows) {
  const std::size_t b = t.dim(0);
  const std::size_t rest = t.numel() / b;
  ad::Shape out = t.shape();
  out[0] = rows.size();
  return ad::reshape(ad::gather_rows(ad::reshape(t, {b, rest}), rows), out);
}

Tensor select_entries(const Tensor& v, std::span<const std::size_t> rows) {
  return select_rows(v, rows);
}

bool is_identity(std::span<const std::size_t> rows, std::size_t n) {
  if (rows.size() != n) return false;
  for (std::size_t i = 0; i < n; ++i)
    if (rows[i] != i) return false;
  return true;
}

double mean_of(std::span<const double> v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const char* where) {
  if (!j.is_object()) throw ConfigError(std::string(where) + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ConfigError(std::string(where) + ": unknown key '" + key + "'");
  }
}

}  // namespace

UpdateMode parse_update_mode(const std::string& s) {
  if (s == "sequential") return UpdateMode::kSequential;
  if (s == "combined") return UpdateMode::kCombined;
  throw ConfigError("unknown update mode '" + s + "' (sequential|combined)");
}

std::string to_string(UpdateMode m) { return m == UpdateMode::kSequential ? "sequential" : "combined"; }

PartnerSource parse_partner_source(const std::string& s) {
  if (s == "batch") return PartnerSource::kBatch;
  if (s == "dataset") return PartnerSource::kDataset;
  throw ConfigError("unknown partner source '" + s + "' (batch|dataset)");
}

std::string to_string(PartnerSource p) { return p == PartnerSource::kBatch ? "batch" : "dataset"; }

Preset parse_preset(const std::string& s) {
  if (s == "erm") return Preset::kErm;
  if (s == "cat-star") return Preset::kCatStar;
  if (s == "cat") return Preset::kCat;
  throw ConfigError("unknown preset '" + s + "' (erm|cat-star|cat)");
}

std::string to_string(Preset p) {
  switch (p) {
    case Preset::kErm: return "erm";
    case Preset::kCatStar: return "cat-star";
    case Preset::kCat: return "cat";
  }
  return "?";
}

void TrainConfig::validate(std::size_t n_layers) const {
  if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
  if (max_steps == 0 && epochs == 0) throw ConfigError("train: need epochs or max_steps");
  if (!(lr > 0.0) || !(crm_lr > 0.0)) throw ConfigError("train: learning rates must be > 0");
  if (mix_layers.empty()) throw ConfigError("train: mix layer set Q is empty");
  for (auto m : mix_layers) {
    if (m < 1 || m > n_layers)
      throw ConfigError("train: mix layer " + std::to_string(m) + " outside [1, " +
                        std::to_string(n_layers) + "]");
    if (mix.mask_strategy == MaskStrategy::kLastLayer && m != n_layers)
      throw ConfigError("train: last_layer mask strategy requires Q = {" + std::to_string(n_layers) + "}");
  }
  if (!(adam.beta1 >= 0.0 && adam.beta1 < 1.0 && adam.beta2 >= 0.0 && adam.beta2 < 1.0 && adam.eps > 0.0))
    throw ConfigError("train: invalid Adam constants");
  beta.validate();
  cal.validate();
  crm.validate();
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"epochs", c.epochs},
       {"max_steps", c.max_steps},
       {"warmup_steps", c.warmup_steps},
       {"warmup_epochs", c.warmup_epochs},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"crm_lr", c.crm_lr},
       {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
       {"mix_layers", c.mix_layers},
       {"beta", {{"alpha", c.beta.alpha}, {"beta", c.beta.beta}}},
       {"cal",
        {{"gamma", c.cal.gamma}, {"eta", c.cal.eta}, {"p", c.cal.p}, {"steps", c.cal.steps},
         {"lr", c.cal.lr}}},
       {"crm",
        {{"a1", c.crm.a1}, {"a2", c.crm.a2}, {"detach_weights", c.crm.detach_weights},
         {"estimator", to_string(c.crm.estimator)}}},
       {"update_mode", to_string(c.update_mode)},
       {"per_sample_layer", c.mix.per_sample_layer},
       {"mask_strategy", to_string(c.mix.mask_strategy)},
       {"partner_source", to_string(c.partner_source)},
       {"qa_strategy", to_string(c.qa_strategy)},
       {"use_crm", c.use_crm},
       {"verify_freeze", c.verify_freeze},
       {"eval_every", c.eval_every},
       {"seed", c.seed}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  check_keys(j,
             {"epochs", "max_steps", "warmup_steps", "warmup_epochs", "batch_size", "lr", "crm_lr",
              "adam", "mix_layers", "beta", "cal", "crm", "update_mode", "per_sample_layer",
              "mask_strategy", "partner_source", "qa_strategy", "use_crm", "verify_freeze",
              "eval_every", "seed"},
             "train");
  c.epochs = j.value("epochs", c.epochs);
  c.max_steps = j.value("max_steps", c.max_steps);
  c.warmup_steps = j.value("warmup_steps", c.warmup_steps);
  c.warmup_epochs = j.value("warmup_epochs", c.warmup_epochs);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.lr = j.value("lr", c.lr);
  c.crm_lr = j.value("crm_lr", c.crm_lr);
  if (j.contains("adam")) {
    const auto& a = j["adam"];
    check_keys(a, {"beta1", "beta2", "eps"}, "train.adam");
    c.adam.beta1 = a.value("beta1", c.adam.beta1);
    c.adam.beta2 = a.value("beta2", c.adam.beta2);
    c.adam.eps = a.value("eps", c.adam.eps);
  }
  c.mix_layers = j.value("mix_layers", c.mix_layers);
  if (j.contains("beta")) {
    const auto& b = j["beta"];
    check_keys(b, {"alpha", "beta"}, "train.beta");
    c.beta.alpha = b.value("alpha", c.beta.alpha);
    c.beta.beta = b.value("beta", c.beta.beta);
  }
  if (j.contains("cal")) {
    const auto& a = j["cal"];
    check_keys(a, {"gamma", "eta", "p", "steps", "lr"}, "train.cal");
    c.cal.gamma = a.value("gamma", c.cal.gamma);
    c.cal.eta = a.value("eta", c.cal.eta);
    c.cal.p = a.value("p", c.cal.p);
    c.cal.steps = a.value("steps", c.cal.steps);
    c.cal.lr = a.value("lr", c.cal.lr);
  }
  if (j.contains("crm")) {
    const auto& a = j["crm"];
    check_keys(a, {"a1", "a2", "detach_weights", "estimator"}, "train.crm");
    c.crm.a1 = a.value("a1", c.crm.a1);
    c.crm.a2 = a.value("a2", c.crm.a2);
    c.crm.detach_weights = a.value("detach_weights", c.crm.detach_weights);
    if (a.contains("estimator")) c.crm.estimator = parse_weight_estimator(a["estimator"].get<std::string>());
  }
  if (j.contains("update_mode")) c.update_mode = parse_update_mode(j["update_mode"].get<std::string>());
  c.mix.per_sample_layer = j.value("per_sample_layer", c.mix.per_sample_layer);
  if (j.contains("mask_strategy"))
    c.mix.mask_strategy = parse_mask_strategy(j["mask_strategy"].get<std::string>());
  if (j.contains("partner_source"))
    c.partner_source = parse_partner_source(j["partner_source"].get<std::string>());
  if (j.contains("qa_strategy")) c.qa_strategy = parse_qa_mix_strategy(j["qa_strategy"].get<std::string>());
  c.use_crm = j.value("use_crm", c.use_crm);
  c.verify_freeze = j.value("verify_freeze", c.verify_freeze);
  c.eval_every = j.value("eval_every", c.eval_every);
  c.seed = j.value("seed", c.seed);
}

void apply_preset(TrainConfig& c, Preset p) {
  switch (p) {
    case Preset::kErm: c.use_crm = false; break;
    case Preset::kCatStar:
      c.use_crm = true;
      c.cal.steps = 0;
      break;
    case Preset::kCat: c.use_crm = true; break;
  }
}

TrainConfig classification_defaults() {
  TrainConfig c;
  c.batch_size = 8;
  c.beta = {0.3, 0.3};
  c.cal.gamma = 10.0;
  c.cal.eta = 20.0;
  c.cal.steps = 3;
  c.cal.lr = 2e-2;
  c.crm.a1 = 0.0;
  c.crm.a2 = 10.0;
  c.warmup_epochs = 1;
  return c;
}

TrainConfig span_defaults() {
  TrainConfig c;
  c.batch_size = 12;
  c.beta = {5.0, 5.0};
  c.cal.gamma = 10.0;
  c.cal.eta = 20.0;
  c.cal.steps = 1;
  c.cal.lr = 5e-2;
  c.crm.a1 = 0.7;
  c.crm.a2 = 10.0;
  c.warmup_epochs = 1;
  c.qa_strategy = QaMixStrategy::kNonAnswerContext;
  return c;
}

const EvalMetrics& TrainResult::final_metrics(const std::string& split) const {
  for (auto it = evals.rbegin(); it != evals.rend(); ++it)
    if (it->split == split) return it->metrics;
  throw std::out_of_range("no evaluation recorded for split '" + split + "'");
}

double span_f1(Span predicted, Span gold) {
  const std::size_t lo = std::max(predicted.start, gold.start);
  const std::size_t hi = std::min(predicted.end, gold.end);
  if (lo > hi) return 0.0;
  const double overlap = static_cast<double>(hi - lo + 1);
  const double precision = overlap / static_cast<double>(predicted.end - predicted.start + 1);
  const double recall = overlap / static_cast<double>(gold.end - gold.start + 1);
  return 2.0 * precision * recall / (precision + recall);
}

Span best_span(std::span<const double> start_logits, std::span<const double> end_logits,
               std::size_t max_len) {
  Span best{0, 0};
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t s = 0; s < start_logits.size(); ++s) {
    for (std::size_t e = s; e < end_logits.size() && e < s + max_len; ++e) {
      const double score = start_logits[s] + end_logits[e];
      if (score > best_score) {
        best_score = score;
        best = {s, e};
      }
    }
  }
  return best;
}

EvalMetrics evaluate(const EncoderModel& model, const Dataset& data, std::size_t batch_size) {
  if (data.empty()) throw DataError("evaluate: empty dataset");
  EvalMetrics m;
  m.n = data.size();
  double hits = 0.0, f1 = 0.0;
  std::vector<std::size_t> rows;
  for (std::size_t start = 0; start < data.size(); start += batch_size) {
    rows.resize(std::min(batch_size, data.size() - start));
    std::iota(rows.begin(), rows.end(), start);
    const auto tb = make_tokens(data, rows, max_len(data, rows));
    const auto e = model.embed(tb);
    const Tensor h = model.forward_layers(e.hidden, 0, model.num_layers(), e.mask);
    if (data.task == TaskKind::kClassification) {
      const Tensor logits = model.classify(h, e.mask);
      const std::size_t k = logits.dim(1);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto row = logits.values().subspan(r * k, k);
        const auto pred = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        hits += pred == data.examples[rows[r]].label;
      }
    } else {
      const auto sl = model.span_logits(h, e.mask);
      const std::size_t s = tb.seq;
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const Span pred = best_span(sl.start.values().subspan(r * s, s), sl.end.values().subspan(r * s, s), s);
        const Span gold = *data.examples[rows[r]].span;
        hits += pred.start == gold.start && pred.end == gold.end;
        f1 += span_f1(pred, gold);
      }
    }
  }
  const double n = static_cast<double>(data.size());
  if (data.task == TaskKind::kClassification) {
    m.accuracy = hits / n;
  } else {
    m.em = hits / n;
    m.f1 = f1 / n;
  }
  return m;
}

struct Trainer::Forward {
  TokenBatch tokens;
  Embedded embedded;
};

Trainer::Trainer(const ModelConfig& model_config, const TrainConfig& config, TaskKind task)
    : model_config_(model_config),
      config_(config),
      task_(task),
      model_(init_model(model_config, config.seed)),
      rng_(train_rng(config.seed)) {
  if ((task == TaskKind::kSpan) != model_config.span_head)
    throw ConfigError("train: task '" + to_string(task) + "' does not match the model head");
  config_.validate(model_.num_layers());
  for (const auto& p : model_.parameters()) {
    adam_m_.emplace_back(p.value.numel(), 0.0);
    adam_v_.emplace_back(p.value.numel(), 0.0);
  }
}

std::size_t Trainer::total_steps(std::size_t n) const {
  if (config_.max_steps > 0) return config_.max_steps;
  const std::size_t per_epoch = (n + config_.batch_size - 1) / config_.batch_size;
  return per_epoch * config_.epochs;
}

std::size_t Trainer::warmup_length(std::size_t n) const {
  const std::size_t per_epoch = (n + config_.batch_size - 1) / config_.batch_size;
  return std::min(total_steps(n), config_.warmup_steps + config_.warmup_epochs * per_epoch);
}

std::vector<std::vector<double>> Trainer::parameter_values() const {
  std::vector<std::vector<double>> out;
  out.reserve(model_.parameters().size());
  for (const auto& p : model_.parameters()) out.emplace_back(p.value.values().begin(), p.value.values().end());
  return out;
}

void Trainer::guard(double value, const char* what, const std::vector<std::vector<double>>& last_good) {
  if (std::isfinite(value)) return;
  auto& params = model_.parameters();
  for (std::size_t i = 0; i < params.size(); ++i)
    std::copy(last_good[i].begin(), last_good[i].end(), params[i].value.mutable_values().begin());
  if (divergence_checkpoint) model_.save(*divergence_checkpoint);
  throw DivergenceError(std::string("non-finite ") + what + " at step " + std::to_string(step_));
}

void Trainer::adam_update(const Tensor& loss, double lr) {
  const auto params = model_.parameter_tensors();
  const auto grads = ad::backward(loss, params);
  ++adam_t_;
  const double b1 = config_.adam.beta1, b2 = config_.adam.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(adam_t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(adam_t_));
  auto& named = model_.parameters();
  for (std::size_t i = 0; i < named.size(); ++i) {
    const auto g = grads[named[i].value].values();
    auto w = named[i].value.mutable_values();
    auto& m = adam_m_[i];
    auto& v = adam_v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = b1 * m[k] + (1.0 - b1) * g[k];
      v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + config_.adam.eps);
    }
  }
}

Trainer::Forward Trainer::forward_original(const Dataset& data, std::span<const std::size_t> batch,
                                           std::size_t) {
  Forward f;
  f.tokens = make_tokens(data, batch, max_len(data, batch));
  std::mt19937_64* drop = model_config_.dropout > 0.0 ? &rng_ : nullptr;
  f.embedded = model_.embed(f.tokens, drop);
  return f;
}

HeadOutput Trainer::head(const Tensor& h_last, const AttentionMask& mask, const Dataset& data,
                         std::span<const std::size_t> rows) const {
  if (task_ == TaskKind::kClassification) {
    std::vector<std::size_t> labels(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) labels[i] = data.examples[rows[i]].label;
    return classification_outcome(model_.classify(h_last, mask), labels);
  }
  std::vector<Span> spans(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) spans[i] = *data.examples[rows[i]].span;
  return span_outcome(model_.span_logits(h_last, mask), spans);
}

StepRecord Trainer::erm_step(const Dataset& data, std::span<const std::size_t> batch) {
  const auto last_good = parameter_values();
  std::mt19937_64* drop = model_config_.dropout > 0.0 ? &rng_ : nullptr;
  auto f = forward_original(data, batch, 0);
  const Tensor h = model_.forward_layers(f.embedded.hidden, 0, model_.num_layers(), f.embedded.mask, drop);
  const Tensor loss = ad::mean(head(h, f.embedded.mask, data, batch).loss);
  guard(loss.item(), "ERM loss", last_good);
  adam_update(loss, config_.lr);
  StepRecord rec;
  rec.step = step_++;
  rec.epoch = epoch_;
  rec.phase = "erm";
  rec.erm_loss = loss.item();
  return rec;
}

StepRecord Trainer::cat_step(const Dataset& data, std::span<const std::size_t> batch) {
  const auto last_good = parameter_values();
  const std::size_t B = batch.size();
  const std::size_t L = model_.num_layers();
  std::mt19937_64* drop = model_config_.dropout > 0.0 ? &rng_ : nullptr;

  // (1) mixing plan and partner rows
  const MixPlan plan = build_mix_plan(B, config_.mix_layers, config_.beta, rng_, config_.mix);
  std::vector<std::size_t> partner_rows(B);
  if (config_.partner_source == PartnerSource::kBatch) {
    for (std::size_t i = 0; i < B; ++i) partner_rows[i] = batch[plan.partner[i]];
  } else {
    std::uniform_int_distribution<std::size_t> any(0, data.size() - 1);
    for (auto& r : partner_rows) r = any(rng_);
  }

  // (2) forward originals through every layer the plan needs
  const std::size_t seq = std::max(max_len(data, batch), max_len(data, partner_rows));
  const TokenBatch tokens = make_tokens(data, batch, seq);
  const Embedded e = model_.embed(tokens, drop);
  std::set<std::size_t> layers(plan.mix_layer.begin(), plan.mix_layer.end());
  std::map<std::size_t, Tensor> h_at;
  Tensor h = e.hidden;
  std::size_t at = 0;
  for (auto m : layers) {
    h = model_.forward_layers(h, at, m, e.mask, drop);
    h_at[m] = h;
    at = m;
  }
  const Tensor h_last = model_.forward_layers(h, at, L, e.mask, drop);
  const HeadOutput original = head(h_last, e.mask, data, batch);

  // partner states at the same layers (never differentiated)
  std::map<std::size_t, Tensor> partner_at;
  AttentionMask partner_mask;
  if (config_.partner_source == PartnerSource::kBatch) {
    partner_mask = e.mask.select_rows(plan.partner);
    for (const auto& [m, hm] : h_at) partner_at[m] = select_rows(ad::detach(hm), plan.partner);
  } else {
    const Embedded pe = model_.embed(make_tokens(data, partner_rows, seq));
    partner_mask = pe.mask;
    Tensor ph = ad::detach(pe.hidden);
    std::size_t pat = 0;
    for (auto m : layers) {
      ph = ad::detach(model_.forward_layers(ph, pat, m, pe.mask));
      partner_at[m] = ph;
      pat = m;
    }
  }

  // (3) adversarial coefficients and counterfactual predictions, per mix layer
  std::vector<double> lambda_final(B, 0.0);
  std::vector<Tensor> group_weights;
  std::vector<std::size_t> order;
  std::vector<double> weight_values(B, 0.0);
  for (auto m : layers) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < B; ++i)
      if (plan.mix_layer[i] == m) rows.push_back(i);
    const bool all = is_identity(rows, B);
    std::vector<std::size_t> data_rows(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) data_rows[k] = batch[rows[k]];

    CounterfactualContext ctx;
    ctx.model = &model_;
    const Tensor hi = ad::detach(h_at[m]);
    ctx.h_i = all ? hi : select_rows(hi, rows);
    ctx.h_j = all ? partner_at[m] : select_rows(partner_at[m], rows);
    ctx.mix_layer = m;
    const AttentionMask mask_i = all ? e.mask : e.mask.select_rows(rows);
    const AttentionMask mask_j = all ? partner_mask : partner_mask.select_rows(rows);
    ctx.attention = resolve_attention_mask(config_.mix.mask_strategy, mask_i, mask_j, m, L);
    if (task_ == TaskKind::kSpan) {
      std::vector<std::uint8_t> pm;
      pm.reserve(rows.size() * seq);
      for (auto r : data_rows) {
        const auto& ex = data.examples[r];
        auto one = qa_position_mask(config_.qa_strategy, ex.segments, *ex.span);
        one.resize(seq, 0);
        pm.insert(pm.end(), one.begin(), one.end());
      }
      ctx.position_mask = std::move(pm);
    }
    ctx.head = [this, mask_i, &data, data_rows](const Tensor& hl) {
      return head(hl, mask_i, data, data_rows);
    };

    std::vector<double> lam0(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) lam0[k] = plan.lambda[rows[k]];
    std::vector<std::vector<double>> frozen;
    if (config_.verify_freeze) frozen = parameter_values();
    const auto lam = optimize_lambda(lam0, ctx, config_.cal, [&](std::size_t inner, const std::vector<double>& l) {
      if (config_.verify_freeze && parameter_values() != frozen)
        throw std::logic_error("parameters changed during the adversarial inner loop");
      if (on_cal_step) on_cal_step(step_, inner, l);
    });

    const HeadOutput cf = ctx.head(counterfactual_states(ctx, Tensor({rows.size()}, lam)));
    HeadOutput orig_rows = original;
    if (!all) {
      orig_rows.loss = select_entries(original.loss, rows);
      orig_rows.phi = select_entries(original.phi, rows);
      orig_rows.label_prob = select_entries(original.label_prob, rows);
    }
    const CRMWeights w = crm_weights(orig_rows, cf, config_.crm);
    for (std::size_t k = 0; k < rows.size(); ++k) {
      lambda_final[rows[k]] = lam[k];
      weight_values[rows[k]] = w.bounded[k];
    }
    group_weights.push_back(w.bounded);
    order.insert(order.end(), rows.begin(), rows.end());
  }

  Tensor weights = group_weights.front();
  if (group_weights.size() > 1) {
    std::vector<std::size_t> inverse(B);
    for (std::size_t k = 0; k < B; ++k) inverse[order[k]] = k;
    weights = select_entries(ad::concat(group_weights, 0), inverse);
  }

  // (4)-(6) reweighted and plain risk, then updates
  const Tensor crm = crm_loss(original.loss, weights);
  StepRecord rec;
  rec.epoch = epoch_;
  rec.phase = "cat";
  rec.crm_loss = crm.item();
  double abs_sum = 0.0;
  for (double l : lambda_final) abs_sum += std::abs(l);
  rec.mean_abs_lambda = abs_sum / static_cast<double>(B);
  rec.mean_weight = mean_of(weight_values);
  rec.mix_layer = *layers.begin();

  if (config_.update_mode == UpdateMode::kSequential) {
    guard(crm.item(), "CRM loss", last_good);
    adam_update(crm, config_.crm_lr);
    const Embedded e2 = model_.embed(tokens, drop);
    const Tensor h2 = model_.forward_layers(e2.hidden, 0, L, e2.mask, drop);
    const Tensor erm = ad::mean(head(h2, e2.mask, data, batch).loss);
    guard(erm.item(), "ERM loss", last_good);
    adam_update(erm, config_.lr);
    rec.erm_loss = erm.item();
  } else {
    const Tensor erm = ad::mean(original.loss);
    const Tensor total = ad::add(crm, erm);
    guard(total.item(), "combined loss", last_good);
    adam_update(total, config_.lr);
    rec.erm_loss = erm.item();
  }
  rec.step = step_++;
  return rec;
}

TrainResult Trainer::run(const Dataset& train,
                         const std::vector<std::pair<std::string, const Dataset*>>& evals) {
  if (train.empty()) throw DataError("train: empty training set");
  if (train.task != task_) throw ConfigError("train: dataset task does not match the trainer");
  TrainResult result;
  const std::size_t total = total_steps(train.size());
  const std::size_t warm = warmup_length(train.size());
  auto run_evals = [&] {
    for (const auto& [name, d] : evals) result.evals.push_back({step_, name, evaluate(model_, *d)});
  };

  try {
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    std::size_t cursor = order.size();
    bool first = true;
    while (step_ < total) {
      if (cursor >= order.size()) {
        if (!first) ++epoch_;
        first = false;
        std::shuffle(order.begin(), order.end(), rng_);
        cursor = 0;
      }
      const std::size_t n = std::min(config_.batch_size, order.size() - cursor);
      const std::span<const std::size_t> batch(order.data() + cursor, n);
      cursor += n;
      StepRecord rec;
      if (step_ < warm) {
        rec = erm_step(train, batch);
        rec.phase = "warmup";
      } else if (!config_.use_crm) {
        rec = erm_step(train, batch);
      } else {
        rec = cat_step(train, batch);
      }
      result.history.push_back(std::move(rec));
      if (config_.eval_every > 0 && step_ % config_.eval_every == 0 && step_ < total) run_evals();
    }
    run_evals();
  } catch (...) {
    partial_ = std::move(result);
    throw;
  }
  return result;
}

void write_history_csv(const std::vector<StepRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,epoch,phase,erm_loss,crm_loss,mean_abs_lambda,mean_weight,mix_layer\n";
  auto opt = [](const std::optional<double>& v) { return v ? fmt(*v) : std::string(); };
  for (const auto& r : history) {
    out << r.step << ',' << r.epoch << ',' << r.phase << ',' << fmt(r.erm_loss) << ','
        << opt(r.crm_loss) << ',' << opt(r.mean_abs_lambda) << ',' << opt(r.mean_weight) << ','
        << (r.mix_layer ? std::to_string(*r.mix_layer) : std::string()) << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

void write_eval_csv(const std::vector<EvalRecord>& evals, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << "step,split,n,accuracy,em,f1\n";
  for (const auto& r : evals) {
    out << r.step << ',' << r.split << ',' << r.metrics.n << ',' << fmt(r.metrics.accuracy) << ','
        << fmt(r.metrics.em) << ',' << fmt(r.metrics.f1) << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

}  // namespace catlab
