#include "catlab/encoder.hpp"

#include <cmath>
#include <fstream>
#include <numeric>

#include "catlab/errors.hpp"

namespace catlab {

namespace {

constexpr double kMaskedScore = -1e9;

Tensor normal_init(const ad::Shape& shape, double stddev, std::mt19937_64* rng) {
  std::vector<double> v(ad::numel(shape), 0.0);
  if (rng) {
    std::normal_distribution<double> n(0.0, stddev);
    for (auto& x : v) x = n(*rng);
  }
  return Tensor(shape, std::move(v), true);
}

Tensor constant_init(const ad::Shape& shape, double value) { return Tensor::full(shape, value, true); }

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 2) throw ConfigError("model: vocab_size must be at least 2");
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
    throw ConfigError("model: d_model must be a positive multiple of n_heads");
  if (n_layers < 2) throw ConfigError("model: n_layers must be at least 2");
  if (d_ff == 0 || max_seq_len == 0) throw ConfigError("model: d_ff and max_seq_len must be > 0");
  if (!span_head && n_classes < 2) throw ConfigError("model: n_classes must be at least 2");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("model: dropout must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"vocab_size", c.vocab_size}, {"d_model", c.d_model},
                     {"n_heads", c.n_heads},       {"n_layers", c.n_layers},
                     {"d_ff", c.d_ff},             {"max_seq_len", c.max_seq_len},
                     {"n_classes", c.n_classes},   {"span_head", c.span_head},
                     {"dropout", c.dropout}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.n_layers = j.value("n_layers", d.n_layers);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.max_seq_len = j.value("max_seq_len", d.max_seq_len);
  c.n_classes = j.value("n_classes", d.n_classes);
  c.span_head = j.value("span_head", d.span_head);
  c.dropout = j.value("dropout", d.dropout);
}

TokenBatch TokenBatch::from_rows(const std::vector<std::vector<std::size_t>>& rows) {
  TokenBatch tb;
  tb.batch = rows.size();
  for (const auto& r : rows) tb.seq = std::max(tb.seq, r.size());
  tb.ids.assign(tb.batch * tb.seq, kPadToken);
  for (std::size_t b = 0; b < rows.size(); ++b)
    std::copy(rows[b].begin(), rows[b].end(), tb.ids.begin() + b * tb.seq);
  return tb;
}

AttentionMask AttentionMask::all_visible(std::size_t batch, std::size_t seq) {
  return {batch, seq, std::vector<std::uint8_t>(batch * seq, 1)};
}

AttentionMask AttentionMask::select_rows(std::span<const std::size_t> rows) const {
  AttentionMask out{rows.size(), seq, {}};
  out.keep.reserve(rows.size() * seq);
  for (auto r : rows) {
    if (r >= batch) throw std::out_of_range("mask: row index out of range");
    out.keep.insert(out.keep.end(), keep.begin() + r * seq, keep.begin() + (r + 1) * seq);
  }
  return out;
}

EncoderModel::EncoderModel(const ModelConfig& config, std::mt19937_64& init_rng) : config_(config) {
  config_.validate();
  build(&init_rng);
}

std::size_t EncoderModel::add_param(std::string name, Tensor value) {
  params_.push_back({std::move(name), std::move(value)});
  return params_.size() - 1;
}

void EncoderModel::build(std::mt19937_64* rng) {
  const std::size_t d = config_.d_model;
  const std::size_t ff = config_.d_ff;
  const double w_d = 1.0 / std::sqrt(static_cast<double>(d));
  const double w_ff = 1.0 / std::sqrt(static_cast<double>(ff));

  tok_emb_ = add_param("embed.tokens", normal_init({config_.vocab_size, d}, 0.1, rng));
  pos_emb_ = add_param("embed.positions", normal_init({config_.max_seq_len, d}, 0.1, rng));
  for (std::size_t l = 0; l < config_.n_layers; ++l) {
    const std::string pre = "layers." + std::to_string(l) + ".";
    LayerParams lp{};
    lp.ln1_gain = add_param(pre + "ln1.gain", constant_init({d}, 1.0));
    lp.ln1_bias = add_param(pre + "ln1.bias", constant_init({d}, 0.0));
    lp.wq = add_param(pre + "attn.wq", normal_init({d, d}, w_d, rng));
    lp.bq = add_param(pre + "attn.bq", constant_init({d}, 0.0));
    lp.wk = add_param(pre + "attn.wk", normal_init({d, d}, w_d, rng));
    lp.bk = add_param(pre + "attn.bk", constant_init({d}, 0.0));
    lp.wv = add_param(pre + "attn.wv", normal_init({d, d}, w_d, rng));
    lp.bv = add_param(pre + "attn.bv", constant_init({d}, 0.0));
    lp.wo = add_param(pre + "attn.wo", normal_init({d, d}, w_d, rng));
    lp.bo = add_param(pre + "attn.bo", constant_init({d}, 0.0));
    lp.ln2_gain = add_param(pre + "ln2.gain", constant_init({d}, 1.0));
    lp.ln2_bias = add_param(pre + "ln2.bias", constant_init({d}, 0.0));
    lp.w1 = add_param(pre + "ffn.w1", normal_init({d, ff}, w_d, rng));
    lp.b1 = add_param(pre + "ffn.b1", constant_init({ff}, 0.0));
    lp.w2 = add_param(pre + "ffn.w2", normal_init({ff, d}, w_ff, rng));
    lp.b2 = add_param(pre + "ffn.b2", constant_init({d}, 0.0));
    layers_.push_back(lp);
  }
  lnf_gain_ = add_param("final_ln.gain", constant_init({d}, 1.0));
  lnf_bias_ = add_param("final_ln.bias", constant_init({d}, 0.0));
  if (config_.span_head) {
    start_w_ = add_param("span.start_w", normal_init({d, 1}, w_d, rng));
    start_b_ = add_param("span.start_b", constant_init({}, 0.0));
    end_w_ = add_param("span.end_w", normal_init({d, 1}, w_d, rng));
    end_b_ = add_param("span.end_b", constant_init({}, 0.0));
  } else {
    cls_w1_ = add_param("classifier.w1", normal_init({d, d}, w_d, rng));
    cls_b1_ = add_param("classifier.b1", constant_init({d}, 0.0));
    cls_w2_ = add_param("classifier.w2", normal_init({d, config_.n_classes}, w_d, rng));
    cls_b2_ = add_param("classifier.b2", constant_init({config_.n_classes}, 0.0));
  }
}

Tensor EncoderModel::dropout(const Tensor& x, std::mt19937_64* rng) const {
  if (!rng || config_.dropout <= 0.0) return x;
  std::bernoulli_distribution keep(1.0 - config_.dropout);
  const double s = 1.0 / (1.0 - config_.dropout);
  std::vector<double> m(x.numel());
  for (auto& v : m) v = keep(*rng) ? s : 0.0;
  return ad::mul(x, Tensor(x.shape(), std::move(m)));
}

Embedded EncoderModel::embed(const TokenBatch& tokens, std::mt19937_64* dropout_rng) const {
  if (tokens.ids.size() != tokens.batch * tokens.seq)
    throw std::invalid_argument("embed: token buffer does not match batch x seq");
  if (tokens.seq > config_.max_seq_len) {
    throw std::invalid_argument("embed: sequence length " + std::to_string(tokens.seq) +
                                " exceeds max_seq_len " + std::to_string(config_.max_seq_len));
  }
  for (auto id : tokens.ids) {
    if (id >= config_.vocab_size) {
      throw std::out_of_range("embed: token id " + std::to_string(id) + " outside vocabulary of " +
                              std::to_string(config_.vocab_size));
    }
  }
  const std::size_t d = config_.d_model;
  Tensor tok = ad::reshape(ad::gather_rows(p(tok_emb_), tokens.ids), {tokens.batch, tokens.seq, d});
  std::vector<std::size_t> positions(tokens.seq);
  std::iota(positions.begin(), positions.end(), 0);
  Tensor h = ad::add(tok, ad::gather_rows(p(pos_emb_), positions));

  AttentionMask mask{tokens.batch, tokens.seq, std::vector<std::uint8_t>(tokens.ids.size())};
  for (std::size_t i = 0; i < tokens.ids.size(); ++i) mask.keep[i] = tokens.ids[i] != kPadToken;
  return {dropout(h, dropout_rng), std::move(mask)};
}

Tensor EncoderModel::attention(const Tensor& x, const LayerParams& lp,
                               const AttentionMask& mask) const {
  const std::size_t b = x.dim(0);
  const std::size_t s = x.dim(1);
  const std::size_t d = config_.d_model;
  const std::size_t h = config_.n_heads;
  const std::size_t dh = d / h;
  if (mask.batch != b || mask.seq != s) {
    throw ad::ShapeError("attention: mask " + ad::to_string({mask.batch, mask.seq}) +
                         " does not match hidden " + ad::to_string(x.shape()));
  }

  auto project = [&](std::size_t w, std::size_t bias) {
    return ad::reshape(ad::add(ad::matmul(x, p(w)), p(bias)), {b, s, h, dh});
  };
  Tensor q = ad::permute(project(lp.wq, lp.bq), {0, 2, 1, 3});  // b h s dh
  Tensor k = ad::permute(project(lp.wk, lp.bk), {0, 2, 3, 1});  // b h dh s
  Tensor v = ad::permute(project(lp.wv, lp.bv), {0, 2, 1, 3});  // b h s dh

  Tensor scores = ad::scale(ad::matmul(q, k), 1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<std::uint8_t> blocked(b * h * s * s);
  for (std::size_t bi = 0; bi < b; ++bi)
    for (std::size_t hi = 0; hi < h; ++hi)
      for (std::size_t i = 0; i < s; ++i)
        for (std::size_t j = 0; j < s; ++j)
          blocked[((bi * h + hi) * s + i) * s + j] = mask.keep[bi * s + j] ? 0 : 1;
  Tensor probs = ad::softmax(ad::masked_fill(scores, blocked, kMaskedScore));
  Tensor ctx = ad::reshape(ad::permute(ad::matmul(probs, v), {0, 2, 1, 3}), {b, s, d});
  return ad::add(ad::matmul(ctx, p(lp.wo)), p(lp.bo));
}

Tensor EncoderModel::forward_layers(const Tensor& h, std::size_t from_layer, std::size_t to_layer,
                                    const AttentionMask& mask,
                                    std::mt19937_64* dropout_rng) const {
  if (from_layer > to_layer || to_layer > config_.n_layers) {
    throw std::out_of_range("forward_layers: range (" + std::to_string(from_layer) + ", " +
                            std::to_string(to_layer) + "] outside [0, " +
                            std::to_string(config_.n_layers) + "]");
  }
  if (h.rank() != 3 || h.dim(2) != config_.d_model)
    throw ad::ShapeError("forward_layers: expected (batch, seq, d_model), got " +
                         ad::to_string(h.shape()));
  Tensor x = h;
  for (std::size_t l = from_layer; l < to_layer; ++l) {
    const LayerParams& lp = layers_[l];
    Tensor a = ad::add(ad::mul(ad::layer_norm(x), p(lp.ln1_gain)), p(lp.ln1_bias));
    x = ad::add(x, dropout(attention(a, lp, mask), dropout_rng));
    Tensor f = ad::add(ad::mul(ad::layer_norm(x), p(lp.ln2_gain)), p(lp.ln2_bias));
    f = ad::gelu(ad::add(ad::matmul(f, p(lp.w1)), p(lp.b1)));
    f = ad::add(ad::matmul(f, p(lp.w2)), p(lp.b2));
    x = ad::add(x, dropout(f, dropout_rng));
  }
  return x;
}

Tensor EncoderModel::final_norm(const Tensor& h) const {
  return ad::add(ad::mul(ad::layer_norm(h), p(lnf_gain_)), p(lnf_bias_));
}

Tensor EncoderModel::pooled(const Tensor& h_last) const {
  if (h_last.rank() != 3 || h_last.dim(2) != config_.d_model)
    throw ad::ShapeError("pooled: expected (batch, seq, d_model), got " + ad::to_string(h_last.shape()));
  const std::size_t b = h_last.dim(0);
  const std::size_t s = h_last.dim(1);
  std::vector<std::size_t> first(b);
  for (std::size_t i = 0; i < b; ++i) first[i] = i * s;
  return ad::gather_rows(ad::reshape(final_norm(h_last), {b * s, config_.d_model}), first);
}

Tensor EncoderModel::classify(const Tensor& h_last, const AttentionMask& /*mask*/) const {
  if (config_.span_head) throw std::logic_error("classify: model was built with a span head");
  if (h_last.rank() != 3 || h_last.dim(2) != config_.d_model)
    throw ad::ShapeError("classify: expected (batch, seq, d_model), got " +
                         ad::to_string(h_last.shape()));
  Tensor hidden = ad::tanh(ad::add(ad::matmul(pooled(h_last), p(cls_w1_)), p(cls_b1_)));
  return ad::add(ad::matmul(hidden, p(cls_w2_)), p(cls_b2_));
}

SpanLogits EncoderModel::span_logits(const Tensor& h_last, const AttentionMask& mask) const {
  if (!config_.span_head) throw std::logic_error("span_logits: model has no span head");
  if (h_last.rank() != 3 || h_last.dim(2) != config_.d_model)
    throw ad::ShapeError("span_logits: expected (batch, seq, d_model), got " +
                         ad::to_string(h_last.shape()));
  const std::size_t b = h_last.dim(0);
  const std::size_t s = h_last.dim(1);
  if (mask.batch != b || mask.seq != s) throw ad::ShapeError("span_logits: mask shape mismatch");
  Tensor x = final_norm(h_last);
  std::vector<std::uint8_t> pad(mask.keep.size());
  for (std::size_t i = 0; i < pad.size(); ++i) pad[i] = mask.keep[i] ? 0 : 1;
  auto head = [&](std::size_t w, std::size_t bias) {
    Tensor logits = ad::add(ad::reshape(ad::matmul(x, p(w)), {b, s}), p(bias));
    return ad::masked_fill(logits, pad, kMaskedScore);
  };
  return {head(start_w_, start_b_), head(end_w_, end_b_)};
}

std::vector<Tensor> EncoderModel::parameter_tensors() const {
  std::vector<Tensor> out;
  out.reserve(params_.size());
  for (const auto& np : params_) out.push_back(np.value);
  return out;
}

std::size_t EncoderModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& np : params_) n += np.value.numel();
  return n;
}

EncoderModel EncoderModel::snapshot() const {
  EncoderModel copy(config_);
  copy.build(nullptr);
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto dst = copy.params_[i].value.mutable_values();
    auto src = params_[i].value.values();
    std::copy(src.begin(), src.end(), dst.begin());
  }
  return copy;
}

nlohmann::json EncoderModel::to_checkpoint() const {
  nlohmann::json params = nlohmann::json::array();
  for (const auto& np : params_) {
    params.push_back({{"name", np.name},
                      {"shape", np.value.shape()},
                      {"values", std::vector<double>(np.value.values().begin(),
                                                     np.value.values().end())}});
  }
  return {{"format", "catlab-checkpoint"}, {"version", 1}, {"config", config_}, {"params", params}};
}

EncoderModel EncoderModel::from_checkpoint(const nlohmann::json& j) {
  if (j.value("format", "") != "catlab-checkpoint") throw DataError("checkpoint: unknown format");
  ModelConfig cfg = j.at("config").get<ModelConfig>();
  cfg.validate();
  EncoderModel model(cfg);
  model.build(nullptr);
  const auto& params = j.at("params");
  if (params.size() != model.params_.size()) {
    throw DataError("checkpoint: expected " + std::to_string(model.params_.size()) +
                    " parameters, found " + std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& np = model.params_[i];
    const auto& entry = params[i];
    if (entry.at("name").get<std::string>() != np.name ||
        entry.at("shape").get<ad::Shape>() != np.value.shape()) {
      throw DataError("checkpoint: parameter " + std::to_string(i) + " does not match '" +
                      np.name + "' " + ad::to_string(np.value.shape()));
    }
    const auto values = entry.at("values").get<std::vector<double>>();
    if (values.size() != np.value.numel()) throw DataError("checkpoint: bad size for " + np.name);
    std::copy(values.begin(), values.end(), np.value.mutable_values().begin());
  }
  return model;
}

void EncoderModel::save(const std::filesystem::path& path) const {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
  out << to_checkpoint().dump() << '\n';
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

EncoderModel EncoderModel::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("checkpoint: cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("checkpoint: " + path.string() + ": " + e.what());
  }
  return from_checkpoint(j);
}

}  // namespace catlab
