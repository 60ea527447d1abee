#include "catlab/harness.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <mutex>
#include <numeric>
#include <sstream>
#include <thread>

#include "catlab/cmix.hpp"
#include "catlab/errors.hpp"

namespace catlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

double metric_of(const EvalMetrics& m, const std::string& metric) {
  if (metric == "accuracy") return m.accuracy;
  if (metric == "em") return m.em;
  if (metric == "f1") return m.f1;
  throw ConfigError("unknown metric '" + metric + "' (accuracy|em|f1)");
}

std::vector<std::string> metrics_for(TaskKind t) {
  if (t == TaskKind::kClassification) return {"accuracy"};
  return {"em", "f1"};
}

template <class T>
T parse_as(const json& j, const std::string& what) {
  try {
    return j.get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(what + ": " + e.what());
  }
}

}  // namespace

DatasetKind parse_dataset_kind(const std::string& s) {
  if (s == "classification") return DatasetKind::kClassification;
  if (s == "case_study") return DatasetKind::kCaseStudy;
  if (s == "span") return DatasetKind::kSpan;
  throw ConfigError("unknown dataset kind '" + s + "' (classification|case_study|span)");
}

std::string to_string(DatasetKind k) {
  switch (k) {
    case DatasetKind::kClassification: return "classification";
    case DatasetKind::kCaseStudy: return "case_study";
    case DatasetKind::kSpan: return "span";
  }
  return "?";
}

TaskKind task_of(DatasetKind k) { return k == DatasetKind::kSpan ? TaskKind::kSpan : TaskKind::kClassification; }

std::size_t GenerateSpec::vocab_size() const {
  switch (kind) {
    case DatasetKind::kClassification: return scm.vocab_size;
    case DatasetKind::kCaseStudy: return case_study.base.vocab_size;
    case DatasetKind::kSpan: return span.vocab_size;
  }
  return 0;
}

std::size_t GenerateSpec::n_classes() const {
  switch (kind) {
    case DatasetKind::kClassification: return scm.n_classes;
    case DatasetKind::kCaseStudy: return case_study.base.n_classes;
    case DatasetKind::kSpan: return 0;
  }
  return 0;
}

std::uint64_t GenerateSpec::seed() const {
  switch (kind) {
    case DatasetKind::kClassification: return scm.seed;
    case DatasetKind::kCaseStudy: return case_study.base.seed;
    case DatasetKind::kSpan: return span.seed;
  }
  return 0;
}

void GenerateSpec::validate() const {
  switch (kind) {
    case DatasetKind::kClassification: scm.validate(); break;
    case DatasetKind::kCaseStudy: case_study.validate(); break;
    case DatasetKind::kSpan: span.validate(); break;
  }
  if (kind != DatasetKind::kCaseStudy && (n_train == 0 || n_test == 0))
    throw ConfigError("generate: n_train and n_test must be positive");
}

void to_json(json& j, const GenerateSpec& s) {
  j = {{"kind", to_string(s.kind)}};
  switch (s.kind) {
    case DatasetKind::kClassification:
      j["scm"] = s.scm;
      j["n_train"] = s.n_train;
      j["n_test"] = s.n_test;
      break;
    case DatasetKind::kCaseStudy: j["case_study"] = s.case_study; break;
    case DatasetKind::kSpan:
      j["span"] = s.span;
      j["n_train"] = s.n_train;
      j["n_test"] = s.n_test;
      break;
  }
}

void from_json(const json& j, GenerateSpec& s) {
  if (!j.is_object()) throw ConfigError("generate: expected an object");
  for (const auto& [key, _] : j.items()) {
    if (key != "kind" && key != "scm" && key != "case_study" && key != "span" && key != "n_train" &&
        key != "n_test")
      throw ConfigError("generate: unknown key '" + key + "'");
  }
  s.kind = parse_dataset_kind(j.value("kind", std::string("classification")));
  if (j.contains("scm")) s.scm = j["scm"].get<SCMSpec>();
  if (j.contains("case_study")) s.case_study = j["case_study"].get<CaseStudySpec>();
  if (j.contains("span")) s.span = j["span"].get<SpanSpec>();
  s.n_train = j.value("n_train", s.n_train);
  s.n_test = j.value("n_test", s.n_test);
}

NamedSplits generate_splits(const GenerateSpec& spec) {
  spec.validate();
  NamedSplits out;
  if (spec.kind == DatasetKind::kCaseStudy) {
    auto cs = generate_case_study(spec.case_study);
    out.emplace_back("train", std::move(cs.train));
    out.emplace_back("test", std::move(cs.test));
    return out;
  }
  Splits s = spec.kind == DatasetKind::kClassification
                 ? generate_classification(spec.scm, spec.n_train, spec.n_test)
                 : generate_span_task(spec.span, spec.n_train, spec.n_test);
  out.emplace_back("train", std::move(s.train));
  out.emplace_back("iid_test", std::move(s.iid_test));
  out.emplace_back("ood_test", std::move(s.ood_test));
  return out;
}

json read_json_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  const std::string text = buf.str();
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    std::size_t line = 1, col = 1;
    for (std::size_t i = 0; i + 1 < e.byte && i < text.size(); ++i) {
      if (text[i] == '\n') {
        ++line;
        col = 1;
      } else {
        ++col;
      }
    }
    throw ConfigError(path.string() + ":" + std::to_string(line) + ":" + std::to_string(col) + ": " + e.what());
  }
}

const Dataset& LoadedData::split(const std::string& name) const {
  for (const auto& [n, d] : splits)
    if (n == name) return d;
  throw DataError("no split named '" + name + "'");
}

std::vector<std::string> cmd_generate(const GenerateSpec& spec, const fs::path& out_dir) {
  const auto splits = generate_splits(spec);
  std::error_code ec;
  fs::create_directories(out_dir, ec);
  if (ec) throw std::runtime_error("cannot create " + out_dir.string() + ": " + ec.message());
  std::vector<std::string> files;
  for (const auto& [name, data] : splits) {
    files.push_back(name + ".jsonl");
    write_jsonl(data, out_dir / files.back());
  }
  json manifest = {{"spec", spec}, {"seed", spec.seed()}, {"files", files}, {"task", to_string(task_of(spec.kind))}};
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return files;
}

LoadedData load_data_dir(const fs::path& dir) {
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw DataError(dir.string() + ": no manifest.json");
  const json manifest = read_json_file(manifest_path);
  if (!manifest.contains("spec") || !manifest.contains("files"))
    throw DataError(manifest_path.string() + ": missing 'spec' or 'files'");
  LoadedData out;
  out.spec = parse_as<GenerateSpec>(manifest["spec"], manifest_path.string());
  const TaskKind task = task_of(out.spec.kind);
  for (const auto& f : manifest["files"]) {
    const std::string file = f.get<std::string>();
    std::string name = fs::path(file).stem().string();
    out.splits.emplace_back(name, read_jsonl(dir / file, task, out.spec.n_classes(), out.spec.vocab_size()));
  }
  if (out.splits.empty() || out.splits.front().first != "train")
    throw DataError(manifest_path.string() + ": first file must be the train split");
  return out;
}

void RunConfig::validate() const {
  if (data_dir.has_value() == generate.has_value())
    throw ConfigError("run: give exactly one of data.dir or data.generate");
  if (data_dir && !fs::exists(*data_dir)) throw ConfigError("run: data dir " + data_dir->string() + " does not exist");
  if (generate) generate->validate();
  if (seeds.empty()) throw ConfigError("run: seeds list is empty");
  if (out.empty()) throw ConfigError("run: out is empty");
  train.validate(model.n_layers);
}

void to_json(json& j, const RunConfig& c) {
  json data = json::object();
  if (c.data_dir) data["dir"] = c.data_dir->string();
  if (c.generate) data["generate"] = *c.generate;
  j = {{"data", data}, {"model", c.model}, {"train", c.train}, {"out", c.out.string()}, {"seeds", c.seeds}};
}

void from_json(const json& j, RunConfig& c) {
  if (!j.is_object()) throw ConfigError("run: expected an object");
  for (const auto& [key, _] : j.items()) {
    if (key != "data" && key != "model" && key != "train" && key != "out" && key != "seeds")
      throw ConfigError("run: unknown key '" + key + "'");
  }
  if (!j.contains("data")) throw ConfigError("run: missing 'data'");
  const auto& d = j["data"];
  if (!d.is_object()) throw ConfigError("run.data: expected an object");
  for (const auto& [key, _] : d.items())
    if (key != "dir" && key != "generate") throw ConfigError("run.data: unknown key '" + key + "'");
  c.data_dir.reset();
  c.generate.reset();
  if (d.contains("dir")) c.data_dir = fs::path(d["dir"].get<std::string>());
  if (d.contains("generate")) c.generate = d["generate"].get<GenerateSpec>();
  if (j.contains("model")) c.model = j["model"].get<ModelConfig>();
  c.train = TrainConfig{};
  if (j.contains("train")) c.train = j["train"].get<TrainConfig>();
  if (j.contains("out")) c.out = j["out"].get<std::string>();
  c.seeds = j.value("seeds", std::vector<std::uint64_t>{});
  if (!j.contains("seeds")) c.seeds = {c.train.seed};
}

LoadedData load_run_data(const RunConfig& c) {
  if (c.data_dir) return load_data_dir(*c.data_dir);
  if (!c.generate) throw ConfigError("run: no data source");
  LoadedData out;
  out.spec = *c.generate;
  out.splits = generate_splits(out.spec);
  return out;
}

ModelConfig resolve_model(const ModelConfig& model, const LoadedData& data) {
  ModelConfig m = model;
  m.vocab_size = data.spec.vocab_size();
  m.span_head = data.spec.kind == DatasetKind::kSpan;
  if (!m.span_head) m.n_classes = data.spec.n_classes();
  std::size_t longest = 0;
  for (const auto& [_, d] : data.splits)
    for (const auto& ex : d.examples) longest = std::max(longest, ex.tokens.size());
  m.max_seq_len = std::max(m.max_seq_len, longest);
  m.validate();
  return m;
}

Aggregate aggregate(const std::vector<double>& values) {
  Aggregate a;
  if (values.empty()) return a;
  a.mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - a.mean) * (v - a.mean);
    a.sd = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return a;
}

std::vector<double> TrainSummary::values(const std::string& split, const std::string& metric) const {
  std::vector<double> out;
  for (const auto& r : runs) {
    for (const auto& e : r.final_evals)
      if (e.split == split) out.push_back(metric_of(e.metrics, metric));
  }
  if (out.size() != runs.size()) throw std::out_of_range("split '" + split + "' missing from some runs");
  return out;
}

namespace {

SeedRun run_one_seed(const RunConfig& config, const LoadedData& data, const ModelConfig& model,
                     std::uint64_t seed, std::mutex& log_mutex, bool quiet) {
  const auto start = std::chrono::steady_clock::now();
  RunConfig echo = config;
  echo.model = model;
  echo.train.seed = seed;
  echo.seeds = {seed};
  const fs::path dir = config.out / ("seed_" + std::to_string(seed));
  fs::create_directories(dir);
  write_text(dir / "config.json", json(echo).dump(2) + "\n");

  Trainer trainer(model, echo.train, task_of(data.spec.kind));
  trainer.divergence_checkpoint = dir / "model_last_good.json";
  std::vector<std::pair<std::string, const Dataset*>> evals;
  for (std::size_t i = 1; i < data.splits.size(); ++i) evals.emplace_back(data.splits[i].first, &data.splits[i].second);

  TrainResult result;
  try {
    result = trainer.run(data.train(), evals);
  } catch (const DivergenceError& e) {
    write_history_csv(trainer.partial_result().history, dir / "history.csv");
    write_eval_csv(trainer.partial_result().evals, dir / "metrics.csv");
    write_text(dir / "error.txt", std::string(e.what()) + "\n");
    throw;
  }
  write_history_csv(result.history, dir / "history.csv");
  write_eval_csv(result.evals, dir / "metrics.csv");
  trainer.model().save(dir / "model.json");

  SeedRun run;
  run.seed = seed;
  for (const auto& [name, _] : evals) run.final_evals.push_back({trainer.step(), name, result.final_metrics(name)});
  run.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  if (!quiet) {
    std::lock_guard lock(log_mutex);
    std::cerr << "seed " << seed << ":";
    for (const auto& e : run.final_evals) {
      for (const auto& m : metrics_for(task_of(data.spec.kind)))
        std::cerr << " " << e.split << "." << m << "=" << metric_of(e.metrics, m);
    }
    std::cerr << " (" << run.wall_seconds << " s)\n";
  }
  return run;
}

}  // namespace

TrainSummary cmd_train(const RunConfig& config, const TrainOptions& options) {
  config.validate();
  const LoadedData data = load_run_data(config);
  return cmd_train(config, data, options);
}

TrainSummary cmd_train(const RunConfig& config, const LoadedData& data, const TrainOptions& options) {
  config.validate();
  const auto start = std::chrono::steady_clock::now();
  const ModelConfig model = resolve_model(config.model, data);
  fs::create_directories(config.out);

  TrainSummary summary;
  summary.task = task_of(data.spec.kind);
  summary.runs.resize(config.seeds.size());
  std::vector<std::exception_ptr> errors(config.seeds.size());
  std::mutex log_mutex;
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < config.seeds.size(); i = next++) {
      try {
        summary.runs[i] = run_one_seed(config, data, model, config.seeds[i], log_mutex, options.quiet);
      } catch (...) {
        errors[i] = std::current_exception();
      }
    }
  };
  const std::size_t n_workers = std::clamp<std::size_t>(options.workers, 1, config.seeds.size());
  if (n_workers == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < n_workers; ++w) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);

  summary.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  RunConfig echo = config;
  echo.model = model;
  write_text(config.out / "summary.json", summary_json(echo, summary).dump(2) + "\n");
  return summary;
}

json summary_json(const RunConfig& config, const TrainSummary& summary) {
  json per_seed = json::array();
  for (const auto& r : summary.runs) {
    json metrics = json::object();
    for (const auto& e : r.final_evals) {
      json m = {{"n", e.metrics.n}};
      for (const auto& name : metrics_for(summary.task)) m[name] = metric_of(e.metrics, name);
      metrics[e.split] = m;
    }
    per_seed.push_back({{"seed", r.seed}, {"metrics", metrics}, {"wall_seconds", r.wall_seconds}});
  }
  json agg = json::object();
  if (!summary.runs.empty()) {
    for (const auto& e : summary.runs.front().final_evals) {
      for (const auto& name : metrics_for(summary.task)) {
        const auto a = aggregate(summary.values(e.split, name));
        agg[e.split][name] = {{"mean", a.mean}, {"sd", a.sd}};
      }
    }
  }
  return {{"config", config}, {"per_seed", per_seed}, {"aggregate", agg}, {"wall_seconds", summary.wall_seconds}};
}

void set_dotted(json& j, const std::string& path, const json& value) {
  json* cur = &j;
  std::size_t pos = 0;
  while (true) {
    const std::size_t dot = path.find('.', pos);
    const std::string key = path.substr(pos, dot == std::string::npos ? std::string::npos : dot - pos);
    if (key.empty()) throw ConfigError("sweep: bad path '" + path + "'");
    if (!cur->is_object()) {
      if (!cur->is_null()) throw ConfigError("sweep: '" + path + "' crosses a non-object");
      *cur = json::object();
    }
    if (dot == std::string::npos) {
      (*cur)[key] = value;
      return;
    }
    cur = &(*cur)[key];
    pos = dot + 1;
  }
}

std::vector<SweepCell> cmd_sweep(const json& grid, const fs::path& out, const TrainOptions& options) {
  if (!grid.is_object() || !grid.contains("base")) throw ConfigError("sweep: grid file needs a 'base' run config");
  for (const auto& [key, _] : grid.items())
    if (key != "base" && key != "grid") throw ConfigError("sweep: unknown key '" + key + "'");
  const json base = grid["base"];
  const json axes = grid.value("grid", json::object());
  if (!axes.is_object()) throw ConfigError("sweep: 'grid' must be an object");
  std::vector<std::pair<std::string, std::vector<json>>> dims;
  for (const auto& [key, values] : axes.items()) {
    if (!values.is_array() || values.empty())
      throw ConfigError("sweep: axis '" + key + "' needs a nonempty array");
    dims.emplace_back(key, std::vector<json>(values.begin(), values.end()));
  }

  std::size_t n_cells = 1;
  for (const auto& d : dims) n_cells *= d.second.size();

  std::vector<SweepCell> cells;
  std::vector<std::size_t> idx(dims.size(), 0);
  for (std::size_t c = 0; c < n_cells; ++c) {
    SweepCell cell;
    cell.index = c;
    json cfg = base;
    for (std::size_t d = 0; d < dims.size(); ++d) cell.assignment.emplace_back(dims[d].first, dims[d].second[idx[d]]);
    try {
      for (const auto& [key, value] : cell.assignment) {
        std::stringstream ss(key);
        std::string path;
        while (std::getline(ss, path, ',')) set_dotted(cfg, path, value);
      }
      set_dotted(cfg, "out", (out / ("cell_" + std::to_string(c))).string());
      RunConfig rc = parse_as<RunConfig>(cfg, "sweep cell " + std::to_string(c));
      cell.summary = cmd_train(rc, options);
      cell.status = "ok";
    } catch (const std::exception& e) {
      cell.status = "error";
      cell.message = e.what();
    }
    cells.push_back(std::move(cell));
    for (std::size_t d = dims.size(); d-- > 0;) {
      if (++idx[d] < dims[d].second.size()) break;
      idx[d] = 0;
    }
  }

  std::ostringstream csv;
  csv << "cell";
  for (const auto& d : dims) csv << ',' << csv_field(d.first);
  csv << ",status,message,split,metric,mean,sd\n";
  for (const auto& cell : cells) {
    std::ostringstream prefix;
    prefix << cell.index;
    for (const auto& [_, v] : cell.assignment) prefix << ',' << csv_field(v.dump());
    prefix << ',' << cell.status << ',' << csv_field(cell.message);
    if (!cell.summary || cell.summary->runs.empty()) {
      csv << prefix.str() << ",,,,\n";
      continue;
    }
    for (const auto& e : cell.summary->runs.front().final_evals) {
      for (const auto& m : metrics_for(cell.summary->task)) {
        const auto a = aggregate(cell.summary->values(e.split, m));
        csv << prefix.str() << ',' << e.split << ',' << m << ',' << fmt(a.mean) << ',' << fmt(a.sd) << '\n';
      }
    }
  }
  fs::create_directories(out);
  write_text(out / "sweep.csv", csv.str());
  return cells;
}

std::vector<EvalMetrics> cmd_eval(const EncoderModel& model, const LoadedData& data,
                                  const std::vector<std::string>& split_names) {
  std::vector<EvalMetrics> out;
  for (const auto& name : split_names) out.push_back(evaluate(model, data.split(name)));
  return out;
}

void cmd_dump_representations(const EncoderModel& model, const Dataset& data, const DumpOptions& options,
                              const fs::path& out_csv) {
  const std::size_t L = model.num_layers();
  if (options.layer > L)
    throw ConfigError("dump-reprs: layer " + std::to_string(options.layer) + " outside [0, " + std::to_string(L) + "]");
  if (options.lambda && !(*options.lambda >= 0.0 && *options.lambda <= 1.0))
    throw ConfigError("dump-reprs: lambda must lie in [0, 1]");
  options.beta.validate();
  if (data.empty()) throw DataError("dump-reprs: empty dataset");
  const std::size_t n = options.limit > 0 ? std::min(options.limit, data.size()) : data.size();

  std::mt19937_64 rng(options.seed);
  std::vector<std::size_t> partner(n);
  std::uniform_int_distribution<std::size_t> pick(0, n - 1);
  for (auto& p : partner) p = pick(rng);
  std::vector<double> lambda(n);
  for (auto& l : lambda) l = options.lambda ? *options.lambda : sample_beta(options.beta, rng);

  std::vector<std::vector<std::size_t>> rows(n);
  std::size_t seq = 0;
  for (std::size_t i = 0; i < n; ++i) seq = std::max(seq, data.examples[i].tokens.size());
  for (std::size_t i = 0; i < n; ++i) {
    rows[i] = data.examples[i].tokens;
    rows[i].resize(seq, kPadToken);
  }
  const TokenBatch tb = TokenBatch::from_rows(rows);
  const Embedded e = model.embed(tb);
  const Tensor h_m = ad::detach(model.forward_layers(e.hidden, 0, options.layer, e.mask));
  const Tensor original = model.pooled(model.forward_layers(h_m, options.layer, L, e.mask));
  const Tensor h_j = ad::reshape(ad::gather_rows(ad::reshape(h_m, {n, h_m.numel() / n}), partner), h_m.shape());
  const Tensor mixed = interpolate(h_m, h_j, Tensor({n}, lambda));
  const Tensor cf = model.pooled(model.forward_layers(mixed, options.layer, L, e.mask));

  const std::size_t d = model.config().d_model;
  std::ostringstream csv;
  csv << "id,flag,label";
  for (std::size_t k = 0; k < d; ++k) csv << ",x" << k;
  csv << '\n';
  auto emit = [&](const Tensor& t, const char* flag) {
    for (std::size_t i = 0; i < n; ++i) {
      const auto& ex = data.examples[i];
      csv << i << ',' << flag << ',' << (ex.span ? ex.span->start : ex.label);
      for (std::size_t k = 0; k < d; ++k) csv << ',' << fmt(t[i * d + k]);
      csv << '\n';
    }
  };
  emit(original, "original");
  emit(cf, "counterfactual");
  if (out_csv.has_parent_path()) fs::create_directories(out_csv.parent_path());
  write_text(out_csv, csv.str());
}

}  // namespace catlab
