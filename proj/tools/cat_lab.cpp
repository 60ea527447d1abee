// cat_lab: generate | train | eval | sweep | dump-reprs
// Exit codes: 0 ok, 1 other failure, 2 config error, 3 data error, 4 divergence.

#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"

#include "catlab/errors.hpp"
#include "catlab/harness.hpp"

namespace fs = std::filesystem;
using namespace catlab;

namespace {

constexpr int kExitOther = 1;
constexpr int kExitConfig = 2;
constexpr int kExitData = 3;
constexpr int kExitDivergence = 4;

template <class T>
T parse_config(const fs::path& path) {
  const auto j = read_json_file(path);
  try {
    return j.get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(path.string() + ": " + e.what());
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

std::optional<std::uint64_t> env_seed() {
  const char* s = std::getenv("CAT_LAB_SEED");
  if (!s || !*s) return std::nullopt;
  try {
    std::size_t used = 0;
    const auto v = std::stoull(s, &used);
    if (used != std::string(s).size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw ConfigError(std::string("CAT_LAB_SEED is not an unsigned integer: '") + s + "'");
  }
}

// "5" -> five consecutive seeds from `base`; "1,4,9" -> those seeds.
std::vector<std::uint64_t> parse_seeds(const std::string& text, std::uint64_t base) {
  std::vector<std::uint64_t> out;
  try {
    if (text.find(',') == std::string::npos) {
      const auto n = std::stoull(text);
      if (n == 0) throw ConfigError("--seeds must be positive");
      for (std::uint64_t i = 0; i < n; ++i) out.push_back(base + i);
      return out;
    }
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) out.push_back(std::stoull(item));
  } catch (const std::logic_error&) {
    throw ConfigError("--seeds expects a count or a comma-separated list, got '" + text + "'");
  }
  return out;
}

void apply_overrides(RunConfig& rc, const std::string& preset, const std::string& seeds, const std::string& out) {
  if (!preset.empty()) apply_preset(rc.train, parse_preset(preset));
  const auto env = env_seed();
  if (env) {
    rc.train.seed = *env;
    const std::size_t n = rc.seeds.size();
    rc.seeds.clear();
    for (std::size_t i = 0; i < n; ++i) rc.seeds.push_back(*env + i);
  }
  if (!seeds.empty()) rc.seeds = parse_seeds(seeds, rc.train.seed);
  if (!out.empty()) rc.out = out;
}

void print_summary(const TrainSummary& s) {
  for (const auto& e : s.runs.front().final_evals) {
    for (const std::string m : {"accuracy", "em", "f1"}) {
      if ((s.task == TaskKind::kClassification) != (m == "accuracy")) continue;
      const auto a = aggregate(s.values(e.split, m));
      std::cout << e.split << "." << m << " " << a.mean << " +- " << a.sd << "\n";
    }
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Counterfactual adversarial training on synthetic confounded data"};
  app.require_subcommand(1);

  std::string config, preset, seeds, out, checkpoint, data_dir;
  std::size_t workers = 1;
  bool verbose = false;

  auto* gen = app.add_subcommand("generate", "Write dataset splits and a manifest");
  gen->add_option("--config", config, "dataset spec JSON")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out, "output directory")->required();

  auto* train = app.add_subcommand("train", "Train one model per seed");
  train->add_option("--config", config, "run config JSON")->required()->check(CLI::ExistingFile);
  train->add_option("--preset", preset, "erm | cat-star | cat")->check(CLI::IsMember({"erm", "cat-star", "cat"}));
  train->add_option("--seeds", seeds, "seed count (from the config seed) or comma list");
  train->add_option("--out", out, "output directory (overrides the config)");
  train->add_option("--workers", workers, "concurrent seeds")->check(CLI::PositiveNumber);
  train->add_flag("--verbose", verbose, "per-seed progress on stderr");

  std::vector<std::string> splits;
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on dataset splits");
  eval->add_option("--checkpoint", checkpoint, "model.json")->required()->check(CLI::ExistingFile);
  eval->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--split", splits, "split names (default: all but train)");
  eval->add_option("--out", out, "CSV output (default: stdout only)");

  auto* sweep = app.add_subcommand("sweep", "Run every cell of a hyperparameter grid");
  sweep->add_option("--config", config, "grid JSON")->required()->check(CLI::ExistingFile);
  sweep->add_option("--preset", preset, "erm | cat-star | cat")->check(CLI::IsMember({"erm", "cat-star", "cat"}));
  sweep->add_option("--seeds", seeds, "seed count or comma list, for every cell");
  sweep->add_option("--out", out, "output directory")->required();
  sweep->add_option("--workers", workers, "concurrent seeds per cell")->check(CLI::PositiveNumber);

  DumpOptions dump;
  std::string dump_split = "train";
  double alpha = 0.3, beta = 0.3;
  std::optional<double> lambda;
  auto* reprs = app.add_subcommand("dump-reprs", "Export original and counterfactual final-layer vectors");
  reprs->add_option("--checkpoint", checkpoint, "model.json")->required()->check(CLI::ExistingFile);
  reprs->add_option("--data", data_dir, "dataset directory")->required()->check(CLI::ExistingDirectory);
  reprs->add_option("--split", dump_split, "split name");
  reprs->add_option("--layer", dump.layer, "mix layer")->required();
  reprs->add_option("--lambda", lambda, "fixed mixing coefficient in [0, 1]");
  reprs->add_option("--alpha", alpha, "Beta alpha when --lambda is absent");
  reprs->add_option("--beta", beta, "Beta beta when --lambda is absent");
  reprs->add_option("--limit", dump.limit, "first N examples (0: all)");
  reprs->add_option("--seed", dump.seed, "partner and coefficient seed");
  reprs->add_option("--out", out, "CSV output")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (*gen) {
      const auto spec = parse_config<GenerateSpec>(config);
      for (const auto& f : cmd_generate(spec, out)) std::cout << (fs::path(out) / f).string() << "\n";
    } else if (*train) {
      auto rc = parse_config<RunConfig>(config);
      apply_overrides(rc, preset, seeds, out);
      print_summary(cmd_train(rc, {workers, !verbose}));
      std::cout << "summary: " << (rc.out / "summary.json").string() << "\n";
    } else if (*eval) {
      const auto model = EncoderModel::load(checkpoint);
      const auto data = load_data_dir(data_dir);
      if (splits.empty())
        for (std::size_t i = 1; i < data.splits.size(); ++i) splits.push_back(data.splits[i].first);
      const auto metrics = cmd_eval(model, data, splits);
      std::ostringstream csv;
      csv << "split,n,accuracy,em,f1\n";
      for (std::size_t i = 0; i < splits.size(); ++i) {
        const auto& m = metrics[i];
        csv << splits[i] << ',' << m.n << ',' << m.accuracy << ',' << m.em << ',' << m.f1 << '\n';
      }
      std::cout << csv.str();
      if (!out.empty()) {
        std::ofstream f(out);
        f << csv.str();
        if (!f) throw std::runtime_error("cannot write " + out);
      }
    } else if (*sweep) {
      auto grid = read_json_file(config);
      if (!grid.contains("base")) throw ConfigError(config + ": missing 'base'");
      RunConfig base;
      try {
        base = grid["base"].get<RunConfig>();
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError(config + ": " + e.what());
      }
      apply_overrides(base, preset, seeds, "");
      grid["base"] = base;
      std::size_t failed = 0;
      for (const auto& cell : cmd_sweep(grid, out, {workers, true})) {
        std::cout << "cell " << cell.index << ": " << cell.status;
        if (!cell.message.empty()) std::cout << " (" << cell.message << ")";
        std::cout << "\n";
        failed += cell.status != "ok";
      }
      std::cout << "table: " << (fs::path(out) / "sweep.csv").string() << "\n";
      if (failed > 0) return kExitOther;
    } else if (*reprs) {
      const auto model = EncoderModel::load(checkpoint);
      const auto data = load_data_dir(data_dir);
      dump.lambda = lambda;
      dump.beta = {alpha, beta};
      cmd_dump_representations(model, data.split(dump_split), dump, out);
      std::cout << out << "\n";
    }
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitData;
  } catch (const DivergenceError& e) {
    std::cerr << "diverged: " << e.what() << "\n";
    return kExitDivergence;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitOther;
  }
  return 0;
}
