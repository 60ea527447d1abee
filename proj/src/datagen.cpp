#include "catlab/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

#include "catlab/encoder.hpp"
#include "catlab/errors.hpp"

namespace catlab {

namespace {

template <class T>
const T& pick(const std::vector<T>& v, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, v.size() - 1);
  return v[d(rng)];
}

std::size_t uniform_index(std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, n - 1);
  return d(rng);
}

bool coin(double p, std::mt19937_64& rng) {
  return std::generate_canonical<double, 53>(rng) < p;
}

void check_proportions(const std::vector<double>& p, std::size_t classes, const char* which) {
  if (p.size() != classes) {
    throw ConfigError(std::string("case study: ") + which + " proportions list " +
                      std::to_string(p.size()) + " entries for " + std::to_string(classes) +
                      " classes");
  }
  double s = 0.0;
  for (double v : p) {
    if (!(v >= 0.0)) throw ConfigError(std::string("case study: negative ") + which + " proportion");
    s += v;
  }
  if (std::abs(s - 1.0) > 1e-9)
    throw ConfigError(std::string("case study: ") + which + " proportions sum to " + std::to_string(s));
}

Example classification_example(const SCMSpec& spec, const ClassificationRoles& roles,
                               std::size_t label, std::size_t confounder_class,
                               std::mt19937_64& rng) {
  Example ex;
  ex.tokens.resize(spec.seq_len);
  ex.tokens[0] = kClsToken;
  for (std::size_t p = 1; p < spec.seq_len; ++p) ex.tokens[p] = pick(roles.filler, rng);
  const std::size_t causal_pos = 1 + uniform_index(spec.seq_len - 1, rng);
  std::size_t conf_pos = 1 + uniform_index(spec.seq_len - 2, rng);
  if (conf_pos >= causal_pos) ++conf_pos;
  ex.tokens[causal_pos] = pick(roles.causal[label], rng);
  ex.tokens[conf_pos] = roles.confounder[confounder_class];
  ex.label = label;
  return ex;
}

Dataset classification_split(const SCMSpec& spec, const ClassificationRoles& roles, std::size_t n,
                             double rho, std::mt19937_64& rng) {
  Dataset d;
  d.task = TaskKind::kClassification;
  d.n_classes = spec.n_classes;
  d.examples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t y = uniform_index(spec.n_classes, rng);
    const std::size_t c = coin(rho, rng) ? y : uniform_index(spec.n_classes, rng);
    Example ex = classification_example(spec, roles, y, c, rng);
    if (spec.label_noise > 0.0 && coin(spec.label_noise, rng)) {
      ex.label = (y + 1 + uniform_index(spec.n_classes - 1, rng)) % spec.n_classes;
    }
    d.examples.push_back(std::move(ex));
  }
  return d;
}

}  // namespace

TaskKind parse_task_kind(const std::string& s) {
  if (s == "classification") return TaskKind::kClassification;
  if (s == "span") return TaskKind::kSpan;
  throw ConfigError("unknown task '" + s + "' (classification|span)");
}

std::string to_string(TaskKind t) { return t == TaskKind::kClassification ? "classification" : "span"; }

void SCMSpec::validate() const {
  if (n_classes < 2) throw ConfigError("scm: n_classes must be at least 2");
  if (causal_per_class < 1) throw ConfigError("scm: causal_per_class must be at least 1");
  const std::size_t needed = kFirstFreeToken + n_classes * (causal_per_class + 1) + 1;
  if (vocab_size < needed) {
    throw ConfigError("scm: vocabulary of " + std::to_string(vocab_size) +
                      " is too small for disjoint token roles (needs " + std::to_string(needed) + ")");
  }
  if (seq_len < 3) throw ConfigError("scm: seq_len must be at least 3");
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("scm: rho must lie in [0, 1]");
  if (!(label_noise >= 0.0 && label_noise < 1.0)) throw ConfigError("scm: label_noise must lie in [0, 1)");
}

void to_json(nlohmann::json& j, const SCMSpec& s) {
  j = {{"vocab_size", s.vocab_size}, {"n_classes", s.n_classes},
       {"causal_per_class", s.causal_per_class}, {"rho", s.rho},
       {"seq_len", s.seq_len}, {"label_noise", s.label_noise}, {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SCMSpec& s) {
  SCMSpec d;
  s.vocab_size = j.value("vocab_size", d.vocab_size);
  s.n_classes = j.value("n_classes", d.n_classes);
  s.causal_per_class = j.value("causal_per_class", d.causal_per_class);
  s.rho = j.value("rho", d.rho);
  s.seq_len = j.value("seq_len", d.seq_len);
  s.label_noise = j.value("label_noise", d.label_noise);
  s.seed = j.value("seed", d.seed);
}

ClassificationRoles classification_roles(const SCMSpec& spec) {
  spec.validate();
  ClassificationRoles r;
  std::size_t next = kFirstFreeToken;
  for (std::size_t c = 0; c < spec.n_classes; ++c) r.confounder.push_back(next++);
  r.causal.resize(spec.n_classes);
  for (auto& set : r.causal)
    for (std::size_t k = 0; k < spec.causal_per_class; ++k) set.push_back(next++);
  for (; next < spec.vocab_size; ++next) r.filler.push_back(next);
  return r;
}

Splits generate_classification(const SCMSpec& spec, std::size_t n_train, std::size_t n_test) {
  const auto roles = classification_roles(spec);
  std::mt19937_64 rng(spec.seed);
  Splits s;
  s.train = classification_split(spec, roles, n_train, spec.rho, rng);
  s.iid_test = classification_split(spec, roles, n_test, spec.rho, rng);
  s.ood_test = classification_split(spec, roles, n_test, 0.0, rng);
  return s;
}

void CaseStudySpec::validate() const {
  base.validate();
  check_proportions(train_proportions, base.n_classes, "train");
  check_proportions(test_proportions, base.n_classes, "test");
  if (base.seq_len < (phrase.empty() ? 3 : phrase.size()) + 2)
    throw ConfigError("case study: sequence too short for the marker phrase");
}

void to_json(nlohmann::json& j, const CaseStudySpec& s) {
  j = {{"base", s.base}, {"n_train", s.n_train}, {"n_test", s.n_test}, {"phrase", s.phrase},
       {"train_proportions", s.train_proportions}, {"test_proportions", s.test_proportions}};
}

void from_json(const nlohmann::json& j, CaseStudySpec& s) {
  CaseStudySpec d;
  nlohmann::json base = d.base;
  if (j.contains("base")) base.update(j["base"]);
  s.base = base.get<SCMSpec>();
  s.n_train = j.value("n_train", d.n_train);
  s.n_test = j.value("n_test", d.n_test);
  s.phrase = j.value("phrase", d.phrase);
  s.train_proportions = j.value("train_proportions", d.train_proportions);
  s.test_proportions = j.value("test_proportions", d.test_proportions);
}

std::vector<std::size_t> class_counts(const std::vector<double>& proportions, std::size_t n) {
  std::vector<std::size_t> counts(proportions.size());
  std::vector<std::pair<double, std::size_t>> remainders;
  std::size_t total = 0;
  for (std::size_t c = 0; c < proportions.size(); ++c) {
    const double exact = proportions[c] * static_cast<double>(n);
    counts[c] = static_cast<std::size_t>(std::floor(exact + 1e-9));
    total += counts[c];
    remainders.emplace_back(exact - static_cast<double>(counts[c]), c);
  }
  // ties broken by class index for determinism
  std::stable_sort(remainders.begin(), remainders.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  for (std::size_t k = 0; total < n; ++k, ++total) ++counts[remainders[k % remainders.size()].second];
  return counts;
}

CaseStudySplits generate_case_study(const CaseStudySpec& spec) {
  spec.validate();
  auto roles = classification_roles(spec.base);
  CaseStudySplits out;
  out.phrase = spec.phrase;
  if (out.phrase.empty()) {
    if (roles.filler.size() < 4) throw ConfigError("case study: not enough filler ids for a default phrase");
    out.phrase.assign(roles.filler.begin(), roles.filler.begin() + 3);
  }
  const std::set<std::size_t> phrase_ids(out.phrase.begin(), out.phrase.end());
  for (auto id : out.phrase) {
    if (std::find(roles.filler.begin(), roles.filler.end(), id) == roles.filler.end())
      throw ConfigError("case study: phrase token " + std::to_string(id) + " is not a filler id");
  }
  std::erase_if(roles.filler, [&](std::size_t id) { return phrase_ids.count(id) > 0; });
  if (roles.filler.empty()) throw ConfigError("case study: phrase uses every filler id");

  std::mt19937_64 rng(spec.base.seed);
  auto make_split = [&](std::size_t n, const std::vector<double>& props) {
    Dataset d;
    d.task = TaskKind::kClassification;
    d.n_classes = spec.base.n_classes;
    std::vector<std::size_t> labels;
    const auto counts = class_counts(props, n);
    for (std::size_t c = 0; c < counts.size(); ++c) labels.insert(labels.end(), counts[c], c);
    std::shuffle(labels.begin(), labels.end(), rng);
    const std::size_t L = spec.base.seq_len;
    const std::size_t P = out.phrase.size();
    for (auto y : labels) {
      Example ex;
      ex.label = y;
      ex.tokens.resize(L);
      ex.tokens[0] = kClsToken;
      for (std::size_t p = 1; p < L; ++p) ex.tokens[p] = pick(roles.filler, rng);
      const std::size_t start = 1 + uniform_index(L - P, rng);  // phrase occupies [start, start+P)
      std::copy(out.phrase.begin(), out.phrase.end(), ex.tokens.begin() + start);
      std::size_t pos = 1 + uniform_index(L - 1 - P, rng);
      if (pos >= start) pos += P;
      ex.tokens[pos] = pick(roles.causal[y], rng);
      d.examples.push_back(std::move(ex));
    }
    return d;
  };
  out.train = make_split(spec.n_train, spec.train_proportions);
  out.test = make_split(spec.n_test, spec.test_proportions);
  return out;
}

void SpanSpec::validate() const {
  if (n_answer_tokens < 1 || max_answer_len < 1) throw ConfigError("span: need answer tokens");
  if (kFirstFreeToken + 2 + n_answer_tokens + 1 > vocab_size)
    throw ConfigError("span: vocabulary too small for disjoint token roles");
  // trigger + answer + distractor + decoys with one separator each
  const std::size_t needed = 2 + max_answer_len + n_decoys * (max_answer_len + 1) + 1;
  if (context_len < needed)
    throw ConfigError("span: context_len " + std::to_string(context_len) + " < " + std::to_string(needed));
  if (!(rho >= 0.0 && rho <= 1.0)) throw ConfigError("span: rho must lie in [0, 1]");
}

void to_json(nlohmann::json& j, const SpanSpec& s) {
  j = {{"vocab_size", s.vocab_size}, {"query_len", s.query_len}, {"context_len", s.context_len},
       {"n_answer_tokens", s.n_answer_tokens}, {"max_answer_len", s.max_answer_len},
       {"n_decoys", s.n_decoys}, {"rho", s.rho}, {"seed", s.seed}};
}

void from_json(const nlohmann::json& j, SpanSpec& s) {
  SpanSpec d;
  s.vocab_size = j.value("vocab_size", d.vocab_size);
  s.query_len = j.value("query_len", d.query_len);
  s.context_len = j.value("context_len", d.context_len);
  s.n_answer_tokens = j.value("n_answer_tokens", d.n_answer_tokens);
  s.max_answer_len = j.value("max_answer_len", d.max_answer_len);
  s.n_decoys = j.value("n_decoys", d.n_decoys);
  s.rho = j.value("rho", d.rho);
  s.seed = j.value("seed", d.seed);
}

SpanRoles span_roles(const SpanSpec& spec) {
  spec.validate();
  SpanRoles r;
  r.trigger = kFirstFreeToken;
  r.distractor = kFirstFreeToken + 1;
  std::size_t next = kFirstFreeToken + 2;
  for (std::size_t k = 0; k < spec.n_answer_tokens; ++k) r.answer.push_back(next++);
  for (; next < spec.vocab_size; ++next) r.filler.push_back(next);
  return r;
}

namespace {

enum Cell : char { kFree = 'f', kReserved = 'r', kAnswerCell = 'a', kTriggerCell = 't' };

Example span_example(const SpanSpec& spec, const SpanRoles& roles, double rho, std::mt19937_64& rng) {
  const std::size_t C = spec.context_len;
  std::vector<char> kind(C, kFree);
  std::vector<std::size_t> ctx(C, 0);

  const std::size_t alen = 1 + uniform_index(spec.max_answer_len, rng);
  const std::size_t t = uniform_index(C - alen - 1, rng);  // leaves a cell after the answer
  kind[t] = kTriggerCell;
  ctx[t] = roles.trigger;
  for (std::size_t k = 1; k <= alen; ++k) {
    kind[t + k] = kAnswerCell;
    ctx[t + k] = pick(roles.answer, rng);
  }
  kind[t + alen + 1] = kReserved;
  if (t > 0 && kind[t - 1] == kFree) kind[t - 1] = kReserved;

  for (std::size_t d = 0; d < spec.n_decoys; ++d) {
    const std::size_t len = 1 + uniform_index(spec.max_answer_len, rng);
    std::vector<std::size_t> starts;
    for (std::size_t s = 0; s + len <= C; ++s) {
      bool ok = true;
      const std::size_t lo = s == 0 ? 0 : s - 1;
      const std::size_t hi = std::min(C - 1, s + len);
      for (std::size_t p = lo; p <= hi && ok; ++p) {
        const bool inside = p >= s && p < s + len;
        ok = inside ? kind[p] == kFree : kind[p] == kFree || kind[p] == kReserved;
      }
      if (ok) starts.push_back(s);
    }
    if (starts.empty()) continue;
    const std::size_t s = pick(starts, rng);
    for (std::size_t p = s; p < s + len; ++p) {
      kind[p] = kAnswerCell;
      ctx[p] = pick(roles.answer, rng);
    }
    if (s > 0) kind[s - 1] = kReserved;
    if (s + len < C) kind[s + len] = kReserved;
  }

  std::size_t dpos = t + alen + 1;
  if (!coin(rho, rng)) {
    std::vector<std::size_t> open;
    for (std::size_t p = 0; p < C; ++p)
      if (kind[p] == kFree || kind[p] == kReserved) open.push_back(p);
    dpos = pick(open, rng);
  }
  for (std::size_t p = 0; p < C; ++p)
    if (kind[p] == kFree || kind[p] == kReserved) ctx[p] = pick(roles.filler, rng);
  ctx[dpos] = roles.distractor;

  Example ex;
  const std::size_t offset = spec.query_len + 2;
  ex.tokens.push_back(kClsToken);
  ex.segments.push_back(Segment::kOther);
  for (std::size_t q = 0; q < spec.query_len; ++q) {
    ex.tokens.push_back(pick(roles.filler, rng));
    ex.segments.push_back(Segment::kQuery);
  }
  ex.tokens.push_back(kSepToken);
  ex.segments.push_back(Segment::kOther);
  for (std::size_t p = 0; p < C; ++p) {
    ex.tokens.push_back(ctx[p]);
    ex.segments.push_back(Segment::kContext);
  }
  ex.span = Span{offset + t + 1, offset + t + alen};
  return ex;
}

}  // namespace

Splits generate_span_task(const SpanSpec& spec, std::size_t n_train, std::size_t n_test) {
  const auto roles = span_roles(spec);
  std::mt19937_64 rng(spec.seed);
  auto split = [&](std::size_t n, double rho) {
    Dataset d;
    d.task = TaskKind::kSpan;
    for (std::size_t i = 0; i < n; ++i) d.examples.push_back(span_example(spec, roles, rho, rng));
    return d;
  };
  Splits s;
  s.train = split(n_train, spec.rho);
  s.iid_test = split(n_test, spec.rho);
  s.ood_test = split(n_test, 0.0);
  return s;
}

void validate_dataset(const Dataset& d, std::size_t vocab_size) {
  for (std::size_t i = 0; i < d.examples.size(); ++i) {
    const auto& ex = d.examples[i];
    const std::string where = "example " + std::to_string(i) + ": ";
    if (ex.tokens.empty()) throw DataError(where + "empty token sequence");
    for (auto t : ex.tokens)
      if (t >= vocab_size) throw DataError(where + "token id " + std::to_string(t) + " outside vocabulary");
    if (d.task == TaskKind::kClassification) {
      if (ex.label >= d.n_classes) throw DataError(where + "label " + std::to_string(ex.label) + " out of range");
    } else {
      if (!ex.span) throw DataError(where + "missing answer span");
      if (ex.segments.size() != ex.tokens.size()) throw DataError(where + "segments do not match tokens");
      if (ex.span->start > ex.span->end || ex.span->end >= ex.tokens.size())
        throw DataError(where + "answer span outside sequence");
      for (std::size_t p = ex.span->start; p <= ex.span->end; ++p)
        if (ex.segments[p] != Segment::kContext) throw DataError(where + "answer span outside context");
    }
  }
}

void write_jsonl(const Dataset& d, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& ex : d.examples) {
    nlohmann::json j{{"tokens", ex.tokens}};
    if (d.task == TaskKind::kClassification) {
      j["label"] = ex.label;
    } else {
      j["span"] = {ex.span->start, ex.span->end};
      std::vector<int> seg;
      for (auto s : ex.segments) seg.push_back(static_cast<int>(s));
      j["segments"] = seg;
    }
    out << j.dump() << '\n';
  }
  if (!out) throw std::runtime_error("write failed for " + path.string());
}

Dataset read_jsonl(const std::filesystem::path& path, TaskKind task, std::size_t n_classes,
                   std::size_t vocab_size) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read dataset " + path.string());
  Dataset d;
  d.task = task;
  d.n_classes = n_classes;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(lineno) + ": ";
    try {
      const auto j = nlohmann::json::parse(line);
      Example ex;
      ex.tokens = j.at("tokens").get<std::vector<std::size_t>>();
      if (task == TaskKind::kClassification) {
        ex.label = j.at("label").get<std::size_t>();
      } else {
        const auto sp = j.at("span").get<std::vector<std::size_t>>();
        if (sp.size() != 2) throw DataError("span must have two entries");
        ex.span = Span{sp[0], sp[1]};
        for (int s : j.at("segments").get<std::vector<int>>()) {
          if (s < 0 || s > 2) throw DataError("segment label " + std::to_string(s) + " unknown");
          ex.segments.push_back(static_cast<Segment>(s));
        }
      }
      Dataset one{task, n_classes, {ex}};
      validate_dataset(one, vocab_size);
      d.examples.push_back(std::move(ex));
    } catch (const nlohmann::json::exception& e) {
      throw DataError(where + e.what());
    } catch (const DataError& e) {
      throw DataError(where + e.what());
    }
  }
  if (d.examples.empty()) throw DataError("dataset " + path.string() + " is empty");
  return d;
}

}  // namespace catlab
