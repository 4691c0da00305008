#include "hysparse/runtime.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

#include "hysparse/ops.hpp"

namespace hysparse {

const char* regime_name(Regime r) {
  switch (r) {
    case Regime::FullAttn: return "full";
    case Regime::HybridSWA: return "swa";
    case Regime::HySparse: return "hysparse";
  }
  return "?";
}

Regime regime_from_name(const std::string& name) {
  if (name == "full" || name == "FullAttn") return Regime::FullAttn;
  if (name == "swa" || name == "HybridSWA") return Regime::HybridSWA;
  if (name == "hysparse" || name == "HySparse") return Regime::HySparse;
  throw ConfigError("unknown regime '" + name + "'");
}

ModelConfig RegimeSpec::model_config() const {
  ModelConfig c = base;
  if (regime == Regime::FullAttn) c.hybrid_ratio = 0;
  return c;
}

ForwardOptions RegimeSpec::forward_options() const {
  ForwardOptions o;
  o.sparse_branch = regime == Regime::HybridSWA ? SparseBranch::Disabled : SparseBranch::Enabled;
  return o;
}

PrefillResult prefill(const Model& model, std::span<const std::int32_t> tokens, const ForwardOptions& options) {
  KvArena arena = model.make_arena();
  Tensor logits = model.forward(tokens, options, &arena);
  return {std::move(logits), std::move(arena)};
}

Tensor decode_step(const Model& model, KvArena& arena, std::int32_t token, const ForwardOptions& options) {
  return model.decode_step(arena, token, options);
}

const char* task_name(TaskKind k) { return k == TaskKind::Copy ? "copy" : "needle"; }

TaskKind task_from_name(const std::string& name) {
  if (name == "copy") return TaskKind::Copy;
  if (name == "needle" || name == "needle_retrieval") return TaskKind::Needle;
  throw ConfigError("unknown task '" + name + "'");
}

namespace needle {
// Token layout; every family has four members per index.
constexpr int kValues = 4;
constexpr int kFiller = 0;
constexpr int kQuery = kFiller + kValues;                // Q(a)
constexpr int kKey = kQuery + kValues;                   // K(a,b) = kKey + 4a + b
constexpr int kDigit = kKey + kValues * kValues;         // D(d), follows its K
constexpr int kNote = kDigit + kValues;                  // N(d,c) = kNote + 4d + c
constexpr int kAnswer = kNote + kValues * kValues;       // C(b,c) = kAnswer + 4b + c
constexpr int kVocab = kAnswer + kValues * kValues;
}  // namespace needle

int SyntheticTask::required_vocab() const { return kind == TaskKind::Copy ? 3 : needle::kVocab; }

namespace {

int first_query(const SyntheticTask& t) { return t.seq_len - t.queries; }

int true_fact_start(const SyntheticTask& t) {
  return ((first_query(t) - t.needle_depth) / t.align) * t.align;
}

// Positions [0, usable) hold facts and notes; the rest is filler then queries.
int usable(const SyntheticTask& t) { return ((first_query(t) - t.guard) / t.align) * t.align; }

int note_span(const SyntheticTask& t) { return ((needle::kValues + t.align - 1) / t.align) * t.align; }

// A fact (K, V at s, s+1) and the note run [n, n + span) neither overlap nor
// come within `guard` positions of each other.
bool apart(const SyntheticTask& t, int fact, int note) {
  return note - (fact + 1) >= t.guard || fact - (note + note_span(t) - 1) >= t.guard;
}

std::vector<int> note_starts(const SyntheticTask& t) {
  std::vector<int> out;
  for (int n = 0; n + note_span(t) <= usable(t); n += t.align)
    if (apart(t, true_fact_start(t), n)) out.push_back(n);
  return out;
}

std::vector<int> fact_starts(const SyntheticTask& t, int note) {
  std::vector<int> out;
  for (int s = 0; s + t.align <= usable(t); s += t.align)
    if (s != true_fact_start(t) && apart(t, s, note)) out.push_back(s);
  return out;
}

}  // namespace

void SyntheticTask::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError("task: " + m); };
  if (vocab < required_vocab())
    fail("vocab " + std::to_string(vocab) + " is below the task's " + std::to_string(required_vocab()));
  if (kind == TaskKind::Copy) {
    if (seq_len < 4 || seq_len % 2 != 0) fail("copy needs an even seq_len >= 4");
    return;
  }
  if (align < 2) fail("align must be >= 2");
  if (guard < 0) fail("guard must be >= 0");
  if (queries < 1 || queries > needle::kValues) fail("queries must be in [1, 4]");
  if (needle_depth < 2 || needle_depth > first_query(*this)) fail("needle_depth out of range for seq_len");
  const auto notes = note_starts(*this);
  bool fits = true_fact_start(*this) + align <= usable(*this) && !notes.empty();
  for (int n : notes) fits = fits && fact_starts(*this, n).size() >= static_cast<std::size_t>(needle::kValues - 1);
  if (!fits) fail("seq_len " + std::to_string(seq_len) + " is too short for the needle layout at this depth");
}

Sample SyntheticTask::sample(Rng& rng) const {
  validate();
  Sample s;
  const auto L = static_cast<std::size_t>(seq_len);
  s.tokens.assign(L, 0);
  s.targets.assign(L, -1);

  if (kind == TaskKind::Copy) {
    const std::size_t n = L / 2;
    const auto sep = static_cast<std::int32_t>(vocab - 1);
    std::vector<std::int32_t> x(n);
    for (auto& v : x) v = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(vocab - 1)));
    std::copy(x.begin(), x.end(), s.tokens.begin());
    s.tokens[n] = sep;
    for (std::size_t i = 0; i + 1 < n; ++i) s.tokens[n + 1 + i] = x[i];
    for (std::size_t i = 0; i < n; ++i) s.targets[n + i] = x[i];
    return s;
  }

  using namespace needle;
  auto pick = [&](const auto& v) { return v[static_cast<std::size_t>(rng.below(v.size()))]; };
  auto shuffle_prefix = [&](auto& v, std::size_t k) {
    for (std::size_t i = 0; i < k; ++i) std::swap(v[i], v[i + static_cast<std::size_t>(rng.below(v.size() - i))]);
  };
  for (auto& t : s.tokens) t = kFiller + static_cast<std::int32_t>(rng.below(kValues));

  std::vector<int> key(kValues), digit(kValues), table(kValues), order(kValues);
  for (int a = 0; a < kValues; ++a) {
    key[static_cast<std::size_t>(a)] = static_cast<int>(rng.below(kValues));
    digit[static_cast<std::size_t>(a)] = static_cast<int>(rng.below(kValues));
    table[static_cast<std::size_t>(a)] = static_cast<int>(rng.below(kValues));
    order[static_cast<std::size_t>(a)] = a;
  }
  shuffle_prefix(order, kValues);  // order[i] is the a asked by query i

  // One note per d, kept out of every fact's window so only a long-range read joins them.
  const int note = pick(note_starts(*this));
  std::vector<int> notes(kValues);
  for (int d = 0; d < kValues; ++d) notes[static_cast<std::size_t>(d)] = kNote + kValues * d + table[static_cast<std::size_t>(d)];
  shuffle_prefix(notes, kValues);
  for (int i = 0; i < kValues; ++i) s.tokens[static_cast<std::size_t>(note + i)] = notes[static_cast<std::size_t>(i)];

  // Facts: the first query's at the requested depth, the rest at random.
  std::vector<int> blocks = fact_starts(*this, note);
  shuffle_prefix(blocks, kValues - 1);
  for (int i = 0; i < kValues; ++i) {
    const auto a = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
    const auto p = static_cast<std::size_t>(i == 0 ? true_fact_start(*this) : blocks[static_cast<std::size_t>(i - 1)]);
    s.tokens[p] = kKey + kValues * static_cast<int>(a) + key[a];
    s.tokens[p + 1] = kDigit + digit[a];
  }

  for (int i = 0; i < queries; ++i) {
    const auto a = static_cast<std::size_t>(order[static_cast<std::size_t>(i)]);
    const auto row = static_cast<std::size_t>(first_query(*this) + i);
    s.tokens[row] = kQuery + static_cast<int>(a);
    s.targets[row] = kAnswer + kValues * key[a] + table[static_cast<std::size_t>(digit[a])];
  }
  return s;
}

const char* optimizer_name(Optimizer o) { return o == Optimizer::Sgd ? "sgd" : "adam"; }

Optimizer optimizer_from_name(const std::string& name) {
  if (name == "sgd") return Optimizer::Sgd;
  if (name == "adam") return Optimizer::Adam;
  throw ConfigError("unknown optimizer '" + name + "'");
}

std::string TrainReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(17) << "step,loss,accuracy\n";
  for (const auto& p : curve) {
    os << p.step << ',' << p.loss << ',';
    if (p.accuracy >= 0.0) os << p.accuracy;
    os << '\n';
  }
  return os.str();
}

double batch_loss_and_grad(const Model& model, const std::vector<Sample>& batch, const ForwardOptions& options) {
  double total = 0.0;
  const double w = 1.0 / static_cast<double>(batch.size());
  for (const auto& s : batch) {
    const Tensor loss = scale(cross_entropy(model.forward(s.tokens, options), s.targets), w);
    loss.backward();
    total += loss.item();
  }
  return total;
}

double evaluate(const Model& model, const SyntheticTask& task, int n, std::uint64_t seed,
                const ForwardOptions& options) {
  NoGradGuard guard;
  Rng rng(seed);
  std::size_t hit = 0, scored = 0;
  const auto vocab = static_cast<std::size_t>(model.config().vocab);
  for (int i = 0; i < n; ++i) {
    const Sample s = task.sample(rng);
    const Tensor logits = model.forward(s.tokens, options);
    const auto v = logits.data();
    for (std::size_t r = 0; r < s.targets.size(); ++r) {
      if (s.targets[r] < 0) continue;
      const auto row = v.subspan(r * vocab, vocab);
      const auto best = static_cast<std::int32_t>(std::max_element(row.begin(), row.end()) - row.begin());
      hit += best == s.targets[r];
      ++scored;
    }
  }
  return scored ? static_cast<double>(hit) / static_cast<double>(scored) : 0.0;
}

TrainReport train(Model& model, const SyntheticTask& task, const TrainOptions& opts, const ForwardOptions& options,
                  const std::function<void(const TrainPoint&)>& progress) {
  task.validate();
  if (model.config().vocab < task.required_vocab()) throw ConfigError("train: model vocab too small for task");
  if (opts.steps < 0 || opts.batch < 1 || opts.eval_samples < 1) throw ConfigError("train: bad step/batch counts");

  auto params = model.named_parameters();
  std::vector<std::vector<double>> m1(params.size()), m2(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    m1[i].assign(params[i].second.size(), 0.0);
    m2[i].assign(params[i].second.size(), 0.0);
  }

  const Rng root(opts.seed);
  Rng data = root.fork(1);
  const std::uint64_t eval_seed = root.fork(2).next_u64();
  TrainReport report;
  auto emit = [&](TrainPoint p) {
    report.curve.push_back(p);
    if (progress) progress(p);
  };

  if (opts.steps == 0) {
    emit({0, 0.0, evaluate(model, task, opts.eval_samples, eval_seed, options)});
    report.final_accuracy = report.curve.back().accuracy;
    return report;
  }

  for (int step = 1; step <= opts.steps; ++step) {
    for (auto& [name, t] : params) t.zero_grad();
    std::vector<Sample> batch;
    for (int i = 0; i < opts.batch; ++i) batch.push_back(task.sample(data));
    const double loss = batch_loss_and_grad(model, batch, options);
    if (!std::isfinite(loss)) throw NumericError("train: loss is not finite at step " + std::to_string(step));

    double norm2 = 0.0;
    for (auto& [name, t] : params)
      for (double g : t.grad()) norm2 += g * g;
    const double norm = std::sqrt(norm2);
    const double clip = opts.clip > 0.0 && norm > opts.clip ? opts.clip / norm : 1.0;

    const double bc1 = 1.0 - std::pow(opts.beta1, step);
    const double bc2 = 1.0 - std::pow(opts.beta2, step);
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto w = params[i].second.data();
      const auto g = params[i].second.grad();
      for (std::size_t j = 0; j < w.size(); ++j) {
        const double gj = g[j] * clip;
        if (opts.optimizer == Optimizer::Sgd) {
          w[j] -= opts.lr * gj;
          continue;
        }
        m1[i][j] = opts.beta1 * m1[i][j] + (1.0 - opts.beta1) * gj;
        m2[i][j] = opts.beta2 * m2[i][j] + (1.0 - opts.beta2) * gj * gj;
        w[j] -= opts.lr * (m1[i][j] / bc1) / (std::sqrt(m2[i][j] / bc2) + opts.eps);
      }
      check_finite(w, params[i].first.c_str());
    }

    TrainPoint p{step, loss, -1.0};
    if (step == opts.steps || (opts.eval_every > 0 && step % opts.eval_every == 0))
      p.accuracy = evaluate(model, task, opts.eval_samples, eval_seed, options);
    emit(p);
  }
  for (auto& [name, t] : params) t.zero_grad();
  report.final_accuracy = report.curve.back().accuracy;
  report.final_loss = report.curve.back().loss;
  return report;
}

const RegimeResult& CompareReport::at(Regime r) const {
  for (const auto& x : results)
    if (x.regime == r) return x;
  throw ConfigError(std::string("compare: no result for regime ") + regime_name(r));
}

nlohmann::json CompareReport::to_json() const {
  nlohmann::json regimes = nlohmann::json::array();
  for (const auto& r : results)
    regimes.push_back({{"regime", regime_name(r.regime)},
                       {"pattern", r.pattern},
                       {"accuracy", r.accuracy},
                       {"final_loss", r.final_loss},
                       {"memory", r.memory.to_json()}});
  return {{"seed", seed},
          {"task",
           {{"kind", task_name(task.kind)},
            {"seq_len", task.seq_len},
            {"vocab", task.vocab},
            {"needle_depth", task.needle_depth},
            {"queries", task.queries}}},
          {"regimes", regimes}};
}

std::string CompareReport::to_csv() const {
  std::ostringstream os;
  os << std::setprecision(17) << "regime,pattern,accuracy,final_loss,kv_bytes,reduction_ratio\n";
  for (const auto& r : results)
    os << regime_name(r.regime) << ',' << r.pattern << ',' << r.accuracy << ',' << r.final_loss << ','
       << r.memory.total_bytes << ',' << r.memory.reduction_ratio << '\n';
  return os.str();
}

CompareReport compare_regimes(const SyntheticTask& task, const ModelConfig& base, const TrainOptions& opts,
                              const std::vector<Regime>& regimes,
                              const std::function<void(Regime, const TrainPoint&)>& progress) {
  CompareReport report;
  report.task = task;
  report.seed = opts.seed;
  for (Regime r : regimes) {
    const RegimeSpec spec{r, base};
    Model model(spec.model_config(), opts.seed);
    RegimeResult res;
    res.regime = r;
    res.pattern = model.stack().pattern();
    std::function<void(const TrainPoint&)> cb;
    if (progress) cb = [&](const TrainPoint& p) { progress(r, p); };
    res.training = train(model, task, opts, spec.forward_options(), cb);
    res.accuracy = res.training.final_accuracy;
    res.final_loss = res.training.final_loss;
    res.memory = memory_report(spec.model_config(), task.seq_len, 8);
    report.results.push_back(std::move(res));
  }
  return report;
}

}  // namespace hysparse
