// hysparse: verification suites, memory reports, toy training and regime
// comparison from one executable.
//
// Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.

#include <CLI11.hpp>
#include <openssl/evp.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>

#include "hysparse/runtime.hpp"
#include "hysparse/selection.hpp"
#include "hysparse/serialize.hpp"
#include "verify.hpp"

namespace fs = std::filesystem;
using namespace hysparse;

namespace {

constexpr int kConfigSchemaVersion = 1;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string sha256_hex(const std::string& bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha256(), nullptr) != 1)
    throw std::runtime_error("sha256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned i = 0; i < len; ++i) {
    out += hex[md[i] >> 4];
    out += hex[md[i] & 15];
  }
  return out;
}

/// Collects emitted files and writes manifest.json last.
class RunManifest {
 public:
  RunManifest(std::string subcommand, std::string out_dir, std::uint64_t seed, std::string config_path)
      : subcommand_(std::move(subcommand)), dir_(std::move(out_dir)), seed_(seed), config_(std::move(config_path)) {
    fs::create_directories(dir_);
  }

  void write(const std::string& name, const std::string& bytes) {
    std::ofstream f(fs::path(dir_) / name, std::ios::binary);
    f << bytes;
    if (!f) throw std::runtime_error("cannot write " + (fs::path(dir_) / name).string());
    files_.push_back({{"bytes", bytes.size()}, {"path", name}, {"sha256", sha256_hex(bytes)}});
  }

  void set(const std::string& key, nlohmann::json v) { params_[key] = std::move(v); }

  void finish() {
    nlohmann::json m = {{"config", config_.empty() ? nlohmann::json(nullptr) : nlohmann::json(config_)},
                        {"files", files_},
                        {"parameters", params_},
                        {"seed", seed_},
                        {"subcommand", subcommand_}};
    std::ofstream f(fs::path(dir_) / "manifest.json", std::ios::binary);
    f << m.dump(2) << '\n';
  }

 private:
  std::string subcommand_, dir_;
  std::uint64_t seed_;
  std::string config_;
  nlohmann::json files_ = nlohmann::json::array();
  nlohmann::json params_ = nlohmann::json::object();
};

std::uint64_t resolve_seed(const std::optional<std::uint64_t>& flag) {
  if (flag) return *flag;
  if (const char* env = std::getenv("HYSPARSE_SEED")) {
    try {
      std::size_t used = 0;
      const auto v = std::stoull(env, &used);
      if (used == std::string(env).size()) return v;
    } catch (const std::exception&) {
    }
    throw UsageError(std::string("HYSPARSE_SEED is not an unsigned integer: ") + env);
  }
  return 0;
}

/// {"schema_version": 1, "model": {...}}
ModelConfig load_model_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open config " + path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(f);
  } catch (const nlohmann::json::exception& e) {
    throw UsageError("config " + path + " is not JSON: " + e.what());
  }
  if (!j.is_object() || j.value("schema_version", -1) != kConfigSchemaVersion)
    throw UsageError("config " + path + ": schema_version must be " + std::to_string(kConfigSchemaVersion));
  if (!j.contains("model")) throw UsageError("config " + path + ": missing \"model\"");
  try {
    return model_config_from_json(j.at("model"));
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
}

ModelConfig toy_config() {
  ModelConfig c;
  c.n_layers = 3;
  c.hybrid_ratio = 1;
  return c;
}

std::string fmt_pct(double x) {
  char b[32];
  std::snprintf(b, sizeof b, "%6.2f%%", 100.0 * x);
  return b;
}

struct TaskFlags {
  std::string task = "copy";
  int seq_len = 0;
  int depth = 40;
  int steps = 2000;
  int batch = 8;
  double lr = 3e-4;
  std::string optimizer = "adam";
  int eval_samples = 256;
  int eval_every = 0;
  int window = 0;
  std::string config;

  void add_to(CLI::App* app) {
    app->add_option("--config", config, "Model config JSON (schema_version 1)");
    app->add_option("--task", task, "copy | needle")->check(CLI::IsMember({"copy", "needle"}));
    app->add_option("--seq-len", seq_len, "Sequence length (0 picks one that fits the task)");
    app->add_option("--depth", depth, "Needle distance from the query");
    app->add_option("--steps", steps, "Optimizer steps")->check(CLI::NonNegativeNumber);
    app->add_option("--batch", batch, "Sequences per step")->check(CLI::PositiveNumber);
    app->add_option("--lr", lr, "Learning rate");
    app->add_option("--optimizer", optimizer, "adam | sgd")->check(CLI::IsMember({"adam", "sgd"}));
    app->add_option("--eval-samples", eval_samples, "Held-out samples")->check(CLI::PositiveNumber);
    app->add_option("--eval-every", eval_every, "Evaluate every N steps (0: end only)");
    app->add_option("--window", window, "Override the sliding window size");
  }

  SyntheticTask make_task(ModelConfig& cfg, bool config_given) const {
    SyntheticTask t;
    t.kind = task_from_name(task);
    t.needle_depth = depth;
    t.align = cfg.block_size;
    t.guard = cfg.window;
    t.seq_len = seq_len > 0 ? seq_len : (t.kind == TaskKind::Copy ? 64 : std::max(64, depth + 16));
    if (!config_given) cfg.vocab = t.kind == TaskKind::Copy ? 32 : t.required_vocab();
    t.vocab = cfg.vocab;
    try {
      t.validate();
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    return t;
  }

  TrainOptions train_options(std::uint64_t seed) const {
    TrainOptions o;
    o.steps = steps;
    o.batch = batch;
    o.lr = lr;
    o.optimizer = optimizer_from_name(optimizer);
    o.seed = seed;
    o.eval_samples = eval_samples;
    o.eval_every = eval_every;
    return o;
  }

  ModelConfig model_config() const {
    ModelConfig c = config.empty() ? toy_config() : load_model_config(config);
    if (window > 0) c.window = window;
    try {
      c.validate();
    } catch (const ConfigError& e) {
      throw UsageError(e.what());
    }
    return c;
  }
};

nlohmann::json task_json(const SyntheticTask& t) {
  return {{"kind", task_name(t.kind)},
          {"needle_depth", t.needle_depth},
          {"queries", t.queries},
          {"seq_len", t.seq_len},
          {"vocab", t.vocab}};
}

int cmd_verify(const std::string& suite, std::uint64_t seed, const std::string& out) {
  std::vector<cli::CheckResult> results;
  try {
    results = cli::run_suite(suite, seed);
  } catch (const std::invalid_argument& e) {
    throw UsageError(e.what());
  }
  const std::string table = cli::render_table(results);
  std::cout << table;
  RunManifest m("verify", out, seed, "");
  m.set("suite", suite);
  m.write("verify.txt", table);
  m.finish();
  for (const auto& r : results)
    if (!r.passed) return 1;
  return 0;
}

int cmd_memreport(int layers, const std::string& ratio, int window, std::int64_t context, int kv_heads, int head_dim,
                  int element_bytes, std::uint64_t seed, const std::string& out) {
  const auto colon = ratio.find(':');
  int full = 0, sparse = 0;
  try {
    if (colon == std::string::npos) throw std::invalid_argument(ratio);
    full = std::stoi(ratio.substr(0, colon));
    sparse = std::stoi(ratio.substr(colon + 1));
  } catch (const std::exception&) {
    throw UsageError("--ratio must look like 1:N");
  }
  if (full != 1 || sparse < 0) throw UsageError("--ratio must be 1:N with N >= 0");
  MemoryReport rep;
  HybridStack stack;
  try {
    stack = build_hybrid_stack(layers, sparse);
    rep = memory_report(stack, kv_heads, head_dim, window, context, element_bytes);
  } catch (const ConfigError& e) {
    throw UsageError(e.what());
  }
  const std::string table = "layout: " + stack.pattern() + "\n" + rep.to_table();
  std::cout << table;
  RunManifest m("memreport", out, seed, "");
  m.set("geometry", {{"context", context},
                     {"element_bytes", element_bytes},
                     {"head_dim", head_dim},
                     {"kv_heads", kv_heads},
                     {"layers", layers},
                     {"ratio", ratio},
                     {"window", window}});
  nlohmann::json j = rep.to_json();
  j["pattern"] = stack.pattern();
  m.write("memreport.json", j.dump(2) + "\n");
  m.write("memreport.txt", table);
  m.finish();
  return 0;
}

int cmd_train(const TaskFlags& f, const std::string& regime_flag, std::uint64_t seed, const std::string& out) {
  ModelConfig base = f.model_config();
  const SyntheticTask task = f.make_task(base, !f.config.empty());
  const RegimeSpec spec{regime_from_name(regime_flag), base};
  Model model(spec.model_config(), seed);
  std::cout << "regime " << regime_name(spec.regime) << ", layout " << model.stack().pattern() << ", task "
            << task_name(task.kind) << " (seq " << task.seq_len << ")\n";
  const TrainReport rep = train(model, task, f.train_options(seed), spec.forward_options(), [](const TrainPoint& p) {
    if (p.accuracy >= 0.0) std::cout << "step " << p.step << "  loss " << p.loss << "  accuracy " << fmt_pct(p.accuracy) << "\n";
  });
  RunManifest m("train", out, seed, f.config);
  m.set("regime", regime_name(spec.regime));
  m.set("task", task_json(task));
  m.set("model", to_json(spec.model_config()));
  m.write("loss.csv", rep.to_csv());
  std::ostringstream weights;
  save_weights(model, weights);
  m.write("weights.bin", weights.str());
  m.write("summary.json", nlohmann::json({{"final_accuracy", rep.final_accuracy},
                                          {"final_loss", rep.final_loss},
                                          {"pattern", model.stack().pattern()},
                                          {"regime", regime_name(spec.regime)},
                                          {"steps", f.steps}})
                                  .dump(2) +
                              "\n");
  m.finish();
  return 0;
}

int cmd_compare(const TaskFlags& f, const std::vector<std::string>& regime_names, std::uint64_t seed,
                const std::string& out) {
  ModelConfig base = f.model_config();
  const SyntheticTask task = f.make_task(base, !f.config.empty());
  std::vector<Regime> regimes;
  for (const auto& r : regime_names) regimes.push_back(regime_from_name(r));
  const CompareReport rep = compare_regimes(task, base, f.train_options(seed), regimes, [](Regime r, const TrainPoint& p) {
    if (p.accuracy >= 0.0)
      std::cout << regime_name(r) << "  step " << p.step << "  loss " << p.loss << "  accuracy " << fmt_pct(p.accuracy)
                << "\n";
  });
  std::printf("\n%-9s %-8s %9s %12s %10s\n", "regime", "layout", "accuracy", "kv_bytes", "reduction");
  for (const auto& r : rep.results)
    std::printf("%-9s %-8s %9s %12lld %9.3fx\n", regime_name(r.regime), r.pattern.c_str(), fmt_pct(r.accuracy).c_str(),
                static_cast<long long>(r.memory.total_bytes), r.memory.reduction_ratio);
  RunManifest m("compare", out, seed, f.config);
  m.set("task", task_json(task));
  m.set("model", to_json(base));
  m.write("compare.json", rep.to_json().dump(2) + "\n");
  m.write("compare.csv", rep.to_csv());
  for (const auto& r : rep.results) m.write(std::string("loss_") + regime_name(r.regime) + ".csv", r.training.to_csv());
  m.finish();
  return 0;
}

int cmd_demo(const std::string& config, int length, std::uint64_t seed, const std::string& out) {
  ModelConfig cfg = config.empty() ? ModelConfig{} : load_model_config(config);
  const Model model(cfg, seed);
  Rng rng = Rng(seed).fork(99);
  std::vector<std::int32_t> tokens(static_cast<std::size_t>(std::max(2, length)));
  for (auto& t : tokens) t = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(cfg.vocab)));

  NoGradGuard guard;
  const std::size_t split = tokens.size() / 2;
  PrefillResult pre = prefill(model, std::span(tokens).first(split));
  ForwardTrace trace;
  ForwardOptions opts;
  opts.trace = &trace;
  Tensor last;
  for (std::size_t i = split; i < tokens.size(); ++i) last = decode_step(model, pre.arena, tokens[i], opts);

  std::cout << "layout " << model.stack().pattern() << ": prefilled " << split << " tokens, decoded "
            << tokens.size() - split << "\n";
  nlohmann::json selections = nlohmann::json::object();
  for (std::size_t l = 0; l < trace.layers.size(); ++l) {
    if (!trace.layers[l].indices) continue;
    const auto& idx = *trace.layers[l].indices;
    std::cout << "layer " << l << " selects for position " << idx.first_position() << ":";
    for (std::size_t g = 0; g < idx.groups(); ++g) {
      std::cout << " group " << g << " {";
      for (std::size_t i = 0; i < idx.at(0, g).size(); ++i) std::cout << (i ? "," : "") << idx.at(0, g)[i];
      std::cout << "}";
    }
    std::cout << "\n";
    selections[std::to_string(l)] = to_json(idx);
  }
  const MemoryReport mem = pre.arena.measured_report();
  std::cout << mem.to_table();
  std::vector<double> logits(last.data().begin(), last.data().end());
  RunManifest m("demo", out, seed, config);
  m.write("demo.json", nlohmann::json({{"final_logits", logits},
                                       {"memory", mem.to_json()},
                                       {"pattern", model.stack().pattern()},
                                       {"selections", selections},
                                       {"tokens", tokens}})
                               .dump(2) +
                           "\n");
  m.finish();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HySparse hybrid sparse attention toolkit"};
  app.require_subcommand(1);
  app.fallthrough();
  std::optional<std::uint64_t> seed_flag;
  std::string out;
  app.add_option("--seed", seed_flag, "Seed (falls back to HYSPARSE_SEED, then 0)");
  app.add_option("--out", out, "Output directory (default hysparse-out/<subcommand>)");

  auto* verify = app.add_subcommand("verify", "Run property suites against their oracles");
  std::string suite = "all";
  verify->add_option("--suite", suite, "kernels | selection | cache | parity | grads | all");

  auto* mem = app.add_subcommand("memreport", "KV cache footprint of a hybrid layout");
  int layers = 49, window = 128, kv_heads = 4, head_dim = 128, element_bytes = 2;
  std::int64_t context = 32768;
  std::string ratio = "1:11";
  mem->add_option("--layers", layers, "Number of layers");
  mem->add_option("--ratio", ratio, "Full:sparse ratio, 1:N");
  mem->add_option("--window", window, "Sliding window size");
  mem->add_option("--context", context, "Context length in tokens");
  mem->add_option("--kv-heads", kv_heads, "KV heads per layer");
  mem->add_option("--head-dim", head_dim, "Head dimension");
  mem->add_option("--element-bytes", element_bytes, "Bytes per cached scalar");

  auto* tr = app.add_subcommand("train", "Train a toy model on a synthetic task");
  TaskFlags train_flags;
  train_flags.add_to(tr);
  std::string regime = "hysparse";
  tr->add_option("--regime", regime, "full | swa | hysparse")->check(CLI::IsMember({"full", "swa", "hysparse"}));

  auto* cmp = app.add_subcommand("compare", "Train all three regimes and compare accuracy and memory");
  TaskFlags compare_flags;
  compare_flags.task = "needle";
  compare_flags.add_to(cmp);
  std::vector<std::string> regimes = {"full", "swa", "hysparse"};
  cmp->add_option("--regimes", regimes, "Subset of full, swa, hysparse")
      ->check(CLI::IsMember({"full", "swa", "hysparse"}));

  auto* demo = app.add_subcommand("demo", "Prefill, decode and show per-layer block selections");
  std::string demo_config;
  int demo_len = 48;
  demo->add_option("--config", demo_config, "Model config JSON");
  demo->add_option("--tokens", demo_len, "Sequence length")->check(CLI::PositiveNumber);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    const std::uint64_t seed = resolve_seed(seed_flag);
    auto dir = [&](const char* sub) { return out.empty() ? std::string("hysparse-out/") + sub : out; };
    if (*verify) return cmd_verify(suite, seed, dir("verify"));
    if (*mem) return cmd_memreport(layers, ratio, window, context, kv_heads, head_dim, element_bytes, seed, dir("memreport"));
    if (*tr) return cmd_train(train_flags, regime, seed, dir("train"));
    if (*cmp) return cmd_compare(compare_flags, regimes, seed, dir("compare"));
    if (*demo) return cmd_demo(demo_config, demo_len, seed, dir("demo"));
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}
