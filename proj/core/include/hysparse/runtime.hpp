#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "hysparse/kvcache.hpp"
#include "hysparse/model.hpp"
#include "hysparse/rng.hpp"

namespace hysparse {

enum class Regime { FullAttn, HybridSWA, HySparse };

const char* regime_name(Regime r);
/// Accepts "full", "swa", "hysparse" (and the enum spellings). Throws ConfigError.
Regime regime_from_name(const std::string& name);

/// One of the three compared architectures built from a shared base config.
/// FullAttn uses an all-full stack; HybridSWA keeps the hybrid layout but
/// drops the block-sparse branch.
struct RegimeSpec {
  Regime regime = Regime::HySparse;
  ModelConfig base;

  ModelConfig model_config() const;
  ForwardOptions forward_options() const;
};

struct PrefillResult {
  Tensor logits;  // [t x vocab]
  KvArena arena;
};

PrefillResult prefill(const Model& model, std::span<const std::int32_t> tokens,
                      const ForwardOptions& options = {});
Tensor decode_step(const Model& model, KvArena& arena, std::int32_t token, const ForwardOptions& options = {});

enum class TaskKind { Copy, Needle };

const char* task_name(TaskKind k);
TaskKind task_from_name(const std::string& name);

/// Token sequence plus per-row next-token targets (-1 where unscored).
struct Sample {
  std::vector<std::int32_t> tokens;
  std::vector<std::int32_t> targets;
};

/// Seeded generators for the toy tasks.
///
/// copy: n random symbols, a separator, then the same symbols again; every
/// row from the separator on is scored. Requires seq_len even.
///
/// needle: chained lookup. Four facts, one per a, each an aligned block
/// starting K(a,b) D(d). One run of four notes N(d,c) maps every digit to a
/// c. The sequence ends with `queries` query tokens Q(a), each scored with
/// C(b,c) for a's key b and the c noted against a's digit. The first
/// query's fact starts needle_depth positions before it (rounded down to a
/// multiple of `align`). Facts and notes stay `guard` positions clear of
/// each other and of the queries, so a window of that size never joins any
/// two of them.
struct SyntheticTask {
  TaskKind kind = TaskKind::Copy;
  int seq_len = 64;
  int vocab = 32;
  int needle_depth = 32;
  int align = 4;
  int guard = 8;
  int queries = 4;

  /// Smallest vocabulary the task's token layout needs.
  int required_vocab() const;
  void validate() const;
  Sample sample(Rng& rng) const;
};

enum class Optimizer { Sgd, Adam };

const char* optimizer_name(Optimizer o);
Optimizer optimizer_from_name(const std::string& name);

struct TrainOptions {
  int steps = 2000;
  int batch = 8;
  double lr = 3e-4;
  Optimizer optimizer = Optimizer::Adam;
  double beta1 = 0.9;
  double beta2 = 0.95;
  double eps = 1e-10;
  /// Global gradient-norm clip; 0 disables.
  double clip = 1.0;
  std::uint64_t seed = 0;
  int eval_samples = 256;
  /// Evaluate every this many steps (and at the end); 0 evaluates only at the end.
  int eval_every = 0;
};

struct TrainPoint {
  int step = 0;
  double loss = 0.0;
  /// Held-out token accuracy, or -1 for rows without an evaluation.
  double accuracy = -1.0;
};

struct TrainReport {
  std::vector<TrainPoint> curve;
  double final_accuracy = 0.0;
  double final_loss = 0.0;

  /// "step,loss,accuracy" with full-precision values.
  std::string to_csv() const;
};

/// Mean cross entropy of one batch with gradients accumulated into the
/// model's parameters.
double batch_loss_and_grad(const Model& model, const std::vector<Sample>& batch, const ForwardOptions& options);

/// Token accuracy over `n` held-out samples drawn from stream `seed`.
double evaluate(const Model& model, const SyntheticTask& task, int n, std::uint64_t seed,
                const ForwardOptions& options = {});

/// Next-token training on fresh seeded batches. Throws NumericError with the
/// step number if the loss stops being finite.
TrainReport train(Model& model, const SyntheticTask& task, const TrainOptions& opts,
                  const ForwardOptions& options = {},
                  const std::function<void(const TrainPoint&)>& progress = nullptr);

struct RegimeResult {
  Regime regime = Regime::HySparse;
  std::string pattern;
  double accuracy = 0.0;
  double final_loss = 0.0;
  MemoryReport memory;
  TrainReport training;
};

struct CompareReport {
  SyntheticTask task;
  std::uint64_t seed = 0;
  std::vector<RegimeResult> results;

  const RegimeResult& at(Regime r) const;
  nlohmann::json to_json() const;
  /// "regime,pattern,accuracy,final_loss,kv_bytes,reduction_ratio"
  std::string to_csv() const;
};

/// Trains one model per regime from the same seed and budget, then reports
/// held-out accuracy and the analytic cache footprint at the task length
/// (8-byte elements).
CompareReport compare_regimes(const SyntheticTask& task, const ModelConfig& base, const TrainOptions& opts,
                              const std::vector<Regime>& regimes = {Regime::FullAttn, Regime::HybridSWA,
                                                                    Regime::HySparse},
                              const std::function<void(Regime, const TrainPoint&)>& progress = nullptr);

}  // namespace hysparse
