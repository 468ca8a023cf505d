#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "artaug/curation.hpp"
#include "artaug/differential.hpp"
#include "artaug/diffusion.hpp"
#include "artaug/interaction.hpp"
#include "artaug/lora.hpp"

namespace artaug {

/// Every tunable of a run, persisted as config.json. Loading rejects unknown
/// keys and validates ranges; absent keys take the defaults below.
struct RunConfig {
  DenoiserConfig model;
  ScheduleMode schedule = ScheduleMode::kFlow;
  std::size_t sampler_steps = 50;

  std::size_t base_steps = 2000;
  std::size_t base_batch_size = 32;
  double base_learning_rate = 1e-3;
  std::size_t corpus_per_prompt = 24;

  std::size_t prompts_per_iteration = 200;
  std::string prompt_file;  // JSONL; empty samples the token space

  FitConfig fit;
  std::map<std::string, std::size_t> rank_overrides;  // pair id -> rank
  double alpha = 0.3;

  std::size_t min_pairs = 8;
  double eps_stop = 0.01;
  std::size_t max_iters = 8;

  CriticBackend critic;
  bool auto_accept = false;
  double review_timeout_seconds = 0.0;  // 0 waits until the queue drains
  double review_poll_seconds = 1.0;
  std::size_t parallelism = 1;
  std::uint64_t seed = 0;

  std::size_t eval_prompts = 100;

  nlohmann::json to_json() const;
  /// ContractError naming the offending key.
  static RunConfig from_json(const nlohmann::json& j);
  NoiseSchedule noise_schedule() const;
};

/// Paths inside a run directory.
struct RunLayout {
  std::filesystem::path root;

  std::filesystem::path config() const { return root / "config.json"; }
  std::filesystem::path base() const { return root / "base.atw"; }
  std::filesystem::path train_log() const { return root / "train_log.jsonl"; }
  std::filesystem::path base_metrics() const { return root / "base_metrics.json"; }
  std::filesystem::path manifest() const { return root / "manifest.jsonl"; }
  std::filesystem::path merged() const { return root / "merged.atw"; }
  std::filesystem::path lock() const { return root / ".lock"; }
  std::filesystem::path iteration(std::size_t k) const { return root / ("iter" + std::to_string(k)); }
  std::filesystem::path pairs(std::size_t k) const { return iteration(k) / "pairs"; }
  std::filesystem::path loras(std::size_t k) const { return iteration(k) / "loras"; }
  std::filesystem::path update(std::size_t k) const { return iteration(k) / "update.atw"; }
  std::filesystem::path stats(std::size_t k) const { return iteration(k) / "stats.json"; }
  std::filesystem::path jobs(std::size_t k) const { return iteration(k) / "jobs.jsonl"; }
  /// Fused weights after iteration k; its presence marks the iteration done.
  std::filesystem::path model(std::size_t k) const { return iteration(k) / "model.atw"; }
};

/// Exclusive advisory lock on <run>/.lock, released on destruction.
/// LockedError when another process holds it.
class RunLock {
 public:
  explicit RunLock(const std::filesystem::path& run_dir);
  ~RunLock();
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;

 private:
  int fd_ = -1;
};

/// Creates the directory and config.json. Returns false (and leaves files
/// untouched) when config.json already exists with the same content;
/// ContractError when it exists with different content.
bool init_run(const std::filesystem::path& run_dir, const RunConfig& config);
RunConfig load_run_config(const std::filesystem::path& run_dir);

struct BaseModelReport {
  double initial_validation_loss = 0, final_validation_loss = 0;
  double mean_consistency = 0, mean_aesthetic = 0;
  bool already_done = false;
};

/// Trains base.atw (no-op when it exists) and records baseline metrics.
BaseModelReport train_base_model(const std::filesystem::path& run_dir);

struct RunState {
  RunLayout layout;
  RunConfig config;
  DenoiserParams base;
  DenoiserParams theta;               // base fused with every update so far
  std::vector<LoraParams> updates;    // phi^[1..k]
  std::vector<IterationStats> history;

  std::size_t completed() const { return updates.size(); }
};

/// Loads config, base and all completed iterations. Verifies that re-fusing
/// the stored updates reproduces each iteration's saved weights within 1e-5
/// (IntegrityError otherwise).
RunState load_run_state(const std::filesystem::path& run_dir);

/// Derived seeds; all randomness of a run flows from RunConfig::seed.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b = 0, std::uint64_t c = 0);

/// One generate -> filter -> review -> train -> fuse cycle for iteration
/// completed()+1. Resumes a partially finished iteration from disk.
/// IterationStarved when no pair is accepted (stats are still persisted).
IterationStats run_iteration(RunState& state);

struct StopDecision {
  bool stop = false;
  std::string reason;  // insufficient_pairs | diminished | max_iters
};
StopDecision should_stop(const std::vector<IterationStats>& history, const RunConfig& config);

/// run_iteration until should_stop; a starved iteration stops the loop with
/// reason insufficient_pairs. Returns immediately when a completed run
/// already meets the stop rule.
StopDecision run_loop(RunState& state);

struct EvalReport {
  double aesthetic_a = 0, aesthetic_b = 0;
  double consistency_a = 0, consistency_b = 0;
  double win_rate_b = 0;  // ties count 0.5
  std::size_t samples = 0;

  nlohmann::json to_json() const;
  std::string to_text() const;
};

struct EvalCase {
  PromptSpec prompt;
  std::uint64_t seed;
};

/// Held-out grid: prompts cycle through the token space, seeds come from a
/// range that generation never uses.
std::vector<EvalCase> held_out_cases(std::size_t count, std::uint64_t master_seed);

EvalReport evaluate(const DenoiserParams& a, const DenoiserParams& b, const std::vector<EvalCase>& cases,
                    const NoiseSchedule& schedule, std::size_t sampler_steps, std::size_t parallelism = 1);

/// Concatenation of phi^[1..k] with scale 1, verified against the final
/// weights (IntegrityError beyond 1e-5) and written to merged.atw.
LoraParams export_merged(const RunState& state);

}  // namespace artaug
