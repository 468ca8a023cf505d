#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "artaug/diffusion.hpp"
#include "artaug/image.hpp"
#include "artaug/lora.hpp"
#include "artaug/toy_world.hpp"

namespace artaug {

struct FitConfig {
  std::size_t steps = 400;
  double learning_rate = 1e-4;
  std::size_t batch_size = 1;
  std::size_t rank = 8;
  /// Ranks outside {4, 8, 16} need this set.
  bool allow_any_rank = false;
  std::uint64_t seed = 0;
  /// Fixed (t, eps) draws used to report the loss before and after fitting.
  std::size_t probe_count = 32;

  void validate() const;
  nlohmann::json to_json() const;
  static FitConfig from_json(const nlohmann::json& j);
};

struct FitResult {
  LoraParams lora;
  double initial_loss = 0.0;  // probe loss of theta alone
  double final_loss = 0.0;    // probe loss of theta (+) lora
};

/// Minimises the schedule's loss on one image over fresh (t, eps) draws,
/// updating only the LoRA factors. Deterministic per config.seed.
FitResult fit_single_image(const DenoiserParams& theta, const PromptSpec& prompt, const ImageBuffer& image,
                           const NoiseSchedule& schedule, const FitConfig& config);

/// Inputs of one differential job.
struct TrainingPair {
  std::string id;
  PromptSpec prompt;
  ImageBuffer before, after;
  std::optional<std::size_t> rank;  // per-pair override
};

struct JobResult {
  std::string pair_id;
  std::optional<LoraParams> lora;  // phi_2, present iff success
  double stage1_initial_loss = 0.0, stage1_final_loss = 0.0;
  double stage2_initial_loss = 0.0, stage2_final_loss = 0.0;
  double wall_seconds = 0.0;
  bool success = false;
  std::string error;

  /// Summary line for jobs.jsonl (no tensors).
  nlohmann::json summary() const;
};

/// 64-bit FNV-1a.
std::uint64_t fnv1a64(std::string_view text);
/// Job seed: hash of the pair id mixed with the config seed.
std::uint64_t job_seed(std::string_view pair_id, std::uint64_t base_seed);

/// phi_1 = fit(theta, X); phi_2 = fit(theta (+) phi_1, X') from a fresh
/// init; phi_1 is dropped. Errors carry a "stage 1"/"stage 2" tag.
JobResult differential_lora(const DenoiserParams& theta, const TrainingPair& pair, const NoiseSchedule& schedule,
                            const FitConfig& config);

/// Ablation: a single fit on X' straight from theta.
JobResult naive_lora(const DenoiserParams& theta, const TrainingPair& pair, const NoiseSchedule& schedule,
                     const FitConfig& config);

enum class TrainingMode { kDifferential, kNaive };

/// Runs one job per pair on up to `parallelism` threads. Results are sorted
/// by pair id and do not depend on the thread count. Failed jobs are kept
/// with success=false. ContractError on an empty list or an invalid config;
/// FatalError when every job fails.
std::vector<JobResult> run_jobs(const DenoiserParams& theta, const std::vector<TrainingPair>& pairs,
                                const NoiseSchedule& schedule, const FitConfig& config, std::size_t parallelism,
                                TrainingMode mode = TrainingMode::kDifferential);

/// concat-scale of the successful phi_2 with scale alpha / J.
LoraParams build_update(const std::vector<JobResult>& results, double alpha, std::size_t iteration);

}  // namespace artaug
