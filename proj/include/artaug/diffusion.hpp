#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <vector>

#include "artaug/autodiff.hpp"
#include "artaug/denoiser.hpp"
#include "artaug/image.hpp"
#include "artaug/lora.hpp"
#include "artaug/toy_world.hpp"

namespace artaug {

enum class ScheduleMode { kFlow, kDdpm };

std::string_view schedule_mode_name(ScheduleMode mode);
ScheduleMode parse_schedule_mode(std::string_view name);

/// Flow: h_t = (1 - sigma_t) h + sigma_t eps with sigma_t = t on t in [0,1].
/// DDPM: h_t = sqrt(1 - alpha_t) h + sqrt(alpha_t) eps, alpha_t being the noise
/// fraction at integer step t in [1, T], linear from alpha_start to alpha_end.
struct NoiseSchedule {
  ScheduleMode mode = ScheduleMode::kFlow;
  std::size_t ddpm_steps = 100;
  double alpha_start = 1e-3;
  double alpha_end = 0.995;

  struct Point {
    double level;   // sigma_t (flow) or alpha_t (ddpm)
    double weight;  // w_t
  };

  /// Throws ContractError when t is outside the mode's domain.
  Point eval(double t) const;
  /// Draw from the timestep distribution (uniform in both modes).
  double sample_timestep(std::mt19937_64& rng) const;
  /// Timestep as fed to the network, in [0,1].
  float network_time(double t) const;
};

/// Noisy state for either mode, exactly per the formulas above.
Tensor noisy_state(const NoiseSchedule& schedule, const Tensor& h, const Tensor& eps, double t);

/// Regression target of the denoiser: eps - h (flow) or eps (ddpm).
Tensor loss_target(const NoiseSchedule& schedule, const Tensor& h, const Tensor& eps);

/// Pixel [0,1] <-> model space [-1,1].
Tensor to_model_space(const ImageBuffer& image);
ImageBuffer from_model_space(const Tensor& h, std::size_t height, std::size_t width);

/// Tape bindings of the denoiser weights and an optional LoRA.
struct DenoiserVars {
  std::vector<Var> weight, bias;
  Var token_table, time_table;
};
struct LoraVars {
  std::vector<Var> a, b;
};

DenoiserVars bind_denoiser(Tape& tape, const DenoiserParams& params, bool requires_grad);
LoraVars bind_lora(Tape& tape, const LoraParams& lora, bool requires_grad);

/// Fixed per-timestep scalings around the MLP F:
///   eps_hat = c_skip * x + c_out * F(c_in * x)
/// chosen from the linear least-squares predictor of the target given x under
/// a per-pixel data spread of kDataStd. The spread is kept small so that at
/// moderate t the skip path carries little noise and F predicts the image.
struct Preconditioning {
  float c_in, c_skip, c_out;
};
inline constexpr double kDataStd = 0.08;
Preconditioning preconditioning(const NoiseSchedule& schedule, double t);

/// Tape inputs of one batch. c_* are [N, H*W] row-constant expansions.
struct ForwardInputs {
  Var x, tokens, times, c_in, c_skip, c_out;
};

/// Batched forward: x [N, H*W], tokens [N, 10], times [N] network times.
Var denoiser_forward(Tape& tape, const DenoiserVars& params, const LoraVars* lora, const ForwardInputs& inputs);

/// eps_hat_{theta (+) phi}(P, t, h_t). Output has the shape of h_t. Each call
/// counts as one denoiser evaluation on the calling thread.
Tensor denoise_predict(const DenoiserParams& params, const LoraParams* lora, const PromptSpec& prompt,
                       const NoiseSchedule& schedule, double t, const Tensor& h_t);

std::uint64_t denoiser_evaluations();
void reset_denoiser_evaluations();

/// Per-sample loss w_t * ||eps_hat - target||^2 (sum over pixels).
double training_loss(const DenoiserParams& params, const LoraParams* lora, const NoiseSchedule& schedule,
                     const PromptSpec& prompt, double t, const Tensor& h, const Tensor& eps);

/// Batch loss sum_i w_i ||eps_hat_i - target_i||^2 / N recorded on `tape`.
struct LossBatch {
  Tensor x;        // noisy states [N, D]
  Tensor tokens;   // [N, 10]
  Tensor times;    // [N]
  Tensor c_in, c_skip, c_out;  // [N, D]
  Tensor targets;  // [N, D]
  Tensor weights;  // sqrt(w_i) broadcast to [N, D]
};
LossBatch make_loss_batch(const NoiseSchedule& schedule, const std::vector<PromptSpec>& prompts,
                          const std::vector<Tensor>& h, const std::vector<Tensor>& eps, const std::vector<double>& t);
Var batch_loss(Tape& tape, const DenoiserVars& params, const LoraVars* lora, const LossBatch& batch);

struct BaseTrainConfig {
  std::size_t steps = 2000;
  std::size_t batch_size = 32;
  double learning_rate = 1e-3;
  std::uint64_t seed = 1;
  std::size_t validation_samples = 128;
  std::size_t log_every = 50;
};

struct LossLogEntry {
  std::size_t step;
  double loss;
};

struct BaseTrainResult {
  DenoiserParams params;
  double initial_validation_loss = 0.0;
  double final_validation_loss = 0.0;
  std::vector<LossLogEntry> log;
};

using TrainingExample = std::pair<PromptSpec, ImageBuffer>;

/// All 36 prompts x `per_prompt` jittered renders.
std::vector<TrainingExample> build_base_corpus(std::size_t per_prompt, std::uint64_t seed, std::size_t height,
                                               std::size_t width);

/// Trains a denoiser from scratch. ContractError on an empty dataset or fewer
/// than 36 distinct prompts; NumericalError (naming the step) on divergence.
BaseTrainResult train_base(const std::vector<TrainingExample>& dataset, const DenoiserConfig& model,
                           const NoiseSchedule& schedule, const BaseTrainConfig& config);

void write_loss_log(const std::filesystem::path& path, const std::vector<LossLogEntry>& log);

struct SamplerConfig {
  std::size_t steps = 50;
  std::uint64_t seed = 0;
};

/// eps_hat as a function of (t, h_t); lets callers substitute the prediction.
using Predictor = std::function<Tensor(double t, const Tensor& h_t)>;

/// Flow: Euler from pure noise at t=1 to t=0. DDPM: ancestral sampling over a
/// strided subset of the T steps. Noise draws depend only on the seed, never
/// on the predictor, so two predictors see identical noise. Output clamped.
ImageBuffer sample_with(const Predictor& predictor, const NoiseSchedule& schedule, const SamplerConfig& config,
                        std::size_t height, std::size_t width);

ImageBuffer sample(const DenoiserParams& params, const LoraParams* lora, const PromptSpec& prompt,
                   const NoiseSchedule& schedule, const SamplerConfig& config);

}  // namespace artaug
