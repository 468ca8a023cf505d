#include "artaug/differential.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <random>
#include <thread>

#include <spdlog/spdlog.h>

#include "artaug/error.hpp"

namespace artaug {

namespace {

Tensor gaussian_like(const Tensor& like, std::mt19937_64& rng) {
  Tensor t(like.shape());
  std::normal_distribution<float> dist(0.0f, 1.0f);
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

LossBatch draw(const NoiseSchedule& schedule, const PromptSpec& prompt, const Tensor& h, std::size_t n,
               std::mt19937_64& rng) {
  std::vector<PromptSpec> prompts(n, prompt);
  std::vector<Tensor> hs(n, h), eps;
  std::vector<double> t;
  for (std::size_t i = 0; i < n; ++i) {
    t.push_back(schedule.sample_timestep(rng));
    eps.push_back(gaussian_like(h, rng));
  }
  return make_loss_batch(schedule, prompts, hs, eps, t);
}

double probe_loss(const DenoiserParams& theta, const LoraParams* lora, const LossBatch& probe) {
  Tape tape;
  const DenoiserVars pv = bind_denoiser(tape, theta, false);
  LoraVars lv;
  if (lora) lv = bind_lora(tape, *lora, false);
  return tape.value(batch_loss(tape, pv, lora ? &lv : nullptr, probe)).item();
}

constexpr std::uint64_t kStage1Salt = 0x51a9e1ULL;
constexpr std::uint64_t kStage2Salt = 0x51a9e2ULL;

FitConfig with_rank(FitConfig config, const TrainingPair& pair, std::uint64_t salt) {
  if (pair.rank) config.rank = *pair.rank;
  config.seed = job_seed(pair.id, config.seed) ^ salt;
  return config;
}

}  // namespace

void FitConfig::validate() const {
  if (steps == 0) throw ContractError("fit steps must be >= 1");
  if (batch_size == 0) throw ContractError("fit batch size must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ContractError("fit learning rate must be > 0");
  if (!allow_any_rank && rank != 4 && rank != 8 && rank != 16) {
    throw ContractError("lora rank " + std::to_string(rank) + " is not one of 4, 8, 16 (set allow_any_rank)");
  }
}

nlohmann::json FitConfig::to_json() const {
  return {{"steps", steps},           {"learning_rate", learning_rate}, {"batch_size", batch_size},
          {"rank", rank},             {"allow_any_rank", allow_any_rank}, {"seed", seed},
          {"probe_count", probe_count}};
}

FitConfig FitConfig::from_json(const nlohmann::json& j) {
  FitConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "steps") c.steps = value.get<std::size_t>();
    else if (key == "learning_rate") c.learning_rate = value.get<double>();
    else if (key == "batch_size") c.batch_size = value.get<std::size_t>();
    else if (key == "rank") c.rank = value.get<std::size_t>();
    else if (key == "allow_any_rank") c.allow_any_rank = value.get<bool>();
    else if (key == "seed") c.seed = value.get<std::uint64_t>();
    else if (key == "probe_count") c.probe_count = value.get<std::size_t>();
    else throw ContractError("unknown fit config key \"" + key + "\"");
  }
  return c;
}

FitResult fit_single_image(const DenoiserParams& theta, const PromptSpec& prompt, const ImageBuffer& image,
                           const NoiseSchedule& schedule, const FitConfig& config) {
  if (image.height() != theta.config.height || image.width() != theta.config.width) {
    throw ShapeError("fit_single_image: image " + std::to_string(image.height()) + "x" +
                     std::to_string(image.width()) + " does not match the model");
  }
  const Tensor h = to_model_space(image);
  std::mt19937_64 probe_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
  const LossBatch probe = draw(schedule, prompt, h, std::max<std::size_t>(config.probe_count, 1), probe_rng);

  FitResult result;
  result.lora = lora_init(theta.layer_dims(), config.rank, config.seed);
  result.initial_loss = probe_loss(theta, nullptr, probe);

  std::vector<Tensor*> params = result.lora.mutable_tensors();
  OptimizerState opt = OptimizerState::for_params(params, config.learning_rate);
  std::mt19937_64 rng(config.seed);
  for (std::size_t step = 0; step < config.steps; ++step) {
    const LossBatch batch = draw(schedule, prompt, h, config.batch_size, rng);
    Tape tape;
    const DenoiserVars pv = bind_denoiser(tape, theta, false);
    const LoraVars lv = bind_lora(tape, result.lora, true);
    const Var loss = batch_loss(tape, pv, &lv, batch);
    if (!std::isfinite(tape.value(loss).item())) {
      throw NumericalError("fit_single_image: loss is not finite at step " + std::to_string(step));
    }
    const GradientMap grads = tape.backward(loss);
    std::vector<Tensor> g;
    for (std::size_t i = 0; i < lv.a.size(); ++i) {
      g.push_back(grads.get(lv.a[i]));
      g.push_back(grads.get(lv.b[i]));
    }
    adam_step(opt, params, g);
  }
  result.final_loss = probe_loss(theta, &result.lora, probe);
  return result;
}

nlohmann::json JobResult::summary() const {
  nlohmann::json j = {{"pair_id", pair_id},
                      {"success", success},
                      {"stage1_initial_loss", stage1_initial_loss},
                      {"stage1_final_loss", stage1_final_loss},
                      {"stage2_initial_loss", stage2_initial_loss},
                      {"stage2_final_loss", stage2_final_loss},
                      {"wall_seconds", wall_seconds}};
  if (lora) j["rank"] = lora->rank;
  if (!error.empty()) j["error"] = error;
  return j;
}

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t job_seed(std::string_view pair_id, std::uint64_t base_seed) {
  return fnv1a64(pair_id) ^ (base_seed * 0x9e3779b97f4a7c15ULL);
}

JobResult differential_lora(const DenoiserParams& theta, const TrainingPair& pair, const NoiseSchedule& schedule,
                            const FitConfig& config) {
  JobResult r;
  r.pair_id = pair.id;
  FitResult stage1, stage2;
  const FitConfig c1 = with_rank(config, pair, kStage1Salt);
  c1.validate();
  try {
    stage1 = fit_single_image(theta, pair.prompt, pair.before, schedule, c1);
  } catch (const Error& e) {
    throw Error(e.code(), std::string("stage 1: ") + e.what());
  }
  r.stage1_initial_loss = stage1.initial_loss;
  r.stage1_final_loss = stage1.final_loss;
  const DenoiserParams theta1 = lora_apply(theta, stage1.lora);
  try {
    stage2 = fit_single_image(theta1, pair.prompt, pair.after, schedule, with_rank(config, pair, kStage2Salt));
  } catch (const Error& e) {
    throw Error(e.code(), std::string("stage 2: ") + e.what());
  }
  r.stage2_initial_loss = stage2.initial_loss;
  r.stage2_final_loss = stage2.final_loss;
  stage2.lora.metadata["pair_id"] = pair.id;
  r.lora = std::move(stage2.lora);
  r.success = true;
  return r;
}

JobResult naive_lora(const DenoiserParams& theta, const TrainingPair& pair, const NoiseSchedule& schedule,
                     const FitConfig& config) {
  JobResult r;
  r.pair_id = pair.id;
  const FitConfig c = with_rank(config, pair, kStage2Salt);
  c.validate();
  FitResult fit = fit_single_image(theta, pair.prompt, pair.after, schedule, c);
  r.stage2_initial_loss = fit.initial_loss;
  r.stage2_final_loss = fit.final_loss;
  fit.lora.metadata["pair_id"] = pair.id;
  r.lora = std::move(fit.lora);
  r.success = true;
  return r;
}

std::vector<JobResult> run_jobs(const DenoiserParams& theta, const std::vector<TrainingPair>& pairs,
                                const NoiseSchedule& schedule, const FitConfig& config, std::size_t parallelism,
                                TrainingMode mode) {
  if (pairs.empty()) throw ContractError("run_jobs: no accepted pairs to train");
  config.validate();
  std::vector<JobResult> results(pairs.size());
  std::atomic<std::size_t> next{0};
  const auto worker = [&]() {
    for (std::size_t i = next++; i < pairs.size(); i = next++) {
      const auto start = std::chrono::steady_clock::now();
      try {
        results[i] = mode == TrainingMode::kDifferential ? differential_lora(theta, pairs[i], schedule, config)
                                                         : naive_lora(theta, pairs[i], schedule, config);
      } catch (const std::exception& e) {
        results[i] = JobResult{};
        results[i].pair_id = pairs[i].id;
        results[i].error = e.what();
        spdlog::error("training job for pair {} failed: {}", pairs[i].id, e.what());
      }
      results[i].wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
  };
  const std::size_t threads = std::clamp<std::size_t>(parallelism, 1, pairs.size());
  std::vector<std::jthread> pool;
  for (std::size_t i = 1; i < threads; ++i) pool.emplace_back(worker);
  worker();
  pool.clear();

  std::sort(results.begin(), results.end(), [](const JobResult& a, const JobResult& b) { return a.pair_id < b.pair_id; });
  if (std::none_of(results.begin(), results.end(), [](const JobResult& r) { return r.success; })) {
    throw FatalError("run_jobs: all " + std::to_string(results.size()) + " training jobs failed");
  }
  return results;
}

LoraParams build_update(const std::vector<JobResult>& results, double alpha, std::size_t iteration) {
  std::vector<LoraParams> loras;
  for (const auto& r : results) {
    if (r.success && r.lora) loras.push_back(*r.lora);
  }
  if (loras.empty()) throw ContractError("build_update: no successful training jobs");
  const double j = static_cast<double>(loras.size());
  LoraParams update = lora_concat_scale(loras, alpha / j);
  update.metadata = {{"iteration", iteration}, {"J", loras.size()}, {"alpha", alpha}};
  return update;
}

}  // namespace artaug
