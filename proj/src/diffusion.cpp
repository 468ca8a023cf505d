#include "artaug/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "artaug/error.hpp"

namespace artaug {

namespace {

thread_local std::uint64_t g_evaluations = 0;

Tensor one_hot_rows(const std::vector<PromptSpec>& prompts) {
  Tensor t({prompts.size(), kPromptTokenSlots});
  for (std::size_t r = 0; r < prompts.size(); ++r) {
    const auto v = prompt_one_hot(prompts[r]);
    for (std::size_t c = 0; c < kPromptTokenSlots; ++c) t.at(r, c) = v[c];
  }
  return t;
}

Tensor gaussian_like(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<float> dist(0.0f, 1.0f);
  Tensor t({1, n});
  for (auto& v : t.values()) v = dist(rng);
  return t;
}

}  // namespace

std::string_view schedule_mode_name(ScheduleMode mode) { return mode == ScheduleMode::kFlow ? "flow" : "ddpm"; }

ScheduleMode parse_schedule_mode(std::string_view name) {
  if (name == "flow") return ScheduleMode::kFlow;
  if (name == "ddpm") return ScheduleMode::kDdpm;
  throw ContractError("unknown schedule mode \"" + std::string(name) + "\"");
}

NoiseSchedule::Point NoiseSchedule::eval(double t) const {
  if (mode == ScheduleMode::kFlow) {
    if (!(t >= 0.0 && t <= 1.0)) throw ContractError("flow timestep " + std::to_string(t) + " outside [0,1]");
    return {t, 1.0};
  }
  const auto steps = static_cast<double>(ddpm_steps);
  if (!(t >= 1.0 && t <= steps) || std::floor(t) != t) {
    throw ContractError("ddpm timestep " + std::to_string(t) + " outside {1.." + std::to_string(ddpm_steps) + "}");
  }
  const double frac = ddpm_steps == 1 ? 1.0 : (t - 1.0) / (steps - 1.0);
  return {alpha_start + (alpha_end - alpha_start) * frac, 1.0};
}

double NoiseSchedule::sample_timestep(std::mt19937_64& rng) const {
  if (mode == ScheduleMode::kFlow) return std::uniform_real_distribution<double>(0.0, 1.0)(rng);
  return static_cast<double>(std::uniform_int_distribution<std::size_t>(1, ddpm_steps)(rng));
}

float NoiseSchedule::network_time(double t) const {
  if (mode == ScheduleMode::kFlow) return static_cast<float>(t);
  return static_cast<float>(t / static_cast<double>(ddpm_steps));
}

Tensor noisy_state(const NoiseSchedule& schedule, const Tensor& h, const Tensor& eps, double t) {
  if (h.shape() != eps.shape()) {
    throw ShapeError("noisy_state: shapes " + shape_str(h.shape()) + " and " + shape_str(eps.shape()) + " differ");
  }
  const double level = schedule.eval(t).level;
  double ch, ce;
  if (schedule.mode == ScheduleMode::kFlow) {
    ch = 1.0 - level;
    ce = level;
  } else {
    ch = std::sqrt(1.0 - level);
    ce = std::sqrt(level);
  }
  Tensor out = h;
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = static_cast<float>(ch * h[i] + ce * eps[i]);
  return out;
}

Tensor loss_target(const NoiseSchedule& schedule, const Tensor& h, const Tensor& eps) {
  if (h.shape() != eps.shape()) {
    throw ShapeError("loss_target: shapes " + shape_str(h.shape()) + " and " + shape_str(eps.shape()) + " differ");
  }
  return schedule.mode == ScheduleMode::kFlow ? sub(eps, h) : eps;
}

Tensor to_model_space(const ImageBuffer& image) {
  Tensor t = image.to_tensor();
  for (auto& v : t.values()) v = 2.0f * v - 1.0f;
  return t;
}

ImageBuffer from_model_space(const Tensor& h, std::size_t height, std::size_t width) {
  ImageBuffer img = ImageBuffer::from_tensor(h, height, width);
  for (auto& v : img.pixels()) v = 0.5f * (v + 1.0f);
  img.clamp01();
  return img;
}

DenoiserVars bind_denoiser(Tape& tape, const DenoiserParams& params, bool requires_grad) {
  DenoiserVars v;
  for (const auto& l : params.layers) {
    v.weight.push_back(tape.leaf_ref(l.weight, requires_grad));
    v.bias.push_back(tape.leaf_ref(l.bias, requires_grad));
  }
  v.token_table = tape.leaf_ref(params.token_table, requires_grad);
  v.time_table = tape.leaf_ref(params.time_table, requires_grad);
  return v;
}

LoraVars bind_lora(Tape& tape, const LoraParams& lora, bool requires_grad) {
  LoraVars v;
  for (const auto& l : lora.layers) {
    v.a.push_back(tape.leaf_ref(l.a, requires_grad));
    v.b.push_back(tape.leaf_ref(l.b, requires_grad));
  }
  return v;
}

Preconditioning preconditioning(const NoiseSchedule& schedule, double t) {
  constexpr double kDataVar = kDataStd * kDataStd;
  const double level = schedule.eval(t).level;
  double x_var, cov, target_var;
  if (schedule.mode == ScheduleMode::kFlow) {
    x_var = (1.0 - level) * (1.0 - level) * kDataVar + level * level;
    cov = level - (1.0 - level) * kDataVar;
    target_var = 1.0 + kDataVar;
  } else {
    x_var = (1.0 - level) * kDataVar + level;
    cov = std::sqrt(level);
    target_var = 1.0;
  }
  const double skip = cov / x_var;
  return {static_cast<float>(1.0 / std::sqrt(x_var)), static_cast<float>(skip),
          static_cast<float>(std::sqrt(std::max(target_var - skip * cov, 1e-4)))};
}

Var denoiser_forward(Tape& tape, const DenoiserVars& params, const LoraVars* lora, const ForwardInputs& in) {
  const std::size_t n = tape.value(in.x).dim(0);
  const std::size_t time_dim = tape.value(params.time_table).dim(0);
  if (lora && (lora->a.size() != params.weight.size() || lora->b.size() != params.weight.size())) {
    throw ShapeError("denoiser_forward: lora covers " + std::to_string(lora->a.size()) + " layers, model has " +
                     std::to_string(params.weight.size()));
  }
  const Var cond = tape.add(tape.matmul(in.tokens, params.token_table),
                            tape.matmul(tape.timestep_embedding(in.times, time_dim), params.time_table));
  Var z = tape.mul(in.x, in.c_in);
  for (std::size_t i = 0; i < params.weight.size(); ++i) {
    Var y = tape.add(tape.matmul(z, params.weight[i]), tape.broadcast_rows(params.bias[i], n));
    if (lora) y = tape.add(y, tape.matmul(tape.matmul(z, lora->b[i]), lora->a[i]));
    if (i + 1 < params.weight.size()) {
      z = tape.silu(tape.add(y, cond));
    } else {
      z = tape.add(tape.mul(in.x, in.c_skip), tape.mul(y, in.c_out));
    }
  }
  return z;
}

Tensor denoise_predict(const DenoiserParams& params, const LoraParams* lora, const PromptSpec& prompt,
                       const NoiseSchedule& schedule, double t, const Tensor& h_t) {
  const std::size_t d = params.config.pixels();
  if (h_t.numel() != d) {
    throw ShapeError("denoise_predict: input " + shape_str(h_t.shape()) + " but model expects " + std::to_string(d) +
                     " pixels");
  }
  schedule.eval(t);
  ++g_evaluations;
  Tape tape;
  const DenoiserVars pv = bind_denoiser(tape, params, false);
  LoraVars lv;
  if (lora) lv = bind_lora(tape, *lora, false);
  const Preconditioning pc = preconditioning(schedule, t);
  ForwardInputs in;
  in.x = tape.constant(h_t.reshaped({1, d}));
  in.tokens = tape.constant(one_hot_rows({prompt}));
  in.times = tape.constant(Tensor({1}, std::vector<float>{schedule.network_time(t)}));
  in.c_in = tape.constant(Tensor({1, d}, pc.c_in));
  in.c_skip = tape.constant(Tensor({1, d}, pc.c_skip));
  in.c_out = tape.constant(Tensor({1, d}, pc.c_out));
  const Var out = denoiser_forward(tape, pv, lora ? &lv : nullptr, in);
  return tape.value(out).reshaped(h_t.shape());
}

std::uint64_t denoiser_evaluations() { return g_evaluations; }
void reset_denoiser_evaluations() { g_evaluations = 0; }

LossBatch make_loss_batch(const NoiseSchedule& schedule, const std::vector<PromptSpec>& prompts,
                          const std::vector<Tensor>& h, const std::vector<Tensor>& eps, const std::vector<double>& t) {
  const std::size_t n = prompts.size();
  if (n == 0 || h.size() != n || eps.size() != n || t.size() != n) throw ShapeError("make_loss_batch: ragged batch");
  const std::size_t d = h.front().numel();
  LossBatch b{Tensor({n, d}), one_hot_rows(prompts), Tensor({n}), Tensor({n, d}), Tensor({n, d}),
              Tensor({n, d}), Tensor({n, d}), Tensor({n, d})};
  for (std::size_t i = 0; i < n; ++i) {
    if (h[i].numel() != d || eps[i].numel() != d) throw ShapeError("make_loss_batch: sample sizes differ");
    const Tensor xt = noisy_state(schedule, h[i], eps[i], t[i]);
    const Tensor target = loss_target(schedule, h[i], eps[i]);
    const auto w = static_cast<float>(std::sqrt(schedule.eval(t[i]).weight));
    const Preconditioning pc = preconditioning(schedule, t[i]);
    b.times[i] = schedule.network_time(t[i]);
    for (std::size_t k = 0; k < d; ++k) {
      b.c_in.at(i, k) = pc.c_in;
      b.c_skip.at(i, k) = pc.c_skip;
      b.c_out.at(i, k) = pc.c_out;
      b.x.at(i, k) = xt[k];
      b.targets.at(i, k) = target[k];
      b.weights.at(i, k) = w;
    }
  }
  return b;
}

Var batch_loss(Tape& tape, const DenoiserVars& params, const LoraVars* lora, const LossBatch& batch) {
  ForwardInputs in;
  in.x = tape.leaf_ref(batch.x);
  in.tokens = tape.leaf_ref(batch.tokens);
  in.times = tape.leaf_ref(batch.times);
  in.c_in = tape.leaf_ref(batch.c_in);
  in.c_skip = tape.leaf_ref(batch.c_skip);
  in.c_out = tape.leaf_ref(batch.c_out);
  const Var target = tape.leaf_ref(batch.targets);
  const Var weights = tape.leaf_ref(batch.weights);
  const Var pred = denoiser_forward(tape, params, lora, in);
  const Var err = tape.squared_error(tape.mul(pred, weights), tape.mul(target, weights));
  const float inv_n = 1.0f / static_cast<float>(batch.x.dim(0));
  return tape.mul(err, tape.constant(Tensor::scalar(inv_n)));
}

double training_loss(const DenoiserParams& params, const LoraParams* lora, const NoiseSchedule& schedule,
                     const PromptSpec& prompt, double t, const Tensor& h, const Tensor& eps) {
  if (!h.all_finite() || !eps.all_finite()) throw NumericalError("training_loss: non-finite input");
  const LossBatch batch = make_loss_batch(schedule, {prompt}, {h}, {eps}, {t});
  Tape tape;
  const DenoiserVars pv = bind_denoiser(tape, params, false);
  LoraVars lv;
  if (lora) lv = bind_lora(tape, *lora, false);
  const double loss = tape.value(batch_loss(tape, pv, lora ? &lv : nullptr, batch)).item();
  if (!std::isfinite(loss)) throw NumericalError("training_loss: loss is not finite");
  return loss;
}

std::vector<TrainingExample> build_base_corpus(std::size_t per_prompt, std::uint64_t seed, std::size_t height,
                                               std::size_t width) {
  std::vector<TrainingExample> out;
  std::mt19937_64 rng(seed);
  for (std::size_t p = 0; p < kPromptCount; ++p) {
    const PromptSpec prompt = PromptSpec::from_index(p);
    for (std::size_t k = 0; k < per_prompt; ++k) {
      out.emplace_back(prompt, render_scene(prompt, rng(), RenderOptions{height, width, true}));
    }
  }
  return out;
}

BaseTrainResult train_base(const std::vector<TrainingExample>& dataset, const DenoiserConfig& model,
                           const NoiseSchedule& schedule, const BaseTrainConfig& config) {
  if (dataset.empty()) throw ContractError("train_base: empty dataset");
  std::set<std::size_t> distinct;
  for (const auto& [p, img] : dataset) {
    if (img.height() != model.height || img.width() != model.width) {
      throw ShapeError("train_base: image " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                       " does not match model " + std::to_string(model.height) + "x" + std::to_string(model.width));
    }
    distinct.insert(p.index());
  }
  if (distinct.size() < kPromptCount) {
    throw ContractError("train_base: dataset covers " + std::to_string(distinct.size()) + " of 36 prompts");
  }
  if (config.batch_size == 0) throw ContractError("train_base: batch size must be >= 1");

  // Every tenth example is held out for validation.
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t i = 0; i < dataset.size(); ++i) (i % 10 == 9 ? val_idx : train_idx).push_back(i);
  if (val_idx.empty()) val_idx.push_back(dataset.size() - 1);

  std::vector<Tensor> model_space;
  model_space.reserve(dataset.size());
  for (const auto& ex : dataset) model_space.push_back(to_model_space(ex.second));

  const auto draw_batch = [&](const std::vector<std::size_t>& pool, std::size_t n, std::mt19937_64& rng) {
    std::vector<PromptSpec> prompts;
    std::vector<Tensor> h, eps;
    std::vector<double> t;
    std::uniform_int_distribution<std::size_t> pick(0, pool.size() - 1);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t idx = pool[pick(rng)];
      prompts.push_back(dataset[idx].first);
      h.push_back(model_space[idx]);
      t.push_back(schedule.sample_timestep(rng));
      eps.push_back(gaussian_like(model.pixels(), rng));
    }
    return make_loss_batch(schedule, prompts, h, eps, t);
  };

  std::mt19937_64 val_rng(config.seed ^ 0x5eedf00dULL);
  const LossBatch validation = draw_batch(val_idx, std::max<std::size_t>(config.validation_samples, 1), val_rng);

  BaseTrainResult result{DenoiserParams::init(model, config.seed), 0.0, 0.0, {}};
  const auto validation_loss = [&]() {
    Tape tape;
    const DenoiserVars pv = bind_denoiser(tape, result.params, false);
    return double(tape.value(batch_loss(tape, pv, nullptr, validation)).item());
  };
  result.initial_validation_loss = validation_loss();

  std::vector<Tensor*> params = result.params.mutable_tensors();
  OptimizerState opt = OptimizerState::for_params(params, config.learning_rate);
  std::mt19937_64 rng(config.seed);
  for (std::size_t step = 0; step < config.steps; ++step) {
    const LossBatch batch = draw_batch(train_idx, config.batch_size, rng);
    Tape tape;
    const DenoiserVars pv = bind_denoiser(tape, result.params, true);
    const Var loss = batch_loss(tape, pv, nullptr, batch);
    const double value = tape.value(loss).item();
    if (!std::isfinite(value)) throw NumericalError("train_base: loss diverged at step " + std::to_string(step));
    const GradientMap grads = tape.backward(loss);
    std::vector<Tensor> g;
    for (std::size_t i = 0; i < pv.weight.size(); ++i) {
      g.push_back(grads.get(pv.weight[i]));
      g.push_back(grads.get(pv.bias[i]));
    }
    g.push_back(grads.get(pv.token_table));
    g.push_back(grads.get(pv.time_table));
    // Cosine decay to zero over the run.
    opt.learning_rate = config.learning_rate * 0.5 *
                        (1.0 + std::cos(3.14159265358979323846 * double(step) / double(config.steps)));
    try {
      adam_step(opt, params, g);
    } catch (const NumericalError& e) {
      throw NumericalError("train_base: step " + std::to_string(step) + ": " + e.what());
    }
    if (step % config.log_every == 0 || step + 1 == config.steps) result.log.push_back({step, value});
  }
  result.final_validation_loss = validation_loss();
  return result;
}

void write_loss_log(const std::filesystem::path& path, const std::vector<LossLogEntry>& log) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  for (const auto& e : log) out << nlohmann::json{{"step", e.step}, {"loss", e.loss}}.dump() << '\n';
}

ImageBuffer sample_with(const Predictor& predictor, const NoiseSchedule& schedule, const SamplerConfig& config,
                        std::size_t height, std::size_t width) {
  if (config.steps == 0) throw ContractError("sampler needs at least one step");
  std::mt19937_64 rng(config.seed);
  const std::size_t d = height * width;
  Tensor h = gaussian_like(d, rng);

  if (schedule.mode == ScheduleMode::kFlow) {
    const auto steps = static_cast<double>(config.steps);
    for (std::size_t k = config.steps; k >= 1; --k) {
      const double t = static_cast<double>(k) / steps;
      const double t_next = static_cast<double>(k - 1) / steps;
      const Tensor v = predictor(t, h);
      const auto dt = static_cast<float>(t - t_next);
      for (std::size_t i = 0; i < d; ++i) h[i] -= dt * v[i];
    }
    return from_model_space(h, height, width);
  }

  // DDPM ancestral sampling; alpha_bar = 1 - alpha_t (printed forward formula).
  const std::size_t total = schedule.ddpm_steps;
  const std::size_t steps = std::min(config.steps, total);
  std::vector<std::size_t> taus;
  for (std::size_t k = steps; k >= 1; --k) {
    taus.push_back(std::max<std::size_t>(1, (total * k + steps / 2) / steps));
  }
  taus.erase(std::unique(taus.begin(), taus.end()), taus.end());
  std::normal_distribution<float> normal(0.0f, 1.0f);
  for (std::size_t k = 0; k < taus.size(); ++k) {
    const double tau = static_cast<double>(taus[k]);
    const double abar = 1.0 - schedule.eval(tau).level;
    const double abar_prev = k + 1 < taus.size() ? 1.0 - schedule.eval(double(taus[k + 1])).level : 1.0;
    const double beta = std::clamp(1.0 - abar / abar_prev, 1e-8, 0.999);
    const Tensor e = predictor(tau, h);
    const double c0 = std::sqrt(abar_prev) * beta / (1.0 - abar);
    const double ct = std::sqrt(1.0 - beta) * (1.0 - abar_prev) / (1.0 - abar);
    const double var = beta * (1.0 - abar_prev) / (1.0 - abar);
    const bool last = k + 1 == taus.size();
    for (std::size_t i = 0; i < d; ++i) {
      const double x0 = std::clamp((h[i] - std::sqrt(1.0 - abar) * e[i]) / std::sqrt(abar), -1.0, 1.0);
      const double z = last ? 0.0 : normal(rng);
      h[i] = static_cast<float>(c0 * x0 + ct * h[i] + std::sqrt(var) * z);
    }
  }
  return from_model_space(h, height, width);
}

ImageBuffer sample(const DenoiserParams& params, const LoraParams* lora, const PromptSpec& prompt,
                   const NoiseSchedule& schedule, const SamplerConfig& config) {
  const Predictor predictor = [&](double t, const Tensor& h_t) {
    return denoise_predict(params, lora, prompt, schedule, t, h_t);
  };
  return sample_with(predictor, schedule, config, params.config.height, params.config.width);
}

}  // namespace artaug
