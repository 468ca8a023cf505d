// Independent reference implementations used as test oracles.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "artaug/autodiff.hpp"
#include "artaug/diffusion.hpp"
#include "artaug/lora.hpp"

namespace oracle {

using artaug::Tensor;

/// float64 evaluation of batch_loss. `p` holds, in order, fc{i}.weight and
/// fc{i}.bias for every layer, the token table, the time table and, when
/// `with_lora`, lora a/b per layer.
inline double reference_loss(const std::vector<Tensor>& p, std::size_t layers, bool with_lora,
                             const artaug::LossBatch& b) {
  const std::size_t n = b.x.dim(0), d = b.x.dim(1);
  const Tensor& tok = p[2 * layers];
  const Tensor& tim = p[2 * layers + 1];
  const std::size_t hidden = tok.dim(1);
  // The embedding of the (constant) timesteps is an input here, taken from
  // the library so both sides differentiate the same function.
  const Tensor emb_all = artaug::sinusoidal_embedding(b.times.data(), tim.dim(0));
  double total = 0.0;
  for (std::size_t r = 0; r < n; ++r) {
    std::vector<double> emb(emb_all.data().begin() + r * tim.dim(0), emb_all.data().begin() + (r + 1) * tim.dim(0));
    std::vector<double> cond(hidden, 0.0);
    for (std::size_t j = 0; j < hidden; ++j) {
      for (std::size_t k = 0; k < tok.dim(0); ++k) cond[j] += double(b.tokens.at(r, k)) * tok.at(k, j);
      for (std::size_t k = 0; k < tim.dim(0); ++k) cond[j] += emb[k] * tim.at(k, j);
    }
    std::vector<double> z(d);
    for (std::size_t k = 0; k < d; ++k) z[k] = double(b.x.at(r, k)) * b.c_in.at(r, k);
    for (std::size_t i = 0; i < layers; ++i) {
      const Tensor& w = p[2 * i];
      const Tensor& bias = p[2 * i + 1];
      const std::size_t out = w.dim(1);
      std::vector<double> y(out);
      for (std::size_t o = 0; o < out; ++o) {
        double s = bias[o];
        for (std::size_t k = 0; k < z.size(); ++k) s += z[k] * w.at(k, o);
        y[o] = s;
      }
      if (with_lora) {
        const Tensor& a = p[2 * layers + 2 + 2 * i];
        const Tensor& bb = p[2 * layers + 3 + 2 * i];
        std::vector<double> u(a.dim(0), 0.0);
        for (std::size_t q = 0; q < u.size(); ++q) {
          for (std::size_t k = 0; k < z.size(); ++k) u[q] += z[k] * bb.at(k, q);
        }
        for (std::size_t o = 0; o < out; ++o) {
          for (std::size_t q = 0; q < u.size(); ++q) y[o] += u[q] * a.at(q, o);
        }
      }
      if (i + 1 < layers) {
        for (std::size_t o = 0; o < out; ++o) {
          const double pre = y[o] + cond[o];
          y[o] = pre / (1.0 + std::exp(-pre));
        }
        z = y;
      } else {
        for (std::size_t o = 0; o < out; ++o) {
          const double pred = double(b.x.at(r, o)) * b.c_skip.at(r, o) + y[o] * b.c_out.at(r, o);
          const double e = (pred - b.targets.at(r, o)) * b.weights.at(r, o);
          total += e * e;
        }
      }
    }
  }
  return total / double(n);
}

/// Random small denoiser + LoRA instance with a two-sample loss batch.
struct LossInstance {
  artaug::DenoiserParams theta;
  artaug::LoraParams lora;
  artaug::LossBatch batch;
  artaug::NoiseSchedule schedule;
};

inline LossInstance make_loss_instance(std::uint64_t seed, artaug::ScheduleMode mode = artaug::ScheduleMode::kFlow) {
  LossInstance inst;
  inst.schedule.mode = mode;
  const artaug::DenoiserConfig cfg{8, 8, 16, 2, 8};
  inst.theta = artaug::DenoiserParams::init(cfg, seed);
  inst.lora = artaug::lora_init(inst.theta.layer_dims(), 4, seed + 1000);
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> nd(0.0f, 0.3f);
  // Non-zero B so gradients flow through both factors.
  for (auto* t : inst.lora.mutable_tensors()) {
    for (auto& v : t->values()) v = nd(rng);
  }
  std::vector<artaug::PromptSpec> prompts;
  std::vector<Tensor> h, eps;
  std::vector<double> t;
  std::uniform_real_distribution<double> ut(0.05, 0.95);
  for (int i = 0; i < 2; ++i) {
    prompts.push_back(artaug::PromptSpec::from_index((seed * 7 + i) % artaug::kPromptCount));
    Tensor hi({1, cfg.pixels()}), ei({1, cfg.pixels()});
    for (auto& v : hi.values()) v = nd(rng);
    for (auto& v : ei.values()) v = 3.0f * nd(rng);
    h.push_back(hi);
    eps.push_back(ei);
    t.push_back(mode == artaug::ScheduleMode::kFlow ? ut(rng) : double(1 + rng() % inst.schedule.ddpm_steps));
  }
  inst.batch = artaug::make_loss_batch(inst.schedule, prompts, h, eps, t);
  return inst;
}

struct GradientCheck {
  /// max over tensors of ||analytic - numeric||_2 / ||numeric||_2
  double normwise = 0.0;
  /// max over coordinates of |analytic - numeric| / (|numeric| + 1e-8)
  double elementwise = 0.0;
};

/// Analytic (tape, f32) vs central differences of reference_loss (f64) over
/// every denoiser and LoRA coordinate. The f64 reference tolerates a small
/// step, so truncation error stays far below f32 rounding in the analytic
/// side.
inline GradientCheck full_gradient_check(std::uint64_t seed, double step = 1e-5,
                                         artaug::ScheduleMode mode = artaug::ScheduleMode::kFlow) {
  using namespace artaug;
  const LossInstance inst = make_loss_instance(seed, mode);
  const std::size_t layers = inst.theta.layers.size();

  Tape tape;
  const DenoiserVars pv = bind_denoiser(tape, inst.theta, true);
  const LoraVars lv = bind_lora(tape, inst.lora, true);
  const GradientMap g = tape.backward(batch_loss(tape, pv, &lv, inst.batch));

  std::vector<Tensor> params, analytic;
  for (std::size_t i = 0; i < layers; ++i) {
    params.push_back(inst.theta.layers[i].weight);
    params.push_back(inst.theta.layers[i].bias);
    analytic.push_back(g.get(pv.weight[i]));
    analytic.push_back(g.get(pv.bias[i]));
  }
  params.push_back(inst.theta.token_table);
  params.push_back(inst.theta.time_table);
  analytic.push_back(g.get(pv.token_table));
  analytic.push_back(g.get(pv.time_table));
  for (std::size_t i = 0; i < layers; ++i) {
    params.push_back(inst.lora.layers[i].a);
    params.push_back(inst.lora.layers[i].b);
    analytic.push_back(g.get(lv.a[i]));
    analytic.push_back(g.get(lv.b[i]));
  }

  GradientCheck out;
  for (std::size_t p = 0; p < params.size(); ++p) {
    double diff2 = 0.0, ref2 = 0.0;
    for (std::size_t i = 0; i < params[p].numel(); ++i) {
      const float original = params[p][i];
      params[p][i] = static_cast<float>(original + step);
      const double span_hi = double(params[p][i]) - original;
      const double hi = reference_loss(params, layers, true, inst.batch);
      params[p][i] = static_cast<float>(original - step);
      const double span_lo = original - double(params[p][i]);
      const double lo = reference_loss(params, layers, true, inst.batch);
      params[p][i] = original;
      const double numeric = (hi - lo) / (span_hi + span_lo);
      const double err = std::abs(double(analytic[p][i]) - numeric);
      out.elementwise = std::max(out.elementwise, err / (std::abs(numeric) + 1e-8));
      diff2 += err * err;
      ref2 += numeric * numeric;
    }
    if (ref2 > 0.0) out.normwise = std::max(out.normwise, std::sqrt(diff2 / ref2));
  }
  return out;
}

/// Per-pixel evaluation of (base + sum_i r_i m_i) / (1 + sum_i m_i).
inline std::vector<double> brute_force_partition(const Tensor& base, std::span<const Tensor> regions,
                                                 std::span<const Tensor> masks) {
  std::vector<double> out(base.numel());
  for (std::size_t p = 0; p < base.numel(); ++p) {
    double num = base[p];
    double den = 1.0;
    for (std::size_t i = 0; i < regions.size(); ++i) {
      num += double(regions[i][p]) * masks[i][p];
      den += masks[i][p];
    }
    out[p] = num / den;
  }
  return out;
}

}  // namespace oracle
