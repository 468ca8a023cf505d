// Randomised properties over many seeds.

#include <cmath>
#include <functional>
#include <map>
#include <random>

#include "artaug/autodiff.hpp"
#include "artaug/curation.hpp"
#include "artaug/differential.hpp"
#include "artaug/diffusion.hpp"
#include "artaug/error.hpp"
#include "artaug/interaction.hpp"
#include "artaug/lora.hpp"
#include "artaug/weights_io.hpp"
#include "doctest.h"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace artaug;

namespace {

constexpr int kSeeds = 20;

Tensor random_tensor(Shape shape, std::mt19937_64& rng, float sd = 1.0f) {
  Tensor t(std::move(shape));
  std::normal_distribution<float> nd(0.0f, sd);
  for (auto& v : t.values()) v = nd(rng);
  return t;
}

std::size_t dim_in(std::mt19937_64& rng, std::size_t lo, std::size_t hi) {
  return std::uniform_int_distribution<std::size_t>(lo, hi)(rng);
}

/// Relative L2 error of the tape gradient of sum(out * w) against central
/// differences of a float64 reference of `out`. The realised f32 step is used.
struct Primitive {
  std::function<Var(Tape&, const std::vector<Var>&)> build;
  std::function<std::vector<double>(const std::vector<Tensor>&)> reference;
};

double primitive_gradient_error(const Primitive& prim, std::vector<Tensor> inputs, std::mt19937_64& rng) {
  Tape tape;
  std::vector<Var> vars;
  for (const auto& t : inputs) vars.push_back(tape.parameter(t));
  const Var out = prim.build(tape, vars);
  const Tensor weights = random_tensor(tape.value(out).shape(), rng);
  const GradientMap g = tape.backward(tape.sum(tape.mul(out, tape.constant(weights))));

  const auto objective = [&](const std::vector<Tensor>& p) {
    const auto o = prim.reference(p);
    double s = 0.0;
    for (std::size_t i = 0; i < o.size(); ++i) s += o[i] * weights[i];
    return s;
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const Tensor analytic = g.get(vars[k]);
    double diff2 = 0.0, ref2 = 0.0;
    for (std::size_t i = 0; i < inputs[k].numel(); ++i) {
      const float x = inputs[k][i];
      auto p = inputs;
      p[k][i] = x + 1e-3f;
      const float hi = p[k][i];
      const double fp = objective(p);
      p[k][i] = x - 1e-3f;
      const float lo = p[k][i];
      const double fm = objective(p);
      const double numeric = (fp - fm) / (double(hi) - double(lo));
      diff2 += (analytic[i] - numeric) * (analytic[i] - numeric);
      ref2 += numeric * numeric;
    }
    if (ref2 > 1e-20) worst = std::max(worst, std::sqrt(diff2 / ref2));
  }
  return worst;
}

double silu64(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace

TEST_CASE("every primitive's gradient matches central differences") {
  std::mt19937_64 rng(2024);
  for (int seed = 0; seed < kSeeds; ++seed) {
    const std::size_t r = dim_in(rng, 1, 4), c = dim_in(rng, 1, 5), k = dim_in(rng, 1, 4);
    CAPTURE(seed);

    const Primitive matmul{[](Tape& t, const std::vector<Var>& v) { return t.matmul(v[0], v[1]); },
                           [&](const std::vector<Tensor>& p) {
                             std::vector<double> o(r * c, 0.0);
                             for (std::size_t i = 0; i < r; ++i)
                               for (std::size_t j = 0; j < c; ++j)
                                 for (std::size_t q = 0; q < k; ++q) o[i * c + j] += double(p[0].at(i, q)) * p[1].at(q, j);
                             return o;
                           }};
    CHECK(primitive_gradient_error(matmul, {random_tensor({r, k}, rng), random_tensor({k, c}, rng)}, rng) < 1e-4);

    const auto elementwise = [&](std::function<Var(Tape&, Var, Var)> op, std::function<double(double, double)> f) {
      const Primitive p{[op](Tape& t, const std::vector<Var>& v) { return op(t, v[0], v[1]); },
                        [f](const std::vector<Tensor>& in) {
                          std::vector<double> o(in[0].numel());
                          for (std::size_t i = 0; i < o.size(); ++i) o[i] = f(in[0][i], in[1][i]);
                          return o;
                        }};
      return primitive_gradient_error(p, {random_tensor({r, c}, rng), random_tensor({r, c}, rng)}, rng);
    };
    CHECK(elementwise([](Tape& t, Var a, Var b) { return t.add(a, b); }, [](double a, double b) { return a + b; }) <
          1e-4);
    CHECK(elementwise([](Tape& t, Var a, Var b) { return t.sub(a, b); }, [](double a, double b) { return a - b; }) <
          1e-4);
    CHECK(elementwise([](Tape& t, Var a, Var b) { return t.mul(a, b); }, [](double a, double b) { return a * b; }) <
          1e-4);

    const Primitive silu{[](Tape& t, const std::vector<Var>& v) { return t.silu(v[0]); },
                         [](const std::vector<Tensor>& p) {
                           std::vector<double> o(p[0].numel());
                           for (std::size_t i = 0; i < o.size(); ++i) o[i] = silu64(p[0][i]);
                           return o;
                         }};
    CHECK(primitive_gradient_error(silu, {random_tensor({r, c}, rng, 2.0f)}, rng) < 1e-4);

    const Primitive broadcast{[r](Tape& t, const std::vector<Var>& v) { return t.broadcast_rows(v[0], r); },
                              [r](const std::vector<Tensor>& p) {
                                std::vector<double> o;
                                for (std::size_t i = 0; i < r; ++i)
                                  for (float x : p[0].values()) o.push_back(x);
                                return o;
                              }};
    CHECK(primitive_gradient_error(broadcast, {random_tensor({c}, rng)}, rng) < 1e-4);

    const auto reduction = [&](bool mean) {
      const Primitive p{[mean](Tape& t, const std::vector<Var>& v) { return mean ? t.mean(v[0]) : t.sum(v[0]); },
                        [mean](const std::vector<Tensor>& in) {
                          double s = 0.0;
                          for (float x : in[0].values()) s += x;
                          return std::vector<double>{mean ? s / double(in[0].numel()) : s};
                        }};
      return primitive_gradient_error(p, {random_tensor({r, c}, rng)}, rng);
    };
    CHECK(reduction(true) < 1e-4);
    CHECK(reduction(false) < 1e-4);

    const Primitive sq{[](Tape& t, const std::vector<Var>& v) { return t.squared_error(v[0], v[1]); },
                       [](const std::vector<Tensor>& p) {
                         double s = 0.0;
                         for (std::size_t i = 0; i < p[0].numel(); ++i) s += std::pow(double(p[0][i]) - p[1][i], 2);
                         return std::vector<double>{s};
                       }};
    CHECK(primitive_gradient_error(sq, {random_tensor({r, c}, rng), random_tensor({r, c}, rng)}, rng) < 1e-4);

    const Primitive concat{[](Tape& t, const std::vector<Var>& v) { return t.concat(v[0], v[1]); },
                           [r, c, k](const std::vector<Tensor>& p) {
                             std::vector<double> o;
                             for (std::size_t i = 0; i < r; ++i) {
                               for (std::size_t j = 0; j < c; ++j) o.push_back(p[0].at(i, j));
                               for (std::size_t j = 0; j < k; ++j) o.push_back(p[1].at(i, j));
                             }
                             return o;
                           }};
    CHECK(primitive_gradient_error(concat, {random_tensor({r, c}, rng), random_tensor({r, k}, rng)}, rng) < 1e-4);
  }
}

TEST_CASE("timestep embedding gradient matches a float64 derivative estimate") {
  std::mt19937_64 rng(7);
  std::uniform_real_distribution<float> ut(0.0f, 1.0f);
  for (int seed = 0; seed < kSeeds; ++seed) {
    const std::size_t dim = 2 * dim_in(rng, 1, 8), half = dim / 2, n = dim_in(rng, 1, 3);
    Tensor t({n});
    for (auto& v : t.values()) v = ut(rng);
    Tape tape;
    const Var tv = tape.parameter(t);
    const Var e = tape.timestep_embedding(tv, dim);
    const Tensor w = random_tensor({n, dim}, rng);
    const Tensor analytic = tape.backward(tape.sum(tape.mul(e, tape.constant(w)))).get(tv);
    // d/dt of sum_k w_k sin(t f_k) + w'_k cos(t f_k), at float64 with the f32 frequencies.
    double diff2 = 0.0, ref2 = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      const auto objective = [&](double ti) {
        double s = 0.0;
        for (std::size_t k = 0; k < half; ++k) {
          const double f = double(1000.0f * std::exp(-std::log(10000.0f) * float(k) / float(half)));
          s += w.at(i, k) * std::sin(ti * f) + w.at(i, half + k) * std::cos(ti * f);
        }
        return s;
      };
      const double h = 1e-7;
      const double numeric = (objective(t[i] + h) - objective(t[i] - h)) / (2 * h);
      diff2 += std::pow(analytic[i] - numeric, 2);
      ref2 += numeric * numeric;
    }
    CAPTURE(seed);
    CHECK(std::sqrt(diff2 / ref2) < 1e-3);
  }
}

TEST_CASE("lora algebra over random ranks and seeds") {
  std::mt19937_64 rng(99);
  const DenoiserConfig cfg{8, 8, 16, 2, 8};
  for (int seed = 0; seed < kSeeds; ++seed) {
    CAPTURE(seed);
    const auto theta = DenoiserParams::init(cfg, seed);
    const std::size_t j = dim_in(rng, 1, 4);
    std::vector<LoraParams> loras;
    for (std::size_t i = 0; i < j; ++i) {
      LoraParams phi = lora_init(theta.layer_dims(), std::size_t{1} << dim_in(rng, 0, 3), rng());
      for (auto& l : phi.layers) l.b = random_tensor(l.b.shape(), rng, 0.1f);
      loras.push_back(std::move(phi));
    }
    const double s = std::uniform_real_distribution<double>(-1.0, 1.0)(rng);
    const LoraParams merged = lora_concat_scale(loras, s);
    std::size_t rank = 0;
    for (const auto& l : loras) rank += l.rank;
    CHECK(merged.rank == rank);
    for (std::size_t layer = 0; layer < theta.layers.size(); ++layer) {
      Tensor expected = Tensor::zeros_like(loras[0].delta(layer));
      for (const auto& l : loras) expected = add(expected, l.delta(layer));
      CHECK(max_abs_diff(merged.delta(layer), scale(expected, float(s))) <= 1e-5f);
    }
    // Fusing the merged update equals fusing each in turn.
    DenoiserParams seq = theta;
    for (const auto& l : loras) seq = lora_fuse(seq, l, s);
    CHECK(fixture::params_diff(seq, lora_fuse(theta, merged, 1.0)) <= 1e-5);
    // Fusion is linear in alpha and zero alpha is the identity.
    CHECK(lora_fuse(theta, loras[0], 0.0) == theta);
    CHECK(fixture::params_diff(lora_fuse(theta, loras[0], s), lora_fuse(theta, lora_scaled(loras[0], s), 1.0)) <=
          1e-6);
  }
}

TEST_CASE("partition combine: brute-force agreement, identity and convexity") {
  std::mt19937_64 rng(5);
  for (int seed = 0; seed < 50; ++seed) {
    CAPTURE(seed);
    const std::size_t n = dim_in(rng, 0, 4), h = 8, w = 8;
    const Tensor base = random_tensor({1, h * w}, rng);
    std::vector<Tensor> regions, masks;
    for (std::size_t i = 0; i < n; ++i) {
      regions.push_back(random_tensor({1, h * w}, rng));
      const double x1 = dim_in(rng, 0, 6), y1 = dim_in(rng, 0, 6);
      masks.push_back(bbox_to_mask({x1, y1, x1 + dim_in(rng, 1, 8), y1 + dim_in(rng, 1, 8)}, h, w));
    }
    const Tensor out = combine_partitioned(base, regions, masks);
    const auto ref = oracle::brute_force_partition(base, regions, masks);
    for (std::size_t p = 0; p < h * w; ++p) {
      CHECK(out[p] == doctest::Approx(ref[p]).epsilon(1e-6));
      bool covered = false;
      float lo = base[p], hi = base[p];
      for (std::size_t i = 0; i < n; ++i) {
        if (masks[i][p] == 0.0f) continue;
        covered = true;
        lo = std::min(lo, regions[i][p]);
        hi = std::max(hi, regions[i][p]);
      }
      if (!covered) CHECK(out[p] == base[p]);
      CHECK(out[p] >= lo - 1e-6f);
      CHECK(out[p] <= hi + 1e-6f);
    }
    // Regions that agree with the base change nothing.
    const std::vector<Tensor> same(n, base);
    CHECK(max_abs_diff(combine_partitioned(base, same, masks), base) <= 1e-6f);
  }
}

TEST_CASE("weights files round trip bit-exactly") {
  fixture::TempDir dir("props_atw");
  std::mt19937_64 rng(3);
  for (int seed = 0; seed < kSeeds; ++seed) {
    CAPTURE(seed);
    const DenoiserConfig cfg{8 * dim_in(rng, 1, 2), 8 * dim_in(rng, 1, 2), dim_in(rng, 4, 24), dim_in(rng, 1, 3),
                             2 * dim_in(rng, 1, 6)};
    const auto theta = DenoiserParams::init(cfg, rng());
    save_denoiser(dir / "m.atw", theta);
    CHECK(load_denoiser(dir / "m.atw") == theta);
    LoraParams phi = lora_init(theta.layer_dims(), std::min<std::size_t>(4, cfg.hidden), rng());
    for (auto& l : phi.layers) l.b = random_tensor(l.b.shape(), rng);
    phi.metadata = {{"seed", seed}};
    save_lora(dir / "l.atw", phi);
    const auto back = load_lora(dir / "l.atw");
    CHECK(back.rank == phi.rank);
    CHECK(back.metadata == phi.metadata);
    REQUIRE(back.layers.size() == phi.layers.size());
    for (std::size_t i = 0; i < phi.layers.size(); ++i) {
      CHECK(back.layers[i].a == phi.layers[i].a);
      CHECK(back.layers[i].b == phi.layers[i].b);
    }
  }
}

TEST_CASE("sampler output stays in range and is deterministic per seed") {
  const DenoiserConfig cfg{8, 8, 16, 1, 8};
  for (auto mode : {ScheduleMode::kFlow, ScheduleMode::kDdpm}) {
    NoiseSchedule schedule;
    schedule.mode = mode;
    for (int seed = 0; seed < 30; ++seed) {
      const auto theta = DenoiserParams::init(cfg, seed);
      const PromptSpec p = PromptSpec::from_index(seed % kPromptCount);
      const auto img = sample(theta, nullptr, p, schedule, {6, std::uint64_t(seed)});
      CHECK(img.in_range());
      CHECK(img.height() == 8);
      CHECK(img == sample(theta, nullptr, p, schedule, {6, std::uint64_t(seed)}));
    }
  }
}

TEST_CASE("auto filter keeps exactly the improving, non-regressing pairs") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> level(0, 4);
  for (int i = 0; i < 500; ++i) {
    PairRecord r;
    r.id = make_pair_id(i);
    // Coarse levels make ties frequent.
    const double ab = level(rng) / 4.0, aa = level(rng) / 4.0, cb = level(rng) / 4.0, ca = level(rng) / 4.0;
    r.scores = PairScores{ab, aa, cb, ca, 0.0};
    const auto d = auto_filter(r);
    const bool keep = aa > ab && ca >= cb;
    CHECK((d.status == PairStatus::kReviewPending) == keep);
    CHECK(d.reason.empty() == keep);
  }
}

TEST_CASE("manifest view equals an in-memory model under random operations") {
  fixture::TempDir dir("props_manifest");
  Manifest m(dir / "manifest.jsonl");
  std::map<std::string, PairStatus> model;
  std::vector<std::string> order;
  std::mt19937_64 rng(8);
  for (int step = 0; step < 200; ++step) {
    if (order.empty() || rng() % 3 == 0) {
      PairRecord r;
      r.id = make_pair_id(rng());
      r.prompt = r.refined_prompt = PromptSpec::from_index(rng() % kPromptCount);
      m.append(r);
      model[r.id] = r.status;
      order.push_back(r.id);
      continue;
    }
    const auto& id = order[rng() % order.size()];
    const auto to = static_cast<PairStatus>(rng() % 6);
    if (transition_allowed(model[id], to)) {
      m.update_status(id, to);
      model[id] = to;
    } else {
      CHECK_THROWS_AS(m.update_status(id, to), TransitionError);
    }
  }
  const auto view = m.latest_view();
  REQUIRE(view.size() == order.size());
  for (std::size_t i = 0; i < view.size(); ++i) {
    CHECK(view[i].id == order[i]);
    CHECK(view[i].status == model[order[i]]);
  }
}

TEST_CASE("lora jobs do not depend on parallelism or on their neighbours") {
  const DenoiserConfig cfg{8, 8, 16, 1, 8};
  const auto theta = DenoiserParams::init(cfg, 1);
  std::vector<TrainingPair> pairs;
  for (int i = 0; i < 4; ++i) {
    TrainingPair p;
    p.id = "pair" + std::to_string(i);
    p.prompt = PromptSpec::from_index(i * 5);
    RenderOptions ro;
    ro.height = ro.width = 8;
    p.before = render_scene(p.prompt, i, ro);
    p.after = render_scene(p.prompt, 100 + i, ro);
    pairs.push_back(p);
  }
  FitConfig fit;
  fit.steps = 10;
  fit.probe_count = 4;
  fit.rank = 4;
  fit.seed = 42;
  const NoiseSchedule s;
  const auto serial = run_jobs(theta, pairs, s, fit, 1);
  const auto parallel = run_jobs(theta, pairs, s, fit, 4);
  const auto alone = run_jobs(theta, {pairs[2]}, s, fit, 1);
  REQUIRE(serial.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    REQUIRE(serial[i].success);
    REQUIRE(parallel[i].success);
    CHECK(lora_update_distance(*serial[i].lora, *parallel[i].lora) == 0.0f);
  }
  CHECK(lora_update_distance(*serial[2].lora, *alone[0].lora) == 0.0f);
}
