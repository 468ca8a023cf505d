// Acceptance suite: one PASS/FAIL line per pipeline criterion.
//
// Exit status is 0 when every criterion passes or fails only where listed
// with --known-red. Known-red criteria still print FAIL. A full run writes
// the report to --report as well.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <optional>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "artaug/curation.hpp"
#include "artaug/differential.hpp"
#include "artaug/interaction.hpp"
#include "artaug/orchestrator.hpp"
#include "artaug/weights_io.hpp"
#include "fixtures.hpp"
#include "oracles.hpp"

using namespace artaug;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Criterion {
  std::string name;
  std::string title;
  std::function<Outcome()> run;
};

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double thread_cpu_seconds() {
  timespec ts{};
  ::clock_gettime(CLOCK_THREAD_CPUTIME_ID, &ts);
  return double(ts.tv_sec) + 1e-9 * double(ts.tv_nsec);
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

/// P(X >= k) for X ~ Binomial(n, 1/2).
double sign_test_p(int k, int n) {
  double p = 0.0;
  for (int i = k; i <= n; ++i) {
    p += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) - n * std::log(2.0));
  }
  return p;
}

/// Auto-kept interaction pairs from the trained base, scored on 8-bit images
/// like the loop does.
struct KeptPair {
  TrainingPair pair;
  std::uint64_t seed;
};

std::vector<KeptPair> kept_pairs(const DenoiserParams& theta, std::size_t count, std::uint64_t stream) {
  std::vector<KeptPair> out;
  const NoiseSchedule schedule;
  for (std::uint64_t i = 0; out.size() < count; ++i) {
    const PromptSpec p = sample_prompt(derive_seed(stream, 1, i));
    const std::uint64_t seed = derive_seed(stream, 2, i) & ~(1ULL << 63);
    const auto r = interactive_generate(theta, nullptr, p, seed, CriticBackend{}, schedule);
    PairRecord rec;
    rec.id = make_pair_id(seed);
    rec.refined_prompt = p;
    rec = score_pair(rec, quantize_8bit(r.before), quantize_8bit(r.after));
    if (auto_filter(rec).status != PairStatus::kReviewPending) continue;
    out.push_back({{rec.id, p, quantize_8bit(r.before), quantize_8bit(r.after), std::nullopt}, seed});
  }
  return out;
}

// ---------------------------------------------------------------------------

Outcome gradient() {
  const auto t0 = std::chrono::steady_clock::now();
  double normwise = 0.0, elementwise = 0.0;
  for (auto mode : {ScheduleMode::kFlow, ScheduleMode::kDdpm}) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
      const auto g = oracle::full_gradient_check(seed, 1e-5, mode);
      normwise = std::max(normwise, g.normwise);
      elementwise = std::max(elementwise, g.elementwise);
    }
  }
  const double secs = seconds_since(t0);
  return {normwise < 1e-3 && secs < 60.0,
          fmt("max normwise relative error %.2e over 100 seeds x {flow, ddpm} (gate 1e-3); max elementwise %.2e "
              "(reported only); %.0fs",
              normwise, elementwise, secs)};
}

Outcome partition() {
  std::mt19937_64 rng(1);
  std::normal_distribution<float> nd;
  double worst = 0.0;
  bool counts_ok = true;
  for (int seed = 0; seed < 100; ++seed) {
    const std::size_t n = rng() % 4;
    Tensor base({4, 4});
    for (auto& v : base.values()) v = nd(rng);
    std::vector<Tensor> regions, masks;
    for (std::size_t i = 0; i < n; ++i) {
      Tensor r({4, 4}), m({4, 4});
      for (auto& v : r.values()) v = nd(rng);
      for (auto& v : m.values()) v = float(rng() % 2);
      regions.push_back(r);
      masks.push_back(m);
    }
    const Tensor out = combine_partitioned(base, regions, masks);
    const auto ref = oracle::brute_force_partition(base, regions, masks);
    for (std::size_t p = 0; p < 16; ++p) worst = std::max(worst, std::fabs(out[p] - ref[p]));

    // The module path: one predictor call per prompt, combined the same way.
    std::vector<RegionSuggestion> suggestions(n);
    for (std::size_t i = 0; i < n; ++i) {
      suggestions[i].prompt = PromptSpec::from_index(i + 1);
      suggestions[i].mask = masks[i];
    }
    int calls = 0;
    const PromptSpec prompt = PromptSpec::from_index(0);
    const Tensor via = partitioned_predict(
        [&](const PromptSpec& p) {
          ++calls;
          return p == prompt ? base : regions[p.index() - 1];
        },
        prompt, suggestions);
    for (std::size_t p = 0; p < 16; ++p) worst = std::max(worst, std::fabs(via[p] - ref[p]));
    counts_ok = counts_ok && calls == int(n + 1);
  }
  return {worst <= 1e-6 && counts_ok,
          fmt("max |module - brute force| %.2e over 100 random 4x4 instances (gate 1e-6); n+1 predictor calls: %s",
              worst, counts_ok ? "yes" : "no")};
}

Outcome lora_algebra() {
  const DenoiserConfig cfg;
  const DenoiserParams theta = DenoiserParams::init(cfg, 3);
  std::mt19937_64 rng(4);
  std::normal_distribution<float> nd(0.0f, 0.05f);
  const auto random_lora = [&](std::size_t rank) {
    LoraParams phi = lora_init(theta.layer_dims(), rank, rng());
    for (auto& l : phi.layers) {
      for (auto& v : l.b.values()) v = nd(rng);
    }
    return phi;
  };
  const std::vector<LoraParams> loras = {random_lora(4), random_lora(8), random_lora(16)};

  double concat = 0.0;
  const double s = 0.3 / 3.0;
  const LoraParams merged = lora_concat_scale(loras, s);
  for (std::size_t i = 0; i < theta.layers.size(); ++i) {
    Tensor sum = Tensor::zeros_like(loras[0].delta(i));
    for (const auto& l : loras) sum = add(sum, l.delta(i));
    concat = std::max(concat, double(max_abs_diff(merged.delta(i), scale(sum, float(s)))));
  }

  const double round_trip = fixture::params_diff(lora_fuse(lora_fuse(theta, loras[1], 1.0), loras[1], -1.0), theta);

  LoraParams zero_b = loras[0];
  for (auto& l : zero_b.layers) l.b = Tensor::zeros_like(l.b);
  bool bit_exact = lora_fuse(theta, zero_b, 1.0) == theta;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const PromptSpec p = PromptSpec::from_index(seed * 7);
    const SamplerConfig sc{20, seed};
    const NoiseSchedule schedule;
    bit_exact = bit_exact && sample(theta, &zero_b, p, schedule, sc) == sample(theta, nullptr, p, schedule, sc);
  }

  DenoiserParams seq = theta;
  for (const auto& l : loras) seq = lora_fuse(seq, l, 1.0);
  const double sequential = fixture::params_diff(seq, lora_fuse(theta, lora_concat_scale(loras, 1.0), 1.0));

  return {concat <= 1e-6 && round_trip <= 1e-5 && bit_exact && sequential <= 1e-5,
          fmt("concat-scale %.1e (<=1e-6), fuse/unfuse %.1e (<=1e-5), B=0 sampling bit-exact: %s, sequential vs "
              "merged %.1e (<=1e-5)",
              concat, round_trip, bit_exact ? "yes" : "no", sequential)};
}

Outcome filter_table() {
  int agree = 0;
  for (int da = -1; da <= 1; ++da) {
    for (int dc = -1; dc <= 1; ++dc) {
      PairRecord r;
      r.id = "case";
      r.scores = PairScores{0.5, 0.5 + 0.1 * da, 0.5, 0.5 + 0.1 * dc, 0.0};
      const auto d = auto_filter(r);
      const bool keep = da > 0 && dc >= 0;
      const std::string reason = keep ? "" : (da <= 0 && dc < 0) ? "both" : da <= 0 ? "aesthetic_down" : "consistency_down";
      agree += (d.status == (keep ? PairStatus::kReviewPending : PairStatus::kAutoDropped)) && d.reason == reason;
    }
  }
  return {agree == 9, fmt("%d of 9 sign combinations match (keep iff aesthetic strictly up and consistency not down)",
                          agree)};
}

Outcome interaction() {
  const auto& theta = fixture::trained_base().params;
  const NoiseSchedule schedule;
  double before = 0.0, after = 0.0;
  int up = 0, down = 0;
  const auto t0 = std::chrono::steady_clock::now();
  for (std::uint64_t i = 0; i < 50; ++i) {
    const PromptSpec p = sample_prompt(derive_seed(101, 1, i));
    const auto r = interactive_generate(theta, nullptr, p, derive_seed(101, 2, i), CriticBackend{}, schedule);
    const double a = aesthetic_proxy(r.before), b = aesthetic_proxy(r.after);
    before += a / 50.0;
    after += b / 50.0;
    up += b > a;
    down += b < a;
  }
  const double p = sign_test_p(up, up + down);
  return {after - before > 0.0 && p < 0.05,
          fmt("mean aesthetic %.4f -> %.4f over 50 prompts/seeds; %d up, %d down, sign test p = %.2e (gate 0.05); "
              "%.0fs",
              before, after, up, down, p, seconds_since(t0))};
}

Outcome delta_capture() {
  const auto& theta = fixture::trained_base().params;
  const NoiseSchedule schedule;
  const auto t0 = std::chrono::steady_clock::now();
  const auto pairs = kept_pairs(theta, 16, 202);
  FitConfig fit;
  int closer = 0;
  for (const auto& k : pairs) {
    fit.seed = job_seed(k.pair.id, 6);
    const JobResult job = differential_lora(theta, k.pair, schedule, fit);
    const ImageBuffer y = sample(theta, &*job.lora, k.pair.prompt, schedule, {50, k.seed});
    closer += l2_distance(y, k.pair.after) < l2_distance(y, k.pair.before);
  }
  const double frac = double(closer) / double(pairs.size());
  return {frac >= 0.7, fmt("samples from theta (+) phi2 closer to X' than to X for %d of %zu accepted pairs (%.0f%%, "
                           "gate 70%%); %.0fs",
                           closer, pairs.size(), 100.0 * frac, seconds_since(t0))};
}

Outcome naive_vs_differential() {
  const auto& theta = fixture::trained_base().params;
  const NoiseSchedule schedule;
  const auto cases = held_out_cases(100, 0);
  const double alpha = RunConfig{}.alpha;
  const auto t0 = std::chrono::steady_clock::now();
  int wins = 0;
  std::string runs;
  for (std::uint64_t run = 0; run < 3; ++run) {
    std::vector<TrainingPair> pairs;
    for (auto& k : kept_pairs(theta, 16, run)) pairs.push_back(std::move(k.pair));
    FitConfig fit;
    fit.seed = derive_seed(run, 4);
    const auto diff = run_jobs(theta, pairs, schedule, fit, 1, TrainingMode::kDifferential);
    const auto naive = run_jobs(theta, pairs, schedule, fit, 1, TrainingMode::kNaive);
    const auto rd = evaluate(theta, lora_fuse(theta, build_update(diff, alpha, 1), 1.0), cases, schedule, 50);
    const auto rn = evaluate(theta, lora_fuse(theta, build_update(naive, alpha, 1), 1.0), cases, schedule, 50);
    const double drop_d = rd.consistency_a - rd.consistency_b, drop_n = rn.consistency_a - rn.consistency_b;
    wins += drop_n >= drop_d;
    runs += fmt("%s%+.4f/%+.4f", run ? ", " : "", drop_n, drop_d);
  }
  return {wins >= 2, fmt("naive drop >= differential drop in %d of 3 runs (need 2); consistency drop naive/differential "
                         "per run: %s (alpha %.2f, 16 pairs, 100 held-out cases); %.0fs",
                         wins, runs.c_str(), alpha, seconds_since(t0))};
}

struct LoopContext {
  std::optional<DenoiserParams> base, final_model;
};
LoopContext g_loop;

Outcome loop(const fs::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  const fs::path dir = work / "loop";
  fs::remove_all(dir);
  RunConfig c;
  c.auto_accept = true;
  c.max_iters = 3;
  c.seed = 0;
  init_run(dir, c);
  train_base_model(dir);
  RunState state = load_run_state(dir);
  std::string iters;
  for (int k = 0; k < 3; ++k) {
    const auto s = run_iteration(state);
    iters += fmt("%s%zu", k ? "/" : "", s.accepted);
  }
  const auto r = evaluate(state.base, state.theta, held_out_cases(100, c.seed), c.noise_schedule(), c.sampler_steps);
  g_loop.base = state.base;
  g_loop.final_model = state.theta;
  const double dcons = r.consistency_b - r.consistency_a;
  return {r.win_rate_b > 0.55 && dcons > -0.02,
          fmt("after 3 auto-accept iterations (accepted %s, alpha %.2f): win rate %.2f over 100 held-out cases (gate "
              "0.55), aesthetic %.4f -> %.4f, consistency change %+.4f (gate > -0.02); %.0fs",
              iters.c_str(), c.alpha, r.win_rate_b, r.aesthetic_a, r.aesthetic_b, dcons, seconds_since(t0))};
}

Outcome cost() {
  DenoiserParams base, fused;
  if (g_loop.final_model) {
    base = *g_loop.base;
    fused = *g_loop.final_model;
  } else {
    base = fixture::trained_base().params;
    const auto pairs = kept_pairs(base, 2, 404);
    std::vector<TrainingPair> tp;
    for (const auto& k : pairs) tp.push_back(k.pair);
    fused = lora_fuse(base, build_update(run_jobs(base, tp, NoiseSchedule{}, FitConfig{}, 1), 1.0, 1), 1.0);
  }
  const NoiseSchedule schedule;
  const auto cases = held_out_cases(100, 9);
  const DenoiserParams copy = base;
  // Thread CPU time, alternating order, best of 15 rounds: wall time on a
  // shared machine drifts by tens of percent. The copy of the base gives the
  // noise floor of the measurement.
  const auto time_model = [&](const DenoiserParams& m) {
    const double t0 = thread_cpu_seconds();
    for (const auto& c : cases) (void)sample(m, nullptr, c.prompt, schedule, {50, c.seed});
    return thread_cpu_seconds() - t0;
  };
  double tb = INFINITY, tf = INFINITY, tc = INFINITY;
  for (int round = 0; round < 15; ++round) {
    if (round % 2) {
      tf = std::min(tf, time_model(fused));
      tb = std::min(tb, time_model(base));
      tc = std::min(tc, time_model(copy));
    } else {
      tc = std::min(tc, time_model(copy));
      tb = std::min(tb, time_model(base));
      tf = std::min(tf, time_model(fused));
    }
  }
  const double ratio = tf / tb;

  bool counts_ok = true;
  std::size_t with_regions = 0, max_n = 0;
  for (std::uint64_t i = 0; i < 40; ++i) {
    const PromptSpec p = sample_prompt(i);
    reset_denoiser_evaluations();
    const auto r = interactive_generate(base, nullptr, p, 500 + i, CriticBackend{}, schedule, 50);
    const std::size_t n = r.suggestions.size();
    max_n = std::max(max_n, n);
    with_regions += n > 0;
    // 50 plain steps for X, then n+1 evaluations per step for X'. Without
    // suggestions X' is X and the second pass is skipped.
    counts_ok = counts_ok && denoiser_evaluations() == (n == 0 ? 50 : 50 + 50 * (n + 1));
  }
  counts_ok = counts_ok && with_regions > 0;
  return {std::fabs(ratio - 1.0) <= 0.05 && counts_ok,
          fmt("fused/base sampling CPU time %.3f (gate within 5%%; best of 15: %.3fs vs %.3fs for 100 samples; "
              "identical copy %.3f); "
              "interactive generation uses exactly n+1 evaluations per step: %s (40 prompts, %zu with regions, n "
              "up to %zu)",
              ratio, tf, tb, tc / tb, counts_ok ? "yes" : "no", with_regions, max_n)};
}

Outcome determinism(const fs::path& work) {
  const auto t0 = std::chrono::steady_clock::now();
  RunConfig c;
  c.base_steps = 300;
  c.corpus_per_prompt = 8;
  c.prompts_per_iteration = 24;
  c.sampler_steps = 25;
  c.fit.steps = 100;
  c.auto_accept = true;
  c.min_pairs = 1;
  c.max_iters = 2;
  c.eps_stop = 0.0;
  c.seed = 21;
  const auto full_run = [&](const fs::path& dir, std::size_t parallelism) {
    fs::remove_all(dir);
    RunConfig rc = c;
    rc.parallelism = parallelism;
    init_run(dir, rc);
    train_base_model(dir);
    RunState s = load_run_state(dir);
    run_loop(s);
    return s.completed();
  };
  const fs::path a = work / "det_a", b = work / "det_b", resumed = work / "det_resume", crashed = work / "det_crash";
  const std::size_t done = full_run(a, 1);
  full_run(b, 2);

  // Stop after iteration 1 and continue from disk in a fresh state.
  fs::remove_all(resumed);
  init_run(resumed, c);
  train_base_model(resumed);
  {
    RunState s = load_run_state(resumed);
    run_iteration(s);
  }
  {
    RunState s = load_run_state(resumed);
    run_loop(s);
  }

  // Crash inside the last iteration: its commit marker and outputs are lost
  // but the manifest already holds every update.
  fs::remove_all(crashed);
  fs::copy(a, crashed, fs::copy_options::recursive);
  const RunLayout lc{crashed};
  fs::remove(lc.model(done));
  fs::remove(lc.update(done));
  fs::remove(lc.stats(done));
  fs::remove_all(lc.loras(done));
  {
    RunState s = load_run_state(crashed);
    run_loop(s);
  }

  const RunLayout la{a};
  const auto same = [&](const fs::path& other) {
    const RunLayout lo{other};
    return read_bytes(la.manifest()) == read_bytes(lo.manifest()) && read_bytes(la.base()) == read_bytes(lo.base()) &&
           read_bytes(la.model(done)) == read_bytes(lo.model(done)) &&
           read_bytes(la.model(done)).size() > 0;
  };
  const bool repeat = same(b), resume = same(resumed), crash = same(crashed);
  return {done == 2 && repeat && resume && crash,
          fmt("%zu iterations; byte-identical manifest, base and final weights: repeated run (parallelism 1 vs 2) %s, "
              "resumed after iteration 1 %s, resumed after a crash inside iteration 2 %s; %.0fs",
              done, repeat ? "yes" : "no", resume ? "yes" : "no", crash ? "yes" : "no", seconds_since(t0))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria for the artaug pipeline"};
  std::vector<std::string> only, known_red;
  std::string work = (fs::temp_directory_path() / "artaug_acceptance").string();
  std::string report;
  app.add_option("--only", only, "Run only these criteria");
  app.add_option("--known-red", known_red, "Criteria whose failure does not fail the exit status");
  app.add_option("--work-dir", work, "Scratch directory for run directories");
  app.add_option("--report", report, "Also write the report lines to this file");
  CLI11_PARSE(app, argc, argv);
  spdlog::set_level(spdlog::level::warn);
  fs::create_directories(work);

  const std::vector<Criterion> criteria = {
      {"gradient", "gradient correctness", gradient},
      {"partition", "partitioned-denoise oracle", partition},
      {"lora_algebra", "LoRA algebra exactness", lora_algebra},
      {"filter", "filter truth table", filter_table},
      {"interaction", "interaction improves aesthetics", interaction},
      {"delta_capture", "differential training captures the delta", delta_capture},
      {"naive_vs_differential", "naive degrades consistency at least as much as differential", naive_vs_differential},
      {"loop", "end-to-end loop", [&] { return loop(work); }},
      {"cost", "cost neutrality", cost},
      {"determinism", "determinism and resume", [&] { return determinism(work); }},
  };
  const std::set<std::string> allowed(known_red.begin(), known_red.end());
  std::ofstream out_file;
  if (!report.empty()) out_file.open(report);
  bool ok = true;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.name) == only.end()) continue;
    Outcome v;
    try {
      v = c.run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const bool known = allowed.contains(c.name);
    if (!v.pass && !known) ok = false;
    const std::string line = std::string(v.pass ? "PASS" : "FAIL") + "  " + c.name + " (" + c.title +
                             "): " + v.detail + (!v.pass && known ? "  [known red]" : "");
    std::printf("%s\n", line.c_str());
    std::fflush(stdout);
    if (out_file) out_file << line << "\n";
  }
  fs::remove_all(work);
  return ok ? 0 : 1;
}
