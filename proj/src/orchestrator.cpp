#include "artaug/orchestrator.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <unistd.h>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <set>
#include <sstream>
#include <thread>

#include <spdlog/spdlog.h>

#include "artaug/error.hpp"
#include "artaug/weights_io.hpp"

namespace artaug {

namespace fs = std::filesystem;

namespace {

// Salts separating the seed streams derived from the master seed.
constexpr std::uint64_t kPromptSalt = 1;
constexpr std::uint64_t kGenerationSalt = 2;
constexpr std::uint64_t kPairIdSalt = 3;
constexpr std::uint64_t kFitSalt = 4;
constexpr std::uint64_t kCorpusSalt = 5;
constexpr std::uint64_t kBaseSalt = 6;
constexpr std::uint64_t kEvalSalt = 7;
constexpr std::uint64_t kCriticSalt = 8;

// Generation seeds keep the top bit clear, evaluation seeds set it.
constexpr std::uint64_t kHeldOutBit = 1ULL << 63;

constexpr double kWeightTolerance = 1e-5;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex failure_mutex;
  const auto worker = [&]() {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(failure_mutex);
        if (!failure) failure = std::current_exception();
        next = n;
      }
    }
  };
  std::vector<std::jthread> pool;
  for (std::size_t i = 1; i < std::clamp<std::size_t>(threads, 1, std::max<std::size_t>(n, 1)); ++i) {
    pool.emplace_back(worker);
  }
  worker();
  pool.clear();
  if (failure) std::rethrow_exception(failure);
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

nlohmann::json read_json_file(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": " + e.what(), 0);
  }
}

double max_abs_difference(const DenoiserParams& a, const DenoiserParams& b) {
  const auto ta = a.named_tensors();
  const auto tb = b.named_tensors();
  if (ta.size() != tb.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    const auto& va = ta[i].second->values();
    const auto& vb = tb[i].second->values();
    if (va.size() != vb.size()) return INFINITY;
    for (std::size_t j = 0; j < va.size(); ++j) {
      worst = std::max(worst, static_cast<double>(std::fabs(va[j] - vb[j])));
    }
  }
  return worst;
}

bool valid_rank(std::size_t rank) { return rank == 4 || rank == 8 || rank == 16; }

DenoiserConfig model_from_json(const nlohmann::json& j) {
  DenoiserConfig c;
  for (const auto& [key, value] : j.items()) {
    if (key == "height") c.height = value.get<std::size_t>();
    else if (key == "width") c.width = value.get<std::size_t>();
    else if (key == "hidden") c.hidden = value.get<std::size_t>();
    else if (key == "hidden_layers") c.hidden_layers = value.get<std::size_t>();
    else if (key == "time_dim") c.time_dim = value.get<std::size_t>();
    else throw ContractError("unknown model config key \"" + key + "\"");
  }
  return c;
}

void validate(const RunConfig& c) {
  if (c.model.height < ImageBuffer::kMinSide || c.model.width < ImageBuffer::kMinSide) {
    throw ContractError("image sides must be >= " + std::to_string(ImageBuffer::kMinSide));
  }
  if (c.model.hidden == 0 || c.model.hidden_layers == 0 || c.model.time_dim == 0) {
    throw ContractError("model sizes must be >= 1");
  }
  if (c.sampler_steps == 0) throw ContractError("sampler_steps must be >= 1");
  if (c.base_steps == 0 || c.base_batch_size == 0 || c.corpus_per_prompt == 0) {
    throw ContractError("base training sizes must be >= 1");
  }
  if (!(c.base_learning_rate > 0.0) || !std::isfinite(c.base_learning_rate)) {
    throw ContractError("base_learning_rate must be > 0");
  }
  if (c.prompts_per_iteration == 0) throw ContractError("prompts_per_iteration must be >= 1");
  c.fit.validate();
  for (const auto& [id, rank] : c.rank_overrides) {
    if (!c.fit.allow_any_rank && !valid_rank(rank)) {
      throw ContractError("rank override for " + id + " is not one of 4, 8, 16");
    }
  }
  if (!(c.alpha >= 0.0) || !std::isfinite(c.alpha)) throw ContractError("alpha must be finite and >= 0");
  if (!(c.eps_stop >= 0.0)) throw ContractError("eps_stop must be >= 0");
  if (c.max_iters == 0) throw ContractError("max_iters must be >= 1");
  if (c.review_timeout_seconds < 0.0 || !(c.review_poll_seconds > 0.0)) {
    throw ContractError("review timeout must be >= 0 and poll interval > 0");
  }
  if (c.parallelism == 0) throw ContractError("parallelism must be >= 1");
  if (c.eval_prompts == 0) throw ContractError("eval_prompts must be >= 1");
}

struct PromptDraw {
  PromptSpec prompt;
  std::uint64_t generation_seed;
  std::string id;
};

PromptDraw draw_prompt(const RunConfig& config, const std::vector<PromptSpec>& pool, std::size_t k, std::size_t i) {
  const std::uint64_t ps = derive_seed(config.seed, kPromptSalt, k, i);
  PromptDraw d;
  d.prompt = pool.empty() ? sample_prompt(ps) : pool[ps % pool.size()];
  d.generation_seed = derive_seed(config.seed, kGenerationSalt, k, i) & ~kHeldOutBit;
  d.id = make_pair_id(derive_seed(config.seed, kPairIdSalt, k, i));
  return d;
}

fs::path relative_to(const fs::path& path, const fs::path& root) { return fs::relative(path, root); }

// Generation for the indices without a manifest record. Results are appended
// in index order so the manifest does not depend on thread scheduling.
void generate_pairs(RunState& state, Manifest& manifest, std::size_t k) {
  const RunConfig& config = state.config;
  const RunLayout& layout = state.layout;
  const NoiseSchedule schedule = config.noise_schedule();
  std::vector<PromptSpec> pool;
  if (!config.prompt_file.empty()) {
    pool = load_prompt_file(config.prompt_file);
    if (pool.empty()) throw ContractError("prompt file " + config.prompt_file + " holds no prompts");
  }

  std::map<std::string, PairRecord> known;
  for (auto& r : manifest.latest_view()) known.emplace(r.id, std::move(r));

  std::vector<PromptDraw> draws;
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < config.prompts_per_iteration; ++i) {
    draws.push_back(draw_prompt(config, pool, k, i));
    if (!known.contains(draws.back().id)) todo.push_back(i);
  }
  if (!todo.empty()) {
    spdlog::info("iteration {}: generating {} of {} pairs", k, todo.size(), draws.size());
  }

  fs::create_directories(layout.pairs(k));
  std::vector<std::optional<PairRecord>> fresh(draws.size());
  parallel_for(todo.size(), config.parallelism, [&](std::size_t t) {
    const std::size_t i = todo[t];
    const PromptDraw& d = draws[i];
    PromptSpec refined = d.prompt;
    try {
      refined = refine_prompt(d.prompt, config.critic);
    } catch (const CriticUnavailable& e) {
      spdlog::warn("prompt refinement unavailable, keeping the original: {}", e.what());
    }
    CriticBackend critic = config.critic;
    const InteractionResult out =
        interactive_generate(state.theta, nullptr, refined, d.generation_seed, critic, schedule, config.sampler_steps);
    // Scores are computed on the stored 8-bit images so the manifest is
    // recomputable from disk.
    const ImageBuffer before = quantize_8bit(out.before);
    const ImageBuffer after = quantize_8bit(out.after);
    const fs::path before_path = layout.pairs(k) / (d.id + ".before.pgm");
    const fs::path after_path = layout.pairs(k) / (d.id + ".after.pgm");
    write_pgm(before_path, before);
    write_pgm(after_path, after);

    PairRecord r;
    r.id = d.id;
    r.iteration = k;
    r.prompt = d.prompt;
    r.refined_prompt = refined;
    r.seed = d.generation_seed;
    r.before_path = relative_to(before_path, layout.root).string();
    r.after_path = relative_to(after_path, layout.root).string();
    for (const auto& s : out.suggestions) r.suggestions.push_back(s.to_json());
    fresh[i] = score_pair(std::move(r), before, after);
  });

  for (std::size_t i = 0; i < draws.size(); ++i) {
    if (fresh[i]) {
      manifest.append(*fresh[i]);
      known.emplace(fresh[i]->id, *fresh[i]);
    }
    const PairRecord& r = known.at(draws[i].id);
    if (r.status == PairStatus::kPending) {
      const FilterDecision decision = auto_filter(r);
      manifest.update_status(r.id, decision.status, std::nullopt, decision.reason);
    }
  }
}

std::vector<PairRecord> records_of(const Manifest& manifest, std::size_t k) {
  std::vector<PairRecord> out;
  for (auto& r : manifest.latest_view()) {
    if (r.iteration == k) out.push_back(std::move(r));
  }
  return out;
}

std::size_t count_status(const std::vector<PairRecord>& records, PairStatus s) {
  return static_cast<std::size_t>(
      std::count_if(records.begin(), records.end(), [s](const PairRecord& r) { return r.status == s; }));
}

void review(const RunState& state, Manifest& manifest, std::size_t k) {
  const RunConfig& config = state.config;
  if (config.auto_accept) {
    for (const auto& r : records_of(manifest, k)) {
      if (r.status == PairStatus::kReviewPending) {
        manifest.update_status(r.id, PairStatus::kAccepted, Verdict{"auto", "auto-accept", std::nullopt});
      }
    }
    return;
  }
  const auto start = std::chrono::steady_clock::now();
  std::size_t last_reported = SIZE_MAX;
  for (;;) {
    const std::size_t pending = count_status(records_of(manifest, k), PairStatus::kReviewPending);
    if (pending == 0) return;
    if (pending != last_reported) {
      spdlog::info("iteration {}: waiting for {} pair(s) in review (serve the review API on {})", k, pending,
                   state.layout.root.string());
      last_reported = pending;
    }
    const double waited = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (config.review_timeout_seconds > 0.0 && waited >= config.review_timeout_seconds) {
      spdlog::warn("iteration {}: review timeout after {:.0f}s, {} pair(s) left undecided", k, waited, pending);
      return;
    }
    std::this_thread::sleep_for(std::chrono::duration<double>(config.review_poll_seconds));
  }
}

IterationStats stats_for(const Manifest& manifest, const RunConfig& config, std::size_t k, std::size_t j) {
  IterationStats s = fold_stats(manifest.latest_view(), k);
  s.prompts_sampled = config.prompts_per_iteration;
  s.alpha = config.alpha;
  s.lora_count = j;
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Config

nlohmann::json RunConfig::to_json() const {
  nlohmann::json overrides = nlohmann::json::object();
  for (const auto& [id, rank] : rank_overrides) overrides[id] = rank;
  return {{"model", model.to_json()},
          {"schedule", schedule_mode_name(schedule)},
          {"sampler_steps", sampler_steps},
          {"base_steps", base_steps},
          {"base_batch_size", base_batch_size},
          {"base_learning_rate", base_learning_rate},
          {"corpus_per_prompt", corpus_per_prompt},
          {"prompts_per_iteration", prompts_per_iteration},
          {"prompt_file", prompt_file},
          {"fit", fit.to_json()},
          {"rank_overrides", overrides},
          {"alpha", alpha},
          {"min_pairs", min_pairs},
          {"eps_stop", eps_stop},
          {"max_iters", max_iters},
          {"critic", critic.to_json()},
          {"auto_accept", auto_accept},
          {"review_timeout_seconds", review_timeout_seconds},
          {"review_poll_seconds", review_poll_seconds},
          {"parallelism", parallelism},
          {"seed", seed},
          {"eval_prompts", eval_prompts}};
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ContractError("run config must be a JSON object");
  RunConfig c;
  for (const auto& [key, value] : j.items()) {
    try {
      if (key == "model") c.model = model_from_json(value);
      else if (key == "schedule") c.schedule = parse_schedule_mode(value.get<std::string>());
      else if (key == "sampler_steps") c.sampler_steps = value.get<std::size_t>();
      else if (key == "base_steps") c.base_steps = value.get<std::size_t>();
      else if (key == "base_batch_size") c.base_batch_size = value.get<std::size_t>();
      else if (key == "base_learning_rate") c.base_learning_rate = value.get<double>();
      else if (key == "corpus_per_prompt") c.corpus_per_prompt = value.get<std::size_t>();
      else if (key == "prompts_per_iteration") c.prompts_per_iteration = value.get<std::size_t>();
      else if (key == "prompt_file") c.prompt_file = value.get<std::string>();
      else if (key == "fit") c.fit = FitConfig::from_json(value);
      else if (key == "rank_overrides") c.rank_overrides = value.get<std::map<std::string, std::size_t>>();
      else if (key == "alpha") c.alpha = value.get<double>();
      else if (key == "min_pairs") c.min_pairs = value.get<std::size_t>();
      else if (key == "eps_stop") c.eps_stop = value.get<double>();
      else if (key == "max_iters") c.max_iters = value.get<std::size_t>();
      else if (key == "critic") c.critic = CriticBackend::from_json(value);
      else if (key == "auto_accept") c.auto_accept = value.get<bool>();
      else if (key == "review_timeout_seconds") c.review_timeout_seconds = value.get<double>();
      else if (key == "review_poll_seconds") c.review_poll_seconds = value.get<double>();
      else if (key == "parallelism") c.parallelism = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "eval_prompts") c.eval_prompts = value.get<std::size_t>();
      else throw ContractError("unknown run config key \"" + key + "\"");
    } catch (const nlohmann::json::exception& e) {
      throw ContractError("run config key \"" + key + "\": " + e.what());
    }
  }
  validate(c);
  return c;
}

NoiseSchedule RunConfig::noise_schedule() const {
  NoiseSchedule s;
  s.mode = schedule;
  return s;
}

// ---------------------------------------------------------------------------
// Run directory

RunLock::RunLock(const fs::path& run_dir) {
  fs::create_directories(run_dir);
  const fs::path path = RunLayout{run_dir}.lock();
  fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_CLOEXEC, 0644);
  if (fd_ < 0) throw IoError("cannot open lock file " + path.string());
  if (::flock(fd_, LOCK_EX | LOCK_NB) != 0) {
    ::close(fd_);
    fd_ = -1;
    throw LockedError("run directory " + run_dir.string() + " is locked by another process");
  }
}

RunLock::~RunLock() {
  if (fd_ >= 0) {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
}

bool init_run(const fs::path& run_dir, const RunConfig& config) {
  validate(config);
  const RunLayout layout{run_dir};
  if (fs::exists(layout.config())) {
    if (RunConfig::from_json(read_json_file(layout.config())).to_json() == config.to_json()) return false;
    throw ContractError(layout.config().string() + " already exists with a different configuration");
  }
  fs::create_directories(run_dir);
  write_text_atomic(layout.config(), config.to_json().dump(2) + "\n");
  return true;
}

RunConfig load_run_config(const fs::path& run_dir) {
  return RunConfig::from_json(read_json_file(RunLayout{run_dir}.config()));
}

std::uint64_t derive_seed(std::uint64_t master, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return splitmix(splitmix(splitmix(splitmix(master) ^ a) ^ b) ^ c);
}

BaseModelReport train_base_model(const fs::path& run_dir) {
  const RunLayout layout{run_dir};
  const RunConfig config = load_run_config(run_dir);
  BaseModelReport report;
  if (fs::exists(layout.base()) && fs::exists(layout.base_metrics())) {
    const auto m = read_json_file(layout.base_metrics());
    report.initial_validation_loss = m.at("initial_validation_loss").get<double>();
    report.final_validation_loss = m.at("final_validation_loss").get<double>();
    report.mean_consistency = m.at("mean_consistency").get<double>();
    report.mean_aesthetic = m.at("mean_aesthetic").get<double>();
    report.already_done = true;
    return report;
  }

  const NoiseSchedule schedule = config.noise_schedule();
  const auto corpus = build_base_corpus(config.corpus_per_prompt, derive_seed(config.seed, kCorpusSalt),
                                        config.model.height, config.model.width);
  BaseTrainConfig tc;
  tc.steps = config.base_steps;
  tc.batch_size = config.base_batch_size;
  tc.learning_rate = config.base_learning_rate;
  tc.seed = derive_seed(config.seed, kBaseSalt);
  const BaseTrainResult trained = train_base(corpus, config.model, schedule, tc);
  write_loss_log(layout.train_log(), trained.log);

  // Baseline over the held-out grid, recorded for later comparison.
  const auto cases = held_out_cases(50, config.seed);
  std::vector<double> aes(cases.size()), cons(cases.size());
  parallel_for(cases.size(), config.parallelism, [&](std::size_t i) {
    const ImageBuffer img =
        sample(trained.params, nullptr, cases[i].prompt, schedule, {config.sampler_steps, cases[i].seed});
    aes[i] = aesthetic_proxy(img);
    cons[i] = consistency_proxy(img, cases[i].prompt);
  });
  report.initial_validation_loss = trained.initial_validation_loss;
  report.final_validation_loss = trained.final_validation_loss;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    report.mean_aesthetic += aes[i] / static_cast<double>(cases.size());
    report.mean_consistency += cons[i] / static_cast<double>(cases.size());
  }
  save_denoiser(layout.base(), trained.params);
  write_text_atomic(layout.base_metrics(), nlohmann::json{{"initial_validation_loss", report.initial_validation_loss},
                                                          {"final_validation_loss", report.final_validation_loss},
                                                          {"mean_consistency", report.mean_consistency},
                                                          {"mean_aesthetic", report.mean_aesthetic},
                                                          {"samples", cases.size()}}
                                                   .dump(2) +
                                               "\n");
  return report;
}

RunState load_run_state(const fs::path& run_dir) {
  RunState state;
  state.layout = RunLayout{run_dir};
  state.config = load_run_config(run_dir);
  if (!fs::exists(state.layout.base())) {
    throw ContractError("no base model in " + run_dir.string() + "; run train-base first");
  }
  state.base = load_denoiser(state.layout.base());
  if (!(state.base.config == state.config.model)) {
    throw IntegrityError("base.atw model shape differs from config.json");
  }
  state.theta = state.base;
  for (std::size_t k = 1; fs::exists(state.layout.model(k)); ++k) {
    LoraParams update = load_lora(state.layout.update(k));
    state.theta = lora_fuse(state.theta, update, 1.0);
    const DenoiserParams saved = load_denoiser(state.layout.model(k));
    const double diff = max_abs_difference(state.theta, saved);
    if (!(diff <= kWeightTolerance)) {
      throw IntegrityError("iteration " + std::to_string(k) + ": base fused with updates 1.." + std::to_string(k) +
                           " differs from model.atw by " + std::to_string(diff));
    }
    state.updates.push_back(std::move(update));
    state.history.push_back(IterationStats::from_json(read_json_file(state.layout.stats(k))));
  }
  return state;
}

// ---------------------------------------------------------------------------
// Iteration

IterationStats run_iteration(RunState& state) {
  const std::size_t k = state.completed() + 1;
  const RunConfig& config = state.config;
  const RunLayout& layout = state.layout;
  fs::create_directories(layout.iteration(k));
  Manifest manifest(layout.manifest());

  generate_pairs(state, manifest, k);
  review(state, manifest, k);

  std::vector<TrainingPair> pairs;
  for (const auto& r : records_of(manifest, k)) {
    if (r.status != PairStatus::kAccepted && r.status != PairStatus::kTrained) continue;
    TrainingPair p;
    p.id = r.id;
    p.prompt = r.refined_prompt;
    p.before = read_pgm(layout.root / r.before_path);
    p.after = read_pgm(layout.root / r.after_path);
    if (auto it = config.rank_overrides.find(r.id); it != config.rank_overrides.end()) p.rank = it->second;
    pairs.push_back(std::move(p));
  }
  if (pairs.empty()) {
    const IterationStats s = stats_for(manifest, config, k, 0);
    write_text_atomic(layout.stats(k), s.to_json().dump(2) + "\n");
    throw IterationStarved("iteration " + std::to_string(k) + ": no accepted pairs to train on");
  }
  spdlog::info("iteration {}: training {} differential lora(s)", k, pairs.size());

  FitConfig fit = config.fit;
  fit.seed = derive_seed(config.seed, kFitSalt, k);
  const auto results = run_jobs(state.theta, pairs, config.noise_schedule(), fit, config.parallelism);

  fs::create_directories(layout.loras(k));
  std::string jobs_log;
  std::size_t j = 0;
  for (const auto& r : results) {
    jobs_log += r.summary().dump() + "\n";
    if (r.success && r.lora) {
      save_lora(layout.loras(k) / (r.pair_id + ".atw"), *r.lora);
      ++j;
    }
  }
  write_text_atomic(layout.jobs(k), jobs_log);

  LoraParams update = build_update(results, config.alpha, k);
  save_lora(layout.update(k), update);
  DenoiserParams next = lora_fuse(state.theta, update, 1.0);

  for (const auto& r : results) {
    if (!r.success) continue;
    const auto current = manifest.find(r.pair_id);
    if (current && current->status == PairStatus::kAccepted) manifest.update_status(r.pair_id, PairStatus::kTrained);
  }

  const IterationStats s = stats_for(manifest, config, k, j);
  write_text_atomic(layout.stats(k), s.to_json().dump(2) + "\n");
  save_denoiser(layout.model(k), next);  // commit point

  state.theta = std::move(next);
  state.updates.push_back(std::move(update));
  state.history.push_back(s);
  spdlog::info("iteration {}: {} generated, {} kept, {} accepted, aesthetic {:.4f} -> {:.4f}", k, s.generated,
               s.auto_kept, s.accepted, s.aesthetic_before, s.aesthetic_after);
  return s;
}

StopDecision should_stop(const std::vector<IterationStats>& history, const RunConfig& config) {
  if (history.empty()) return {};
  if (history.back().accepted < config.min_pairs) return {true, "insufficient_pairs"};
  const auto improvement = [](const IterationStats& s) { return s.aesthetic_after - s.aesthetic_before; };
  if (history.size() >= 2 && improvement(history.back()) < config.eps_stop &&
      improvement(history[history.size() - 2]) < config.eps_stop) {
    return {true, "diminished"};
  }
  if (history.size() >= config.max_iters) return {true, "max_iters"};
  return {};
}

StopDecision run_loop(RunState& state) {
  for (;;) {
    StopDecision d = should_stop(state.history, state.config);
    if (d.stop) return d;
    try {
      run_iteration(state);
    } catch (const IterationStarved& e) {
      spdlog::warn("{}", e.what());
      return {true, "insufficient_pairs"};
    }
  }
}

// ---------------------------------------------------------------------------
// Evaluation and export

nlohmann::json EvalReport::to_json() const {
  return {{"aesthetic_a", aesthetic_a},     {"aesthetic_b", aesthetic_b}, {"consistency_a", consistency_a},
          {"consistency_b", consistency_b}, {"win_rate_b", win_rate_b},   {"samples", samples}};
}

std::string EvalReport::to_text() const {
  std::ostringstream out;
  out << std::fixed << std::setprecision(4);
  out << "model  aesthetic  consistency\n";
  out << "a      " << std::setw(9) << aesthetic_a << "  " << std::setw(11) << consistency_a << "\n";
  out << "b      " << std::setw(9) << aesthetic_b << "  " << std::setw(11) << consistency_b << "\n";
  out << "win rate of b over a: " << win_rate_b << " (" << samples << " samples)\n";
  return out.str();
}

std::vector<EvalCase> held_out_cases(std::size_t count, std::uint64_t master_seed) {
  std::vector<EvalCase> cases;
  for (std::size_t i = 0; i < count; ++i) {
    cases.push_back({PromptSpec::from_index(i % kPromptCount), derive_seed(master_seed, kEvalSalt, i) | kHeldOutBit});
  }
  return cases;
}

EvalReport evaluate(const DenoiserParams& a, const DenoiserParams& b, const std::vector<EvalCase>& cases,
                    const NoiseSchedule& schedule, std::size_t sampler_steps, std::size_t parallelism) {
  if (cases.empty()) throw ContractError("evaluate: empty prompt grid");
  struct Row {
    double aes_a, aes_b, cons_a, cons_b;
  };
  std::vector<Row> rows(cases.size());
  parallel_for(cases.size(), parallelism, [&](std::size_t i) {
    const SamplerConfig sc{sampler_steps, cases[i].seed};
    const ImageBuffer xa = sample(a, nullptr, cases[i].prompt, schedule, sc);
    const ImageBuffer xb = sample(b, nullptr, cases[i].prompt, schedule, sc);
    rows[i] = {aesthetic_proxy(xa), aesthetic_proxy(xb), consistency_proxy(xa, cases[i].prompt),
               consistency_proxy(xb, cases[i].prompt)};
  });
  EvalReport r;
  r.samples = cases.size();
  double wins = 0.0;
  for (const auto& row : rows) {
    r.aesthetic_a += row.aes_a;
    r.aesthetic_b += row.aes_b;
    r.consistency_a += row.cons_a;
    r.consistency_b += row.cons_b;
    wins += row.aes_b > row.aes_a ? 1.0 : (row.aes_b == row.aes_a ? 0.5 : 0.0);
  }
  const double n = static_cast<double>(rows.size());
  r.aesthetic_a /= n;
  r.aesthetic_b /= n;
  r.consistency_a /= n;
  r.consistency_b /= n;
  r.win_rate_b = wins / n;
  return r;
}

LoraParams export_merged(const RunState& state) {
  if (state.updates.empty()) throw ContractError("export: no completed iteration in " + state.layout.root.string());
  LoraParams merged = lora_concat_scale(state.updates, 1.0);
  merged.metadata = {{"iterations", state.updates.size()}, {"scale", 1.0}};
  const double diff = max_abs_difference(lora_fuse(state.base, merged, 1.0), state.theta);
  if (!(diff <= kWeightTolerance)) {
    throw IntegrityError("merged lora reproduces the final weights only within " + std::to_string(diff));
  }
  save_lora(state.layout.merged(), merged);
  return merged;
}

}  // namespace artaug
