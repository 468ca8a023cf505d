// Command-line front end over the C API.
//
// Exit codes: 0 success (including "already done"), 1 usage error,
// 2 runtime error. With --json every command prints one JSON object on
// stdout; logs always go to stderr.

#include <cstdio>
#include <cstdlib>
#include <csignal>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "artaug/artaug.h"

namespace {

using json = nlohmann::json;

constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

// Failed C API call, carrying its status.
struct ApiFailure {
  artaug_status status;
  std::string message;
};

// Usage problem detected by the CLI itself.
struct UsageFailure {
  std::string message;
};

void check(artaug_status s) {
  if (s != ARTAUG_OK) throw ApiFailure{s, artaug_last_error()};
}

// Takes ownership of a library string.
std::string take(char* s) {
  std::string out = s ? s : "";
  artaug_string_free(s);
  return out;
}

json take_json(char* s) { return json::parse(take(s)); }

template <typename T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using Model = std::unique_ptr<artaug_model, Deleter<artaug_model, artaug_model_free>>;
using Lora = std::unique_ptr<artaug_lora, Deleter<artaug_lora, artaug_lora_free>>;
using Run = std::unique_ptr<artaug_run, Deleter<artaug_run, artaug_run_close>>;
using Server = std::unique_ptr<artaug_review_server, Deleter<artaug_review_server, artaug_review_server_free>>;

Model load_model(const std::string& path) {
  artaug_model* m = nullptr;
  check(artaug_model_load(path.c_str(), &m));
  return Model(m);
}

Lora load_lora(const std::string& path) {
  artaug_lora* l = nullptr;
  check(artaug_lora_load(path.c_str(), &l));
  return Lora(l);
}

Run open_run(const std::string& dir) {
  artaug_run* r = nullptr;
  check(artaug_run_open(dir.c_str(), &r));
  return Run(r);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageFailure{"cannot read " + path};
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct Output {
  bool as_json = false;

  void emit(json result, const std::string& text) const {
    if (as_json) {
      std::cout << result.dump() << "\n";
    } else {
      std::cout << text;
      if (!text.empty() && text.back() != '\n') std::cout << "\n";
    }
  }

  void already_done(json result, const std::string& what) const {
    result["status"] = "already_done";
    emit(std::move(result), "already done: " + what);
  }

  void error(int exit_code, const std::string& code, const std::string& message) const {
    std::cerr << "error: " << message << "\n";
    if (as_json) std::cout << json{{"status", "error"}, {"code", code}, {"error", message}, {"exit_code", exit_code}}.dump() << "\n";
  }
};

std::string stats_table(const json& iterations) {
  std::string out = "iter  generated  kept  accepted  aes_before  aes_after  cons_before  cons_after  cosine  J\n";
  char line[160];
  for (const auto& s : iterations) {
    std::snprintf(line, sizeof line, "%4zu  %9zu  %4zu  %8zu  %10.4f  %9.4f  %11.4f  %10.4f  %6.4f  %zu\n",
                  s.at("iteration").get<std::size_t>(), s.at("generated").get<std::size_t>(),
                  s.at("auto_kept").get<std::size_t>(), s.at("accepted").get<std::size_t>(),
                  s.at("aesthetic_before").get<double>(), s.at("aesthetic_after").get<double>(),
                  s.at("consistency_before").get<double>(), s.at("consistency_after").get<double>(),
                  s.at("image_cosine").get<double>(), s.at("lora_count").get<std::size_t>());
    out += line;
  }
  return out;
}

artaug_review_server* g_server = nullptr;

void on_signal(int) {
  if (g_server) artaug_review_server_stop(g_server);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"artaug: iterative self-improvement of a toy diffusion model"};
  app.require_subcommand(1);
  app.fallthrough();
  Output out;
  std::string log_level = "info";
  app.add_flag("--json", out.as_json, "Print one machine-readable JSON object on stdout");
  app.add_option("--log-level", log_level, "off, warn, info or debug (logs go to stderr)")
      ->check(CLI::IsMember({"off", "warn", "info", "debug"}));

  // init
  std::string run_dir;
  std::string config_path;
  std::optional<std::uint64_t> seed_override;
  std::optional<std::size_t> prompts_override, parallel_override;
  std::optional<double> alpha_override;
  bool auto_accept = false;
  auto* init = app.add_subcommand("init", "Create a run directory with config.json");
  init->add_option("run", run_dir, "Run directory")->required();
  init->add_option("--config", config_path, "JSON file with config overrides (unknown keys are rejected)");
  init->add_option("--seed", seed_override, "Master seed");
  init->add_option("--prompts", prompts_override, "Prompts per iteration");
  init->add_option("--alpha", alpha_override, "Fusion weight of each iteration's update");
  init->add_option("--parallelism", parallel_override, "Worker threads");
  init->add_flag("--auto-accept", auto_accept, "Accept every auto-kept pair without human review");

  auto* train = app.add_subcommand("train-base", "Train the base denoiser of a run");
  train->add_option("run", run_dir, "Run directory")->required();

  // interact
  std::string prompt, model_path, out_dir, critic_path, schedule = "flow";
  std::uint64_t seed = 0;
  std::uint32_t steps = 50;
  auto* interact = app.add_subcommand("interact", "Generate one before/after pair for a prompt");
  interact->add_option("--prompt", prompt, "e.g. \"a bright disk on a dark background\"")->required();
  interact->add_option("--seed", seed, "Sampling seed");
  auto* interact_run = interact->add_option("--run", run_dir, "Run whose current model is used")->envname("ARTAUG_RUN");
  auto* interact_model = interact->add_option("--model", model_path, "Denoiser weights (.atw)");
  interact_run->excludes(interact_model);
  interact->add_option("--out", out_dir, "Output directory (default <run>/interact/seed<seed>)");
  interact->add_option("--critic-config", critic_path, "JSON critic backend (default: rule based)");
  interact->add_option("--schedule", schedule, "flow or ddpm")->check(CLI::IsMember({"flow", "ddpm"}));
  interact->add_option("--steps", steps, "Solver steps")->check(CLI::PositiveNumber);

  std::optional<std::size_t> iteration;
  auto* iter = app.add_subcommand("run-iteration", "Run one generate/filter/review/train/fuse iteration");
  iter->add_option("run", run_dir, "Run directory")->required();
  iter->add_option("--iteration", iteration, "Expected iteration index; a completed one is a no-op");

  auto* loop = app.add_subcommand("loop", "Iterate until the stop rule fires");
  loop->add_option("run", run_dir, "Run directory")->required();

  // review serve
  std::string host = "127.0.0.1";
  int port = 8765;
  auto* review = app.add_subcommand("review", "Human review API");
  review->require_subcommand(1);
  review->fallthrough();
  auto* serve = review->add_subcommand("serve", "Serve the review HTTP API for a run");
  serve->add_option("run", run_dir, "Run directory")->required();
  serve->add_option("--port", port, "Port (0 picks a free one)")->check(CLI::Range(0, 65535));
  serve->add_option("--host", host, "Bind address");

  // evaluate
  std::string path_a, path_b, lora_b;
  double lora_weight = 1.0;
  std::uint32_t count = 100, parallelism = 1;
  std::uint64_t eval_seed = 0;
  auto* evaluate = app.add_subcommand("evaluate", "Compare model b against model a on held-out cases");
  evaluate->add_option("--a", path_a, "Reference weights (.atw)")->required();
  evaluate->add_option("--b", path_b, "Candidate weights (.atw)")->required();
  evaluate->add_option("--b-lora", lora_b, "LoRA fused into b before evaluation");
  evaluate->add_option("--b-lora-weight", lora_weight, "Fusion weight for --b-lora");
  evaluate->add_option("--count", count, "Number of prompt/seed cases")->check(CLI::PositiveNumber);
  evaluate->add_option("--seed", eval_seed, "Seed of the held-out grid");
  evaluate->add_option("--schedule", schedule, "flow or ddpm")->check(CLI::IsMember({"flow", "ddpm"}));
  evaluate->add_option("--steps", steps, "Solver steps")->check(CLI::PositiveNumber);
  evaluate->add_option("--parallelism", parallelism, "Worker threads")->check(CLI::PositiveNumber);

  std::string export_path;
  auto* exporter = app.add_subcommand("export-lora", "Write the merged LoRA of all iterations");
  exporter->add_option("run", run_dir, "Run directory")->required();
  exporter->add_option("--out", export_path, "Extra copy of merged.atw");

  auto* stats = app.add_subcommand("stats", "Per-iteration statistics");
  stats->add_option("run", run_dir, "Run directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    std::cerr << "\n" << app.help();
    return kExitUsage;
  }

  try {
    check(artaug_set_log_level(log_level.c_str()));

    if (*init) {
      json config = json::object();
      if (!config_path.empty()) {
        try {
          config = json::parse(read_file(config_path));
        } catch (const json::exception& e) {
          throw UsageFailure{config_path + ": " + e.what()};
        }
      }
      if (seed_override) config["seed"] = *seed_override;
      if (prompts_override) config["prompts_per_iteration"] = *prompts_override;
      if (alpha_override) config["alpha"] = *alpha_override;
      if (parallel_override) config["parallelism"] = *parallel_override;
      if (auto_accept) config["auto_accept"] = true;
      int created = 0;
      // An invalid configuration is a usage error.
      if (const auto st = artaug_run_init(run_dir.c_str(), config.dump().c_str(), &created);
          st == ARTAUG_E_CONTRACT || st == ARTAUG_E_PARSE) {
        throw UsageFailure{artaug_last_error()};
      } else {
        check(st);
      }
      const json result{{"status", "ok"}, {"run", run_dir}};
      if (!created) out.already_done(result, run_dir + " is initialised");
      else out.emit(result, "initialised " + run_dir);
    } else if (*train) {
      char* s = nullptr;
      check(artaug_run_train_base(run_dir.c_str(), &s));
      json r = take_json(s);
      const bool done = r.value("already_done", false);
      r.erase("already_done");
      char text[200];
      std::snprintf(text, sizeof text, "validation loss %.3f -> %.3f, baseline aesthetic %.4f, consistency %.4f",
                    r.at("initial_validation_loss").get<double>(), r.at("final_validation_loss").get<double>(),
                    r.at("mean_aesthetic").get<double>(), r.at("mean_consistency").get<double>());
      if (done) {
        out.already_done(r, std::string("base model trained; ") + text);
      } else {
        r["status"] = "ok";
        out.emit(r, text);
      }
    } else if (*interact) {
      if (run_dir.empty() && model_path.empty()) throw UsageFailure{"interact needs --run or --model"};
      Model model;
      std::string critic_json;
      if (!model_path.empty()) {
        model = load_model(model_path);
        if (out_dir.empty()) out_dir = "interact/seed" + std::to_string(seed);
      } else {
        Run run = open_run(run_dir);
        artaug_model* m = nullptr;
        check(artaug_run_model(run.get(), &m));
        model.reset(m);
        char* cfg = nullptr;
        check(artaug_run_config(run.get(), &cfg));
        const json config = take_json(cfg);
        if (critic_path.empty()) critic_json = config.at("critic").dump();
        if (!interact->count("--schedule")) schedule = config.at("schedule").get<std::string>();
        if (!interact->count("--steps")) steps = config.at("sampler_steps").get<std::uint32_t>();
        if (out_dir.empty()) out_dir = run_dir + "/interact/seed" + std::to_string(seed);
      }
      if (!critic_path.empty()) critic_json = read_file(critic_path);
      char* s = nullptr;
      check(artaug_interact(model.get(), prompt.c_str(), seed, critic_json.empty() ? nullptr : critic_json.c_str(),
                            schedule.c_str(), steps, out_dir.c_str(), &s));
      json r = take_json(s);
      r["status"] = "ok";
      char text[400];
      std::snprintf(text, sizeof text,
                    "%s (seed %llu)\n  aesthetic   %.4f -> %.4f\n  consistency %.4f -> %.4f\n  cosine      %.4f\n"
                    "  %zu suggestion(s); images in %s",
                    r.at("prompt").get<std::string>().c_str(), static_cast<unsigned long long>(seed),
                    r.at("aesthetic_before").get<double>(), r.at("aesthetic_after").get<double>(),
                    r.at("consistency_before").get<double>(), r.at("consistency_after").get<double>(),
                    r.at("image_cosine").get<double>(), r.at("suggestions").size(), out_dir.c_str());
      out.emit(r, text);
    } else if (*iter) {
      Run run = open_run(run_dir);
      std::uint64_t completed = 0;
      check(artaug_run_completed(run.get(), &completed));
      if (iteration && *iteration == 0) throw UsageFailure{"iterations are numbered from 1"};
      if (iteration && *iteration <= completed) {
        out.already_done({{"iteration", *iteration}}, "iteration " + std::to_string(*iteration) + " is complete");
      } else if (iteration && *iteration > completed + 1) {
        throw UsageFailure{"iteration " + std::to_string(*iteration) + " requested but only " +
                           std::to_string(completed) + " are complete"};
      } else {
        char* s = nullptr;
        check(artaug_run_iteration(run.get(), &s));
        json r = take_json(s);
        out.emit({{"status", "ok"}, {"stats", r}}, stats_table(json::array({r})));
      }
    } else if (*loop) {
      Run run = open_run(run_dir);
      char* s = nullptr;
      check(artaug_run_should_stop(run.get(), &s));
      const json before = take_json(s);
      check(artaug_run_loop(run.get(), &s));
      json r = take_json(s);
      const std::string text = stats_table(r.at("iterations")) + "stopped: " + r.at("reason").get<std::string>();
      if (before.at("stop").get<bool>()) {
        out.already_done(r, "loop finished earlier (" + r.at("reason").get<std::string>() + ")");
      } else {
        r["status"] = "ok";
        out.emit(r, text);
      }
    } else if (*serve) {
      artaug_review_server* raw = nullptr;
      int bound = 0;
      check(artaug_review_server_create(run_dir.c_str(), host.c_str(), port, &raw, &bound));
      Server server(raw);
      g_server = raw;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      const json hello{{"status", "listening"}, {"host", host}, {"port", bound}};
      out.emit(hello, "review API on http://" + host + ":" + std::to_string(bound) + "/api/pairs (Ctrl-C to stop)");
      std::cout.flush();
      check(artaug_review_server_listen(raw));
      g_server = nullptr;
    } else if (*evaluate) {
      Model a = load_model(path_a);
      Model b = load_model(path_b);
      if (!lora_b.empty()) {
        Lora l = load_lora(lora_b);
        artaug_model* fused = nullptr;
        check(artaug_model_fuse(b.get(), l.get(), lora_weight, &fused));
        b.reset(fused);
      }
      char *s = nullptr, *text = nullptr;
      check(artaug_evaluate(a.get(), b.get(), count, eval_seed, schedule.c_str(), steps, parallelism, &s, &text));
      json r = take_json(s);
      r["status"] = "ok";
      out.emit(r, take(text));
    } else if (*exporter) {
      Run run = open_run(run_dir);
      std::uint64_t completed = 0;
      check(artaug_run_completed(run.get(), &completed));
      const std::string merged = run_dir + "/merged.atw";
      std::optional<json> existing;
      if (std::ifstream(merged).good()) {
        artaug_lora* l = nullptr;
        if (artaug_lora_load(merged.c_str(), &l) == ARTAUG_OK) {
          Lora held(l);
          char* info = nullptr;
          check(artaug_lora_info(held.get(), &info));
          existing = take_json(info);
        }
      }
      if (existing && existing->at("metadata").value("iterations", std::uint64_t{0}) == completed &&
          export_path.empty()) {
        out.already_done({{"path", merged}, {"iterations", completed}}, merged + " covers all iterations");
      } else {
        char* s = nullptr;
        check(artaug_run_export(run.get(), export_path.empty() ? nullptr : export_path.c_str(), &s));
        json r = take_json(s);
        r["status"] = "ok";
        out.emit(r, "wrote " + r.at("path").get<std::string>() + " (rank " + std::to_string(r.at("rank").get<int>()) +
                        ", " + std::to_string(completed) + " iteration(s))");
      }
    } else if (*stats) {
      char* s = nullptr;
      check(artaug_run_stats(run_dir.c_str(), &s));
      json r = take_json(s);
      r["status"] = "ok";
      out.emit(r, stats_table(r.at("iterations")));
    }
    return 0;
  } catch (const UsageFailure& e) {
    out.error(kExitUsage, "usage", e.message);
    return kExitUsage;
  } catch (const ApiFailure& e) {
    const int code = e.status == ARTAUG_E_USAGE ? kExitUsage : kExitRuntime;
    out.error(code, artaug_status_name(e.status), e.message);
    return code;
  } catch (const std::exception& e) {
    out.error(kExitRuntime, "internal", e.what());
    return kExitRuntime;
  }
}
