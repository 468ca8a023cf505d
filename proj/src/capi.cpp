#include "artaug/artaug.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <new>
#include <optional>
#include <string>

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "artaug/curation.hpp"
#include "artaug/error.hpp"
#include "artaug/orchestrator.hpp"
#include "artaug/weights_io.hpp"

struct artaug_model {
  artaug::DenoiserParams params;
};

struct artaug_lora {
  artaug::LoraParams params;
};

struct artaug_run {
  std::unique_ptr<artaug::RunLock> lock;
  artaug::RunState state;
};

struct artaug_review_server {
  std::unique_ptr<artaug::ReviewServer> server;
};

namespace {

thread_local std::string g_last_error;

// Library logs go to stderr so stdout stays machine-readable.
const bool g_logger_ready = [] {
  spdlog::set_default_logger(spdlog::stderr_color_mt("artaug"));
  return true;
}();

artaug_status fail(artaug_status status, std::string message) {
  g_last_error = std::move(message);
  return status;
}

// Runs `fn`, translating exceptions into status codes.
template <typename Fn>
artaug_status guarded(Fn&& fn) {
  try {
    g_last_error.clear();
    fn();
    return ARTAUG_OK;
  } catch (const artaug::Error& e) {
    return fail(static_cast<artaug_status>(e.code()), e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(ARTAUG_E_PARSE, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(ARTAUG_E_IO, e.what());
  } catch (const std::bad_alloc&) {
    return fail(ARTAUG_E_FATAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(ARTAUG_E_INTERNAL, e.what());
  } catch (...) {
    return fail(ARTAUG_E_INTERNAL, "unknown exception");
  }
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.c_str(), s.size() + 1);
  return out;
}

void put_json(char** out, const nlohmann::json& j) {
  if (out) *out = dup_string(j.dump());
}

void require(const void* p, const char* what) {
  if (!p) throw artaug::Error(artaug::ErrorCode::kUsage, std::string(what) + " must not be NULL");
}

artaug::NoiseSchedule schedule_from(const char* name) {
  artaug::NoiseSchedule s;
  if (name) s.mode = artaug::parse_schedule_mode(name);
  return s;
}

}  // namespace

extern "C" {

const char* artaug_version(void) { return "0.1.0"; }

const char* artaug_last_error(void) { return g_last_error.c_str(); }

const char* artaug_status_name(artaug_status status) {
  return artaug::error_code_name(static_cast<artaug::ErrorCode>(status));
}

void artaug_string_free(char* s) { std::free(s); }

artaug_status artaug_set_log_level(const char* level) {
  return guarded([&] {
    require(level, "level");
    const std::string l = level;
    if (l == "off") spdlog::set_level(spdlog::level::off);
    else if (l == "warn") spdlog::set_level(spdlog::level::warn);
    else if (l == "info") spdlog::set_level(spdlog::level::info);
    else if (l == "debug") spdlog::set_level(spdlog::level::debug);
    else throw artaug::Error(artaug::ErrorCode::kUsage, "unknown log level \"" + l + "\"");
  });
}

artaug_status artaug_model_load(const char* path, artaug_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new artaug_model{artaug::load_denoiser(path)};
  });
}

artaug_status artaug_model_save(const artaug_model* model, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    artaug::save_denoiser(path, model->params);
  });
}

artaug_status artaug_model_info(const artaug_model* model, char** json_out) {
  return guarded([&] {
    require(model, "model");
    put_json(json_out, {{"config", model->params.config.to_json()},
                        {"parameter_count", model->params.parameter_count()}});
  });
}

void artaug_model_free(artaug_model* model) { delete model; }

artaug_status artaug_lora_load(const char* path, artaug_lora** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new artaug_lora{artaug::load_lora(path)};
  });
}

void artaug_lora_free(artaug_lora* lora) { delete lora; }

artaug_status artaug_lora_info(const artaug_lora* lora, char** json_out) {
  return guarded([&] {
    require(lora, "lora");
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& d : lora->params.layer_dims()) layers.push_back({d.in, d.out});
    put_json(json_out, {{"rank", lora->params.rank}, {"layers", layers}, {"metadata", lora->params.metadata}});
  });
}

artaug_status artaug_model_fuse(const artaug_model* model, const artaug_lora* lora, double alpha,
                                artaug_model** out) {
  return guarded([&] {
    require(model, "model");
    require(lora, "lora");
    require(out, "out");
    *out = new artaug_model{artaug::lora_fuse(model->params, lora->params, alpha)};
  });
}

artaug_status artaug_run_init(const char* dir, const char* config_json, int* created) {
  return guarded([&] {
    require(dir, "dir");
    artaug::RunConfig config;
    if (config_json) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(config_json);
      } catch (const nlohmann::json::exception& e) {
        throw artaug::ContractError(std::string("config is not valid JSON: ") + e.what());
      }
      config = artaug::RunConfig::from_json(j);
    }
    artaug::RunLock lock(dir);
    const bool made = artaug::init_run(dir, config);
    if (created) *created = made ? 1 : 0;
  });
}

artaug_status artaug_run_train_base(const char* dir, char** json_out) {
  return guarded([&] {
    require(dir, "dir");
    artaug::RunLock lock(dir);
    const auto r = artaug::train_base_model(dir);
    put_json(json_out, {{"already_done", r.already_done},
                        {"initial_validation_loss", r.initial_validation_loss},
                        {"final_validation_loss", r.final_validation_loss},
                        {"mean_consistency", r.mean_consistency},
                        {"mean_aesthetic", r.mean_aesthetic}});
  });
}

artaug_status artaug_run_open(const char* dir, artaug_run** out) {
  return guarded([&] {
    require(dir, "dir");
    require(out, "out");
    auto run = std::make_unique<artaug_run>();
    run->lock = std::make_unique<artaug::RunLock>(dir);
    run->state = artaug::load_run_state(dir);
    *out = run.release();
  });
}

void artaug_run_close(artaug_run* run) { delete run; }

artaug_status artaug_run_config(const artaug_run* run, char** json_out) {
  return guarded([&] {
    require(run, "run");
    put_json(json_out, run->state.config.to_json());
  });
}

artaug_status artaug_run_completed(const artaug_run* run, uint64_t* out) {
  return guarded([&] {
    require(run, "run");
    require(out, "out");
    *out = run->state.completed();
  });
}

artaug_status artaug_run_iteration(artaug_run* run, char** json_out) {
  return guarded([&] {
    require(run, "run");
    put_json(json_out, artaug::run_iteration(run->state).to_json());
  });
}

artaug_status artaug_run_should_stop(const artaug_run* run, char** json_out) {
  return guarded([&] {
    require(run, "run");
    const auto d = artaug::should_stop(run->state.history, run->state.config);
    put_json(json_out, {{"stop", d.stop}, {"reason", d.reason}});
  });
}

artaug_status artaug_run_loop(artaug_run* run, char** json_out) {
  return guarded([&] {
    require(run, "run");
    const auto d = artaug::run_loop(run->state);
    nlohmann::json iterations = nlohmann::json::array();
    for (const auto& s : run->state.history) iterations.push_back(s.to_json());
    put_json(json_out, {{"reason", d.reason}, {"iterations", iterations}});
  });
}

artaug_status artaug_run_model(const artaug_run* run, artaug_model** out) {
  return guarded([&] {
    require(run, "run");
    require(out, "out");
    *out = new artaug_model{run->state.theta};
  });
}

artaug_status artaug_run_base_model(const artaug_run* run, artaug_model** out) {
  return guarded([&] {
    require(run, "run");
    require(out, "out");
    *out = new artaug_model{run->state.base};
  });
}

artaug_status artaug_run_export(const artaug_run* run, const char* out_path, char** json_out) {
  return guarded([&] {
    require(run, "run");
    const auto merged = artaug::export_merged(run->state);
    if (out_path) artaug::save_lora(out_path, merged);
    put_json(json_out, {{"path", run->state.layout.merged().string()},
                        {"iterations", run->state.completed()},
                        {"rank", merged.rank}});
  });
}

artaug_status artaug_run_stats(const char* dir, char** json_out) {
  return guarded([&] {
    require(dir, "dir");
    const artaug::RunLayout layout{dir};
    if (!std::filesystem::exists(layout.config())) throw artaug::IoError("no run at " + std::string(dir));
    nlohmann::json iterations = nlohmann::json::array();
    if (std::filesystem::exists(layout.manifest())) {
      for (auto s : artaug::fold_all_stats(artaug::Manifest(layout.manifest()).latest_view())) {
        const auto file = layout.stats(s.iteration);
        if (std::filesystem::exists(file)) {
          std::ifstream in(file);
          const auto saved = nlohmann::json::parse(in, nullptr, false);
          if (saved.is_object()) {
            s.alpha = saved.value("alpha", 0.0);
            s.lora_count = saved.value("lora_count", std::size_t{0});
            s.prompts_sampled = saved.value("prompts_sampled", s.prompts_sampled);
          }
        }
        nlohmann::json row = s.to_json();
        row["completed"] = std::filesystem::exists(layout.model(s.iteration));
        iterations.push_back(row);
      }
    }
    put_json(json_out, {{"iterations", iterations}});
  });
}

artaug_status artaug_interact(const artaug_model* model, const char* prompt, uint64_t seed, const char* critic_json,
                              const char* schedule, uint32_t steps, const char* out_dir, char** json_out) {
  return guarded([&] {
    require(model, "model");
    require(prompt, "prompt");
    require(out_dir, "out_dir");
    if (steps == 0) throw artaug::ContractError("steps must be >= 1");
    artaug::CriticBackend critic;
    if (critic_json) critic = artaug::CriticBackend::from_json(nlohmann::json::parse(critic_json));
    const artaug::PromptSpec spec = artaug::PromptSpec::parse(prompt);
    const auto result =
        artaug::interactive_generate(model->params, nullptr, spec, seed, critic, schedule_from(schedule), steps);
    const std::filesystem::path dir(out_dir);
    std::filesystem::create_directories(dir);
    const auto before = artaug::quantize_8bit(result.before);
    const auto after = artaug::quantize_8bit(result.after);
    artaug::write_pgm(dir / "before.pgm", before);
    artaug::write_pgm(dir / "after.pgm", after);
    artaug::PairRecord r;
    r.prompt = spec;
    r.refined_prompt = result.prompt;
    r.seed = seed;
    r = artaug::score_pair(std::move(r), before, after);
    nlohmann::json suggestions = nlohmann::json::array();
    for (const auto& s : result.suggestions) suggestions.push_back(s.to_json());
    put_json(json_out, {{"prompt", spec.text()},
                        {"seed", seed},
                        {"before", (dir / "before.pgm").string()},
                        {"after", (dir / "after.pgm").string()},
                        {"aesthetic_before", r.scores->aesthetic_before},
                        {"aesthetic_after", r.scores->aesthetic_after},
                        {"consistency_before", r.scores->consistency_before},
                        {"consistency_after", r.scores->consistency_after},
                        {"image_cosine", r.scores->image_cosine},
                        {"suggestions", suggestions}});
  });
}

artaug_status artaug_evaluate(const artaug_model* a, const artaug_model* b, uint32_t count, uint64_t seed,
                              const char* schedule, uint32_t steps, uint32_t parallelism, char** json_out,
                              char** text_out) {
  return guarded([&] {
    require(a, "a");
    require(b, "b");
    if (steps == 0) throw artaug::ContractError("steps must be >= 1");
    const auto report = artaug::evaluate(a->params, b->params, artaug::held_out_cases(count, seed),
                                         schedule_from(schedule), steps, parallelism);
    put_json(json_out, report.to_json());
    if (text_out) *text_out = dup_string(report.to_text());
  });
}

uint64_t artaug_denoiser_evaluations(void) { return artaug::denoiser_evaluations(); }

void artaug_reset_denoiser_evaluations(void) { artaug::reset_denoiser_evaluations(); }

artaug_status artaug_review_server_create(const char* dir, const char* host, int port, artaug_review_server** out,
                                          int* bound_port) {
  return guarded([&] {
    require(dir, "dir");
    require(out, "out");
    if (!std::filesystem::exists(artaug::RunLayout{dir}.config())) {
      throw artaug::IoError("no run at " + std::string(dir));
    }
    auto s = std::make_unique<artaug_review_server>();
    s->server = std::make_unique<artaug::ReviewServer>(dir);
    const int p = s->server->bind(host ? host : "127.0.0.1", port);
    if (bound_port) *bound_port = p;
    *out = s.release();
  });
}

artaug_status artaug_review_server_listen(artaug_review_server* server) {
  return guarded([&] {
    require(server, "server");
    server->server->listen();
  });
}

void artaug_review_server_stop(artaug_review_server* server) {
  if (server) server->server->stop();
}

void artaug_review_server_free(artaug_review_server* server) { delete server; }

}  // extern "C"
