// Runs the artaug executable as a subprocess and checks exit codes and output.

#include <sys/wait.h>

#include <array>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <random>
#include <string>

#include <nlohmann/json.hpp>

#include "doctest.h"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

struct Outcome {
  int exit_code = -1;
  std::string out;  // stdout only; stderr is discarded
  json last_json() const {
    const auto end = out.find_last_not_of('\n');
    const auto start = out.rfind('\n', end);
    return json::parse(out.substr(start == std::string::npos ? 0 : start + 1, end + 1));
  }
};

Outcome cli(const std::string& args) {
  const std::string cmd = std::string("'") + ARTAUG_CLI_PATH + "' --log-level off " + args + " 2>/dev/null";
  Outcome o;
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  std::array<char, 4096> buf{};
  for (std::size_t n; (n = std::fread(buf.data(), 1, buf.size(), pipe)) > 0;) o.out.append(buf.data(), n);
  const int status = ::pclose(pipe);
  o.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return o;
}

struct Scratch {
  fs::path path;
  explicit Scratch(const std::string& tag) {
    path = fs::temp_directory_path() / ("artaug_cli_" + tag + "_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~Scratch() {
    std::error_code ec;
    fs::remove_all(path, ec);
  }
  std::string str(const std::string& sub = "") const { return (sub.empty() ? path : path / sub).string(); }
};

void write_tiny_config(const fs::path& file) {
  std::ofstream(file) << R"({
    "model": {"hidden": 16, "hidden_layers": 1},
    "base_steps": 30, "base_batch_size": 4, "corpus_per_prompt": 1,
    "sampler_steps": 6, "prompts_per_iteration": 12,
    "fit": {"steps": 5, "probe_count": 2, "rank": 4},
    "min_pairs": 1, "max_iters": 1, "eval_prompts": 4
  })";
}

}  // namespace

TEST_CASE("usage errors exit with 1") {
  CHECK(cli("").exit_code == 1);
  CHECK(cli("frobnicate").exit_code == 1);
  CHECK(cli("init").exit_code == 1);
  CHECK(cli("evaluate --a x.atw").exit_code == 1);
  CHECK(cli("interact --prompt 'a bright disk on a dark background' --schedule cosine --model x").exit_code == 1);
  CHECK(cli("interact --prompt 'a bright disk on a dark background'").exit_code == 1);
  CHECK(cli("--help").exit_code == 0);
}

TEST_CASE("invalid configuration is a usage error, missing files are runtime errors") {
  Scratch s("cfg");
  std::ofstream(s.path / "bad.json") << R"({"alpha": 0.3, "colour": "blue"})";
  const auto bad = cli("--json init " + s.str("run") + " --config " + s.str("bad.json"));
  CHECK(bad.exit_code == 1);
  CHECK(bad.last_json()["code"] == "usage");
  CHECK(bad.last_json()["error"].get<std::string>().find("colour") != std::string::npos);

  const auto missing = cli("--json evaluate --a " + s.str("nope.atw") + " --b " + s.str("nope.atw"));
  CHECK(missing.exit_code == 2);
  CHECK(missing.last_json()["code"] == "io");
  CHECK(cli("train-base " + s.str("not-a-run")).exit_code == 2);
}

TEST_CASE("end to end: init, train-base, loop, stats, export, evaluate") {
  Scratch s("e2e");
  write_tiny_config(s.path / "tiny.json");
  const std::string run = s.str("run");

  const auto init = cli("--json init " + run + " --config " + s.str("tiny.json") + " --seed 4 --auto-accept");
  REQUIRE(init.exit_code == 0);
  CHECK(init.last_json()["status"] == "ok");
  const auto again = cli("--json init " + run + " --config " + s.str("tiny.json") + " --seed 4 --auto-accept");
  CHECK(again.exit_code == 0);
  CHECK(again.last_json()["status"] == "already_done");
  CHECK(cli("init " + run + " --config " + s.str("tiny.json") + " --seed 5").exit_code == 1);

  const auto base = cli("--json train-base " + run);
  REQUIRE(base.exit_code == 0);
  CHECK(base.last_json()["status"] == "ok");
  CHECK(base.last_json()["final_validation_loss"].is_number());
  CHECK(cli("--json train-base " + run).last_json()["status"] == "already_done");

  const auto it = cli("--json run-iteration " + run + " --iteration 1");
  REQUIRE(it.exit_code == 0);
  CHECK(it.last_json()["stats"]["iteration"] == 1);
  CHECK(cli("--json run-iteration " + run + " --iteration 1").last_json()["status"] == "already_done");
  CHECK(cli("run-iteration " + run + " --iteration 5").exit_code == 1);

  // max_iters 1 is already met.
  const auto loop = cli("--json loop " + run);
  CHECK(loop.exit_code == 0);
  CHECK(loop.last_json()["status"] == "already_done");

  const auto stats = cli("stats " + run);
  CHECK(stats.exit_code == 0);
  CHECK(stats.out.find("iter  generated") != std::string::npos);
  CHECK(cli("--json stats " + run).last_json()["iterations"].size() == 1);

  const auto exp = cli("--json export-lora " + run);
  REQUIRE(exp.exit_code == 0);
  CHECK(exp.last_json()["status"] == "ok");
  CHECK(fs::exists(s.path / "run/merged.atw"));
  CHECK(cli("--json export-lora " + run).last_json()["status"] == "already_done");

  // Identical models tie; the exported LoRA at weight 0 is the base.
  const std::string b = s.str("run/base.atw");
  const auto tie = cli("--json evaluate --a " + b + " --b " + b + " --count 4 --steps 6");
  REQUIRE(tie.exit_code == 0);
  CHECK(tie.last_json()["win_rate_b"] == 0.5);
  const auto zero = cli("--json evaluate --a " + b + " --b " + b + " --b-lora " + s.str("run/merged.atw") +
                        " --b-lora-weight 0 --count 4 --steps 6");
  REQUIRE(zero.exit_code == 0);
  CHECK(zero.last_json()["win_rate_b"] == 0.5);
  CHECK(cli("evaluate --a " + b + " --b " + b + " --count 2 --steps 6").out.find("win rate") != std::string::npos);

  const auto pair = cli("--json interact --run " + run + " --prompt 'a dim square on a light background' --seed 2");
  REQUIRE(pair.exit_code == 0);
  CHECK(fs::exists(s.path / "run/interact/seed2/after.pgm"));
  CHECK(pair.last_json()["aesthetic_after"].is_number());
  const auto vague = cli("--json interact --run " + run + " --prompt 'something nice' --seed 2");
  CHECK(vague.exit_code == 2);
  CHECK(vague.last_json()["code"] == "parse");
}
