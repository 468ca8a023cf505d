#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "artaug/image.hpp"
#include "artaug/toy_world.hpp"

namespace artaug {

enum class PairStatus { kPending, kAutoDropped, kReviewPending, kAccepted, kRejected, kTrained };

std::string_view status_name(PairStatus s);
PairStatus parse_status(std::string_view name);
/// pending -> auto_dropped | review_pending -> accepted | rejected;
/// accepted -> trained.
bool transition_allowed(PairStatus from, PairStatus to);

struct PairScores {
  double aesthetic_before = 0, aesthetic_after = 0;
  double consistency_before = 0, consistency_after = 0;
  double image_cosine = 0;
};

struct Verdict {
  std::string reviewer;
  std::string note;
  std::optional<std::string> timestamp;  // ISO-8601 UTC; absent for automatic verdicts
};

struct PairRecord {
  std::string id;
  std::size_t iteration = 0;
  PromptSpec prompt;          // original
  PromptSpec refined_prompt;  // used for generation
  std::uint64_t seed = 0;
  std::string before_path, after_path;  // relative to the run directory
  nlohmann::json suggestions = nlohmann::json::array();
  std::optional<PairScores> scores;
  PairStatus status = PairStatus::kPending;
  std::string drop_reason;  // aesthetic_down | consistency_down | both
  std::optional<Verdict> verdict;

  nlohmann::json to_json() const;
  static PairRecord from_json(const nlohmann::json& j);
  bool operator==(const PairRecord& other) const { return to_json() == other.to_json(); }
};

/// Deterministic UUID-v4-shaped id from a 64-bit seed.
std::string make_pair_id(std::uint64_t seed);

/// Cosine of mean-centred pixel vectors; 0 when either side is constant.
double image_cosine(const ImageBuffer& a, const ImageBuffer& b);

/// Fills all five scores from the images (pure).
PairRecord score_pair(PairRecord record, const ImageBuffer& before, const ImageBuffer& after);
/// Loads the record's images relative to `run_dir`; IoError if one is missing.
PairRecord score_pair(PairRecord record, const std::filesystem::path& run_dir);

struct FilterDecision {
  PairStatus status;
  std::string reason;  // empty when kept
};

/// Keep iff aesthetic strictly increases and consistency does not decrease.
/// ContractError without scores.
FilterDecision auto_filter(const PairRecord& record);

/// Append-only JSONL log of record snapshots; the newest line per id wins.
/// Writes hold an in-process mutex and an flock on the file, so several
/// processes may append to one manifest. A partial last line left by a crashed
/// writer is ignored by readers and dropped by the next writer.
class Manifest {
 public:
  explicit Manifest(std::filesystem::path path);

  const std::filesystem::path& path() const noexcept { return path_; }

  void append(const PairRecord& record);
  /// Latest snapshot per id in first-appearance order. FormatError carries
  /// the 1-based line number of a corrupt line.
  std::vector<PairRecord> latest_view() const;
  std::optional<PairRecord> find(const std::string& id) const;

  /// Validates the transition against the latest snapshot, then appends,
  /// atomically with respect to other writers.
  /// Throws TransitionError on an illegal move and ContractError on an
  /// unknown id.
  PairRecord update_status(const std::string& id, PairStatus to, std::optional<Verdict> verdict = std::nullopt,
                           std::string reason = {});

 private:
  class FileLock;
  std::vector<PairRecord> latest_view_unlocked() const;
  void append_locked(FileLock& file, const PairRecord& record);

  std::filesystem::path path_;
  mutable std::mutex mutex_;
};

/// Per-iteration fold of the manifest. Means run over every generated pair.
struct IterationStats {
  std::size_t iteration = 0;
  std::size_t prompts_sampled = 0;
  std::size_t generated = 0;
  std::size_t auto_kept = 0;
  std::size_t accepted = 0;
  double aesthetic_before = 0, aesthetic_after = 0;
  double consistency_before = 0, consistency_after = 0;
  double image_cosine = 0;
  double alpha = 0;
  std::size_t lora_count = 0;  // J

  nlohmann::json to_json() const;
  static IterationStats from_json(const nlohmann::json& j);
};

/// Recomputes the count and mean fields for one iteration from records alone.
IterationStats fold_stats(const std::vector<PairRecord>& records, std::size_t iteration);
/// All iterations present in the records, ascending.
std::vector<IterationStats> fold_all_stats(const std::vector<PairRecord>& records);

/// HTTP review API over a run directory.
///   GET  /api/pairs?status=&iteration=&page=&page_size=
///   GET  /api/pairs/{id}
///   GET  /api/pairs/{id}/pixels?which=before|after
///   POST /api/pairs/{id}/verdict {decision, reviewer, note}
///   GET  /api/stats
class ReviewServer {
 public:
  ReviewServer(std::filesystem::path run_dir, std::string cors_origin = "*");
  ~ReviewServer();
  ReviewServer(const ReviewServer&) = delete;
  ReviewServer& operator=(const ReviewServer&) = delete;

  /// Binds to host:port (port 0 picks a free port) and returns the port.
  int bind(const std::string& host, int port);
  /// Serves until stop(); blocks.
  void listen();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace artaug
