#include "artaug/curation.hpp"

#include <fcntl.h>
#include <sys/file.h>
#include <sys/stat.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <ctime>
#include <fstream>
#include <map>
#include <random>

#include <httplib.h>
#include <spdlog/spdlog.h>

#include "artaug/error.hpp"

namespace artaug {

namespace {

constexpr std::array<std::string_view, 6> kStatusNames = {"pending",  "auto_dropped", "review_pending",
                                                          "accepted", "rejected",     "trained"};

std::string utc_now() {
  const std::time_t now = std::time(nullptr);
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

nlohmann::json scores_json(const PairScores& s) {
  return {{"aesthetic_before", s.aesthetic_before},     {"aesthetic_after", s.aesthetic_after},
          {"consistency_before", s.consistency_before}, {"consistency_after", s.consistency_after},
          {"image_cosine", s.image_cosine}};
}

}  // namespace

std::string_view status_name(PairStatus s) { return kStatusNames[static_cast<std::size_t>(s)]; }

PairStatus parse_status(std::string_view name) {
  for (std::size_t i = 0; i < kStatusNames.size(); ++i) {
    if (kStatusNames[i] == name) return static_cast<PairStatus>(i);
  }
  throw ContractError("unknown pair status \"" + std::string(name) + "\"");
}

bool transition_allowed(PairStatus from, PairStatus to) {
  switch (from) {
    case PairStatus::kPending:
      return to == PairStatus::kAutoDropped || to == PairStatus::kReviewPending;
    case PairStatus::kReviewPending:
      return to == PairStatus::kAccepted || to == PairStatus::kRejected;
    case PairStatus::kAccepted:
      return to == PairStatus::kTrained;
    default:
      return false;
  }
}

nlohmann::json PairRecord::to_json() const {
  nlohmann::json j = {{"id", id},
                      {"iteration", iteration},
                      {"prompt", prompt.to_json()},
                      {"refined_prompt", refined_prompt.to_json()},
                      {"prompt_text", prompt.text()},
                      {"seed", seed},
                      {"before_path", before_path},
                      {"after_path", after_path},
                      {"suggestions", suggestions},
                      {"scores", scores ? scores_json(*scores) : nlohmann::json(nullptr)},
                      {"status", status_name(status)},
                      {"drop_reason", drop_reason},
                      {"verdict", nullptr}};
  if (verdict) {
    j["verdict"] = {{"reviewer", verdict->reviewer},
                    {"note", verdict->note},
                    {"timestamp", verdict->timestamp ? nlohmann::json(*verdict->timestamp) : nlohmann::json(nullptr)}};
  }
  return j;
}

PairRecord PairRecord::from_json(const nlohmann::json& j) {
  PairRecord r;
  r.id = j.at("id").get<std::string>();
  r.iteration = j.at("iteration").get<std::size_t>();
  r.prompt = PromptSpec::from_json(j.at("prompt"));
  r.refined_prompt = PromptSpec::from_json(j.at("refined_prompt"));
  r.seed = j.at("seed").get<std::uint64_t>();
  r.before_path = j.at("before_path").get<std::string>();
  r.after_path = j.at("after_path").get<std::string>();
  r.suggestions = j.value("suggestions", nlohmann::json::array());
  if (j.contains("scores") && !j["scores"].is_null()) {
    const auto& s = j["scores"];
    r.scores = PairScores{s.at("aesthetic_before").get<double>(), s.at("aesthetic_after").get<double>(),
                          s.at("consistency_before").get<double>(), s.at("consistency_after").get<double>(),
                          s.at("image_cosine").get<double>()};
  }
  r.status = parse_status(j.at("status").get<std::string>());
  r.drop_reason = j.value("drop_reason", std::string());
  if (j.contains("verdict") && !j["verdict"].is_null()) {
    const auto& v = j["verdict"];
    Verdict verdict{v.value("reviewer", std::string()), v.value("note", std::string()), std::nullopt};
    if (v.contains("timestamp") && v["timestamp"].is_string()) verdict.timestamp = v["timestamp"].get<std::string>();
    r.verdict = std::move(verdict);
  }
  return r;
}

std::string make_pair_id(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  const std::uint64_t hi = rng(), lo = rng();
  unsigned char b[16];
  for (int i = 0; i < 8; ++i) {
    b[i] = static_cast<unsigned char>(hi >> (56 - 8 * i));
    b[8 + i] = static_cast<unsigned char>(lo >> (56 - 8 * i));
  }
  b[6] = static_cast<unsigned char>((b[6] & 0x0f) | 0x40);
  b[8] = static_cast<unsigned char>((b[8] & 0x3f) | 0x80);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string id;
  for (int i = 0; i < 16; ++i) {
    if (i == 4 || i == 6 || i == 8 || i == 10) id.push_back('-');
    id.push_back(kHex[b[i] >> 4]);
    id.push_back(kHex[b[i] & 0xf]);
  }
  return id;
}

double image_cosine(const ImageBuffer& a, const ImageBuffer& b) {
  if (a.size() != b.size()) throw ShapeError("image_cosine: images differ in size");
  return normalized_cross_correlation(a.pixels(), b.pixels());
}

PairRecord score_pair(PairRecord record, const ImageBuffer& before, const ImageBuffer& after) {
  const PromptSpec& p = record.refined_prompt;
  record.scores = PairScores{aesthetic_proxy(before), aesthetic_proxy(after), consistency_proxy(before, p),
                             consistency_proxy(after, p), image_cosine(before, after)};
  return record;
}

PairRecord score_pair(PairRecord record, const std::filesystem::path& run_dir) {
  const auto before = read_pgm(run_dir / record.before_path);
  const auto after = read_pgm(run_dir / record.after_path);
  return score_pair(std::move(record), before, after);
}

FilterDecision auto_filter(const PairRecord& record) {
  if (!record.scores) throw ContractError("auto_filter: pair " + record.id + " has no scores");
  const auto& s = *record.scores;
  const bool aesthetic_up = s.aesthetic_after > s.aesthetic_before;
  const bool consistency_kept = s.consistency_after >= s.consistency_before;
  if (aesthetic_up && consistency_kept) return {PairStatus::kReviewPending, ""};
  if (!aesthetic_up && !consistency_kept) return {PairStatus::kAutoDropped, "both"};
  return {PairStatus::kAutoDropped, aesthetic_up ? "consistency_down" : "aesthetic_down"};
}

Manifest::Manifest(std::filesystem::path path) : path_(std::move(path)) {}

// Exclusive advisory lock on the manifest file, shared by every process that
// writes it (orchestrator and review server).
class Manifest::FileLock {
 public:
  explicit FileLock(const std::filesystem::path& path) : path_(path) {
    fd_ = ::open(path.c_str(), O_RDWR | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError("cannot open manifest " + path.string() + ": " + std::strerror(errno));
    if (::flock(fd_, LOCK_EX) != 0) {
      ::close(fd_);
      throw IoError("cannot lock manifest " + path.string() + ": " + std::strerror(errno));
    }
  }
  ~FileLock() {
    ::flock(fd_, LOCK_UN);
    ::close(fd_);
  }
  FileLock(const FileLock&) = delete;
  FileLock& operator=(const FileLock&) = delete;

  int fd() const noexcept { return fd_; }

  // A tail without its newline is left by a writer that died mid-line; the
  // lock guarantees no live writer owns it. Drop it so the next line parses.
  void repair_tail() {
    struct stat st{};
    if (::fstat(fd_, &st) != 0 || st.st_size == 0) return;
    char last = 0;
    if (::pread(fd_, &last, 1, st.st_size - 1) != 1 || last == '\n') return;
    std::string text(static_cast<std::size_t>(st.st_size), '\0');
    if (::pread(fd_, text.data(), text.size(), 0) != static_cast<ssize_t>(text.size())) {
      throw IoError("cannot read manifest " + path_.string());
    }
    const auto cut = text.rfind('\n');
    const off_t keep = cut == std::string::npos ? 0 : static_cast<off_t>(cut + 1);
    spdlog::warn("manifest {}: dropping a {}-byte partial line left by an interrupted write", path_.string(),
                 st.st_size - keep);
    if (::ftruncate(fd_, keep) != 0) throw IoError("cannot truncate manifest " + path_.string());
  }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

void Manifest::append(const PairRecord& record) {
  std::lock_guard lock(mutex_);
  FileLock file(path_);
  append_locked(file, record);
}

void Manifest::append_locked(FileLock& file, const PairRecord& record) {
  file.repair_tail();
  const std::string line = record.to_json().dump() + "\n";
  // One write per line keeps each snapshot atomic under O_APPEND.
  const ssize_t written = ::write(file.fd(), line.data(), line.size());
  const int saved = errno;
  ::fsync(file.fd());
  if (written != static_cast<ssize_t>(line.size())) {
    throw IoError("short write to manifest " + path_.string() + ": " + std::strerror(saved));
  }
}

std::vector<PairRecord> Manifest::latest_view_unlocked() const {
  std::vector<PairRecord> out;
  std::ifstream in(path_, std::ios::binary);
  if (!in) return out;
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::map<std::string, std::size_t> index;
  std::size_t line_no = 0;
  // A trailing fragment without its newline is a write still in flight.
  for (std::size_t pos = 0, end; (end = text.find('\n', pos)) != std::string::npos; pos = end + 1) {
    ++line_no;
    const std::string_view line(text.data() + pos, end - pos);
    if (line.empty()) continue;
    PairRecord r;
    try {
      r = PairRecord::from_json(nlohmann::json::parse(line));
    } catch (const std::exception& e) {
      throw FormatError("corrupt manifest line in " + path_.string() + ": " + e.what(), line_no);
    }
    const auto [it, inserted] = index.emplace(r.id, out.size());
    if (inserted) {
      out.push_back(std::move(r));
    } else {
      out[it->second] = std::move(r);
    }
  }
  return out;
}

std::vector<PairRecord> Manifest::latest_view() const {
  std::lock_guard lock(mutex_);
  return latest_view_unlocked();
}

std::optional<PairRecord> Manifest::find(const std::string& id) const {
  for (auto& r : latest_view()) {
    if (r.id == id) return r;
  }
  return std::nullopt;
}

PairRecord Manifest::update_status(const std::string& id, PairStatus to, std::optional<Verdict> verdict,
                                   std::string reason) {
  std::lock_guard lock(mutex_);
  FileLock file(path_);
  const auto records = latest_view_unlocked();
  const auto it = std::find_if(records.begin(), records.end(), [&](const PairRecord& r) { return r.id == id; });
  if (it == records.end()) throw ContractError("no pair with id " + id);
  if (!transition_allowed(it->status, to)) {
    throw TransitionError("pair " + id + ": illegal transition " + std::string(status_name(it->status)) + " -> " +
                          std::string(status_name(to)));
  }
  PairRecord next = *it;
  next.status = to;
  if (verdict) next.verdict = std::move(verdict);
  if (!reason.empty()) next.drop_reason = std::move(reason);
  append_locked(file, next);
  return next;
}

nlohmann::json IterationStats::to_json() const {
  return {{"iteration", iteration},
          {"prompts_sampled", prompts_sampled},
          {"generated", generated},
          {"auto_kept", auto_kept},
          {"accepted", accepted},
          {"aesthetic_before", aesthetic_before},
          {"aesthetic_after", aesthetic_after},
          {"consistency_before", consistency_before},
          {"consistency_after", consistency_after},
          {"image_cosine", image_cosine},
          {"alpha", alpha},
          {"lora_count", lora_count}};
}

IterationStats IterationStats::from_json(const nlohmann::json& j) {
  IterationStats s;
  s.iteration = j.at("iteration").get<std::size_t>();
  s.prompts_sampled = j.value("prompts_sampled", std::size_t{0});
  s.generated = j.at("generated").get<std::size_t>();
  s.auto_kept = j.at("auto_kept").get<std::size_t>();
  s.accepted = j.at("accepted").get<std::size_t>();
  s.aesthetic_before = j.at("aesthetic_before").get<double>();
  s.aesthetic_after = j.at("aesthetic_after").get<double>();
  s.consistency_before = j.at("consistency_before").get<double>();
  s.consistency_after = j.at("consistency_after").get<double>();
  s.image_cosine = j.at("image_cosine").get<double>();
  s.alpha = j.value("alpha", 0.0);
  s.lora_count = j.value("lora_count", std::size_t{0});
  return s;
}

IterationStats fold_stats(const std::vector<PairRecord>& records, std::size_t iteration) {
  IterationStats s;
  s.iteration = iteration;
  for (const auto& r : records) {
    if (r.iteration != iteration) continue;
    ++s.generated;
    if (r.status != PairStatus::kPending && r.status != PairStatus::kAutoDropped) ++s.auto_kept;
    if (r.status == PairStatus::kAccepted || r.status == PairStatus::kTrained) ++s.accepted;
    if (r.scores) {
      s.aesthetic_before += r.scores->aesthetic_before;
      s.aesthetic_after += r.scores->aesthetic_after;
      s.consistency_before += r.scores->consistency_before;
      s.consistency_after += r.scores->consistency_after;
      s.image_cosine += r.scores->image_cosine;
    }
  }
  s.prompts_sampled = s.generated;
  if (s.generated) {
    const double n = static_cast<double>(s.generated);
    s.aesthetic_before /= n;
    s.aesthetic_after /= n;
    s.consistency_before /= n;
    s.consistency_after /= n;
    s.image_cosine /= n;
  }
  return s;
}

std::vector<IterationStats> fold_all_stats(const std::vector<PairRecord>& records) {
  std::vector<std::size_t> iterations;
  for (const auto& r : records) iterations.push_back(r.iteration);
  std::sort(iterations.begin(), iterations.end());
  iterations.erase(std::unique(iterations.begin(), iterations.end()), iterations.end());
  std::vector<IterationStats> out;
  for (auto k : iterations) out.push_back(fold_stats(records, k));
  return out;
}

// ---------------------------------------------------------------------------
// Review API

struct ReviewServer::Impl {
  std::filesystem::path run_dir;
  std::string cors_origin;
  Manifest manifest;
  httplib::Server server;
  // First verdict wins: the status check and the append happen under this lock.
  std::mutex verdict_mutex;

  Impl(std::filesystem::path dir, std::string origin)
      : run_dir(std::move(dir)), cors_origin(std::move(origin)), manifest(run_dir / "manifest.jsonl") {
    routes();
  }

  static void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
    res.status = status;
    res.set_content(body.dump(), "application/json");
  }

  static void send_error(httplib::Response& res, int status, const std::string& message) {
    send_json(res, status, {{"error", message}});
  }

  std::optional<PairRecord> lookup(const std::string& id) { return manifest.find(id); }

  // Per-iteration aggregates: the manifest fold plus alpha/J from stats.json.
  nlohmann::json stats_json() {
    nlohmann::json out = nlohmann::json::array();
    for (auto s : fold_all_stats(manifest.latest_view())) {
      const auto file = run_dir / ("iter" + std::to_string(s.iteration)) / "stats.json";
      std::ifstream in(file);
      if (in) {
        const auto saved = nlohmann::json::parse(in, nullptr, false);
        if (saved.is_object()) {
          s.alpha = saved.value("alpha", 0.0);
          s.lora_count = saved.value("lora_count", std::size_t{0});
          s.prompts_sampled = saved.value("prompts_sampled", s.prompts_sampled);
        }
      }
      out.push_back(s.to_json());
    }
    return out;
  }

  void routes() {
    server.set_post_routing_handler([this](const httplib::Request&, httplib::Response& res) {
      res.set_header("Access-Control-Allow-Origin", cors_origin);
      res.set_header("Access-Control-Allow-Methods", "GET, POST, OPTIONS");
      res.set_header("Access-Control-Allow-Headers", "Content-Type");
    });
    server.Options(R"(/api/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr ep) {
      std::string message = "internal error";
      try {
        std::rethrow_exception(ep);
      } catch (const std::exception& e) {
        message = e.what();
      } catch (...) {
      }
      send_error(res, 500, message);
    });

    server.Get("/api/pairs", [this](const httplib::Request& req, httplib::Response& res) {
      std::optional<PairStatus> status;
      std::optional<std::size_t> iteration;
      std::size_t page = 1, page_size = 50;
      try {
        if (req.has_param("status") && !req.get_param_value("status").empty()) {
          status = parse_status(req.get_param_value("status"));
        }
        if (req.has_param("iteration") && !req.get_param_value("iteration").empty()) {
          iteration = std::stoul(req.get_param_value("iteration"));
        }
        if (req.has_param("page")) page = std::stoul(req.get_param_value("page"));
        if (req.has_param("page_size")) page_size = std::stoul(req.get_param_value("page_size"));
      } catch (const std::exception& e) {
        return send_error(res, 400, std::string("bad query: ") + e.what());
      }
      if (page == 0 || page_size == 0) return send_error(res, 400, "page and page_size start at 1");
      std::vector<PairRecord> matched;
      for (auto& r : manifest.latest_view()) {
        if (status && r.status != *status) continue;
        if (iteration && r.iteration != *iteration) continue;
        matched.push_back(std::move(r));
      }
      // Pending review first, then manifest order.
      std::stable_partition(matched.begin(), matched.end(),
                            [](const PairRecord& r) { return r.status == PairStatus::kReviewPending; });
      nlohmann::json items = nlohmann::json::array();
      const std::size_t begin = (page - 1) * page_size;
      for (std::size_t i = begin; i < std::min(matched.size(), begin + page_size); ++i) {
        items.push_back(matched[i].to_json());
      }
      send_json(res, 200, {{"items", items}, {"total", matched.size()}, {"page", page}, {"page_size", page_size}});
    });

    server.Get(R"(/api/pairs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      const auto record = lookup(req.matches[1]);
      if (!record) return send_error(res, 404, "no pair " + std::string(req.matches[1]));
      send_json(res, 200, record->to_json());
    });

    server.Get(R"(/api/pairs/([^/]+)/pixels)", [this](const httplib::Request& req, httplib::Response& res) {
      const auto record = lookup(req.matches[1]);
      if (!record) return send_error(res, 404, "no pair " + std::string(req.matches[1]));
      const std::string which = req.has_param("which") ? req.get_param_value("which") : "before";
      if (which != "before" && which != "after") return send_error(res, 400, "which must be before or after");
      ImageBuffer image;
      try {
        image = read_pgm(run_dir / (which == "before" ? record->before_path : record->after_path));
      } catch (const Error& e) {
        return send_error(res, 500, e.what());
      }
      send_json(res, 200, {{"h", image.height()}, {"w", image.width()}, {"pixels", image.pixels()}});
    });

    server.Post(R"(/api/pairs/([^/]+)/verdict)", [this](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const auto body = nlohmann::json::parse(req.body, nullptr, false);
      if (body.is_discarded() || !body.is_object() || !body.contains("decision") || !body["decision"].is_string()) {
        return send_error(res, 400, "body must be a JSON object with a string \"decision\"");
      }
      const auto decision = body["decision"].get<std::string>();
      if (decision != "accept" && decision != "reject") {
        return send_error(res, 400, "decision must be accept or reject");
      }
      for (const char* key : {"reviewer", "note"}) {
        if (body.contains(key) && !body[key].is_string()) {
          return send_error(res, 400, std::string("\"") + key + "\" must be a string");
        }
      }
      std::lock_guard lock(verdict_mutex);
      const auto record = lookup(id);
      if (!record) return send_error(res, 404, "no pair " + id);
      if (record->status != PairStatus::kReviewPending) {
        nlohmann::json conflict = {{"error", "pair is " + std::string(status_name(record->status))},
                                   {"record", record->to_json()}};
        return send_json(res, 409, conflict);
      }
      const Verdict verdict{body.value("reviewer", std::string()), body.value("note", std::string()), utc_now()};
      const auto updated = manifest.update_status(
          id, decision == "accept" ? PairStatus::kAccepted : PairStatus::kRejected, verdict);
      spdlog::info("verdict {} on pair {} by \"{}\"", decision, id, verdict.reviewer);
      send_json(res, 200, updated.to_json());
    });

    server.Get("/api/stats", [this](const httplib::Request&, httplib::Response& res) {
      send_json(res, 200, {{"iterations", stats_json()}});
    });
  }
};

ReviewServer::ReviewServer(std::filesystem::path run_dir, std::string cors_origin)
    : impl_(std::make_unique<Impl>(std::move(run_dir), std::move(cors_origin))) {
  if (!std::filesystem::exists(impl_->manifest.path())) {
    throw IoError("no manifest at " + impl_->manifest.path().string());
  }
}

ReviewServer::~ReviewServer() { stop(); }

int ReviewServer::bind(const std::string& host, int port) {
  if (port == 0) {
    const int bound = impl_->server.bind_to_any_port(host);
    if (bound < 0) throw IoError("cannot bind review server on " + host);
    return bound;
  }
  if (!impl_->server.bind_to_port(host, port)) {
    throw IoError("cannot bind review server on " + host + ":" + std::to_string(port));
  }
  return port;
}

void ReviewServer::listen() { impl_->server.listen_after_bind(); }

void ReviewServer::stop() {
  if (impl_) impl_->server.stop();
}

}  // namespace artaug
