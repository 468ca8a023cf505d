// Shared test fixtures.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

#include "artaug/diffusion.hpp"

namespace fixture {

/// Default-size base model trained once per test binary (about 15 s).
inline const artaug::BaseTrainResult& trained_base() {
  static const artaug::BaseTrainResult result = [] {
    const auto corpus = artaug::build_base_corpus(24, 11, 16, 16);
    artaug::BaseTrainConfig tc;
    tc.seed = 12;
    return artaug::train_base(corpus, artaug::DenoiserConfig{}, artaug::NoiseSchedule{}, tc);
  }();
  return result;
}

/// Largest absolute elementwise difference across all weights.
inline double params_diff(const artaug::DenoiserParams& a, const artaug::DenoiserParams& b) {
  const auto ta = a.named_tensors(), tb = b.named_tensors();
  if (ta.size() != tb.size()) return INFINITY;
  double worst = 0.0;
  for (std::size_t i = 0; i < ta.size(); ++i) {
    const auto &va = ta[i].second->values(), &vb = tb[i].second->values();
    if (va.size() != vb.size()) return INFINITY;
    for (std::size_t j = 0; j < va.size(); ++j) worst = std::max(worst, double(std::fabs(va[j] - vb[j])));
  }
  return worst;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("artaug_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& s) const { return path_ / s; }

 private:
  std::filesystem::path path_;
};

}  // namespace fixture
