#pragma once

#include <atomic>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>

#include <unistd.h>

#include "metric_lens/fixtures.hpp"
#include "metric_lens/linearize.hpp"
#include "metric_lens/nn.hpp"

namespace testing {

using namespace mlens;

struct Sample {
  ModelManifest model;
  Tensor image;
  ForwardTrace trace;
  LinearizedHead head;
};

inline Sample run_model(const ModelManifest& model, Tensor image) {
  Sample s{model, std::move(image), {}, {}};
  s.trace = forward(s.model, s.image);
  s.head = linearize_head(s.model, s.trace);
  return s;
}

inline Tensor random_image(const ModelManifest& model, Rng& rng) {
  return random_uniform(model.input_shape, rng, 0.0, 1.0);
}

inline ModelManifest toy(HeadPattern head, Rng& rng, bool bias = true) {
  ToyModelOptions o;
  o.head = head;
  o.with_bias = bias;
  return make_toy_model(o, rng);
}

/// Code of the mlens::Error thrown by `fn`, or nullopt when nothing is thrown.
inline std::optional<ErrorCode> code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return std::nullopt;
}

template <typename A, typename B>
double max_abs_diff(const A& a, const B& b) {
  return (a.template cast<double>() - b.template cast<double>()).cwiseAbs().maxCoeff();
}

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("metric_lens_" + tag + "_" + std::to_string(::getpid()) + "_" +
             std::to_string(counter++));
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
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

}  // namespace testing
