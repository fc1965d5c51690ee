// Copyright 2026 The advaudio Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace advaudio {

inline constexpr int kSampleRate = 16000;
inline constexpr std::size_t kClipLength = 16000;
inline constexpr std::size_t kNumClasses = 12;
// One int16 quantum; also the floor inside every log of the metrics.
inline constexpr double kQuantum = 1.0 / 32768.0;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Violated precondition on an argument (degenerate input, shape mismatch).
struct InvalidArgument : Error {
  using Error::Error;
};

// Malformed or truncated file contents.
struct FormatError : Error {
  using Error::Error;
};

struct VersionError : FormatError {
  using FormatError::FormatError;
};

struct IoError : Error {
  using Error::Error;
};

enum class CommandLabel : std::uint8_t {
  silence,
  unknown,
  yes,
  no,
  up,
  down,
  left,
  right,
  on,
  off,
  stop,
  go,
};

inline constexpr std::array<std::string_view, kNumClasses> kLabelNames = {
    "silence", "unknown", "yes",  "no",  "up",   "down",
    "left",    "right",   "on",   "off", "stop", "go"};

inline constexpr std::size_t index_of(CommandLabel label) {
  return static_cast<std::size_t>(label);
}

inline CommandLabel label_at(std::size_t index) {
  if (index >= kNumClasses) {
    throw InvalidArgument("class index out of range: " + std::to_string(index));
  }
  return static_cast<CommandLabel>(index);
}

inline constexpr std::string_view to_string(CommandLabel label) {
  return kLabelNames[index_of(label)];
}

inline std::optional<CommandLabel> parse_label(std::string_view name) {
  for (std::size_t i = 0; i < kNumClasses; ++i) {
    if (kLabelNames[i] == name) return static_cast<CommandLabel>(i);
  }
  return std::nullopt;
}

inline CommandLabel parse_label_or_throw(std::string_view name) {
  auto label = parse_label(name);
  if (!label) throw InvalidArgument("unknown command label '" + std::string(name) + "'");
  return *label;
}

// silence and unknown are not spoken target commands.
inline constexpr bool is_special(CommandLabel label) {
  return label == CommandLabel::silence || label == CommandLabel::unknown;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double l2_norm(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline std::vector<double> add(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw InvalidArgument("length mismatch in add");
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  return out;
}

inline std::vector<double> scaled(std::span<const double> v, double alpha) {
  std::vector<double> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) out[i] = alpha * v[i];
  return out;
}

// Index of the largest value; ties go to the lowest index.
inline std::size_t argmax(std::span<const double> values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[best]) best = i;
  }
  return best;
}

// Runs fn(i) for i in [0, n) over a small pool of threads. Each index is
// handled by exactly one call, so callers that write results into slot i get
// output independent of the thread count.
template <class Fn>
void parallel_for(std::size_t n, Fn&& fn, unsigned max_threads = 0) {
  unsigned hw = std::max(1u, std::thread::hardware_concurrency());
  unsigned threads = max_threads == 0 ? hw : std::min(max_threads, hw);
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::jthread> pool;
  pool.reserve(threads);
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  pool.clear();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace advaudio
