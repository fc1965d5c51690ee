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

// Run/experiment configuration: "key = value" lines, '#' comments and
// "[section]" headers that prefix the following keys with "section.".

#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "advaudio/common.hpp"
#include "advaudio/features.hpp"

namespace advaudio {

class KeyValueConfig {
 public:
  KeyValueConfig() = default;

  static KeyValueConfig parse(std::string_view text) {
    KeyValueConfig cfg;
    std::string section;
    std::size_t line_no = 0;
    std::istringstream in{std::string(text)};
    std::string line;
    while (std::getline(in, line)) {
      ++line_no;
      if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
      const std::string trimmed = trim(line);
      if (trimmed.empty()) continue;
      if (trimmed.front() == '[') {
        if (trimmed.back() != ']') throw FormatError("config line " + std::to_string(line_no) + ": bad section");
        section = trim(trimmed.substr(1, trimmed.size() - 2));
        continue;
      }
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw FormatError("config line " + std::to_string(line_no) + ": expected 'key = value'");
      }
      std::string key = trim(trimmed.substr(0, eq));
      if (key.empty()) throw FormatError("config line " + std::to_string(line_no) + ": empty key");
      if (!section.empty()) key = section + "." + key;
      cfg.values_[key] = trim(trimmed.substr(eq + 1));
    }
    return cfg;
  }

  static KeyValueConfig load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse(ss.str());
  }

  bool contains(const std::string& key) const { return values_.contains(key); }

  std::optional<std::string> raw(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) return std::nullopt;
    return it->second;
  }

  template <class T>
  T get(const std::string& key, T fallback) const {
    auto it = values_.find(key);
    if (it == values_.end()) return fallback;
    return convert<T>(key, it->second);
  }

  template <class T>
  T require(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw InvalidArgument("config: missing key '" + key + "'");
    return convert<T>(key, it->second);
  }

  template <class T>
  void set(const std::string& key, const T& value) {
    if constexpr (std::is_convertible_v<const T&, std::string_view>) {
      values_[key] = std::string(std::string_view(value));
    } else if constexpr (std::is_floating_point_v<T>) {
      char buf[64];
      auto [end, ec] = std::to_chars(buf, buf + sizeof buf, value);
      values_[key] = std::string(buf, end);
    } else {
      values_[key] = std::to_string(value);
    }
  }

  void merge(const KeyValueConfig& other) {
    for (const auto& [k, v] : other.values_) values_[k] = v;
  }

  const std::map<std::string, std::string>& values() const { return values_; }

  std::string to_string() const {
    std::string out;
    for (const auto& [k, v] : values_) out += k + " = " + v + "\n";
    return out;
  }

 private:
  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return std::string(s.substr(b, e - b + 1));
  }

  template <class T>
  static T convert(const std::string& key, const std::string& text) {
    if constexpr (std::is_same_v<T, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1" || text == "yes") return true;
      if (text == "false" || text == "0" || text == "no") return false;
      throw InvalidArgument("config: '" + key + "' is not a boolean");
    } else {
      T value{};
      auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
      if (ec != std::errc() || ptr != text.data() + text.size()) {
        throw InvalidArgument("config: '" + key + "' has invalid value '" + text + "'");
      }
      return value;
    }
  }

  std::map<std::string, std::string> values_;
};

inline void write_feature_config(KeyValueConfig& cfg, const FeatureConfig& f, const std::string& prefix = "features.") {
  cfg.set(prefix + "frame_length", f.frame_length);
  cfg.set(prefix + "hop", f.hop);
  cfg.set(prefix + "window", f.window);
  cfg.set(prefix + "mel_filters", f.mel_filters);
  cfg.set(prefix + "mel_low_hz", f.mel_low_hz);
  cfg.set(prefix + "mel_high_hz", f.mel_high_hz);
  cfg.set(prefix + "num_mfcc", f.num_mfcc);
  cfg.set(prefix + "log_floor", f.log_floor);
  cfg.set(prefix + "sample_rate", f.sample_rate);
}

inline FeatureConfig read_feature_config(const KeyValueConfig& cfg, const std::string& prefix = "features.") {
  FeatureConfig f;
  f.frame_length = cfg.get(prefix + "frame_length", f.frame_length);
  f.hop = cfg.get(prefix + "hop", f.hop);
  f.window = cfg.get(prefix + "window", f.window);
  f.mel_filters = cfg.get(prefix + "mel_filters", f.mel_filters);
  f.mel_low_hz = cfg.get(prefix + "mel_low_hz", f.mel_low_hz);
  f.mel_high_hz = cfg.get(prefix + "mel_high_hz", f.mel_high_hz);
  f.num_mfcc = cfg.get(prefix + "num_mfcc", f.num_mfcc);
  f.log_floor = cfg.get(prefix + "log_floor", f.log_floor);
  f.sample_rate = cfg.get(prefix + "sample_rate", f.sample_rate);
  f.validate();
  return f;
}

}  // namespace advaudio
