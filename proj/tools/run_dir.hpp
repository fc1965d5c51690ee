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

// Run-directory conventions for the command-line tool: a per-directory lock,
// staged outputs that only appear once the command succeeds, and a JSON
// manifest describing how the outputs were made.

#pragma once

#include <openssl/evp.h>
#include <signal.h>
#include <sys/types.h>
#include <unistd.h>
#include <fcntl.h>

#include <cerrno>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include <json.hpp>

#include "advaudio/common.hpp"
#include "advaudio/signal_io.hpp"

#ifndef ADVAUDIO_VERSION
#define ADVAUDIO_VERSION "0.0.0"
#endif

namespace advaudio::cli {

namespace fs = std::filesystem;

inline std::string sha256_hex(std::string_view bytes) {
  std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), &EVP_MD_CTX_free);
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1 ||
      EVP_DigestUpdate(ctx.get(), bytes.data(), bytes.size()) != 1 ||
      EVP_DigestFinal_ex(ctx.get(), digest, &len) != 1) {
    throw Error("sha256 failed");
  }
  std::string out;
  char buf[3];
  for (unsigned i = 0; i < len; ++i) {
    std::snprintf(buf, sizeof buf, "%02x", digest[i]);
    out += buf;
  }
  return out;
}

// Files hash their bytes; directories hash the sorted list of
// "relative-path sha256" lines of the files inside.
inline std::string hash_path(const fs::path& p) {
  if (fs::is_regular_file(p)) return sha256_hex(detail::read_file(p));
  if (!fs::is_directory(p)) throw IoError("input not found: " + p.string());
  std::vector<std::string> lines;
  for (const auto& e : fs::recursive_directory_iterator(p)) {
    if (!e.is_regular_file()) continue;
    lines.push_back(fs::relative(e.path(), p).generic_string() + " " + sha256_hex(detail::read_file(e.path())));
  }
  std::sort(lines.begin(), lines.end());
  std::string all;
  for (const auto& l : lines) all += l + "\n";
  return sha256_hex(all);
}

inline std::string now_utc() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

// Exclusive lock on a run directory, held for the object's lifetime. A lock
// left behind by a dead process is taken over.
class RunLock {
 public:
  explicit RunLock(const fs::path& dir) : path_(dir / ".advaudio.lock") {
    for (int attempt = 0; attempt < 2; ++attempt) {
      const int fd = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_EXCL | O_CLOEXEC, 0644);
      if (fd >= 0) {
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] auto n = ::write(fd, pid.data(), pid.size());
        ::close(fd);
        held_ = true;
        return;
      }
      if (errno != EEXIST) throw IoError("cannot create lock file " + path_.string());
      std::ifstream in(path_);
      long other = 0;
      in >> other;
      if (other > 0 && (::kill(static_cast<pid_t>(other), 0) == 0 || errno == EPERM)) {
        throw IoError("run directory " + dir.string() + " is in use by process " + std::to_string(other));
      }
      fs::remove(path_);
    }
    throw IoError("cannot acquire lock " + path_.string());
  }
  RunLock(const RunLock&) = delete;
  RunLock& operator=(const RunLock&) = delete;
  ~RunLock() {
    if (held_) {
      std::error_code ec;
      fs::remove(path_, ec);
    }
  }

 private:
  fs::path path_;
  bool held_ = false;
};

// One command invocation inside a run directory. Outputs are written under
// a staging directory and moved into place by commit(), which also writes
// the manifest; a run that is never committed leaves no outputs behind.
class Run {
 public:
  Run(fs::path dir, std::string command, std::vector<std::string> argv)
      : dir_(prepare(std::move(dir))), lock_(dir_), command_(std::move(command)) {
    staging_ = dir_ / (".staging-" + command_ + "-" + std::to_string(::getpid()));
    fs::remove_all(staging_);
    manifest_["tool"] = "advaudio";
    manifest_["version"] = ADVAUDIO_VERSION;
    manifest_["command"] = command_;
    manifest_["argv"] = argv;
    manifest_["started_at"] = now_utc();
    manifest_["config"] = nlohmann::json::object();
    manifest_["seeds"] = nlohmann::json::object();
    manifest_["inputs"] = nlohmann::json::array();
    manifest_["outputs"] = nlohmann::json::array();
  }
  Run(const Run&) = delete;
  Run& operator=(const Run&) = delete;
  ~Run() {
    std::error_code ec;
    fs::remove_all(staging_, ec);
  }

  const fs::path& dir() const { return dir_; }

  fs::path resolve(const fs::path& p) const { return p.is_absolute() ? p : dir_ / p; }

  // Resolves an input path and records its hash.
  fs::path input(const fs::path& rel) {
    const fs::path p = resolve(rel);
    if (!fs::exists(p)) throw IoError("missing input: " + p.string());
    manifest_["inputs"].push_back({{"path", rel.generic_string()}, {"sha256", hash_path(p)}});
    return p;
  }

  // Staged location for an output given relative to the run directory.
  fs::path output(const fs::path& rel) {
    if (rel.is_absolute()) throw InvalidArgument("output paths must be relative to the run directory: " + rel.string());
    const fs::path p = staging_ / rel;
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    outputs_.push_back(rel);
    return p;
  }

  void seed(const std::string& name, std::uint64_t value) { manifest_["seeds"][name] = value; }
  nlohmann::json& config() { return manifest_["config"]; }
  nlohmann::json& manifest() { return manifest_; }

  void commit() {
    for (const auto& rel : outputs_) {
      const fs::path from = staging_ / rel;
      if (!fs::exists(from)) throw IoError("output was not produced: " + rel.string());
      const fs::path to = dir_ / rel;
      if (to.has_parent_path()) fs::create_directories(to.parent_path());
      fs::remove_all(to);
      fs::rename(from, to);
      manifest_["outputs"].push_back({{"path", rel.generic_string()}, {"sha256", hash_path(to)}});
    }
    manifest_["finished_at"] = now_utc();
    manifest_["status"] = "complete";
    detail::write_file(dir_ / (command_ + ".manifest.json"), manifest_.dump(2) + "\n");
  }

  // Manifest for long-running commands whose output grows in place.
  void write_manifest_now() {
    manifest_["status"] = "running";
    detail::write_file(dir_ / (command_ + ".manifest.json"), manifest_.dump(2) + "\n");
  }

 private:
  static fs::path prepare(fs::path dir) {
    fs::create_directories(dir);
    return fs::weakly_canonical(fs::absolute(dir));
  }

  fs::path dir_;
  RunLock lock_;
  std::string command_;
  fs::path staging_;
  std::vector<fs::path> outputs_;
  nlohmann::json manifest_;
};

}  // namespace advaudio::cli
