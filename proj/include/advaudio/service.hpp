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

// Listening-study server. Sessions walk the 12 identification items of
// their experiment and then its 6 ABX trials; every accepted answer is
// appended to a checksummed JSON-lines log and synced to disk before the
// acknowledgement is sent. Restarting replays the log.
//
// HTTP API (JSON bodies):
//   POST /api/sessions                 {"participant_id", "experiment"}
//   GET  /api/sessions/{id}            session state
//   GET  /api/sessions/{id}/next       pending item, or {"state": "done"}
//   POST /api/sessions/{id}/answers    {"cursor", "heard_command", "naturalness"}
//                                      or {"cursor", "choice", "confidence"}
//   GET  /api/results                  operator only: the raw response log
//   GET  /api/results/summary          operator only: study report as JSON
//   GET  /audio/{token}                WAV bytes for a served audio token
//   GET  /api/health
// The operator token goes in an "X-Operator-Token" header or as
// "Authorization: Bearer <token>".

#pragma once

// Eigen must come before httplib: the resolver headers it pulls in define
// a "_res" macro that clashes with Eigen parameter names.
#include "advaudio/config.hpp"
#include "advaudio/study.hpp"

#include <fcntl.h>
#include <sys/stat.h>
#include <unistd.h>
#include <zlib.h>

#include <chrono>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <map>
#include <mutex>

#include <httplib.h>
#include <json.hpp>

namespace advaudio {

// Carries the HTTP status the error maps to.
struct ServiceError : Error {
  ServiceError(int status, const std::string& code, const std::string& what)
      : Error(what), status(status), code(code) {}
  int status;
  std::string code;
};

struct ServiceConfig {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path plan_path;
  std::filesystem::path log_path;
  // Directory the plan's audio paths are relative to; defaults to the plan's.
  std::filesystem::path audio_root;
  std::string operator_token;
  // Optional directory served at "/" (for a browser client).
  std::filesystem::path static_dir;

  // Keys under [service] in the config file; ADVAUDIO_* environment
  // variables take precedence.
  static ServiceConfig from(const KeyValueConfig& cfg, bool use_environment = true) {
    ServiceConfig c;
    c.host = cfg.get<std::string>("service.host", c.host);
    c.port = cfg.get<int>("service.port", c.port);
    c.plan_path = cfg.get<std::string>("service.plan", "");
    c.log_path = cfg.get<std::string>("service.log", "");
    c.audio_root = cfg.get<std::string>("service.audio_root", "");
    c.operator_token = cfg.get<std::string>("service.operator_token", "");
    c.static_dir = cfg.get<std::string>("service.static_dir", "");
    if (use_environment) {
      auto env = [](const char* name) -> std::optional<std::string> {
        const char* v = std::getenv(name);
        if (!v) return std::nullopt;
        return std::string(v);
      };
      if (auto v = env("ADVAUDIO_HOST")) c.host = *v;
      if (auto v = env("ADVAUDIO_PORT")) {
        KeyValueConfig tmp;
        tmp.set("port", *v);
        c.port = tmp.require<int>("port");
      }
      if (auto v = env("ADVAUDIO_PLAN")) c.plan_path = *v;
      if (auto v = env("ADVAUDIO_LOG")) c.log_path = *v;
      if (auto v = env("ADVAUDIO_AUDIO_ROOT")) c.audio_root = *v;
      if (auto v = env("ADVAUDIO_OPERATOR_TOKEN")) c.operator_token = *v;
      if (auto v = env("ADVAUDIO_STATIC_DIR")) c.static_dir = *v;
    }
    return c;
  }

  void validate() const {
    if (plan_path.empty()) throw InvalidArgument("service: no plan path configured");
    if (log_path.empty()) throw InvalidArgument("service: no log path configured");
    if (operator_token.empty()) throw InvalidArgument("service: no operator token configured");
    if (port < 0 || port > 65535) throw InvalidArgument("service: port out of range");
  }
};

namespace detail {

inline std::string crc_hex(std::string_view s) {
  const auto crc = ::crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size()));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(crc));
  return buf;
}

inline std::string random_hex(std::size_t bytes) {
  static std::mutex m;
  static std::random_device rd;
  std::lock_guard lock(m);
  std::string out;
  static const char* digits = "0123456789abcdef";
  for (std::size_t i = 0; i < bytes; ++i) {
    const auto b = rd() & 0xffu;
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 15]);
  }
  return out;
}

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const auto t = std::chrono::system_clock::to_time_t(now);
  const auto ms = std::chrono::duration_cast<std::chrono::milliseconds>(now.time_since_epoch()).count() % 1000;
  std::tm tm{};
  gmtime_r(&t, &tm);
  char date[32];
  std::strftime(date, sizeof date, "%Y-%m-%dT%H:%M:%S", &tm);
  char frac[8];
  std::snprintf(frac, sizeof frac, ".%03dZ", static_cast<int>(ms));
  return std::string(date) + frac;
}

}  // namespace detail

// Append-only JSON-lines file. Each record carries "crc", the CRC-32 of the
// record serialized without it.
class ResponseLog {
 public:
  ResponseLog() = default;
  ResponseLog(const ResponseLog&) = delete;
  ResponseLog& operator=(const ResponseLog&) = delete;
  ~ResponseLog() {
    if (fd_ >= 0) ::close(fd_);
  }

  // Opens (creating if needed) and returns the intact records. A torn or
  // corrupt final line is dropped from the file; corruption before the
  // last line is a FormatError.
  std::vector<nlohmann::json> open(const std::filesystem::path& path) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::string text;
    if (std::filesystem::exists(path)) text = detail::read_file(path);
    std::vector<nlohmann::json> records;
    std::size_t pos = 0, good_end = 0, line_no = 0;
    while (pos < text.size()) {
      const auto nl = text.find('\n', pos);
      ++line_no;
      const bool last = nl == std::string::npos || nl + 1 == text.size();
      auto bad = [&](const std::string& why) {
        if (!last) throw FormatError("response log line " + std::to_string(line_no) + ": " + why);
      };
      if (nl == std::string::npos) {
        bad("unterminated record");
        break;
      }
      auto record = verify(std::string_view(text).substr(pos, nl - pos));
      if (!record) {
        bad("checksum mismatch");
        break;
      }
      records.push_back(std::move(*record));
      pos = nl + 1;
      good_end = pos;
    }
    fd_ = ::open(path.c_str(), O_WRONLY | O_CREAT | O_APPEND | O_CLOEXEC, 0644);
    if (fd_ < 0) throw IoError("cannot open response log " + path.string());
    if (good_end < text.size() && ::ftruncate(fd_, static_cast<off_t>(good_end)) != 0) {
      throw IoError("cannot truncate torn record in " + path.string());
    }
    path_ = path;
    return records;
  }

  // Returns once the record is on disk.
  void append(nlohmann::json record) {
    if (fd_ < 0) throw IoError("response log not open");
    record.erase("crc");
    record["crc"] = detail::crc_hex(record.dump());
    const std::string line = record.dump() + "\n";
    std::size_t done = 0;
    while (done < line.size()) {
      const auto n = ::write(fd_, line.data() + done, line.size() - done);
      if (n < 0) {
        if (errno == EINTR) continue;
        throw IoError("write to response log failed");
      }
      done += static_cast<std::size_t>(n);
    }
    if (::fsync(fd_) != 0) throw IoError("fsync of response log failed");
  }

  static std::optional<nlohmann::json> verify(std::string_view line) {
    nlohmann::json j = nlohmann::json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object() || !j.contains("crc") || !j["crc"].is_string()) return std::nullopt;
    const std::string crc = j["crc"].get<std::string>();
    j.erase("crc");
    if (detail::crc_hex(j.dump()) != crc) return std::nullopt;
    return j;
  }

  const std::filesystem::path& path() const { return path_; }

 private:
  int fd_ = -1;
  std::filesystem::path path_;
};

// Session bookkeeping and item serving, independent of the transport.
class ExperimentService {
 public:
  struct Session {
    std::string session_id;
    std::string participant_id;
    std::size_t experiment = 0;
    std::size_t cursor = 0;
    std::vector<nlohmann::json> answers;  // answer fields by cursor position
  };

  ExperimentService(StudyPlan plan, std::filesystem::path log_path, std::filesystem::path audio_root)
      : plan_(std::move(plan)), audio_root_(std::move(audio_root)) {
    for (const auto& r : log_.open(log_path)) replay(r);
  }

  const StudyPlan& plan() const { return plan_; }

  nlohmann::json create_session(const nlohmann::json& body) {
    std::lock_guard lock(mutex_);
    std::string participant;
    std::size_t experiment = 0;
    try {
      participant = body.at("participant_id").get<std::string>();
      experiment = body.at("experiment").get<std::size_t>();
    } catch (const nlohmann::json::exception&) {
      throw ServiceError(422, "schema", "expected {\"participant_id\": string, \"experiment\": 1..9}");
    }
    if (participant.empty()) throw ServiceError(422, "schema", "empty participant_id");
    if (experiment < 1 || experiment > plan_.experiments.size()) {
      throw ServiceError(422, "schema", "experiment must be in 1.." + std::to_string(plan_.experiments.size()));
    }
    const Experiment& ex = plan_.experiments[experiment - 1];
    if (std::find(ex.participants.begin(), ex.participants.end(), participant) == ex.participants.end()) {
      throw ServiceError(403, "not_assigned",
                         "participant " + participant + " is not assigned to experiment " + std::to_string(experiment));
    }
    for (const auto& [id, s] : sessions_) {
      if (s.participant_id == participant && s.experiment == experiment) return status(s);
    }
    Session s;
    s.session_id = detail::random_hex(16);
    s.participant_id = participant;
    s.experiment = experiment;
    log_.append({{"type", "session"},
                 {"session_id", s.session_id},
                 {"participant_id", participant},
                 {"experiment", experiment},
                 {"timestamp", detail::utc_timestamp()}});
    auto [it, _] = sessions_.emplace(s.session_id, std::move(s));
    return status(it->second);
  }

  nlohmann::json session_status(const std::string& session_id) {
    std::lock_guard lock(mutex_);
    return status(session(session_id));
  }

  nlohmann::json next_item(const std::string& session_id) {
    std::lock_guard lock(mutex_);
    const Session& s = session(session_id);
    const Experiment& ex = plan_.experiments[s.experiment - 1];
    nlohmann::json out = status(s);
    const std::size_t n1 = ex.part1.size();
    if (s.cursor < n1) {
      const StudyItem& item = ex.part1[s.cursor];
      nlohmann::json anchors = nlohmann::json::array();
      for (std::size_t i = 0; i < kNaturalnessAnchors.size(); ++i) {
        anchors.push_back({{"value", i + 1}, {"text", kNaturalnessAnchors[i]}});
      }
      out["item"] = {
          {"part", 1},
          {"index", s.cursor + 1},
          {"of", n1},
          {"audio", serve(item.audio)},
          {"answer_schema",
           {{"heard_command", {{"type", "choice"}, {"choices", kLabelNames}}},
            {"naturalness", {{"type", "integer"}, {"min", 1}, {"max", 5}, {"anchors", anchors}}}}}};
    } else if (s.cursor < n1 + ex.part2.size()) {
      const ABXTrial& t = ex.part2[s.cursor - n1];
      // Three fresh tokens; X's maps to the same file as A's or B's.
      out["item"] = {{"part", 2},
                     {"index", s.cursor - n1 + 1},
                     {"of", ex.part2.size()},
                     {"audio",
                      {{"A", serve(t.audio_for(AbChoice::a))},
                       {"B", serve(t.audio_for(AbChoice::b))},
                       {"X", serve(t.audio_for(t.x_is))}}},
                     {"answer_schema",
                      {{"choice", {{"type", "choice"}, {"choices", {"A", "B"}}}},
                       {"confidence", {{"type", "choice"}, {"choices", {"low", "high"}}}}}}};
    }
    return out;
  }

  nlohmann::json submit_answer(const std::string& session_id, const nlohmann::json& body) {
    std::lock_guard lock(mutex_);
    Session& s = session(session_id);
    const Experiment& ex = plan_.experiments[s.experiment - 1];
    if (!body.is_object() || !body.contains("cursor") || !body["cursor"].is_number_unsigned()) {
      throw ServiceError(422, "schema", "answer needs a non-negative integer \"cursor\"");
    }
    const auto cursor = body["cursor"].get<std::size_t>();
    nlohmann::json fields = body;
    fields.erase("cursor");
    if (cursor < s.cursor) {
      if (s.answers[cursor] == fields) {
        nlohmann::json ack = status(s);
        ack["ack"] = true;
        ack["duplicate"] = true;
        ack["answered"] = cursor;
        return ack;
      }
      throw ServiceError(409, "stale_cursor",
                         "cursor " + std::to_string(cursor) + " was already answered; pending is " +
                             std::to_string(s.cursor));
    }
    const std::size_t total = ex.part1.size() + ex.part2.size();
    if (s.cursor >= total) throw ServiceError(409, "done", "session is complete");
    if (cursor > s.cursor) {
      throw ServiceError(409, "stale_cursor",
                         "cursor " + std::to_string(cursor) + " is ahead of pending " + std::to_string(s.cursor));
    }
    const bool part1 = cursor < ex.part1.size();
    static const std::set<std::string> p1_keys = {"heard_command", "naturalness"};
    static const std::set<std::string> p2_keys = {"choice", "confidence"};
    for (const auto& [k, v] : fields.items()) {
      if (!(part1 ? p1_keys : p2_keys).contains(k)) throw ServiceError(422, "schema", "unexpected field \"" + k + "\"");
    }
    nlohmann::json record = fields;
    record["participant_id"] = s.participant_id;
    record["experiment"] = s.experiment;
    record["ref"] = part1 ? ex.part1[cursor].item_id : ex.part2[cursor - ex.part1.size()].trial_id;
    try {
      const Response r = response_from_json(record);
      if (r.is_part1() != part1) throw InvalidArgument("answer does not match the pending item's part");
    } catch (const InvalidArgument& e) {
      throw ServiceError(422, "schema", e.what());
    }
    record["type"] = "answer";
    record["session_id"] = s.session_id;
    record["cursor"] = cursor;
    record["timestamp"] = detail::utc_timestamp();
    log_.append(record);
    s.answers.push_back(fields);
    ++s.cursor;
    nlohmann::json ack = status(s);
    ack["ack"] = true;
    ack["duplicate"] = false;
    ack["answered"] = cursor;
    return ack;
  }

  std::optional<std::filesystem::path> audio_path(const std::string& token) {
    std::lock_guard lock(mutex_);
    auto it = tokens_.find(token);
    if (it == tokens_.end()) return std::nullopt;
    return it->second;
  }

  std::string results_jsonl() {
    std::lock_guard lock(mutex_);
    return detail::read_file(log_.path());
  }

 private:
  void replay(const nlohmann::json& r) {
    const auto type = r.value("type", std::string());
    if (type == "session") {
      Session s;
      s.session_id = r.at("session_id").get<std::string>();
      s.participant_id = r.at("participant_id").get<std::string>();
      s.experiment = r.at("experiment").get<std::size_t>();
      if (s.experiment < 1 || s.experiment > plan_.experiments.size()) {
        throw FormatError("response log: session for unknown experiment");
      }
      sessions_.emplace(s.session_id, std::move(s));
    } else if (type == "answer") {
      auto it = sessions_.find(r.at("session_id").get<std::string>());
      if (it == sessions_.end()) throw FormatError("response log: answer for unknown session");
      Session& s = it->second;
      if (r.at("cursor").get<std::size_t>() != s.cursor) throw FormatError("response log: answers out of order");
      nlohmann::json fields;
      for (const char* k : {"heard_command", "naturalness", "choice", "confidence"}) {
        if (r.contains(k)) fields[k] = r[k];
      }
      s.answers.push_back(std::move(fields));
      ++s.cursor;
    } else {
      throw FormatError("response log: unknown record type '" + type + "'");
    }
  }

  Session& session(const std::string& id) {
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ServiceError(404, "unknown_session", "no session " + id);
    return it->second;
  }

  nlohmann::json status(const Session& s) const {
    const Experiment& ex = plan_.experiments[s.experiment - 1];
    const std::size_t n1 = ex.part1.size();
    const char* state = s.cursor < n1 ? "part1" : s.cursor < n1 + ex.part2.size() ? "part2" : "done";
    return {{"session_id", s.session_id},
            {"participant_id", s.participant_id},
            {"experiment", s.experiment},
            {"cursor", s.cursor},
            {"total", n1 + ex.part2.size()},
            {"state", state}};
  }

  std::string serve(const std::string& relative) {
    std::string token = detail::random_hex(16);
    tokens_.emplace(token, audio_root_ / relative);
    return "/audio/" + token;
  }

  StudyPlan plan_;
  std::filesystem::path audio_root_;
  ResponseLog log_;
  std::mutex mutex_;
  std::map<std::string, Session> sessions_;
  std::map<std::string, std::filesystem::path> tokens_;
};

class HttpService {
 public:
  explicit HttpService(const ServiceConfig& config)
      : config_(validated(config)),
        service_(deserialize_plan(detail::read_file(config.plan_path)), config.log_path,
                 config.audio_root.empty() ? config.plan_path.parent_path() : config.audio_root) {
    routes();
  }

  // Binds and returns the bound port (useful with port 0).
  int bind() {
    const int port = config_.port == 0 ? server_.bind_to_any_port(config_.host)
                                       : (server_.bind_to_port(config_.host, config_.port) ? config_.port : -1);
    if (port < 0) throw IoError("cannot bind " + config_.host + ":" + std::to_string(config_.port));
    return port;
  }

  // Blocks until stop().
  bool run() { return server_.listen_after_bind(); }
  void stop() { server_.stop(); }
  ExperimentService& service() { return service_; }

 private:
  void routes() {
    using httplib::Request;
    using httplib::Response;
    auto json_reply = [](Response& res, const nlohmann::json& j, int status = 200) {
      res.status = status;
      res.set_content(j.dump(), "application/json");
    };
    auto guarded = [json_reply](auto&& fn) {
      return [fn, json_reply](const Request& req, Response& res) {
        res.set_header("Cache-Control", "no-store");
        try {
          fn(req, res);
        } catch (const ServiceError& e) {
          json_reply(res, {{"error", e.code}, {"message", e.what()}}, e.status);
        } catch (const nlohmann::json::exception& e) {
          json_reply(res, {{"error", "schema"}, {"message", e.what()}}, 400);
        } catch (const std::exception& e) {
          json_reply(res, {{"error", "internal"}, {"message", e.what()}}, 500);
        }
      };
    };
    auto parse_body = [](const Request& req) {
      auto j = nlohmann::json::parse(req.body, nullptr, false);
      if (j.is_discarded() || !j.is_object()) throw ServiceError(400, "schema", "body must be a JSON object");
      return j;
    };

    server_.Get("/api/health", guarded([json_reply](const Request&, Response& res) {
      json_reply(res, {{"status", "ok"}});
    }));
    server_.Post("/api/sessions", guarded([this, json_reply, parse_body](const Request& req, Response& res) {
      json_reply(res, service_.create_session(parse_body(req)), 201);
    }));
    server_.Get("/api/sessions/:id", guarded([this, json_reply](const Request& req, Response& res) {
      json_reply(res, service_.session_status(req.path_params.at("id")));
    }));
    server_.Get("/api/sessions/:id/next", guarded([this, json_reply](const Request& req, Response& res) {
      json_reply(res, service_.next_item(req.path_params.at("id")));
    }));
    server_.Post("/api/sessions/:id/answers", guarded([this, json_reply, parse_body](const Request& req, Response& res) {
      json_reply(res, service_.submit_answer(req.path_params.at("id"), parse_body(req)));
    }));
    server_.Get("/api/results", guarded([this](const Request& req, Response& res) {
      authorize(req);
      res.set_content(service_.results_jsonl(), "application/x-ndjson");
    }));
    server_.Get("/api/results/summary", guarded([this, json_reply](const Request& req, Response& res) {
      authorize(req);
      const auto responses = parse_responses(service_.results_jsonl());
      const StudyReport rep = summarize(responses, service_.plan());
      json_reply(res, report_json(rep));
    }));
    server_.Get("/audio/:token", guarded([this](const Request& req, Response& res) {
      auto path = service_.audio_path(req.path_params.at("token"));
      if (!path) throw ServiceError(404, "unknown_audio", "no such audio");
      res.set_content(detail::read_file(*path), "audio/wav");
    }));
    if (!config_.static_dir.empty()) server_.set_mount_point("/", config_.static_dir.string());
  }

  static ServiceConfig validated(ServiceConfig c) {
    c.validate();
    return c;
  }

  void authorize(const httplib::Request& req) const {
    std::string given = req.get_header_value("X-Operator-Token");
    const std::string auth = req.get_header_value("Authorization");
    if (given.empty() && auth.rfind("Bearer ", 0) == 0) given = auth.substr(7);
    if (given.empty() || given != config_.operator_token) {
      throw ServiceError(403, "forbidden", "operator token required");
    }
  }

  static nlohmann::json report_json(const StudyReport& rep) {
    nlohmann::json j;
    j["received_responses"] = rep.received_responses;
    j["expected_responses"] = rep.expected_responses;
    j["complete"] = rep.complete();
    nlohmann::json acc = nlohmann::json::array();
    for (std::size_t k = 0; k < 2; ++k) {
      for (std::size_t l = 0; l < 3; ++l) {
        const auto& p = rep.accuracy[k][l];
        acc.push_back({{"kind", to_string(static_cast<ItemKind>(k))},
                       {"intensity", to_string(static_cast<IntensityLevel>(l))},
                       {"correct", p.k},
                       {"total", p.n}});
      }
    }
    j["accuracy"] = acc;
    nlohmann::json abx = nlohmann::json::array();
    for (const auto& a : rep.abx) {
      nlohmann::json row = {{"intensity", to_string(a.intensity)},
                            {"successes", a.success.k},
                            {"trials", a.success.n},
                            {"high_confidence", a.high_confidence.k}};
      if (a.test_greater) row["p_greater"] = a.test_greater->p_value;
      if (a.ci) row["ci"] = {a.ci->first, a.ci->second};
      abx.push_back(row);
    }
    j["abx"] = abx;
    return j;
  }

  ServiceConfig config_;
  ExperimentService service_;
  httplib::Server server_;
};

}  // namespace advaudio
