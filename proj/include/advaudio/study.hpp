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

// Listening-study design (nine experiments, three per intensity level, each
// with 12 identification items and 6 ABX trials), response records and the
// analysis of a finished study.

#pragma once

#include <map>
#include <ostream>
#include <set>

#include <json.hpp>

#include "advaudio/attacks.hpp"
#include "advaudio/distortion.hpp"
#include "advaudio/evaluation.hpp"
#include "advaudio/stats.hpp"

namespace advaudio {

enum class ItemKind : std::uint8_t { clean, adversarial };

inline constexpr std::string_view to_string(ItemKind k) { return k == ItemKind::clean ? "clean" : "adversarial"; }

enum class AbChoice : std::uint8_t { a, b };

inline constexpr std::string_view to_string(AbChoice c) { return c == AbChoice::a ? "A" : "B"; }

enum class Confidence : std::uint8_t { low, high };

inline constexpr std::string_view to_string(Confidence c) { return c == Confidence::low ? "low" : "high"; }

inline constexpr std::array<std::string_view, 5> kNaturalnessAnchors = {
    "Clearly perturbed audio with an artificial sound or noise.",
    "The audio is slightly perturbed by an artificial sound or noise, not likely to be caused by the low quality of "
    "the microphones or ambient sounds.",
    "Not sure",
    "No obvious signs of an artificial perturbation. The detectable perturbations are likely to be caused by a low- or "
    "mid-quality microphone, ambient sounds or ordinary noises.",
    "The audio clip clearly does not contain any artificial perturbation.",
};

struct StudyItem {
  std::string item_id;
  std::string utterance_id;
  CommandLabel label = CommandLabel::silence;
  ItemKind kind = ItemKind::clean;
  std::string audio;  // WAV path relative to the plan file
  std::string perturbation_id;
  double intensity_db = 0.0;
  std::size_t model_index = 0;  // model prediction on the served waveform
};

struct ABXTrial {
  std::string trial_id;
  std::string utterance_id;
  CommandLabel label = CommandLabel::silence;
  std::string clean_audio;
  std::string adversarial_audio;
  std::string perturbation_id;
  bool clean_is_a = true;
  AbChoice x_is = AbChoice::a;
  std::uint64_t seed = 0;
  double intensity_db = 0.0;

  const std::string& audio_for(AbChoice c) const {
    return (c == AbChoice::a) == clean_is_a ? clean_audio : adversarial_audio;
  }
};

struct Experiment {
  std::size_t index = 0;  // 1-based
  IntensityLevel intensity = IntensityLevel::low;
  std::vector<StudyItem> part1;
  std::vector<ABXTrial> part2;
  std::vector<std::string> participants;

  std::size_t count(ItemKind k) const {
    return static_cast<std::size_t>(std::count_if(part1.begin(), part1.end(), [k](const auto& i) { return i.kind == k; }));
  }
};

struct StudyPlan {
  std::uint64_t seed = 0;
  std::vector<Experiment> experiments;

  const Experiment& experiment(std::size_t index) const {
    if (index < 1 || index > experiments.size()) throw InvalidArgument("no experiment " + std::to_string(index));
    return experiments[index - 1];
  }
};

// An adversarial waveform for a pool clip, with its perturbation id.
struct AdversarialExample {
  std::string clip_id;
  std::vector<double> samples;
  std::string perturbation_id;
};

// x + v clipped into range and rounded to int16 steps, i.e. exactly what a
// WAV export will hold.
inline std::vector<double> make_adversarial_waveform(std::span<const double> x, std::span<const double> v) {
  std::vector<double> out = clipped_sum(x, v);
  for (double& s : out) s = from_int16(to_int16(s));
  return out;
}

struct ExperimentShape {
  IntensityLevel intensity;
  std::size_t clean;
  std::size_t adversarial;
};

struct PlanConfig {
  std::vector<ExperimentShape> experiments = {
      {IntensityLevel::low, 6, 6},    {IntensityLevel::low, 6, 6},    {IntensityLevel::low, 5, 7},
      {IntensityLevel::medium, 6, 6}, {IntensityLevel::medium, 6, 6}, {IntensityLevel::medium, 7, 5},
      {IntensityLevel::high, 6, 6},   {IntensityLevel::high, 6, 6},   {IntensityLevel::high, 7, 5},
  };
  std::size_t abx_trials = 6;
  std::size_t participants_per_experiment = 2;
  std::string audio_dir = "audio";
};

struct PlanInfeasible : InvalidArgument {
  using InvalidArgument::InvalidArgument;
};

namespace detail {

inline std::string clean_audio_name(const std::string& dir, const std::string& clip_id) {
  return dir + "/" + clip_id + ".wav";
}

inline std::string adversarial_audio_name(const std::string& dir, const std::string& clip_id,
                                          const std::string& perturbation_id) {
  return dir + "/" + clip_id + "." + perturbation_id + ".wav";
}

}  // namespace detail

// Every clip gets a clean role only if the model labels it correctly, and an
// adversarial role only if additionally its adversarial waveform is
// misclassified. Within each intensity level, each slot takes the command
// used least so far (ties in a seeded order) and a seeded random utterance of
// it; an utterance is used at most once per plan.
template <ScoringModel M>
StudyPlan build_plan(std::span<const AudioClip> pool, std::span<const AdversarialExample> adv_pool, const M& model,
                     std::uint64_t seed, const PlanConfig& config = {}) {
  std::map<std::string, const AudioClip*> by_id;
  for (const auto& c : pool) {
    if (!by_id.emplace(c.id, &c).second) throw InvalidArgument("build_plan: duplicate clip id " + c.id);
  }
  std::map<std::string, const AdversarialExample*> adv_by_id;
  for (const auto& a : adv_pool) {
    if (!by_id.contains(a.clip_id)) throw InvalidArgument("build_plan: adversarial example for unknown clip " + a.clip_id);
    if (a.samples.size() != kClipLength) throw InvalidArgument("build_plan: adversarial example length");
    adv_by_id.emplace(a.clip_id, &a);  // first example per clip wins
  }

  struct Candidate {
    const AudioClip* clip;
    const AdversarialExample* adv;  // null if no verified adversarial role
    double db;
    std::size_t clean_index, adv_index;
  };
  std::vector<Candidate> cands;
  {
    std::vector<Candidate> all(pool.size());
    parallel_for(pool.size(), [&](std::size_t i) {
      const AudioClip& c = pool[i];
      Candidate cand{&c, nullptr, int16_db_mean(c.samples), predict_index(model, c.samples), 0};
      auto it = adv_by_id.find(c.id);
      if (it != adv_by_id.end()) {
        cand.adv_index = predict_index(model, it->second->samples);
        if (cand.adv_index != index_of(c.label)) cand.adv = it->second;
      }
      all[i] = cand;
    });
    for (const auto& c : all) {
      if (c.clean_index == index_of(c.clip->label)) cands.push_back(c);
    }
  }

  StudyPlan plan;
  plan.seed = seed;
  std::mt19937_64 rng(seed);
  std::set<std::string> used;

  for (IntensityLevel level : {IntensityLevel::low, IntensityLevel::medium, IntensityLevel::high}) {
    // Per-command candidate lists for this level, in seeded order.
    std::array<std::vector<const Candidate*>, kNumClasses> by_label;
    for (const auto& c : cands) {
      if (intensity_from_db(c.db) == level) by_label[index_of(c.clip->label)].push_back(&c);
    }
    for (auto& v : by_label) std::shuffle(v.begin(), v.end(), rng);
    std::array<std::size_t, kNumClasses> tie_order;
    std::iota(tie_order.begin(), tie_order.end(), std::size_t{0});
    std::shuffle(tie_order.begin(), tie_order.end(), rng);
    std::array<std::size_t, kNumClasses> part1_uses{}, abx_uses{};

    auto take = [&](bool need_adv, std::array<std::size_t, kNumClasses>& uses) -> const Candidate* {
      const Candidate* pick = nullptr;
      std::size_t pick_label = 0;
      for (std::size_t label : tie_order) {
        for (const Candidate* c : by_label[label]) {
          if (used.contains(c->clip->id) || (need_adv && !c->adv)) continue;
          if (!pick || uses[label] < uses[pick_label]) {
            pick = c;
            pick_label = label;
          }
          break;
        }
      }
      if (pick) {
        used.insert(pick->clip->id);
        ++uses[pick_label];
      }
      return pick;
    };

    for (std::size_t e = 0; e < config.experiments.size(); ++e) {
      const ExperimentShape& shape = config.experiments[e];
      if (shape.intensity != level) continue;
      Experiment ex;
      ex.index = e + 1;
      ex.intensity = level;
      auto fail = [&](std::string_view what, std::size_t needed) {
        return PlanInfeasible("build_plan: experiment " + std::to_string(ex.index) + " (" +
                              std::string(to_string(level)) + " intensity) needs " + std::to_string(needed) + " " +
                              std::string(what) + "; the pool has too few model-verified utterances left at this "
                              "intensity");
      };
      for (std::size_t i = 0; i < shape.adversarial; ++i) {
        const Candidate* c = take(true, part1_uses);
        if (!c) throw fail("adversarial part-1 items", shape.adversarial);
        ex.part1.push_back({"", c->clip->id, c->clip->label, ItemKind::adversarial,
                            detail::adversarial_audio_name(config.audio_dir, c->clip->id, c->adv->perturbation_id),
                            c->adv->perturbation_id, c->db, c->adv_index});
      }
      for (std::size_t i = 0; i < config.abx_trials; ++i) {
        const Candidate* c = take(true, abx_uses);
        if (!c) throw fail("ABX pairs", config.abx_trials);
        ABXTrial t;
        t.utterance_id = c->clip->id;
        t.label = c->clip->label;
        t.clean_audio = detail::clean_audio_name(config.audio_dir, c->clip->id);
        t.adversarial_audio = detail::adversarial_audio_name(config.audio_dir, c->clip->id, c->adv->perturbation_id);
        t.perturbation_id = c->adv->perturbation_id;
        t.intensity_db = c->db;
        t.seed = rng();
        std::mt19937_64 trial_rng(t.seed);
        std::bernoulli_distribution coin(0.5);
        t.clean_is_a = coin(trial_rng);
        t.x_is = coin(trial_rng) ? AbChoice::a : AbChoice::b;
        ex.part2.push_back(std::move(t));
      }
      for (std::size_t i = 0; i < shape.clean; ++i) {
        const Candidate* c = take(false, part1_uses);
        if (!c) throw fail("clean part-1 items", shape.clean);
        ex.part1.push_back({"", c->clip->id, c->clip->label, ItemKind::clean,
                            detail::clean_audio_name(config.audio_dir, c->clip->id), "", c->db, c->clean_index});
      }
      std::shuffle(ex.part1.begin(), ex.part1.end(), rng);
      for (std::size_t i = 0; i < ex.part1.size(); ++i) {
        ex.part1[i].item_id = "e" + std::to_string(ex.index) + "-i" + std::to_string(i + 1);
      }
      for (std::size_t i = 0; i < ex.part2.size(); ++i) {
        ex.part2[i].trial_id = "e" + std::to_string(ex.index) + "-abx" + std::to_string(i + 1);
      }
      for (std::size_t p = 0; p < config.participants_per_experiment; ++p) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "p%02zu", e * config.participants_per_experiment + p + 1);
        ex.participants.push_back(buf);
      }
      plan.experiments.push_back(std::move(ex));
    }
  }
  std::sort(plan.experiments.begin(), plan.experiments.end(),
            [](const Experiment& a, const Experiment& b) { return a.index < b.index; });
  return plan;
}

// Waveform for every audio path the plan references.
inline std::map<std::string, std::vector<double>> plan_audio(const StudyPlan& plan, std::span<const AudioClip> pool,
                                                             std::span<const AdversarialExample> adv_pool) {
  std::map<std::string, const AudioClip*> clips;
  for (const auto& c : pool) clips.emplace(c.id, &c);
  std::map<std::string, const AdversarialExample*> advs;
  for (const auto& a : adv_pool) advs.emplace(a.clip_id, &a);
  std::map<std::string, std::vector<double>> out;
  auto clean = [&](const std::string& id, const std::string& path) {
    auto it = clips.find(id);
    if (it == clips.end()) throw InvalidArgument("plan_audio: unknown clip " + id);
    out.emplace(path, it->second->samples);
  };
  auto adversarial = [&](const std::string& id, const std::string& path) {
    auto it = advs.find(id);
    if (it == advs.end()) throw InvalidArgument("plan_audio: no adversarial example for " + id);
    out.emplace(path, it->second->samples);
  };
  for (const auto& ex : plan.experiments) {
    for (const auto& item : ex.part1) {
      if (item.kind == ItemKind::clean) clean(item.utterance_id, item.audio);
      else adversarial(item.utterance_id, item.audio);
    }
    for (const auto& t : ex.part2) {
      clean(t.utterance_id, t.clean_audio);
      adversarial(t.utterance_id, t.adversarial_audio);
    }
  }
  return out;
}

// Checks the structural invariants; returns a list of violations.
inline std::vector<std::string> check_plan(const StudyPlan& plan, const PlanConfig& config = {}) {
  std::vector<std::string> problems;
  if (plan.experiments.size() != config.experiments.size()) {
    problems.push_back("expected " + std::to_string(config.experiments.size()) + " experiments, found " +
                       std::to_string(plan.experiments.size()));
    return problems;
  }
  std::set<std::string> ids;
  for (std::size_t e = 0; e < plan.experiments.size(); ++e) {
    const Experiment& ex = plan.experiments[e];
    const ExperimentShape& shape = config.experiments[e];
    const std::string tag = "experiment " + std::to_string(e + 1) + ": ";
    if (ex.index != e + 1) problems.push_back(tag + "index " + std::to_string(ex.index));
    if (ex.intensity != shape.intensity) problems.push_back(tag + "intensity mismatch");
    if (ex.count(ItemKind::clean) != shape.clean || ex.count(ItemKind::adversarial) != shape.adversarial) {
      problems.push_back(tag + "clean/adversarial counts " + std::to_string(ex.count(ItemKind::clean)) + "/" +
                         std::to_string(ex.count(ItemKind::adversarial)));
    }
    if (ex.part2.size() != config.abx_trials) problems.push_back(tag + std::to_string(ex.part2.size()) + " ABX trials");
    if (ex.participants.size() != config.participants_per_experiment) problems.push_back(tag + "participant count");
    for (const auto& item : ex.part1) {
      if (intensity_from_db(item.intensity_db) != ex.intensity) problems.push_back(tag + item.item_id + " intensity");
      if (!ids.insert(item.item_id).second) problems.push_back(tag + "duplicate id " + item.item_id);
      const bool correct = item.model_index == index_of(item.label);
      if ((item.kind == ItemKind::clean) != correct) problems.push_back(tag + item.item_id + " model verification");
    }
    for (const auto& t : ex.part2) {
      if (intensity_from_db(t.intensity_db) != ex.intensity) problems.push_back(tag + t.trial_id + " intensity");
      if (!ids.insert(t.trial_id).second) problems.push_back(tag + "duplicate id " + t.trial_id);
    }
  }
  return problems;
}

// ---------------------------------------------------------------------------
// Structured-text records (one JSON object per line)

inline nlohmann::json to_json(const StudyItem& i, std::size_t experiment) {
  return {{"type", "item"},          {"experiment", experiment},   {"item_id", i.item_id},
          {"utterance_id", i.utterance_id}, {"label", to_string(i.label)}, {"kind", to_string(i.kind)},
          {"audio", i.audio},        {"perturbation_id", i.perturbation_id}, {"intensity_db", i.intensity_db},
          {"model_label", to_string(label_at(i.model_index))}};
}

inline nlohmann::json to_json(const ABXTrial& t, std::size_t experiment) {
  return {{"type", "abx"},
          {"experiment", experiment},
          {"trial_id", t.trial_id},
          {"utterance_id", t.utterance_id},
          {"label", to_string(t.label)},
          {"clean_audio", t.clean_audio},
          {"adversarial_audio", t.adversarial_audio},
          {"perturbation_id", t.perturbation_id},
          {"order_ab", t.clean_is_a ? "clean-adversarial" : "adversarial-clean"},
          {"x_is", to_string(t.x_is)},
          {"seed", t.seed},
          {"intensity_db", t.intensity_db}};
}

inline std::string serialize_plan(const StudyPlan& plan) {
  std::string out = nlohmann::json{{"type", "plan"}, {"version", 1}, {"seed", plan.seed},
                                   {"experiments", plan.experiments.size()}}.dump() + "\n";
  for (const auto& ex : plan.experiments) {
    out += nlohmann::json{{"type", "experiment"}, {"experiment", ex.index}, {"intensity", to_string(ex.intensity)},
                          {"participants", ex.participants}}.dump() + "\n";
    for (const auto& i : ex.part1) out += to_json(i, ex.index).dump() + "\n";
    for (const auto& t : ex.part2) out += to_json(t, ex.index).dump() + "\n";
  }
  return out;
}

inline StudyPlan deserialize_plan(std::string_view text) {
  StudyPlan plan;
  std::size_t line_no = 0;
  bool have_header = false;
  std::size_t declared = 0;
  std::size_t pos = 0;
  auto experiment_at = [&](std::size_t index) -> Experiment& {
    if (index < 1 || index > plan.experiments.size()) {
      throw FormatError("plan line " + std::to_string(line_no) + ": unknown experiment " + std::to_string(index));
    }
    return plan.experiments[index - 1];
  };
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      const auto type = j.at("type").get<std::string>();
      if (type == "plan") {
        if (j.at("version").get<int>() != 1) throw VersionError("plan: unsupported version");
        plan.seed = j.at("seed").get<std::uint64_t>();
        declared = j.at("experiments").get<std::size_t>();
        have_header = true;
      } else if (type == "experiment") {
        Experiment ex;
        ex.index = j.at("experiment").get<std::size_t>();
        if (ex.index != plan.experiments.size() + 1) throw FormatError("experiments out of order");
        auto level = parse_intensity(j.at("intensity").get<std::string>());
        if (!level) throw FormatError("bad intensity");
        ex.intensity = *level;
        ex.participants = j.at("participants").get<std::vector<std::string>>();
        plan.experiments.push_back(std::move(ex));
      } else if (type == "item") {
        StudyItem i;
        i.item_id = j.at("item_id").get<std::string>();
        i.utterance_id = j.at("utterance_id").get<std::string>();
        i.label = parse_label_or_throw(j.at("label").get<std::string>());
        const auto kind = j.at("kind").get<std::string>();
        if (kind != "clean" && kind != "adversarial") throw FormatError("bad item kind");
        i.kind = kind == "clean" ? ItemKind::clean : ItemKind::adversarial;
        i.audio = j.at("audio").get<std::string>();
        i.perturbation_id = j.at("perturbation_id").get<std::string>();
        i.intensity_db = j.at("intensity_db").get<double>();
        i.model_index = index_of(parse_label_or_throw(j.at("model_label").get<std::string>()));
        experiment_at(j.at("experiment").get<std::size_t>()).part1.push_back(std::move(i));
      } else if (type == "abx") {
        ABXTrial t;
        t.trial_id = j.at("trial_id").get<std::string>();
        t.utterance_id = j.at("utterance_id").get<std::string>();
        t.label = parse_label_or_throw(j.at("label").get<std::string>());
        t.clean_audio = j.at("clean_audio").get<std::string>();
        t.adversarial_audio = j.at("adversarial_audio").get<std::string>();
        t.perturbation_id = j.at("perturbation_id").get<std::string>();
        const auto order = j.at("order_ab").get<std::string>();
        if (order != "clean-adversarial" && order != "adversarial-clean") throw FormatError("bad order_ab");
        t.clean_is_a = order == "clean-adversarial";
        const auto x = j.at("x_is").get<std::string>();
        if (x != "A" && x != "B") throw FormatError("bad x_is");
        t.x_is = x == "A" ? AbChoice::a : AbChoice::b;
        t.seed = j.at("seed").get<std::uint64_t>();
        t.intensity_db = j.at("intensity_db").get<double>();
        experiment_at(j.at("experiment").get<std::size_t>()).part2.push_back(std::move(t));
      } else {
        throw FormatError("unknown record type '" + type + "'");
      }
    } catch (const VersionError&) {
      throw;
    } catch (const std::exception& e) {
      throw FormatError("plan line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (!have_header) throw FormatError("plan: missing header record");
  if (declared != plan.experiments.size()) throw FormatError("plan: experiment count mismatch");
  return plan;
}

// ---------------------------------------------------------------------------
// Responses

struct Response {
  std::string participant_id;
  std::size_t experiment = 0;
  std::string ref;  // item_id or trial_id
  std::optional<CommandLabel> heard_command;
  std::optional<int> naturalness;
  std::optional<AbChoice> choice;
  std::optional<Confidence> confidence;
  std::string timestamp;

  bool is_part1() const { return heard_command.has_value(); }
};

inline nlohmann::json to_json(const Response& r) {
  nlohmann::json j = {{"participant_id", r.participant_id},
                      {"experiment", r.experiment},
                      {"ref", r.ref},
                      {"timestamp", r.timestamp}};
  if (r.heard_command) j["heard_command"] = to_string(*r.heard_command);
  if (r.naturalness) j["naturalness"] = *r.naturalness;
  if (r.choice) j["choice"] = to_string(*r.choice);
  if (r.confidence) j["confidence"] = to_string(*r.confidence);
  return j;
}

// Reads the response fields of a record; other fields are ignored. Throws
// InvalidArgument on a field outside its schema.
inline Response response_from_json(const nlohmann::json& j) {
  Response r;
  try {
    r.participant_id = j.at("participant_id").get<std::string>();
    r.experiment = j.at("experiment").get<std::size_t>();
    r.ref = j.at("ref").get<std::string>();
    r.timestamp = j.value("timestamp", std::string());
  } catch (const nlohmann::json::exception& e) {
    throw InvalidArgument(std::string("response: ") + e.what());
  }
  if (j.contains("heard_command")) {
    if (!j["heard_command"].is_string()) throw InvalidArgument("response: heard_command must be a string");
    r.heard_command = parse_label_or_throw(j["heard_command"].get<std::string>());
  }
  if (j.contains("naturalness")) {
    const auto& n = j["naturalness"];
    if (!n.is_number_integer() || n.get<long long>() < 1 || n.get<long long>() > 5) {
      throw InvalidArgument("response: naturalness must be an integer in 1..5");
    }
    r.naturalness = n.get<int>();
  }
  if (j.contains("choice")) {
    const auto& c = j["choice"];
    if (!c.is_string() || (c != "A" && c != "B")) throw InvalidArgument("response: choice must be \"A\" or \"B\"");
    r.choice = c == "A" ? AbChoice::a : AbChoice::b;
  }
  if (j.contains("confidence")) {
    const auto& c = j["confidence"];
    if (!c.is_string() || (c != "low" && c != "high")) {
      throw InvalidArgument("response: confidence must be \"low\" or \"high\"");
    }
    r.confidence = c == "low" ? Confidence::low : Confidence::high;
  }
  const bool p1 = r.heard_command || r.naturalness;
  const bool p2 = r.choice || r.confidence;
  if (p1 == p2) throw InvalidArgument("response: must answer either part 1 or part 2");
  if (p1 && !(r.heard_command && r.naturalness)) throw InvalidArgument("response: part 1 needs heard_command and naturalness");
  if (p2 && !(r.choice && r.confidence)) throw InvalidArgument("response: part 2 needs choice and confidence");
  return r;
}

// Lines whose "type" is present and not "answer" are skipped, so a service
// log can be read directly.
inline std::vector<Response> parse_responses(std::string_view text) {
  std::vector<Response> out;
  std::size_t pos = 0, line_no = 0;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    if (nl == std::string_view::npos) nl = text.size();
    const auto line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw FormatError("responses line " + std::to_string(line_no) + ": " + e.what());
    }
    if (j.contains("type") && j["type"] != "answer") continue;
    out.push_back(response_from_json(j));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Analysis

struct Proportion {
  std::size_t k = 0;
  std::size_t n = 0;

  std::optional<double> percent() const {
    if (n == 0) return std::nullopt;
    return 100.0 * static_cast<double>(k) / static_cast<double>(n);
  }
};

struct AbxSummary {
  IntensityLevel intensity = IntensityLevel::low;
  Proportion success;
  Proportion high_confidence;
  std::optional<StatsResult> test_greater, test_two_sided;
  std::optional<std::pair<double, double>> ci;
};

struct NaturalnessTest {
  std::optional<IntensityLevel> intensity;  // empty: pooled over all levels
  std::optional<StatsResult> result;
  std::string note;
};

struct StudyReport {
  // [kind][intensity]
  std::array<std::array<Proportion, 3>, 2> accuracy{};
  Proportion accuracy_total;
  std::array<std::array<std::array<std::size_t, 5>, 3>, 2> naturalness{};
  std::array<AbxSummary, 3> abx{};
  std::vector<NaturalnessTest> naturalness_tests;
  std::size_t expected_responses = 0;
  std::size_t received_responses = 0;
  std::size_t duplicate_responses = 0;
  bool complete() const { return received_responses == expected_responses; }
};

struct SummaryConfig {
  double level = 0.95;
  std::size_t mc_samples = kMinMonteCarloSamples;
  std::uint64_t seed = 0;
};

// Pure function of (responses, plan). Repeated answers to the same
// (participant, reference) keep the first one.
inline StudyReport summarize(std::span<const Response> responses, const StudyPlan& plan,
                             const SummaryConfig& config = {}) {
  struct Part1Ref {
    const StudyItem* item;
    const Experiment* ex;
  };
  struct Part2Ref {
    const ABXTrial* trial;
    const Experiment* ex;
  };
  std::map<std::string, Part1Ref> items;
  std::map<std::string, Part2Ref> trials;
  StudyReport rep;
  for (const auto& ex : plan.experiments) {
    for (const auto& i : ex.part1) items.emplace(i.item_id, Part1Ref{&i, &ex});
    for (const auto& t : ex.part2) trials.emplace(t.trial_id, Part2Ref{&t, &ex});
    rep.expected_responses += ex.participants.size() * (ex.part1.size() + ex.part2.size());
  }
  for (std::size_t l = 0; l < 3; ++l) rep.abx[l].intensity = static_cast<IntensityLevel>(l);

  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& r : responses) {
    const auto it1 = items.find(r.ref);
    const auto it2 = trials.find(r.ref);
    const Experiment* ex = it1 != items.end() ? it1->second.ex : it2 != trials.end() ? it2->second.ex : nullptr;
    if (!ex) throw InvalidArgument("summarize: response references unknown item '" + r.ref + "'");
    if (ex->index != r.experiment) throw InvalidArgument("summarize: response '" + r.ref + "' has wrong experiment");
    if ((it1 != items.end()) != r.is_part1()) throw InvalidArgument("summarize: response '" + r.ref + "' has wrong part");
    if (!seen.emplace(r.participant_id, r.ref).second) {
      ++rep.duplicate_responses;
      continue;
    }
    ++rep.received_responses;
    const auto level = static_cast<std::size_t>(ex->intensity);
    if (it1 != items.end()) {
      const StudyItem& item = *it1->second.item;
      const auto kind = static_cast<std::size_t>(item.kind);
      const bool correct = *r.heard_command == item.label;
      rep.accuracy[kind][level].n += 1;
      rep.accuracy[kind][level].k += correct;
      rep.accuracy_total.n += 1;
      rep.accuracy_total.k += correct;
      rep.naturalness[kind][level][static_cast<std::size_t>(*r.naturalness - 1)] += 1;
    } else {
      const ABXTrial& t = *it2->second.trial;
      rep.abx[level].success.n += 1;
      rep.abx[level].success.k += *r.choice == t.x_is;
      rep.abx[level].high_confidence.n += 1;
      rep.abx[level].high_confidence.k += *r.confidence == Confidence::high;
    }
  }

  for (auto& a : rep.abx) {
    if (a.success.n == 0) continue;
    a.test_greater = binomial_test_exact(a.success.k, a.success.n, 0.5, Tail::greater);
    a.test_two_sided = binomial_test_exact(a.success.k, a.success.n, 0.5, Tail::two_sided);
    a.ci = clopper_pearson(a.success.k, a.success.n, config.level);
  }

  auto run_test = [&](std::optional<IntensityLevel> level) {
    std::array<std::size_t, 5> clean{}, adv{};
    for (std::size_t l = 0; l < 3; ++l) {
      if (level && static_cast<std::size_t>(*level) != l) continue;
      for (std::size_t s = 0; s < 5; ++s) {
        clean[s] += rep.naturalness[0][l][s];
        adv[s] += rep.naturalness[1][l][s];
      }
    }
    NaturalnessTest t;
    t.intensity = level;
    const bool have_clean = std::any_of(clean.begin(), clean.end(), [](auto c) { return c > 0; });
    const bool have_adv = std::any_of(adv.begin(), adv.end(), [](auto c) { return c > 0; });
    if (!have_clean || !have_adv) {
      t.note = "no responses";
    } else {
      t.result = multinomial_test_exact(clean, adv, config.mc_samples, config.seed);
      if (t.result->ill_posed) t.note = "adversarial ratings fall in a category no clean item received";
    }
    rep.naturalness_tests.push_back(std::move(t));
  };
  run_test(std::nullopt);
  for (IntensityLevel l : {IntensityLevel::low, IntensityLevel::medium, IntensityLevel::high}) run_test(l);
  return rep;
}

inline void write_accuracy_csv(std::ostream& out, const StudyReport& rep) {
  out << "kind,intensity,correct,total,percent\n";
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t l = 0; l < 3; ++l) {
      const Proportion& p = rep.accuracy[k][l];
      out << to_string(static_cast<ItemKind>(k)) << ',' << to_string(static_cast<IntensityLevel>(l)) << ',' << p.k
          << ',' << p.n << ',' << detail::fmt_opt(p.percent()) << "\n";
    }
  }
  out << "all,all," << rep.accuracy_total.k << ',' << rep.accuracy_total.n << ','
      << detail::fmt_opt(rep.accuracy_total.percent()) << "\n";
}

inline void write_naturalness_csv(std::ostream& out, const StudyReport& rep) {
  out << "kind,intensity,level,count\n";
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t l = 0; l < 3; ++l) {
      for (std::size_t s = 0; s < 5; ++s) {
        out << to_string(static_cast<ItemKind>(k)) << ',' << to_string(static_cast<IntensityLevel>(l)) << ','
            << s + 1 << ',' << rep.naturalness[k][l][s] << "\n";
      }
    }
  }
}

inline void write_abx_csv(std::ostream& out, const StudyReport& rep) {
  out << "intensity,trials,successes,percent,p_greater,p_two_sided,ci_low,ci_high,high_confidence,"
         "percent_high_confidence\n";
  for (const auto& a : rep.abx) {
    out << to_string(a.intensity) << ',' << a.success.n << ',' << a.success.k << ','
        << detail::fmt_opt(a.success.percent()) << ','
        << detail::fmt_opt(a.test_greater ? std::optional(a.test_greater->p_value) : std::nullopt) << ','
        << detail::fmt_opt(a.test_two_sided ? std::optional(a.test_two_sided->p_value) : std::nullopt) << ','
        << detail::fmt_opt(a.ci ? std::optional(a.ci->first) : std::nullopt) << ','
        << detail::fmt_opt(a.ci ? std::optional(a.ci->second) : std::nullopt) << ',' << a.high_confidence.k << ','
        << detail::fmt_opt(a.high_confidence.percent()) << "\n";
  }
}

inline void write_naturalness_tests_csv(std::ostream& out, const StudyReport& rep) {
  out << "intensity,n_adversarial,p_value,log_pmf_observed,mc_samples,mc_standard_error,ill_posed,note\n";
  for (const auto& t : rep.naturalness_tests) {
    out << (t.intensity ? std::string(to_string(*t.intensity)) : std::string("all")) << ',';
    if (t.result) {
      out << t.result->n << ',' << detail::fmt_opt(t.result->p_value) << ','
          << (t.result->ill_posed ? std::string() : detail::fmt_opt(t.result->statistic)) << ','
          << t.result->mc_samples << ',' << detail::fmt_opt(t.result->standard_error) << ','
          << (t.result->ill_posed ? "true" : "false");
    } else {
      out << ",,,,,";
    }
    out << ',' << t.note << "\n";
  }
}

}  // namespace advaudio
