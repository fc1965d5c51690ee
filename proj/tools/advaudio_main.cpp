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

// advaudio: command-line entry point. Every command works inside a run
// directory (--run-dir, default "."); relative paths are resolved against
// it and each command leaves a <command>.manifest.json next to its outputs.

#include "advaudio/attacks.hpp"
#include "advaudio/classifier.hpp"
#include "advaudio/config.hpp"
#include "advaudio/distortion.hpp"
#include "advaudio/evaluation.hpp"
#include "advaudio/signal_io.hpp"
#include "advaudio/stats.hpp"
#include "advaudio/study.hpp"
#include "advaudio/service.hpp"

#include <csignal>
#include <cstdio>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>

#include "run_dir.hpp"

namespace fs = std::filesystem;
using namespace advaudio;
using cli::Run;

namespace {

constexpr const char* kPerturbationExt = ".advpert";

struct Common {
  std::string run_dir = ".";
  std::string config_path;
  unsigned threads = 0;
  std::vector<std::string> argv;
};

KeyValueConfig load_config(Run& run, const Common& common) {
  if (common.config_path.empty()) return {};
  auto cfg = KeyValueConfig::load(run.input(common.config_path));
  for (const auto& [k, v] : cfg.values()) run.config()["file"][k] = v;
  return cfg;
}

template <class T>
T pick(const std::optional<T>& flag, const KeyValueConfig& cfg, const std::string& key, T fallback) {
  if (flag) return *flag;
  return cfg.get<T>(key, fallback);
}

std::vector<std::vector<double>> samples_of(const std::vector<const AudioClip*>& clips) {
  std::vector<std::vector<double>> out;
  out.reserve(clips.size());
  for (const auto* c : clips) out.push_back(c->samples);
  return out;
}

std::optional<Split> parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "validation") return Split::validation;
  if (s == "all") return std::nullopt;
  throw InvalidArgument("split must be train, validation or all");
}

std::uint64_t trial_seed(std::uint64_t seed, CommandLabel label, std::size_t trial) {
  return detail::splitmix64(seed ^ (static_cast<std::uint64_t>(index_of(label) + 1) << 32) ^ trial);
}

std::string perturbation_name(CommandLabel label, std::size_t trial) {
  return std::string(to_string(label)) + "-t" + std::to_string(trial);
}

struct NamedPerturbation {
  std::string id;
  Perturbation p;
};

std::vector<NamedPerturbation> load_perturbations(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw IoError("perturbation directory not found: " + dir.string());
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == kPerturbationExt) files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<NamedPerturbation> out;
  for (const auto& f : files) out.push_back({f.stem().string(), load_perturbation(f)});
  if (out.empty()) throw IoError("no perturbation files in " + dir.string());
  return out;
}

// Per class, the perturbation with the highest fooling ratio on the train
// split (first one on ties).
std::map<CommandLabel, const NamedPerturbation*> best_by_train_fr(const Classifier& model, const Dataset& data,
                                                                  const std::vector<NamedPerturbation>& perts) {
  std::map<CommandLabel, const NamedPerturbation*> best;
  std::map<CommandLabel, double> best_fr;
  std::map<CommandLabel, std::pair<std::vector<std::vector<double>>, std::vector<std::size_t>>> cache;
  for (const auto& np : perts) {
    const CommandLabel label = np.p.target_class;
    auto it = cache.find(label);
    if (it == cache.end()) {
      auto clips = samples_of(select(data, label, Split::train));
      if (clips.empty()) continue;
      auto labels = predict_all(model, std::span<const std::vector<double>>(clips));
      it = cache.emplace(label, std::make_pair(std::move(clips), std::move(labels))).first;
    }
    const double fr = fooling_ratio(model, std::span<const std::vector<double>>(it->second.first),
                                    it->second.second, np.p.samples);
    if (!best.contains(label) || fr > best_fr[label]) {
      best[label] = &np;
      best_fr[label] = fr;
    }
  }
  return best;
}

std::vector<double> parse_grid(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    KeyValueConfig tmp;
    tmp.set("v", item);
    out.push_back(tmp.require<double>("v"));
  }
  return out;
}

std::vector<std::size_t> parse_counts(const std::string& text) {
  std::vector<std::size_t> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    KeyValueConfig tmp;
    tmp.set("v", item);
    out.push_back(tmp.require<std::size_t>("v"));
  }
  return out;
}

void write_text(const fs::path& p, const std::string& text) { detail::write_file(p, text); }

nlohmann::json stats_json(const StatsResult& r) {
  nlohmann::json j = {{"test", r.test}, {"p_value", r.p_value}, {"statistic", r.statistic}, {"n", r.n}, {"k", r.k}};
  if (r.ci) j["ci"] = {r.ci->first, r.ci->second};
  if (r.standard_error) {
    j["mc_standard_error"] = *r.standard_error;
    j["mc_samples"] = r.mc_samples;
  }
  if (r.ill_posed) j["ill_posed"] = true;
  return j;
}

// ---------------------------------------------------------------------------

struct SynthArgs {
  std::string out = "data";
  std::optional<std::size_t> clips_per_class;
  std::optional<double> validation_fraction;
  std::uint64_t seed = 0;
};

int cmd_synth(const Common& common, const SynthArgs& a) {
  Run run(common.run_dir, "synth-data", common.argv);
  const auto cfg = load_config(run, common);
  SynthConfig sc = SynthConfig::defaults(pick(a.clips_per_class, cfg, "synth.clips_per_class", std::size_t{100}));
  sc.validation_fraction = pick(a.validation_fraction, cfg, "synth.validation_fraction", sc.validation_fraction);
  sc.noise_floor = cfg.get("synth.noise_floor", sc.noise_floor);
  sc.intensity_db_min = cfg.get("synth.intensity_db_min", sc.intensity_db_min);
  sc.intensity_db_max = cfg.get("synth.intensity_db_max", sc.intensity_db_max);
  sc.frequency_jitter = cfg.get("synth.frequency_jitter", sc.frequency_jitter);
  run.seed("synth", a.seed);
  run.config()["clips_per_class"] = sc.counts.front();
  run.config()["validation_fraction"] = sc.validation_fraction;
  run.config()["noise_floor"] = sc.noise_floor;
  run.config()["intensity_db"] = {sc.intensity_db_min, sc.intensity_db_max};
  run.config()["frequency_jitter"] = sc.frequency_jitter;
  const Dataset data = synth_dataset(sc, a.seed);
  save_dataset_dir(data, run.output(a.out));
  run.commit();
  std::cout << "wrote " << data.size() << " clips to " << (run.dir() / a.out).string() << "\n";
  return 0;
}

struct TrainArgs {
  std::string data = "data";
  std::string out = "model.bin";
  std::uint64_t seed = 0;
  std::optional<std::size_t> epochs, batch_size;
  std::optional<double> learning_rate, momentum, max_grad_norm;
};

int cmd_train(const Common& common, const TrainArgs& a) {
  Run run(common.run_dir, "train", common.argv);
  const auto cfg = load_config(run, common);
  TrainConfig tc;
  tc.epochs = pick(a.epochs, cfg, "train.epochs", tc.epochs);
  tc.batch_size = pick(a.batch_size, cfg, "train.batch_size", tc.batch_size);
  tc.learning_rate = pick(a.learning_rate, cfg, "train.learning_rate", tc.learning_rate);
  tc.momentum = pick(a.momentum, cfg, "train.momentum", tc.momentum);
  tc.max_grad_norm = pick(a.max_grad_norm, cfg, "train.max_grad_norm", tc.max_grad_norm);
  tc.features = read_feature_config(cfg);
  run.seed("train", a.seed);
  run.config()["epochs"] = tc.epochs;
  run.config()["batch_size"] = tc.batch_size;
  run.config()["learning_rate"] = tc.learning_rate;
  run.config()["momentum"] = tc.momentum;
  run.config()["max_grad_norm"] = tc.max_grad_norm;
  KeyValueConfig fc;
  write_feature_config(fc, tc.features);
  for (const auto& [k, v] : fc.values()) run.config()[k] = v;

  const Dataset data = load_dataset_dir(run.input(a.data));
  std::string log = "epoch,loss,train_accuracy,validation_accuracy\n";
  TrainReport report;
  const Classifier model = train(data, tc, a.seed, &report, [&](const EpochStats& e) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%zu,%.10g,%.10g,%.10g\n", e.epoch, e.loss, e.train_accuracy, e.validation_accuracy);
    log += buf;
    std::cerr << "epoch " << e.epoch << " loss " << e.loss << " train " << e.train_accuracy << " validation "
              << e.validation_accuracy << "\n";
  });
  save_model(model, run.output(a.out));
  write_text(run.output(fs::path(a.out).replace_extension(".train.csv")), log);
  run.manifest()["results"] = {{"train_accuracy", model.info().train_accuracy},
                               {"validation_accuracy", model.info().validation_accuracy}};
  run.commit();
  std::cout << "validation accuracy " << model.info().validation_accuracy << "\n";
  return 0;
}

struct AttackArgs {
  std::string model = "model.bin";
  std::string data = "data";
  std::string out = "perturbations";
  std::string target = "all";
  std::size_t trials = 5;
  std::optional<double> xi, overshoot;
  std::optional<std::size_t> epochs, max_iter;
  std::uint64_t seed = 0;
};

int cmd_attack(const Common& common, const AttackArgs& a) {
  Run run(common.run_dir, "attack", common.argv);
  const auto cfg = load_config(run, common);
  UapConfig uc;
  uc.xi = pick(a.xi, cfg, "attack.xi", uc.xi);
  uc.epochs = pick(a.epochs, cfg, "attack.epochs", uc.epochs);
  uc.max_iter = pick(a.max_iter, cfg, "attack.max_iter", uc.max_iter);
  uc.overshoot = pick(a.overshoot, cfg, "attack.overshoot", uc.overshoot);
  if (a.trials == 0) throw InvalidArgument("--trials must be >= 1");
  run.config()["xi"] = uc.xi;
  run.config()["epochs"] = uc.epochs;
  run.config()["max_iter"] = uc.max_iter;
  run.config()["overshoot"] = uc.overshoot;
  run.config()["trials"] = a.trials;
  run.config()["class"] = a.target;
  run.seed("attack", a.seed);

  const Classifier model = load_model(run.input(a.model));
  const Dataset data = load_dataset_dir(run.input(a.data));
  std::vector<CommandLabel> labels;
  if (a.target == "all") {
    for (std::size_t c = 0; c < kNumClasses; ++c) labels.push_back(label_at(c));
  } else {
    labels.push_back(parse_label_or_throw(a.target));
  }

  struct Job {
    CommandLabel label;
    std::size_t trial;
  };
  std::vector<Job> jobs;
  std::map<CommandLabel, std::vector<std::vector<double>>> train_clips;
  for (CommandLabel l : labels) {
    train_clips[l] = samples_of(select(data, l, Split::train));
    if (train_clips[l].empty()) throw InvalidArgument("no training clips for class " + std::string(to_string(l)));
    for (std::size_t t = 0; t < a.trials; ++t) jobs.push_back({l, t});
  }
  std::vector<Perturbation> results(jobs.size());
  std::vector<UapStats> stats(jobs.size());
  parallel_for(
      jobs.size(),
      [&](std::size_t i) {
        const Job& j = jobs[i];
        const std::uint64_t s = trial_seed(a.seed, j.label, j.trial);
        results[i] = uap_hc(model, std::span<const std::vector<double>>(train_clips[j.label]), j.label, uc, s, j.trial,
                            &stats[i]);
        std::cerr << "attack " << to_string(j.label) << " trial " << j.trial << " done, |v| = "
                  << l2_norm(results[i].samples) << "\n";
      },
      common.threads);

  std::string table = "perturbation_id,class,trial,seed,l2,deepfool_calls,deepfool_successes,fr_train\n";
  for (std::size_t i = 0; i < jobs.size(); ++i) {
    const std::string name = perturbation_name(jobs[i].label, jobs[i].trial);
    save_perturbation(results[i], run.output(fs::path(a.out) / (name + kPerturbationExt)));
    AudioClip wav;
    wav.id = name;
    wav.samples = results[i].samples;
    detail::write_file(run.output(fs::path(a.out) / (name + ".wav")), encode_wav(wav.samples));
    const double fr = fooling_ratio(model, std::span<const std::vector<double>>(train_clips[jobs[i].label]),
                                    results[i].samples);
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%s,%zu,%llu,%.10g,%zu,%zu,%.10g\n", name.c_str(),
                  std::string(to_string(jobs[i].label)).c_str(), jobs[i].trial,
                  static_cast<unsigned long long>(results[i].seed), l2_norm(results[i].samples),
                  stats[i].deepfool_calls, stats[i].deepfool_successes, fr);
    table += buf;
    run.seed(name, results[i].seed);
  }
  write_text(run.output(fs::path(a.out) / "attack_summary.csv"), table);
  run.commit();
  std::cout << "wrote " << jobs.size() << " perturbations to " << (run.dir() / a.out).string() << "\n";
  return 0;
}

struct MetricsArgs {
  std::string data = "data";
  std::string perturbations = "perturbations";
  std::string split = "validation";
  std::string out = "metrics.csv";
};

int cmd_metrics(const Common& common, const MetricsArgs& a) {
  Run run(common.run_dir, "metrics", common.argv);
  load_config(run, common);
  run.config()["split"] = a.split;
  const Dataset data = load_dataset_dir(run.input(a.data));
  const auto perts = load_perturbations(run.input(a.perturbations));
  const auto split = parse_split(a.split);
  std::vector<DistortionReport> reports;
  for (const auto& np : perts) {
    for (const AudioClip* clip : select(data, np.p.target_class, split)) {
      reports.push_back(distortion_report(*clip, np.p.samples, np.id));
    }
  }
  std::ostringstream csv;
  write_distortion_csv(csv, reports);
  write_text(run.output(a.out), csv.str());
  run.commit();
  std::cout << "wrote " << reports.size() << " reports\n";
  return 0;
}

struct SweepArgs {
  std::string model = "model.bin";
  std::string data = "data";
  std::string perturbations = "perturbations";
  std::string split = "validation";
  std::string axis = "both";
  std::string l2_grid, db_grid;
  std::optional<std::size_t> trial;
  std::string out = "sweep.csv";
};

int cmd_sweep(const Common& common, const SweepArgs& a) {
  Run run(common.run_dir, "sweep", common.argv);
  load_config(run, common);
  const Classifier model = load_model(run.input(a.model));
  const Dataset data = load_dataset_dir(run.input(a.data));
  const auto perts = load_perturbations(run.input(a.perturbations));
  const auto split = parse_split(a.split);
  std::vector<SweepAxis> axes;
  if (a.axis == "both") {
    axes = {SweepAxis::l2_norm, SweepAxis::db_x_max};
  } else if (auto ax = parse_sweep_axis(a.axis)) {
    axes = {*ax};
  } else {
    throw InvalidArgument("--axis must be l2, db or both");
  }
  std::map<SweepAxis, std::vector<double>> grids = {
      {SweepAxis::l2_norm, a.l2_grid.empty() ? default_thresholds(SweepAxis::l2_norm) : parse_grid(a.l2_grid)},
      {SweepAxis::db_x_max, a.db_grid.empty() ? default_thresholds(SweepAxis::db_x_max) : parse_grid(a.db_grid)}};
  run.config()["split"] = a.split;
  run.config()["axis"] = a.axis;
  run.config()["l2_grid"] = grids[SweepAxis::l2_norm];
  run.config()["db_grid"] = grids[SweepAxis::db_x_max];

  std::map<CommandLabel, const NamedPerturbation*> chosen;
  if (a.trial) {
    run.config()["trial"] = *a.trial;
    for (const auto& np : perts) {
      if (np.p.trial_index == *a.trial) chosen[np.p.target_class] = &np;
    }
  } else {
    run.config()["trial"] = "best train FR";
    chosen = best_by_train_fr(model, data, perts);
  }
  std::vector<SweepCurve> curves;
  for (const auto& [label, np] : chosen) {
    const auto clips = samples_of(select(data, label, split));
    if (clips.empty()) continue;
    for (SweepAxis ax : axes) {
      curves.push_back(fr_sweep(model, std::span<const std::vector<double>>(clips), np->p.samples, ax, grids[ax], label));
    }
    run.manifest()["perturbations_used"][std::string(to_string(label))] = np->id;
  }
  std::size_t floor_bound = 0;
  for (const auto& c : curves) floor_bound += c.floor_bound;
  run.manifest()["db_floor_bound_pairs"] = floor_bound;
  std::ostringstream csv;
  write_sweep_plot_data(csv, curves);
  write_text(run.output(a.out), csv.str());
  run.commit();
  std::cout << "wrote " << curves.size() << " curves\n";
  return 0;
}

struct SummarizeArgs {
  std::string model = "model.bin";
  std::string data = "data";
  std::string perturbations = "perturbations";
  std::size_t trials = 5;
  double acceptable_db = -32.0;
  std::string out_dir = "reports";
};

int cmd_summarize(const Common& common, const SummarizeArgs& a) {
  Run run(common.run_dir, "summarize-attacks", common.argv);
  load_config(run, common);
  run.config()["trials"] = a.trials;
  run.config()["acceptable_db"] = a.acceptable_db;
  const Classifier model = load_model(run.input(a.model));
  const Dataset data = load_dataset_dir(run.input(a.data));
  const auto perts = load_perturbations(run.input(a.perturbations));
  std::vector<ClassSummary> rows;
  ClassSummaryConfig sc;
  sc.expected_trials = a.trials;
  sc.acceptable_db = a.acceptable_db;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const CommandLabel label = label_at(c);
    std::vector<std::optional<Perturbation>> trials(a.trials);
    for (const auto& np : perts) {
      if (np.p.target_class != label) continue;
      if (np.p.trial_index >= trials.size()) trials.resize(np.p.trial_index + 1);
      trials[np.p.trial_index] = np.p;
    }
    const auto train_clips = samples_of(select(data, label, Split::train));
    const auto valid_clips = samples_of(select(data, label, Split::validation));
    rows.push_back(class_summary(model, label, std::span<const std::optional<Perturbation>>(trials),
                                 std::span<const std::vector<double>>(train_clips),
                                 std::span<const std::vector<double>>(valid_clips), sc));
  }
  std::ostringstream eff, dist, tr;
  write_effectiveness_csv(eff, rows);
  write_distortion_summary_csv(dist, rows, a.acceptable_db);
  write_trials_csv(tr, rows);
  const fs::path dir = a.out_dir;
  write_text(run.output(dir / "effectiveness.csv"), eff.str());
  write_text(run.output(dir / "distortion.csv"), dist.str());
  write_text(run.output(dir / "trials.csv"), tr.str());
  run.commit();
  std::cout << eff.str();
  return 0;
}

struct PlanArgs {
  std::string model = "model.bin";
  std::string data = "data";
  std::string perturbations = "perturbations";
  std::string split = "all";
  std::uint64_t seed = 0;
  std::string out_dir = "study";
};

int cmd_plan(const Common& common, const PlanArgs& a) {
  Run run(common.run_dir, "plan-study", common.argv);
  load_config(run, common);
  run.seed("plan", a.seed);
  run.config()["split"] = a.split;
  const Classifier model = load_model(run.input(a.model));
  const Dataset data = load_dataset_dir(run.input(a.data));
  const auto perts = load_perturbations(run.input(a.perturbations));
  const auto chosen = best_by_train_fr(model, data, perts);
  const auto split = parse_split(a.split);
  std::vector<AudioClip> pool;
  std::vector<AdversarialExample> adv;
  for (const auto* clip : select(data, std::nullopt, split)) {
    pool.push_back(*clip);
    auto it = chosen.find(clip->label);
    if (it == chosen.end()) continue;
    adv.push_back({clip->id, make_adversarial_waveform(clip->samples, it->second->p.samples), it->second->id});
  }
  // Clip ids contain the class directory; flatten them for file names.
  for (auto& c : pool) std::replace(c.id.begin(), c.id.end(), '/', '_');
  for (auto& e : adv) std::replace(e.clip_id.begin(), e.clip_id.end(), '/', '_');

  const StudyPlan plan = build_plan(std::span<const AudioClip>(pool), std::span<const AdversarialExample>(adv), model,
                                    a.seed);
  const auto problems = check_plan(plan);
  if (!problems.empty()) throw Error("plan check failed: " + problems.front());
  const fs::path dir = a.out_dir;
  write_text(run.output(dir / "plan.jsonl"), serialize_plan(plan));
  for (const auto& [rel, samples] : plan_audio(plan, pool, adv)) {
    detail::write_file(run.output(dir / rel), encode_wav(samples));
  }
  run.commit();
  std::cout << "wrote plan with " << plan.experiments.size() << " experiments to " << (run.dir() / dir).string() << "\n";
  return 0;
}

struct ServeArgs {
  std::optional<std::string> host, plan, log, audio_root, operator_token, static_dir;
  std::optional<int> port;
};

int cmd_serve(const Common& common, const ServeArgs& a) {
  Run run(common.run_dir, "serve", common.argv);
  const auto cfg = load_config(run, common);
  ServiceConfig sc = ServiceConfig::from(cfg);
  if (a.host) sc.host = *a.host;
  if (a.port) sc.port = *a.port;
  if (a.plan) sc.plan_path = *a.plan;
  if (a.log) sc.log_path = *a.log;
  if (a.audio_root) sc.audio_root = *a.audio_root;
  if (a.operator_token) sc.operator_token = *a.operator_token;
  if (a.static_dir) sc.static_dir = *a.static_dir;
  sc.validate();
  sc.plan_path = run.input(sc.plan_path);
  sc.log_path = run.resolve(sc.log_path);
  if (!sc.audio_root.empty()) sc.audio_root = run.resolve(sc.audio_root);
  if (!sc.static_dir.empty()) sc.static_dir = run.resolve(sc.static_dir);
  run.config()["host"] = sc.host;
  run.config()["port"] = sc.port;
  run.config()["log"] = sc.log_path.string();

  // Block the stop signals here so that only the waiter thread sees them.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  HttpService http(sc);
  const int port = http.bind();
  run.config()["bound_port"] = port;
  run.write_manifest_now();
  std::cout << "listening on http://" << sc.host << ":" << port << std::endl;
  std::jthread waiter([&] {
    int sig = 0;
    sigwait(&set, &sig);
    http.stop();
  });
  http.run();
  // Wake the waiter if the server stopped on its own.
  pthread_kill(waiter.native_handle(), SIGTERM);
  return 0;
}

struct AnalyzeArgs {
  std::string plan = "study/plan.jsonl";
  std::string responses = "responses.jsonl";
  std::string out_dir = "analysis";
  std::size_t mc_samples = kMinMonteCarloSamples;
  std::uint64_t seed = 0;
};

int cmd_analyze(const Common& common, const AnalyzeArgs& a) {
  Run run(common.run_dir, "analyze-study", common.argv);
  load_config(run, common);
  run.seed("monte_carlo", a.seed);
  run.config()["mc_samples"] = a.mc_samples;
  const StudyPlan plan = deserialize_plan(detail::read_file(run.input(a.plan)));
  const auto responses = parse_responses(detail::read_file(run.input(a.responses)));
  SummaryConfig sc;
  sc.mc_samples = a.mc_samples;
  sc.seed = a.seed;
  const StudyReport rep = summarize(responses, plan, sc);
  std::ostringstream acc, nat, abx, tests;
  write_accuracy_csv(acc, rep);
  write_naturalness_csv(nat, rep);
  write_abx_csv(abx, rep);
  write_naturalness_tests_csv(tests, rep);
  const fs::path dir = a.out_dir;
  write_text(run.output(dir / "accuracy.csv"), acc.str());
  write_text(run.output(dir / "naturalness.csv"), nat.str());
  write_text(run.output(dir / "abx.csv"), abx.str());
  write_text(run.output(dir / "naturalness_tests.csv"), tests.str());
  run.manifest()["coverage"] = {{"received", rep.received_responses},
                                {"expected", rep.expected_responses},
                                {"duplicates", rep.duplicate_responses}};
  run.commit();
  if (!rep.complete()) {
    std::cerr << "note: " << rep.received_responses << " of " << rep.expected_responses
              << " planned responses present\n";
  }
  std::cout << abx.str();
  return 0;
}

struct StatsArgs {
  std::size_t k = 0, n = 0;
  double p0 = 0.5;
  std::string tail = "greater";
  double level = 0.95;
  std::string clean, adv;
  std::size_t mc_samples = kMinMonteCarloSamples;
  std::uint64_t seed = 0;
  std::string method = "auto";
  std::string out;
};

int emit_stats(const Common& common, const StatsArgs& a, const std::string& name, const nlohmann::json& j) {
  Run run(common.run_dir, "stats-" + name, common.argv);
  run.manifest()["result"] = j;
  if (!a.out.empty()) write_text(run.output(a.out), j.dump(2) + "\n");
  run.commit();
  std::cout << j.dump(2) << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"advaudio: universal adversarial perturbations for spoken commands, distortion metrics and "
               "listening-study tooling"};
  app.require_subcommand(1);
  app.set_version_flag("--version", ADVAUDIO_VERSION);
  Common common;
  for (int i = 0; i < argc; ++i) common.argv.emplace_back(argv[i]);
  app.add_option("--run-dir", common.run_dir, "Run directory; relative paths resolve against it")->capture_default_str();
  app.add_option("--config", common.config_path, "Key-value configuration file (relative to the run directory)");
  app.add_option("--threads", common.threads, "Worker threads (0 = all cores)")->capture_default_str();

  SynthArgs synth;
  auto* s_synth = app.add_subcommand("synth-data", "Generate the synthetic command dataset");
  s_synth->add_option("--out", synth.out, "Dataset directory")->capture_default_str();
  s_synth->add_option("--clips-per-class", synth.clips_per_class, "Clips per class (default 100)");
  s_synth->add_option("--validation-fraction", synth.validation_fraction, "Share of each class held out (default 0.5)");
  s_synth->add_option("--seed", synth.seed, "Generator seed")->required();

  TrainArgs tr;
  auto* s_train = app.add_subcommand("train", "Train the classifier");
  s_train->add_option("--data", tr.data, "Dataset directory")->capture_default_str();
  s_train->add_option("--out", tr.out, "Model file")->capture_default_str();
  s_train->add_option("--seed", tr.seed, "Initialization and shuffling seed")->required();
  s_train->add_option("--epochs", tr.epochs, "Epochs (default 20)");
  s_train->add_option("--batch-size", tr.batch_size, "Mini-batch size (default 32)");
  s_train->add_option("--lr", tr.learning_rate, "Learning rate (default 0.01)");
  s_train->add_option("--momentum", tr.momentum, "Momentum (default 0.9)");
  s_train->add_option("--max-grad-norm", tr.max_grad_norm, "Gradient norm clip, 0 disables (default 1)");

  AttackArgs at;
  auto* s_attack = app.add_subcommand("attack", "Generate single-class universal perturbations");
  s_attack->add_option("--model", at.model, "Model file")->capture_default_str();
  s_attack->add_option("--data", at.data, "Dataset directory")->capture_default_str();
  s_attack->add_option("--out", at.out, "Output directory")->capture_default_str();
  s_attack->add_option("--class", at.target, "Target class name, or 'all'")->capture_default_str();
  s_attack->add_option("--trials", at.trials, "Perturbations per class")->capture_default_str();
  s_attack->add_option("--xi", at.xi, "L2 budget (default 0.1)");
  s_attack->add_option("--epochs", at.epochs, "Passes over the class (default 5)");
  s_attack->add_option("--max-iter", at.max_iter, "Deepfool iteration cap (default 100)");
  s_attack->add_option("--overshoot", at.overshoot, "Deepfool overshoot (default 0.1)");
  s_attack->add_option("--seed", at.seed, "Base seed for clip order")->required();

  MetricsArgs me;
  auto* s_metrics = app.add_subcommand("metrics", "Distortion reports for every (clip, perturbation) pair");
  s_metrics->add_option("--data", me.data, "Dataset directory")->capture_default_str();
  s_metrics->add_option("--perturbations", me.perturbations, "Perturbation directory")->capture_default_str();
  s_metrics->add_option("--split", me.split, "train, validation or all")->capture_default_str();
  s_metrics->add_option("--out", me.out, "CSV file")->capture_default_str();

  SweepArgs sw;
  auto* s_sweep = app.add_subcommand("sweep", "Fooling ratio under L2 and dB rescaling");
  s_sweep->add_option("--model", sw.model, "Model file")->capture_default_str();
  s_sweep->add_option("--data", sw.data, "Dataset directory")->capture_default_str();
  s_sweep->add_option("--perturbations", sw.perturbations, "Perturbation directory")->capture_default_str();
  s_sweep->add_option("--split", sw.split, "train, validation or all")->capture_default_str();
  s_sweep->add_option("--axis", sw.axis, "l2, db or both")->capture_default_str();
  s_sweep->add_option("--l2-grid", sw.l2_grid, "Comma-separated L2 thresholds");
  s_sweep->add_option("--db-grid", sw.db_grid, "Comma-separated dB thresholds");
  s_sweep->add_option("--trial", sw.trial, "Trial to use (default: best train FR per class)");
  s_sweep->add_option("--out", sw.out, "Plot-data CSV")->capture_default_str();

  SummarizeArgs su;
  auto* s_sum = app.add_subcommand("summarize-attacks", "Per-class effectiveness and distortion tables");
  s_sum->add_option("--model", su.model, "Model file")->capture_default_str();
  s_sum->add_option("--data", su.data, "Dataset directory")->capture_default_str();
  s_sum->add_option("--perturbations", su.perturbations, "Perturbation directory")->capture_default_str();
  s_sum->add_option("--trials", su.trials, "Expected trials per class")->capture_default_str();
  s_sum->add_option("--acceptable-db", su.acceptable_db, "Distortion threshold in dB")->capture_default_str();
  s_sum->add_option("--out-dir", su.out_dir, "Output directory")->capture_default_str();

  PlanArgs pl;
  auto* s_plan = app.add_subcommand("plan-study", "Build the listening-study plan and its audio");
  s_plan->add_option("--model", pl.model, "Model file")->capture_default_str();
  s_plan->add_option("--data", pl.data, "Dataset directory")->capture_default_str();
  s_plan->add_option("--perturbations", pl.perturbations, "Perturbation directory")->capture_default_str();
  s_plan->add_option("--split", pl.split, "Clips to draw from: train, validation or all")->capture_default_str();
  s_plan->add_option("--seed", pl.seed, "Plan seed")->required();
  s_plan->add_option("--out-dir", pl.out_dir, "Output directory")->capture_default_str();

  ServeArgs se;
  auto* s_serve = app.add_subcommand("serve", "Run the listening-study server");
  s_serve->add_option("--host", se.host, "Listen address");
  s_serve->add_option("--port", se.port, "Listen port (0 picks a free port)");
  s_serve->add_option("--plan", se.plan, "Plan file");
  s_serve->add_option("--log", se.log, "Response log file");
  s_serve->add_option("--audio-root", se.audio_root, "Directory audio paths are relative to");
  s_serve->add_option("--operator-token", se.operator_token, "Token for the results endpoints");
  s_serve->add_option("--static-dir", se.static_dir, "Directory served at /");

  AnalyzeArgs an;
  auto* s_an = app.add_subcommand("analyze-study", "Analyze collected responses");
  s_an->add_option("--plan", an.plan, "Plan file")->capture_default_str();
  s_an->add_option("--responses", an.responses, "Response log")->capture_default_str();
  s_an->add_option("--out-dir", an.out_dir, "Output directory")->capture_default_str();
  s_an->add_option("--mc-samples", an.mc_samples, "Monte Carlo samples")->capture_default_str();
  s_an->add_option("--seed", an.seed, "Monte Carlo seed")->capture_default_str();

  StatsArgs st;
  auto* s_stats = app.add_subcommand("stats", "Standalone exact tests");
  s_stats->require_subcommand(1);
  s_stats->add_option("--out", st.out, "Also write the JSON result to this file");
  auto* s_bin = s_stats->add_subcommand("binomial", "Exact binomial test");
  s_bin->add_option("--k", st.k, "Successes")->required();
  s_bin->add_option("--n", st.n, "Trials")->required();
  s_bin->add_option("--p0", st.p0, "Null success probability")->capture_default_str();
  s_bin->add_option("--tail", st.tail, "greater, less or two-sided")->capture_default_str();
  auto* s_cp = s_stats->add_subcommand("clopper-pearson", "Exact binomial confidence interval");
  s_cp->add_option("--k", st.k, "Successes")->required();
  s_cp->add_option("--n", st.n, "Trials")->required();
  s_cp->add_option("--level", st.level, "Confidence level")->capture_default_str();
  auto* s_mn = s_stats->add_subcommand("multinomial", "Exact multinomial goodness-of-fit test");
  s_mn->add_option("--clean", st.clean, "Comma-separated clean histogram")->required();
  s_mn->add_option("--adv", st.adv, "Comma-separated adversarial histogram")->required();
  s_mn->add_option("--mc-samples", st.mc_samples, "Monte Carlo samples")->capture_default_str();
  s_mn->add_option("--seed", st.seed, "Monte Carlo seed")->capture_default_str();
  s_mn->add_option("--method", st.method, "auto, enumerate or monte-carlo")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*s_synth) return cmd_synth(common, synth);
    if (*s_train) return cmd_train(common, tr);
    if (*s_attack) return cmd_attack(common, at);
    if (*s_metrics) return cmd_metrics(common, me);
    if (*s_sweep) return cmd_sweep(common, sw);
    if (*s_sum) return cmd_summarize(common, su);
    if (*s_plan) return cmd_plan(common, pl);
    if (*s_serve) return cmd_serve(common, se);
    if (*s_an) return cmd_analyze(common, an);
    if (*s_bin) {
      const auto tail = parse_tail(st.tail);
      if (!tail) throw InvalidArgument("--tail must be greater, less or two-sided");
      return emit_stats(common, st, "binomial", stats_json(binomial_test_exact(st.k, st.n, st.p0, *tail)));
    }
    if (*s_cp) {
      const auto [lo, hi] = clopper_pearson(st.k, st.n, st.level);
      return emit_stats(common, st, "clopper-pearson",
                        {{"test", "clopper-pearson"}, {"k", st.k}, {"n", st.n}, {"level", st.level}, {"ci", {lo, hi}}});
    }
    if (*s_mn) {
      MultinomialMethod method = MultinomialMethod::automatic;
      if (st.method == "enumerate") method = MultinomialMethod::enumerate;
      else if (st.method == "monte-carlo") method = MultinomialMethod::monte_carlo;
      else if (st.method != "auto") throw InvalidArgument("--method must be auto, enumerate or monte-carlo");
      const auto clean = parse_counts(st.clean);
      const auto adv = parse_counts(st.adv);
      return emit_stats(common, st, "multinomial",
                        stats_json(multinomial_test_exact(clean, adv, st.mc_samples, st.seed, method)));
    }
  } catch (const std::exception& e) {
    std::cerr << "advaudio: error: " << e.what() << "\n";
    return 1;
  }
  return 1;
}
