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

// Fooling ratios, scaling sweeps and per-class effectiveness / distortion
// tables for sets of universal perturbations.

#pragma once

#include <ostream>

#include "advaudio/attacks.hpp"
#include "advaudio/distortion.hpp"

namespace advaudio {

// Model labels of each clip, computed once and reused across perturbations.
template <ScoringModel M>
std::vector<std::size_t> predict_all(const M& model, std::span<const std::vector<double>> clips) {
  std::vector<std::size_t> out(clips.size());
  parallel_for(clips.size(), [&](std::size_t i) { out[i] = predict_index(model, clips[i]); });
  return out;
}

// Percentage of clips whose predicted label changes when v is added. Every
// clip counts, including ones the model already gets wrong.
template <ScoringModel M>
double fooling_ratio(const M& model, std::span<const std::vector<double>> clips,
                     std::span<const std::size_t> clean_labels, std::span<const double> v) {
  if (clips.empty()) throw InvalidArgument("fooling_ratio: empty clip set");
  if (clean_labels.size() != clips.size()) throw InvalidArgument("fooling_ratio: label count mismatch");
  std::vector<unsigned char> flipped(clips.size(), 0);
  parallel_for(clips.size(), [&](std::size_t i) {
    flipped[i] = predict_index(model, add(clips[i], v)) != clean_labels[i];
  });
  const auto n = std::accumulate(flipped.begin(), flipped.end(), std::size_t{0});
  return 100.0 * static_cast<double>(n) / static_cast<double>(clips.size());
}

template <ScoringModel M>
double fooling_ratio(const M& model, std::span<const std::vector<double>> clips, std::span<const double> v) {
  if (clips.empty()) throw InvalidArgument("fooling_ratio: empty clip set");
  return fooling_ratio(model, clips, predict_all(model, clips), v);
}

enum class SweepAxis : std::uint8_t { l2_norm, db_x_max };

inline constexpr std::string_view to_string(SweepAxis a) { return a == SweepAxis::l2_norm ? "l2_norm" : "db_x_max"; }

inline std::optional<SweepAxis> parse_sweep_axis(std::string_view s) {
  if (s == "l2_norm" || s == "l2") return SweepAxis::l2_norm;
  if (s == "db_x_max" || s == "db") return SweepAxis::db_x_max;
  return std::nullopt;
}

inline std::vector<double> default_thresholds(SweepAxis axis) {
  std::vector<double> out;
  if (axis == SweepAxis::l2_norm) {
    for (int i = 0; i <= 10; ++i) out.push_back(0.01 * i);
  } else {
    for (int db = -60; db <= -20; db += 5) out.push_back(db);
  }
  return out;
}

struct SweepCurve {
  SweepAxis axis = SweepAxis::l2_norm;
  CommandLabel label = CommandLabel::silence;
  std::vector<double> thresholds;
  std::vector<double> fr_values;
  // Largest |achieved - threshold| over every perturbation actually applied.
  // On the dB axis this skips floor-bound pairs, where the peak of the scaled
  // perturbation is below one int16 quantum and db_x_max saturates.
  double max_threshold_error = 0.0;
  // dB axis only: largest |20 log10(peak(alpha v)) - dB_max(x) - threshold|
  // over every pair, floor-bound ones included.
  double max_peak_ratio_error = 0.0;
  // dB axis only: (clip, threshold) pairs that are floor-bound.
  std::size_t floor_bound = 0;
};

// L2 axis: one rescaled copy of v shared by all clips. dB axis: v is
// rescaled separately for each clip so that db_x_max(alpha v, x) hits the
// threshold.
template <ScoringModel M>
SweepCurve fr_sweep(const M& model, std::span<const std::vector<double>> clips, std::span<const double> v,
                    SweepAxis axis, std::span<const double> thresholds, CommandLabel label = CommandLabel::silence) {
  if (clips.empty()) throw InvalidArgument("fr_sweep: empty clip set");
  if (!(l2_norm(v) > 0.0)) throw InvalidArgument("fr_sweep: zero perturbation");
  if (!std::is_sorted(thresholds.begin(), thresholds.end())) throw InvalidArgument("fr_sweep: thresholds not sorted");
  SweepCurve curve;
  curve.axis = axis;
  curve.label = label;
  curve.thresholds.assign(thresholds.begin(), thresholds.end());
  const auto clean = predict_all(model, clips);

  for (double t : thresholds) {
    if (axis == SweepAxis::l2_norm) {
      const auto scaled_v = scale_to_l2(v, t);
      curve.max_threshold_error = std::max(curve.max_threshold_error, std::abs(l2_norm(scaled_v) - t));
      curve.fr_values.push_back(fooling_ratio(model, clips, clean, scaled_v));
      continue;
    }
    std::vector<unsigned char> flipped(clips.size(), 0);
    std::vector<unsigned char> floored(clips.size(), 0);
    std::vector<double> error(clips.size(), 0.0), ratio_error(clips.size(), 0.0);
    parallel_for(clips.size(), [&](std::size_t i) {
      const auto scaled_v = scale_to_db_max(v, clips[i], t);
      const double peak = peak_abs(scaled_v);
      floored[i] = peak < kQuantum;
      error[i] = std::abs(db_x_max(scaled_v, clips[i]) - t);
      ratio_error[i] = std::abs(20.0 * std::log10(peak) - db_max(clips[i]) - t);
      flipped[i] = predict_index(model, add(clips[i], scaled_v)) != clean[i];
    });
    for (std::size_t i = 0; i < clips.size(); ++i) {
      curve.max_peak_ratio_error = std::max(curve.max_peak_ratio_error, ratio_error[i]);
      if (floored[i]) {
        ++curve.floor_bound;
      } else {
        curve.max_threshold_error = std::max(curve.max_threshold_error, error[i]);
      }
    }
    const auto n = std::accumulate(flipped.begin(), flipped.end(), std::size_t{0});
    curve.fr_values.push_back(100.0 * static_cast<double>(n) / static_cast<double>(clips.size()));
  }
  return curve;
}

// "threshold,class,fr" triples, one block per axis.
inline void write_sweep_plot_data(std::ostream& out, std::span<const SweepCurve> curves) {
  out << "axis,threshold,class,fr\n";
  char buf[128];
  for (const auto& c : curves) {
    for (std::size_t i = 0; i < c.thresholds.size(); ++i) {
      std::snprintf(buf, sizeof buf, "%.10g,%s,%.10g", c.thresholds[i], std::string(to_string(c.label)).c_str(),
                    c.fr_values[i]);
      out << to_string(c.axis) << ',' << buf << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// Per-class tables

struct FoolingReport {
  CommandLabel label = CommandLabel::silence;
  std::size_t trial = 0;
  double fr_train = 0.0;
  double fr_valid = 0.0;
  std::size_t n_train = 0;
  std::size_t n_valid = 0;
};

template <ScoringModel M>
FoolingReport evaluate_trial(const M& model, std::span<const std::vector<double>> train_clips,
                             std::span<const std::vector<double>> valid_clips, const Perturbation& p) {
  FoolingReport r;
  r.label = p.target_class;
  r.trial = p.trial_index;
  r.n_train = train_clips.size();
  r.n_valid = valid_clips.size();
  r.fr_train = fooling_ratio(model, train_clips, p.samples);
  r.fr_valid = fooling_ratio(model, valid_clips, p.samples);
  return r;
}

struct ClassSummaryConfig {
  std::size_t expected_trials = 5;
  double acceptable_db = -32.0;
};

struct ClassSummary {
  CommandLabel label = CommandLabel::silence;
  std::vector<FoolingReport> trials;
  std::vector<std::size_t> missing_trials;
  // Highest train FR over trials, and the validation FR of that same trial.
  std::optional<double> max_fr_train, max_fr_valid;
  std::optional<std::size_t> best_trial;
  // Highest validation FR over trials, regardless of train FR.
  std::optional<double> best_fr_valid;
  std::optional<double> mean_fr_train, mean_fr_valid;
  // db_x_max of v against every clip of the class, pooled over trials.
  std::optional<double> mean_db_x_max;
  std::optional<double> percent_below_threshold;
  std::size_t distortion_samples = 0;
};

// Summarizes the available trials for one class. perturbations[t] is trial
// t (empty when missing). Distortion aggregates use the train and
// validation clips together.
template <ScoringModel M>
ClassSummary class_summary(const M& model, CommandLabel label, std::span<const std::optional<Perturbation>> perturbations,
                           std::span<const std::vector<double>> train_clips,
                           std::span<const std::vector<double>> valid_clips, const ClassSummaryConfig& config = {}) {
  ClassSummary s;
  s.label = label;
  const auto train_clean = predict_all(model, train_clips);
  const auto valid_clean = predict_all(model, valid_clips);
  double db_sum = 0.0;
  std::size_t below = 0;
  for (std::size_t t = 0; t < std::max(config.expected_trials, perturbations.size()); ++t) {
    if (t >= perturbations.size() || !perturbations[t]) {
      s.missing_trials.push_back(t);
      continue;
    }
    const Perturbation& p = *perturbations[t];
    if (p.target_class != label) throw InvalidArgument("class_summary: perturbation for another class");
    FoolingReport r;
    r.label = label;
    r.trial = t;
    r.n_train = train_clips.size();
    r.n_valid = valid_clips.size();
    if (!train_clips.empty()) r.fr_train = fooling_ratio(model, train_clips, train_clean, p.samples);
    if (!valid_clips.empty()) r.fr_valid = fooling_ratio(model, valid_clips, valid_clean, p.samples);
    s.trials.push_back(r);
    for (auto clips : {train_clips, valid_clips}) {
      for (const auto& x : clips) {
        const double db = db_x_max(p.samples, x);
        db_sum += db;
        if (db < config.acceptable_db) ++below;
        ++s.distortion_samples;
      }
    }
  }
  if (s.trials.empty()) return s;
  double sum_train = 0.0, sum_valid = 0.0;
  const FoolingReport* best = &s.trials.front();
  double best_valid = s.trials.front().fr_valid;
  for (const auto& r : s.trials) {
    sum_train += r.fr_train;
    sum_valid += r.fr_valid;
    if (r.fr_train > best->fr_train) best = &r;
    best_valid = std::max(best_valid, r.fr_valid);
  }
  const double n = static_cast<double>(s.trials.size());
  s.max_fr_train = best->fr_train;
  s.max_fr_valid = best->fr_valid;
  s.best_trial = best->trial;
  s.best_fr_valid = best_valid;
  s.mean_fr_train = sum_train / n;
  s.mean_fr_valid = sum_valid / n;
  if (s.distortion_samples > 0) {
    s.mean_db_x_max = db_sum / static_cast<double>(s.distortion_samples);
    s.percent_below_threshold = 100.0 * static_cast<double>(below) / static_cast<double>(s.distortion_samples);
  }
  return s;
}

namespace detail {

inline std::string fmt_opt(std::optional<double> v) {
  if (!v) return {};
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.10g", *v);
  return buf;
}

}  // namespace detail

// Effectiveness table: one row per class. Empty cells mark missing data.
inline void write_effectiveness_csv(std::ostream& out, std::span<const ClassSummary> rows) {
  out << "class,trials,missing_trials,max_fr_train,max_fr_valid,best_trial,best_fr_valid,mean_fr_train,mean_fr_valid\n";
  for (const auto& r : rows) {
    std::string missing;
    for (std::size_t t : r.missing_trials) missing += (missing.empty() ? "" : ";") + std::to_string(t);
    out << to_string(r.label) << ',' << r.trials.size() << ',' << missing << ',' << detail::fmt_opt(r.max_fr_train)
        << ',' << detail::fmt_opt(r.max_fr_valid) << ','
        << (r.best_trial ? std::to_string(*r.best_trial) : std::string()) << ',' << detail::fmt_opt(r.best_fr_valid)
        << ',' << detail::fmt_opt(r.mean_fr_train) << ',' << detail::fmt_opt(r.mean_fr_valid) << "\n";
  }
}

inline void write_distortion_summary_csv(std::ostream& out, std::span<const ClassSummary> rows, double acceptable_db) {
  char head[64];
  std::snprintf(head, sizeof head, "%g", acceptable_db);
  out << "class,samples,mean_db_x_max,percent_below_" << head << "db\n";
  for (const auto& r : rows) {
    out << to_string(r.label) << ',' << r.distortion_samples << ',' << detail::fmt_opt(r.mean_db_x_max) << ','
        << detail::fmt_opt(r.percent_below_threshold) << "\n";
  }
}

inline void write_trials_csv(std::ostream& out, std::span<const ClassSummary> rows) {
  out << "class,trial,fr_train,fr_valid,n_train,n_valid\n";
  for (const auto& s : rows) {
    for (const auto& r : s.trials) {
      out << to_string(r.label) << ',' << r.trial << ',' << detail::fmt_opt(r.fr_train) << ','
          << detail::fmt_opt(r.fr_valid) << ',' << r.n_train << ',' << r.n_valid << "\n";
    }
  }
}

}  // namespace advaudio
