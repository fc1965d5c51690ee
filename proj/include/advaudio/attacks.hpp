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

// Multiclass Deepfool and the single-class universal perturbation loop
// (accumulate per-clip Deepfool steps, project onto the L2 ball), plus the
// two rescaling procedures used in effectiveness sweeps.

#pragma once

#include <concepts>
#include <cstring>
#include <limits>
#include <numeric>
#include <random>

#include "advaudio/classifier.hpp"
#include "advaudio/distortion.hpp"

namespace advaudio {

// Anything exposing class scores.
template <class M>
concept ScoringModel = requires(const M& m, std::span<const double> x) {
  { m.num_classes() } -> std::convertible_to<std::size_t>;
  { m.logits(x) } -> std::same_as<std::vector<double>>;
};

// ... and their input gradients.
template <class M>
concept DifferentiableModel =
    ScoringModel<M> && requires(const M& m, std::span<const double> x, std::span<const std::size_t> classes) {
      { m.logits_and_input_grads(x, classes) } -> std::same_as<LogitGradients>;
    };

template <ScoringModel M>
std::size_t predict_index(const M& model, std::span<const double> x) {
  return argmax(model.logits(x));
}

enum class PerturbationSource : std::uint8_t { deepfool_individual, uap_hc_universal };

inline constexpr std::string_view to_string(PerturbationSource s) {
  return s == PerturbationSource::deepfool_individual ? "deepfool-individual" : "uap-hc-universal";
}

struct Perturbation {
  std::vector<double> samples;
  CommandLabel target_class = CommandLabel::silence;
  double xi = 0.0;
  std::size_t epochs_used = 0;
  std::size_t trial_index = 0;
  std::uint64_t seed = 0;
  PerturbationSource source = PerturbationSource::uap_hc_universal;
};

struct DeepfoolResult {
  std::vector<double> perturbation;
  std::size_t iterations = 0;
  bool success = false;
  // Set when every candidate direction had a zero gradient difference.
  bool degenerate = false;
  std::size_t original_index = 0;
  std::size_t final_index = 0;
};

// Iterative linearization toward the nearest decision boundary. At each
// step, with the model linearized at x + (1 + overshoot) r_total, the step
// toward class l = argmin_k |f_k - f_c| / ||grad f_k - grad f_c|| is
// (|f_l - f_c| / ||w_l||^2) w_l. The returned perturbation is
// (1 + overshoot) r_total; the loop stops once that flips the label.
template <DifferentiableModel M>
DeepfoolResult deepfool(const M& model, std::span<const double> x, std::size_t max_iter = 100,
                        double overshoot = 0.1) {
  if (max_iter < 1) throw InvalidArgument("deepfool: max_iter must be >= 1");
  const std::size_t classes = model.num_classes();
  std::vector<std::size_t> all(classes);
  std::iota(all.begin(), all.end(), std::size_t{0});

  DeepfoolResult res;
  res.original_index = predict_index(model, x);
  const std::size_t c = res.original_index;
  std::vector<double> r_total(x.size(), 0.0);
  std::vector<double> point(x.begin(), x.end());
  std::size_t current = c;

  while (current == c && res.iterations < max_iter) {
    LogitGradients lg = model.logits_and_input_grads(point, all);
    double best_ratio = std::numeric_limits<double>::infinity();
    std::size_t best = classes;
    double best_df = 0.0, best_wnorm2 = 0.0;
    for (std::size_t k = 0; k < classes; ++k) {
      if (k == c) continue;
      double wn2 = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double w = lg.gradients[k][i] - lg.gradients[c][i];
        wn2 += w * w;
      }
      if (!(wn2 > 0.0)) continue;
      const double df = lg.logits[k] - lg.logits[c];
      const double ratio = std::abs(df) / std::sqrt(wn2);
      if (ratio < best_ratio) {
        best_ratio = ratio;
        best = k;
        best_df = df;
        best_wnorm2 = wn2;
      }
    }
    ++res.iterations;
    if (best == classes) {
      res.degenerate = true;
      break;
    }
    const double step = std::abs(best_df) / best_wnorm2;
    for (std::size_t i = 0; i < x.size(); ++i) {
      r_total[i] += step * (lg.gradients[best][i] - lg.gradients[c][i]);
    }
    for (std::size_t i = 0; i < x.size(); ++i) point[i] = x[i] + (1.0 + overshoot) * r_total[i];
    current = predict_index(model, point);
  }

  res.perturbation = scaled(r_total, 1.0 + overshoot);
  res.final_index = current;
  res.success = current != c;
  return res;
}

// v <- v * min(1, xi / ||v||)
inline void project_l2_ball(std::vector<double>& v, double xi) {
  const double norm = l2_norm(v);
  if (norm <= xi) return;
  double factor = xi / norm;
  for (double& s : v) s *= factor;
  // Rounding can leave the norm a few ulps above xi.
  while (l2_norm(v) > xi) {
    factor = std::nextafter(1.0, 0.0);
    for (double& s : v) s *= factor;
  }
}

struct UapConfig {
  double xi = 0.1;
  std::size_t epochs = 5;
  std::size_t max_iter = 100;
  double overshoot = 0.1;
};

struct UapStats {
  std::size_t deepfool_calls = 0;
  std::size_t deepfool_successes = 0;
  std::vector<double> norm_after_projection;  // one entry per accumulated step
};

// Single-class universal perturbation. Clips are visited in a seeded
// shuffled order each epoch; a clip the current v does not yet fool gets a
// Deepfool step from x + v, which is accumulated into v (when Deepfool
// converged) and projected back onto the xi ball.
template <DifferentiableModel M>
Perturbation uap_hc(const M& model, std::span<const std::vector<double>> clips, CommandLabel target,
                    const UapConfig& config, std::uint64_t seed, std::size_t trial_index = 0,
                    UapStats* stats = nullptr) {
  if (clips.empty()) throw InvalidArgument("uap_hc: empty training set");
  if (!(config.xi > 0.0)) throw InvalidArgument("uap_hc: xi must be > 0");
  const std::size_t d = clips.front().size();
  for (const auto& c : clips) {
    if (c.size() != d) throw InvalidArgument("uap_hc: clips differ in length");
  }
  std::vector<std::size_t> clean(clips.size());
  for (std::size_t i = 0; i < clips.size(); ++i) clean[i] = predict_index(model, clips[i]);

  Perturbation out;
  out.samples.assign(d, 0.0);
  out.target_class = target;
  out.xi = config.xi;
  out.epochs_used = config.epochs;
  out.trial_index = trial_index;
  out.seed = seed;
  out.source = PerturbationSource::uap_hc_universal;

  std::mt19937_64 rng(seed);
  std::vector<std::size_t> order(clips.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::vector<double> point(d);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t i : order) {
      for (std::size_t j = 0; j < d; ++j) point[j] = clips[i][j] + out.samples[j];
      if (predict_index(model, point) != clean[i]) continue;
      DeepfoolResult df = deepfool(model, point, config.max_iter, config.overshoot);
      if (stats) ++stats->deepfool_calls;
      if (!df.success) continue;
      if (stats) ++stats->deepfool_successes;
      for (std::size_t j = 0; j < d; ++j) out.samples[j] += df.perturbation[j];
      project_l2_ball(out.samples, config.xi);
      if (stats) stats->norm_after_projection.push_back(l2_norm(out.samples));
    }
  }
  return out;
}

// Rescales v so that ||v||_2 equals target_norm.
inline std::vector<double> scale_to_l2(std::span<const double> v, double target_norm) {
  const double norm = l2_norm(v);
  if (!(norm > 0.0)) throw InvalidArgument("scale_to_l2: zero perturbation");
  if (target_norm < 0.0) throw InvalidArgument("scale_to_l2: negative target norm");
  return scaled(v, target_norm / norm);
}

inline double db_max_scale_factor(std::span<const double> v, std::span<const double> x, double target_db) {
  if (v.size() != x.size()) throw InvalidArgument("scale_to_db_max: length mismatch");
  auto nonzero = [](std::span<const double> s) {
    return std::any_of(s.begin(), s.end(), [](double a) { return a != 0.0; });
  };
  if (!nonzero(v) || !nonzero(x)) throw InvalidArgument("scale_to_db_max: all-zero signal");
  return std::pow(10.0, (target_db + db_max(x) - db_max(v)) / 20.0);
}

// Rescales v so that db_x_max(alpha v, x) equals target_db.
inline std::vector<double> scale_to_db_max(std::span<const double> v, std::span<const double> x, double target_db) {
  return scaled(v, db_max_scale_factor(v, x, target_db));
}

// Adversarial waveform for export: x + v clipped into the int16 range.
inline std::vector<double> clipped_sum(std::span<const double> x, std::span<const double> v) {
  std::vector<double> out = add(x, v);
  for (double& s : out) s = std::clamp(s, -1.0, 1.0 - kQuantum);
  return out;
}

// ---------------------------------------------------------------------------
// Perturbation files: a text provenance header terminated by a blank line,
// followed by the raw little-endian doubles.

inline std::string serialize_perturbation(const Perturbation& p) {
  std::string out = "ADVPERT 1\n";
  out += "target_class = " + std::string(to_string(p.target_class)) + "\n";
  KeyValueConfig kv;
  kv.set("xi", p.xi);
  out += "xi = " + *kv.raw("xi") + "\n";
  out += "epochs_used = " + std::to_string(p.epochs_used) + "\n";
  out += "trial_index = " + std::to_string(p.trial_index) + "\n";
  out += "seed = " + std::to_string(p.seed) + "\n";
  out += "source = " + std::string(to_string(p.source)) + "\n";
  out += "length = " + std::to_string(p.samples.size()) + "\n\n";
  out.append(reinterpret_cast<const char*>(p.samples.data()), p.samples.size() * sizeof(double));
  return out;
}

inline Perturbation deserialize_perturbation(std::string_view bytes) {
  const auto header_end = bytes.find("\n\n");
  if (!bytes.starts_with("ADVPERT ") || header_end == std::string_view::npos) {
    throw FormatError("perturbation file: bad header");
  }
  const auto first_nl = bytes.find('\n');
  if (bytes.substr(8, first_nl - 8) != "1") throw VersionError("perturbation file: unsupported version");
  auto kv = KeyValueConfig::parse(bytes.substr(first_nl + 1, header_end - first_nl));
  Perturbation p;
  p.target_class = parse_label_or_throw(kv.require<std::string>("target_class"));
  p.xi = kv.require<double>("xi");
  p.epochs_used = kv.require<std::size_t>("epochs_used");
  p.trial_index = kv.require<std::size_t>("trial_index");
  p.seed = kv.require<std::uint64_t>("seed");
  const auto source = kv.require<std::string>("source");
  if (source == "deepfool-individual") p.source = PerturbationSource::deepfool_individual;
  else if (source == "uap-hc-universal") p.source = PerturbationSource::uap_hc_universal;
  else throw FormatError("perturbation file: unknown source " + source);
  const auto length = kv.require<std::size_t>("length");
  auto body = bytes.substr(header_end + 2);
  if (body.size() != length * sizeof(double)) throw FormatError("perturbation file: payload size mismatch");
  p.samples.resize(length);
  std::memcpy(p.samples.data(), body.data(), body.size());
  return p;
}

inline void save_perturbation(const Perturbation& p, const std::filesystem::path& path) {
  detail::write_file(path, serialize_perturbation(p));
}

inline Perturbation load_perturbation(const std::filesystem::path& path) {
  return deserialize_perturbation(detail::read_file(path));
}

}  // namespace advaudio
