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

// Decibel distortion metrics between a clean signal x and a perturbation v,
// applied to whole signals or to the vocal / background parts of x.
//
// Every log argument is floored at one int16 quantum (kQuantum), so the
// metrics are finite for any input, including all-zero signals.

#pragma once

#include <fstream>

#include "advaudio/common.hpp"
#include "advaudio/signal_io.hpp"

namespace advaudio {

inline double peak_abs(std::span<const double> x) {
  double peak = 0.0;
  for (double s : x) peak = std::max(peak, std::abs(s));
  return peak;
}

// max_i 20 log10(max(|x_i|, eps))
inline double db_max(std::span<const double> x) {
  if (x.empty()) throw InvalidArgument("db_max: empty signal");
  return 20.0 * std::log10(std::max(peak_abs(x), kQuantum));
}

// 20 log10(max(mean |x_i|, eps))
inline double db_mean(std::span<const double> x) {
  if (x.empty()) throw InvalidArgument("db_mean: empty signal");
  double sum = 0.0;
  for (double s : x) sum += std::abs(s);
  return 20.0 * std::log10(std::max(sum / static_cast<double>(x.size()), kQuantum));
}

inline double db_x_max(std::span<const double> v, std::span<const double> x) {
  if (v.size() != x.size()) throw InvalidArgument("db_x_max: length mismatch");
  return db_max(v) - db_max(x);
}

inline double db_x_mean(std::span<const double> v, std::span<const double> x) {
  if (v.size() != x.size()) throw InvalidArgument("db_x_mean: length mismatch");
  return db_mean(v) - db_mean(x);
}

inline double mean_power(std::span<const double> x) {
  return dot(x, x) / static_cast<double>(x.size());
}

// 10 log10(P(x) / P(v)), both powers floored at eps^2.
inline double snr(std::span<const double> x, std::span<const double> v) {
  if (v.size() != x.size()) throw InvalidArgument("snr: length mismatch");
  if (x.empty()) throw InvalidArgument("snr: empty signal");
  const double floor = kQuantum * kQuantum;
  return 10.0 * std::log10(std::max(mean_power(x), floor) / std::max(mean_power(v), floor));
}

// Inclusive 0-based sample range [first, last] holding the vocal part.
struct VocalSegment {
  std::size_t first = 0;
  std::size_t last = 0;
  double energy_fraction = 0.0;

  std::size_t length() const { return last - first + 1; }
  friend bool operator==(const VocalSegment&, const VocalSegment&) = default;
};

// Trims the shortest prefix and suffix each holding at most 2.5% of the
// energy: first is the smallest index whose cumulative energy from the
// start exceeds 0.025 E, last the largest index whose cumulative energy to
// the end exceeds 0.025 E. The interior keeps at least 95% of E.
inline VocalSegment vocal_segment(std::span<const double> x) {
  double total = 0.0;
  for (double s : x) total += s * s;
  if (!(total > 0.0)) throw InvalidArgument("vocal_segment: signal has zero energy");
  // acc > E / 40, tested as 40 acc > E: for int16-grid samples both sides
  // are exact in double precision, so ties are decided exactly.
  auto over_tail = [total](double acc) { return 40.0 * acc > total; };

  VocalSegment seg;
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    acc += x[i] * x[i];
    if (over_tail(acc)) {
      seg.first = i;
      break;
    }
  }
  acc = 0.0;
  for (std::size_t i = x.size(); i-- > 0;) {
    acc += x[i] * x[i];
    if (over_tail(acc)) {
      seg.last = i;
      break;
    }
  }
  double inside = 0.0;
  for (std::size_t i = seg.first; i <= seg.last; ++i) inside += x[i] * x[i];
  seg.energy_fraction = inside / total;
  return seg;
}

struct PartMetrics {
  double db_x_max = 0.0;
  double db_x_mean = 0.0;
};

struct PartDistortion {
  std::optional<PartMetrics> vocal;
  std::optional<PartMetrics> background;  // absent when the segment spans the whole clip
};

inline PartDistortion part_distortion(std::span<const double> x, std::span<const double> v,
                                      const VocalSegment& segment) {
  if (x.size() != v.size()) throw InvalidArgument("part_distortion: length mismatch");
  if (segment.first > segment.last || segment.last >= x.size()) {
    throw InvalidArgument("part_distortion: segment outside signal");
  }
  PartDistortion out;
  auto xv = x.subspan(segment.first, segment.length());
  auto vv = v.subspan(segment.first, segment.length());
  out.vocal = PartMetrics{db_x_max(vv, xv), db_x_mean(vv, xv)};

  std::vector<double> xb, vb;
  xb.reserve(x.size() - segment.length());
  vb.reserve(x.size() - segment.length());
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (i >= segment.first && i <= segment.last) continue;
    xb.push_back(x[i]);
    vb.push_back(v[i]);
  }
  if (!xb.empty()) out.background = PartMetrics{db_x_max(vb, xb), db_x_mean(vb, xb)};
  return out;
}

enum class IntensityLevel : std::uint8_t { low, medium, high };

inline constexpr std::string_view to_string(IntensityLevel level) {
  switch (level) {
    case IntensityLevel::low: return "low";
    case IntensityLevel::medium: return "medium";
    case IntensityLevel::high: return "high";
  }
  return "?";
}

inline std::optional<IntensityLevel> parse_intensity(std::string_view s) {
  if (s == "low") return IntensityLevel::low;
  if (s == "medium") return IntensityLevel::medium;
  if (s == "high") return IntensityLevel::high;
  return std::nullopt;
}

inline constexpr double kIntensityLowDb = 50.0;
inline constexpr double kIntensityHighDb = 70.0;

// db_mean on the int16 amplitude scale.
inline double int16_db_mean(std::span<const double> x) { return db_mean(x) + 20.0 * std::log10(32768.0); }

inline IntensityLevel intensity_from_db(double db) {
  if (db < kIntensityLowDb) return IntensityLevel::low;
  if (db <= kIntensityHighDb) return IntensityLevel::medium;
  return IntensityLevel::high;
}

inline IntensityLevel intensity_level(std::span<const double> x) { return intensity_from_db(int16_db_mean(x)); }

struct DistortionReport {
  std::string clip_id;
  std::string perturbation_id;
  CommandLabel label = CommandLabel::silence;
  double l2 = 0.0;
  double snr_db = 0.0;
  double db_x_max_whole = 0.0;
  double db_x_mean_whole = 0.0;
  std::optional<double> db_x_max_vocal, db_x_mean_vocal;
  std::optional<double> db_x_max_background, db_x_mean_background;
  std::optional<VocalSegment> segment;
  IntensityLevel intensity = IntensityLevel::low;
};

// Silence clips have no vocal part: their vocal metrics are omitted and the
// whole clip counts as background.
inline DistortionReport distortion_report(const AudioClip& clip, std::span<const double> v,
                                          std::string perturbation_id) {
  const std::span<const double> x = clip.samples;
  if (v.size() != x.size()) throw InvalidArgument("distortion_report: length mismatch");
  DistortionReport r;
  r.clip_id = clip.id;
  r.perturbation_id = std::move(perturbation_id);
  r.label = clip.label;
  r.l2 = l2_norm(v);
  r.snr_db = snr(x, v);
  r.db_x_max_whole = db_x_max(v, x);
  r.db_x_mean_whole = db_x_mean(v, x);
  r.intensity = intensity_level(x);
  if (clip.label == CommandLabel::silence) {
    r.db_x_max_background = r.db_x_max_whole;
    r.db_x_mean_background = r.db_x_mean_whole;
    return r;
  }
  double energy = dot(x, x);
  if (!(energy > 0.0)) return r;
  const VocalSegment seg = vocal_segment(x);
  const PartDistortion parts = part_distortion(x, v, seg);
  r.segment = seg;
  r.db_x_max_vocal = parts.vocal->db_x_max;
  r.db_x_mean_vocal = parts.vocal->db_x_mean;
  if (parts.background) {
    r.db_x_max_background = parts.background->db_x_max;
    r.db_x_mean_background = parts.background->db_x_mean;
  }
  return r;
}

// One row per (clip, perturbation, part); absent values are left empty.
inline constexpr std::string_view kDistortionCsvHeader =
    "clip_id,perturbation_id,label,part,db_x_max,db_x_mean,snr_db,l2,segment_first,segment_last,"
    "energy_fraction,intensity";

inline void write_distortion_csv(std::ostream& out, std::span<const DistortionReport> reports) {
  auto num = [](std::optional<double> v) {
    if (!v) return std::string();
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", *v);
    return std::string(buf);
  };
  out << kDistortionCsvHeader << "\n";
  for (const auto& r : reports) {
    const std::string seg_first = r.segment ? std::to_string(r.segment->first) : "";
    const std::string seg_last = r.segment ? std::to_string(r.segment->last) : "";
    const std::string frac = r.segment ? num(r.segment->energy_fraction) : "";
    auto row = [&](std::string_view part, std::optional<double> mx, std::optional<double> mn) {
      out << r.clip_id << ',' << r.perturbation_id << ',' << to_string(r.label) << ',' << part << ','
          << num(mx) << ',' << num(mn) << ',' << num(r.snr_db) << ',' << num(r.l2) << ',' << seg_first << ','
          << seg_last << ',' << frac << ',' << to_string(r.intensity) << "\n";
    };
    row("whole", r.db_x_max_whole, r.db_x_mean_whole);
    row("vocal", r.db_x_max_vocal, r.db_x_mean_vocal);
    row("background", r.db_x_max_background, r.db_x_mean_background);
  }
}

}  // namespace advaudio
