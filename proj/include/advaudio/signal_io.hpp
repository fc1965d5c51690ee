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

// Waveform container, 16-bit PCM WAV I/O, dataset directories and the
// synthetic command generator used for desk-scale runs.

#pragma once

#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "advaudio/common.hpp"

namespace advaudio {

enum class Split : std::uint8_t { train, validation };

inline constexpr std::string_view to_string(Split s) {
  return s == Split::train ? "train" : "validation";
}

struct AudioClip {
  std::string id;
  std::vector<double> samples;
  int sample_rate = kSampleRate;
  CommandLabel label = CommandLabel::silence;
  Split split = Split::train;
  // Zeros appended / samples dropped to reach kClipLength on load.
  std::size_t padded_samples = 0;
  std::size_t truncated_samples = 0;

  void validate() const {
    if (sample_rate != kSampleRate) {
      throw InvalidArgument("clip " + id + ": sample rate " + std::to_string(sample_rate));
    }
    if (samples.size() != kClipLength) {
      throw InvalidArgument("clip " + id + ": length " + std::to_string(samples.size()) +
                            " != " + std::to_string(kClipLength));
    }
    for (double s : samples) {
      if (!(s >= -1.0 && s < 1.0)) {
        throw InvalidArgument("clip " + id + ": sample out of [-1, 1)");
      }
    }
  }
};

using Dataset = std::vector<AudioClip>;

inline std::int16_t to_int16(double amplitude) {
  double q = std::round(amplitude * 32768.0);
  q = std::clamp(q, -32768.0, 32767.0);
  return static_cast<std::int16_t>(q);
}

inline double from_int16(std::int16_t v) { return static_cast<double>(v) / 32768.0; }

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline std::uint16_t read_u16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

inline void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

inline void put_u16(std::string& out, std::uint16_t v) {
  out.push_back(static_cast<char>(v & 0xff));
  out.push_back(static_cast<char>((v >> 8) & 0xff));
}

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed: " + path.string());
}

}  // namespace detail

// Decodes a RIFF/PCM 16-bit mono 16 kHz byte stream. The result is padded
// with trailing zeros or truncated to kClipLength.
inline AudioClip decode_wav(std::string_view bytes, std::string id = {}) {
  const auto* data = reinterpret_cast<const unsigned char*>(bytes.data());
  const std::size_t size = bytes.size();
  auto fail = [&](const std::string& why) -> FormatError {
    return FormatError("wav " + id + ": " + why);
  };
  if (size < 12 || std::memcmp(data, "RIFF", 4) != 0 || std::memcmp(data + 8, "WAVE", 4) != 0) {
    throw fail("not a RIFF/WAVE file");
  }
  bool have_fmt = false;
  std::span<const unsigned char> pcm;
  std::size_t pos = 12;
  while (pos + 8 <= size) {
    const std::uint32_t chunk_size = detail::read_u32(data + pos + 4);
    const unsigned char* body = data + pos + 8;
    if (pos + 8 + chunk_size > size) {
      // Tolerate a data chunk whose header overstates its length.
      if (std::memcmp(data + pos, "data", 4) == 0) {
        pcm = {body, size - pos - 8};
        break;
      }
      throw fail("truncated chunk");
    }
    if (std::memcmp(data + pos, "fmt ", 4) == 0) {
      if (chunk_size < 16) throw fail("short fmt chunk");
      const std::uint16_t format = detail::read_u16(body);
      const std::uint16_t channels = detail::read_u16(body + 2);
      const std::uint32_t rate = detail::read_u32(body + 4);
      const std::uint16_t bits = detail::read_u16(body + 14);
      if (format != 1) throw fail("unsupported encoding (format tag " + std::to_string(format) + ")");
      if (bits != 16) throw fail("unsupported bit depth " + std::to_string(bits));
      if (channels != 1) throw fail("expected mono, got " + std::to_string(channels) + " channels");
      if (rate != static_cast<std::uint32_t>(kSampleRate)) {
        throw fail("expected 16000 Hz, got " + std::to_string(rate));
      }
      have_fmt = true;
    } else if (std::memcmp(data + pos, "data", 4) == 0) {
      pcm = {body, chunk_size};
    }
    pos += 8 + chunk_size + (chunk_size & 1u);
  }
  if (!have_fmt) throw fail("missing fmt chunk");
  if (pcm.data() == nullptr) throw fail("missing data chunk");

  const std::size_t n = pcm.size() / 2;
  AudioClip clip;
  clip.id = std::move(id);
  clip.samples.assign(kClipLength, 0.0);
  const std::size_t kept = std::min(n, kClipLength);
  for (std::size_t i = 0; i < kept; ++i) {
    clip.samples[i] = from_int16(static_cast<std::int16_t>(detail::read_u16(pcm.data() + 2 * i)));
  }
  clip.padded_samples = kClipLength - kept;
  clip.truncated_samples = n - kept;
  return clip;
}

inline AudioClip load_wav(const std::filesystem::path& path) {
  return decode_wav(detail::read_file(path), path.stem().string());
}

inline std::string encode_wav(std::span<const double> samples) {
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(samples.size() * 2);
  std::string out;
  out.reserve(44 + data_bytes);
  out += "RIFF";
  detail::put_u32(out, 36 + data_bytes);
  out += "WAVEfmt ";
  detail::put_u32(out, 16);
  detail::put_u16(out, 1);
  detail::put_u16(out, 1);
  detail::put_u32(out, kSampleRate);
  detail::put_u32(out, kSampleRate * 2);
  detail::put_u16(out, 2);
  detail::put_u16(out, 16);
  out += "data";
  detail::put_u32(out, data_bytes);
  for (double s : samples) detail::put_u16(out, static_cast<std::uint16_t>(to_int16(s)));
  return out;
}

inline void save_wav(const AudioClip& clip, const std::filesystem::path& path) {
  clip.validate();
  detail::write_file(path, encode_wav(clip.samples));
}

// Reads the public dataset layout: one subdirectory per class. Directories
// named after a command map to it, "silence"/"_silence_" to silence,
// "_background_noise_" is skipped and anything else counts as unknown.
// Files listed in validation_list.txt form the validation split; files in
// testing_list.txt are left out.
inline Dataset load_dataset_dir(const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  if (!fs::is_directory(root)) throw IoError("dataset directory not found: " + root.string());
  auto read_list = [&](const char* name) {
    std::set<std::string> entries;
    std::ifstream in(root / name);
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      if (!line.empty()) entries.insert(line);
    }
    return entries;
  };
  const auto validation = read_list("validation_list.txt");
  const auto testing = read_list("testing_list.txt");

  std::vector<fs::path> dirs;
  for (const auto& entry : fs::directory_iterator(root)) {
    if (entry.is_directory()) dirs.push_back(entry.path());
  }
  std::sort(dirs.begin(), dirs.end());

  Dataset out;
  for (const auto& dir : dirs) {
    const std::string name = dir.filename().string();
    if (name == "_background_noise_") continue;
    CommandLabel label = CommandLabel::unknown;
    if (name == "silence" || name == "_silence_") {
      label = CommandLabel::silence;
    } else if (auto parsed = parse_label(name)) {
      label = *parsed;
    }
    std::vector<fs::path> files;
    for (const auto& entry : fs::directory_iterator(dir)) {
      if (entry.is_regular_file() && entry.path().extension() == ".wav") files.push_back(entry.path());
    }
    std::sort(files.begin(), files.end());
    for (const auto& file : files) {
      const std::string rel = name + "/" + file.filename().string();
      if (testing.contains(rel)) continue;
      AudioClip clip = load_wav(file);
      clip.id = name + "/" + file.stem().string();
      clip.label = label;
      clip.split = validation.contains(rel) ? Split::validation : Split::train;
      out.push_back(std::move(clip));
    }
  }
  return out;
}

inline void save_dataset_dir(const Dataset& dataset, const std::filesystem::path& root) {
  namespace fs = std::filesystem;
  fs::create_directories(root);
  std::string validation;
  for (const auto& clip : dataset) {
    const auto slash = clip.id.find('/');
    const std::string stem = slash == std::string::npos ? clip.id : clip.id.substr(slash + 1);
    const std::string rel = std::string(to_string(clip.label)) + "/" + stem + ".wav";
    save_wav(clip, root / rel);
    if (clip.split == Split::validation) validation += rel + "\n";
  }
  detail::write_file(root / "validation_list.txt", validation);
}

// ---------------------------------------------------------------------------
// Synthetic commands

// A formant-like stack of partials whose frequencies glide linearly over the
// vocal window by a factor (1 + glide * (t - 1/2)).
struct ToneTemplate {
  std::vector<double> frequencies_hz;
  std::vector<double> weights;
  double glide = 0.0;
  double tremolo_hz = 0.0;
};

struct SynthConfig {
  std::array<std::size_t, kNumClasses> counts{};
  double validation_fraction = 0.5;
  // Peak amplitude of the noise floor. Silence clips draw their noise level
  // from [silence_level_min, 1] x noise_floor, spoken clips from
  // [background_level_min, background_level_max] x noise_floor.
  double noise_floor = 0.02;
  double silence_level_min = 0.25;
  double background_level_min = 0.02;
  double background_level_max = 0.2;
  // Whole-clip mean |x| on the int16 dB scale, drawn uniformly.
  double intensity_db_min = 38.0;
  double intensity_db_max = 76.0;
  double vocal_seconds_min = 0.45;
  double vocal_seconds_max = 0.75;
  double frequency_jitter = 0.02;
  // Templates per class; unknown holds several, one drawn per clip. The
  // silence entry is ignored.
  std::array<std::vector<ToneTemplate>, kNumClasses> templates;

  static SynthConfig defaults(std::size_t clips_per_class = 100) {
    SynthConfig c;
    c.counts.fill(clips_per_class);
    auto t = [](double f1, double f2, double f3, double glide, double trem) {
      return ToneTemplate{{f1, f2, f3}, {1.0, 0.6, 0.35}, glide, trem};
    };
    // Vowel-like stacks sharing the third formant, so that classes differ
    // by their lower formants, glide and tremolo.
    using L = CommandLabel;
    c.templates[index_of(L::unknown)] = {t(420, 1500, 2500, 0.10, 3.0), t(560, 1250, 2500, -0.10, 5.0),
                                         t(470, 1100, 2500, 0.0, 0.0), t(610, 1650, 2500, -0.05, 4.0)};
    c.templates[index_of(L::yes)] = {t(400, 1700, 2500, 0.10, 0.0)};
    c.templates[index_of(L::no)] = {t(500, 1000, 2500, -0.10, 0.0)};
    c.templates[index_of(L::up)] = {t(600, 1200, 2500, 0.0, 4.0)};
    c.templates[index_of(L::down)] = {t(550, 1050, 2500, -0.15, 0.0)};
    c.templates[index_of(L::left)] = {t(480, 1550, 2500, 0.05, 4.0)};
    c.templates[index_of(L::right)] = {t(620, 1400, 2500, 0.15, 0.0)};
    c.templates[index_of(L::on)] = {t(580, 950, 2500, 0.05, 3.0)};
    c.templates[index_of(L::off)] = {t(600, 1100, 2500, -0.05, 0.0)};
    c.templates[index_of(L::stop)] = {t(450, 1350, 2500, -0.10, 5.0)};
    c.templates[index_of(L::go)] = {t(500, 850, 2500, -0.15, 0.0)};
    return c;
  }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Truncation toward zero keeps |quantized| <= |x|.
inline double quantize_toward_zero(double x) { return std::trunc(x * 32768.0) / 32768.0; }

}  // namespace detail

inline AudioClip synth_clip(const SynthConfig& config, CommandLabel label, std::size_t index,
                            std::uint64_t seed) {
  std::mt19937_64 rng(detail::splitmix64(seed ^ (static_cast<std::uint64_t>(index_of(label)) << 40) ^
                                         static_cast<std::uint64_t>(index)));
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  auto log_uniform = [&](double lo, double hi) {
    return std::exp(std::log(lo) + (std::log(hi) - std::log(lo)) * unit(rng));
  };

  AudioClip clip;
  clip.id = std::string(to_string(label)) + "_" + std::to_string(index);
  clip.label = label;
  clip.samples.assign(kClipLength, 0.0);

  const bool silent = label == CommandLabel::silence;
  const double noise_level =
      silent ? config.noise_floor * log_uniform(config.silence_level_min, 1.0)
             : config.noise_floor * log_uniform(config.background_level_min, config.background_level_max);
  std::vector<double> noise(kClipLength);
  for (double& n : noise) n = noise_level * (2.0 * unit(rng) - 1.0);

  if (silent) {
    for (std::size_t i = 0; i < kClipLength; ++i) clip.samples[i] = detail::quantize_toward_zero(noise[i]);
    return clip;
  }

  const auto& choices = config.templates[index_of(label)];
  if (choices.empty()) throw InvalidArgument("no template for class " + std::string(to_string(label)));
  const ToneTemplate& tpl = choices[static_cast<std::size_t>(unit(rng) * choices.size()) % choices.size()];

  const double seconds =
      config.vocal_seconds_min + (config.vocal_seconds_max - config.vocal_seconds_min) * unit(rng);
  const auto length = static_cast<std::size_t>(seconds * kSampleRate);
  const std::size_t margin = kSampleRate / 20;
  const std::size_t start = margin + static_cast<std::size_t>(unit(rng) * (kClipLength - length - 2 * margin));

  std::normal_distribution<double> jitter(0.0, config.frequency_jitter);
  std::vector<double> voice(kClipLength, 0.0);
  const double taper = 0.2;
  const double trem_phase = 2.0 * M_PI * unit(rng);
  for (std::size_t p = 0; p < tpl.frequencies_hz.size(); ++p) {
    const double f0 = tpl.frequencies_hz[p] * (1.0 + jitter(rng));
    const double weight = tpl.weights[p] * (0.8 + 0.4 * unit(rng));
    double phase = 2.0 * M_PI * unit(rng);
    for (std::size_t i = 0; i < length; ++i) {
      const double t = static_cast<double>(i) / static_cast<double>(length);
      const double f = f0 * (1.0 + tpl.glide * (t - 0.5));
      phase += 2.0 * M_PI * f / kSampleRate;
      double env = 1.0;
      if (t < taper) env = std::sin(0.5 * M_PI * t / taper);
      if (t > 1.0 - taper) env = std::sin(0.5 * M_PI * (1.0 - t) / taper);
      env *= env;
      if (tpl.tremolo_hz > 0.0) {
        env *= 0.7 + 0.3 * std::sin(2.0 * M_PI * tpl.tremolo_hz * i / kSampleRate + trem_phase);
      }
      voice[start + i] += weight * env * std::sin(phase);
    }
  }

  double voice_mean = 0.0;
  double noise_mean = 0.0;
  for (std::size_t i = 0; i < kClipLength; ++i) {
    voice_mean += std::abs(voice[i]);
    noise_mean += std::abs(noise[i]);
  }
  voice_mean /= kClipLength;
  noise_mean /= kClipLength;
  const double db = config.intensity_db_min + (config.intensity_db_max - config.intensity_db_min) * unit(rng);
  const double target_mean = std::pow(10.0, db / 20.0) / 32768.0;
  const double gain = std::max(0.0, target_mean - noise_mean) / voice_mean;

  const double top = 1.0 - kQuantum;
  for (std::size_t i = 0; i < kClipLength; ++i) {
    const double s = std::clamp(noise[i] + gain * voice[i], -1.0, top);
    clip.samples[i] = detail::quantize_toward_zero(s);
  }
  return clip;
}

// Deterministic for a fixed seed. Within each class the first
// (1 - validation_fraction) share of clips is the train split.
inline Dataset synth_dataset(const SynthConfig& config, std::uint64_t seed) {
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (config.counts[c] == 0) {
      throw InvalidArgument("synth_dataset: zero clips requested for class " +
                            std::string(kLabelNames[c]));
    }
  }
  if (!(config.validation_fraction >= 0.0 && config.validation_fraction < 1.0)) {
    throw InvalidArgument("synth_dataset: validation_fraction must be in [0, 1)");
  }
  Dataset out;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    const std::size_t n = config.counts[c];
    const auto n_valid = static_cast<std::size_t>(std::llround(config.validation_fraction * n));
    for (std::size_t i = 0; i < n; ++i) {
      AudioClip clip = synth_clip(config, label_at(c), i, seed);
      clip.split = i >= n - n_valid ? Split::validation : Split::train;
      out.push_back(std::move(clip));
    }
  }
  return out;
}

inline std::vector<const AudioClip*> select(const Dataset& data, std::optional<CommandLabel> label,
                                            std::optional<Split> split) {
  std::vector<const AudioClip*> out;
  for (const auto& clip : data) {
    if (label && clip.label != *label) continue;
    if (split && clip.split != *split) continue;
    out.push_back(&clip);
  }
  return out;
}

}  // namespace advaudio
