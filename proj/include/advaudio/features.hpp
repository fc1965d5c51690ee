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

// Differentiable MFCC front end:
//   framing -> window -> |rfft| -> mel filterbank -> log(. + floor) -> DCT-II
// together with the exact vector-Jacobian product back to the waveform.

#pragma once

#include <fftw3.h>

#include <complex>
#include <memory>
#include <mutex>

#include <Eigen/Dense>

#include "advaudio/common.hpp"

namespace advaudio {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct FeatureConfig {
  std::size_t frame_length = 480;
  std::size_t hop = 160;
  std::string window = "hann";
  std::size_t mel_filters = 40;
  double mel_low_hz = 20.0;
  double mel_high_hz = 7600.0;
  std::size_t num_mfcc = 40;
  double log_floor = 1e-6;
  int sample_rate = kSampleRate;

  std::size_t num_bins() const { return frame_length / 2 + 1; }

  std::size_t num_frames(std::size_t signal_length) const {
    return (signal_length - frame_length) / hop + 1;
  }

  void validate(std::size_t signal_length = kClipLength) const {
    if (frame_length < 2 || frame_length > signal_length) {
      throw InvalidArgument("feature config: frame_length must be in [2, d]");
    }
    if (hop < 1) throw InvalidArgument("feature config: hop must be >= 1");
    if (!(mel_low_hz > 0.0 && mel_low_hz < mel_high_hz && mel_high_hz <= sample_rate / 2.0)) {
      throw InvalidArgument("feature config: mel range must lie in (0, sample_rate/2]");
    }
    if (mel_filters < 1 || num_mfcc < 1 || num_mfcc > mel_filters) {
      throw InvalidArgument("feature config: need 1 <= num_mfcc <= mel_filters");
    }
    if (!(log_floor > 0.0)) throw InvalidArgument("feature config: log_floor must be > 0");
    if (window != "hann" && window != "hamming" && window != "rectangular") {
      throw InvalidArgument("feature config: unknown window '" + window + "'");
    }
  }

  friend bool operator==(const FeatureConfig&, const FeatureConfig&) = default;
};

// time-frames x num_mfcc
struct FeatureMap {
  RowMatrix values;
  FeatureConfig config;
};

inline double hz_to_mel(double hz) { return 2595.0 * std::log10(1.0 + hz / 700.0); }
inline double mel_to_hz(double mel) { return 700.0 * (std::pow(10.0, mel / 2595.0) - 1.0); }

inline std::vector<double> make_window(const std::string& name, std::size_t n) {
  std::vector<double> w(n, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double c = std::cos(2.0 * M_PI * static_cast<double>(i) / static_cast<double>(n));
    if (name == "hann") w[i] = 0.5 - 0.5 * c;
    if (name == "hamming") w[i] = 0.54 - 0.46 * c;
  }
  return w;
}

// Triangular HTK-mel filters evaluated at the exact bin frequencies.
// Rows are filters, columns are rfft bins.
inline RowMatrix mel_filterbank(const FeatureConfig& config) {
  const std::size_t bins = config.num_bins();
  const std::size_t m = config.mel_filters;
  const double lo = hz_to_mel(config.mel_low_hz);
  const double hi = hz_to_mel(config.mel_high_hz);
  std::vector<double> edges(m + 2);
  for (std::size_t i = 0; i < m + 2; ++i) {
    edges[i] = mel_to_hz(lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(m + 1));
  }
  RowMatrix fb = RowMatrix::Zero(static_cast<Eigen::Index>(m), static_cast<Eigen::Index>(bins));
  for (std::size_t f = 0; f < m; ++f) {
    for (std::size_t k = 0; k < bins; ++k) {
      const double hz = static_cast<double>(k) * config.sample_rate / static_cast<double>(config.frame_length);
      double w = 0.0;
      if (hz > edges[f] && hz <= edges[f + 1]) w = (hz - edges[f]) / (edges[f + 1] - edges[f]);
      else if (hz > edges[f + 1] && hz < edges[f + 2]) w = (edges[f + 2] - hz) / (edges[f + 2] - edges[f + 1]);
      fb(static_cast<Eigen::Index>(f), static_cast<Eigen::Index>(k)) = w;
    }
    if (fb.row(static_cast<Eigen::Index>(f)).sum() == 0.0) {
      throw InvalidArgument("feature config: mel filter " + std::to_string(f) +
                            " covers no frequency bin; use fewer filters or longer frames");
    }
  }
  return fb;
}

// Orthonormal DCT-II, num_mfcc x mel_filters.
inline RowMatrix dct_matrix(std::size_t num_out, std::size_t num_in) {
  RowMatrix d(static_cast<Eigen::Index>(num_out), static_cast<Eigen::Index>(num_in));
  for (std::size_t j = 0; j < num_out; ++j) {
    const double s = j == 0 ? std::sqrt(1.0 / num_in) : std::sqrt(2.0 / num_in);
    for (std::size_t m = 0; m < num_in; ++m) {
      d(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(m)) =
          s * std::cos(M_PI * static_cast<double>(j) * (static_cast<double>(m) + 0.5) / static_cast<double>(num_in));
    }
  }
  return d;
}

namespace detail {

// FFTW planning is not thread-safe; execution with the new-array interface
// is, so plans are built under a lock and shared.
class RealFft {
 public:
  explicit RealFft(std::size_t n) : n_(n) {
    std::lock_guard lock(mutex());
    std::vector<double> in(n);
    std::vector<std::complex<double>> out(n / 2 + 1);
    forward_ = fftw_plan_dft_r2c_1d(static_cast<int>(n), in.data(),
                                    reinterpret_cast<fftw_complex*>(out.data()),
                                    FFTW_ESTIMATE | FFTW_UNALIGNED);
    backward_ = fftw_plan_dft_c2r_1d(static_cast<int>(n), reinterpret_cast<fftw_complex*>(out.data()),
                                     in.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
    if (!forward_ || !backward_) throw Error("fftw planning failed");
  }
  ~RealFft() {
    std::lock_guard lock(mutex());
    fftw_destroy_plan(forward_);
    fftw_destroy_plan(backward_);
  }
  RealFft(const RealFft&) = delete;
  RealFft& operator=(const RealFft&) = delete;

  // out[k] = sum_n in[n] exp(-2 pi i k n / N), k = 0..N/2
  void forward(double* in, std::complex<double>* out) const {
    fftw_execute_dft_r2c(forward_, in, reinterpret_cast<fftw_complex*>(out));
  }
  // Unnormalized Hermitian inverse; destroys `in`.
  void backward(std::complex<double>* in, double* out) const {
    fftw_execute_dft_c2r(backward_, reinterpret_cast<fftw_complex*>(in), out);
  }
  std::size_t size() const { return n_; }

 private:
  static std::mutex& mutex() {
    static std::mutex m;
    return m;
  }
  std::size_t n_;
  fftw_plan forward_ = nullptr;
  fftw_plan backward_ = nullptr;
};

}  // namespace detail

// Intermediate values of one forward pass, kept for the VJP.
struct MfccTrace {
  std::size_t signal_length = 0;
  std::vector<std::complex<double>> spectrum;  // frames x bins
  RowMatrix magnitude;                         // frames x bins
  RowMatrix mel;                               // frames x mel_filters
};

class MfccExtractor {
 public:
  explicit MfccExtractor(FeatureConfig config = {})
      : config_(validated(std::move(config))),
        window_(make_window(config_.window, config_.frame_length)),
        filterbank_(mel_filterbank(config_)),
        dct_(dct_matrix(config_.num_mfcc, config_.mel_filters)),
        fft_(std::make_shared<detail::RealFft>(config_.frame_length)) {}

  const FeatureConfig& config() const { return config_; }
  const RowMatrix& filterbank() const { return filterbank_; }

  FeatureMap operator()(std::span<const double> samples, MfccTrace* trace = nullptr) const {
    if (samples.size() < config_.frame_length) {
      throw InvalidArgument("mfcc: signal shorter than one frame");
    }
    const std::size_t n = config_.frame_length;
    const std::size_t bins = config_.num_bins();
    const std::size_t frames = config_.num_frames(samples.size());
    const auto fr = static_cast<Eigen::Index>(frames);

    std::vector<std::complex<double>> spectrum(frames * bins);
    RowMatrix magnitude(fr, static_cast<Eigen::Index>(bins));
    std::vector<double> buffer(n);
    for (std::size_t t = 0; t < frames; ++t) {
      const double* src = samples.data() + t * config_.hop;
      for (std::size_t i = 0; i < n; ++i) buffer[i] = src[i] * window_[i];
      std::complex<double>* out = spectrum.data() + t * bins;
      fft_->forward(buffer.data(), out);
      for (std::size_t k = 0; k < bins; ++k) {
        magnitude(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k)) = std::abs(out[k]);
      }
    }
    RowMatrix mel = magnitude * filterbank_.transpose();
    RowMatrix logmel = (mel.array() + config_.log_floor).log().matrix();

    FeatureMap map{logmel * dct_.transpose(), config_};
    if (trace) {
      trace->signal_length = samples.size();
      trace->spectrum = std::move(spectrum);
      trace->magnitude = std::move(magnitude);
      trace->mel = std::move(mel);
    }
    return map;
  }

  // Gradient of <upstream, mfcc(x)> with respect to x.
  std::vector<double> vjp(const MfccTrace& trace, const RowMatrix& upstream) const {
    const std::size_t frames = config_.num_frames(trace.signal_length);
    if (static_cast<std::size_t>(upstream.rows()) != frames ||
        static_cast<std::size_t>(upstream.cols()) != config_.num_mfcc) {
      throw InvalidArgument("mfcc_vjp: upstream shape " + std::to_string(upstream.rows()) + "x" +
                            std::to_string(upstream.cols()) + " does not match feature map " +
                            std::to_string(frames) + "x" + std::to_string(config_.num_mfcc));
    }
    const std::size_t n = config_.frame_length;
    const std::size_t bins = config_.num_bins();

    RowMatrix g_log = upstream * dct_;
    RowMatrix g_mel = (g_log.array() / (trace.mel.array() + config_.log_floor)).matrix();
    RowMatrix g_mag = g_mel * filterbank_;

    std::vector<double> grad(trace.signal_length, 0.0);
    std::vector<std::complex<double>> half(bins);
    std::vector<double> frame_grad(n);
    const bool even = n % 2 == 0;
    for (std::size_t t = 0; t < frames; ++t) {
      const std::complex<double>* x = trace.spectrum.data() + t * bins;
      for (std::size_t k = 0; k < bins; ++k) {
        const double mag = trace.magnitude(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k));
        const double gm = g_mag(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(k));
        // d|X|/dX taken as 0 at X = 0.
        std::complex<double> g = mag > 0.0 ? gm * x[k] / mag : std::complex<double>(0.0);
        // The c2r transform doubles interior bins; DC and Nyquist appear once
        // and only their real parts contribute.
        const bool edge = k == 0 || (even && k == bins - 1);
        half[k] = edge ? std::complex<double>(g.real(), 0.0) : 0.5 * g;
      }
      fft_->backward(half.data(), frame_grad.data());
      double* dst = grad.data() + t * config_.hop;
      for (std::size_t i = 0; i < n; ++i) dst[i] += window_[i] * frame_grad[i];
    }
    return grad;
  }

 private:
  static FeatureConfig validated(FeatureConfig c) {
    c.validate(c.frame_length);
    return c;
  }

  FeatureConfig config_;
  std::vector<double> window_;
  RowMatrix filterbank_;
  RowMatrix dct_;
  std::shared_ptr<detail::RealFft> fft_;
};

inline FeatureMap mfcc(std::span<const double> samples, const FeatureConfig& config) {
  return MfccExtractor(config)(samples);
}

inline std::vector<double> mfcc_vjp(std::span<const double> samples, const FeatureConfig& config,
                                    const RowMatrix& upstream) {
  MfccExtractor extractor(config);
  MfccTrace trace;
  extractor(samples, &trace);
  return extractor.vjp(trace, upstream);
}

}  // namespace advaudio
