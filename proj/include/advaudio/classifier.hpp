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

// Keyword classifier on MFCC input:
//   standardize -> conv -> ReLU -> max-pool (time) -> conv -> ReLU -> fc -> softmax
// Backpropagation is written out by hand so that logit gradients can be
// carried through the feature chain to the raw waveform.

#pragma once

#include <bit>
#include <functional>
#include <numeric>
#include <random>

#include "advaudio/config.hpp"
#include "advaudio/features.hpp"
#include "advaudio/signal_io.hpp"

namespace advaudio {

struct Topology {
  std::size_t conv1_channels = 8;
  std::size_t conv1_time = 20;
  std::size_t conv1_freq = 8;
  std::size_t pool_time = 2;
  std::size_t conv2_channels = 16;
  std::size_t conv2_time = 10;
  std::size_t conv2_freq = 4;

  friend bool operator==(const Topology&, const Topology&) = default;
};

// Spatial sizes of every layer for a given input map.
struct LayerShapes {
  std::size_t in_t, in_f;
  std::size_t c1_t, c1_f;
  std::size_t pool_t;
  std::size_t c2_t, c2_f;
  std::size_t flat;

  static LayerShapes make(const Topology& top, std::size_t in_t, std::size_t in_f) {
    LayerShapes s{};
    s.in_t = in_t;
    s.in_f = in_f;
    if (in_t < top.conv1_time || in_f < top.conv1_freq) throw InvalidArgument("topology: conv1 larger than input");
    s.c1_t = in_t - top.conv1_time + 1;
    s.c1_f = in_f - top.conv1_freq + 1;
    s.pool_t = s.c1_t / top.pool_time;
    if (s.pool_t < top.conv2_time || s.c1_f < top.conv2_freq) throw InvalidArgument("topology: conv2 larger than input");
    s.c2_t = s.pool_t - top.conv2_time + 1;
    s.c2_f = s.c1_f - top.conv2_freq + 1;
    s.flat = s.c2_t * s.c2_f * top.conv2_channels;
    return s;
  }
};

struct Parameters {
  RowMatrix w1;  // (kt*kf) x C1
  Eigen::VectorXd b1;
  RowMatrix w2;  // (kt*kf*C1) x C2
  Eigen::VectorXd b2;
  RowMatrix wfc;  // classes x flat
  Eigen::VectorXd bfc;

  // Visits (tensor data, size) pairs in a fixed order.
  template <class Self, class Fn>
  static void each(Self& self, Fn&& fn) {
    fn(self.w1.data(), self.w1.size());
    fn(self.b1.data(), self.b1.size());
    fn(self.w2.data(), self.w2.size());
    fn(self.b2.data(), self.b2.size());
    fn(self.wfc.data(), self.wfc.size());
    fn(self.bfc.data(), self.bfc.size());
  }

  Parameters zeros_like() const {
    Parameters z;
    z.w1 = RowMatrix::Zero(w1.rows(), w1.cols());
    z.b1 = Eigen::VectorXd::Zero(b1.size());
    z.w2 = RowMatrix::Zero(w2.rows(), w2.cols());
    z.b2 = Eigen::VectorXd::Zero(b2.size());
    z.wfc = RowMatrix::Zero(wfc.rows(), wfc.cols());
    z.bfc = Eigen::VectorXd::Zero(bfc.size());
    return z;
  }

  bool all_finite() const {
    bool ok = true;
    each(*this, [&](const double* p, Eigen::Index n) {
      for (Eigen::Index i = 0; i < n; ++i) ok = ok && std::isfinite(p[i]);
    });
    return ok;
  }

  friend bool operator==(const Parameters& a, const Parameters& b) {
    return a.w1 == b.w1 && a.b1 == b.b1 && a.w2 == b.w2 && a.b2 == b.b2 && a.wfc == b.wfc && a.bfc == b.bfc;
  }
};

struct TrainingInfo {
  std::uint64_t seed = 0;
  std::uint64_t epochs = 0;
  double train_accuracy = 0.0;
  double validation_accuracy = 0.0;
};

// Logits plus d logit_k / d waveform for each requested class, in request order.
struct LogitGradients {
  std::vector<double> logits;
  std::vector<std::vector<double>> gradients;
};

namespace detail {

// Valid 2-D correlation patches. Input rows are positions (t * width + f),
// columns channels; patch column index is (i * kf + j) * channels + c.
inline RowMatrix im2col(const RowMatrix& in, std::size_t height, std::size_t width, std::size_t kt, std::size_t kf) {
  const std::size_t ch = static_cast<std::size_t>(in.cols());
  const std::size_t oh = height - kt + 1;
  const std::size_t ow = width - kf + 1;
  RowMatrix out(static_cast<Eigen::Index>(oh * ow), static_cast<Eigen::Index>(kt * kf * ch));
  for (std::size_t t = 0; t < oh; ++t) {
    for (std::size_t f = 0; f < ow; ++f) {
      double* dst = out.data() + (t * ow + f) * kt * kf * ch;
      for (std::size_t i = 0; i < kt; ++i) {
        const double* src = in.data() + ((t + i) * width + f) * ch;
        std::copy(src, src + kf * ch, dst + i * kf * ch);
      }
    }
  }
  return out;
}

inline RowMatrix col2im(const RowMatrix& cols, std::size_t height, std::size_t width, std::size_t kt,
                        std::size_t kf, std::size_t ch) {
  const std::size_t oh = height - kt + 1;
  const std::size_t ow = width - kf + 1;
  RowMatrix out = RowMatrix::Zero(static_cast<Eigen::Index>(height * width), static_cast<Eigen::Index>(ch));
  for (std::size_t t = 0; t < oh; ++t) {
    for (std::size_t f = 0; f < ow; ++f) {
      const double* src = cols.data() + (t * ow + f) * kt * kf * ch;
      for (std::size_t i = 0; i < kt; ++i) {
        double* dst = out.data() + ((t + i) * width + f) * ch;
        const double* s = src + i * kf * ch;
        for (std::size_t q = 0; q < kf * ch; ++q) dst[q] += s[q];
      }
    }
  }
  return out;
}

}  // namespace detail

class Classifier {
 public:
  // Activations of one forward pass.
  struct Trace {
    RowMatrix input;   // standardized features, positions x 1
    RowMatrix p1;      // conv1 patches
    RowMatrix z1;      // conv1 pre-activation
    RowMatrix pooled;  // max-pooled relu(z1)
    std::vector<std::uint32_t> pool_arg;
    RowMatrix p2;
    RowMatrix z2;
    Eigen::VectorXd flat;
    std::vector<double> logits;
  };

  Classifier() = default;

  Classifier(FeatureConfig features, Topology topology, std::uint64_t init_seed)
      : extractor_(std::move(features)), topology_(topology) {
    const FeatureConfig& fc = extractor_.config();
    shapes_ = LayerShapes::make(topology_, fc.num_frames(kClipLength), fc.num_mfcc);
    input_mean_ = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(fc.num_mfcc));
    input_scale_ = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(fc.num_mfcc));

    std::mt19937_64 rng(init_seed);
    auto fill = [&](RowMatrix& m, std::size_t rows, std::size_t cols, double stddev) {
      std::normal_distribution<double> dist(0.0, stddev);
      m.resize(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
      for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
    };
    const std::size_t fan1 = topology_.conv1_time * topology_.conv1_freq;
    const std::size_t fan2 = topology_.conv2_time * topology_.conv2_freq * topology_.conv1_channels;
    fill(params_.w1, fan1, topology_.conv1_channels, std::sqrt(2.0 / fan1));
    fill(params_.w2, fan2, topology_.conv2_channels, std::sqrt(2.0 / fan2));
    fill(params_.wfc, kNumClasses, shapes_.flat, std::sqrt(1.0 / shapes_.flat));
    params_.b1 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(topology_.conv1_channels));
    params_.b2 = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(topology_.conv2_channels));
    params_.bfc = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(kNumClasses));
  }

  std::size_t num_classes() const { return kNumClasses; }
  const FeatureConfig& feature_config() const { return extractor_.config(); }
  const MfccExtractor& extractor() const { return extractor_; }
  const Topology& topology() const { return topology_; }
  const LayerShapes& shapes() const { return shapes_; }
  const Parameters& parameters() const { return params_; }
  Parameters& parameters() { return params_; }
  const Eigen::VectorXd& input_mean() const { return input_mean_; }
  const Eigen::VectorXd& input_scale() const { return input_scale_; }
  const TrainingInfo& info() const { return info_; }
  TrainingInfo& info() { return info_; }

  void set_standardization(Eigen::VectorXd mean, Eigen::VectorXd scale) {
    if (mean.size() != input_mean_.size() || scale.size() != input_scale_.size()) {
      throw InvalidArgument("standardization size mismatch");
    }
    input_mean_ = std::move(mean);
    input_scale_ = std::move(scale);
  }

  FeatureMap features(std::span<const double> samples) const { return extractor_(check_length(samples)); }

  std::vector<double> logits_from_features(const RowMatrix& features, Trace* trace = nullptr) const {
    Trace local;
    Trace& tr = trace ? *trace : local;
    forward(features, tr);
    return tr.logits;
  }

  std::vector<double> logits(std::span<const double> samples) const {
    return logits_from_features(features(samples).values);
  }

  std::vector<double> predict_proba(std::span<const double> samples) const { return softmax(logits(samples)); }

  std::size_t predict_index(std::span<const double> samples) const { return argmax(logits(samples)); }

  CommandLabel predict(std::span<const double> samples) const { return label_at(predict_index(samples)); }

  LogitGradients logits_and_input_grads(std::span<const double> samples, std::span<const std::size_t> classes) const {
    for (std::size_t k : classes) {
      if (k >= kNumClasses) throw InvalidArgument("logits_and_input_grads: class index out of range");
    }
    MfccTrace ftrace;
    FeatureMap map = extractor_(check_length(samples), &ftrace);
    Trace tr;
    forward(map.values, tr);
    LogitGradients out;
    out.logits = tr.logits;
    out.gradients.reserve(classes.size());
    for (const RowMatrix& g_features : feature_gradients(tr, classes)) {
      out.gradients.push_back(extractor_.vjp(ftrace, g_features));
    }
    return out;
  }

  // d logit_k / d (unstandardized) features for each requested class.
  std::vector<RowMatrix> feature_gradients(const Trace& tr, std::span<const std::size_t> classes) const {
    std::vector<RowMatrix> out;
    out.reserve(classes.size());
    for (std::size_t k : classes) {
      Eigen::VectorXd upstream = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(kNumClasses));
      upstream(static_cast<Eigen::Index>(k)) = 1.0;
      out.push_back(backward(tr, upstream, nullptr, true));
    }
    return out;
  }

  // Gradient of <upstream, logits> with respect to the parameters (added
  // into `grads` when non-null) and, optionally, with respect to the
  // (unstandardized) feature map.
  RowMatrix backward(const Trace& tr, const Eigen::VectorXd& upstream, Parameters* grads, bool want_input) const {
    const Topology& top = topology_;
    const LayerShapes& s = shapes_;
    if (grads) {
      grads->wfc.noalias() += upstream * tr.flat.transpose();
      grads->bfc += upstream;
    }
    Eigen::VectorXd dflat = params_.wfc.transpose() * upstream;
    RowMatrix dz2 = Eigen::Map<RowMatrix>(dflat.data(), static_cast<Eigen::Index>(s.c2_t * s.c2_f),
                                          static_cast<Eigen::Index>(top.conv2_channels));
    dz2 = (tr.z2.array() > 0.0).select(dz2, 0.0);
    if (grads) {
      grads->w2.noalias() += tr.p2.transpose() * dz2;
      grads->b2 += dz2.colwise().sum().transpose();
    }
    RowMatrix dp2 = dz2 * params_.w2.transpose();
    RowMatrix dpooled = detail::col2im(dp2, s.pool_t, s.c1_f, top.conv2_time, top.conv2_freq, top.conv1_channels);

    RowMatrix dz1 = RowMatrix::Zero(tr.z1.rows(), tr.z1.cols());
    for (Eigen::Index i = 0; i < dpooled.size(); ++i) {
      const std::uint32_t src = tr.pool_arg[static_cast<std::size_t>(i)];
      if (tr.z1.data()[src] > 0.0) dz1.data()[src] += dpooled.data()[i];
    }
    if (grads) {
      grads->w1.noalias() += tr.p1.transpose() * dz1;
      grads->b1 += dz1.colwise().sum().transpose();
    }
    if (!want_input) return {};
    RowMatrix dp1 = dz1 * params_.w1.transpose();
    RowMatrix din = detail::col2im(dp1, s.in_t, s.in_f, top.conv1_time, top.conv1_freq, 1);
    RowMatrix g(static_cast<Eigen::Index>(s.in_t), static_cast<Eigen::Index>(s.in_f));
    for (std::size_t t = 0; t < s.in_t; ++t) {
      for (std::size_t f = 0; f < s.in_f; ++f) {
        g(static_cast<Eigen::Index>(t), static_cast<Eigen::Index>(f)) =
            din(static_cast<Eigen::Index>(t * s.in_f + f), 0) * input_scale_(static_cast<Eigen::Index>(f));
      }
    }
    return g;
  }

  static std::vector<double> softmax(std::span<const double> logits) {
    const double m = *std::max_element(logits.begin(), logits.end());
    std::vector<double> p(logits.size());
    double z = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) z += (p[i] = std::exp(logits[i] - m));
    for (double& v : p) v /= z;
    return p;
  }

 private:
  static std::span<const double> check_length(std::span<const double> samples) {
    if (samples.size() != kClipLength) {
      throw InvalidArgument("classifier expects " + std::to_string(kClipLength) + " samples, got " +
                            std::to_string(samples.size()));
    }
    return samples;
  }

  void forward(const RowMatrix& features, Trace& tr) const {
    const Topology& top = topology_;
    const LayerShapes& s = shapes_;
    if (static_cast<std::size_t>(features.rows()) != s.in_t || static_cast<std::size_t>(features.cols()) != s.in_f) {
      throw InvalidArgument("classifier: feature map shape mismatch");
    }
    tr.input.resize(static_cast<Eigen::Index>(s.in_t * s.in_f), 1);
    for (std::size_t t = 0; t < s.in_t; ++t) {
      for (std::size_t f = 0; f < s.in_f; ++f) {
        const auto fi = static_cast<Eigen::Index>(f);
        tr.input(static_cast<Eigen::Index>(t * s.in_f + f), 0) =
            (features(static_cast<Eigen::Index>(t), fi) - input_mean_(fi)) * input_scale_(fi);
      }
    }
    tr.p1 = detail::im2col(tr.input, s.in_t, s.in_f, top.conv1_time, top.conv1_freq);
    tr.z1.noalias() = tr.p1 * params_.w1;
    tr.z1.rowwise() += params_.b1.transpose();

    // Max over pool_time consecutive frames of relu(z1); first max wins.
    const std::size_t ch1 = top.conv1_channels;
    tr.pooled.resize(static_cast<Eigen::Index>(s.pool_t * s.c1_f), static_cast<Eigen::Index>(ch1));
    tr.pool_arg.assign(s.pool_t * s.c1_f * ch1, 0);
    for (std::size_t t = 0; t < s.pool_t; ++t) {
      for (std::size_t f = 0; f < s.c1_f; ++f) {
        for (std::size_t c = 0; c < ch1; ++c) {
          std::uint32_t best = static_cast<std::uint32_t>(((t * top.pool_time) * s.c1_f + f) * ch1 + c);
          double best_v = std::max(0.0, tr.z1.data()[best]);
          for (std::size_t p = 1; p < top.pool_time; ++p) {
            const auto idx = static_cast<std::uint32_t>(((t * top.pool_time + p) * s.c1_f + f) * ch1 + c);
            const double v = std::max(0.0, tr.z1.data()[idx]);
            if (v > best_v) {
              best_v = v;
              best = idx;
            }
          }
          const std::size_t out = (t * s.c1_f + f) * ch1 + c;
          tr.pooled.data()[out] = best_v;
          tr.pool_arg[out] = best;
        }
      }
    }

    tr.p2 = detail::im2col(tr.pooled, s.pool_t, s.c1_f, top.conv2_time, top.conv2_freq);
    tr.z2.noalias() = tr.p2 * params_.w2;
    tr.z2.rowwise() += params_.b2.transpose();
    tr.flat = Eigen::Map<const Eigen::VectorXd>(tr.z2.data(), tr.z2.size()).cwiseMax(0.0);
    Eigen::VectorXd logits = params_.wfc * tr.flat + params_.bfc;
    tr.logits.assign(logits.data(), logits.data() + logits.size());
  }

  MfccExtractor extractor_;
  Topology topology_;
  LayerShapes shapes_{};
  Parameters params_;
  Eigen::VectorXd input_mean_;
  Eigen::VectorXd input_scale_;
  TrainingInfo info_;
};

// ---------------------------------------------------------------------------
// Training

struct TrainConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  // Rescale the mean mini-batch gradient to at most this L2 norm; 0 disables.
  double max_grad_norm = 1.0;
  Topology topology;
  FeatureConfig features;
};

struct EpochStats {
  std::size_t epoch = 0;
  double loss = 0.0;
  double train_accuracy = 0.0;
  double validation_accuracy = 0.0;
};

struct TrainReport {
  std::vector<EpochStats> epochs;
};

struct TrainingDiverged : Error {
  using Error::Error;
};

inline double accuracy(const Classifier& model, const std::vector<RowMatrix>& feats,
                       const std::vector<std::size_t>& labels) {
  if (feats.empty()) return 0.0;
  std::vector<unsigned char> correct(feats.size(), 0);
  parallel_for(feats.size(), [&](std::size_t i) {
    correct[i] = argmax(model.logits_from_features(feats[i])) == labels[i];
  });
  return static_cast<double>(std::accumulate(correct.begin(), correct.end(), std::size_t{0})) /
         static_cast<double>(feats.size());
}

// Mini-batch SGD with momentum on softmax cross-entropy. Per-sample
// gradients are summed in sample order, so results do not depend on the
// number of worker threads.
inline Classifier train(const Dataset& dataset, const TrainConfig& hyper, std::uint64_t seed,
                        TrainReport* report = nullptr,
                        const std::function<void(const EpochStats&)>& on_epoch = {}) {
  std::array<std::size_t, kNumClasses> per_class{};
  for (const auto& clip : dataset) {
    if (clip.split == Split::train) ++per_class[index_of(clip.label)];
  }
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (per_class[c] == 0) {
      throw InvalidArgument("train: no training clips for class " + std::string(kLabelNames[c]));
    }
  }
  if (hyper.batch_size == 0) throw InvalidArgument("train: batch_size must be >= 1");

  Classifier model(hyper.features, hyper.topology, seed);
  std::vector<RowMatrix> train_x, valid_x;
  std::vector<std::size_t> train_y, valid_y;
  for (const auto& clip : dataset) {
    clip.validate();
    (clip.split == Split::train ? train_y : valid_y).push_back(index_of(clip.label));
    (clip.split == Split::train ? train_x : valid_x).emplace_back();
  }
  {
    std::vector<const AudioClip*> order;
    for (const auto& clip : dataset) order.push_back(&clip);
    std::vector<RowMatrix*> slots;
    std::size_t ti = 0, vi = 0;
    for (const auto& clip : dataset) slots.push_back(clip.split == Split::train ? &train_x[ti++] : &valid_x[vi++]);
    parallel_for(order.size(), [&](std::size_t i) { *slots[i] = model.features(order[i]->samples).values; });
  }

  const auto cols = train_x.front().cols();
  Eigen::VectorXd mean = Eigen::VectorXd::Zero(cols);
  Eigen::VectorXd sq = Eigen::VectorXd::Zero(cols);
  double rows = 0.0;
  for (const auto& m : train_x) {
    mean += m.colwise().sum().transpose();
    sq += m.array().square().colwise().sum().matrix().transpose();
    rows += static_cast<double>(m.rows());
  }
  mean /= rows;
  Eigen::VectorXd var = (sq / rows).array() - mean.array().square();
  Eigen::VectorXd scale = var.array().max(1e-12).sqrt().inverse();
  model.set_standardization(mean, scale);

  Parameters velocity = model.parameters().zeros_like();
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::vector<std::size_t> order(train_x.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += hyper.batch_size) {
      const std::size_t n = std::min(hyper.batch_size, order.size() - start);
      std::vector<Parameters> sample_grads(n);
      std::vector<double> losses(n);
      parallel_for(n, [&](std::size_t b) {
        const std::size_t i = order[start + b];
        Classifier::Trace tr;
        auto logits = model.logits_from_features(train_x[i], &tr);
        auto p = Classifier::softmax(logits);
        losses[b] = -std::log(std::max(p[train_y[i]], 1e-300));
        Eigen::VectorXd up = Eigen::Map<Eigen::VectorXd>(p.data(), static_cast<Eigen::Index>(p.size()));
        up(static_cast<Eigen::Index>(train_y[i])) -= 1.0;
        sample_grads[b] = model.parameters().zeros_like();
        model.backward(tr, up, &sample_grads[b], false);
      });
      Parameters grad = model.parameters().zeros_like();
      for (std::size_t b = 0; b < n; ++b) {
        loss_sum += losses[b];
        grad.w1 += sample_grads[b].w1;
        grad.b1 += sample_grads[b].b1;
        grad.w2 += sample_grads[b].w2;
        grad.b2 += sample_grads[b].b2;
        grad.wfc += sample_grads[b].wfc;
        grad.bfc += sample_grads[b].bfc;
      }
      if (!std::isfinite(loss_sum)) {
        throw TrainingDiverged("train: non-finite loss in epoch " + std::to_string(epoch + 1));
      }
      double inv = 1.0 / static_cast<double>(n);
      if (hyper.max_grad_norm > 0.0) {
        double sq = 0.0;
        Parameters::each(grad, [&](const double* p, Eigen::Index sz) {
          for (Eigen::Index i = 0; i < sz; ++i) sq += p[i] * p[i];
        });
        const double norm = std::sqrt(sq) * inv;
        if (norm > hyper.max_grad_norm) inv *= hyper.max_grad_norm / norm;
      }
      std::vector<double*> g_ptrs, v_ptrs, p_ptrs;
      std::vector<Eigen::Index> sizes;
      Parameters::each(grad, [&](double* p, Eigen::Index sz) {
        g_ptrs.push_back(p);
        sizes.push_back(sz);
      });
      Parameters::each(velocity, [&](double* p, Eigen::Index) { v_ptrs.push_back(p); });
      Parameters::each(model.parameters(), [&](double* p, Eigen::Index) { p_ptrs.push_back(p); });
      for (std::size_t t = 0; t < sizes.size(); ++t) {
        for (Eigen::Index i = 0; i < sizes[t]; ++i) {
          v_ptrs[t][i] = hyper.momentum * v_ptrs[t][i] + g_ptrs[t][i] * inv;
          p_ptrs[t][i] -= hyper.learning_rate * v_ptrs[t][i];
        }
      }
    }
    if (!model.parameters().all_finite()) {
      throw TrainingDiverged("train: non-finite parameters after epoch " + std::to_string(epoch + 1));
    }
    EpochStats stats;
    stats.epoch = epoch + 1;
    stats.loss = loss_sum / static_cast<double>(order.size());
    stats.train_accuracy = accuracy(model, train_x, train_y);
    stats.validation_accuracy = accuracy(model, valid_x, valid_y);
    if (report) report->epochs.push_back(stats);
    if (on_epoch) on_epoch(stats);
  }

  model.info().seed = seed;
  model.info().epochs = hyper.epochs;
  model.info().train_accuracy = accuracy(model, train_x, train_y);
  model.info().validation_accuracy = accuracy(model, valid_x, valid_y);
  return model;
}

// ---------------------------------------------------------------------------
// Model file: "ADVMODEL", u32 version, length-prefixed feature config text,
// topology, training info, shape-prefixed little-endian double tensors, "END.".

inline constexpr std::uint32_t kModelVersion = 1;

namespace detail {

static_assert(std::endian::native == std::endian::little, "model files assume a little-endian host");

class ByteWriter {
 public:
  template <class T>
  void put(const T& v) {
    const char* p = reinterpret_cast<const char*>(&v);
    bytes_.append(p, sizeof(T));
  }
  void put_bytes(std::string_view s) { bytes_.append(s); }
  void put_string(std::string_view s) {
    put(static_cast<std::uint32_t>(s.size()));
    bytes_.append(s);
  }
  void put_tensor(const double* data, std::initializer_list<std::uint64_t> dims) {
    put(static_cast<std::uint32_t>(dims.size()));
    std::uint64_t n = 1;
    for (auto d : dims) {
      put(d);
      n *= d;
    }
    bytes_.append(reinterpret_cast<const char*>(data), n * sizeof(double));
  }
  const std::string& bytes() const { return bytes_; }

 private:
  std::string bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::string_view bytes) : bytes_(bytes) {}
  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string_view get_bytes(std::size_t n) {
    need(n);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    return std::string(get_bytes(n));
  }
  std::vector<double> get_tensor(std::initializer_list<std::uint64_t> expected) {
    const auto ndim = get<std::uint32_t>();
    if (ndim != expected.size()) throw FormatError("model file: tensor rank mismatch");
    std::uint64_t n = 1;
    for (auto want : expected) {
      const auto d = get<std::uint64_t>();
      if (d != want) throw FormatError("model file: tensor shape mismatch");
      n *= d;
    }
    std::vector<double> out(n);
    auto raw = get_bytes(n * sizeof(double));
    std::memcpy(out.data(), raw.data(), raw.size());
    return out;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw FormatError("model file truncated");
  }
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace detail

inline std::string serialize_model(const Classifier& model) {
  detail::ByteWriter w;
  w.put_bytes("ADVMODEL");
  w.put(kModelVersion);
  KeyValueConfig fc;
  write_feature_config(fc, model.feature_config(), "");
  w.put_string(fc.to_string());
  const Topology& t = model.topology();
  for (std::uint64_t v : {t.conv1_channels, t.conv1_time, t.conv1_freq, t.pool_time, t.conv2_channels,
                          t.conv2_time, t.conv2_freq}) {
    w.put(v);
  }
  w.put(model.info().seed);
  w.put(model.info().epochs);
  w.put(model.info().train_accuracy);
  w.put(model.info().validation_accuracy);
  const auto& p = model.parameters();
  const auto nf = static_cast<std::uint64_t>(model.input_mean().size());
  w.put_tensor(model.input_mean().data(), {nf});
  w.put_tensor(model.input_scale().data(), {nf});
  w.put_tensor(p.w1.data(), {static_cast<std::uint64_t>(p.w1.rows()), static_cast<std::uint64_t>(p.w1.cols())});
  w.put_tensor(p.b1.data(), {static_cast<std::uint64_t>(p.b1.size())});
  w.put_tensor(p.w2.data(), {static_cast<std::uint64_t>(p.w2.rows()), static_cast<std::uint64_t>(p.w2.cols())});
  w.put_tensor(p.b2.data(), {static_cast<std::uint64_t>(p.b2.size())});
  w.put_tensor(p.wfc.data(), {static_cast<std::uint64_t>(p.wfc.rows()), static_cast<std::uint64_t>(p.wfc.cols())});
  w.put_tensor(p.bfc.data(), {static_cast<std::uint64_t>(p.bfc.size())});
  w.put_bytes("END.");
  return w.bytes();
}

inline Classifier deserialize_model(std::string_view bytes) {
  detail::ByteReader r(bytes);
  if (bytes.size() < 8 || r.get_bytes(8) != "ADVMODEL") throw FormatError("model file: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kModelVersion) {
    throw VersionError("model file: version " + std::to_string(version) + " (expected " +
                       std::to_string(kModelVersion) + ")");
  }
  FeatureConfig features = read_feature_config(KeyValueConfig::parse(r.get_string()), "");
  Topology t;
  for (std::size_t* f : {&t.conv1_channels, &t.conv1_time, &t.conv1_freq, &t.pool_time, &t.conv2_channels,
                         &t.conv2_time, &t.conv2_freq}) {
    *f = static_cast<std::size_t>(r.get<std::uint64_t>());
  }
  Classifier model(features, t, 0);
  model.info().seed = r.get<std::uint64_t>();
  model.info().epochs = r.get<std::uint64_t>();
  model.info().train_accuracy = r.get<double>();
  model.info().validation_accuracy = r.get<double>();

  auto& p = model.parameters();
  const auto nf = static_cast<std::uint64_t>(model.input_mean().size());
  auto to_vec = [](const std::vector<double>& v) {
    return Eigen::VectorXd(Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size())));
  };
  auto load_matrix = [&](RowMatrix& m) {
    auto v = r.get_tensor({static_cast<std::uint64_t>(m.rows()), static_cast<std::uint64_t>(m.cols())});
    std::copy(v.begin(), v.end(), m.data());
  };
  auto load_vector = [&](Eigen::VectorXd& m) { m = to_vec(r.get_tensor({static_cast<std::uint64_t>(m.size())})); };
  Eigen::VectorXd mean = to_vec(r.get_tensor({nf}));
  Eigen::VectorXd scale = to_vec(r.get_tensor({nf}));
  model.set_standardization(std::move(mean), std::move(scale));
  load_matrix(p.w1);
  load_vector(p.b1);
  load_matrix(p.w2);
  load_vector(p.b2);
  load_matrix(p.wfc);
  load_vector(p.bfc);
  if (r.get_bytes(4) != "END.") throw FormatError("model file: missing end marker");
  if (!r.done()) throw FormatError("model file: trailing bytes");
  if (!p.all_finite()) throw FormatError("model file: non-finite parameters");
  return model;
}

inline void save_model(const Classifier& model, const std::filesystem::path& path) {
  detail::write_file(path, serialize_model(model));
}

inline Classifier load_model(const std::filesystem::path& path) {
  return deserialize_model(detail::read_file(path));
}

}  // namespace advaudio
