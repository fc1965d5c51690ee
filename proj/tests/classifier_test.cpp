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

#include "advaudio/classifier.hpp"

#include <gtest/gtest.h>

#include "test_support.hpp"

namespace advaudio {
namespace {

Classifier random_model(std::uint64_t seed) { return Classifier(FeatureConfig{}, Topology{}, seed); }

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-300}); }

TEST(Argmax, PicksLargestAndLowestOnTies) {
  std::vector<double> logits(12, -1.0);
  logits[0] = 0.1;
  logits[1] = 3.2;
  EXPECT_EQ(argmax(logits), 1u);
  logits[5] = 3.2;
  EXPECT_EQ(argmax(logits), 1u);
}

TEST(Classifier, ZeroPerturbationKeepsLabel) {
  const Classifier m = random_model(1);
  std::mt19937_64 rng(1);
  const auto x = testing::burst_clip(rng);
  const std::vector<double> zero(x.size(), 0.0);
  EXPECT_EQ(m.predict_index(add(x, zero)), m.predict_index(x));
}

TEST(Classifier, RejectsWrongLength) {
  const Classifier m = random_model(1);
  EXPECT_THROW(m.logits(std::vector<double>(100, 0.0)), InvalidArgument);
  const std::vector<std::size_t> bad = {12};
  EXPECT_THROW(m.logits_and_input_grads(std::vector<double>(kClipLength, 0.0), bad), InvalidArgument);
}

TEST(InputGradients, MatchCentralDifferences) {
  const Classifier m = random_model(2);
  std::mt19937_64 rng(2);
  const std::vector<std::size_t> classes = {0, 4, 11};
  for (int clip = 0; clip < 3; ++clip) {
    const auto x = testing::burst_clip(rng);
    const auto lg = m.logits_and_input_grads(x, classes);
    ASSERT_EQ(lg.logits, m.logits(x));
    for (int dir = 0; dir < 2; ++dir) {
      auto d = testing::random_signal(rng, x.size(), 1.0);
      const double dn = l2_norm(d);
      for (double& v : d) v /= dn;
      // The network is piecewise smooth (ReLU, max pooling); a smaller step
      // keeps both probes on the same side of every switch point.
      const double h = 1e-6;
      const auto fp = m.logits(add(x, scaled(d, h)));
      const auto fm = m.logits(add(x, scaled(d, -h)));
      for (std::size_t j = 0; j < classes.size(); ++j) {
        const double fd = (fp[classes[j]] - fm[classes[j]]) / (2 * h);
        EXPECT_LT(rel_err(fd, dot(lg.gradients[j], d)), 1e-4) << "class " << classes[j];
      }
    }
  }
}

TEST(InputGradients, SelfDifferenceIsZero) {
  const Classifier m = random_model(3);
  std::mt19937_64 rng(3);
  const auto x = testing::burst_clip(rng);
  const std::vector<std::size_t> classes = {7, 7};
  const auto lg = m.logits_and_input_grads(x, classes);
  for (std::size_t i = 0; i < x.size(); ++i) ASSERT_EQ(lg.gradients[0][i] - lg.gradients[1][i], 0.0);
}

TEST(InputGradients, DoublingOutputRowDoublesGradient) {
  Classifier m = random_model(4);
  std::mt19937_64 rng(4);
  const auto x = testing::burst_clip(rng);
  const std::vector<std::size_t> k = {5};
  const auto before = m.logits_and_input_grads(x, k).gradients[0];
  m.parameters().wfc.row(5) *= 2.0;
  const auto after = m.logits_and_input_grads(x, k).gradients[0];
  double scale = 0.0;
  for (double v : before) scale = std::max(scale, std::abs(v));
  for (std::size_t i = 0; i < x.size(); ++i) ASSERT_NEAR(after[i], 2.0 * before[i], 1e-12 * scale);
}

TEST(ModelFile, RoundTripIsBitwise) {
  Classifier m = random_model(5);
  Eigen::VectorXd mean = Eigen::VectorXd::LinSpaced(40, -3, 3), scale = Eigen::VectorXd::LinSpaced(40, 1, 2);
  m.set_standardization(mean, scale);
  m.info().seed = 5;
  m.info().validation_accuracy = 0.5;
  const std::string bytes = serialize_model(m);
  const Classifier back = deserialize_model(bytes);
  EXPECT_TRUE(back.parameters() == m.parameters());
  EXPECT_EQ(back.input_mean(), m.input_mean());
  EXPECT_EQ(back.input_scale(), m.input_scale());
  EXPECT_EQ(back.feature_config(), m.feature_config());
  EXPECT_EQ(back.topology(), m.topology());
  EXPECT_EQ(back.info().validation_accuracy, 0.5);
  EXPECT_EQ(serialize_model(back), bytes);
}

TEST(ModelFile, TruncatedOrCorruptFilesFail) {
  const std::string bytes = serialize_model(random_model(6));
  for (std::size_t cut : {std::size_t{0}, std::size_t{7}, std::size_t{40}, bytes.size() / 2, bytes.size() - 1}) {
    EXPECT_THROW(deserialize_model(bytes.substr(0, cut)), FormatError) << cut;
  }
  EXPECT_THROW(deserialize_model(bytes + "x"), FormatError);
  std::string magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(deserialize_model(magic), FormatError);
}

TEST(ModelFile, WrongVersionIsAVersionError) {
  std::string bytes = serialize_model(random_model(7));
  bytes[8] = 9;
  EXPECT_THROW(deserialize_model(bytes), VersionError);
}

TEST(Training, DeterministicForFixedSeed) {
  const Dataset data = synth_dataset(SynthConfig::defaults(6), 21);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 8;
  const Classifier a = train(data, cfg, 9);
  const Classifier b = train(data, cfg, 9);
  EXPECT_TRUE(a.parameters() == b.parameters());
  EXPECT_EQ(serialize_model(a), serialize_model(b));
  const Classifier c = train(data, cfg, 10);
  EXPECT_FALSE(a.parameters() == c.parameters());
}

TEST(Training, ReportsEpochsAndLearns) {
  const Dataset data = synth_dataset(SynthConfig::defaults(20), 22);
  TrainConfig cfg;
  cfg.epochs = 6;
  TrainReport report;
  std::size_t callbacks = 0;
  const Classifier m = train(data, cfg, 1, &report, [&](const EpochStats&) { ++callbacks; });
  ASSERT_EQ(report.epochs.size(), 6u);
  EXPECT_EQ(callbacks, 6u);
  EXPECT_LT(report.epochs.back().loss, report.epochs.front().loss);
  EXPECT_GT(m.info().train_accuracy, 0.5);
}

TEST(Training, SingleClassDatasetIsRejected) {
  Dataset data = synth_dataset(SynthConfig::defaults(2), 23);
  std::erase_if(data, [](const AudioClip& c) { return c.label != CommandLabel::yes; });
  EXPECT_THROW(train(data, TrainConfig{}, 1), InvalidArgument);
}

}  // namespace
}  // namespace advaudio
