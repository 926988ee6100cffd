#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "exp3cil/learner.hpp"
#include "test_util.hpp"

using namespace exp3cil;
using testutil::random_vector;
using testutil::small_arch;

namespace {

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return ErrorCode::kIo;
}

/// Extractor that returns its input: identity weights, identity activation.
ModelState identity_model(std::size_t dim, std::vector<std::vector<double>> head_rows) {
  Architecture a;
  a.input_dim = a.hidden_dim = a.feature_dim = dim;
  a.activation = Activation::kIdentity;
  Rng rng(0);
  ModelState m = make_model(a, head_rows.size(), rng);
  m.params.w1 = Matrix(dim, dim);
  m.params.w2 = Matrix(dim, dim);
  for (std::size_t i = 0; i < dim; ++i) m.params.w1(i, i) = m.params.w2(i, i) = 1.0;
  std::fill(m.params.b1.begin(), m.params.b1.end(), 0.0);
  std::fill(m.params.b2.begin(), m.params.b2.end(), 0.0);
  for (std::size_t k = 0; k < head_rows.size(); ++k) {
    for (std::size_t i = 0; i < dim; ++i) m.params.head(k, i) = head_rows[k][i];
  }
  return m;
}

double entropy(const std::vector<double>& p) {
  double h = 0;
  for (double v : p) h -= v > 0 ? v * std::log(v) : 0.0;
  return h;
}

}  // namespace

// ---------------------------------------------------------------------------
// Forward pass.

TEST(Forward, ZeroWeightsGiveZeroFeatures) {
  Rng rng(1);
  ModelState m = make_model(small_arch(), 3, rng);
  m.params.w2.data.assign(m.params.w2.data.size(), 0.0);
  const auto f = forward_features(m, random_vector(4, rng));
  for (double v : f) EXPECT_EQ(v, 0.0);
}

TEST(Forward, IdentityExtractor) {
  const auto m = identity_model(3, {{1, 0, 0}, {0, 1, 0}});
  const std::vector<double> x{0.3, -1.2, 2.5};
  EXPECT_EQ(forward_features(m, x), x);
}

TEST(Forward, MatchesStraightLineRecomputation) {
  Rng rng(42);
  const auto arch = small_arch(4, 6, 3);
  ModelState m = make_model(arch, 2, rng);
  for (auto& v : m.params.b1) v = 0.1;
  for (auto& v : m.params.b2) v = -0.2;
  const auto x = random_vector(4, rng);
  std::vector<double> h(6), f(3);
  for (std::size_t i = 0; i < 6; ++i) {
    double z = m.params.b1[i];
    for (std::size_t j = 0; j < 4; ++j) z += m.params.w1.data[i * 4 + j] * x[j];
    h[i] = std::tanh(z);
  }
  for (std::size_t i = 0; i < 3; ++i) {
    double z = m.params.b2[i];
    for (std::size_t j = 0; j < 6; ++j) z += m.params.w2.data[i * 6 + j] * h[j];
    f[i] = z;
  }
  const auto got = forward_features(m, x);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(got[i], f[i], 1e-14);
}

TEST(Forward, DimensionMismatch) {
  Rng rng(1);
  const auto m = make_model(small_arch(), 2, rng);
  EXPECT_EQ(code_of([&] { forward_features(m, std::vector<double>(5, 1.0)); }), ErrorCode::kShape);
}

TEST(Forward, CosineLogits) {
  const auto m = identity_model(2, {{1, 0}, {0, 1}, {1, 1}});
  const auto z = forward_logits(m, std::vector<double>{2.0, 0.0});
  EXPECT_NEAR(z[0], 10.0, 1e-12);
  EXPECT_NEAR(z[1], 0.0, 1e-12);
  EXPECT_NEAR(z[2], 10.0 / std::sqrt(2.0), 1e-12);
}

TEST(Forward, DegenerateCosine) {
  const auto m = identity_model(2, {{1, 0}, {0, 0}});
  EXPECT_EQ(code_of([&] { forward_logits(m, std::vector<double>{1.0, 1.0}); }), ErrorCode::kDegenerateCosine);
  const auto m2 = identity_model(2, {{1, 0}, {0, 1}});
  EXPECT_EQ(code_of([&] { forward_logits(m2, std::vector<double>{0.0, 0.0}); }), ErrorCode::kDegenerateCosine);
}

TEST(Forward, GrowHeadKeepsOldRows) {
  Rng rng(5);
  const auto m = make_model(small_arch(), 2, rng);
  const auto g = grow_head(m, 4, rng);
  ASSERT_EQ(g.num_classes(), 4u);
  for (std::size_t k = 0; k < 2; ++k) {
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(g.params.head(k, i), m.params.head(k, i));
  }
  EXPECT_EQ(g.params.w1, m.params.w1);
  EXPECT_THROW(grow_head(m, 1, rng), Error);
}

// ---------------------------------------------------------------------------
// Losses.

TEST(Losses, RescaleEtaExamples) {
  const auto u = rescale_eta(std::vector<double>{0.25, 0.25, 0.25, 0.25}, 3.0);
  for (double v : u) EXPECT_NEAR(v, 0.25, 1e-15);
  const auto e = rescale_eta(std::vector<double>{0.9, 0.1}, 2.0);
  EXPECT_NEAR(e[0], std::sqrt(0.9) / (std::sqrt(0.9) + std::sqrt(0.1)), 1e-12);
  EXPECT_NEAR(e[0], 0.75, 1e-12);
  EXPECT_NEAR(e[1], 0.25, 1e-12);
  const std::vector<double> p{0.6, 0.3, 0.1};
  const auto id = rescale_eta(p, 1.0 + 1e-8);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(id[i], p[i], 1e-6);
}

TEST(Losses, RescaleEtaErrors) {
  EXPECT_EQ(code_of([] { rescale_eta(std::vector<double>{1.2, -0.2}, 2.0); }), ErrorCode::kDomain);
  EXPECT_EQ(code_of([] { rescale_eta(std::vector<double>{0.5, 0.5}, 1.0); }), ErrorCode::kInvalidParameter);
}

TEST(Losses, LogitKdSelfDistillationIsEntropy) {
  const std::vector<double> z{1.0, -0.5, 2.0};
  const double tau = 2.0;
  const auto target = rescale_eta(softmax(z), tau);
  EXPECT_NEAR(logit_kd_loss(z, z, tau), entropy(target), 1e-12);
  const auto g = logit_kd_grad(z, z, tau);
  for (double v : g) EXPECT_NEAR(v, 0.0, 1e-15);
}

TEST(Losses, LogitKdScriptValue) {
  // Independent evaluation: 0.5*(-(5-lse)) + 0.5*(-(-5-lse)), lse = log(e^5+e^-5).
  EXPECT_NEAR(logit_kd_loss(std::vector<double>{10, -10}, std::vector<double>{0, 0}, 2.0), 5.000045398899218, 1e-12);
  EXPECT_EQ(code_of([] { logit_kd_loss(std::vector<double>{1, 2}, std::vector<double>{1}, 2.0); }),
            ErrorCode::kShape);
}

TEST(Losses, FeatureKdExtremes) {
  const std::vector<double> a{1, 2, 3};
  EXPECT_NEAR(feature_kd_loss(a, a), 0.0, 1e-15);
  EXPECT_NEAR(feature_kd_loss(std::vector<double>{1, 0}, std::vector<double>{0, 3}), 1.0, 1e-15);
  EXPECT_NEAR(feature_kd_loss(std::vector<double>{1, -2}, std::vector<double>{-2, 4}), 2.0, 1e-15);
  EXPECT_EQ(code_of([] { feature_kd_loss(std::vector<double>{0, 0}, std::vector<double>{1, 0}); }),
            ErrorCode::kDegenerateCosine);
}

TEST(Losses, SoftmaxScriptValues) {
  const auto p = softmax(std::vector<double>{1, 2, 3});
  EXPECT_NEAR(p[0], 0.09003057317038046, 1e-15);
  EXPECT_NEAR(p[1], 0.24472847105479767, 1e-15);
  EXPECT_NEAR(p[2], 0.6652409557748219, 1e-15);
  const auto big = softmax(std::vector<double>{1000, 1000});
  EXPECT_DOUBLE_EQ(big[0], 0.5);
}

// Property: normalized outputs and KD range on random inputs.
TEST(LossesProperty, NormalizationAndRange) {
  Rng rng(77);
  std::uniform_real_distribution<double> tau_dist(1.01, 8.0);
  for (int t = 0; t < 300; ++t) {
    const std::size_t n = 2 + static_cast<std::size_t>(t % 12);
    const auto z = random_vector(n, rng, 5.0);
    const auto p = softmax(z);
    const auto e = rescale_eta(p, tau_dist(rng));
    EXPECT_NEAR(std::accumulate(p.begin(), p.end(), 0.0), 1.0, 1e-9);
    EXPECT_NEAR(std::accumulate(e.begin(), e.end(), 0.0), 1.0, 1e-9);
    const double f = feature_kd_loss(random_vector(n, rng), random_vector(n, rng));
    EXPECT_GE(f, 0.0);
    EXPECT_LE(f, 2.0);
    EXPECT_GE(logit_kd_loss(z, random_vector(n, rng), 2.0), 0.0);
  }
}

// ---------------------------------------------------------------------------
// Overall objective.

TEST(Objective, NoKdIsCrossEntropy) {
  Rng rng(3);
  const auto m = make_model(small_arch(), 3, rng);
  const std::vector<Sample> batch{{random_vector(4, rng), 0}, {random_vector(4, rng), 2}};
  double ce = 0;
  for (const auto& s : batch) ce += cross_entropy(forward_logits(m, s.x), s.label);
  ce /= 2;
  const auto lg = overall_loss_and_grad(batch, m, nullptr, LossConfig{2.0, 0, 0});
  EXPECT_NEAR(lg.loss, ce, 1e-12);
  const auto with_old = overall_loss_and_grad(batch, m, &m, LossConfig{2.0, 0, 0});
  EXPECT_EQ(with_old.loss, lg.loss);
  EXPECT_EQ(with_old.grads, lg.grads);
}

TEST(Objective, SelfTeacher) {
  Rng rng(4);
  const auto m = make_model(small_arch(), 3, rng);
  const std::vector<Sample> batch{{random_vector(4, rng), 1}, {random_vector(4, rng), 0}};
  const double beta = 0.7, gamma = 3.0, tau = 2.0;
  double expected = 0;
  for (const auto& s : batch) {
    const auto z = forward_logits(m, s.x);
    expected += cross_entropy(z, s.label) + beta * entropy(rescale_eta(softmax(z), tau));
  }
  expected /= 2;
  EXPECT_NEAR(overall_loss(batch, m, &m, LossConfig{tau, beta, gamma}), expected, 1e-12);
  // At the self-teacher point the KD terms add no gradient.
  auto kd = overall_loss_and_grad(batch, m, &m, LossConfig{tau, beta, gamma});
  auto ce = overall_loss_and_grad(batch, m, nullptr, LossConfig{tau, 0, 0});
  for (std::size_t k = 0; k < ce.grads.count(); ++k) {
    EXPECT_NEAR(kd.grads.at(k), ce.grads.at(k), 1e-12);
  }
}

TEST(Objective, FiniteDifferenceOracle) {
  Rng rng(9);
  const auto old = make_model(small_arch(4, 5, 3), 2, rng);
  const auto cur = grow_head(make_model(small_arch(4, 5, 3), 2, rng), 3, rng);
  std::vector<Sample> batch;
  for (int i = 0; i < 5; ++i) batch.push_back({random_vector(4, rng), i % 3});
  const LossConfig cfg{2.0, 1.5, 2.0};
  auto lg = overall_loss_and_grad(batch, cur, &old, cfg);
  for (std::size_t k = 0; k < lg.grads.count(); ++k) {
    const double num = testutil::numeric_grad(batch, cur, &old, cfg, k);
    EXPECT_PRED2(testutil::grad_close, lg.grads.at(k), num) << "parameter " << k;
  }
}

TEST(Objective, Errors) {
  Rng rng(2);
  const auto m = make_model(small_arch(), 2, rng);
  const std::vector<Sample> bad{{random_vector(4, rng), 2}};
  EXPECT_EQ(code_of([&] { overall_loss(bad, m, nullptr, LossConfig{}); }), ErrorCode::kLabel);
  const std::vector<Sample> ok{{random_vector(4, rng), 1}};
  EXPECT_EQ(code_of([&] { overall_loss(ok, m, nullptr, LossConfig{2.0, 1.0, 0.0}); }),
            ErrorCode::kInvalidParameter);
  const auto other = make_model(small_arch(4, 6, 3), 2, rng);
  EXPECT_EQ(code_of([&] { overall_loss(ok, m, &other, LossConfig{2.0, 1.0, 0.0}); }), ErrorCode::kShape);
}

TEST(Sgd, Arithmetic) {
  Rng rng(1);
  const auto m = make_model(small_arch(), 2, rng);
  auto g = zero_like(m.params);
  g.for_each([](double& v) { v = 2.0; });
  EXPECT_EQ(sgd_step(m, g, 0.0), m);
  auto single = m;
  single.params.at(0) = 1.0;
  auto stepped = sgd_step(single, g, 0.1);
  EXPECT_NEAR(stepped.params.at(0), 0.8, 1e-15);
  g.at(3) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(code_of([&] { sgd_step(m, g, 0.1); }), ErrorCode::kNumeric);
}

// ---------------------------------------------------------------------------
// Class means and prediction.

TEST(ClassMeansTest, SingleAndDuplicateSamples) {
  const auto m = identity_model(2, {{1, 0}, {0, 1}});
  LabeledDataset d{2, {}};
  d.add({{3, 4}, 0});
  d.add({{0, -2}, 1});
  auto means = compute_class_means(m, d);
  EXPECT_NEAR(means.means[0][0], 0.6, 1e-15);
  EXPECT_NEAR(means.means[0][1], 0.8, 1e-15);
  EXPECT_NEAR(means.means[1][1], -1.0, 1e-15);
  d.add({{3, 4}, 0});
  const auto again = compute_class_means(m, d);
  EXPECT_NEAR(again.means[0][0], 0.6, 1e-15);
  const std::vector<int> need{0, 1, 2};
  EXPECT_EQ(code_of([&] { compute_class_means(m, d, need); }), ErrorCode::kInsufficientData);
}

TEST(ClassMeansTest, BruteForceOracle) {
  Rng rng(12);
  const auto m = make_model(small_arch(), 3, rng);
  const auto d = testutil::random_dataset(4, 3, 7, rng);
  const auto means = compute_class_means(m, d);
  for (int c = 0; c < 3; ++c) {
    std::vector<double> acc(3, 0.0);
    int n = 0;
    for (const auto& s : d.samples) {
      if (s.label != c) continue;
      const auto f = forward_features(m, s.x);
      for (int i = 0; i < 3; ++i) acc[i] += f[i];
      ++n;
    }
    double norm = 0;
    for (auto& v : acc) {
      v /= n;
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (int i = 0; i < 3; ++i) EXPECT_NEAR(means.means[c][i], acc[i] / norm, 1e-12);
  }
}

TEST(Predict, NcmAndFc) {
  const auto m = identity_model(2, {{1, 0}, {0, 1}, {-1, 1}});
  ClassMeans means{{0, 1}, {{1, 0}, {0, 1}}};
  EXPECT_EQ(predict(m, std::vector<double>{0.0, 5.0}, 1, &means), 1);
  // Equidistant feature: lowest class id.
  EXPECT_EQ(predict(m, std::vector<double>{1.0, 1.0}, 1, &means), 0);
  // FC: cosines (-0.6, 0.8, 0.99) for x=(-0.6, 0.8).
  EXPECT_EQ(predict(m, std::vector<double>{-0.6, 0.8}, 0, nullptr), 2);
  EXPECT_EQ(predict(m, std::vector<double>{0.9, 0.1}, 0, nullptr), 0);
  EXPECT_EQ(code_of([&] { predict(m, std::vector<double>{1.0, 0.0}, 1, nullptr); }), ErrorCode::kInsufficientData);
}

TEST(Evaluate, PerfectAndAdversarial) {
  const auto m = identity_model(2, {{1, 0}, {0, 1}});
  LabeledDataset d{2, {}};
  d.add({{2, 0}, 0});
  d.add({{0, 3}, 1});
  const auto means = compute_class_means(m, d);
  EXPECT_EQ(evaluate_accuracy(m, d, 1, &means), 1.0);
  EXPECT_EQ(evaluate_accuracy(m, d, 0, nullptr), 1.0);
  LabeledDataset swapped = d;
  for (auto& s : swapped.samples) s.label = 1 - s.label;
  EXPECT_EQ(evaluate_accuracy(m, swapped, 1, &means), 0.0);
  EXPECT_EQ(code_of([&] { evaluate_accuracy(m, LabeledDataset{2, {}}, 0, nullptr); }), ErrorCode::kEmptyEvaluation);
}

TEST(Evaluate, RandomModelIsAtChance) {
  double total = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    Rng rng(seed);
    const auto m = make_model(small_arch(), 4, rng);
    const auto d = testutil::random_dataset(4, 4, 100, rng);
    total += evaluate_accuracy(m, d, 0, nullptr);
  }
  EXPECT_NEAR(total / 10, 0.25, 0.05);
}

// ---------------------------------------------------------------------------
// Training.

TEST(Train, SeparableTwoClass) {
  Rng rng(8);
  std::normal_distribution<double> noise(0.0, 0.5);
  LabeledDataset d{2, {}};
  for (int i = 0; i < 100; ++i) {
    const int c = i % 2;
    d.add({{(c ? 2.0 : -2.0) + noise(rng), noise(rng)}, c});
  }
  auto m = make_model(small_arch(2, 8, 4), 2, rng);
  m = train_for_epochs(m, nullptr, Action{0, 0, 0.1, 0}, d, 20, TrainConfig{}, rng);
  EXPECT_GE(evaluate_accuracy(m, d, 0, nullptr), 0.95);
}

TEST(Train, TinyStepAndDeterminism) {
  Rng rng(10);
  const auto m = make_model(small_arch(), 3, rng);
  const auto d = testutil::random_dataset(4, 3, 10, rng);
  Rng r1(5), r2(5);
  const auto a = train_for_epochs(m, &m, Action{1, 1, 0.05, 0}, d, 3, TrainConfig{}, r1);
  const auto b = train_for_epochs(m, &m, Action{1, 1, 0.05, 0}, d, 3, TrainConfig{}, r2);
  EXPECT_EQ(a, b);
  Rng r3(5);
  auto tiny = train_for_epochs(m, nullptr, Action{0, 0, 1e-9, 0}, d, 1, TrainConfig{}, r3);
  auto orig = m;
  for (std::size_t k = 0; k < orig.params.count(); ++k) EXPECT_LT(std::abs(tiny.params.at(k) - orig.params.at(k)), 1e-6);
}

// ---------------------------------------------------------------------------
// Herding.

TEST(Herding, Basics) {
  Rng rng(6);
  const auto m = make_model(small_arch(), 2, rng);
  std::vector<Sample> cls;
  for (int i = 0; i < 6; ++i) cls.push_back({random_vector(4, rng), 0});
  auto all = herding_select(m, cls, 6);
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, (std::vector<std::size_t>{0, 1, 2, 3, 4, 5}));
  const std::vector<Sample> same(4, cls.front());
  EXPECT_EQ(herding_select(m, same, 2), (std::vector<std::size_t>{0, 1}));
  EXPECT_EQ(code_of([&] { herding_select(m, cls, 7); }), ErrorCode::kBudget);
}

TEST(Herding, BeatsTypicalRandomSubset) {
  int wins = 0;
  const int trials = 30;
  for (int t = 0; t < trials; ++t) {
    Rng rng(1000 + t);
    const auto m = make_model(small_arch(), 1, rng);
    std::vector<Sample> cls;
    for (int i = 0; i < 30; ++i) cls.push_back({random_vector(4, rng), 0});
    std::vector<std::vector<double>> feats;
    std::vector<double> mu(3, 0.0);
    for (const auto& s : cls) {
      feats.push_back(forward_features(m, s.x));
      for (int i = 0; i < 3; ++i) mu[i] += feats.back()[i] / 30.0;
    }
    auto dist = [&](const std::vector<std::size_t>& idx) {
      double d = 0;
      for (int i = 0; i < 3; ++i) {
        double s = 0;
        for (auto k : idx) s += feats[k][i];
        d += std::pow(s / static_cast<double>(idx.size()) - mu[i], 2);
      }
      return std::sqrt(d);
    };
    const double herd = dist(herding_select(m, cls, 5));
    std::vector<double> random_dists;
    std::vector<std::size_t> all(30);
    std::iota(all.begin(), all.end(), 0);
    for (int r = 0; r < 200; ++r) {
      std::shuffle(all.begin(), all.end(), rng);
      random_dists.push_back(dist({all.begin(), all.begin() + 5}));
    }
    std::nth_element(random_dists.begin(), random_dists.begin() + 100, random_dists.end());
    if (herd <= random_dists[100]) ++wins;
  }
  EXPECT_EQ(wins, trials);
}

TEST(Serialization, ModelRoundTrip) {
  Rng rng(3);
  const auto m = make_model(small_arch(), 4, rng);
  const nlohmann::json j = m;
  EXPECT_EQ(j.get<ModelState>(), m);
  nlohmann::json bad = j;
  bad["b1"] = std::vector<double>{1.0};
  EXPECT_THROW(bad.get<ModelState>(), Error);
}
