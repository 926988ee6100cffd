#pragma once

// Small incremental classifier: two-layer feature extractor followed by a
// bias-free cosine head. All gradients are derived by hand for this fixed
// architecture.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "exp3cil/dataset.hpp"
#include "exp3cil/error.hpp"
#include "exp3cil/hyperspace.hpp"
#include "exp3cil/random.hpp"

namespace exp3cil {

using Vector = std::vector<double>;

/// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
  std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

  bool operator==(const Matrix&) const = default;
};

enum class Activation { kTanh, kIdentity };

struct Architecture {
  std::size_t input_dim = 16;
  std::size_t hidden_dim = 32;
  std::size_t feature_dim = 8;
  Activation activation = Activation::kTanh;
  double cosine_scale = 10.0;

  bool operator==(const Architecture&) const = default;
};

/// Every trainable tensor. Gradients share the same layout.
struct Parameters {
  Matrix w1;  // hidden x input
  Vector b1;
  Matrix w2;  // feature x hidden
  Vector b2;
  Matrix head;  // classes x feature, no bias

  bool operator==(const Parameters&) const = default;

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (auto& v : w1.data) fn(v);
    for (auto& v : b1) fn(v);
    for (auto& v : w2.data) fn(v);
    for (auto& v : b2) fn(v);
    for (auto& v : head.data) fn(v);
  }

  std::size_t count() const {
    return w1.data.size() + b1.size() + w2.data.size() + b2.size() + head.data.size();
  }

  /// Flat view by position, matching for_each order.
  double& at(std::size_t k) {
    for (auto* block : {&w1.data, &b1, &w2.data, &b2, &head.data}) {
      if (k < block->size()) return (*block)[k];
      k -= block->size();
    }
    throw Error(ErrorCode::kIndex, "parameter index out of range");
  }
};

using Gradients = Parameters;

struct ModelState {
  Architecture arch;
  Parameters params;

  std::size_t num_classes() const { return params.head.rows; }
  bool operator==(const ModelState&) const = default;
};

struct LossConfig {
  double tau = 2.0;
  double beta = 0.0;
  double gamma = 0.0;
};

struct ClassMeans {
  std::vector<int> classes;
  std::vector<Vector> means;  // unit L2 norm, aligned with `classes`
};

// ---------------------------------------------------------------------------
// Small vector helpers.

namespace detail {

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

inline void check_finite(std::span<const double> v, const char* what) {
  for (double x : v) {
    if (!std::isfinite(x)) throw Error(ErrorCode::kNumeric, std::string("non-finite ") + what);
  }
}

inline double xavier_bound(std::size_t fan_in, std::size_t fan_out) {
  return std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Model construction.

inline void append_head_rows(ModelState& model, std::size_t extra, Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  auto& head = model.params.head;
  head.cols = model.arch.feature_dim;
  for (std::size_t r = 0; r < extra; ++r) {
    for (std::size_t c = 0; c < head.cols; ++c) head.data.push_back(normal(rng));
    ++head.rows;
  }
}

inline ModelState make_model(const Architecture& arch, std::size_t num_classes, Rng& rng) {
  if (arch.input_dim == 0 || arch.hidden_dim == 0 || arch.feature_dim == 0) {
    throw Error(ErrorCode::kShape, "architecture dimensions must be positive");
  }
  if (!(arch.cosine_scale > 0.0)) {
    throw Error(ErrorCode::kInvalidParameter, "cosine scale must be positive");
  }
  ModelState model;
  model.arch = arch;
  auto& p = model.params;
  p.w1 = Matrix(arch.hidden_dim, arch.input_dim);
  p.b1.assign(arch.hidden_dim, 0.0);
  p.w2 = Matrix(arch.feature_dim, arch.hidden_dim);
  p.b2.assign(arch.feature_dim, 0.0);
  p.head = Matrix(0, arch.feature_dim);

  std::uniform_real_distribution<double> u1(-detail::xavier_bound(arch.input_dim, arch.hidden_dim),
                                            detail::xavier_bound(arch.input_dim, arch.hidden_dim));
  for (auto& v : p.w1.data) v = u1(rng);
  std::uniform_real_distribution<double> u2(
      -detail::xavier_bound(arch.hidden_dim, arch.feature_dim),
      detail::xavier_bound(arch.hidden_dim, arch.feature_dim));
  for (auto& v : p.w2.data) v = u2(rng);
  append_head_rows(model, num_classes, rng);
  return model;
}

/// Grows the head to `num_classes` rows. Existing rows are left untouched.
inline ModelState grow_head(ModelState model, std::size_t num_classes, Rng& rng) {
  if (num_classes < model.num_classes()) {
    throw Error(ErrorCode::kShape, "head cannot shrink");
  }
  append_head_rows(model, num_classes - model.num_classes(), rng);
  return model;
}

// ---------------------------------------------------------------------------
// Forward passes.

struct ForwardCache {
  Vector hidden;    // post-activation
  Vector features;  // f(x)
};

inline ForwardCache forward(const ModelState& model, std::span<const double> x) {
  const auto& a = model.arch;
  const auto& p = model.params;
  if (x.size() != a.input_dim) {
    throw Error(ErrorCode::kShape, "input has " + std::to_string(x.size()) + " entries, model expects " +
                                       std::to_string(a.input_dim));
  }
  ForwardCache cache;
  cache.hidden.resize(a.hidden_dim);
  for (std::size_t h = 0; h < a.hidden_dim; ++h) {
    const double z = p.b1[h] + detail::dot(p.w1.row(h), x);
    cache.hidden[h] = a.activation == Activation::kTanh ? std::tanh(z) : z;
  }
  cache.features.resize(a.feature_dim);
  for (std::size_t f = 0; f < a.feature_dim; ++f) {
    cache.features[f] = p.b2[f] + detail::dot(p.w2.row(f), cache.hidden);
  }
  return cache;
}

inline Vector forward_features(const ModelState& model, std::span<const double> x) {
  return forward(model, x).features;
}

inline Vector cosine_logits(const ModelState& model, std::span<const double> features) {
  const double fnorm = detail::norm(features);
  if (fnorm == 0.0) throw Error(ErrorCode::kDegenerateCosine, "zero-norm feature vector");
  const auto& head = model.params.head;
  Vector logits(head.rows);
  for (std::size_t k = 0; k < head.rows; ++k) {
    const double hnorm = detail::norm(head.row(k));
    if (hnorm == 0.0) {
      throw Error(ErrorCode::kDegenerateCosine, "zero-norm head row " + std::to_string(k));
    }
    logits[k] = model.arch.cosine_scale * detail::dot(features, head.row(k)) / (fnorm * hnorm);
  }
  return logits;
}

inline Vector forward_logits(const ModelState& model, std::span<const double> x) {
  return cosine_logits(model, forward_features(model, x));
}

// ---------------------------------------------------------------------------
// Distributions and losses.

inline Vector softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  Vector p(logits.size());
  double total = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    p[i] = std::exp(logits[i] - m);
    total += p[i];
  }
  for (auto& v : p) v /= total;
  return p;
}

inline Vector log_softmax(std::span<const double> logits) {
  const double m = *std::max_element(logits.begin(), logits.end());
  double total = 0.0;
  for (double z : logits) total += std::exp(z - m);
  const double lse = m + std::log(total);
  Vector out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

/// Temperature re-scaling of a probability vector: v_k^(1/tau) / sum_j v_j^(1/tau).
/// Applied to softmax outputs, never to raw logits.
inline Vector rescale_eta(std::span<const double> probabilities, double tau) {
  if (!(tau > 1.0)) throw Error(ErrorCode::kInvalidParameter, "tau must exceed 1");
  if (probabilities.empty()) throw Error(ErrorCode::kShape, "empty distribution");
  double sum_in = 0.0;
  for (double v : probabilities) {
    if (!(v >= 0.0)) throw Error(ErrorCode::kDomain, "rescale_eta needs nonnegative inputs");
    sum_in += v;
  }
  if (std::abs(sum_in - 1.0) > 1e-6) {
    throw Error(ErrorCode::kDomain, "rescale_eta input must sum to 1");
  }
  Vector out(probabilities.size());
  double total = 0.0;
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = std::pow(probabilities[i], 1.0 / tau);
    total += out[i];
  }
  for (auto& v : out) v /= total;
  return out;
}

inline double cross_entropy(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw Error(ErrorCode::kLabel, "label " + std::to_string(label) + " outside " +
                                       std::to_string(logits.size()) + " classes");
  }
  return -log_softmax(logits)[static_cast<std::size_t>(label)];
}

inline Vector cross_entropy_grad(std::span<const double> logits, int label) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw Error(ErrorCode::kLabel, "label " + std::to_string(label) + " outside " +
                                       std::to_string(logits.size()) + " classes");
  }
  Vector g = softmax(logits);
  g[static_cast<std::size_t>(label)] -= 1.0;
  return g;
}

/// -sum_k eta_k(softmax(old)) log eta_k(softmax(cur)). Since
/// eta(softmax(z)) = softmax(z / tau), the log term is evaluated as
/// log_softmax(cur / tau) for stability.
inline double logit_kd_loss(std::span<const double> cur_logits, std::span<const double> old_logits,
                            double tau) {
  if (cur_logits.size() != old_logits.size() || cur_logits.empty()) {
    throw Error(ErrorCode::kShape, "logit KD needs equal-length nonempty logit vectors");
  }
  const Vector target = rescale_eta(softmax(old_logits), tau);
  Vector scaled(cur_logits.begin(), cur_logits.end());
  for (auto& z : scaled) z /= tau;
  const Vector log_q = log_softmax(scaled);
  double loss = 0.0;
  for (std::size_t k = 0; k < target.size(); ++k) loss -= target[k] * log_q[k];
  return loss;
}

inline Vector logit_kd_grad(std::span<const double> cur_logits, std::span<const double> old_logits,
                            double tau) {
  if (cur_logits.size() != old_logits.size() || cur_logits.empty()) {
    throw Error(ErrorCode::kShape, "logit KD needs equal-length nonempty logit vectors");
  }
  const Vector target = rescale_eta(softmax(old_logits), tau);
  Vector scaled(cur_logits.begin(), cur_logits.end());
  for (auto& z : scaled) z /= tau;
  Vector g = softmax(scaled);
  for (std::size_t k = 0; k < g.size(); ++k) g[k] = (g[k] - target[k]) / tau;
  return g;
}

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw Error(ErrorCode::kShape, "cosine of vectors of different length");
  const double na = detail::norm(a);
  const double nb = detail::norm(b);
  if (na == 0.0 || nb == 0.0) throw Error(ErrorCode::kDegenerateCosine, "zero vector in cosine");
  return std::clamp(detail::dot(a, b) / (na * nb), -1.0, 1.0);
}

/// 1 - cos(cur, old), in [0, 2].
inline double feature_kd_loss(std::span<const double> cur_feat, std::span<const double> old_feat) {
  return 1.0 - cosine_similarity(cur_feat, old_feat);
}

/// Gradient of feature_kd_loss with respect to cur_feat; old_feat is frozen.
inline Vector feature_kd_grad(std::span<const double> cur_feat, std::span<const double> old_feat) {
  const double nc = detail::norm(cur_feat);
  const double no = detail::norm(old_feat);
  if (nc == 0.0 || no == 0.0) throw Error(ErrorCode::kDegenerateCosine, "zero vector in cosine");
  const double cos = detail::dot(cur_feat, old_feat) / (nc * no);
  Vector g(cur_feat.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    g[i] = -(old_feat[i] / no - cos * cur_feat[i] / nc) / nc;
  }
  return g;
}

// ---------------------------------------------------------------------------
// Overall objective and its gradient.

struct LossAndGrad {
  double loss = 0.0;
  Gradients grads;
};

inline Gradients zero_like(const Parameters& p) {
  Gradients g;
  g.w1 = Matrix(p.w1.rows, p.w1.cols);
  g.b1.assign(p.b1.size(), 0.0);
  g.w2 = Matrix(p.w2.rows, p.w2.cols);
  g.b2.assign(p.b2.size(), 0.0);
  g.head = Matrix(p.head.rows, p.head.cols);
  return g;
}

/// Batch mean of CE + beta * logit-KD + gamma * feature-KD, with exact
/// gradients for every parameter of `model`. Training always uses the cosine
/// (FC) head; logit KD covers the old model's classes only.
inline LossAndGrad overall_loss_and_grad(std::span<const Sample> batch, const ModelState& model,
                                         const ModelState* old_model, const LossConfig& cfg) {
  if (batch.empty()) throw Error(ErrorCode::kInsufficientData, "empty batch");
  if (!(cfg.beta >= 0.0) || !(cfg.gamma >= 0.0)) {
    throw Error(ErrorCode::kInvalidParameter, "KD weights must be nonnegative");
  }
  if (old_model == nullptr && (cfg.beta != 0.0 || cfg.gamma != 0.0)) {
    throw Error(ErrorCode::kInvalidParameter, "KD weights need an old model");
  }
  if (old_model != nullptr) {
    const auto& oa = old_model->arch;
    const auto& ca = model.arch;
    if (oa.input_dim != ca.input_dim || oa.hidden_dim != ca.hidden_dim ||
        oa.feature_dim != ca.feature_dim) {
      throw Error(ErrorCode::kShape, "old model architecture differs from current");
    }
    if (old_model->num_classes() > model.num_classes()) {
      throw Error(ErrorCode::kShape, "old model has more classes than current");
    }
  }
  if (cfg.beta > 0.0 && !(cfg.tau > 1.0)) {
    throw Error(ErrorCode::kInvalidParameter, "tau must exceed 1");
  }

  const auto& arch = model.arch;
  const auto& p = model.params;
  const std::size_t num_classes = model.num_classes();
  const double inv_batch = 1.0 / static_cast<double>(batch.size());
  const double s = arch.cosine_scale;

  LossAndGrad out;
  out.grads = zero_like(p);
  auto& g = out.grads;

  // Head norms are shared by every sample.
  Vector head_norm(num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) {
    head_norm[k] = detail::norm(p.head.row(k));
    if (head_norm[k] == 0.0) {
      throw Error(ErrorCode::kDegenerateCosine, "zero-norm head row " + std::to_string(k));
    }
  }

  Vector g_logits(num_classes);
  Vector g_feat(arch.feature_dim);
  Vector g_hidden(arch.hidden_dim);

  for (const auto& sample : batch) {
    if (sample.label < 0 || static_cast<std::size_t>(sample.label) >= num_classes) {
      throw Error(ErrorCode::kLabel, "label " + std::to_string(sample.label) + " outside " +
                                         std::to_string(num_classes) + " classes");
    }
    const ForwardCache cache = forward(model, sample.x);
    const Vector& f = cache.features;
    const double fnorm = detail::norm(f);
    if (fnorm == 0.0) throw Error(ErrorCode::kDegenerateCosine, "zero-norm feature vector");

    Vector cosines(num_classes);
    Vector logits(num_classes);
    for (std::size_t k = 0; k < num_classes; ++k) {
      cosines[k] = detail::dot(f, p.head.row(k)) / (fnorm * head_norm[k]);
      logits[k] = s * cosines[k];
    }

    double loss = cross_entropy(logits, sample.label);
    g_logits = cross_entropy_grad(logits, sample.label);
    std::fill(g_feat.begin(), g_feat.end(), 0.0);

    if (old_model != nullptr && (cfg.beta > 0.0 || cfg.gamma > 0.0)) {
      const Vector old_f = forward_features(*old_model, sample.x);
      if (cfg.beta > 0.0) {
        const std::size_t k_old = old_model->num_classes();
        const Vector old_logits = cosine_logits(*old_model, old_f);
        const std::span<const double> cur_old(logits.data(), k_old);
        loss += cfg.beta * logit_kd_loss(cur_old, old_logits, cfg.tau);
        const Vector gk = logit_kd_grad(cur_old, old_logits, cfg.tau);
        for (std::size_t k = 0; k < k_old; ++k) g_logits[k] += cfg.beta * gk[k];
      }
      if (cfg.gamma > 0.0) {
        loss += cfg.gamma * feature_kd_loss(f, old_f);
        const Vector gf = feature_kd_grad(f, old_f);
        for (std::size_t i = 0; i < g_feat.size(); ++i) g_feat[i] += cfg.gamma * gf[i];
      }
    }
    out.loss += loss * inv_batch;

    // Cosine head: d cos_k / d f = (h_k/|h_k| - cos_k f/|f|) / |f|,
    //              d cos_k / d h_k = (f/|f| - cos_k h_k/|h_k|) / |h_k|.
    for (std::size_t k = 0; k < num_classes; ++k) {
      const double gl = g_logits[k] * s * inv_batch;
      if (gl == 0.0) continue;
      const auto h = p.head.row(k);
      auto gh = g.head.row(k);
      for (std::size_t i = 0; i < f.size(); ++i) {
        const double fhat = f[i] / fnorm;
        const double hhat = h[i] / head_norm[k];
        g_feat[i] += g_logits[k] * s * (hhat - cosines[k] * fhat) / fnorm;
        gh[i] += gl * (fhat - cosines[k] * hhat) / head_norm[k];
      }
    }

    // Extractor backprop; g_feat is still per-sample, so scale here.
    for (std::size_t fi = 0; fi < arch.feature_dim; ++fi) {
      const double gf = g_feat[fi] * inv_batch;
      g.b2[fi] += gf;
      auto gw2 = g.w2.row(fi);
      for (std::size_t h = 0; h < arch.hidden_dim; ++h) gw2[h] += gf * cache.hidden[h];
    }
    std::fill(g_hidden.begin(), g_hidden.end(), 0.0);
    for (std::size_t fi = 0; fi < arch.feature_dim; ++fi) {
      const auto w2row = p.w2.row(fi);
      for (std::size_t h = 0; h < arch.hidden_dim; ++h) g_hidden[h] += g_feat[fi] * w2row[h];
    }
    for (std::size_t h = 0; h < arch.hidden_dim; ++h) {
      double gz = g_hidden[h] * inv_batch;
      if (arch.activation == Activation::kTanh) {
        gz *= 1.0 - cache.hidden[h] * cache.hidden[h];
      }
      g.b1[h] += gz;
      auto gw1 = g.w1.row(h);
      for (std::size_t i = 0; i < arch.input_dim; ++i) gw1[i] += gz * sample.x[i];
    }
  }
  return out;
}

inline double overall_loss(std::span<const Sample> batch, const ModelState& model,
                           const ModelState* old_model, const LossConfig& cfg) {
  return overall_loss_and_grad(batch, model, old_model, cfg).loss;
}

inline ModelState sgd_step(ModelState model, const Gradients& grads, double lambda) {
  auto& p = model.params;
  if (grads.w1.data.size() != p.w1.data.size() || grads.b1.size() != p.b1.size() ||
      grads.w2.data.size() != p.w2.data.size() || grads.b2.size() != p.b2.size() ||
      grads.head.data.size() != p.head.data.size()) {
    throw Error(ErrorCode::kShape, "gradient shape does not match model");
  }
  if (!(lambda >= 0.0) || !std::isfinite(lambda)) {
    throw Error(ErrorCode::kInvalidParameter, "learning rate must be finite and nonnegative");
  }
  detail::check_finite(grads.w1.data, "gradient");
  detail::check_finite(grads.b1, "gradient");
  detail::check_finite(grads.w2.data, "gradient");
  detail::check_finite(grads.b2, "gradient");
  detail::check_finite(grads.head.data, "gradient");

  auto apply = [lambda](std::vector<double>& param, const std::vector<double>& grad) {
    for (std::size_t i = 0; i < param.size(); ++i) param[i] -= lambda * grad[i];
  };
  apply(p.w1.data, grads.w1.data);
  apply(p.b1, grads.b1);
  apply(p.w2.data, grads.w2.data);
  apply(p.b2, grads.b2);
  apply(p.head.data, grads.head.data);
  return model;
}

// ---------------------------------------------------------------------------
// Prediction.

inline ClassMeans compute_class_means(const ModelState& model, const LabeledDataset& data,
                                      std::span<const int> required_classes = {}) {
  const auto classes = data.classes();
  for (int c : required_classes) {
    if (!std::binary_search(classes.begin(), classes.end(), c)) {
      throw Error(ErrorCode::kInsufficientData, "no samples for class " + std::to_string(c));
    }
  }
  ClassMeans out;
  out.classes = classes;
  out.means.assign(classes.size(), Vector(model.arch.feature_dim, 0.0));
  std::vector<std::size_t> counts(classes.size(), 0);
  for (const auto& s : data.samples) {
    const auto slot = static_cast<std::size_t>(
        std::lower_bound(classes.begin(), classes.end(), s.label) - classes.begin());
    const Vector f = forward_features(model, s.x);
    for (std::size_t i = 0; i < f.size(); ++i) out.means[slot][i] += f[i];
    ++counts[slot];
  }
  for (std::size_t c = 0; c < classes.size(); ++c) {
    auto& m = out.means[c];
    for (auto& v : m) v /= static_cast<double>(counts[c]);
    const double n = detail::norm(m);
    if (n == 0.0) {
      throw Error(ErrorCode::kDegenerateCosine,
                  "class " + std::to_string(classes[c]) + " has a zero mean feature");
    }
    for (auto& v : m) v /= n;
  }
  return out;
}

/// delta = 0: argmax of the cosine head. delta = 1: nearest L2-normalized class
/// mean. Ties resolve to the lowest class id.
inline int predict(const ModelState& model, std::span<const double> x, int delta,
                   const ClassMeans* means) {
  if (delta == 0) {
    const Vector logits = forward_logits(model, x);
    if (logits.empty()) throw Error(ErrorCode::kInsufficientData, "model has no classes");
    return static_cast<int>(std::max_element(logits.begin(), logits.end()) - logits.begin());
  }
  if (delta != 1) throw Error(ErrorCode::kInvalidParameter, "delta must be 0 or 1");
  if (means == nullptr || means->classes.empty()) {
    throw Error(ErrorCode::kInsufficientData, "NCM prediction needs class means");
  }
  Vector f = forward_features(model, x);
  const double n = detail::norm(f);
  if (n == 0.0) throw Error(ErrorCode::kDegenerateCosine, "zero-norm feature vector");
  for (auto& v : f) v /= n;
  int best = means->classes.front();
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < means->classes.size(); ++c) {
    double d = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
      const double diff = f[i] - means->means[c][i];
      d += diff * diff;
    }
    if (d < best_dist || (d == best_dist && means->classes[c] < best)) {
      best_dist = d;
      best = means->classes[c];
    }
  }
  return best;
}

inline double evaluate_accuracy(const ModelState& model, const LabeledDataset& dataset, int delta,
                                const ClassMeans* means) {
  if (dataset.empty()) throw Error(ErrorCode::kEmptyEvaluation, "cannot evaluate on an empty dataset");
  std::size_t correct = 0;
  for (const auto& s : dataset.samples) {
    if (predict(model, s.x, delta, means) == s.label) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(dataset.size());
}

// ---------------------------------------------------------------------------
// Training.

struct TrainConfig {
  double tau = 2.0;
  std::size_t batch_size = 16;
};

/// Mini-batch SGD on the overall objective using the action's (beta, gamma,
/// lambda). A fresh shuffle is drawn from `rng` every epoch.
inline ModelState train_for_epochs(ModelState model, const ModelState* old_model, const Action& action,
                                   const LabeledDataset& train, std::size_t epochs,
                                   const TrainConfig& cfg, Rng& rng) {
  if (epochs == 0) throw Error(ErrorCode::kInvalidParameter, "epochs must be at least 1");
  if (cfg.batch_size == 0) throw Error(ErrorCode::kInvalidParameter, "batch size must be positive");
  if (train.empty()) throw Error(ErrorCode::kInsufficientData, "empty training set");
  validate(action);

  const LossConfig loss_cfg{cfg.tau, old_model ? action.beta : 0.0, old_model ? action.gamma : 0.0};
  std::vector<std::size_t> order(train.size());
  std::vector<Sample> batch;
  batch.reserve(cfg.batch_size);
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      batch.clear();
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      for (std::size_t i = start; i < stop; ++i) batch.push_back(train.samples[order[i]]);
      const auto lg = overall_loss_and_grad(batch, model, old_model, loss_cfg);
      model = sgd_step(std::move(model), lg.grads, action.lambda);
    }
  }
  return model;
}

// ---------------------------------------------------------------------------
// Exemplar selection.

/// Greedy herding: each step adds the unchosen sample that brings the running
/// exemplar mean closest to the class mean (Euclidean, raw features).
inline std::vector<std::size_t> herding_select(const ModelState& model,
                                               std::span<const Sample> class_samples,
                                               std::size_t m) {
  if (m > class_samples.size()) {
    throw Error(ErrorCode::kBudget, "budget " + std::to_string(m) + " exceeds class size " +
                                        std::to_string(class_samples.size()));
  }
  const std::size_t dim = model.arch.feature_dim;
  std::vector<Vector> feats;
  feats.reserve(class_samples.size());
  Vector mu(dim, 0.0);
  for (const auto& s : class_samples) {
    feats.push_back(forward_features(model, s.x));
    for (std::size_t i = 0; i < dim; ++i) mu[i] += feats.back()[i];
  }
  for (auto& v : mu) v /= static_cast<double>(class_samples.size());

  std::vector<std::size_t> chosen;
  std::vector<bool> used(class_samples.size(), false);
  Vector running_sum(dim, 0.0);
  for (std::size_t step = 1; step <= m; ++step) {
    std::size_t best = class_samples.size();
    double best_dist = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < feats.size(); ++j) {
      if (used[j]) continue;
      double d = 0.0;
      for (std::size_t i = 0; i < dim; ++i) {
        const double diff = mu[i] - (running_sum[i] + feats[j][i]) / static_cast<double>(step);
        d += diff * diff;
      }
      if (d < best_dist) {
        best_dist = d;
        best = j;
      }
    }
    used[best] = true;
    chosen.push_back(best);
    for (std::size_t i = 0; i < dim; ++i) running_sum[i] += feats[best][i];
  }
  return chosen;
}

// ---------------------------------------------------------------------------
// Serialization.

inline void to_json(nlohmann::json& j, const Matrix& m) {
  j = nlohmann::json{{"rows", m.rows}, {"cols", m.cols}, {"data", m.data}};
}

inline void from_json(const nlohmann::json& j, Matrix& m) {
  j.at("rows").get_to(m.rows);
  j.at("cols").get_to(m.cols);
  j.at("data").get_to(m.data);
  if (m.data.size() != m.rows * m.cols) throw Error(ErrorCode::kShape, "matrix data size mismatch");
}

inline void to_json(nlohmann::json& j, const ModelState& model) {
  const auto& a = model.arch;
  j = nlohmann::json{
      {"arch",
       {{"input_dim", a.input_dim},
        {"hidden_dim", a.hidden_dim},
        {"feature_dim", a.feature_dim},
        {"activation", a.activation == Activation::kTanh ? "tanh" : "identity"},
        {"cosine_scale", a.cosine_scale}}},
      {"num_classes", model.num_classes()},
      {"w1", model.params.w1},
      {"b1", model.params.b1},
      {"w2", model.params.w2},
      {"b2", model.params.b2},
      {"head", model.params.head}};
}

inline void from_json(const nlohmann::json& j, ModelState& model) {
  try {
    ModelState out;
    const auto& a = j.at("arch");
    a.at("input_dim").get_to(out.arch.input_dim);
    a.at("hidden_dim").get_to(out.arch.hidden_dim);
    a.at("feature_dim").get_to(out.arch.feature_dim);
    const auto act = a.at("activation").get<std::string>();
    if (act == "tanh") {
      out.arch.activation = Activation::kTanh;
    } else if (act == "identity") {
      out.arch.activation = Activation::kIdentity;
    } else {
      throw Error(ErrorCode::kParse, "unknown activation '" + act + "'");
    }
    a.at("cosine_scale").get_to(out.arch.cosine_scale);
    j.at("w1").get_to(out.params.w1);
    j.at("b1").get_to(out.params.b1);
    j.at("w2").get_to(out.params.w2);
    j.at("b2").get_to(out.params.b2);
    j.at("head").get_to(out.params.head);
    const auto& ar = out.arch;
    const auto& p = out.params;
    if (p.w1.rows != ar.hidden_dim || p.w1.cols != ar.input_dim || p.b1.size() != ar.hidden_dim ||
        p.w2.rows != ar.feature_dim || p.w2.cols != ar.hidden_dim || p.b2.size() != ar.feature_dim ||
        p.head.cols != ar.feature_dim || p.head.rows != j.at("num_classes").get<std::size_t>()) {
      throw Error(ErrorCode::kShape, "model parameters do not match architecture");
    }
    model = std::move(out);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("model json: ") + e.what());
  }
}

}  // namespace exp3cil
