#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "exp3cil/dataset.hpp"
#include "exp3cil/learner.hpp"
#include "exp3cil/random.hpp"

namespace testutil {

inline exp3cil::Architecture small_arch(std::size_t in = 4, std::size_t hidden = 5, std::size_t feat = 3) {
  exp3cil::Architecture a;
  a.input_dim = in;
  a.hidden_dim = hidden;
  a.feature_dim = feat;
  return a;
}

inline std::vector<double> random_vector(std::size_t n, exp3cil::Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> nd(0.0, scale);
  std::vector<double> v(n);
  for (auto& x : v) x = nd(rng);
  return v;
}

inline exp3cil::LabeledDataset random_dataset(std::size_t dim, int classes, std::size_t per_class,
                                              exp3cil::Rng& rng) {
  exp3cil::LabeledDataset d{dim, {}};
  for (int c = 0; c < classes; ++c) {
    for (std::size_t i = 0; i < per_class; ++i) d.add({random_vector(dim, rng), c});
  }
  return d;
}

/// Central finite difference of the overall loss along parameter k.
inline double numeric_grad(const std::vector<exp3cil::Sample>& batch, exp3cil::ModelState model,
                           const exp3cil::ModelState* old, const exp3cil::LossConfig& cfg, std::size_t k,
                           double eps = 1e-5) {
  const double orig = model.params.at(k);
  model.params.at(k) = orig + eps;
  const double up = exp3cil::overall_loss(batch, model, old, cfg);
  model.params.at(k) = orig - eps;
  const double down = exp3cil::overall_loss(batch, model, old, cfg);
  return (up - down) / (2.0 * eps);
}

inline bool grad_close(double analytic, double numeric) {
  return std::abs(analytic - numeric) <= std::max(1e-6, 1e-4 * std::max(std::abs(analytic), std::abs(numeric)));
}

}  // namespace testutil
