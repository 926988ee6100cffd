#pragma once

// Exp3 policy over a finite action space. Weights are kept in the log domain so
// that repeated exponential updates cannot overflow.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "exp3cil/error.hpp"
#include "exp3cil/random.hpp"

namespace exp3cil {

struct PolicyState {
  std::vector<double> log_weights;
  double xi = 0.1;
  std::uint64_t update_count = 0;
  /// Uniform-exploration mixing coefficient; 0 keeps the pure w/|w|_1 policy.
  double mixing = 0.0;

  std::size_t num_actions() const { return log_weights.size(); }
  bool operator==(const PolicyState&) const = default;
};

inline PolicyState init_policy(std::size_t num_actions, double xi, double mixing = 0.0) {
  if (num_actions < 2) {
    throw Error(ErrorCode::kInvalidActionSpace,
                "policy needs at least 2 actions, got " + std::to_string(num_actions));
  }
  if (!(xi > 0.0) || !std::isfinite(xi)) {
    throw Error(ErrorCode::kInvalidParameter, "xi must be positive, got " + std::to_string(xi));
  }
  if (!(mixing >= 0.0 && mixing <= 1.0)) {
    throw Error(ErrorCode::kInvalidParameter, "mixing must lie in [0,1]");
  }
  return PolicyState{std::vector<double>(num_actions, 0.0), xi, 0, mixing};
}

/// A policy whose whole mass sits on `index`. Other arms keep a finite log-weight
/// far enough below that exp() underflows to exactly zero.
inline PolicyState forced_policy(std::size_t num_actions, std::size_t index, double xi) {
  auto policy = init_policy(num_actions, xi);
  if (index >= num_actions) {
    throw Error(ErrorCode::kIndex, "forced action " + std::to_string(index) + " out of range");
  }
  constexpr double kGap = 1e4;
  std::fill(policy.log_weights.begin(), policy.log_weights.end(), -kGap);
  policy.log_weights[index] = 0.0;
  return policy;
}

inline std::vector<double> policy_distribution(const PolicyState& policy) {
  const auto& lw = policy.log_weights;
  const double max_lw = *std::max_element(lw.begin(), lw.end());
  std::vector<double> p(lw.size());
  double total = 0.0;
  for (std::size_t i = 0; i < lw.size(); ++i) {
    p[i] = std::exp(lw[i] - max_lw);
    total += p[i];
  }
  const double uniform = 1.0 / static_cast<double>(lw.size());
  for (auto& v : p) {
    v /= total;
    if (policy.mixing > 0.0) v = (1.0 - policy.mixing) * v + policy.mixing * uniform;
  }
  return p;
}

inline std::size_t sample_from(const std::vector<double>& p, Rng& rng) {
  const double u = std::generate_canonical<double, 53>(rng);
  double cumulative = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    cumulative += p[i];
    if (u < cumulative) return i;
  }
  // Rounding left the cumulative sum a hair under 1: fall back to the last
  // arm carrying mass.
  for (std::size_t i = p.size(); i-- > 0;) {
    if (p[i] > 0.0) return i;
  }
  return 0;
}

inline std::size_t sample_action(const PolicyState& policy, Rng& rng) {
  return sample_from(policy_distribution(policy), rng);
}

inline PolicyState update_weight(PolicyState policy, std::size_t chosen, double reward) {
  if (chosen >= policy.num_actions()) {
    throw Error(ErrorCode::kIndex, "chosen action " + std::to_string(chosen) + " out of range");
  }
  if (!(reward >= 0.0 && reward <= 1.0)) {
    throw Error(ErrorCode::kRewardRange,
                "reward " + std::to_string(reward) + " outside [0,1]; normalize upstream");
  }
  const double p = policy_distribution(policy)[chosen];
  if (!(p > 0.0)) {
    throw Error(ErrorCode::kImportanceWeight,
                "action " + std::to_string(chosen) + " has zero probability");
  }
  const double next = policy.log_weights[chosen] + policy.xi * reward / p;
  if (!std::isfinite(next)) {
    throw Error(ErrorCode::kNumeric, "log-weight overflow on action " + std::to_string(chosen));
  }
  policy.log_weights[chosen] = next;
  ++policy.update_count;
  return policy;
}

inline void to_json(nlohmann::json& j, const PolicyState& policy) {
  j = nlohmann::json{{"xi", policy.xi},
                     {"update_count", policy.update_count},
                     {"mixing", policy.mixing},
                     {"log_weights", policy.log_weights}};
}

inline void from_json(const nlohmann::json& j, PolicyState& policy) {
  try {
    PolicyState out;
    j.at("xi").get_to(out.xi);
    j.at("update_count").get_to(out.update_count);
    out.mixing = j.value("mixing", 0.0);
    j.at("log_weights").get_to(out.log_weights);
    auto checked = init_policy(out.log_weights.size(), out.xi, out.mixing);
    for (double lw : out.log_weights) {
      if (!std::isfinite(lw)) throw Error(ErrorCode::kNumeric, "non-finite log-weight");
    }
    checked.log_weights = std::move(out.log_weights);
    checked.update_count = out.update_count;
    policy = std::move(checked);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("policy json: ") + e.what());
  }
}

}  // namespace exp3cil
