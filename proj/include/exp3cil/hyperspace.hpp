#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "exp3cil/error.hpp"

namespace exp3cil {

/// One per-phase hyperparameter tuple: the bandit's arm.
struct Action {
  double beta = 0.0;    // logit-KD weight
  double gamma = 0.0;   // feature-KD weight
  double lambda = 0.01; // SGD learning rate
  int delta = 0;        // 1 = NCM, 0 = FC at prediction time

  bool operator==(const Action&) const = default;
};

inline void validate(const Action& a) {
  if (a.delta != 0 && a.delta != 1) {
    throw Error(ErrorCode::kInvalidParameter, "delta must be 0 or 1");
  }
  if (!(a.lambda > 0.0)) throw Error(ErrorCode::kInvalidParameter, "lambda must be positive");
  if (!(a.beta >= 0.0)) throw Error(ErrorCode::kInvalidParameter, "beta must be nonnegative");
  if (!(a.gamma >= 0.0)) throw Error(ErrorCode::kInvalidParameter, "gamma must be nonnegative");
}

inline std::string to_string(const Action& a) {
  return "(beta=" + std::to_string(a.beta) + ", gamma=" + std::to_string(a.gamma) +
         ", lambda=" + std::to_string(a.lambda) + ", delta=" + std::to_string(a.delta) + ")";
}

struct GridSpec {
  std::vector<double> beta;
  std::vector<double> gamma;
  std::vector<double> lambda;
  std::vector<int> delta;

  bool operator==(const GridSpec&) const = default;

  /// 4 x 3 x 2 x 2 = 48 actions.
  static GridSpec defaults() {
    return GridSpec{{0.0, 0.5, 1.0, 2.0}, {0.0, 1.0, 5.0}, {0.01, 0.05}, {0, 1}};
  }
};

class ActionSpace {
 public:
  /// Cartesian product, beta outermost and delta innermost.
  static ActionSpace build_grid(const GridSpec& spec) {
    auto check_nonempty = [](std::size_t n, const char* name) {
      if (n == 0) throw Error(ErrorCode::kInvalidGrid, std::string("empty ") + name + " list");
    };
    check_nonempty(spec.beta.size(), "beta");
    check_nonempty(spec.gamma.size(), "gamma");
    check_nonempty(spec.lambda.size(), "lambda");
    check_nonempty(spec.delta.size(), "delta");
    for (int d : spec.delta) {
      if (d != 0 && d != 1) {
        throw Error(ErrorCode::kInvalidGrid, "delta value " + std::to_string(d) + " not in {0,1}");
      }
    }
    for (double l : spec.lambda) {
      if (!(l > 0.0)) throw Error(ErrorCode::kInvalidGrid, "lambda values must be positive");
    }
    for (double v : spec.beta) {
      if (!(v >= 0.0)) throw Error(ErrorCode::kInvalidGrid, "beta values must be nonnegative");
    }
    for (double v : spec.gamma) {
      if (!(v >= 0.0)) throw Error(ErrorCode::kInvalidGrid, "gamma values must be nonnegative");
    }

    ActionSpace space;
    space.spec_ = spec;
    for (double b : spec.beta)
      for (double g : spec.gamma)
        for (double l : spec.lambda)
          for (int d : spec.delta) space.actions_.push_back(Action{b, g, l, d});

    for (std::size_t i = 0; i < space.actions_.size(); ++i) {
      for (std::size_t j = 0; j < i; ++j) {
        if (space.actions_[i] == space.actions_[j]) {
          throw Error(ErrorCode::kInvalidGrid, "duplicate action " + to_string(space.actions_[i]));
        }
      }
    }
    if (space.actions_.size() < 2) {
      throw Error(ErrorCode::kInvalidGrid, "action space needs at least 2 actions");
    }
    return space;
  }

  std::size_t size() const { return actions_.size(); }
  const std::vector<Action>& actions() const { return actions_; }
  const GridSpec& grid_spec() const { return spec_; }

  const Action& action_at(std::size_t index) const {
    if (index >= actions_.size()) {
      throw Error(ErrorCode::kIndex, "action index " + std::to_string(index) + " out of range [0, " +
                                         std::to_string(actions_.size()) + ")");
    }
    return actions_[index];
  }

  std::size_t index_of(const Action& action) const {
    for (std::size_t i = 0; i < actions_.size(); ++i) {
      if (actions_[i] == action) return i;
    }
    throw Error(ErrorCode::kNotFound, "action " + to_string(action) + " not in space");
  }

  bool contains(const Action& action) const {
    for (const auto& a : actions_) {
      if (a == action) return true;
    }
    return false;
  }

  bool operator==(const ActionSpace&) const = default;

 private:
  ActionSpace() = default;

  GridSpec spec_;
  std::vector<Action> actions_;
};

inline void to_json(nlohmann::json& j, const Action& a) {
  j = nlohmann::json{{"beta", a.beta}, {"gamma", a.gamma}, {"lambda", a.lambda}, {"delta", a.delta}};
}

inline void from_json(const nlohmann::json& j, Action& a) {
  j.at("beta").get_to(a.beta);
  j.at("gamma").get_to(a.gamma);
  j.at("lambda").get_to(a.lambda);
  j.at("delta").get_to(a.delta);
}

inline void to_json(nlohmann::json& j, const GridSpec& g) {
  j = nlohmann::json{{"beta", g.beta}, {"gamma", g.gamma}, {"lambda", g.lambda}, {"delta", g.delta}};
}

}  // namespace exp3cil
