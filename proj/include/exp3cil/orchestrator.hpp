#pragma once

// Per-phase loop: Exp3 policy learning on rebuilt local environments followed
// by the real incremental training step.

#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "exp3cil/bandit.hpp"
#include "exp3cil/datastream.hpp"
#include "exp3cil/error.hpp"
#include "exp3cil/hyperspace.hpp"
#include "exp3cil/learner.hpp"
#include "exp3cil/random.hpp"

namespace exp3cil {

struct OrchestratorConfig {
  std::size_t iterations = 25;  // T
  std::size_t lookahead = 1;    // n
  std::size_t full_epochs = 20;  // M2
  std::optional<std::size_t> rollout_epochs_override;  // M1, defaults to ceil(0.1 * M2)
  std::size_t local_val_per_class = 2;  // b
  std::size_t policy_update_period = 1;
  std::size_t exemplars_per_class = 5;  // m
  double xi = 0.1;
  double mixing = 0.0;
  TrainConfig train;
  Architecture arch;
  std::size_t phase0_epochs = 20;
  double phase0_lambda = 0.05;

  std::size_t rollout_epochs() const {
    if (rollout_epochs_override) return *rollout_epochs_override;
    return static_cast<std::size_t>(std::ceil(0.1 * static_cast<double>(full_epochs)));
  }

  void validate() const {
    if (iterations < 1) throw Error(ErrorCode::kConfig, "T must be at least 1");
    if (full_epochs < 1) throw Error(ErrorCode::kConfig, "M2 must be at least 1");
    const auto m1 = rollout_epochs();
    if (m1 < 1 || m1 > full_epochs) throw Error(ErrorCode::kConfig, "need M2 >= M1 >= 1");
    if (local_val_per_class < 1) throw Error(ErrorCode::kConfig, "b must be at least 1");
    if (policy_update_period < 1) throw Error(ErrorCode::kConfig, "policy update period must be at least 1");
    if (exemplars_per_class <= local_val_per_class) {
      throw Error(ErrorCode::kConfig, "exemplar budget m must exceed local validation size b");
    }
    if (!(xi > 0.0)) throw Error(ErrorCode::kConfig, "xi must be positive");
    if (!(train.tau > 1.0)) throw Error(ErrorCode::kConfig, "tau must exceed 1");
    if (train.batch_size < 1) throw Error(ErrorCode::kConfig, "batch size must be positive");
    if (phase0_epochs < 1 || !(phase0_lambda > 0.0)) {
      throw Error(ErrorCode::kConfig, "phase-0 epochs and learning rate must be positive");
    }
  }
};

/// Realized test rewards of completed incremental phases (phase >= 1).
class RewardLedger {
 public:
  void append(double reward) {
    if (!(reward >= 0.0 && reward <= 1.0)) {
      throw Error(ErrorCode::kRewardRange, "ledger reward outside [0,1]");
    }
    rewards_.push_back(reward);
  }
  const std::vector<double>& rewards() const { return rewards_; }
  double sum() const { return std::accumulate(rewards_.begin(), rewards_.end(), 0.0); }
  std::size_t size() const { return rewards_.size(); }

 private:
  std::vector<double> rewards_;
};

/// Held-out evaluation data with an access counter; the orchestrator reads it
/// exactly once per phase, after training.
class GuardedTestSet {
 public:
  explicit GuardedTestSet(LabeledDataset data) : data_(std::move(data)) {}

  const LabeledDataset& read() {
    ++reads_;
    return data_;
  }
  std::size_t access_count() const { return reads_; }

 private:
  LabeledDataset data_;
  std::size_t reads_ = 0;
};

struct DecoupledReward {
  double bandit = 0.0;  // mean of the lookahead rewards, fed to Exp3
  double full = 0.0;    // historical sum + lookahead sum
};

inline DecoupledReward decoupled_reward(const std::vector<double>& rollout_rewards, const RewardLedger& ledger) {
  if (rollout_rewards.empty()) throw Error(ErrorCode::kEmptyRollout, "rollout produced no rewards");
  double sum = 0.0;
  for (double r : rollout_rewards) {
    if (!(r >= 0.0 && r <= 1.0)) throw Error(ErrorCode::kRewardRange, "rollout reward outside [0,1]");
    sum += r;
  }
  return {sum / static_cast<double>(rollout_rewards.size()), ledger.sum() + sum};
}

/// Trains on the local split for M1 epochs per sub-step, n+1 sub-steps, each
/// step starting from (and distilling towards) the previous step's model.
/// `initial` is the previous-phase model with its head already grown; `teacher`
/// is the previous-phase model itself.
inline std::vector<double> rollout(const ModelState& initial, const ModelState& teacher, const Action& action,
                                   const LocalEnvironment& local, std::size_t lookahead, std::size_t epochs,
                                   const TrainConfig& train_cfg, Rng& rng) {
  std::vector<double> rewards;
  rewards.reserve(lookahead + 1);
  ModelState current = initial;
  ModelState previous = teacher;
  for (std::size_t j = 0; j <= lookahead; ++j) {
    try {
      ModelState next = train_for_epochs(current, &previous, action, local.train, epochs, train_cfg, rng);
      std::optional<ClassMeans> means;
      if (action.delta == 1) means = compute_class_means(next, local.train);
      rewards.push_back(evaluate_accuracy(next, local.val, action.delta, means ? &*means : nullptr));
      previous = next;
      current = std::move(next);
    } catch (const Error& e) {
      Error::rethrow_with_context(e, "rollout step " + std::to_string(j));
    }
  }
  return rewards;
}

struct IterationRecord {
  std::size_t iteration = 0;
  std::size_t action_index = 0;
  double probability = 0.0;  // p(a) at selection time
  double reward = 0.0;       // normalized reward fed to Exp3
  double full_reward = 0.0;  // historical + lookahead sum
  std::vector<double> rollout_rewards;
};

struct PolicyRound {
  PolicyState policy;
  std::vector<IterationRecord> trace;
};

/// Exp3 iterations on freshly rebuilt local environments. `rollout_fn` is called
/// as rollout_fn(action, local_env, rng) and returns the n+1 local rewards.
template <typename RolloutFn>
PolicyRound policy_learning_round(const LabeledDataset& train_data, PolicyState policy, const ActionSpace& space,
                                  const OrchestratorConfig& cfg, const RewardLedger& ledger, std::uint64_t seed,
                                  RolloutFn&& rollout_fn) {
  if (policy.num_actions() != space.size()) {
    throw Error(ErrorCode::kInvalidActionSpace, "policy size does not match action space");
  }
  PolicyRound round;
  round.trace.reserve(cfg.iterations);
  for (std::size_t t = 0; t < cfg.iterations; ++t) {
    try {
      const LocalEnvironment local =
          split_local(train_data, cfg.local_val_per_class, derive_seed(seed, {stream::kSplit, t}));
      Rng select_rng = make_rng(seed, {stream::kPolicy, t});
      const auto p = policy_distribution(policy);
      const std::size_t chosen = sample_from(p, select_rng);
      Rng rollout_rng = make_rng(seed, {stream::kRollout, t});
      const std::vector<double> rewards = rollout_fn(space.action_at(chosen), local, rollout_rng);
      const DecoupledReward r = decoupled_reward(rewards, ledger);
      policy = update_weight(std::move(policy), chosen, r.bandit);
      round.trace.push_back(IterationRecord{t, chosen, p[chosen], r.bandit, r.full, rewards});
      spdlog::debug("  iter {:>3}: action {:>3} p={:.4f} reward={:.4f}", t, chosen, p[chosen], r.bandit);
    } catch (const Error& e) {
      Error::rethrow_with_context(e, "policy iteration " + std::to_string(t));
    }
  }
  round.policy = std::move(policy);
  return round;
}

struct PhaseResult {
  std::size_t phase = 0;
  std::optional<std::size_t> action_index;  // empty for phase 0
  Action action;
  double accuracy = 0.0;
  std::size_t num_classes = 0;
  bool policy_learned = false;
  std::size_t test_reads_before_eval = 0;
  PolicyState policy;
  std::vector<IterationRecord> trace;
};

struct PhaseOutcome {
  ModelState model;
  ExemplarStore exemplars;
  PolicyState policy;
  PhaseResult result;
};

inline std::size_t class_count_after(const ModelState& prev, const LabeledDataset& data) {
  std::size_t k = prev.num_classes();
  for (const auto& s : data.samples) k = std::max(k, static_cast<std::size_t>(s.label) + 1);
  return k;
}

/// Phase 0: plain cross-entropy training with the FC head, no policy.
inline PhaseOutcome run_base_phase(const LabeledDataset& data, GuardedTestSet& test, const OrchestratorConfig& cfg,
                                   const PolicyState& policy, std::uint64_t seed) {
  Rng init_rng = make_rng(seed, {stream::kInit});
  ModelState model = make_model(cfg.arch, class_count_after(ModelState{cfg.arch, {}}, data), init_rng);
  const Action base{0.0, 0.0, cfg.phase0_lambda, 0};
  Rng train_rng = make_rng(seed, {stream::kTrain, 0});
  model = train_for_epochs(std::move(model), nullptr, base, data, cfg.phase0_epochs, cfg.train, train_rng);

  PhaseOutcome out;
  out.result.phase = 0;
  out.result.action = base;
  out.result.num_classes = model.num_classes();
  out.result.test_reads_before_eval = test.access_count();
  if (test.access_count() != 0) throw Error(ErrorCode::kProtocol, "test set read before phase-0 evaluation");
  out.result.accuracy = evaluate_accuracy(model, test.read(), 0, nullptr);
  out.exemplars.per_class_budget = cfg.exemplars_per_class;
  out.exemplars = update_exemplars(std::move(out.exemplars), model, data);
  out.result.policy = policy;
  out.policy = policy;
  out.model = std::move(model);
  return out;
}

/// One incremental phase i >= 1. `learn_policy` false skips the Exp3 round
/// entirely (fixed-hyperparameter baselines); the final action is still drawn
/// from `policy`, so a delta policy reproduces a fixed action exactly.
inline PhaseOutcome run_phase(std::size_t phase, const ModelState& theta_prev, const ExemplarStore& exemplars,
                              const LabeledDataset& new_data, GuardedTestSet& test, PolicyState policy,
                              const ActionSpace& space, const OrchestratorConfig& cfg, RewardLedger& ledger,
                              std::uint64_t seed, bool learn_policy = true) {
  if (phase < 1) throw Error(ErrorCode::kInvalidParameter, "run_phase handles phases >= 1");
  try {
    const LabeledDataset train_data = concat(exemplars.as_dataset(new_data.dim), new_data);
    Rng head_rng = make_rng(seed, {stream::kHead, phase});
    const ModelState initial = grow_head(theta_prev, class_count_after(theta_prev, train_data), head_rng);

    PhaseOutcome out;
    out.result.phase = phase;
    if (learn_policy && phase % cfg.policy_update_period == 0) {
      auto round = policy_learning_round(
          train_data, std::move(policy), space, cfg, ledger, derive_seed(seed, {stream::kPolicy, phase}),
          [&](const Action& action, const LocalEnvironment& local, Rng& rng) {
            return rollout(initial, theta_prev, action, local, cfg.lookahead, cfg.rollout_epochs(), cfg.train, rng);
          });
      policy = std::move(round.policy);
      out.result.trace = std::move(round.trace);
      out.result.policy_learned = true;
    }

    Rng action_rng = make_rng(seed, {stream::kAction, phase});
    const std::size_t chosen = sample_action(policy, action_rng);
    const Action action = space.action_at(chosen);

    Rng train_rng = make_rng(seed, {stream::kTrain, phase});
    ModelState model = train_for_epochs(initial, &theta_prev, action, train_data, cfg.full_epochs, cfg.train, train_rng);

    std::optional<ClassMeans> means;
    if (action.delta == 1) means = compute_class_means(model, train_data);
    out.result.test_reads_before_eval = test.access_count();
    if (test.access_count() != 0) {
      throw Error(ErrorCode::kProtocol, "test set read before final evaluation");
    }
    out.result.accuracy = evaluate_accuracy(model, test.read(), action.delta, means ? &*means : nullptr);
    ledger.append(out.result.accuracy);

    out.exemplars = update_exemplars(exemplars, model, new_data);
    out.result.action_index = chosen;
    out.result.action = action;
    out.result.num_classes = model.num_classes();
    out.result.policy = policy;
    out.policy = std::move(policy);
    out.model = std::move(model);
    return out;
  } catch (const Error& e) {
    Error::rethrow_with_context(e, "phase " + std::to_string(phase));
  }
}

// ---------------------------------------------------------------------------
// Serialization and checkpoints.

inline void to_json(nlohmann::json& j, const IterationRecord& r) {
  j = nlohmann::json{{"iteration", r.iteration},     {"action_index", r.action_index},
                     {"probability", r.probability}, {"reward", r.reward},
                     {"full_reward", r.full_reward}, {"rollout_rewards", r.rollout_rewards}};
}

inline void to_json(nlohmann::json& j, const PhaseResult& r) {
  j = nlohmann::json{{"phase", r.phase},
                     {"action", r.action},
                     {"accuracy", r.accuracy},
                     {"num_classes", r.num_classes},
                     {"policy_learned", r.policy_learned},
                     {"test_reads_before_eval", r.test_reads_before_eval},
                     {"policy", r.policy},
                     {"trace", r.trace}};
  j["action_index"] = r.action_index ? nlohmann::json(*r.action_index) : nlohmann::json(nullptr);
}

inline void write_json_file(const std::filesystem::path& path, const nlohmann::json& j) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIo, "cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

/// Writes phase_<i>/{model,policy,result}.json under `dir`.
inline void write_checkpoint(const std::filesystem::path& dir, const PhaseOutcome& outcome) {
  const auto phase_dir = dir / ("phase_" + std::to_string(outcome.result.phase));
  write_json_file(phase_dir / "model.json", outcome.model);
  write_json_file(phase_dir / "policy.json", outcome.policy);
  write_json_file(phase_dir / "result.json", outcome.result);
}

// ---------------------------------------------------------------------------
// Whole experiment.

struct ExperimentResult {
  std::vector<PhaseResult> phases;
  double average_accuracy = 0.0;
  std::vector<double> ledger;
  ModelState final_model;
  PolicyState final_policy;
  std::vector<ModelState> models;  // end-of-phase models, when requested
  double elapsed_seconds = 0.0;
};

struct ExperimentOptions {
  /// Policy at the start of phase 1. Empty means uniform Exp3 initialization.
  std::optional<PolicyState> initial_policy;
  bool learn_policy = true;
  bool keep_models = false;
  std::optional<std::filesystem::path> checkpoint_dir;
};

inline ExperimentResult run_experiment(const PhaseSchedule& schedule, const PhaseData& data,
                                       const OrchestratorConfig& cfg, const ActionSpace& space, std::uint64_t seed,
                                       const ExperimentOptions& options = {}) {
  cfg.validate();
  if (data.train.size() != schedule.phase_count() || data.test.size() != schedule.phase_count()) {
    throw Error(ErrorCode::kShape, "phase data does not match schedule");
  }
  const auto start = std::chrono::steady_clock::now();
  ExperimentResult result;

  PolicyState policy = options.initial_policy ? *options.initial_policy : init_policy(space.size(), cfg.xi, cfg.mixing);
  if (policy.num_actions() != space.size()) {
    throw Error(ErrorCode::kInvalidActionSpace, "initial policy does not match action space");
  }

  LabeledDataset seen_test{data.test.front().dim, {}};
  seen_test = concat(seen_test, data.test[0]);
  GuardedTestSet test0(seen_test);
  PhaseOutcome outcome = run_base_phase(data.train[0], test0, cfg, policy, seed);
  spdlog::info("phase 0: {} classes, accuracy {:.4f}", outcome.result.num_classes, outcome.result.accuracy);
  if (options.checkpoint_dir) write_checkpoint(*options.checkpoint_dir, outcome);
  result.phases.push_back(outcome.result);
  if (options.keep_models) result.models.push_back(outcome.model);

  RewardLedger ledger;
  for (std::size_t i = 1; i < schedule.phase_count(); ++i) {
    seen_test = concat(seen_test, data.test[i]);
    GuardedTestSet test(seen_test);
    outcome = run_phase(i, outcome.model, outcome.exemplars, data.train[i], test, std::move(outcome.policy), space,
                        cfg, ledger, seed, options.learn_policy);
    spdlog::info("phase {}: {} classes, action {} {}, accuracy {:.4f}", i, outcome.result.num_classes,
                 *outcome.result.action_index, to_string(outcome.result.action), outcome.result.accuracy);
    if (options.checkpoint_dir) write_checkpoint(*options.checkpoint_dir, outcome);
    result.phases.push_back(outcome.result);
    if (options.keep_models) result.models.push_back(outcome.model);
  }

  double total = 0.0;
  for (const auto& p : result.phases) total += p.accuracy;
  result.average_accuracy = total / static_cast<double>(result.phases.size());
  result.ledger = ledger.rewards();
  result.final_model = std::move(outcome.model);
  result.final_policy = std::move(outcome.policy);
  result.elapsed_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace exp3cil
