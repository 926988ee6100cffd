#pragma once

// Experiment runner: configuration, fixed/online/ablation/grid-search modes,
// statistics and machine-readable reports.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <type_traits>
#include <utility>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <fmt/format.h>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include "exp3cil/bandit.hpp"
#include "exp3cil/datastream.hpp"
#include "exp3cil/error.hpp"
#include "exp3cil/hyperspace.hpp"
#include "exp3cil/learner.hpp"
#include "exp3cil/orchestrator.hpp"

namespace exp3cil {

enum class Mode { kOnline, kFixed, kGridSearch, kAblation };

inline std::string_view to_string(Mode m) {
  switch (m) {
    case Mode::kOnline: return "online";
    case Mode::kFixed: return "fixed";
    case Mode::kGridSearch: return "grid-search";
    case Mode::kAblation: return "ablation";
  }
  return "unknown";
}

/// Which hyperparameter groups the policy may vary under ablation; the others
/// are frozen at the fixed-baseline values.
struct AblationSubset {
  bool kd = false;  // (beta, gamma)
  bool delta = false;
  bool lambda = false;

  bool any() const { return kd || delta || lambda; }
  std::string name() const {
    std::vector<std::string> parts;
    if (kd) parts.push_back("kd");
    if (delta) parts.push_back("delta");
    if (lambda) parts.push_back("lambda");
    std::string out;
    for (std::size_t i = 0; i < parts.size(); ++i) out += (i ? "+" : "") + parts[i];
    return out;
  }
};

inline AblationSubset parse_subset(std::string_view text) {
  AblationSubset s;
  std::string token;
  auto flush = [&]() {
    if (token.empty()) return;
    if (token == "kd" || token == "beta_gamma" || token == "beta,gamma") {
      s.kd = true;
    } else if (token == "delta") {
      s.delta = true;
    } else if (token == "lambda") {
      s.lambda = true;
    } else {
      throw Error(ErrorCode::kConfig, "unknown ablation group '" + token + "' (use kd, delta, lambda)");
    }
    token.clear();
  };
  for (char c : text) {
    if (c == '+' || c == ',' || c == ' ') {
      flush();
    } else {
      token.push_back(c);
    }
  }
  flush();
  if (!s.any()) throw Error(ErrorCode::kConfig, "ablation subset is empty");
  return s;
}

inline Mode parse_mode(std::string_view text, std::optional<AblationSubset>& subset) {
  if (text == "online") return Mode::kOnline;
  if (text == "fixed") return Mode::kFixed;
  if (text == "grid-search" || text == "grid_search_fixed" || text == "grid_search") return Mode::kGridSearch;
  if (text == "ablation") return Mode::kAblation;
  if (text.starts_with("ablation:")) {
    subset = parse_subset(text.substr(9));
    return Mode::kAblation;
  }
  throw Error(ErrorCode::kConfig, "unknown mode '" + std::string(text) + "'");
}

struct DatasetSpec {
  std::string source = "synthetic";  // or "csv"
  std::size_t total_classes = 20;
  SyntheticSpec synthetic;
  std::string train_csv;
  std::string test_csv;
  std::optional<std::uint64_t> class_order_seed;
};

struct ExperimentConfig {
  DatasetSpec data;
  std::size_t num_phases = 5;
  std::vector<Setting> settings{Setting::kTfh, Setting::kTfs};
  GridSpec grid = GridSpec::defaults();
  OrchestratorConfig orchestrator;
  std::vector<std::uint64_t> seeds{1};
  Mode mode = Mode::kOnline;
  Action fixed_action{1.0, 0.0, 0.05, 1};
  std::optional<AblationSubset> ablation;
  std::size_t workers = 1;
  bool checkpoints = false;
  std::string label;

  std::string method_name() const {
    if (!label.empty()) return label;
    if (mode == Mode::kAblation && ablation) return "ablation:" + ablation->name();
    return std::string(to_string(mode));
  }

  void validate() const {
    orchestrator.validate();
    if (seeds.empty()) throw Error(ErrorCode::kConfig, "seed list is empty");
    if (settings.empty()) throw Error(ErrorCode::kConfig, "no setting selected");
    if (workers == 0) throw Error(ErrorCode::kConfig, "workers must be at least 1");
    if (data.source != "synthetic" && data.source != "csv") {
      throw Error(ErrorCode::kConfig, "data.source must be synthetic or csv");
    }
    if (data.source == "csv" && data.train_csv.empty()) {
      throw Error(ErrorCode::kConfig, "csv source needs data.train_csv");
    }
    if (orchestrator.arch.input_dim != data.synthetic.dim) {
      throw Error(ErrorCode::kConfig, "model input_dim must equal data.dim");
    }
    if (mode == Mode::kAblation && !ablation) {
      throw Error(ErrorCode::kConfig, "ablation mode needs a subset (ablation.subset or mode ablation:<subset>)");
    }
    try {
      exp3cil::validate(fixed_action);
    } catch (const Error& e) {
      Error::rethrow_with_context(e, "fixed action");
    }
  }
};

// ---------------------------------------------------------------------------
// Config file: INI-style sections of key = value.

namespace detail {

template <typename T>
std::vector<T> parse_list(const std::string& text, const std::string& key) {
  std::vector<T> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) continue;
    item = item.substr(b, e - b + 1);
    std::istringstream is(item);
    T value{};
    if (!(is >> value) || !is.eof()) throw Error(ErrorCode::kConfig, "bad value '" + item + "' in " + key);
    out.push_back(value);
  }
  if (out.empty()) throw Error(ErrorCode::kConfig, key + " is empty");
  return out;
}

inline const std::set<std::string>& known_keys() {
  static const std::set<std::string> keys{
      "data.source",          "data.total_classes",     "data.dim",
      "data.per_class_train", "data.per_class_test",    "data.separation",
      "data.train_csv",       "data.test_csv",          "data.class_order_seed",
      "schedule.phases",      "schedule.setting",       "grid.beta",
      "grid.gamma",           "grid.lambda",            "grid.delta",
      "policy.T",             "policy.n",               "policy.xi",
      "policy.mixing",        "policy.b",               "policy.update_period",
      "train.M2",             "train.M1",               "train.batch_size",
      "train.tau",            "train.exemplars",        "train.phase0_epochs",
      "train.phase0_lambda",  "model.hidden_dim",       "model.feature_dim",
      "model.activation",     "model.cosine_scale",     "run.mode",
      "run.seeds",            "run.workers",            "run.label",
      "run.checkpoints",      "fixed.beta",             "fixed.gamma",
      "fixed.lambda",         "fixed.delta",            "ablation.subset"};
  return keys;
}

/// Overwrites `out` when `key` is present; malformed values are errors rather
/// than silently falling back to the default.
template <typename T>
void read_value(const boost::property_tree::ptree& pt, const std::string& key, T& out) {
  const auto text = pt.get_optional<std::string>(key);
  if (!text) return;
  if constexpr (std::is_same_v<T, std::string>) {
    out = *text;
  } else if constexpr (std::is_same_v<T, bool>) {
    if (*text == "true" || *text == "1") {
      out = true;
    } else if (*text == "false" || *text == "0") {
      out = false;
    } else {
      throw Error(ErrorCode::kConfig, key + " must be true or false, got '" + *text + "'");
    }
  } else {
    std::istringstream is(*text);
    T value{};
    if (!(is >> value) || !(is >> std::ws).eof()) {
      throw Error(ErrorCode::kConfig, "bad value '" + *text + "' for " + key);
    }
    if constexpr (std::is_unsigned_v<T>) {
      if (text->find('-') != std::string::npos) throw Error(ErrorCode::kConfig, key + " must be nonnegative");
    }
    out = value;
  }
}

}  // namespace detail

inline std::vector<Setting> parse_settings(std::string_view text) {
  if (text == "both") return {Setting::kTfh, Setting::kTfs};
  return {parse_setting(text)};
}

inline ExperimentConfig parse_config(const boost::property_tree::ptree& pt) {
  for (const auto& [section, body] : pt) {
    if (body.empty()) {
      throw Error(ErrorCode::kConfig, "key '" + section + "' must live inside a [section]");
    }
    for (const auto& [key, value] : body) {
      const auto full = section + "." + key;
      if (!detail::known_keys().contains(full)) throw Error(ErrorCode::kConfig, "unknown config key '" + full + "'");
    }
  }

  ExperimentConfig cfg;
  try {
    auto& d = cfg.data;
    detail::read_value(pt, "data.source", d.source);
    detail::read_value(pt, "data.total_classes", d.total_classes);
    detail::read_value(pt, "data.dim", d.synthetic.dim);
    detail::read_value(pt, "data.per_class_train", d.synthetic.per_class_train);
    detail::read_value(pt, "data.per_class_test", d.synthetic.per_class_test);
    detail::read_value(pt, "data.separation", d.synthetic.separation);
    detail::read_value(pt, "data.train_csv", d.train_csv);
    detail::read_value(pt, "data.test_csv", d.test_csv);
    if (pt.get_optional<std::string>("data.class_order_seed")) {
      std::uint64_t v = 0;
      detail::read_value(pt, "data.class_order_seed", v);
      d.class_order_seed = v;
    }

    detail::read_value(pt, "schedule.phases", cfg.num_phases);
    cfg.settings = parse_settings(pt.get<std::string>("schedule.setting", "both"));

    if (auto v = pt.get_optional<std::string>("grid.beta")) cfg.grid.beta = detail::parse_list<double>(*v, "grid.beta");
    if (auto v = pt.get_optional<std::string>("grid.gamma")) cfg.grid.gamma = detail::parse_list<double>(*v, "grid.gamma");
    if (auto v = pt.get_optional<std::string>("grid.lambda")) cfg.grid.lambda = detail::parse_list<double>(*v, "grid.lambda");
    if (auto v = pt.get_optional<std::string>("grid.delta")) cfg.grid.delta = detail::parse_list<int>(*v, "grid.delta");

    auto& o = cfg.orchestrator;
    detail::read_value(pt, "policy.T", o.iterations);
    detail::read_value(pt, "policy.n", o.lookahead);
    detail::read_value(pt, "policy.xi", o.xi);
    detail::read_value(pt, "policy.mixing", o.mixing);
    detail::read_value(pt, "policy.b", o.local_val_per_class);
    detail::read_value(pt, "policy.update_period", o.policy_update_period);
    detail::read_value(pt, "train.M2", o.full_epochs);
    if (pt.get_optional<std::string>("train.M1")) {
      std::size_t v = 0;
      detail::read_value(pt, "train.M1", v);
      o.rollout_epochs_override = v;
    }
    detail::read_value(pt, "train.batch_size", o.train.batch_size);
    detail::read_value(pt, "train.tau", o.train.tau);
    detail::read_value(pt, "train.exemplars", o.exemplars_per_class);
    detail::read_value(pt, "train.phase0_epochs", o.phase0_epochs);
    detail::read_value(pt, "train.phase0_lambda", o.phase0_lambda);
    o.arch.input_dim = d.synthetic.dim;
    detail::read_value(pt, "model.hidden_dim", o.arch.hidden_dim);
    detail::read_value(pt, "model.feature_dim", o.arch.feature_dim);
    detail::read_value(pt, "model.cosine_scale", o.arch.cosine_scale);
    const auto act = pt.get<std::string>("model.activation", "tanh");
    if (act == "tanh") {
      o.arch.activation = Activation::kTanh;
    } else if (act == "identity") {
      o.arch.activation = Activation::kIdentity;
    } else {
      throw Error(ErrorCode::kConfig, "model.activation must be tanh or identity");
    }

    if (auto v = pt.get_optional<std::string>("ablation.subset")) cfg.ablation = parse_subset(*v);
    cfg.mode = parse_mode(pt.get<std::string>("run.mode", "online"), cfg.ablation);
    if (auto v = pt.get_optional<std::string>("run.seeds")) cfg.seeds = detail::parse_list<std::uint64_t>(*v, "run.seeds");
    detail::read_value(pt, "run.workers", cfg.workers);
    detail::read_value(pt, "run.label", cfg.label);
    detail::read_value(pt, "run.checkpoints", cfg.checkpoints);

    detail::read_value(pt, "fixed.beta", cfg.fixed_action.beta);
    detail::read_value(pt, "fixed.gamma", cfg.fixed_action.gamma);
    detail::read_value(pt, "fixed.lambda", cfg.fixed_action.lambda);
    detail::read_value(pt, "fixed.delta", cfg.fixed_action.delta);
  } catch (const boost::property_tree::ptree_error& e) {
    throw Error(ErrorCode::kConfig, e.what());
  }
  return cfg;
}

inline ExperimentConfig load_config(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw Error(ErrorCode::kIo, "config file '" + path.string() + "' does not exist");
  }
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::ini_parser::read_ini(path.string(), pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw Error(ErrorCode::kConfig, "cannot parse '" + path.string() + "': " + e.what());
  }
  return parse_config(pt);
}

inline ExperimentConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::ini_parser::read_ini(in, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw Error(ErrorCode::kConfig, std::string("cannot parse config: ") + e.what());
  }
  return parse_config(pt);
}

inline nlohmann::json to_json(const ExperimentConfig& cfg) {
  const auto& o = cfg.orchestrator;
  nlohmann::json data{{"source", cfg.data.source},
                      {"total_classes", cfg.data.total_classes},
                      {"dim", cfg.data.synthetic.dim},
                      {"per_class_train", cfg.data.synthetic.per_class_train},
                      {"per_class_test", cfg.data.synthetic.per_class_test},
                      {"separation", cfg.data.synthetic.separation},
                      {"train_csv", cfg.data.train_csv},
                      {"test_csv", cfg.data.test_csv},
                      {"class_order_seed", cfg.data.class_order_seed ? nlohmann::json(*cfg.data.class_order_seed)
                                                                     : nlohmann::json(nullptr)}};
  std::vector<std::string> settings;
  for (auto s : cfg.settings) settings.emplace_back(to_string(s));
  nlohmann::json j{
      {"data", data},
      {"schedule", {{"phases", cfg.num_phases}, {"settings", settings}}},
      {"grid", cfg.grid},
      {"policy",
       {{"T", o.iterations},
        {"n", o.lookahead},
        {"xi", o.xi},
        {"mixing", o.mixing},
        {"b", o.local_val_per_class},
        {"update_period", o.policy_update_period}}},
      {"train",
       {{"M2", o.full_epochs},
        {"M1", o.rollout_epochs()},
        {"batch_size", o.train.batch_size},
        {"tau", o.train.tau},
        {"exemplars", o.exemplars_per_class},
        {"phase0_epochs", o.phase0_epochs},
        {"phase0_lambda", o.phase0_lambda}}},
      {"model",
       {{"input_dim", o.arch.input_dim},
        {"hidden_dim", o.arch.hidden_dim},
        {"feature_dim", o.arch.feature_dim},
        {"activation", o.arch.activation == Activation::kTanh ? "tanh" : "identity"},
        {"cosine_scale", o.arch.cosine_scale}}},
      {"run",
       {{"mode", std::string(to_string(cfg.mode))},
        {"method", cfg.method_name()},
        {"seeds", cfg.seeds},
        {"workers", cfg.workers},
        {"checkpoints", cfg.checkpoints}}},
      {"fixed", cfg.fixed_action}};
  j["ablation"] = cfg.ablation ? nlohmann::json(cfg.ablation->name()) : nlohmann::json(nullptr);
  return j;
}

// ---------------------------------------------------------------------------
// Action spaces per mode.

/// Cartesian product in grid order, without the cardinality check of
/// ActionSpace (a one-action grid is a valid fixed-search candidate list).
inline std::vector<Action> grid_actions(const GridSpec& g) {
  std::vector<Action> out;
  for (double b : g.beta)
    for (double c : g.gamma)
      for (double l : g.lambda)
        for (int d : g.delta) out.push_back(Action{b, c, l, d});
  if (out.empty()) throw Error(ErrorCode::kInvalidGrid, "grid has an empty dimension");
  return out;
}

/// Grid extended (per dimension) so that it contains `action`. A grid that
/// would hold a single action also gets the other delta value, since a policy
/// needs two arms; the forced policy never selects it.
inline ActionSpace space_containing(const GridSpec& grid, const Action& action) {
  GridSpec g = grid;
  auto add = [](auto& values, auto v) {
    if (std::find(values.begin(), values.end(), v) == values.end()) {
      values.push_back(v);
      std::sort(values.begin(), values.end());
    }
  };
  add(g.beta, action.beta);
  add(g.gamma, action.gamma);
  add(g.lambda, action.lambda);
  add(g.delta, action.delta);
  if (g.beta.size() * g.gamma.size() * g.lambda.size() * g.delta.size() < 2) add(g.delta, 1 - action.delta);
  return ActionSpace::build_grid(g);
}

/// Optimized groups span the configured grid; frozen groups hold the fixed
/// baseline's value.
inline GridSpec ablation_grid(const GridSpec& grid, const Action& fixed, const AblationSubset& subset) {
  GridSpec g = grid;
  if (!subset.kd) {
    g.beta = {fixed.beta};
    g.gamma = {fixed.gamma};
  }
  if (!subset.delta) g.delta = {fixed.delta};
  if (!subset.lambda) g.lambda = {fixed.lambda};
  return g;
}

// ---------------------------------------------------------------------------
// Runs and statistics.

struct RunRecord {
  std::string method;
  Setting setting = Setting::kTfh;
  std::uint64_t seed = 0;
  ExperimentResult result;
};

struct SettingStats {
  std::vector<std::uint64_t> seeds;
  std::vector<double> per_seed;  // average accuracy across phases
  double mean = 0.0;
  double std = 0.0;
};

/// Sample standard deviation (n-1); 0 for a single value.
inline double sample_std(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double mean = 0.0;
  for (double x : v) mean += x;
  mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - mean) * (x - mean);
  return std::sqrt(ss / static_cast<double>(v.size() - 1));
}

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline SettingStats stats_from(std::vector<std::pair<std::uint64_t, double>> rows) {
  std::sort(rows.begin(), rows.end());
  SettingStats st;
  for (const auto& [seed, acc] : rows) {
    st.seeds.push_back(seed);
    st.per_seed.push_back(acc);
  }
  st.mean = mean_of(st.per_seed);
  st.std = sample_std(st.per_seed);
  return st;
}

struct RunSummary {
  std::string method;
  std::vector<RunRecord> runs;  // sorted by (setting, seed)
  std::map<Setting, SettingStats> stats;
  std::optional<SettingStats> avg;  // per-seed mean of TFH and TFS
  nlohmann::json provenance;        // data + schedule description
  nlohmann::json config;
  std::vector<Action> actions;
  nlohmann::json extra;  // mode-specific payload (grid-search candidates)
  double elapsed_seconds = 0.0;
};

inline void compute_stats(RunSummary& summary) {
  std::map<Setting, std::vector<std::pair<std::uint64_t, double>>> rows;
  for (const auto& r : summary.runs) rows[r.setting].emplace_back(r.seed, r.result.average_accuracy);
  summary.stats.clear();
  for (auto& [setting, v] : rows) summary.stats[setting] = stats_from(v);
  summary.avg.reset();
  if (summary.stats.contains(Setting::kTfh) && summary.stats.contains(Setting::kTfs)) {
    const auto& h = summary.stats[Setting::kTfh];
    const auto& s = summary.stats[Setting::kTfs];
    std::vector<std::pair<std::uint64_t, double>> both;
    for (std::size_t i = 0; i < h.seeds.size(); ++i) {
      const auto it = std::find(s.seeds.begin(), s.seeds.end(), h.seeds[i]);
      if (it != s.seeds.end()) {
        both.emplace_back(h.seeds[i], 0.5 * (h.per_seed[i] + s.per_seed[static_cast<std::size_t>(it - s.seeds.begin())]));
      }
    }
    summary.avg = stats_from(both);
  }
}

inline nlohmann::json to_json(const SettingStats& st) {
  return nlohmann::json{{"seeds", st.seeds}, {"per_seed", st.per_seed}, {"mean", st.mean}, {"std", st.std}};
}

inline nlohmann::json schedule_json(const PhaseSchedule& s) {
  return nlohmann::json{{"setting", std::string(to_string(s.mode))},
                        {"N", s.num_phases},
                        {"total_classes", s.total_classes},
                        {"phase_count", s.phase_count()},
                        {"classes_per_phase", s.classes_per_phase},
                        {"class_order", s.class_order},
                        {"convention", s.mode == Setting::kTfh
                                           ? "phase 0 holds ceil(total/2) classes, then N equal phases"
                                           : "N equal phases numbered 0..N-1"}};
}

// ---------------------------------------------------------------------------
// Execution.

struct PreparedData {
  PhaseSchedule schedule;
  PhaseData data;
};

inline PreparedData prepare_data(const ExperimentConfig& cfg, Setting setting, std::uint64_t seed) {
  PreparedData out;
  out.schedule = make_schedule(cfg.data.total_classes, cfg.num_phases, setting, cfg.data.class_order_seed);
  if (cfg.data.source == "synthetic") {
    SyntheticSpec spec = cfg.data.synthetic;
    spec.seed = seed;
    out.data = synth_generate(out.schedule, spec);
  } else {
    const auto train = load_csv(cfg.data.train_csv, cfg.data.synthetic.dim);
    const auto test = cfg.data.test_csv.empty() ? train : load_csv(cfg.data.test_csv, cfg.data.synthetic.dim);
    out.data = split_by_schedule(train, test, out.schedule);
  }
  return out;
}

/// How the policy is driven for one run.
struct PolicyPlan {
  ActionSpace space;
  std::optional<std::size_t> forced_index;
  bool learn = true;
};

inline PolicyPlan plan_for(const ExperimentConfig& cfg, const std::optional<Action>& fixed_override = std::nullopt) {
  switch (cfg.mode) {
    case Mode::kOnline: {
      const auto actions = grid_actions(cfg.grid);
      if (actions.size() == 1) {
        // Single-action grid: the online path with all mass on that action.
        auto space = space_containing(cfg.grid, actions.front());
        const auto idx = space.index_of(actions.front());
        return {std::move(space), idx, true};
      }
      return {ActionSpace::build_grid(cfg.grid), std::nullopt, true};
    }
    case Mode::kFixed:
    case Mode::kGridSearch: {
      const Action a = fixed_override ? *fixed_override : cfg.fixed_action;
      auto space = space_containing(cfg.grid, a);
      const auto idx = space.index_of(a);
      return {std::move(space), idx, false};
    }
    case Mode::kAblation:
      return {ActionSpace::build_grid(ablation_grid(cfg.grid, cfg.fixed_action, *cfg.ablation)), std::nullopt, true};
  }
  throw Error(ErrorCode::kConfig, "unhandled mode");
}

inline ExperimentResult run_single(const ExperimentConfig& cfg, const PolicyPlan& plan, Setting setting,
                                   std::uint64_t seed, const std::optional<std::filesystem::path>& checkpoint_dir) {
  const auto prepared = prepare_data(cfg, setting, seed);
  ExperimentOptions options;
  options.learn_policy = plan.learn;
  if (plan.forced_index) options.initial_policy = forced_policy(plan.space.size(), *plan.forced_index, cfg.orchestrator.xi);
  options.checkpoint_dir = checkpoint_dir;
  auto result = run_experiment(prepared.schedule, prepared.data, cfg.orchestrator, plan.space, seed, options);
  for (const auto& p : result.phases) {
    if (p.test_reads_before_eval != 0) {
      throw Error(ErrorCode::kProtocol, "test set accessed before evaluation in phase " + std::to_string(p.phase));
    }
  }
  return result;
}

/// Runs `jobs` on up to `workers` threads; results land at their job index.
template <typename Job>
void run_parallel(std::size_t count, std::size_t workers, Job&& job) {
  if (workers <= 1 || count <= 1) {
    for (std::size_t i = 0; i < count; ++i) job(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex error_mutex;
  std::exception_ptr first_error;
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < std::min(workers, count); ++w) {
    pool.emplace_back([&]() {
      for (std::size_t i = next++; i < count; i = next++) {
        try {
          job(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

inline RunSummary run_matrix(const ExperimentConfig& cfg, const PolicyPlan& plan, const std::string& method,
                             const std::optional<std::filesystem::path>& out_dir) {
  const auto start = std::chrono::steady_clock::now();
  std::vector<std::pair<Setting, std::uint64_t>> jobs;
  for (auto s : cfg.settings) {
    for (auto seed : cfg.seeds) jobs.emplace_back(s, seed);
  }
  std::sort(jobs.begin(), jobs.end());
  std::vector<RunRecord> records(jobs.size());
  run_parallel(jobs.size(), cfg.workers, [&](std::size_t i) {
    const auto [setting, seed] = jobs[i];
    std::optional<std::filesystem::path> ckpt;
    if (cfg.checkpoints && out_dir) {
      ckpt = *out_dir / "checkpoints" / method / std::string(to_string(setting)) / ("seed_" + std::to_string(seed));
    }
    spdlog::info("[{}] {} seed {}", method, to_string(setting), seed);
    records[i] = RunRecord{method, setting, seed, run_single(cfg, plan, setting, seed, ckpt)};
  });

  RunSummary summary;
  summary.method = method;
  summary.runs = std::move(records);
  summary.config = to_json(cfg);
  summary.actions = plan.space.actions();
  nlohmann::json schedules = nlohmann::json::object();
  for (auto s : cfg.settings) {
    schedules[std::string(to_string(s))] =
        schedule_json(make_schedule(cfg.data.total_classes, cfg.num_phases, s, cfg.data.class_order_seed));
  }
  summary.provenance = nlohmann::json{{"data", summary.config["data"]}, {"schedules", schedules}};
  compute_stats(summary);
  summary.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return summary;
}

struct GridSearchResult {
  std::size_t best_index = 0;
  Action best;
  std::vector<double> scores;  // mean Avg (or single-setting mean) per candidate
  RunSummary best_summary;
};

/// Evaluates every candidate as a fixed-for-all-phases action on the true test
/// accuracy and keeps the best (lowest index on ties).
inline GridSearchResult grid_search_fixed(const ExperimentConfig& cfg, const std::vector<Action>& candidates) {
  if (candidates.empty()) throw Error(ErrorCode::kInvalidGrid, "no grid-search candidates");
  ExperimentConfig fixed_cfg = cfg;
  fixed_cfg.mode = Mode::kGridSearch;
  GridSearchResult out;
  std::optional<RunSummary> best;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    auto summary = run_matrix(fixed_cfg, plan_for(fixed_cfg, candidates[i]), cfg.method_name(), std::nullopt);
    const double score = summary.avg ? summary.avg->mean : summary.stats.begin()->second.mean;
    out.scores.push_back(score);
    spdlog::info("grid-search candidate {} {}: {:.4f}", i, to_string(candidates[i]), score);
    if (!best || score > out.scores[out.best_index]) {
      out.best_index = i;
      best = std::move(summary);
    }
  }
  out.best = candidates[out.best_index];
  out.best_summary = std::move(*best);
  nlohmann::json cands = nlohmann::json::array();
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    cands.push_back({{"index", i}, {"action", candidates[i]}, {"score", out.scores[i]}});
  }
  out.best_summary.extra = nlohmann::json{
      {"grid_search", {{"candidates", cands}, {"best_index", out.best_index}, {"best_action", out.best}}}};
  return out;
}

inline RunSummary run_configured(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& out_dir) {
  cfg.validate();
  if (cfg.mode == Mode::kGridSearch) {
    return grid_search_fixed(cfg, grid_actions(cfg.grid)).best_summary;
  }
  return run_matrix(cfg, plan_for(cfg), cfg.method_name(), out_dir);
}

// ---------------------------------------------------------------------------
// Outputs.

inline nlohmann::json summary_json(const RunSummary& s) {
  nlohmann::json runs = nlohmann::json::array();
  for (const auto& r : s.runs) {
    std::vector<double> accs;
    nlohmann::json actions = nlohmann::json::array();
    for (const auto& p : r.result.phases) {
      accs.push_back(p.accuracy);
      actions.push_back(p.action);
    }
    runs.push_back({{"setting", std::string(to_string(r.setting))},
                    {"seed", r.seed},
                    {"phase_accuracies", accs},
                    {"average_accuracy", r.result.average_accuracy},
                    {"actions", actions},
                    {"ledger", r.result.ledger},
                    {"test_reads_before_eval",
                     [&] {
                       std::vector<std::size_t> v;
                       for (const auto& p : r.result.phases) v.push_back(p.test_reads_before_eval);
                       return v;
                     }()},
                    {"final_policy", r.result.final_policy},
                    {"elapsed_seconds", r.result.elapsed_seconds}});
  }
  nlohmann::json stats = nlohmann::json::object();
  for (const auto& [setting, st] : s.stats) stats[std::string(to_string(setting))] = to_json(st);
  stats["avg"] = s.avg ? to_json(*s.avg) : nlohmann::json(nullptr);
  nlohmann::json j{{"method", s.method},   {"config", s.config}, {"provenance", s.provenance},
                   {"action_space", s.actions}, {"runs", runs},  {"stats", stats},
                   {"elapsed_seconds", s.elapsed_seconds}};
  for (const auto& [k, v] : s.extra.items()) j[k] = v;
  return j;
}

inline std::string format_number(double v) { return fmt::format("{:.10g}", v); }

inline std::string phases_csv(const std::vector<RunSummary>& summaries) {
  std::string out = "method,setting,seed,phase,accuracy,chosen_beta,chosen_gamma,chosen_lambda,chosen_delta\n";
  for (const auto& s : summaries) {
    for (const auto& r : s.runs) {
      for (const auto& p : r.result.phases) {
        out += fmt::format("{},{},{},{},{},{},{},{},{}\n", s.method, to_string(r.setting), r.seed, p.phase,
                           format_number(p.accuracy), format_number(p.action.beta), format_number(p.action.gamma),
                           format_number(p.action.lambda), p.action.delta);
      }
    }
  }
  return out;
}

inline std::string trace_csv(const std::vector<RunSummary>& summaries) {
  std::string out =
      "method,setting,seed,phase,iteration,action_index,beta,gamma,lambda,delta,probability,reward,full_reward\n";
  for (const auto& s : summaries) {
    for (const auto& r : s.runs) {
      for (const auto& p : r.result.phases) {
        for (const auto& it : p.trace) {
          const Action& a = s.actions.at(it.action_index);
          out += fmt::format("{},{},{},{},{},{},{},{},{},{},{},{},{}\n", s.method, to_string(r.setting), r.seed,
                             p.phase, it.iteration, it.action_index, format_number(a.beta), format_number(a.gamma),
                             format_number(a.lambda), a.delta, format_number(it.probability),
                             format_number(it.reward), format_number(it.full_reward));
        }
      }
    }
  }
  return out;
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIo, "cannot write '" + path.string() + "'");
  out << text;
}

/// summary.json (one summary object, or an array when several methods ran),
/// phases.csv and trace.csv.
inline void write_outputs(const std::filesystem::path& dir, const std::vector<RunSummary>& summaries) {
  std::filesystem::create_directories(dir);
  nlohmann::json j;
  if (summaries.size() == 1) {
    j = summary_json(summaries.front());
  } else {
    j = nlohmann::json::array();
    for (const auto& s : summaries) j.push_back(summary_json(s));
  }
  write_text_file(dir / "summary.json", j.dump(2) + "\n");
  write_text_file(dir / "phases.csv", phases_csv(summaries));
  write_text_file(dir / "trace.csv", trace_csv(summaries));
}

// ---------------------------------------------------------------------------
// Comparison tables.

struct ComparisonRow {
  std::string method;
  std::optional<double> tfh_mean, tfh_std, tfs_mean, tfs_std, avg_mean, avg_std;
};

struct Comparison {
  std::vector<ComparisonRow> rows;
  std::string csv;
  nlohmann::json json;
  std::string curves_csv;  // method,setting,phase,mean_accuracy,std_accuracy,seeds
};

namespace detail {

inline std::optional<double> stat_field(const nlohmann::json& stats, const char* setting, const char* field) {
  if (!stats.contains(setting) || stats.at(setting).is_null()) return std::nullopt;
  return stats.at(setting).at(field).get<double>();
}

inline std::string opt_cell(const std::optional<double>& v) { return v ? format_number(*v) : ""; }

}  // namespace detail

/// Rows = methods, columns = TFH / TFS / Avg (mean and std over seeds), from
/// parsed summary.json documents. Summaries must share data and schedule
/// provenance.
inline Comparison compare_report(const std::vector<nlohmann::json>& summaries) {
  if (summaries.empty()) throw Error(ErrorCode::kComparison, "nothing to compare");
  const auto& ref = summaries.front().at("provenance");
  for (const auto& s : summaries) {
    if (s.at("provenance") != ref) {
      throw Error(ErrorCode::kComparison,
                  "summary '" + s.at("method").get<std::string>() + "' has different data/schedule provenance");
    }
  }
  Comparison out;
  out.csv = "method,tfh_mean,tfh_std,tfs_mean,tfs_std,avg_mean,avg_std\n";
  out.curves_csv = "method,setting,phase,mean_accuracy,std_accuracy,seeds\n";
  out.json = nlohmann::json{{"rows", nlohmann::json::array()}, {"provenance", ref}};
  for (const auto& s : summaries) {
    ComparisonRow row;
    row.method = s.at("method").get<std::string>();
    const auto& st = s.at("stats");
    row.tfh_mean = detail::stat_field(st, "tfh", "mean");
    row.tfh_std = detail::stat_field(st, "tfh", "std");
    row.tfs_mean = detail::stat_field(st, "tfs", "mean");
    row.tfs_std = detail::stat_field(st, "tfs", "std");
    row.avg_mean = detail::stat_field(st, "avg", "mean");
    row.avg_std = detail::stat_field(st, "avg", "std");
    out.csv += fmt::format("{},{},{},{},{},{},{}\n", row.method, detail::opt_cell(row.tfh_mean),
                           detail::opt_cell(row.tfh_std), detail::opt_cell(row.tfs_mean), detail::opt_cell(row.tfs_std),
                           detail::opt_cell(row.avg_mean), detail::opt_cell(row.avg_std));
    auto opt_json = [](const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); };
    out.json["rows"].push_back({{"method", row.method},
                                {"tfh", {{"mean", opt_json(row.tfh_mean)}, {"std", opt_json(row.tfh_std)}}},
                                {"tfs", {{"mean", opt_json(row.tfs_mean)}, {"std", opt_json(row.tfs_std)}}},
                                {"avg", {{"mean", opt_json(row.avg_mean)}, {"std", opt_json(row.avg_std)}}}});

    // Per-phase accuracy curves averaged over seeds.
    std::map<std::string, std::vector<std::vector<double>>> curves;
    for (const auto& r : s.at("runs")) {
      auto& per_setting = curves[r.at("setting").get<std::string>()];
      const auto accs = r.at("phase_accuracies").get<std::vector<double>>();
      if (per_setting.size() < accs.size()) per_setting.resize(accs.size());
      for (std::size_t p = 0; p < accs.size(); ++p) per_setting[p].push_back(accs[p]);
    }
    for (const auto& [setting, phases] : curves) {
      for (std::size_t p = 0; p < phases.size(); ++p) {
        out.curves_csv += fmt::format("{},{},{},{},{},{}\n", row.method, setting, p, format_number(mean_of(phases[p])),
                                      format_number(sample_std(phases[p])), phases[p].size());
      }
    }
    out.rows.push_back(std::move(row));
  }
  return out;
}

inline void write_comparison(const std::filesystem::path& dir, const Comparison& c) {
  write_text_file(dir / "compare.csv", c.csv);
  write_text_file(dir / "compare.json", c.json.dump(2) + "\n");
  write_text_file(dir / "curves.csv", c.curves_csv);
}

/// Reads a summary.json; arrays (multi-method files) are flattened.
inline std::vector<nlohmann::json> load_summaries(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, path.string() + ": " + e.what());
  }
  std::vector<nlohmann::json> out;
  if (j.is_array()) {
    for (auto& s : j) out.push_back(std::move(s));
  } else {
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace exp3cil
