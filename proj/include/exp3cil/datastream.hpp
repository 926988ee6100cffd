#pragma once

// Phase schedules, synthetic and CSV datasets, the exemplar memory and the
// local train/validation rebuild used during policy learning.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <fstream>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "exp3cil/dataset.hpp"
#include "exp3cil/error.hpp"
#include "exp3cil/learner.hpp"
#include "exp3cil/random.hpp"

namespace exp3cil {

enum class Setting { kTfh, kTfs };

inline std::string_view to_string(Setting s) { return s == Setting::kTfh ? "tfh" : "tfs"; }

inline Setting parse_setting(std::string_view s) {
  if (s == "tfh" || s == "TFH") return Setting::kTfh;
  if (s == "tfs" || s == "TFS") return Setting::kTfs;
  throw Error(ErrorCode::kConfig, "unknown setting '" + std::string(s) + "'");
}

struct PhaseSchedule {
  std::size_t total_classes = 0;
  std::size_t num_phases = 0;  // N as reported in tables
  Setting mode = Setting::kTfh;
  std::vector<std::vector<int>> classes_per_phase;
  /// Original dataset label of each incremental class id.
  std::vector<int> class_order;

  std::size_t phase_count() const { return classes_per_phase.size(); }

  /// Classes observed in phases 0..phase inclusive, ascending.
  std::vector<int> classes_up_to(std::size_t phase) const {
    std::vector<int> out;
    for (std::size_t i = 0; i <= phase && i < classes_per_phase.size(); ++i) {
      out.insert(out.end(), classes_per_phase[i].begin(), classes_per_phase[i].end());
    }
    std::sort(out.begin(), out.end());
    return out;
  }
};

/// TFH: phase 0 holds ceil(total/2) classes and N further phases split the
/// rest evenly (N+1 phases in total). TFS: N equal phases numbered 0..N-1.
/// Incremental class ids are contiguous and ascending in arrival order; an
/// optional seed permutes which original label takes each slot.
inline PhaseSchedule make_schedule(std::size_t total_classes, std::size_t num_phases, Setting mode,
                                   std::optional<std::uint64_t> order_seed = std::nullopt) {
  if (total_classes < 2) throw Error(ErrorCode::kSchedule, "need at least 2 classes");
  if (num_phases == 0) throw Error(ErrorCode::kSchedule, "need at least 1 incremental phase");

  std::vector<std::size_t> sizes;
  if (mode == Setting::kTfh) {
    const std::size_t first = (total_classes + 1) / 2;
    const std::size_t rest = total_classes - first;
    if (rest % num_phases != 0 || rest / num_phases == 0) {
      throw Error(ErrorCode::kSchedule, std::to_string(rest) + " remaining classes cannot be split evenly over " +
                                            std::to_string(num_phases) + " phases");
    }
    sizes.push_back(first);
    sizes.insert(sizes.end(), num_phases, rest / num_phases);
  } else {
    if (total_classes % num_phases != 0) {
      throw Error(ErrorCode::kSchedule, std::to_string(total_classes) + " classes cannot be split evenly over " +
                                            std::to_string(num_phases) + " phases");
    }
    sizes.assign(num_phases, total_classes / num_phases);
  }

  PhaseSchedule schedule;
  schedule.total_classes = total_classes;
  schedule.num_phases = num_phases;
  schedule.mode = mode;
  schedule.class_order.resize(total_classes);
  std::iota(schedule.class_order.begin(), schedule.class_order.end(), 0);
  if (order_seed) {
    Rng rng = make_rng(*order_seed, {stream::kSchedule});
    std::shuffle(schedule.class_order.begin(), schedule.class_order.end(), rng);
  }
  int next = 0;
  for (std::size_t n : sizes) {
    std::vector<int> ids(n);
    std::iota(ids.begin(), ids.end(), next);
    next += static_cast<int>(n);
    schedule.classes_per_phase.push_back(std::move(ids));
  }
  return schedule;
}

struct SyntheticSpec {
  std::size_t per_class_train = 60;
  std::size_t per_class_test = 30;
  std::size_t dim = 16;
  double separation = 4.0;
  std::uint64_t seed = 0;
};

struct PhaseData {
  std::vector<LabeledDataset> train;  // D_i
  std::vector<LabeledDataset> test;   // test samples of the classes new in phase i
};

/// Cluster for class id c depends only on (seed, c), so the same class set
/// yields identical data under TFH and TFS.
inline LabeledDataset synth_class_samples(const SyntheticSpec& spec, int class_id, bool train) {
  Rng mean_rng = make_rng(spec.seed, {stream::kData, static_cast<std::uint64_t>(class_id), 0});
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<double> mean(spec.dim);
  double n2 = 0.0;
  for (auto& v : mean) {
    v = normal(mean_rng);
    n2 += v * v;
  }
  const double n = std::sqrt(n2);
  for (auto& v : mean) v = n > 0.0 ? v / n * spec.separation : 0.0;

  Rng draw_rng = make_rng(spec.seed, {stream::kData, static_cast<std::uint64_t>(class_id), train ? 1u : 2u});
  LabeledDataset out;
  out.dim = spec.dim;
  const std::size_t count = train ? spec.per_class_train : spec.per_class_test;
  for (std::size_t i = 0; i < count; ++i) {
    Sample s;
    s.label = class_id;
    s.x.resize(spec.dim);
    for (std::size_t d = 0; d < spec.dim; ++d) s.x[d] = mean[d] + normal(draw_rng);
    out.samples.push_back(std::move(s));
  }
  return out;
}

inline PhaseData synth_generate(const PhaseSchedule& schedule, const SyntheticSpec& spec) {
  if (spec.per_class_train == 0 || spec.per_class_test == 0) {
    throw Error(ErrorCode::kInvalidParameter, "per-class sample counts must be at least 1");
  }
  if (spec.dim == 0) throw Error(ErrorCode::kInvalidParameter, "dim must be positive");
  if (!(spec.separation >= 0.0)) throw Error(ErrorCode::kInvalidParameter, "separation must be nonnegative");
  PhaseData out;
  for (const auto& classes : schedule.classes_per_phase) {
    LabeledDataset train{spec.dim, {}};
    LabeledDataset test{spec.dim, {}};
    for (int c : classes) {
      train = concat(train, synth_class_samples(spec, c, true));
      test = concat(test, synth_class_samples(spec, c, false));
    }
    train.dim = test.dim = spec.dim;
    out.train.push_back(std::move(train));
    out.test.push_back(std::move(test));
  }
  return out;
}

/// Splits flat datasets into per-phase sets following the schedule, relabelling
/// original labels to incremental class ids. Labels outside the schedule are
/// rejected.
inline PhaseData split_by_schedule(const LabeledDataset& train, const LabeledDataset& test,
                                   const PhaseSchedule& schedule) {
  std::map<int, int> remap;
  for (std::size_t i = 0; i < schedule.class_order.size(); ++i) {
    remap[schedule.class_order[i]] = static_cast<int>(i);
  }
  std::vector<std::size_t> phase_of(schedule.total_classes);
  for (std::size_t p = 0; p < schedule.classes_per_phase.size(); ++p) {
    for (int c : schedule.classes_per_phase[p]) phase_of[static_cast<std::size_t>(c)] = p;
  }
  PhaseData out;
  out.train.assign(schedule.phase_count(), LabeledDataset{train.dim, {}});
  out.test.assign(schedule.phase_count(), LabeledDataset{test.dim, {}});
  auto distribute = [&](const LabeledDataset& src, std::vector<LabeledDataset>& dst) {
    for (const auto& s : src.samples) {
      const auto it = remap.find(s.label);
      if (it == remap.end()) {
        throw Error(ErrorCode::kLabel, "label " + std::to_string(s.label) + " is not part of the schedule");
      }
      Sample relabelled = s;
      relabelled.label = it->second;
      dst[phase_of[static_cast<std::size_t>(it->second)]].samples.push_back(std::move(relabelled));
    }
  };
  distribute(train, out.train);
  distribute(test, out.test);
  return out;
}

/// Rows are `label,v1,...,vdim` with no header.
inline LabeledDataset load_csv(const std::string& path, std::size_t dim) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIo, "cannot open '" + path + "'");
  LabeledDataset out;
  out.dim = dim;
  std::string line;
  std::size_t row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string_view> fields;
    std::string_view rest(line);
    while (true) {
      const auto comma = rest.find(',');
      fields.push_back(rest.substr(0, comma));
      if (comma == std::string_view::npos) break;
      rest.remove_prefix(comma + 1);
    }
    auto parse_error = [&](std::size_t col) {
      return Error(ErrorCode::kParse, path + ": row " + std::to_string(row) + ", field " +
                                          std::to_string(col + 1) + " is not numeric");
    };
    auto trim = [](std::string_view f) {
      while (!f.empty() && (f.front() == ' ' || f.front() == '\t')) f.remove_prefix(1);
      while (!f.empty() && (f.back() == ' ' || f.back() == '\t')) f.remove_suffix(1);
      return f;
    };
    Sample s;
    {
      const auto f = trim(fields[0]);
      const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), s.label);
      if (ec != std::errc() || ptr != f.data() + f.size() || s.label < 0) throw parse_error(0);
    }
    s.x.resize(fields.size() - 1);
    for (std::size_t i = 1; i < fields.size(); ++i) {
      const auto f = trim(fields[i]);
      const auto [ptr, ec] = std::from_chars(f.data(), f.data() + f.size(), s.x[i - 1]);
      if (ec != std::errc() || ptr != f.data() + f.size() || f.empty()) throw parse_error(i);
    }
    if (s.x.size() != dim) {
      throw Error(ErrorCode::kShape, path + ": row " + std::to_string(row) + " has " +
                                         std::to_string(s.x.size()) + " features, expected " +
                                         std::to_string(dim));
    }
    out.samples.push_back(std::move(s));
  }
  return out;
}

struct LocalEnvironment {
  LabeledDataset train;
  LabeledDataset val;
};

/// Moves exactly `per_class_b` random samples of every class into the local
/// validation set; the remainder becomes local training data.
inline LocalEnvironment split_local(const LabeledDataset& train, std::size_t per_class_b, std::uint64_t seed) {
  if (per_class_b == 0) throw Error(ErrorCode::kInvalidParameter, "per-class validation size must be positive");
  Rng rng(seed);
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < train.size(); ++i) by_class[train.samples[i].label].push_back(i);

  std::vector<bool> to_val(train.size(), false);
  LocalEnvironment env;
  env.train.dim = env.val.dim = train.dim;
  for (auto& [label, idx] : by_class) {
    if (idx.size() <= per_class_b) {
      throw Error(ErrorCode::kBalance, "class " + std::to_string(label) + " has " + std::to_string(idx.size()) +
                                           " samples, needs more than " + std::to_string(per_class_b));
    }
    std::shuffle(idx.begin(), idx.end(), rng);
    for (std::size_t k = 0; k < per_class_b; ++k) {
      to_val[idx[k]] = true;
      env.val.samples.push_back(train.samples[idx[k]]);
    }
  }
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (!to_val[i]) env.train.samples.push_back(train.samples[i]);
  }
  return env;
}

struct ExemplarStore {
  std::size_t per_class_budget = 5;
  std::map<int, std::vector<Sample>> per_class;

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& [c, v] : per_class) n += v.size();
    return n;
  }

  LabeledDataset as_dataset(std::size_t dim) const {
    LabeledDataset out{dim, {}};
    for (const auto& [c, v] : per_class) out.samples.insert(out.samples.end(), v.begin(), v.end());
    return out;
  }

  bool operator==(const ExemplarStore&) const = default;
};

/// Herding picks `per_class_budget` exemplars for every class of `new_data` not
/// yet in the store. Stored classes keep their exemplars untouched.
inline ExemplarStore update_exemplars(ExemplarStore store, const ModelState& model,
                                      const LabeledDataset& new_data) {
  if (store.per_class_budget == 0) throw Error(ErrorCode::kBudget, "exemplar budget must be positive");
  for (int c : new_data.classes()) {
    if (store.per_class.contains(c)) continue;
    const auto samples = new_data.of_class(c);
    if (samples.size() < store.per_class_budget) {
      throw Error(ErrorCode::kBudget, "class " + std::to_string(c) + " has " + std::to_string(samples.size()) +
                                          " samples, budget is " + std::to_string(store.per_class_budget));
    }
    const auto picked = herding_select(model, samples, store.per_class_budget);
    auto& slot = store.per_class[c];
    for (std::size_t k : picked) slot.push_back(samples[k]);
  }
  return store;
}

}  // namespace exp3cil
