#include <filesystem>
#include <fstream>
#include <sstream>

#include <gtest/gtest.h>

#include "exp3cil/harness.hpp"

using namespace exp3cil;

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

const char* kTiny = R"(
[data]
total_classes = 4
dim = 6
per_class_train = 16
per_class_test = 8
separation = 5

[schedule]
phases = 1
setting = both

[policy]
T = 2

[train]
M2 = 3
M1 = 1
phase0_epochs = 3

[model]
hidden_dim = 8
feature_dim = 4

[run]
seeds = 2, 1
)";

ExperimentConfig tiny(const std::string& extra = "") { return parse_config_text(std::string(kTiny) + extra); }

nlohmann::json without_elapsed(nlohmann::json j) {
  j.erase("elapsed_seconds");
  for (auto& r : j["runs"]) r.erase("elapsed_seconds");
  return j;
}

nlohmann::json hand_summary(const std::string& method, double h1, double h2, double s1, double s2) {
  RunSummary s;
  s.method = method;
  s.provenance = {{"data", "same"}};
  for (auto [setting, seed, acc] : {std::tuple{Setting::kTfh, 1u, h1}, std::tuple{Setting::kTfh, 2u, h2},
                                    std::tuple{Setting::kTfs, 1u, s1}, std::tuple{Setting::kTfs, 2u, s2}}) {
    RunRecord r;
    r.method = method;
    r.setting = setting;
    r.seed = seed;
    r.result.average_accuracy = acc;
    PhaseResult p;
    p.accuracy = acc;
    r.result.phases.push_back(p);
    s.runs.push_back(r);
  }
  compute_stats(s);
  return summary_json(s);
}

}  // namespace

TEST(Config, DefaultsAndOverrides) {
  const auto cfg = parse_config_text("[run]\nseeds = 4,5\n");
  EXPECT_EQ(cfg.data.total_classes, 20u);
  EXPECT_EQ(cfg.num_phases, 5u);
  EXPECT_EQ(cfg.settings.size(), 2u);
  EXPECT_EQ(cfg.mode, Mode::kOnline);
  EXPECT_EQ(cfg.seeds, (std::vector<std::uint64_t>{4, 5}));
  EXPECT_EQ(ActionSpace::build_grid(cfg.grid).size(), 48u);
  EXPECT_EQ(cfg.orchestrator.rollout_epochs(), 2u);

  const auto t = tiny("[fixed]\nbeta = 0\ngamma = 5\ndelta = 0\n[ablation]\nsubset = kd+delta\n");
  EXPECT_EQ(t.orchestrator.rollout_epochs(), 1u);
  EXPECT_EQ(t.fixed_action, (Action{0, 5, 0.05, 0}));
  ASSERT_TRUE(t.ablation);
  EXPECT_EQ(t.ablation->name(), "kd+delta");
  const auto j = to_json(t);
  EXPECT_EQ(j["policy"]["xi"].get<double>(), 0.1);
  EXPECT_EQ(j["train"]["M1"].get<int>(), 1);
}

TEST(Config, Errors) {
  EXPECT_EQ(code_of([] { parse_config_text("[data]\nbogus = 1\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([] { parse_config_text("[data]\ntotal_classes = many\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([] { parse_config_text("[run]\nmode = sometimes\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([] { parse_config_text("[grid]\nbeta = 0, x\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([] { parse_config_text("[run]\nmode = ablation:colour\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([] { parse_config_text("[run]\nworkers = -2\n"); }), ErrorCode::kConfig);
  EXPECT_EQ(code_of([] { parse_config_text("[run]\ncheckpoints = maybe\n"); }), ErrorCode::kConfig);
  try {
    load_config("/tmp/definitely/missing.cfg");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kIo);
    EXPECT_NE(std::string(e.what()).find("/tmp/definitely/missing.cfg"), std::string::npos);
  }
  auto cfg = tiny();
  cfg.mode = Mode::kAblation;
  EXPECT_EQ(code_of([&] { cfg.validate(); }), ErrorCode::kConfig);
}

TEST(Config, ShippedConfigsParse) {
  const std::filesystem::path dir = EXP3CIL_SOURCE_DIR "/configs";
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    EXPECT_NO_THROW(load_config(entry.path()).validate()) << entry.path();
  }
}

TEST(Spaces, AblationFreezesOtherGroups) {
  const Action fixed{1, 0, 0.05, 1};
  const auto g = GridSpec::defaults();
  EXPECT_EQ(ActionSpace::build_grid(ablation_grid(g, fixed, parse_subset("kd"))).size(), 12u);
  EXPECT_EQ(ActionSpace::build_grid(ablation_grid(g, fixed, parse_subset("kd+delta"))).size(), 24u);
  EXPECT_EQ(ActionSpace::build_grid(ablation_grid(g, fixed, parse_subset("kd+delta+lambda"))).size(), 48u);
  for (const auto& a : ActionSpace::build_grid(ablation_grid(g, fixed, parse_subset("kd"))).actions()) {
    EXPECT_EQ(a.delta, 1);
    EXPECT_EQ(a.lambda, 0.05);
  }
  EXPECT_EQ(ActionSpace::build_grid(ablation_grid(g, fixed, parse_subset("delta"))).size(), 2u);
}

TEST(Spaces, ContainingAddsMissingValues) {
  const auto s = space_containing(GridSpec::defaults(), Action{3, 0, 0.05, 1});
  EXPECT_TRUE(s.contains(Action{3, 0, 0.05, 1}));
  const auto single = space_containing(GridSpec{{1}, {0}, {0.05}, {1}}, Action{1, 0, 0.05, 1});
  EXPECT_EQ(single.size(), 2u);
}

TEST(Harness, StatisticsRecomputable) {
  const auto j = hand_summary("m", 0.8, 0.6, 0.7, 0.9);
  EXPECT_DOUBLE_EQ(j["stats"]["tfh"]["mean"].get<double>(), (0.8 + 0.6) / 2);
  EXPECT_DOUBLE_EQ(j["stats"]["tfh"]["std"].get<double>(), sample_std({0.8, 0.6}));
  EXPECT_NEAR(j["stats"]["tfh"]["std"].get<double>(), std::sqrt(0.02), 1e-15);
  EXPECT_DOUBLE_EQ(j["stats"]["avg"]["mean"].get<double>(), mean_of({0.75, 0.75}));
  EXPECT_DOUBLE_EQ(j["stats"]["avg"]["std"].get<double>(), 0.0);
}

TEST(Harness, RunStatsMatchRawTableAndRepeat) {
  const auto cfg = tiny();
  const auto a = summary_json(run_configured(cfg, std::nullopt));
  for (const char* setting : {"tfh", "tfs"}) {
    std::vector<double> raw;
    for (const auto& r : a["runs"]) {
      if (r["setting"] == setting) {
        const auto accs = r["phase_accuracies"].get<std::vector<double>>();
        EXPECT_DOUBLE_EQ(r["average_accuracy"].get<double>(), mean_of(accs));
        raw.push_back(r["average_accuracy"].get<double>());
      }
    }
    ASSERT_EQ(raw.size(), 2u);
    EXPECT_EQ(a["stats"][setting]["mean"].get<double>(), mean_of(raw));
    EXPECT_EQ(a["stats"][setting]["std"].get<double>(), sample_std(raw));
  }
  // Runs are sorted by seed even though the config lists 2 before 1.
  EXPECT_EQ(a["runs"][0]["seed"].get<int>(), 1);
  const auto b = summary_json(run_configured(cfg, std::nullopt));
  EXPECT_EQ(without_elapsed(a), without_elapsed(b));
  auto par = cfg;
  par.workers = 3;
  auto pj = without_elapsed(summary_json(run_configured(par, std::nullopt)));
  pj["config"]["run"]["workers"] = 1;
  EXPECT_EQ(pj, without_elapsed(a));
}

TEST(Harness, FixedEqualsSingleActionOnline) {
  auto fixed = tiny();
  fixed.mode = Mode::kFixed;
  fixed.fixed_action = Action{0, 5, 0.05, 0};
  auto online = tiny();
  online.grid = GridSpec{{0}, {5}, {0.05}, {0}};
  const auto f = run_configured(fixed, std::nullopt);
  const auto o = run_configured(online, std::nullopt);
  ASSERT_EQ(f.runs.size(), o.runs.size());
  for (std::size_t i = 0; i < f.runs.size(); ++i) {
    EXPECT_EQ(f.runs[i].result.final_model, o.runs[i].result.final_model);
    for (std::size_t p = 0; p < f.runs[i].result.phases.size(); ++p) {
      EXPECT_EQ(f.runs[i].result.phases[p].accuracy, o.runs[i].result.phases[p].accuracy);
    }
    // Only incremental phases run the policy round.
    const bool incremental = f.runs[i].result.phases.size() > 1;
    EXPECT_EQ(o.runs[i].result.phases.back().policy_learned, incremental);
    EXPECT_FALSE(f.runs[i].result.phases.back().policy_learned);
  }
}

TEST(Harness, GridSearchPicksDominantAction) {
  const auto cfg = tiny();
  const auto one = grid_search_fixed(cfg, {Action{1, 0, 0.05, 1}});
  EXPECT_EQ(one.best, (Action{1, 0, 0.05, 1}));
  // A learning rate too small to move the weights cannot beat a working one.
  const std::vector<Action> two{Action{0, 0, 1e-9, 0}, Action{0, 0, 0.1, 0}};
  const auto res = grid_search_fixed(cfg, two);
  EXPECT_EQ(res.best_index, 1u);
  EXPECT_GT(res.scores[1], res.scores[0]);
  const auto j = summary_json(res.best_summary);
  EXPECT_EQ(j["grid_search"]["candidates"].size(), 2u);
  EXPECT_EQ(j["grid_search"]["best_index"].get<int>(), 1);
}

TEST(Harness, OutputsWritten) {
  const auto dir = std::filesystem::temp_directory_path() / "exp3cil_harness_out";
  std::filesystem::remove_all(dir);
  const auto s = run_configured(tiny(), dir);
  write_outputs(dir, {s});
  std::ifstream phases(dir / "phases.csv");
  std::string header;
  std::getline(phases, header);
  EXPECT_EQ(header, "method,setting,seed,phase,accuracy,chosen_beta,chosen_gamma,chosen_lambda,chosen_delta");
  int rows = 0;
  for (std::string line; std::getline(phases, line);) ++rows;
  EXPECT_EQ(rows, 2 * (2 + 1));  // seeds x (TFH phases + TFS phases)
  EXPECT_TRUE(std::filesystem::exists(dir / "summary.json"));
  EXPECT_TRUE(std::filesystem::exists(dir / "trace.csv"));
  EXPECT_EQ(load_summaries(dir / "summary.json").front()["method"], "online");
}

TEST(Compare, SingleAndHandBuilt) {
  const auto a = hand_summary("a", 0.8, 0.6, 0.7, 0.9);
  const auto one = compare_report({a});
  ASSERT_EQ(one.rows.size(), 1u);
  EXPECT_EQ(*one.rows[0].tfh_mean, a["stats"]["tfh"]["mean"].get<double>());
  EXPECT_EQ(*one.rows[0].avg_std, a["stats"]["avg"]["std"].get<double>());

  const auto b = hand_summary("b", 0.5, 0.5, 0.9, 0.7);
  const auto two = compare_report({a, b});
  EXPECT_NEAR(*two.rows[0].avg_mean, 0.75, 1e-15);
  EXPECT_NEAR(*two.rows[1].avg_mean, 0.65, 1e-15);
  // Per-seed averages of b are 0.7 and 0.6.
  EXPECT_NEAR(*two.rows[1].avg_std, std::sqrt(0.005), 1e-12);
  EXPECT_NEAR(*two.rows[1].tfh_std, 0.0, 1e-15);
}

TEST(Compare, CsvRoundTripAndProvenance) {
  const auto a = hand_summary("a", 0.81, 0.62, 0.73, 0.94);
  const auto rep = compare_report({a});
  std::istringstream in(rep.csv);
  std::string header, line;
  std::getline(in, header);
  std::getline(in, line);
  std::vector<std::string> cells;
  std::stringstream ls(line);
  for (std::string c; std::getline(ls, c, ',');) cells.push_back(c);
  ASSERT_EQ(cells.size(), 7u);
  EXPECT_EQ(cells[0], "a");
  EXPECT_NEAR(std::stod(cells[1]), *rep.rows[0].tfh_mean, 1e-9);
  EXPECT_NEAR(std::stod(cells[6]), *rep.rows[0].avg_std, 1e-9);

  auto other = hand_summary("b", 0.5, 0.5, 0.5, 0.5);
  other["provenance"] = {{"data", "different"}};
  EXPECT_EQ(code_of([&] { compare_report({a, other}); }), ErrorCode::kComparison);
}
