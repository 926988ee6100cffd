#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/spdlog.h>

#include "exp3cil/harness.hpp"

namespace {

void configure_logging() {
  const char* env = std::getenv("EXP3CIL_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    spdlog::set_level(spdlog::level::info);
  }
}

struct RunArgs {
  std::string config;
  std::string mode;
  std::string setting;
  std::string seeds;
  std::size_t workers = 0;
  std::string out = "results";
  std::optional<double> beta, gamma, lambda;
  std::optional<int> delta;
};

int do_run(const RunArgs& a) {
  auto cfg = exp3cil::load_config(a.config);
  if (!a.mode.empty()) cfg.mode = exp3cil::parse_mode(a.mode, cfg.ablation);
  if (!a.setting.empty()) cfg.settings = exp3cil::parse_settings(a.setting);
  if (!a.seeds.empty()) cfg.seeds = exp3cil::detail::parse_list<std::uint64_t>(a.seeds, "--seeds");
  if (a.workers > 0) cfg.workers = a.workers;
  if (a.beta) cfg.fixed_action.beta = *a.beta;
  if (a.gamma) cfg.fixed_action.gamma = *a.gamma;
  if (a.lambda) cfg.fixed_action.lambda = *a.lambda;
  if (a.delta) cfg.fixed_action.delta = *a.delta;

  const std::filesystem::path out_dir = a.out;
  const auto summary = exp3cil::run_configured(cfg, out_dir);
  exp3cil::write_outputs(out_dir, {summary});
  for (const auto& [setting, st] : summary.stats) {
    spdlog::info("{} {}: {:.4f} +- {:.4f}", summary.method, exp3cil::to_string(setting), st.mean, st.std);
  }
  if (summary.avg) spdlog::info("{} avg: {:.4f} +- {:.4f}", summary.method, summary.avg->mean, summary.avg->std);
  spdlog::info("wrote {}", (out_dir / "summary.json").string());
  return 0;
}

int do_compare(const std::vector<std::string>& inputs, const std::string& out) {
  std::vector<nlohmann::json> summaries;
  for (const auto& path : inputs) {
    for (auto& s : exp3cil::load_summaries(path)) summaries.push_back(std::move(s));
  }
  const auto report = exp3cil::compare_report(summaries);
  exp3cil::write_comparison(out, report);
  std::cout << report.csv;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  configure_logging();
  CLI::App app{"Exp3-tuned class-incremental learning experiments"};
  app.require_subcommand(1);

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "run an experiment from a config file");
  run->add_option("--config", run_args.config, "INI config file")->required();
  run->add_option("--mode", run_args.mode, "online | fixed | grid-search | ablation[:kd+delta+lambda]");
  run->add_option("--setting", run_args.setting, "tfh | tfs | both");
  run->add_option("--seeds", run_args.seeds, "comma-separated seed list");
  run->add_option("--workers", run_args.workers, "parallel runs");
  run->add_option("--out", run_args.out, "output directory")->capture_default_str();
  run->add_option("--beta", run_args.beta, "fixed-mode beta");
  run->add_option("--gamma", run_args.gamma, "fixed-mode gamma");
  run->add_option("--lambda", run_args.lambda, "fixed-mode learning rate");
  run->add_option("--delta", run_args.delta, "fixed-mode classifier (0 = FC, 1 = NCM)");

  std::vector<std::string> compare_inputs;
  std::string compare_out = "compare";
  auto* compare = app.add_subcommand("compare", "tabulate several summary.json files");
  compare->add_option("summaries", compare_inputs, "summary.json files")->required();
  compare->add_option("--out", compare_out, "output directory")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*run) return do_run(run_args);
    return do_compare(compare_inputs, compare_out);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
