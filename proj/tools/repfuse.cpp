#include <cstdio>
#include <cstdlib>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "repfuse/cli.hpp"

using namespace repfuse;

namespace {

std::string flag_name(std::string key) {
  for (char& c : key) {
    if (c == '_') c = '-';
  }
  return "--" + key;
}

RunOutcome run_and_report(const KeyValues& kv) {
  RunSpec spec = resolve_spec(kv, std::getenv("REPFUSE_SEED"));
  RunOutcome out = run_spec(spec);
  const auto& m = out.result.metrics;
  std::printf("%s: final accuracy %.4f, best %.4f at round %zu -> %s\n", mode_name(spec.train.mode), m.final_accuracy,
              m.best_accuracy, m.best_round, spec.out.string().c_str());
  for (const auto& w : m.warnings) std::fprintf(stderr, "warning: %s\n", w.c_str());
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Representative-based and FedAVG training runs"};
  std::string config;
  std::vector<std::string> compare;
  std::map<std::string, std::string> values;
  std::map<std::string, CLI::Option*> options;
  app.add_option("--config", config, "Flat key=value config file; flags override its values")->check(CLI::ExistingFile);
  app.add_option("--compare", compare,
                 "Run each config file into OUT/<name> and merge their metrics into OUT/comparison.csv")
      ->check(CLI::ExistingFile);
  for (const auto& key : config_keys()) {
    if (key == "export_reps") continue;
    options[key] = app.add_option(flag_name(key), values[key]);
  }
  options["mode"]->description("baseline-central | rep-central | rep-distributed | fedavg");
  options["dataset"]->description("mnist | csv");
  options["model"]->description("mlp | cnn");
  options["residual"]->description("on | off");
  options["out"]->description("Output directory");
  bool export_reps = false;
  auto* export_flag = app.add_flag("--export-reps", export_reps, "Write representatives under OUT/reps");
  CLI11_PARSE(app, argc, argv);

  KeyValues flags;
  for (const auto& [key, opt] : options) {
    if (opt->count() > 0) flags[key] = values[key];
  }
  if (export_flag->count() > 0) flags["export_reps"] = export_reps ? "true" : "false";

  try {
    if (!compare.empty()) {
      if (config.size() > 0) throw Error(ErrorKind::Config, "--config and --compare are exclusive");
      if (!flags.count("out")) throw Error(ErrorKind::Config, "missing required key 'out'");
      const std::filesystem::path base = flags["out"];
      std::vector<std::pair<std::string, RunOutcome>> runs;
      for (const auto& file : compare) {
        KeyValues kv = read_config_file(file);
        for (const auto& [k, v] : flags) kv[k] = v;
        const std::string name = std::filesystem::path(file).stem().string();
        kv["out"] = (base / name).string();
        runs.emplace_back(name, run_and_report(kv));
      }
      std::vector<std::pair<std::string, const RunMetrics*>> merged;
      for (const auto& [name, outcome] : runs) merged.emplace_back(name, &outcome.result.metrics);
      write_text(base / "comparison.csv", merged_metrics_csv(merged));
      std::printf("comparison -> %s\n", (base / "comparison.csv").string().c_str());
      return 0;
    }
    KeyValues kv = config.empty() ? KeyValues{} : read_config_file(config);
    for (const auto& [k, v] : flags) kv[k] = v;
    run_and_report(kv);
  } catch (const Error& e) {
    std::fprintf(stderr, "repfuse: %s\n", e.what());
    return exit_code(e.kind());
  }
  return 0;
}
