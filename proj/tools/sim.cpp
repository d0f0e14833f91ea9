// Command-line front end: `sim run` for one scenario, `sim compare` for the
// controller x seed cross product.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include "vtlev/engine.hpp"
#include "vtlev/log.hpp"

namespace fs = std::filesystem;
using namespace vtlev;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 2;
constexpr int kInvariant = 3;

struct RunOptions {
  std::string config;
  std::optional<std::string> controller;
  std::optional<std::uint64_t> seed;
  std::string out = "out";
  std::vector<std::string> traces;
};

struct CompareOptions {
  std::string config;
  std::string controllers = "vtl-ev,vtl-pic,etlsa";
  std::string seeds = "1..5";
  std::string out = "out";
};

int do_run(const RunOptions& o) {
  Scenario s = load_scenario(o.config);
  if (o.controller) s.controller = parse_controller(*o.controller);
  if (o.seed) s.seed = *o.seed;
  s.validate();  // before anything touches the output directory

  std::vector<std::unique_ptr<std::ofstream>> files;
  TraceSinks sinks;
  for (const std::string& t : o.traces) {
    std::ostream** slot = t == "schedule" ? &sinks.schedule
                        : t == "platoon"  ? &sinks.platoon
                        : t == "signal"   ? &sinks.signal
                        : t == "messages" ? &sinks.messages
                                          : nullptr;
    if (slot == nullptr) throw ConfigError(fmt::format("unknown trace '{}'", t));
    if (*slot != nullptr) continue;
    fs::create_directories(o.out);
    files.push_back(std::make_unique<std::ofstream>(fs::path(o.out) / (t + "_trace.csv")));
    *slot = files.back().get();
  }

  const RunResult r = run_scenario(s, sinks);
  write_run_outputs(o.out, r);
  std::cout << r.summary_csv;
  return kOk;
}

int do_compare(const CompareOptions& o) {
  Scenario base = load_scenario(o.config);
  std::vector<ControllerKind> controllers;
  for (const std::string& c : detail::split(o.controllers, ',')) controllers.push_back(parse_controller(c));
  const auto seeds = parse_seed_list(o.seeds);
  base.validate();

  const auto runs = run_cross_product(base, controllers, seeds);
  fs::create_directories(o.out);
  std::string table = kSummaryHeader;
  for (const RunResult& r : runs) {
    write_run_outputs(fs::path(o.out) / fmt::format("{}_seed{}", r.controller, r.seed), r);
    table += r.summary_csv.substr(r.summary_csv.find('\n') + 1);
  }
  write_text(fs::path(o.out) / "comparison.csv", table);
  const std::string ranking = ranking_report(seed_average(runs));
  write_text(fs::path(o.out) / "ranking.txt", ranking);
  std::cout << ranking;
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  init_logging_from_env();
  CLI::App app{"Single-intersection traffic simulator"};
  app.require_subcommand(1);

  RunOptions ro;
  auto* run = app.add_subcommand("run", "Run one scenario");
  run->add_option("--config", ro.config, "Scenario file")->required();
  run->add_option("--controller", ro.controller, "vtl-ev | vtl-pic | etlsa");
  run->add_option("--seed", ro.seed, "Override the scenario seed");
  run->add_option("--out", ro.out, "Output directory");
  run->add_option("--trace", ro.traces, "schedule,platoon,signal,messages")->delimiter(',');

  CompareOptions co;
  auto* cmp = app.add_subcommand("compare", "Run every controller over a seed list");
  cmp->add_option("--config", co.config, "Scenario file")->required();
  cmp->add_option("--controllers", co.controllers, "Comma-separated controller list");
  cmp->add_option("--seeds", co.seeds, "Seed list, e.g. 1..5 or 1,3,7");
  cmp->add_option("--out", co.out, "Output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kConfigError;
  }

  try {
    if (*run) return do_run(ro);
    return do_compare(co);
  } catch (const ConfigError& e) {
    spdlog::error("config: {}", e.what());
    return kConfigError;
  } catch (const SafetyViolation& e) {
    spdlog::error("invariant violated: {}", e.what());
    return kInvariant;
  } catch (const ContractError& e) {
    spdlog::error("invariant violated: {}", e.what());
    return kInvariant;
  }
}
