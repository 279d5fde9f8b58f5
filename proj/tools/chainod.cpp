#include <cstdlib>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "chainod/experiment.hpp"
#include "chainod/report.hpp"
#include "chainod/scenario.hpp"

namespace {

enum Exit { ok = 0, config = 1, numerical = 2, io = 3 };

std::vector<std::string> split_models(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ','))
    if (!item.empty()) out.push_back(item);
  return out;
}

chainod::ScenarioConfig load_valid(const std::string& path) {
  auto cfg = chainod::load_scenario(path);
  const auto problems = cfg.validate();
  if (!problems.empty()) {
    for (const auto& p : problems) std::cerr << "error: " << p << '\n';
    throw chainod::ConfigError("scenario " + path + " is invalid");
  }
  return cfg;
}

void print_table(const chainod::ExperimentReport& r) {
  std::cout << "scenario " << r.scenario << ", seed " << r.seed << ", cutoff interval " << r.cutoff << "\n";
  std::cout << chainod::report_csv(r);
  for (const auto& row : r.rows) {
    if (!row.ok) std::cerr << "warning: model " << chainod::model_label(row.model) << " failed: " << row.error << '\n';
    if (row.ok && row.prediction)
      std::cout << chainod::model_label(row.model) << " forecast from the cutoff: evening OD RMSE "
                << row.prediction->rmse_od_evening << " (seed " << r.row(chainod::ModelKind::seed)->rmse_od_evening
                << "), loader calls " << row.prediction->loader_calls << '\n';
  }
}

void show_network(const chainod::ScenarioConfig& cfg) {
  const auto& net = cfg.network;
  std::cout << "zones:\n";
  for (const auto& z : net.zones) std::cout << "  " << z.id << " (" << chainod::to_string(z.kind) << ") at node " << z.node << '\n';
  std::cout << "links:\n";
  for (const auto& l : net.links)
    std::cout << "  " << l.id << ": " << l.from_node << " -> " << l.to_node << " road " << l.label << ", t0 "
              << l.free_flow_time << " min, capacity " << l.capacity << " veh/h, BPR " << l.bpr_alpha << '/'
              << l.bpr_beta << '\n';
  std::cout << "paths:\n";
  for (const auto& p : net.paths) {
    std::cout << "  " << chainod::to_string(p.od) << ":";
    for (int id : p.links) std::cout << ' ' << id;
    std::cout << '\n';
  }
  std::cout << "detectors:\n";
  for (const auto& d : net.detectors) std::cout << "  " << d.name << " on link " << d.link_id << '\n';
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Online OD demand estimation with trip chains"};
  app.require_subcommand(1);

  std::string scenario;
  std::string models;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool emit_profiles = false;
  bool refresh = false;

  auto* run = app.add_subcommand("run", "Run the estimation experiment");
  run->add_option("--scenario", scenario, "Scenario file")->required();
  run->add_option("--models", models, "Comma-separated subset of seed,kf,pkf,spkf");
  auto* seed_opt = run->add_option("--seed", seed, "Random seed (overrides the scenario)");
  run->add_option("--out", out_dir, "Output directory for report files");
  run->add_flag("--emit-profiles", emit_profiles, "Write per-OD profile CSVs");
  run->add_flag("--refresh-assignment", refresh, "Relinearise the assignment at the cutoff");

  auto* validate = app.add_subcommand("validate", "Check a scenario file");
  validate->add_option("--scenario", scenario, "Scenario file")->required();

  auto* show = app.add_subcommand("show-network", "Print the scenario's network");
  show->add_option("--scenario", scenario, "Scenario file")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*validate) {
      const auto cfg = load_valid(scenario);
      std::cout << "ok: " << cfg.name << ", " << cfg.legs.size() << " legs, " << cfg.od_index().size()
                << " OD pairs, " << cfg.network.detectors.size() << " detector channels\n";
      for (const auto& leg : cfg.legs)
        for (const auto& w : leg.schedule.warnings()) std::cout << "warning: leg " << leg.name << ": " << w << '\n';
      return Exit::ok;
    }
    if (*show) {
      show_network(load_valid(scenario));
      return Exit::ok;
    }
    auto cfg = chainod::load_scenario(scenario);
    if (!models.empty()) cfg.models = split_models(models);
    if (*seed_opt) cfg.seed = seed;
    if (refresh) cfg.estimation.refresh_assignment = true;
    const auto problems = cfg.validate();
    if (!problems.empty()) {
      for (const auto& p : problems) std::cerr << "error: " << p << '\n';
      return Exit::config;
    }
    const auto report = chainod::run_experiment(cfg);
    print_table(report);
    if (!out_dir.empty()) {
      chainod::EmitOptions opts;
      opts.profiles = emit_profiles;
      opts.profile_ods = cfg.profile_ods;
      chainod::emit_report(report, out_dir, opts);
      std::cout << "wrote " << out_dir << '\n';
    }
    for (const auto& row : report.rows)
      if (!row.ok) return Exit::numerical;
    return Exit::ok;
  } catch (const chainod::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return Exit::io;
  } catch (const chainod::NumericalError& e) {
    std::cerr << "numerical error: " << e.what() << '\n';
    return Exit::numerical;
  } catch (const chainod::ConfigError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return Exit::config;
  } catch (const chainod::DomainError& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return Exit::config;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return Exit::numerical;
  }
}
