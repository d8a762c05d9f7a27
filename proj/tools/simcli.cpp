// Command line front end: run one scenario or sweep a configuration grid.

#include <fstream>
#include <iostream>

#include "CLI11.hpp"
#include "coopsim/report.hpp"

namespace {

coopsim::ScenarioConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  nlohmann::json j;
  in >> j;
  return j.get<coopsim::ScenarioConfig>();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"V2V cooperative perception simulator"};
  app.require_subcommand(1);

  // --- run -------------------------------------------------------------------
  auto* run = app.add_subcommand("run", "run a single scenario and write traces");
  std::string scenario = "red_light", scheduler = "greedy", out_path = "run_out";
  std::string config_path;
  int density = 10;
  double speed = 30.0, delta = 0.0;
  std::uint64_t seed = 1;
  run->add_option("--scenario", scenario, "overtaking | left_turn | red_light");
  run->add_option("--scheduler", scheduler, "greedy | optimal | fptas | agnostic | single");
  run->add_option("--density", density, "vehicles in the scheduler domain");
  run->add_option("--speed", speed, "collider base speed, km/h");
  run->add_option("--delta", delta, "intersection delta in seconds, [-2, 2]");
  run->add_option("--seed", seed, "run seed");
  run->add_option("--config", config_path, "JSON config file (overridden by flags)");
  run->add_option("--out", out_path, "output directory for traces and the result record");

  // --- sweep -----------------------------------------------------------------
  auto* sw = app.add_subcommand("sweep", "run a configuration grid and emit a report");
  std::string sweep_config, sweep_out = "sweep_out", format = "csv";
  sw->add_option("--config", sweep_config, "JSON sweep grid file")->required();
  sw->add_option("--out", sweep_out, "output directory");
  sw->add_option("--format", format, "csv | jsonl");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) {
      coopsim::ScenarioConfig cfg;
      if (!config_path.empty()) cfg = load_config(config_path);
      if (run->count("--scenario") || config_path.empty())
        cfg.scenario = coopsim::scenario_from_string(scenario);
      if (run->count("--scheduler") || config_path.empty())
        cfg.scheduler = coopsim::scheduler_from_string(scheduler);
      if (run->count("--density") || config_path.empty()) cfg.density = density;
      if (run->count("--speed") || config_path.empty()) cfg.collider_speed_kmh = speed;
      if (run->count("--delta") || config_path.empty()) cfg.delta_s = delta;
      if (run->count("--seed") || config_path.empty()) cfg.seed = seed;
      cfg.write_traces = true;

      std::string why;
      if (!cfg.valid(&why)) {
        std::cerr << "invalid config: " << why << "\n";
        return 2;
      }
      coopsim::RunArtifacts art = coopsim::run_scenario(cfg);
      art.result.trace_path = coopsim::write_run_artifacts(art, out_path);
      {
        nlohmann::json j = art.result;
        std::ofstream res(out_path + "/result.json", std::ios::binary);
        res << j.dump(2) << "\n";
      }
      std::cout << "outcome: " << coopsim::to_string(art.result.outcome)
                << "  closest: " << art.result.closest_distance_m
                << " m  reaction: " << art.result.reaction_time_s
                << " s  vis: " << art.result.collider_visible_fraction
                << "  reward: " << art.result.total_reward << "\n"
                << "traces: " << art.result.trace_path << "\n";
      return 0;
    }

    if (sw->parsed()) {
      std::ifstream in(sweep_config);
      if (!in) throw std::runtime_error("cannot open sweep config: " + sweep_config);
      nlohmann::json j;
      in >> j;
      coopsim::SweepGrid grid = j.get<coopsim::SweepGrid>();

      std::filesystem::create_directories(sweep_out);
      const auto t0 = std::chrono::steady_clock::now();
      coopsim::SweepReport report = coopsim::sweep(grid, [](std::size_t done, std::size_t total) {
        if (done % 25 == 0 || done == total) {
          std::cerr << "\r" << done << "/" << total << std::flush;
        }
      });
      const double secs =
          std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      std::cerr << "\n";

      const std::string ext = format == "jsonl" ? ".jsonl" : ".csv";
      coopsim::emit_report(report, format, sweep_out + "/report" + ext);
      std::cout << report.rows.size() << " runs in " << secs << " s, "
                << report.failures.size() << " failures\n";
      for (const auto& f : report.failures) std::cerr << "failed: " << f << "\n";
      return report.failures.empty() ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
