// Command-line driver: simulate --config <file> --workload <file> [options]

#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "npusim/graph.h"
#include "npusim/simulator.h"
#include "npusim/workload.h"

int main(int argc, char** argv) {
  CLI::App app{"Cycle-level multi-core NPU simulator"};
  std::string config_path, workload_path, report_path;
  std::vector<std::string> model_paths, overrides;
  bool trace = false, dump_config = false;
  uint64_t timeline_window = 0;
  app.add_option("--config", config_path, "Hardware configuration JSON")->required();
  app.add_option("--workload", workload_path, "Workload JSON (array of requests)");
  app.add_option("--model", model_paths, "Model graph JSON, referenced by path or graph name");
  app.add_flag("--trace", trace, "Print per-core issue/retire trace to stdout");
  app.add_option("--report", report_path, "Write the JSON report here (default: stdout)");
  app.add_option("--timeline-window", timeline_window, "Cycles per timeline CSV row (0 disables)");
  app.add_option("--override", overrides, "Config override key.path=value");
  app.add_flag("--dump-config", dump_config, "Print the materialized config and exit");
  CLI11_PARSE(app, argc, argv);

  try {
    if (timeline_window) overrides.push_back("stats.timeline_window=" + std::to_string(timeline_window));
    npusim::SimConfig cfg = npusim::load_config(config_path, overrides);
    if (dump_config) {
      std::cout << npusim::config_to_json(cfg).dump(2) << '\n';
      return 0;
    }
    if (workload_path.empty()) throw npusim::SimError(npusim::ErrorCode::kConfig, "--workload is required");
    npusim::ModelLibrary library;
    for (const auto& path : model_paths) {
      auto g = std::make_shared<const npusim::ModelGraph>(npusim::load_graph_file(path));
      library[std::filesystem::path(path).lexically_normal().string()] = g;
      library[path] = g;
      library[g->name] = g;
    }
    auto requests = npusim::load_workload(workload_path, library);
    npusim::Simulator sim(cfg, std::move(requests));
    if (trace || cfg.stats.trace) sim.set_trace(&std::cout);
    const npusim::StatReport report = sim.run();
    if (report_path.empty()) {
      std::cout << npusim::report_to_json(report).dump(2) << '\n';
    } else {
      npusim::emit_report(report, report_path);
    }
    std::cerr << "total_cycles " << report.total_cycles << '\n';
    return 0;
  } catch (const npusim::SimError& e) {
    std::cerr << "error [" << npusim::error_code_name(e.code()) << "]: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}
