#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cfmsim/scenario.hpp"

namespace cfmsim {

struct CellMetrics {
  Strategy strategy = Strategy::NoMonitoring;
  MetricsReport metrics;            // hypervisor account + monitor stats
  double cycles = 0;
  double overhead_pct = 0;          // vs the NoMonitoring cell, same workload
  std::uint64_t ept_violations = 0;
  std::uint64_t breakpoints = 0;
  std::uint64_t false_traps = 0;
};

struct StartupRow {
  std::uint64_t files = 0;
  double modeled_cycles = 0;
  double overhead_pct = 0;
  double cfwatcher_overhead_pct = 0;
  std::uint64_t watch_pages = 0;
  std::uint64_t watched = 0;
};

// Reproduces the evaluation structure at desk scale, as trap counts and
// cost-model ratios. Every cell runs in its own simulation instance.
class Bench {
 public:
  explicit Bench(const Scenario& sc) : sc_(sc) {}

  CellMetrics run_file_io(const FileIoWorkload& spec, Strategy strategy,
                          std::optional<double> baseline_cycles = {});
  std::vector<StartupRow> run_startup(const StartupWorkload& spec);
  CellMetrics run_mem_copy(const MemCopyWorkload& spec, Strategy strategy,
                           std::optional<double> baseline_cycles = {});

  // Full cross-product over the scenario's workloads with ordering
  // assertions evaluated into assert.* keys. Selectors: "all" or a workload
  // name / kind.
  MetricsReport compare_strategies(const std::vector<Strategy>& strategies,
                                   const std::string& workload_selector = "all");

 private:
  void fill_common(CellMetrics& cell, ScenarioInstance& inst);

  const Scenario& sc_;
};

std::string render_table(const MetricsReport& report);

}  // namespace cfmsim
