#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "json.hpp"

#include "cfmsim/monitor.hpp"
#include "cfmsim/simulation.hpp"

namespace cfmsim {

// Seeded random syscall workload with interleaved in-flight instances; the
// context-switch behavior that exercises return-site matching.
struct RandomTraceConfig {
  std::uint64_t ops = 100;
  std::uint64_t seed = 1;
  std::vector<std::int64_t> procs;
  std::vector<std::string> files;  // scope-qualified
  std::vector<std::int64_t> kill_targets;
  std::size_t max_inflight = 4;
  std::uint64_t prune_every = 0;  // 0 = no periodic prune
};

struct TraceStats {
  std::uint64_t submitted = 0;
  std::uint64_t prunes = 0;
  std::uint64_t pruned_dentries = 0;
  // Set false if any watched dentry was found dead or below refcount 1
  // right after a prune cycle.
  bool watch_liveness_ok = true;
};

TraceStats run_random_trace(Simulation& sim, const RandomTraceConfig& cfg,
                            const Monitor* monitor);

// Executes a scripted trace (scenario "trace" array). Close/io entries may
// address files by path; the runner tracks descriptors. Returns one line
// per executed op for the log.
std::vector<std::string> run_scripted_trace(Simulation& sim, const nlohmann::json& trace,
                                            const Monitor* monitor, std::uint64_t seed);

}  // namespace cfmsim
