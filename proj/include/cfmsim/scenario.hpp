#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cfmsim/monitor.hpp"
#include "cfmsim/simulation.hpp"

namespace cfmsim {

enum class Strategy { NoMonitoring, InterceptAllSyscalls, SharedPageWatch, IsolatedPageWatch };
const char* to_string(Strategy s);
std::optional<Strategy> strategy_from_string(const std::string& s);

struct FileIoWorkload {
  std::string name;
  std::uint64_t total_bytes = 64ull << 20;
  std::uint64_t block_size = 256ull << 10;
  IoDir dir = IoDir::Read;
  std::vector<std::string> files;  // scope-qualified
  std::int64_t runner = 0;
};

struct StartupWorkload {
  std::string name;
  std::vector<std::uint64_t> counts;
  std::string files_dir;  // host-scope directory holding the monitored files
  std::uint64_t files_count = 0;
};

struct MemCopyWorkload {
  enum class Mode { MEMCPY, DUMP, MCBLOCK };
  std::string name;
  Mode mode = Mode::MEMCPY;
  std::uint64_t bytes = 128ull << 20;
};

struct AttackConfig {
  std::int64_t host_attacker = 0;
  std::int64_t container_attacker = 0;
  std::string container;
  std::string runc_path = "/usr/bin/runc";
  std::string web_page = "/www/target.html";
  std::string web_reader = "httpd";
  std::string login_path = "/bin/login";
};

// One scenario document drives everything: memory geometry, image layers,
// containers and rosters, policies, workloads, the scripted trace, and the
// cost model. The seed is mandatory so every run is reproducible.
struct Scenario {
  std::string source;  // file name for diagnostics
  std::uint64_t seed = 0;
  GuestMemoryConfig memory;
  LayoutProfile profile = LayoutProfile::defaults();
  CostModel cost = CostModel::defaults();

  struct FileSpec {
    std::string path;
    std::string content;
    bool readable = true;
    bool writable = true;
  };
  struct LayerSpec {
    std::string id;
    std::vector<FileSpec> files;
    std::vector<std::string> dirs;
  };
  struct ProcSpec {
    std::int64_t pid = 0;
    std::string name;
    std::int64_t uid = 0;
  };
  struct ContainerSpec {
    std::string id;
    std::vector<std::string> layers;  // topmost lower first
    std::string upper;
    std::vector<ProcSpec> processes;
    std::optional<ProcSpec> hidden_agent;
  };

  std::vector<LayerSpec> layers;
  std::vector<FileSpec> host_files;
  std::vector<ContainerSpec> containers;
  std::vector<ProcSpec> host_processes;
  std::optional<ProcSpec> security_agent;

  nlohmann::json policy_doc;
  std::vector<Policy> policies;
  std::vector<std::string> policy_rejects;

  std::vector<FileIoWorkload> fileio;
  std::vector<StartupWorkload> startup;
  std::vector<MemCopyWorkload> memcopy;
  std::optional<AttackConfig> attack;

  nlohmann::json trace = nlohmann::json::array();
};

// Throws ConfigError (with a document position) on structural problems.
Scenario parse_scenario(const nlohmann::json& doc, const std::string& source);
Scenario load_scenario(const std::string& path);

// Referential checks only, no simulation. Returns one "location: message"
// line per violation.
std::vector<std::string> validate_scenario(const Scenario& sc);

// A booted scenario instance under one monitoring strategy.
struct ScenarioInstance {
  std::unique_ptr<Simulation> sim;
  std::unique_ptr<Monitor> monitor;  // null under NoMonitoring

  GuestKernel& kernel() { return sim->kernel(); }
  Hypervisor& hv() { return sim->hypervisor(); }
};

// Boots the guest, loads layers and rosters, runs cache creation under the
// strategy's placement, arms protections, and starts the containers.
ScenarioInstance build_instance(const Scenario& sc, Strategy strategy,
                                std::optional<std::uint64_t> seed_override = {});

}  // namespace cfmsim
