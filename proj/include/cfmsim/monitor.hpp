#pragma once

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cfmsim/introspection.hpp"
#include "cfmsim/policy.hpp"
#include "cfmsim/simulation.hpp"

namespace cfmsim {

struct WatchedDentry {
  GuestAddr addr = 0;
  GuestAddr refcount_addr = 0;
  PageIndex page = 0;
  std::size_t policy_idx = 0;
  std::string path_key;  // scope-qualified path the watch was created under
  bool read_restricted = false;
  std::vector<GuestAddr> alias_peers;
};

struct MonitorEvent {
  enum class Kind {
    FileOpened,
    FileClosed,
    AccessBlocked,
    RefcountRescued,
    AgentKillBlocked,
    HardlinkTracked,
    UnauthorizedReadBlocked,
    StaticWriteBlocked,
  };
  std::uint64_t seq = 0;
  Kind kind = Kind::FileOpened;
  std::int64_t pid = 0;
  std::string process;
  std::int64_t uid = 0;
  std::string container;  // "host" for host scope
  std::string path;

  std::string to_line() const;
};

const char* to_string(MonitorEvent::Kind k);

enum class WatchMode {
  PageWatch,   // the paper's method: watch dentry pages out of band
  Intercept,   // rival baseline: breakpoint every file syscall entry
};

struct MonitorStats {
  std::uint64_t false_traps = 0;        // same-page accesses to unwatched objects
  std::uint64_t watched_hits = 0;       // refcount traps on watched dentries
  std::uint64_t ignored_returns = 0;    // other processes' returns in the window
  std::uint64_t migrations = 0;
  std::uint64_t migration_aborts = 0;
  std::uint64_t cache_failures = 0;     // per-file cache creation failures
};

// The out-of-guest security module: orchestrates cache creation through the
// in-guest agents, watches isolated dentry pages, interprets traps as file
// open/close activity, enforces policy at the syscall return site, and runs
// the protection suite (agent keep-alive, hardlink tracking, static-region
// write protection).
class Monitor {
 public:
  Monitor(Simulation& sim, PolicyTable policies,
          WatchMode mode = WatchMode::PageWatch);

  // Registers trap handlers, arms the always-on breakpoints and the static
  // write protection. Call once, before any workload runs.
  void attach();

  // Drives agent-based cache creation and arms the watchpoints. `placement`
  // selects where the agents place monitored dentries (the paper's method
  // uses Isolated; Default reproduces the co-located rival).
  const std::vector<WatchedDentry>& create_caches(Placement placement = Placement::Isolated);

  // Moves a dentry into the isolated region, rewriting every reference
  // (hash chain, alias cycle, children, fd tables) out of band. Returns the
  // new address, or the old one when migration had to abort.
  GuestAddr migrate_dentry(GuestAddr addr);

  std::size_t arm_watchpoints();
  std::size_t protect_static_regions();

  // Queues policies delivered after startup; the agent fetches them on its
  // next poll round.
  void add_runtime_policies(std::vector<Policy> policies);

  // Direct watch installation for an already cached dentry (test hook and
  // migration fallback path).
  std::size_t watch_dentry(GuestAddr addr, std::size_t policy_idx);

  const std::vector<WatchedDentry>& watch_set() const { return watched_; }
  std::size_t armed_pages() const;
  std::uint64_t watched_bytes() const;
  const MonitorStats& stats() const { return stats_; }
  const std::vector<MonitorEvent>& events() const { return events_; }
  std::string render_events() const;
  const std::vector<std::string>& warnings() const { return warnings_; }
  const PolicyTable& policies() const { return policies_; }

 private:
  Disposition on_violation(const VmExitEvent& ev);
  void on_entry(const VmExitEvent& ev, SyscallEntryArgs& args);
  void on_return(const VmExitEvent& ev, std::int64_t provisional);
  std::string on_monitor_syscall(const VmExitEvent& ev, std::string_view payload);

  Disposition handle_refcount_write(const VmExitEvent& ev, std::size_t widx);
  Disposition handle_watched_read(const VmExitEvent& ev, std::size_t widx);

  void complete_cache_creation(const std::string& payload);
  void watch_agent_fd_targets(std::int64_t agent_pid);
  void track_alias_cycle(std::size_t widx);
  void log(MonitorEvent::Kind kind, const std::optional<introspection::ProcessInfo>& who,
           const std::string& path);

  std::optional<std::size_t> watch_by_refcount(GuestAddr addr) const;
  std::optional<std::size_t> watch_containing(GuestAddr addr) const;
  void index_watch(std::size_t idx);
  void update_return_arming();

  Simulation& sim_;
  Hypervisor& hv_;
  PolicyTable policies_;
  WatchMode mode_;
  introspection::Registry registry_;
  bool registry_ready_ = false;
  const introspection::Registry& registry();

  std::vector<WatchedDentry> watched_;
  std::map<GuestAddr, std::size_t> by_refcount_;
  std::map<GuestAddr, std::size_t> by_base_;
  std::set<PageIndex> armed_pages_;
  std::set<PageIndex> static_pages_;
  std::set<std::int64_t> agent_pids_;
  Placement cache_placement_ = Placement::Isolated;
  bool caches_created_ = false;

  struct PendingBlock {
    GuestAddr refcount_addr = 0;
    std::size_t widx = 0;
    std::int64_t pid = 0;
  };
  // Keyed by (address_space_id, stack_id), exactly the pair the return-site
  // compare uses.
  std::map<std::pair<std::uint64_t, std::uint64_t>, PendingBlock> pending_blocks_;
  // Alias-closure repairs deferred to the owning syscall's return site.
  std::map<std::pair<std::uint64_t, std::uint64_t>, std::set<std::size_t>> pending_repairs_;

  std::vector<Policy> runtime_queue_;

  std::vector<MonitorEvent> events_;
  std::uint64_t event_seq_ = 0;
  MonitorStats stats_;
  std::vector<std::string> warnings_;
};

}  // namespace cfmsim
