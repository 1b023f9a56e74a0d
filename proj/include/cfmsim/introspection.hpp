#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "cfmsim/guest_kernel.hpp"
#include "cfmsim/hypervisor.hpp"
#include "cfmsim/layout_profile.hpp"

namespace cfmsim {
namespace introspection {

// Out-of-guest view of one process, reconstructed purely from raw memory
// plus the layout profile.
struct ProcessInfo {
  std::int64_t pid = 0;
  std::string name;
  std::int64_t uid = 0;
  std::string container_id;  // empty = host
  std::uint64_t pid_ns = 0;
  std::uint64_t address_space_id = 0;
  bool hidden = false;
  GuestAddr task_addr = 0;

  bool is_host() const { return container_id.empty(); }
};

struct ContainerEntry {
  std::uint64_t pid_ns = 0;
  std::vector<std::string> layers;
  std::string upper_layer;
  std::vector<std::int64_t> member_pids;
};

using ContainerMap = std::map<std::string, ContainerEntry>;

// Engine metadata taken from the scenario: which namespace and layers belong
// to which container id.
struct Registry {
  std::uint64_t initial_pid_ns = 0;
  std::map<std::uint64_t, std::string> ns_to_container;
  std::map<std::string, ContainerEntry> containers;

  static Registry from_kernel(const GuestKernel& kernel);
};

// Walks the guest task list through raw memory reads only. Faults if the
// doubly linked list does not close back at the initial task.
std::vector<ProcessInfo> walk_process_list(const Hypervisor& hv,
                                           const LayoutProfile& profile,
                                           const Registry& reg,
                                           bool reverse = false);

ContainerMap group_containers(const std::vector<ProcessInfo>& procs,
                              const Registry& reg);

struct PathResolution {
  std::string layer;
  std::string host_path;
};
std::optional<PathResolution> resolve_container_path(const Registry& reg,
                                                     const LayerStore& layers,
                                                     const std::string& container_id,
                                                     const std::string& path);

// Resolves the process behind a trap context. Unknown attribution is
// fail-closed by callers.
std::optional<ProcessInfo> attribute_access(const Hypervisor& hv,
                                            const LayoutProfile& profile,
                                            const Registry& reg,
                                            const ProcContext& ctx);

// Rebuilds the scope-qualified path of a dentry by walking parent links
// through raw memory.
std::string dentry_path_via_vmi(const Hypervisor& hv, const LayoutProfile& profile,
                                GuestAddr dentry);

}  // namespace introspection
}  // namespace cfmsim
