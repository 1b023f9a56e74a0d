#include "cfmsim/introspection.hpp"

#include <algorithm>

namespace cfmsim {
namespace introspection {

Registry Registry::from_kernel(const GuestKernel& kernel) {
  Registry r;
  r.initial_pid_ns = kernel.initial_ns().pid_ns;
  for (const auto& [cid, info] : kernel.containers()) {
    r.ns_to_container[info.ns.pid_ns] = cid;
    ContainerEntry e;
    e.pid_ns = info.ns.pid_ns;
    e.layers = info.lower_layers;
    e.upper_layer = info.upper_layer;
    r.containers[cid] = std::move(e);
  }
  return r;
}

std::vector<ProcessInfo> walk_process_list(const Hypervisor& hv,
                                           const LayoutProfile& profile,
                                           const Registry& reg, bool reverse) {
  std::vector<ProcessInfo> out;
  const GuestAddr init = hv.vmi_read_u64(profile.field_addr(0, layout::kGlobals, "init_task"));
  if (!init) return out;
  const char* link = reverse ? "tasks_prev" : "tasks_next";
  GuestAddr cur = init;
  std::uint64_t steps = 0;
  do {
    if (++steps > 65536)
      throw SimFault("introspection: task list does not close at the initial task");
    ProcessInfo p;
    p.task_addr = cur;
    p.pid = std::int64_t(hv.vmi_read_u64(profile.field_addr(cur, layout::kProcess, "pid")));
    p.uid = std::int64_t(hv.vmi_read_u64(profile.field_addr(cur, layout::kProcess, "uid")));
    p.name = hv.vmi_read_cstr(profile.field_addr(cur, layout::kProcess, "name"),
                              profile.field(layout::kProcess, "name").size);
    p.pid_ns = hv.vmi_read_u64(profile.field_addr(cur, layout::kProcess, "pid_ns"));
    p.address_space_id =
        hv.vmi_read_u64(profile.field_addr(cur, layout::kProcess, "address_space_id"));
    std::uint8_t alive_byte = 0;
    hv.vmi_read(profile.field_addr(cur, layout::kProcess, "alive"), {&alive_byte, 1});
    std::uint8_t hidden_byte = 0;
    hv.vmi_read(profile.field_addr(cur, layout::kProcess, "hidden"), {&hidden_byte, 1});
    p.hidden = hidden_byte != 0;
    if (p.pid_ns != reg.initial_pid_ns) {
      auto it = reg.ns_to_container.find(p.pid_ns);
      p.container_id = it != reg.ns_to_container.end()
                           ? it->second
                           : "ns-" + std::to_string(p.pid_ns);
    }
    if (alive_byte != 0) out.push_back(std::move(p));
    cur = hv.vmi_read_u64(profile.field_addr(cur, layout::kProcess, link));
    if (cur == 0)
      throw SimFault("introspection: task list link is null");
  } while (cur != init);
  if (reverse) std::reverse(out.begin(), out.end());
  if (!out.empty()) {
    // Keep the anchor first in both directions.
    auto it = std::find_if(out.begin(), out.end(),
                           [&](const ProcessInfo& p) { return p.task_addr == init; });
    if (it != out.begin() && it != out.end()) std::rotate(out.begin(), it, out.end());
  }
  return out;
}

ContainerMap group_containers(const std::vector<ProcessInfo>& procs,
                              const Registry& reg) {
  ContainerMap out;
  for (const auto& p : procs) {
    if (p.is_host()) continue;
    ContainerEntry& e = out[p.container_id];
    e.pid_ns = p.pid_ns;
    auto it = reg.containers.find(p.container_id);
    if (it != reg.containers.end()) {
      e.layers = it->second.layers;
      e.upper_layer = it->second.upper_layer;
    }
    e.member_pids.push_back(p.pid);
  }
  for (auto& [cid, e] : out) std::sort(e.member_pids.begin(), e.member_pids.end());
  return out;
}

std::optional<PathResolution> resolve_container_path(const Registry& reg,
                                                     const LayerStore& layers,
                                                     const std::string& container_id,
                                                     const std::string& path) {
  auto it = reg.containers.find(container_id);
  if (it == reg.containers.end()) return std::nullopt;
  std::vector<std::string> order;
  order.push_back(it->second.upper_layer);
  for (const auto& l : it->second.layers) order.push_back(l);
  auto hit = layers.resolve_union(order, path);
  if (!hit) return std::nullopt;
  PathResolution r;
  r.layer = hit->layer;
  r.host_path = "/var/lib/cfm/layers/" + hit->layer + path;
  return r;
}

std::optional<ProcessInfo> attribute_access(const Hypervisor& hv,
                                            const LayoutProfile& profile,
                                            const Registry& reg,
                                            const ProcContext& ctx) {
  if (ctx.address_space_id == 0) return std::nullopt;
  for (auto& p : walk_process_list(hv, profile, reg))
    if (p.address_space_id == ctx.address_space_id) return p;
  return std::nullopt;
}

std::string dentry_path_via_vmi(const Hypervisor& hv, const LayoutProfile& profile,
                                GuestAddr dentry) {
  std::vector<std::string> parts;
  GuestAddr cur = dentry;
  std::string root;
  std::uint64_t steps = 0;
  while (cur) {
    if (++steps > 4096) throw SimFault("introspection: dentry parent chain corrupt");
    std::string name = hv.vmi_read_cstr(profile.field_addr(cur, layout::kDentry, "name"),
                                        profile.field(layout::kDentry, "name").size);
    GuestAddr par = hv.vmi_read_u64(profile.field_addr(cur, layout::kDentry, "parent"));
    if (par == 0) {
      root = name;
      break;
    }
    parts.push_back(name);
    cur = par;
  }
  std::string scope = root == "/" ? "host" : (root.size() > 2 ? root.substr(2) : "host");
  std::string path;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) path += "/" + *it;
  if (path.empty()) path = "/";
  return scope + ":" + path;
}

}  // namespace introspection
}  // namespace cfmsim
