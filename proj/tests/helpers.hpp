#pragma once

#include <map>
#include <memory>
#include <set>
#include <string>
#include <vector>

#include "cfmsim/introspection.hpp"
#include "cfmsim/monitor.hpp"
#include "cfmsim/simulation.hpp"

namespace cfmtest {

using namespace cfmsim;

// A guest with one container ("web") over a base image plus a few host
// files. Mirrors the corpus scenarios but built directly against the
// library so unit tests stay independent of the scenario loader.
struct World {
  std::unique_ptr<Simulation> sim;
  std::int64_t httpd = 101;
  std::int64_t evil = 102;
  std::int64_t shell = 2;
  std::int64_t intruder = 3;

  explicit World(std::uint64_t pages = 1024) {
    SimulationConfig cfg;
    cfg.memory.page_count = pages;
    cfg.memory.isolated_pages = 64;
    sim = std::make_unique<Simulation>(std::move(cfg));
    auto& k = sim->kernel();
    k.add_host_file("/usr/bin/runc", "RUNC-BINARY-v1");
    k.add_host_file("/etc/hosts", "localhost");
    k.add_host_file("/data/a.txt", "alpha");
    k.add_host_file("/data/b.txt", "beta");
    k.layers().add_layer("web-base");
    k.layers().put_file("web-base", "/www/target.html", "<h1>welcome</h1>");
    k.layers().put_file("web-base", "/bin/login", "LOGIN-BIN-v1");
    k.layers().put_file("web-base", "/etc/config", "cfg=1");
    k.define_container("web", {"web-base"}, "web-upper");
    k.spawn_process({shell, "shell", 0, FsScope::host(), false});
    k.spawn_process({intruder, "intruder", 1000, FsScope::host(), false});
    k.spawn_process({httpd, "httpd", 33, FsScope::in("web"), false});
    k.spawn_process({evil, "evil", 1000, FsScope::in("web"), false});
  }

  GuestKernel& kernel() { return sim->kernel(); }
  Hypervisor& hv() { return sim->hypervisor(); }
};

// Independent reference-count oracle: recount every dentry's references from
// the fd tables and parent links, reading raw memory through the profile
// only (never the kernel's own bookkeeping).
inline std::map<GuestAddr, std::uint64_t> recount_refcounts(Simulation& sim) {
  const LayoutProfile& prof = sim.profile();
  const Hypervisor& hv = sim.hypervisor();
  std::map<GuestAddr, std::uint64_t> expect;
  for (const auto& [addr, obj] : sim.allocator().objects())
    if (obj.kind == "dentry") expect[addr] = 0;

  // Open-file records: walk the task list and every fd table.
  GuestAddr init = hv.vmi_read_u64(prof.field_addr(0, "globals", "init_task"));
  GuestAddr cur = init;
  if (cur) {
    do {
      GuestAddr fdt = hv.vmi_read_u64(prof.field_addr(cur, "process", "fd_table"));
      if (fdt) {
        for (std::uint32_t i = 0; i < prof.field("fdtable", "slots").size / 8; ++i) {
          GuestAddr fobj = hv.vmi_read_u64(fdt + i * 8);
          if (!fobj) continue;
          GuestAddr d = hv.vmi_read_u64(prof.field_addr(fobj, "file", "dentry"));
          if (expect.count(d)) expect[d]++;
        }
      }
      cur = hv.vmi_read_u64(prof.field_addr(cur, "process", "tasks_next"));
    } while (cur && cur != init);
  }

  // Child pins.
  for (const auto& [addr, obj] : sim.allocator().objects()) {
    if (obj.kind != "dentry") continue;
    GuestAddr parent = hv.vmi_read_u64(prof.field_addr(addr, "dentry", "parent"));
    if (parent && expect.count(parent)) expect[parent]++;
  }
  return expect;
}

// Checks refcount agreement at a quiescent point. Watched dentries may sit
// one above the recount when the keep-alive rescue pinned them.
inline bool refcounts_match(Simulation& sim, const std::set<GuestAddr>& rescued = {}) {
  const LayoutProfile& prof = sim.profile();
  auto expect = recount_refcounts(sim);
  for (const auto& [addr, want] : expect) {
    std::uint64_t got =
        sim.hypervisor().vmi_read_u64(prof.field_addr(addr, "dentry", "refcount"));
    std::uint64_t wanted = want;
    if (rescued.count(addr) && wanted == 0) wanted = 1;
    if (got != wanted) return false;
  }
  return true;
}

// Reference union resolution over explicit layer maps, independent of the
// kernel's LayerStore bookkeeping.
inline std::string union_resolve_oracle(
    const std::vector<std::pair<std::string, std::map<std::string, std::string>>>& layers,
    const std::string& path) {
  for (const auto& [id, files] : layers) {
    auto it = files.find(path);
    if (it != files.end()) return id;
  }
  return "";
}

}  // namespace cfmtest
