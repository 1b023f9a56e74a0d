#include <random>

#include "doctest.h"

#include "helpers.hpp"

using namespace cfmsim;
using namespace cfmsim::introspection;
using cfmtest::World;

TEST_CASE("fresh guest shows only the init task") {
  SimulationConfig cfg;
  cfg.memory.page_count = 512;
  Simulation sim(std::move(cfg));
  auto reg = Registry::from_kernel(sim.kernel());
  auto procs = walk_process_list(sim.hypervisor(), sim.profile(), reg);
  REQUIRE(procs.size() == 1);
  CHECK(procs[0].pid == 1);
  CHECK(procs[0].name == "init");
  CHECK(procs[0].is_host());
}

TEST_CASE("reconstructed roster matches guest ground truth") {
  World w;
  auto& k = w.kernel();
  k.define_container("db", {"web-base"}, "db-upper");
  for (int i = 0; i < 2; ++i)
    k.spawn_process({200 + i, "postgres", 70, FsScope::in("db"), false});

  auto reg = Registry::from_kernel(k);
  auto procs = walk_process_list(w.hv(), w.sim->profile(), reg);

  auto truth = k.roster();
  std::size_t alive = 0;
  for (const auto& t : truth)
    if (t.alive) alive++;
  REQUIRE(procs.size() == alive);
  for (const auto& p : procs) {
    auto t = k.proc(p.pid);
    REQUIRE(t.has_value());
    CHECK(t->alive);
    CHECK(p.name == t->name);
    CHECK(p.uid == t->uid);
    CHECK(p.address_space_id == t->address_space_id);
    CHECK(p.container_id == t->scope.container);
    CHECK(p.hidden == t->hidden);
  }
}

TEST_CASE("forward walk equals reverse walk") {
  World w;
  auto reg = Registry::from_kernel(w.kernel());
  auto fwd = walk_process_list(w.hv(), w.sim->profile(), reg, false);
  auto rev = walk_process_list(w.hv(), w.sim->profile(), reg, true);
  REQUIRE(fwd.size() == rev.size());
  for (std::size_t i = 0; i < fwd.size(); ++i) CHECK(fwd[i].pid == rev[i].pid);
}

TEST_CASE("a corrupted task link faults introspection") {
  World w;
  const auto& prof = w.sim->profile();
  GuestAddr init = w.hv().vmi_read_u64(prof.field_addr(0, "globals", "init_task"));
  GuestAddr task = w.kernel().proc(w.shell)->task_addr;
  // Break the cycle: point the shell's next link at itself.
  w.hv().vmi_write_u64(prof.field_addr(task, "process", "tasks_next"), task);
  auto reg = Registry::from_kernel(w.kernel());
  CHECK_THROWS_AS(walk_process_list(w.hv(), prof, reg), SimFault);
  (void)init;
}

TEST_CASE("group_containers partitions non-host processes") {
  World w;
  auto& k = w.kernel();
  k.define_container("db", {"web-base"}, "db-upper");
  k.spawn_process({201, "postgres", 70, FsScope::in("db"), false});
  k.spawn_process({190, "hidsvc", 0, FsScope::in("web"), /*hidden=*/true});

  auto reg = Registry::from_kernel(k);
  auto procs = walk_process_list(w.hv(), w.sim->profile(), reg);
  auto cmap = group_containers(procs, reg);
  REQUIRE(cmap.size() == 2);
  CHECK(cmap.count("web") == 1);
  CHECK(cmap.count("db") == 1);
  // Hidden agents are grouped with their containers: introspection, unlike
  // getdents, sees them.
  auto& web = cmap["web"];
  CHECK(std::find(web.member_pids.begin(), web.member_pids.end(), 190) !=
        web.member_pids.end());
  CHECK(web.upper_layer == "web-upper");

  // Partition: disjoint and covering all non-host processes.
  std::set<std::int64_t> seen;
  std::size_t total = 0;
  for (const auto& [cid, e] : cmap) {
    for (auto pid : e.member_pids) {
      CHECK(seen.insert(pid).second);
      total++;
    }
  }
  std::size_t nonhost = 0;
  for (const auto& p : procs)
    if (!p.is_host()) nonhost++;
  CHECK(total == nonhost);
}

TEST_CASE("all-host roster groups into an empty container map") {
  SimulationConfig cfg;
  cfg.memory.page_count = 512;
  Simulation sim(std::move(cfg));
  sim.kernel().spawn_process({2, "sshd", 0, FsScope::host(), false});
  auto reg = Registry::from_kernel(sim.kernel());
  auto cmap = group_containers(
      walk_process_list(sim.hypervisor(), sim.profile(), reg), reg);
  CHECK(cmap.empty());
}

TEST_CASE("container path resolution prefers the topmost layer") {
  World w;
  auto reg = Registry::from_kernel(w.kernel());
  auto r = resolve_container_path(reg, w.kernel().layers(), "web", "/www/target.html");
  REQUIRE(r.has_value());
  CHECK(r->layer == "web-base");

  // Copy-up flips ownership to the upper layer.
  REQUIRE(w.kernel().sys_open(w.evil, "/www/target.html", OpenMode::ReadWrite) >= 0);
  r = resolve_container_path(reg, w.kernel().layers(), "web", "/www/target.html");
  REQUIRE(r.has_value());
  CHECK(r->layer == "web-upper");
  CHECK(r->host_path == "/var/lib/cfm/layers/web-upper/www/target.html");

  CHECK_FALSE(resolve_container_path(reg, w.kernel().layers(), "web", "/absent").has_value());
}

TEST_CASE("random layer stacks agree with the union oracle") {
  std::mt19937_64 rng(12);
  for (int round = 0; round < 10; ++round) {
    SimulationConfig cfg;
    cfg.memory.page_count = 512;
    Simulation sim(std::move(cfg));
    auto& k = sim.kernel();
    std::vector<std::pair<std::string, std::map<std::string, std::string>>> model;
    std::vector<std::string> lowers;
    for (int l = 0; l < 3; ++l) {
      std::string id = "l" + std::to_string(l);
      k.layers().add_layer(id);
      std::map<std::string, std::string> files;
      for (int f = 0; f < 6; ++f) {
        if (rng() % 2) continue;
        std::string path = "/f" + std::to_string(f);
        std::string content = id + "-" + std::to_string(f);
        k.layers().put_file(id, path, content);
        files[path] = content;
      }
      lowers.push_back(id);
      model.push_back({id, std::move(files)});
    }
    k.define_container("c", lowers, "c-upper");
    model.insert(model.begin(), {"c-upper", {}});
    auto reg = Registry::from_kernel(k);
    for (int f = 0; f < 6; ++f) {
      std::string path = "/f" + std::to_string(f);
      auto got = resolve_container_path(reg, k.layers(), "c", path);
      std::string want = cfmtest::union_resolve_oracle(model, path);
      if (want.empty()) {
        CHECK_FALSE(got.has_value());
      } else {
        REQUIRE(got.has_value());
        CHECK(got->layer == want);
      }
    }
  }
}

TEST_CASE("attribute_access resolves trap contexts to processes") {
  World w;
  auto reg = Registry::from_kernel(w.kernel());
  auto t = w.kernel().proc(w.httpd);
  ProcContext ctx{t->pid, t->address_space_id, 777};
  auto got = attribute_access(w.hv(), w.sim->profile(), reg, ctx);
  REQUIRE(got.has_value());
  CHECK(got->name == "httpd");
  CHECK(got->container_id == "web");

  auto host = w.kernel().proc(w.shell);
  ProcContext hctx{host->pid, host->address_space_id, 778};
  auto hgot = attribute_access(w.hv(), w.sim->profile(), reg, hctx);
  REQUIRE(hgot.has_value());
  CHECK(hgot->is_host());

  ProcContext bogus{4444, 0xdead0000, 1};
  CHECK_FALSE(attribute_access(w.hv(), w.sim->profile(), reg, bogus).has_value());
}

TEST_CASE("attribution under interleaved syscalls matches the kernel's record") {
  World w;
  auto& k = w.kernel();
  auto reg = Registry::from_kernel(k);

  std::vector<std::pair<ProcContext, std::int64_t>> seen;
  w.hv().set_violation_handler([&](const VmExitEvent& ev) {
    seen.emplace_back(ev.ctx, ev.ctx.pid);
    return Disposition::pass();
  });
  // Arm the page hosting the two target dentries so opens trap.
  REQUIRE(k.sys_open(w.shell, "/data/a.txt", OpenMode::ReadOnly) >= 0);
  GuestAddr d = k.lookup_dentry(FsScope::host(), "/data/a.txt");
  w.hv().set_page_perms(w.sim->memory().page_of(d), true, false);

  Call ca;
  ca.op = SyscallName::Open;
  ca.path = "/data/a.txt";
  std::uint64_t ia = k.submit(w.shell, ca);
  std::uint64_t ib = k.submit(w.intruder, ca);
  k.finish(ia);
  k.finish(ib);

  REQUIRE(!seen.empty());
  for (const auto& [ctx, true_pid] : seen) {
    auto got = attribute_access(w.hv(), w.sim->profile(), reg, ctx);
    REQUIRE(got.has_value());
    CHECK(got->pid == true_pid);
  }
}

TEST_CASE("introspection generates zero trap events") {
  World w;
  auto& k = w.kernel();
  k.spawn_process({190, "hidsvc", 0, FsScope::in("web"), true});
  // Protect everything interesting, then walk.
  for (PageIndex p = 0; p < 64; ++p) w.hv().set_page_perms(p, false, false);
  const std::size_t before = w.hv().events().size();
  auto reg = Registry::from_kernel(k);
  auto procs = walk_process_list(w.hv(), w.sim->profile(), reg);
  auto cmap = group_containers(procs, reg);
  (void)cmap;
  CHECK(w.hv().events().size() == before);
  CHECK(w.hv().counters().vmexits == 0);
}
