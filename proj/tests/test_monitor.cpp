#include <random>

#include "doctest.h"

#include "helpers.hpp"

using namespace cfmsim;
using cfmtest::World;

namespace {

nlohmann::json standard_policy_doc() {
  return nlohmann::json::parse(R"({
    "policies": [
      {"scope": "host", "path": "/usr/bin/runc",
       "allow": [{"process": "*", "uid": "*", "ops": ["read"]}]},
      {"scope": "container:web", "path": "/www/target.html",
       "allow": [{"process": "httpd", "uid": "*", "ops": ["read"]}]},
      {"scope": "container:web", "path": "/bin/login",
       "allow": [{"process": "*", "uid": "*", "ops": ["read"]}]}
    ]
  })");
}

struct MonWorld : World {
  std::unique_ptr<Monitor> mon;
  explicit MonWorld(nlohmann::json doc = standard_policy_doc(),
                    Placement placement = Placement::Isolated,
                    std::vector<std::string> warm_host_paths = {}) {
    // The workload's files are usually cached before monitoring starts.
    for (const auto& p : warm_host_paths) {
      std::int64_t fd = kernel().sys_open(shell, p, OpenMode::ReadOnly);
      REQUIRE(fd >= 0);
      REQUIRE(kernel().sys_close(shell, int(fd)) == 0);
    }
    auto load = load_policies(doc);
    REQUIRE(load.rejected.empty());
    mon = std::make_unique<Monitor>(*sim, PolicyTable(std::move(load.policies)));
    mon->attach();
    mon->create_caches(placement);
  }
  std::size_t count(MonitorEvent::Kind k) const {
    std::size_t n = 0;
    for (const auto& e : mon->events())
      if (e.kind == k) n++;
    return n;
  }
};

}  // namespace

TEST_CASE("load_policies: the runc rule loads; duplicates are rejected with positions") {
  auto load = load_policies(standard_policy_doc());
  CHECK(load.policies.size() == 3);
  CHECK(load.rejected.empty());
  CHECK(load.policies[0].target_key() == "host:/usr/bin/runc");

  auto dup = standard_policy_doc();
  dup["policies"].push_back(dup["policies"][0]);
  auto load2 = load_policies(dup);
  CHECK(load2.policies.size() == 3);
  REQUIRE(load2.rejected.size() == 1);
  CHECK(load2.rejected[0].find("/policies/3") != std::string::npos);
  CHECK(load2.rejected[0].find("duplicate") != std::string::npos);

  CHECK(load_policies(nlohmann::json::parse("{}")).policies.empty());
  // Malformed entries are rejected individually with their positions.
  auto bad_entries = load_policies(nlohmann::json::parse("[1,2]"));
  CHECK(bad_entries.policies.empty());
  CHECK(bad_entries.rejected.size() == 2);
  // A structurally unreadable document fails the load outright.
  CHECK_THROWS_AS(load_policies(nlohmann::json::parse("3")), ConfigError);
}

TEST_CASE("glob matching") {
  CHECK(glob_match("httpd", "httpd"));
  CHECK(glob_match("http*", "httpd-worker"));
  CHECK(glob_match("*", "anything"));
  CHECK(glob_match("?ash", "bash"));
  CHECK_FALSE(glob_match("httpd", "nginx"));
}

TEST_CASE("create_caches installs one watch per policy in isolated pages") {
  MonWorld w;
  const auto& ws = w.mon->watch_set();
  REQUIRE(ws.size() == 3);
  for (const auto& wd : ws) {
    CHECK(w.sim->memory().kind(w.sim->memory().page_of(wd.addr)) == PageKind::SlabIsolated);
    CHECK(w.hv().vmi_read_u64(wd.refcount_addr) >= 1);  // agent holds pin it
  }
  CHECK(w.mon->armed_pages() >= 1);
  // The watch targets resolve to the same dentries the kernel sees.
  CHECK(w.kernel().lookup_dentry(FsScope::host(), "/usr/bin/runc") == ws[0].addr);
}

TEST_CASE("empty policy set: no watches, no armed pages") {
  World base;
  Monitor mon(*base.sim, PolicyTable(std::vector<Policy>{}));
  mon.attach();
  mon.create_caches(Placement::Isolated);
  CHECK(mon.watch_set().empty());
  CHECK(mon.armed_pages() == 0);
}

TEST_CASE("500 policies watch 500 files over exactly 24 armed pages") {
  SimulationConfig cfg;
  cfg.memory.page_count = 2048;
  cfg.memory.isolated_pages = 64;
  Simulation sim(std::move(cfg));
  auto& k = sim.kernel();
  std::vector<Policy> pols;
  for (int i = 0; i < 500; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "/mon/f%03d", i);
    k.add_host_file(name, "payload");
    Policy p;
    p.scope = FsScope::host();
    p.path = name;
    p.allow.push_back({"*", "*", kOpRead});
    pols.push_back(std::move(p));
  }
  Monitor mon(sim, PolicyTable(std::move(pols)));
  mon.attach();
  mon.create_caches(Placement::Isolated);
  CHECK(mon.watch_set().size() == 500);
  CHECK(mon.watched_bytes() == 96000);
  CHECK(mon.armed_pages() == 24);
}

TEST_CASE("files cached before the agent runs are migrated, not duplicated") {
  World base;
  // A workload touches the target before monitoring starts.
  REQUIRE(base.kernel().sys_open(base.shell, "/usr/bin/runc", OpenMode::ReadOnly) >= 0);
  GuestAddr before = base.kernel().lookup_dentry(FsScope::host(), "/usr/bin/runc");
  CHECK(base.sim->memory().kind(base.sim->memory().page_of(before)) == PageKind::SlabDefault);
  std::uint64_t dentries_before = base.kernel().live_dentries();

  auto load = load_policies(standard_policy_doc());
  Monitor mon(*base.sim, PolicyTable(std::move(load.policies)));
  mon.attach();
  mon.create_caches(Placement::Isolated);

  GuestAddr after = base.kernel().lookup_dentry(FsScope::host(), "/usr/bin/runc");
  CHECK(after != before);
  CHECK(base.sim->memory().kind(base.sim->memory().page_of(after)) == PageKind::SlabIsolated);
  CHECK(mon.stats().migrations >= 1);
  // No duplicate dentry: the count only grew by the other policy files'
  // materializations.
  CHECK(base.kernel().live_dentries() >= dentries_before);
  std::size_t runc_count = 0;
  for (const auto& [addr, obj] : base.sim->allocator().objects()) {
    if (obj.kind != "dentry") continue;
    if (base.kernel().dentry_path(addr) == "host:/usr/bin/runc") runc_count++;
  }
  CHECK(runc_count == 1);
  // The pre-existing handle still closes correctly after migration.
  CHECK(base.kernel().sys_close(base.shell, 0) == 0);
  CHECK(cfmtest::refcounts_match(*base.sim));
}

TEST_CASE("migration preserves open handles and alias cycles") {
  World base;
  auto& k = base.kernel();
  REQUIRE(k.sys_link(base.shell, "/data/a.txt", "/data/a2.txt") == 0);
  std::int64_t f1 = k.sys_open(base.shell, "/data/a.txt", OpenMode::ReadOnly);
  std::int64_t f2 = k.sys_open(base.intruder, "/data/a.txt", OpenMode::ReadOnly);
  REQUIRE(f1 >= 0);
  REQUIRE(f2 >= 0);

  Monitor mon(*base.sim, PolicyTable(std::vector<Policy>{}));
  GuestAddr old_addr = k.lookup_dentry(FsScope::host(), "/data/a.txt");
  GuestAddr moved = mon.migrate_dentry(old_addr);
  CHECK(moved != old_addr);
  CHECK(k.lookup_dentry(FsScope::host(), "/data/a.txt") == moved);
  CHECK(base.sim->memory().kind(base.sim->memory().page_of(moved)) == PageKind::SlabIsolated);

  // Alias cycle still closes and contains the new address.
  const auto& prof = base.sim->profile();
  GuestAddr alias = k.lookup_dentry(FsScope::host(), "/data/a2.txt");
  GuestAddr cur = alias;
  std::set<GuestAddr> cycle;
  for (int i = 0; i < 8; ++i) {
    cycle.insert(cur);
    cur = base.hv().vmi_read_u64(prof.field_addr(cur, "dentry", "alias_next"));
    if (cur == alias) break;
  }
  CHECK(cycle == std::set<GuestAddr>{alias, moved});

  // Both handles close correctly; accounting stays intact.
  CHECK(k.sys_close(base.shell, int(f1)) == 0);
  CHECK(k.sys_close(base.intruder, int(f2)) == 0);
  CHECK(cfmtest::refcounts_match(*base.sim));
}

TEST_CASE("migration aborts on an untracked reference and fails closed") {
  World base;
  auto& k = base.kernel();
  REQUIRE(k.sys_open(base.shell, "/data/a.txt", OpenMode::ReadOnly) >= 0);
  GuestAddr d = k.lookup_dentry(FsScope::host(), "/data/a.txt");
  // Simulate an untracked kernel pointer to the object.
  GuestAddr hole = 9 * 4096 + 256;
  base.hv().vmi_write_u64(hole, d);
  k.register_external_ref(hole);

  Monitor mon(*base.sim, PolicyTable(std::vector<Policy>{}));
  CHECK(mon.migrate_dentry(d) == d);
  CHECK(mon.stats().migration_aborts == 1);
  REQUIRE(!mon.warnings().empty());
  CHECK(mon.warnings()[0].find("watching its original page") != std::string::npos);
}

TEST_CASE("httpd may read the page file; another container process is blocked") {
  MonWorld w;
  auto& k = w.kernel();

  std::int64_t fd = k.sys_open(w.httpd, "/www/target.html", OpenMode::ReadOnly);
  CHECK(fd >= 0);
  CHECK(w.count(MonitorEvent::Kind::FileOpened) >= 1);
  CHECK(w.count(MonitorEvent::Kind::AccessBlocked) == 0);
  CHECK(k.sys_close(w.httpd, int(fd)) == 0);

  std::int64_t r = k.sys_open(w.evil, "/www/target.html", OpenMode::ReadOnly);
  CHECK(r < 0);
  CHECK(w.count(MonitorEvent::Kind::UnauthorizedReadBlocked) +
            w.count(MonitorEvent::Kind::AccessBlocked) >= 1);
  // No descriptor installed, and none obtainable by guessing.
  CHECK(k.open_fds(w.evil).empty());
  for (int g = 0; g < 8; ++g)
    CHECK(k.sys_io(w.evil, g, IoDir::Read, 64, 64) == kErrBadFd);
}

TEST_CASE("write-mode open of runc is blocked at the return site") {
  MonWorld w;
  auto& k = w.kernel();
  std::string before = k.read_content(FsScope::host(), "/usr/bin/runc");
  std::int64_t r = k.sys_open(w.intruder, "/usr/bin/runc", OpenMode::WriteOnly);
  CHECK(r == kBlockedResult);
  CHECK(w.count(MonitorEvent::Kind::FileOpened) >= 1);
  CHECK(w.count(MonitorEvent::Kind::AccessBlocked) == 1);
  CHECK(k.read_content(FsScope::host(), "/usr/bin/runc") == before);
  CHECK(k.open_fds(w.intruder).empty());
  CHECK(cfmtest::refcounts_match(*w.sim));

  // Reading runc stays allowed for everyone.
  std::int64_t fd = k.sys_open(w.intruder, "/usr/bin/runc", OpenMode::ReadOnly);
  CHECK(fd >= 0);
}

TEST_CASE("blocking precision: allowed opens are never patched") {
  MonWorld w;
  auto& k = w.kernel();
  for (int i = 0; i < 5; ++i) {
    std::int64_t fd = k.sys_open(w.httpd, "/www/target.html", OpenMode::ReadOnly);
    REQUIRE(fd >= 0);
    REQUIRE(k.sys_close(w.httpd, int(fd)) == 0);
  }
  CHECK(w.count(MonitorEvent::Kind::AccessBlocked) == 0);
  // Event stream mirrors the ground-truth log subsequence for the file.
  std::vector<MonitorEvent::Kind> got;
  for (const auto& e : w.mon->events())
    if (e.path == "web:/www/target.html" &&
        (e.kind == MonitorEvent::Kind::FileOpened ||
         e.kind == MonitorEvent::Kind::FileClosed))
      got.push_back(e.kind);
  REQUIRE(got.size() == 10);
  for (std::size_t i = 0; i < got.size(); i += 2) {
    CHECK(got[i] == MonitorEvent::Kind::FileOpened);
    CHECK(got[i + 1] == MonitorEvent::Kind::FileClosed);
  }
}

TEST_CASE("a watched refcount falling to zero is rescued at the write") {
  MonWorld w;
  auto& k = w.kernel();
  // Manufacture a watched dentry with no agent hold: watch a plain file via
  // the direct hook, then drop its only reference.
  std::int64_t fd = k.sys_open(w.shell, "/data/a.txt", OpenMode::ReadOnly);
  REQUIRE(fd >= 0);
  GuestAddr d = k.lookup_dentry(FsScope::host(), "/data/a.txt");
  w.mon->watch_dentry(d, 0);
  REQUIRE(k.sys_close(w.shell, int(fd)) == 0);
  // The zero write itself was rewritten to 1.
  CHECK(w.hv().vmi_read_u64(d) == 1);
  CHECK(w.count(MonitorEvent::Kind::RefcountRescued) == 1);
  CHECK(w.count(MonitorEvent::Kind::FileClosed) >= 1);
  k.dcache_prune();
  CHECK(k.lookup_dentry(FsScope::host(), "/data/a.txt") == d);
}

TEST_CASE("prune touch on a watched refcount-zero dentry is rescued to 1") {
  MonWorld w;
  auto& k = w.kernel();
  // Reach refcount 0 before the watch exists (the rescue backstop case).
  std::int64_t fd = k.sys_open(w.shell, "/data/a.txt", OpenMode::ReadOnly);
  REQUIRE(fd >= 0);
  REQUIRE(k.sys_close(w.shell, int(fd)) == 0);
  GuestAddr d = k.lookup_dentry(FsScope::host(), "/data/a.txt");
  CHECK(w.hv().vmi_read_u64(d) == 0);
  w.mon->watch_dentry(d, 0);

  std::size_t freed = k.dcache_prune();
  // The prune touch was intercepted: the watched dentry survives at 1 while
  // its unwatched refcount-zero parents may be released.
  CHECK(w.hv().vmi_read_u64(d) == 1);
  CHECK(k.lookup_dentry(FsScope::host(), "/data/a.txt") == d);
  CHECK(w.count(MonitorEvent::Kind::RefcountRescued) >= 1);
  (void)freed;
}

TEST_CASE("unwatched refcount-zero dentries are still pruned") {
  MonWorld w;
  auto& k = w.kernel();
  std::int64_t fd = k.sys_open(w.shell, "/data/b.txt", OpenMode::ReadOnly);
  REQUIRE(k.sys_close(w.shell, int(fd)) == 0);
  CHECK(k.lookup_dentry(FsScope::host(), "/data/b.txt") != 0);
  k.dcache_prune();
  CHECK(k.lookup_dentry(FsScope::host(), "/data/b.txt") == 0);
}

TEST_CASE("kill of an agent is neutered; ordinary kills proceed") {
  MonWorld w;
  auto& k = w.kernel();
  std::int64_t agent = k.security_agent_pid();
  CHECK(k.sys_kill(w.evil, agent) == kErrSrch);
  CHECK(k.proc(agent)->alive);
  CHECK(w.count(MonitorEvent::Kind::AgentKillBlocked) == 1);

  CHECK(k.sys_kill(w.shell, w.intruder) == 0);
  CHECK_FALSE(k.proc(w.intruder)->alive);
}

TEST_CASE("hardlinking a watched file grows the watch set; writes via the alias are blocked") {
  MonWorld w;
  auto& k = w.kernel();
  const std::size_t before = w.mon->watch_set().size();
  REQUIRE(k.sys_link(w.intruder, "/usr/bin/runc", "/tmp-runc") == 0);
  CHECK(w.mon->watch_set().size() == before + 1);
  CHECK(w.count(MonitorEvent::Kind::HardlinkTracked) == 1);

  // The new alias lives in isolated space and is policy-covered.
  const auto& nw = w.mon->watch_set().back();
  CHECK(w.sim->memory().kind(w.sim->memory().page_of(nw.addr)) == PageKind::SlabIsolated);
  CHECK(nw.path_key == "host:/tmp-runc");

  std::string before_content = k.read_content(FsScope::host(), "/usr/bin/runc");
  CHECK(k.sys_open(w.evil == 0 ? w.intruder : w.intruder, "/tmp-runc",
                   OpenMode::WriteOnly) < 0);
  CHECK(k.read_content(FsScope::host(), "/tmp-runc") == before_content);
}

TEST_CASE("static regions: guest writes to kernel code are denied, reads pass") {
  MonWorld w;
  auto& k = w.kernel();
  const GuestAddr kernel_code = 1 * 4096 + 512;
  std::uint64_t before = w.hv().vmi_read_u64(kernel_code);
  std::uint8_t payload[8] = {0xde, 0xad, 0xbe, 0xef, 0, 0, 0, 0};
  CHECK_FALSE(k.raw_guest_write(w.evil, kernel_code, payload));
  CHECK(w.hv().vmi_read_u64(kernel_code) == before);
  CHECK(w.count(MonitorEvent::Kind::StaticWriteBlocked) == 1);

  std::uint8_t buf[8];
  CHECK(k.raw_guest_read(w.evil, kernel_code, buf));
  CHECK(w.count(MonitorEvent::Kind::StaticWriteBlocked) == 1);

  // The getdents hiding filter (kernel code) survives, so the agent stays
  // hidden from container callers.
  std::vector<std::string> names;
  REQUIRE(k.sys_getdents(w.evil, "/proc", &names) >= 0);
  for (const auto& n : names)
    CHECK(n != std::to_string(w.kernel().containers().at("web").hidden_agent_pid));
}

TEST_CASE("direct out-of-syscall reads of a watched dentry are denied") {
  MonWorld w;
  auto& k = w.kernel();
  // target.html is read-restricted, so its page is unreadable.
  GuestAddr d = k.lookup_dentry(FsScope::in("web"), "/www/target.html");
  REQUIRE(d != 0);
  std::uint8_t buf[8];
  CHECK_FALSE(k.raw_guest_read(w.evil, d, buf));
  CHECK(w.count(MonitorEvent::Kind::UnauthorizedReadBlocked) == 1);
  for (auto b : buf) CHECK(b == 0);
}

TEST_CASE("interleaved returns: only the flagged instance is patched") {
  MonWorld w;
  auto& k = w.kernel();
  Call denied;
  denied.op = SyscallName::Open;
  denied.path = "/usr/bin/runc";
  denied.mode = OpenMode::WriteOnly;
  Call allowed;
  allowed.op = SyscallName::Open;
  allowed.path = "/usr/bin/runc";
  allowed.mode = OpenMode::ReadOnly;

  std::uint64_t bad = k.submit(w.intruder, denied);
  std::uint64_t good = k.submit(w.shell, allowed);
  // The allowed instance returns first while the block is pending; its
  // result must not be patched (the return event belongs to another
  // process).
  std::int64_t good_r = k.finish(good);
  std::int64_t bad_r = k.finish(bad);
  CHECK(good_r >= 0);
  CHECK(bad_r == kBlockedResult);
  CHECK(w.mon->stats().ignored_returns >= 1);
  CHECK(k.open_fds(w.intruder).empty());
  REQUIRE(k.open_fds(w.shell).size() == 1);
  CHECK(k.sys_close(w.shell, k.open_fds(w.shell)[0].first) == 0);
  CHECK(cfmtest::refcounts_match(*w.sim));
}

TEST_CASE("selectivity: unwatched traffic raises zero violations under isolated placement") {
  MonWorld w(standard_policy_doc(), Placement::Isolated, {"/data/a.txt"});
  auto& k = w.kernel();
  w.hv().reset_accounting();
  for (int round = 0; round < 5; ++round) {
    std::int64_t fd = k.sys_open(w.shell, "/data/a.txt", OpenMode::ReadOnly);
    REQUIRE(fd >= 0);
    REQUIRE(k.sys_io(w.shell, int(fd), IoDir::Read, 1 << 20, 64 << 10) > 0);
    REQUIRE(k.sys_close(w.shell, int(fd)) == 0);
  }
  CHECK(w.hv().counters().vmexits == 0);
  CHECK(w.mon->stats().false_traps == 0);
}

TEST_CASE("shared placement: co-located traffic raises false traps") {
  MonWorld w(standard_policy_doc(), Placement::Default, {"/data/a.txt"});
  auto& k = w.kernel();
  // Watched dentries share default pages with other 192-byte objects.
  for (const auto& wd : w.mon->watch_set())
    CHECK(w.sim->memory().kind(w.sim->memory().page_of(wd.addr)) == PageKind::SlabDefault);
  w.hv().reset_accounting();
  for (int round = 0; round < 5; ++round) {
    std::int64_t fd = k.sys_open(w.shell, "/data/a.txt", OpenMode::ReadOnly);
    REQUIRE(fd >= 0);
    REQUIRE(k.sys_close(w.shell, int(fd)) == 0);
  }
  CHECK(w.hv().counters().vmexits > 0);
  CHECK(w.mon->stats().false_traps > 0);
}

TEST_CASE("runtime policy delivery through the agent poll round") {
  MonWorld w;
  auto& k = w.kernel();
  k.add_host_file("/late/secret.key", "KEY");
  Policy p;
  p.scope = FsScope::host();
  p.path = "/late/secret.key";
  p.allow.push_back({"*", "*", kOpRead});
  const std::size_t before = w.mon->watch_set().size();
  w.mon->add_runtime_policies({p});
  k.agent_poll();
  REQUIRE(w.mon->watch_set().size() == before + 1);
  CHECK(w.mon->watch_set().back().path_key == "host:/late/secret.key");
  // And the new watch enforces: write-mode open is blocked.
  CHECK(k.sys_open(w.shell, "/late/secret.key", OpenMode::WriteOnly) < 0);
}

TEST_CASE("alias closure holds at quiescent points") {
  MonWorld w;
  auto& k = w.kernel();
  REQUIRE(k.sys_link(w.intruder, "/usr/bin/runc", "/tmp-r2") == 0);
  REQUIRE(k.sys_link(w.intruder, "/tmp-r2", "/tmp-r3") == 0);
  // Every dentry sharing an inode with a watched dentry is itself watched.
  const auto& prof = w.sim->profile();
  std::set<GuestAddr> watched_addrs;
  for (const auto& wd : w.mon->watch_set()) watched_addrs.insert(wd.addr);
  for (const auto& wd : w.mon->watch_set()) {
    GuestAddr cur = w.hv().vmi_read_u64(prof.field_addr(wd.addr, "dentry", "alias_next"));
    int steps = 0;
    while (cur != wd.addr && steps++ < 16) {
      CHECK(watched_addrs.count(cur) == 1);
      cur = w.hv().vmi_read_u64(prof.field_addr(cur, "dentry", "alias_next"));
    }
  }
}
