#include "cfmsim/trace.hpp"

#include <algorithm>
#include <map>
#include <random>
#include <set>

namespace cfmsim {

namespace {

bool watch_liveness(Simulation& sim, const Monitor& mon) {
  const LayoutProfile& prof = sim.profile();
  for (const auto& w : mon.watch_set()) {
    if (!sim.allocator().find(w.addr)) return false;
    if (sim.hypervisor().vmi_read_u64(prof.field_addr(w.addr, "dentry", "refcount")) < 1)
      return false;
  }
  return true;
}

OpenMode mode_from_string(const std::string& s) {
  if (s == "ro") return OpenMode::ReadOnly;
  if (s == "wo") return OpenMode::WriteOnly;
  if (s == "rw") return OpenMode::ReadWrite;
  throw ConfigError("trace: unknown open mode '" + s + "'");
}

}  // namespace

TraceStats run_random_trace(Simulation& sim, const RandomTraceConfig& cfg,
                            const Monitor* monitor) {
  TraceStats stats;
  GuestKernel& k = sim.kernel();
  std::mt19937_64 rng(cfg.seed);

  struct FdRec {
    int fd;
    std::string path;  // in-scope path
  };
  struct Pending {
    std::int64_t pid;
    SyscallName op;
    std::string path;
    int fd = -1;
  };
  std::vector<std::int64_t> procs = cfg.procs;
  std::map<std::int64_t, std::vector<FdRec>> fds;
  std::map<std::uint64_t, Pending> pending;
  std::vector<std::uint64_t> inflight;
  std::set<std::int64_t> busy;
  std::uint64_t link_counter = 0;

  auto scope_of = [&](std::int64_t pid) { return k.proc(pid)->scope; };
  auto files_for = [&](const FsScope& scope) {
    std::vector<std::string> out;
    for (const auto& sp : cfg.files) {
      auto [s, p] = split_scoped_path(sp);
      if (s == scope) out.push_back(p);
    }
    return out;
  };

  auto finish_one = [&] {
    if (inflight.empty()) return;
    std::size_t i = rng() % inflight.size();
    std::uint64_t id = inflight[i];
    inflight.erase(inflight.begin() + i);
    Pending p = pending[id];
    pending.erase(id);
    std::int64_t r = k.finish(id);
    busy.erase(p.pid);
    if (p.op == SyscallName::Open && r >= 0)
      fds[p.pid].push_back({int(r), p.path});
    if (p.op == SyscallName::Kill && r >= 0) {
      procs.erase(std::remove(procs.begin(), procs.end(), p.fd), procs.end());
      fds.erase(p.fd);  // induced closes released these
    }
  };

  auto submit = [&](std::int64_t pid, const Call& c, Pending p) {
    std::uint64_t id = k.submit(pid, c);
    inflight.push_back(id);
    busy.insert(pid);
    p.pid = pid;
    pending[id] = std::move(p);
    stats.submitted++;
  };

  for (std::uint64_t step = 0; step < cfg.ops; ++step) {
    if (cfg.prune_every && step > 0 && step % cfg.prune_every == 0) {
      while (!inflight.empty()) finish_one();
      stats.pruned_dentries += k.dcache_prune();
      stats.prunes++;
      if (monitor && !watch_liveness(sim, *monitor)) stats.watch_liveness_ok = false;
      continue;
    }
    if (inflight.size() >= cfg.max_inflight || (!inflight.empty() && rng() % 3 == 0)) {
      finish_one();
      continue;
    }

    std::vector<std::int64_t> ready;
    for (auto pid : procs)
      if (!busy.count(pid) && k.proc(pid) && k.proc(pid)->alive) ready.push_back(pid);
    if (ready.empty()) {
      finish_one();
      continue;
    }
    std::int64_t pid = ready[rng() % ready.size()];
    const std::uint64_t dice = rng() % 100;

    if (dice < 45) {  // open
      auto candidates = files_for(scope_of(pid));
      if (candidates.empty()) continue;
      Call c;
      c.op = SyscallName::Open;
      c.path = candidates[rng() % candidates.size()];
      const std::uint64_t m = rng() % 10;
      c.mode = m < 6 ? OpenMode::ReadOnly : (m < 9 ? OpenMode::WriteOnly : OpenMode::ReadWrite);
      Pending p;
      p.op = SyscallName::Open;
      p.path = c.path;
      submit(pid, c, p);
    } else if (dice < 70) {  // close
      auto it = fds.find(pid);
      if (it == fds.end() || it->second.empty()) continue;
      std::size_t i = rng() % it->second.size();
      FdRec rec = it->second[i];
      it->second.erase(it->second.begin() + i);
      Call c;
      c.op = SyscallName::Close;
      c.fd = rec.fd;
      Pending p;
      p.op = SyscallName::Close;
      p.path = rec.path;
      submit(pid, c, p);
    } else if (dice < 85) {  // io on an open fd
      auto it = fds.find(pid);
      if (it == fds.end() || it->second.empty()) continue;
      const FdRec& rec = it->second[rng() % it->second.size()];
      Call c;
      c.dir = rng() % 2 ? IoDir::Write : IoDir::Read;
      c.op = c.dir == IoDir::Read ? SyscallName::Read : SyscallName::Write;
      c.fd = rec.fd;
      c.block_size = 4096;
      c.nbytes = 4096 * (1 + rng() % 4);
      Pending p;
      p.op = c.op;
      submit(pid, c, p);
    } else if (dice < 92) {  // link
      auto candidates = files_for(scope_of(pid));
      if (candidates.empty()) continue;
      Call c;
      c.op = SyscallName::Link;
      c.path = candidates[rng() % candidates.size()];
      c.path2 = "/lnk/l" + std::to_string(link_counter++);
      Pending p;
      p.op = SyscallName::Link;
      submit(pid, c, p);
    } else {  // kill
      std::vector<std::int64_t> targets;
      for (auto t : cfg.kill_targets)
        if (t != pid && !busy.count(t) && k.proc(t) && k.proc(t)->alive)
          targets.push_back(t);
      if (targets.empty()) continue;
      Call c;
      c.op = SyscallName::Kill;
      c.target_pid = targets[rng() % targets.size()];
      Pending p;
      p.op = SyscallName::Kill;
      p.fd = int(c.target_pid);
      submit(pid, c, p);
    }
  }
  while (!inflight.empty()) finish_one();
  if (cfg.prune_every) {
    stats.pruned_dentries += k.dcache_prune();
    stats.prunes++;
    if (monitor && !watch_liveness(sim, *monitor)) stats.watch_liveness_ok = false;
  }
  return stats;
}

std::vector<std::string> run_scripted_trace(Simulation& sim, const nlohmann::json& trace,
                                            const Monitor* monitor, std::uint64_t seed) {
  std::vector<std::string> lines;
  GuestKernel& k = sim.kernel();
  // fd bookkeeping so trace authors can close/io by path
  std::map<std::pair<std::int64_t, std::string>, std::vector<int>> by_path;

  for (std::size_t i = 0; i < trace.size(); ++i) {
    const auto& t = trace[i];
    const std::string op = t.at("op").get<std::string>();
    auto line = [&](std::int64_t result, const std::string& detail) {
      lines.push_back("op=" + op + " " + detail + " result=" + std::to_string(result));
    };

    if (op == "open") {
      std::int64_t pid = t.at("pid").get<std::int64_t>();
      std::string path = t.at("path").get<std::string>();
      OpenMode mode = mode_from_string(t.value("mode", std::string("ro")));
      Placement pl = t.value("placement", std::string("default")) == "isolated"
                         ? Placement::Isolated
                         : Placement::Default;
      std::int64_t r = k.sys_open(pid, path, mode, pl);
      if (r >= 0) by_path[{pid, path}].push_back(int(r));
      line(r, "pid=" + std::to_string(pid) + " path=" + path);
    } else if (op == "close") {
      std::int64_t pid = t.at("pid").get<std::int64_t>();
      int fd = -1;
      std::string detail = "pid=" + std::to_string(pid);
      if (t.contains("fd")) {
        fd = t.at("fd").get<int>();
      } else {
        std::string path = t.at("path").get<std::string>();
        auto& v = by_path[{pid, path}];
        if (!v.empty()) {
          fd = v.back();
          v.pop_back();
        }
        detail += " path=" + path;
      }
      line(k.sys_close(pid, fd), detail);
    } else if (op == "io") {
      std::int64_t pid = t.at("pid").get<std::int64_t>();
      int fd = t.contains("fd") ? t.at("fd").get<int>() : -1;
      if (fd < 0 && t.contains("path")) {
        auto& v = by_path[{pid, t.at("path").get<std::string>()}];
        if (!v.empty()) fd = v.back();
      }
      IoDir dir = t.value("dir", std::string("read")) == "write" ? IoDir::Write : IoDir::Read;
      std::uint64_t bytes = t.value("bytes", 4096);
      std::uint64_t block = t.value("block", 4096);
      line(k.sys_io(pid, fd, dir, bytes, block), "pid=" + std::to_string(pid));
    } else if (op == "link") {
      std::int64_t pid = t.at("pid").get<std::int64_t>();
      std::int64_t r = k.sys_link(pid, t.at("existing").get<std::string>(),
                                  t.at("new").get<std::string>());
      line(r, "pid=" + std::to_string(pid) + " existing=" +
                  t.at("existing").get<std::string>() + " new=" +
                  t.at("new").get<std::string>());
    } else if (op == "kill") {
      std::int64_t pid = t.at("pid").get<std::int64_t>();
      std::int64_t target = t.at("target").get<std::int64_t>();
      line(k.sys_kill(pid, target),
           "pid=" + std::to_string(pid) + " target=" + std::to_string(target));
    } else if (op == "getdents") {
      std::int64_t pid = t.at("pid").get<std::int64_t>();
      std::vector<std::string> names;
      std::int64_t r = k.sys_getdents(pid, t.at("path").get<std::string>(), &names);
      std::string joined;
      for (const auto& n : names) joined += (joined.empty() ? "" : ",") + n;
      line(r, "pid=" + std::to_string(pid) + " path=" + t.at("path").get<std::string>() +
                  " names=" + joined);
    } else if (op == "prune") {
      line(std::int64_t(k.dcache_prune()), "");
    } else if (op == "poll") {
      k.agent_poll();
      line(0, "");
    } else if (op == "random") {
      RandomTraceConfig cfg;
      cfg.ops = t.value("count", 100);
      cfg.seed = t.value("seed", seed);
      cfg.max_inflight = t.value("max_inflight", 4);
      cfg.prune_every = t.value("prune_every", 0);
      if (t.contains("procs"))
        for (const auto& p : t.at("procs")) cfg.procs.push_back(p.get<std::int64_t>());
      if (t.contains("files"))
        for (const auto& f : t.at("files")) cfg.files.push_back(f.get<std::string>());
      if (t.contains("kill_targets"))
        for (const auto& p : t.at("kill_targets"))
          cfg.kill_targets.push_back(p.get<std::int64_t>());
      TraceStats st = run_random_trace(sim, cfg, monitor);
      line(std::int64_t(st.submitted), "prunes=" + std::to_string(st.prunes) +
                                           " liveness=" +
                                           (st.watch_liveness_ok ? "ok" : "violated"));
    } else {
      throw ConfigError("trace op '" + op + "' is not executable");
    }
  }
  return lines;
}

}  // namespace cfmsim
