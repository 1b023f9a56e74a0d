#include "cfmsim/monitor.hpp"

#include <algorithm>

namespace cfmsim {

const char* to_string(MonitorEvent::Kind k) {
  switch (k) {
    case MonitorEvent::Kind::FileOpened: return "FileOpened";
    case MonitorEvent::Kind::FileClosed: return "FileClosed";
    case MonitorEvent::Kind::AccessBlocked: return "AccessBlocked";
    case MonitorEvent::Kind::RefcountRescued: return "RefcountRescued";
    case MonitorEvent::Kind::AgentKillBlocked: return "AgentKillBlocked";
    case MonitorEvent::Kind::HardlinkTracked: return "HardlinkTracked";
    case MonitorEvent::Kind::UnauthorizedReadBlocked: return "UnauthorizedReadBlocked";
    case MonitorEvent::Kind::StaticWriteBlocked: return "StaticWriteBlocked";
  }
  return "?";
}

std::string MonitorEvent::to_line() const {
  return "seq=" + std::to_string(seq) + " kind=" + to_string(kind) +
         " pid=" + std::to_string(pid) + " proc=" + process +
         " uid=" + std::to_string(uid) + " scope=" + container + " path=" + path;
}

Monitor::Monitor(Simulation& sim, PolicyTable policies, WatchMode mode)
    : sim_(sim), hv_(sim.hypervisor()), policies_(std::move(policies)), mode_(mode) {}

const introspection::Registry& Monitor::registry() {
  registry_ = introspection::Registry::from_kernel(sim_.kernel());
  return registry_;
}

void Monitor::attach() {
  hv_.set_violation_handler([this](const VmExitEvent& ev) { return on_violation(ev); });
  hv_.set_entry_handler(
      [this](const VmExitEvent& ev, SyscallEntryArgs& a) { on_entry(ev, a); });
  hv_.set_return_handler(
      [this](const VmExitEvent& ev, std::int64_t p) { on_return(ev, p); });
  hv_.set_monitor_handler([this](const VmExitEvent& ev, std::string_view p) {
    return on_monitor_syscall(ev, p);
  });

  if (mode_ == WatchMode::Intercept) {
    // Rival baseline: a breakpoint on every file syscall entry.
    for (SyscallName n : {SyscallName::Open, SyscallName::Close, SyscallName::Read,
                          SyscallName::Write, SyscallName::Link, SyscallName::Kill,
                          SyscallName::Getdents})
      hv_.arm_breakpoint(BreakpointSite::entry(n));
  } else {
    hv_.arm_breakpoint(BreakpointSite::monitor_entry());
    // KILL and LINK execute infrequently; keeping them armed costs little.
    hv_.arm_breakpoint(BreakpointSite::entry(SyscallName::Kill));
    hv_.arm_breakpoint(BreakpointSite::entry(SyscallName::Link));
    protect_static_regions();
  }
  // Agent pids arrive with the cache-creation handshake.
}

const std::vector<WatchedDentry>& Monitor::create_caches(Placement placement) {
  cache_placement_ = placement;
  GuestKernel& kernel = sim_.kernel();

  std::vector<GuestKernel::AgentTask> tasks;
  for (const auto& p : policies_.all()) tasks.push_back({p.scope, p.path});
  kernel.set_image_tasks(std::move(tasks));

  // The agents open every policy file and raise the completion signal; the
  // monitor-syscall handler walks their descriptor tables and installs the
  // watch set.
  kernel.run_agents(placement);
  arm_watchpoints();
  caches_created_ = true;
  return watched_;
}

std::size_t Monitor::watch_dentry(GuestAddr addr, std::size_t policy_idx) {
  auto it = by_base_.find(addr);
  if (it != by_base_.end()) return it->second;

  WatchedDentry w;
  w.addr = addr;
  w.refcount_addr = sim_.profile().field_addr(addr, layout::kDentry, "refcount");
  w.page = sim_.memory().page_of(w.refcount_addr);
  w.policy_idx = policy_idx;
  w.path_key = introspection::dentry_path_via_vmi(hv_, sim_.profile(), addr);
  w.read_restricted = !policies_.read_unrestricted(policy_idx);
  watched_.push_back(std::move(w));
  const std::size_t idx = watched_.size() - 1;
  index_watch(idx);
  if (caches_created_) {
    const WatchedDentry& ww = watched_[idx];
    EptEntry cur = hv_.page_perms(ww.page);
    hv_.set_page_perms(ww.page, cur.readable && !ww.read_restricted, false);
    armed_pages_.insert(ww.page);
  }
  return idx;
}

void Monitor::index_watch(std::size_t idx) {
  by_refcount_[watched_[idx].refcount_addr] = idx;
  by_base_[watched_[idx].addr] = idx;
}

std::size_t Monitor::arm_watchpoints() {
  if (mode_ == WatchMode::Intercept) return 0;
  std::map<PageIndex, bool> read_restricted_page;
  for (const auto& w : watched_)
    read_restricted_page[w.page] = read_restricted_page[w.page] || w.read_restricted;
  for (const auto& [page, rr] : read_restricted_page) {
    hv_.set_page_perms(page, !rr, false);
    armed_pages_.insert(page);
  }
  return armed_pages_.size();
}

std::size_t Monitor::protect_static_regions() {
  for (PageIndex p : sim_.kernel().static_pages()) {
    hv_.set_page_perms(p, true, false);
    static_pages_.insert(p);
  }
  return static_pages_.size();
}

std::size_t Monitor::armed_pages() const { return armed_pages_.size(); }

std::uint64_t Monitor::watched_bytes() const {
  return std::uint64_t(watched_.size()) * sim_.profile().size_of(layout::kDentry);
}

void Monitor::add_runtime_policies(std::vector<Policy> policies) {
  for (auto& p : policies) {
    runtime_queue_.push_back(p);
    if (!policies_.find(p.target_key())) policies_.append(std::move(p));
  }
}

// ---------------------------------------------------------------------------
// migration

GuestAddr Monitor::migrate_dentry(GuestAddr old_addr) {
  GuestKernel& kernel = sim_.kernel();
  const LayoutProfile& prof = sim_.profile();
  const std::uint32_t dsize = prof.size_of(layout::kDentry);

  // Untracked references make the move unsafe; fail closed to watching the
  // original page, accepting the unrelated traps that brings.
  for (GuestAddr ext : kernel.external_refs()) {
    std::uint64_t v = hv_.vmi_read_u64(ext);
    if (v == old_addr) {
      stats_.migration_aborts++;
      warnings_.push_back("migration aborted for dentry at " + std::to_string(old_addr) +
                          ": untracked reference; watching its original page");
      return old_addr;
    }
  }

  GuestAddr fresh = sim_.allocator().alloc(layout::kDentry, Placement::Isolated);
  if (!fresh) {
    stats_.migration_aborts++;
    warnings_.push_back("migration aborted: isolated region exhausted");
    return old_addr;
  }

  std::vector<std::uint8_t> bytes(dsize);
  hv_.vmi_read(old_addr, bytes);
  hv_.vmi_write(fresh, bytes);

  auto fix = [&](GuestAddr slot) {
    if (hv_.vmi_read_u64(slot) == old_addr) hv_.vmi_write_u64(slot, fresh);
  };

  // Hash table: heads and chains.
  const GuestAddr table = hv_.vmi_read_u64(prof.field_addr(0, layout::kGlobals, "dcache_hash"));
  const std::uint64_t buckets = hv_.vmi_read_u64(prof.field_addr(0, layout::kGlobals, "dcache_buckets"));
  for (std::uint64_t b = 0; b < buckets; ++b) {
    GuestAddr slot = table + 8 * b;
    GuestAddr cur = hv_.vmi_read_u64(slot);
    if (cur == old_addr) {
      hv_.vmi_write_u64(slot, fresh);
      continue;
    }
    std::uint64_t steps = 0;
    while (cur) {
      if (++steps > 1u << 20) throw SimFault("migration: hash chain corrupt");
      GuestAddr next_slot = prof.field_addr(cur, layout::kDentry, "hash_next");
      if (hv_.vmi_read_u64(next_slot) == old_addr) {
        hv_.vmi_write_u64(next_slot, fresh);
        break;
      }
      cur = hv_.vmi_read_u64(next_slot);
    }
  }

  // Alias cycle, including self links on the fresh copy.
  fix(prof.field_addr(fresh, layout::kDentry, "alias_next"));
  fix(prof.field_addr(fresh, layout::kDentry, "alias_prev"));
  GuestAddr peer = hv_.vmi_read_u64(prof.field_addr(fresh, layout::kDentry, "alias_next"));
  std::uint64_t steps = 0;
  while (peer && peer != fresh) {
    if (++steps > 65536) throw SimFault("migration: alias cycle corrupt");
    fix(prof.field_addr(peer, layout::kDentry, "alias_next"));
    fix(prof.field_addr(peer, layout::kDentry, "alias_prev"));
    peer = hv_.vmi_read_u64(prof.field_addr(peer, layout::kDentry, "alias_next"));
  }
  GuestAddr inode = hv_.vmi_read_u64(prof.field_addr(fresh, layout::kDentry, "inode"));
  if (inode) fix(prof.field_addr(inode, layout::kInode, "alias_head"));

  // Children's parent pointers.
  for (const auto& [addr, obj] : sim_.allocator().objects()) {
    if (obj.kind != layout::kDentry || addr == fresh) continue;
    fix(prof.field_addr(addr, layout::kDentry, "parent"));
  }

  // Open file records across every process.
  const GuestAddr init = hv_.vmi_read_u64(prof.field_addr(0, layout::kGlobals, "init_task"));
  GuestAddr task = init;
  if (task) {
    do {
      GuestAddr fdt = hv_.vmi_read_u64(prof.field_addr(task, layout::kProcess, "fd_table"));
      if (fdt) {
        const std::uint32_t nslots = prof.field(layout::kFdTable, "slots").size / 8;
        for (std::uint32_t i = 0; i < nslots; ++i) {
          GuestAddr fobj = hv_.vmi_read_u64(fdt + i * 8);
          if (fobj) fix(prof.field_addr(fobj, layout::kFile, "dentry"));
        }
      }
      task = hv_.vmi_read_u64(prof.field_addr(task, layout::kProcess, "tasks_next"));
    } while (task && task != init);
  }

  sim_.allocator().free(old_addr);
  stats_.migrations++;

  // If the old address was watched, move the watch entry along.
  auto wit = by_base_.find(old_addr);
  if (wit != by_base_.end()) {
    std::size_t idx = wit->second;
    by_base_.erase(wit);
    by_refcount_.erase(watched_[idx].refcount_addr);
    watched_[idx].addr = fresh;
    watched_[idx].refcount_addr = prof.field_addr(fresh, layout::kDentry, "refcount");
    watched_[idx].page = sim_.memory().page_of(watched_[idx].refcount_addr);
    index_watch(idx);
  }
  return fresh;
}

// ---------------------------------------------------------------------------
// cache-creation handshake

void Monitor::complete_cache_creation(const std::string& payload) {
  std::vector<std::int64_t> pids;
  std::size_t pos = 0;
  while (pos < payload.size()) {
    std::size_t sp = payload.find(' ', pos);
    std::string tok = payload.substr(pos, sp == std::string::npos ? std::string::npos
                                                                  : sp - pos);
    pos = sp == std::string::npos ? payload.size() : sp + 1;
    if (tok.rfind("agent=", 0) == 0) {
      pids.push_back(std::stoll(tok.substr(6)));
    } else if (tok.rfind("hidden=", 0) == 0) {
      std::string rest = tok.substr(7);
      std::size_t p2 = 0;
      while (p2 < rest.size()) {
        std::size_t comma = rest.find(',', p2);
        std::string item = rest.substr(p2, comma == std::string::npos ? std::string::npos
                                                                      : comma - p2);
        p2 = comma == std::string::npos ? rest.size() : comma + 1;
        std::size_t colon = item.find(':');
        if (colon != std::string::npos)
          pids.push_back(std::stoll(item.substr(colon + 1)));
      }
    } else if (tok.rfind("failed=", 0) == 0) {
      std::string rest = tok.substr(7);
      std::size_t p2 = 0;
      while (p2 < rest.size()) {
        std::size_t bar = rest.find('|', p2);
        std::string item = rest.substr(p2, bar == std::string::npos ? std::string::npos
                                                                    : bar - p2);
        p2 = bar == std::string::npos ? rest.size() : bar + 1;
        stats_.cache_failures++;
        warnings_.push_back("cache creation failed for " + item);
      }
    }
  }
  for (std::int64_t pid : pids) {
    agent_pids_.insert(pid);
    watch_agent_fd_targets(pid);
  }
}

void Monitor::watch_agent_fd_targets(std::int64_t agent_pid) {
  const LayoutProfile& prof = sim_.profile();
  auto procs = introspection::walk_process_list(hv_, prof, registry());
  const introspection::ProcessInfo* agent = nullptr;
  for (const auto& p : procs)
    if (p.pid == agent_pid) agent = &p;
  if (!agent) {
    warnings_.push_back("agent pid " + std::to_string(agent_pid) + " not found");
    return;
  }

  // task_struct -> files -> fd array -> file -> dentry, reconstructed from
  // raw memory.
  GuestAddr fdt = hv_.vmi_read_u64(prof.field_addr(agent->task_addr, layout::kProcess, "fd_table"));
  const std::uint32_t nslots = prof.field(layout::kFdTable, "slots").size / 8;
  for (std::uint32_t i = 0; i < nslots; ++i) {
    GuestAddr fobj = hv_.vmi_read_u64(fdt + i * 8);
    if (!fobj) continue;
    GuestAddr dentry = hv_.vmi_read_u64(prof.field_addr(fobj, layout::kFile, "dentry"));
    if (!dentry) continue;
    std::string key = introspection::dentry_path_via_vmi(hv_, prof, dentry);
    auto pidx = policies_.find(key);
    if (!pidx) continue;
    if (by_base_.count(dentry)) continue;
    GuestAddr addr = dentry;
    if (cache_placement_ == Placement::Isolated &&
        sim_.memory().kind(sim_.memory().page_of(addr)) != PageKind::SlabIsolated) {
      // Already cached before the agent ran: migrate into isolated space.
      addr = migrate_dentry(addr);
    }
    std::size_t widx = watch_dentry(addr, *pidx);
    track_alias_cycle(widx);
  }
}

void Monitor::track_alias_cycle(std::size_t widx) {
  const LayoutProfile& prof = sim_.profile();
  const GuestAddr start = watched_[widx].addr;
  std::vector<GuestAddr> peers;
  GuestAddr cur = hv_.vmi_read_u64(prof.field_addr(start, layout::kDentry, "alias_next"));
  std::uint64_t steps = 0;
  while (cur && cur != start) {
    if (++steps > 65536) throw SimFault("alias cycle does not close");
    peers.push_back(cur);
    cur = hv_.vmi_read_u64(prof.field_addr(cur, layout::kDentry, "alias_next"));
  }
  for (GuestAddr peer : peers) {
    if (by_base_.count(peer)) continue;
    GuestAddr addr = peer;
    if (cache_placement_ == Placement::Isolated &&
        sim_.memory().kind(sim_.memory().page_of(addr)) != PageKind::SlabIsolated)
      addr = migrate_dentry(addr);
    std::size_t nidx = watch_dentry(addr, watched_[widx].policy_idx);
    log(MonitorEvent::Kind::HardlinkTracked, std::nullopt, watched_[nidx].path_key);
  }
  // Refresh peer lists on every entry of the cycle.
  std::vector<GuestAddr> cycle{watched_[widx].addr};
  for (GuestAddr p : peers) {
    auto it = by_base_.find(p);
    if (it != by_base_.end())
      cycle.push_back(watched_[it->second].addr);
    else
      cycle.push_back(p);
  }
  for (GuestAddr member : cycle) {
    auto it = by_base_.find(member);
    if (it == by_base_.end()) continue;
    watched_[it->second].alias_peers.clear();
    for (GuestAddr other : cycle)
      if (other != member) watched_[it->second].alias_peers.push_back(other);
  }
}

// ---------------------------------------------------------------------------
// trap handling

std::optional<std::size_t> Monitor::watch_by_refcount(GuestAddr addr) const {
  auto it = by_refcount_.find(addr);
  if (it == by_refcount_.end()) return std::nullopt;
  return it->second;
}

std::optional<std::size_t> Monitor::watch_containing(GuestAddr addr) const {
  auto it = by_base_.upper_bound(addr);
  if (it == by_base_.begin()) return std::nullopt;
  --it;
  const std::uint32_t dsize = sim_.profile().size_of(layout::kDentry);
  if (addr >= it->first && addr < it->first + dsize) return it->second;
  return std::nullopt;
}

void Monitor::log(MonitorEvent::Kind kind,
                  const std::optional<introspection::ProcessInfo>& who,
                  const std::string& path) {
  MonitorEvent e;
  e.seq = ++event_seq_;
  e.kind = kind;
  if (who) {
    e.pid = who->pid;
    e.process = who->name;
    e.uid = who->uid;
    e.container = who->is_host() ? "host" : who->container_id;
  } else {
    e.pid = 0;
    e.process = "-";
    e.uid = -1;
    e.container = "-";
  }
  e.path = path;
  events_.push_back(std::move(e));
}

Disposition Monitor::handle_refcount_write(const VmExitEvent& ev, std::size_t widx) {
  stats_.watched_hits++;
  const WatchedDentry& w = watched_[widx];
  const std::uint64_t old_value = hv_.vmi_read_u64(ev.addr);
  std::uint64_t new_value = 0;
  for (int i = 7; i >= 0; --i) new_value = (new_value << 8) | ev.new_value[i];

  auto who = introspection::attribute_access(hv_, sim_.profile(), registry(), ev.ctx);

  if (new_value > old_value) {
    // A new program is accessing the file.
    log(MonitorEvent::Kind::FileOpened, who, w.path_key);
    const InFlightSyscall* fly =
        hv_.inflight(ev.ctx.address_space_id, ev.ctx.stack_id);
    unsigned ops = kOpRead;
    if (fly && fly->name == SyscallName::Open) ops = ops_of(fly->mode);
    // Unknown attribution is fail-closed.
    const bool allowed = who.has_value() && policies_.allows(w.policy_idx, *who, ops);
    if (!allowed) {
      pending_blocks_[{ev.ctx.address_space_id, ev.ctx.stack_id}] =
          PendingBlock{w.refcount_addr, widx, ev.ctx.pid};
      update_return_arming();
    }
  } else if (new_value < old_value) {
    log(MonitorEvent::Kind::FileClosed, who, w.path_key);
  }

  if (new_value == 0) {
    // Keep-alive: the periodic cleanup would otherwise release the cache.
    log(MonitorEvent::Kind::RefcountRescued, std::nullopt, w.path_key);
    std::vector<std::uint8_t> one(ev.new_value.size(), 0);
    one[0] = 1;
    return Disposition::rewrite_to(std::move(one));
  }
  return Disposition::pass();
}

Disposition Monitor::handle_watched_read(const VmExitEvent& ev, std::size_t widx) {
  const WatchedDentry& w = watched_[widx];
  const InFlightSyscall* fly = hv_.inflight(ev.ctx.address_space_id, ev.ctx.stack_id);
  if (!fly) {
    // No syscall in flight: a direct read of the cache, the migration
    // primitive an attacker would use.
    auto who = introspection::attribute_access(hv_, sim_.profile(), registry(), ev.ctx);
    log(MonitorEvent::Kind::UnauthorizedReadBlocked, who, w.path_key);
    return Disposition::deny();
  }
  // Reads issued while resolving some other path are kernel housekeeping
  // (hash-chain scans); only reads on behalf of a syscall that targets this
  // file are policy checked.
  const bool targets = fly->path == w.path_key || fly->path2 == w.path_key;
  if (!targets) {
    stats_.watched_hits++;
    return Disposition::pass();
  }
  // A process holding any right on the file may read its cache while the
  // kernel resolves it; the op-specific verdict falls at the return site.
  auto who = introspection::attribute_access(hv_, sim_.profile(), registry(), ev.ctx);
  if (who.has_value() && (policies_.allows(w.policy_idx, *who, kOpRead) ||
                          policies_.allows(w.policy_idx, *who, kOpWrite))) {
    stats_.watched_hits++;
    return Disposition::pass();
  }
  log(MonitorEvent::Kind::UnauthorizedReadBlocked, who, w.path_key);
  return Disposition::deny();
}

Disposition Monitor::on_violation(const VmExitEvent& ev) {
  const PageIndex page = sim_.memory().page_of(ev.addr);
  if (static_pages_.count(page)) {
    if (ev.access == Access::Write) {
      auto who = introspection::attribute_access(hv_, sim_.profile(), registry(), ev.ctx);
      log(MonitorEvent::Kind::StaticWriteBlocked, who,
          "page:" + std::to_string(page));
      return Disposition::deny();
    }
    return Disposition::pass();
  }

  if (ev.access == Access::Write) {
    auto widx = watch_by_refcount(ev.addr);
    if (widx && ev.new_value.size() == 8)
      return handle_refcount_write(ev, *widx);
    auto wc = watch_containing(ev.addr);
    if (wc) {
      // A write into the body of a watched dentry; alias links may have
      // changed, so queue a closure check for the owning syscall's return.
      stats_.watched_hits++;
      if (ev.ctx.address_space_id != 0) {
        pending_repairs_[{ev.ctx.address_space_id, ev.ctx.stack_id}].insert(*wc);
        update_return_arming();
      }
      return Disposition::pass();
    }
    stats_.false_traps++;
    return Disposition::pass();
  }

  // Read violation on a read-protected page.
  auto wc = watch_containing(ev.addr);
  if (wc) return handle_watched_read(ev, *wc);
  stats_.false_traps++;
  return Disposition::pass();
}

void Monitor::on_entry(const VmExitEvent& ev, SyscallEntryArgs& args) {
  if (ev.site.type != BreakpointSite::Type::SyscallEntry) return;

  if (mode_ == WatchMode::Intercept) {
    if (ev.site.syscall == SyscallName::Open && args.path && args.mode) {
      auto pidx = policies_.find(*args.path);
      if (pidx) {
        auto who = introspection::attribute_access(hv_, sim_.profile(), registry(), ev.ctx);
        if (who.has_value() && policies_.allows(*pidx, *who, ops_of(*args.mode))) {
          log(MonitorEvent::Kind::FileOpened, who, *args.path);
        } else {
          log(MonitorEvent::Kind::AccessBlocked, who, *args.path);
          args.veto = kBlockedResult;
        }
      }
    }
    return;
  }

  if (ev.site.syscall == SyscallName::Kill && args.target_pid) {
    if (agent_pids_.count(*args.target_pid)) {
      auto who = introspection::attribute_access(hv_, sim_.profile(), registry(), ev.ctx);
      log(MonitorEvent::Kind::AgentKillBlocked, who,
          "pid:" + std::to_string(*args.target_pid));
      // Substitute an invalid pid so the call fails in the guest.
      *args.target_pid = 0;
    } else {
      // Pending state keyed to the dying process expires here.
      const std::int64_t dying = *args.target_pid;
      for (auto it = pending_blocks_.begin(); it != pending_blocks_.end();)
        it = it->second.pid == dying ? pending_blocks_.erase(it) : std::next(it);
      update_return_arming();
    }
    return;
  }

  if (ev.site.syscall == SyscallName::Link && args.path) {
    auto it = std::find_if(watched_.begin(), watched_.end(),
                           [&](const WatchedDentry& w) { return w.path_key == *args.path; });
    if (it != watched_.end()) {
      pending_repairs_[{ev.ctx.address_space_id, ev.ctx.stack_id}].insert(
          std::size_t(it - watched_.begin()));
      update_return_arming();
    }
  }
}

void Monitor::on_return(const VmExitEvent& ev, std::int64_t provisional) {
  const auto key = std::make_pair(ev.ctx.address_space_id, ev.ctx.stack_id);

  auto rit = pending_repairs_.find(key);
  auto bit = pending_blocks_.find(key);
  if (rit == pending_repairs_.end() && bit == pending_blocks_.end()) {
    // Context switches mean this may be another process's return.
    stats_.ignored_returns++;
    return;
  }

  if (bit != pending_blocks_.end()) {
    const PendingBlock pb = bit->second;
    pending_blocks_.erase(bit);
    hv_.patch_syscall_result(ev.ctx.address_space_id, ev.ctx.stack_id, kBlockedResult);
    // Release the transient reference the blocked open took, so no readable
    // handle can be recovered by guessing descriptor numbers.
    const std::uint64_t rc = hv_.vmi_read_u64(pb.refcount_addr);
    if (rc > 0) hv_.vmi_write_u64(pb.refcount_addr, rc - 1);
    auto who = introspection::attribute_access(hv_, sim_.profile(), registry(), ev.ctx);
    log(MonitorEvent::Kind::AccessBlocked, who, watched_[pb.widx].path_key);
  }

  if (rit != pending_repairs_.end()) {
    const std::set<std::size_t> repairs = rit->second;
    pending_repairs_.erase(rit);
    if (provisional >= 0)
      for (std::size_t widx : repairs) track_alias_cycle(widx);
  }
  update_return_arming();
}

void Monitor::update_return_arming() {
  if (pending_blocks_.empty() && pending_repairs_.empty())
    hv_.disarm_breakpoint(BreakpointSite::ret());
  else
    hv_.arm_breakpoint(BreakpointSite::ret());
}

std::string Monitor::on_monitor_syscall(const VmExitEvent& ev, std::string_view payload) {
  (void)ev;
  std::string s(payload);
  if (s.rfind("caches-ready", 0) == 0) {
    complete_cache_creation(s);
    return "ok";
  }
  if (s == "poll") {
    if (runtime_queue_.empty()) return "none";
    std::string reply;
    for (const auto& p : runtime_queue_)
      reply += "open " + p.target_key() + "\n";
    runtime_queue_.clear();
    return reply;
  }
  return "";
}

std::string Monitor::render_events() const {
  std::string out;
  for (const auto& e : events_) {
    out += e.to_line();
    out += '\n';
  }
  return out;
}

}  // namespace cfmsim
