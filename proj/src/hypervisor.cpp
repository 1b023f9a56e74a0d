#include "cfmsim/hypervisor.hpp"

#include <algorithm>

namespace cfmsim {

const char* to_string(Access a) {
  return a == Access::Read ? "read" : "write";
}

const char* to_string(SyscallName n) {
  switch (n) {
    case SyscallName::Open: return "open";
    case SyscallName::Close: return "close";
    case SyscallName::Read: return "read";
    case SyscallName::Write: return "write";
    case SyscallName::Link: return "link";
    case SyscallName::Unlink: return "unlink";
    case SyscallName::Kill: return "kill";
    case SyscallName::Getdents: return "getdents";
    case SyscallName::Monitor: return "monitor";
    case SyscallName::Prune: return "prune";
  }
  return "?";
}

Hypervisor::Hypervisor(GuestMemory& mem, CostModel cost)
    : mem_(mem), cost_(cost) {
  ept_.assign(mem_.page_count(), EptEntry{});
}

void Hypervisor::set_page_perms(PageIndex page, bool readable, bool writable) {
  if (page >= ept_.size()) throw SimFault("set_page_perms: page out of range");
  ept_[page] = EptEntry{readable, writable};
}

EptEntry Hypervisor::page_perms(PageIndex page) const {
  if (page >= ept_.size()) throw SimFault("page_perms: page out of range");
  return ept_[page];
}

bool Hypervisor::access_one_page(const ProcContext& ctx, GuestAddr addr,
                                 std::span<const std::uint8_t> wbytes,
                                 std::span<std::uint8_t> rbytes, Access access) {
  const PageIndex page = mem_.page_of(addr);
  const EptEntry e = ept_[page];
  const bool allowed = access == Access::Write ? e.writable : e.readable;
  if (allowed) {
    if (access == Access::Write)
      mem_.raw_write(addr, wbytes);
    else
      mem_.raw_read(addr, rbytes);
    return true;
  }

  if (in_trap_window_)
    throw SimFault("guest access inside a single-step window");

  VmExitEvent ev;
  ev.seq = ++seq_;
  ev.kind = VmExitEvent::Kind::EptViolation;
  ev.addr = addr;
  ev.access = access;
  if (access == Access::Write)
    ev.new_value.assign(wbytes.begin(), wbytes.end());
  ev.ctx = ctx;
  counters_.vmexits++;
  events_.push_back(ev);

  Disposition d = Disposition::pass();
  if (on_violation_) {
    in_trap_window_ = true;
    d = on_violation_(events_.back());
    in_trap_window_ = false;
  }

  bool ok = true;
  if (d.kind == Disposition::Kind::Deny) {
    if (access == Access::Read) std::fill(rbytes.begin(), rbytes.end(), 0);
    ok = false;
  } else if (access == Access::Write) {
    if (d.kind == Disposition::Kind::Rewrite) {
      if (d.rewrite.size() != wbytes.size())
        throw SimFault("violation handler rewrite size mismatch");
      mem_.raw_write(addr, d.rewrite);
    } else {
      mem_.raw_write(addr, wbytes);
    }
  } else {
    mem_.raw_read(addr, rbytes);
  }

  // Transiently relaxing the permission, letting the access complete (or be
  // skipped), and re-arming is modeled as one single-step per violation.
  VmExitEvent ss;
  ss.seq = ++seq_;
  ss.kind = VmExitEvent::Kind::SingleStepDone;
  ss.addr = addr;
  ss.access = access;
  ss.ctx = ctx;
  counters_.single_steps++;
  events_.push_back(ss);
  return ok;
}

bool Hypervisor::guest_write(const ProcContext& ctx, GuestAddr addr,
                             std::span<const std::uint8_t> bytes) {
  mem_.check_range(addr, bytes.size());
  bool ok = true;
  std::uint64_t done = 0;
  while (done < bytes.size()) {
    const std::uint64_t page_end = (mem_.page_of(addr + done) + 1) * mem_.page_size();
    const std::uint64_t n = std::min<std::uint64_t>(bytes.size() - done, page_end - (addr + done));
    ok &= access_one_page(ctx, addr + done, bytes.subspan(done, n), {}, Access::Write);
    done += n;
  }
  return ok;
}

bool Hypervisor::guest_read(const ProcContext& ctx, GuestAddr addr,
                            std::span<std::uint8_t> out) {
  mem_.check_range(addr, out.size());
  bool ok = true;
  std::uint64_t done = 0;
  while (done < out.size()) {
    const std::uint64_t page_end = (mem_.page_of(addr + done) + 1) * mem_.page_size();
    const std::uint64_t n = std::min<std::uint64_t>(out.size() - done, page_end - (addr + done));
    ok &= access_one_page(ctx, addr + done, {}, out.subspan(done, n), Access::Read);
    done += n;
  }
  return ok;
}

bool Hypervisor::guest_write_u64(const ProcContext& ctx, GuestAddr addr, std::uint64_t v) {
  std::uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = std::uint8_t(v >> (8 * i));
  return guest_write(ctx, addr, b);
}

bool Hypervisor::guest_read_u64(const ProcContext& ctx, GuestAddr addr, std::uint64_t* v) {
  std::uint8_t b[8];
  if (!guest_read(ctx, addr, b)) return false;
  std::uint64_t r = 0;
  for (int i = 7; i >= 0; --i) r = (r << 8) | b[i];
  *v = r;
  return true;
}

void Hypervisor::vmi_read(GuestAddr addr, std::span<std::uint8_t> out) const {
  mem_.raw_read(addr, out);
}

void Hypervisor::vmi_write(GuestAddr addr, std::span<const std::uint8_t> bytes) {
  mem_.raw_write(addr, bytes);
}

std::uint64_t Hypervisor::vmi_read_u64(GuestAddr addr) const {
  return mem_.raw_read_u64(addr);
}

void Hypervisor::vmi_write_u64(GuestAddr addr, std::uint64_t v) {
  mem_.raw_write_u64(addr, v);
}

std::string Hypervisor::vmi_read_cstr(GuestAddr addr, std::uint64_t cap) const {
  return mem_.raw_read_cstr(addr, cap);
}

void Hypervisor::arm_breakpoint(BreakpointSite site) { armed_.insert(site); }
void Hypervisor::disarm_breakpoint(BreakpointSite site) { armed_.erase(site); }
bool Hypervisor::breakpoint_armed(BreakpointSite site) const {
  return armed_.count(site) != 0;
}

void Hypervisor::deliver_syscall_entry(const ProcContext& ctx, SyscallName name,
                                       SyscallEntryArgs& args) {
  const BreakpointSite site = BreakpointSite::entry(name);
  if (!breakpoint_armed(site)) return;
  VmExitEvent ev;
  ev.seq = ++seq_;
  ev.kind = VmExitEvent::Kind::Breakpoint;
  ev.site = site;
  ev.ctx = ctx;
  counters_.breakpoints++;
  events_.push_back(ev);
  if (on_entry_) on_entry_(events_.back(), args);
}

std::int64_t Hypervisor::deliver_syscall_return(const ProcContext& ctx,
                                                std::uint64_t instance,
                                                std::int64_t provisional) {
  if (!breakpoint_armed(BreakpointSite::ret())) return provisional;
  VmExitEvent ev;
  ev.seq = ++seq_;
  ev.kind = VmExitEvent::Kind::Breakpoint;
  ev.site = BreakpointSite::ret();
  ev.ctx = ctx;
  counters_.breakpoints++;
  events_.push_back(ev);

  ReturnWindow window;
  window.address_space_id = ctx.address_space_id;
  window.stack_id = ctx.stack_id;
  window.result = provisional;
  current_return_ = &window;
  if (on_return_) on_return_(events_.back(), provisional);
  current_return_ = nullptr;
  (void)instance;
  return window.result;
}

std::string Hypervisor::deliver_monitor_syscall(const ProcContext& ctx,
                                                std::string_view payload) {
  if (!breakpoint_armed(BreakpointSite::monitor_entry())) return {};
  VmExitEvent ev;
  ev.seq = ++seq_;
  ev.kind = VmExitEvent::Kind::Breakpoint;
  ev.site = BreakpointSite::monitor_entry();
  ev.ctx = ctx;
  counters_.breakpoints++;
  events_.push_back(ev);
  if (!on_monitor_) return {};
  return on_monitor_(events_.back(), payload);
}

void Hypervisor::patch_syscall_result(std::uint64_t address_space_id,
                                      std::uint64_t stack_id, std::int64_t value) {
  if (current_return_ == nullptr ||
      current_return_->address_space_id != address_space_id ||
      current_return_->stack_id != stack_id) {
    // Wrong-return-event hazard: a patch aimed at a different syscall
    // instance must not land.
    counters_.mismatched_patches++;
    return;
  }
  current_return_->result = value;
  current_return_->patched = true;
}

void Hypervisor::register_inflight(const ProcContext& ctx, InFlightSyscall rec) {
  inflight_[{ctx.address_space_id, ctx.stack_id}] = std::move(rec);
}

void Hypervisor::unregister_inflight(const ProcContext& ctx) {
  inflight_.erase({ctx.address_space_id, ctx.stack_id});
}

const InFlightSyscall* Hypervisor::inflight(std::uint64_t address_space_id,
                                            std::uint64_t stack_id) const {
  auto it = inflight_.find({address_space_id, stack_id});
  return it == inflight_.end() ? nullptr : &it->second;
}

void Hypervisor::note_memcopy(std::uint64_t bytes, double factor) {
  counters_.memcopy_bytes += bytes;
  counters_.memcopy_weighted_bytes += double(bytes) * factor;
}

void Hypervisor::reset_accounting() {
  counters_ = HypervisorCounters{};
  events_.clear();
}

MetricsReport Hypervisor::account() const {
  MetricsReport r;
  r.set("count.vmexits", double(counters_.vmexits));
  r.set("count.single_steps", double(counters_.single_steps));
  r.set("count.breakpoints", double(counters_.breakpoints));
  r.set("count.syscalls", double(counters_.syscalls));
  r.set("count.io_blocks", double(counters_.io_blocks));
  r.set("count.memcopy_bytes", double(counters_.memcopy_bytes));
  r.set("count.mismatched_patches", double(counters_.mismatched_patches));
  const double base = double(counters_.syscalls) * cost_.syscall_base +
                      double(counters_.io_blocks) * cost_.per_block_io +
                      counters_.memcopy_weighted_bytes * cost_.per_byte_memcopy;
  const double traps = double(counters_.vmexits) * cost_.vmexit +
                       double(counters_.single_steps) * cost_.single_step +
                       double(counters_.breakpoints) * cost_.breakpoint;
  r.set("cycles.base", base);
  r.set("cycles.traps", traps);
  r.set("cycles.total", base + traps);
  return r;
}

}  // namespace cfmsim
