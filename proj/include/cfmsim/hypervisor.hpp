#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cfmsim/cost_model.hpp"
#include "cfmsim/guest_memory.hpp"
#include "cfmsim/types.hpp"

namespace cfmsim {

enum class Access { Read, Write };
const char* to_string(Access a);

enum class SyscallName {
  Open, Close, Read, Write, Link, Unlink, Kill, Getdents, Monitor, Prune
};
const char* to_string(SyscallName n);

struct BreakpointSite {
  enum class Type { SyscallEntry, SyscallReturn, MonitorSyscallEntry };
  Type type = Type::SyscallEntry;
  SyscallName syscall = SyscallName::Open;  // meaningful for SyscallEntry only

  auto operator<=>(const BreakpointSite&) const = default;
  static BreakpointSite entry(SyscallName n) { return {Type::SyscallEntry, n}; }
  static BreakpointSite ret() { return {Type::SyscallReturn, SyscallName::Open}; }
  static BreakpointSite monitor_entry() {
    return {Type::MonitorSyscallEntry, SyscallName::Monitor};
  }
};

// Guest CPU context at trap time: the CR3/RSP analogs plus the pid for
// convenience. stack_id is regenerated per in-flight syscall, so the
// (address_space_id, stack_id) pair identifies a syscall instance.
struct ProcContext {
  std::int64_t pid = 0;
  std::uint64_t address_space_id = 0;
  std::uint64_t stack_id = 0;
};

struct EptEntry {
  bool readable = true;
  bool writable = true;
};

struct VmExitEvent {
  enum class Kind { EptViolation, Breakpoint, SingleStepDone };
  std::uint64_t seq = 0;
  Kind kind = Kind::EptViolation;
  // EptViolation / SingleStepDone
  GuestAddr addr = 0;
  Access access = Access::Read;
  std::vector<std::uint8_t> new_value;  // pending bytes for writes
  // Breakpoint
  BreakpointSite site{};
  ProcContext ctx;
};

// Handler verdict for a trapped access. PassThrough single-steps the access
// as issued; Rewrite lands handler-chosen bytes instead; Deny suppresses the
// access entirely.
struct Disposition {
  enum class Kind { PassThrough, Deny, Rewrite };
  Kind kind = Kind::PassThrough;
  std::vector<std::uint8_t> rewrite;

  static Disposition pass() { return {}; }
  static Disposition deny() { return {Kind::Deny, {}}; }
  static Disposition rewrite_to(std::vector<std::uint8_t> bytes) {
    return {Kind::Rewrite, std::move(bytes)};
  }
};

// Mutable syscall-entry view. A handler may rewrite arguments or set a
// negative veto to fail the call before it executes.
struct SyscallEntryArgs {
  std::string* path = nullptr;
  std::string* path2 = nullptr;
  OpenMode* mode = nullptr;
  std::int64_t* target_pid = nullptr;
  std::int64_t veto = 0;
};

// In-flight syscall record, the register/stack state a real monitor would
// reconstruct at trap time.
struct InFlightSyscall {
  SyscallName name = SyscallName::Open;
  std::int64_t pid = 0;
  std::string path;   // scope-qualified
  std::string path2;  // scope-qualified (link)
  OpenMode mode = OpenMode::ReadOnly;
  std::uint64_t instance = 0;
};

struct HypervisorCounters {
  std::uint64_t vmexits = 0;
  std::uint64_t single_steps = 0;
  std::uint64_t breakpoints = 0;
  std::uint64_t syscalls = 0;
  std::uint64_t io_blocks = 0;
  std::uint64_t memcopy_bytes = 0;
  double memcopy_weighted_bytes = 0;
  std::uint64_t mismatched_patches = 0;
};

// The trap substrate: per-page permission entries, trap-and-single-step on
// violating guest accesses, instruction-site breakpoints, out-of-band memory
// access, and event/cost accounting.
class Hypervisor {
 public:
  Hypervisor(GuestMemory& mem, CostModel cost = CostModel::defaults());

  GuestMemory& memory() { return mem_; }
  const CostModel& cost_model() const { return cost_; }
  void set_cost_model(CostModel cm) { cost_ = cm; }

  void set_page_perms(PageIndex page, bool readable, bool writable);
  EptEntry page_perms(PageIndex page) const;

  // Guest-side accesses. Accesses spanning a page boundary are split into
  // per-page accesses, each independently checked. Returns false when a
  // handler denied (part of) the access.
  bool guest_write(const ProcContext& ctx, GuestAddr addr,
                   std::span<const std::uint8_t> bytes);
  bool guest_read(const ProcContext& ctx, GuestAddr addr,
                  std::span<std::uint8_t> out);
  bool guest_write_u64(const ProcContext& ctx, GuestAddr addr, std::uint64_t v);
  bool guest_read_u64(const ProcContext& ctx, GuestAddr addr, std::uint64_t* v);

  // Out-of-band access: bypasses permission entries, generates no events.
  void vmi_read(GuestAddr addr, std::span<std::uint8_t> out) const;
  void vmi_write(GuestAddr addr, std::span<const std::uint8_t> bytes);
  std::uint64_t vmi_read_u64(GuestAddr addr) const;
  void vmi_write_u64(GuestAddr addr, std::uint64_t v);
  std::string vmi_read_cstr(GuestAddr addr, std::uint64_t cap) const;

  void arm_breakpoint(BreakpointSite site);     // idempotent
  void disarm_breakpoint(BreakpointSite site);  // idempotent
  bool breakpoint_armed(BreakpointSite site) const;

  // Delivery points, called from the guest kernel.
  void deliver_syscall_entry(const ProcContext& ctx, SyscallName name,
                             SyscallEntryArgs& args);
  std::int64_t deliver_syscall_return(const ProcContext& ctx,
                                      std::uint64_t instance,
                                      std::int64_t provisional);
  std::string deliver_monitor_syscall(const ProcContext& ctx,
                                      std::string_view payload);

  // Patches the guest-visible result of the syscall instance currently at
  // its return site. A mismatched (address_space_id, stack_id) pair is a
  // no-op recorded as a diagnostic.
  void patch_syscall_result(std::uint64_t address_space_id,
                            std::uint64_t stack_id, std::int64_t value);

  void register_inflight(const ProcContext& ctx, InFlightSyscall rec);
  void unregister_inflight(const ProcContext& ctx);
  const InFlightSyscall* inflight(std::uint64_t address_space_id,
                                  std::uint64_t stack_id) const;

  using ViolationHandler = std::function<Disposition(const VmExitEvent&)>;
  using EntryHandler = std::function<void(const VmExitEvent&, SyscallEntryArgs&)>;
  using ReturnHandler = std::function<void(const VmExitEvent&, std::int64_t provisional)>;
  using MonitorHandler = std::function<std::string(const VmExitEvent&, std::string_view)>;
  void set_violation_handler(ViolationHandler h) { on_violation_ = std::move(h); }
  void set_entry_handler(EntryHandler h) { on_entry_ = std::move(h); }
  void set_return_handler(ReturnHandler h) { on_return_ = std::move(h); }
  void set_monitor_handler(MonitorHandler h) { on_monitor_ = std::move(h); }

  // Workload cost notes (no events).
  void note_syscall() { counters_.syscalls++; }
  void note_io_blocks(std::uint64_t n) { counters_.io_blocks += n; }
  void note_memcopy(std::uint64_t bytes, double factor);

  const std::vector<VmExitEvent>& events() const { return events_; }
  const HypervisorCounters& counters() const { return counters_; }
  void reset_accounting();

  // Counts per event kind plus total modeled cycles.
  MetricsReport account() const;

 private:
  struct ReturnWindow {
    std::uint64_t address_space_id = 0;
    std::uint64_t stack_id = 0;
    std::int64_t result = 0;
    bool patched = false;
  };

  bool access_one_page(const ProcContext& ctx, GuestAddr addr,
                       std::span<const std::uint8_t> wbytes,
                       std::span<std::uint8_t> rbytes, Access access);

  GuestMemory& mem_;
  CostModel cost_;
  std::vector<EptEntry> ept_;
  std::set<BreakpointSite> armed_;
  std::vector<VmExitEvent> events_;
  HypervisorCounters counters_;
  std::uint64_t seq_ = 0;
  bool in_trap_window_ = false;
  ReturnWindow* current_return_ = nullptr;
  std::map<std::pair<std::uint64_t, std::uint64_t>, InFlightSyscall> inflight_;

  ViolationHandler on_violation_;
  EntryHandler on_entry_;
  ReturnHandler on_return_;
  MonitorHandler on_monitor_;
};

}  // namespace cfmsim
