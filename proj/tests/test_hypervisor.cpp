#include <random>

#include "doctest.h"

#include "cfmsim/hypervisor.hpp"

using namespace cfmsim;

namespace {

struct Rig {
  GuestMemory mem;
  Hypervisor hv;
  Rig() : mem(GuestMemoryConfig{4096, 256, 8}), hv(mem) {
    mem.reserve_range(16, PageKind::Data);
  }
  ProcContext ctx(std::int64_t pid = 7) {
    return ProcContext{pid, 0x1000 + std::uint64_t(pid), 42};
  }
};

std::uint64_t count_kind(const Hypervisor& hv, VmExitEvent::Kind k) {
  std::uint64_t n = 0;
  for (const auto& e : hv.events())
    if (e.kind == k) n++;
  return n;
}

}  // namespace

TEST_CASE("writes to unprotected pages cost nothing") {
  Rig rig;
  CHECK(rig.hv.guest_write_u64(rig.ctx(), 0x1000, 77));
  CHECK(rig.hv.events().empty());
  CHECK(rig.hv.account().get("cycles.traps") == 0);
  CHECK(rig.mem.raw_read_u64(0x1000) == 77);
}

TEST_CASE("unwritable page: write traps, read does not") {
  Rig rig;
  rig.hv.set_page_perms(1, true, false);
  std::uint64_t v = 0;
  CHECK(rig.hv.guest_read_u64(rig.ctx(), 0x1000, &v));
  CHECK(rig.hv.events().empty());

  CHECK(rig.hv.guest_write_u64(rig.ctx(), 0x1000, 5));
  REQUIRE(rig.hv.events().size() == 2);
  CHECK(rig.hv.events()[0].kind == VmExitEvent::Kind::EptViolation);
  CHECK(rig.hv.events()[0].access == Access::Write);
  CHECK(rig.hv.events()[1].kind == VmExitEvent::Kind::SingleStepDone);
  CHECK(rig.mem.raw_read_u64(0x1000) == 5);
}

TEST_CASE("unreadable page: read traps") {
  Rig rig;
  rig.hv.set_page_perms(1, false, false);
  std::uint64_t v = 0;
  CHECK(rig.hv.guest_read_u64(rig.ctx(), 0x1000, &v));
  CHECK(count_kind(rig.hv, VmExitEvent::Kind::EptViolation) == 1);
  CHECK(rig.hv.events()[0].access == Access::Read);
}

TEST_CASE("every violation is followed by exactly one single-step") {
  Rig rig;
  rig.hv.set_page_perms(1, false, false);
  rig.hv.set_page_perms(2, true, false);
  std::mt19937_64 rng(5);
  for (int i = 0; i < 50; ++i) {
    GuestAddr addr = (1 + rng() % 3) * 4096 + (rng() % 500) * 8;
    if (rng() % 2) {
      rig.hv.guest_write_u64(rig.ctx(), addr, rng());
    } else {
      std::uint64_t v;
      rig.hv.guest_read_u64(rig.ctx(), addr, &v);
    }
  }
  const auto& ev = rig.hv.events();
  for (std::size_t i = 0; i < ev.size(); ++i) {
    if (ev[i].kind == VmExitEvent::Kind::EptViolation) {
      REQUIRE(i + 1 < ev.size());
      CHECK(ev[i + 1].kind == VmExitEvent::Kind::SingleStepDone);
    }
  }
  CHECK(count_kind(rig.hv, VmExitEvent::Kind::EptViolation) ==
        count_kind(rig.hv, VmExitEvent::Kind::SingleStepDone));
}

TEST_CASE("handler rewrite lands the substituted value") {
  Rig rig;
  rig.hv.set_page_perms(1, true, false);
  rig.mem.raw_write_u64(0x1000, 0);
  rig.hv.set_violation_handler([](const VmExitEvent& ev) {
    std::uint64_t pending = 0;
    for (int i = 7; i >= 0; --i) pending = (pending << 8) | ev.new_value[i];
    if (pending == 0) {
      std::vector<std::uint8_t> one(8, 0);
      one[0] = 1;
      return Disposition::rewrite_to(std::move(one));
    }
    return Disposition::pass();
  });
  rig.hv.guest_write_u64(rig.ctx(), 0x1000, 0);
  CHECK(rig.mem.raw_read_u64(0x1000) == 1);
}

TEST_CASE("handler deny leaves memory unchanged") {
  Rig rig;
  rig.hv.set_page_perms(1, true, false);
  rig.mem.raw_write_u64(0x1000, 1234);
  rig.hv.set_violation_handler([](const VmExitEvent&) { return Disposition::deny(); });
  CHECK_FALSE(rig.hv.guest_write_u64(rig.ctx(), 0x1000, 9));
  CHECK(rig.mem.raw_read_u64(0x1000) == 1234);
  // The denied access still accounts one violation + one step.
  CHECK(count_kind(rig.hv, VmExitEvent::Kind::EptViolation) == 1);
  CHECK(count_kind(rig.hv, VmExitEvent::Kind::SingleStepDone) == 1);
}

TEST_CASE("writes spanning a page boundary are split per page") {
  Rig rig;
  rig.hv.set_page_perms(2, true, false);  // protect only the second page
  std::vector<std::uint8_t> bytes(64, 0xAB);
  GuestAddr addr = 2 * 4096 - 32;  // half in page 1, half in page 2
  rig.hv.guest_write(rig.ctx(), addr, bytes);
  REQUIRE(count_kind(rig.hv, VmExitEvent::Kind::EptViolation) == 1);
  CHECK(rig.hv.events()[0].addr == 2 * 4096);
  CHECK(rig.hv.events()[0].new_value.size() == 32);
}

TEST_CASE("vmi access bypasses permissions and generates no events") {
  Rig rig;
  rig.hv.set_page_perms(1, false, false);
  rig.hv.vmi_write_u64(0x1000, 99);
  CHECK(rig.hv.vmi_read_u64(0x1000) == 99);
  CHECK(rig.hv.events().empty());
  std::uint64_t v = 0;
  rig.hv.guest_read_u64(rig.ctx(), 0x1000, &v);
  CHECK(v == 99);  // guest observes the vmi write
}

TEST_CASE("out of range access faults the simulation") {
  Rig rig;
  std::uint8_t b[8];
  CHECK_THROWS_AS(rig.hv.vmi_read(256 * 4096, b), SimFault);
  CHECK_THROWS_AS(rig.hv.guest_write_u64(rig.ctx(), 256 * 4096 - 4, 1), SimFault);
}

TEST_CASE("breakpoints: arming is idempotent, disarmed sites never fire") {
  Rig rig;
  auto site = BreakpointSite::entry(SyscallName::Kill);
  rig.hv.arm_breakpoint(site);
  rig.hv.arm_breakpoint(site);
  CHECK(rig.hv.breakpoint_armed(site));
  SyscallEntryArgs args;
  rig.hv.deliver_syscall_entry(rig.ctx(), SyscallName::Kill, args);
  CHECK(rig.hv.counters().breakpoints == 1);
  rig.hv.disarm_breakpoint(site);
  rig.hv.deliver_syscall_entry(rig.ctx(), SyscallName::Kill, args);
  CHECK(rig.hv.counters().breakpoints == 1);
}

TEST_CASE("patch applies only to the matching syscall instance") {
  Rig rig;
  rig.hv.arm_breakpoint(BreakpointSite::ret());
  ProcContext a{1, 0x100, 11};
  ProcContext b{2, 0x200, 22};

  SUBCASE("matching patch lands") {
    rig.hv.set_return_handler([&](const VmExitEvent& ev, std::int64_t) {
      rig.hv.patch_syscall_result(ev.ctx.address_space_id, ev.ctx.stack_id, -1);
    });
    CHECK(rig.hv.deliver_syscall_return(a, 1, 5) == -1);
  }
  SUBCASE("mismatched patch is a diagnosed no-op") {
    rig.hv.set_return_handler([&](const VmExitEvent&, std::int64_t) {
      rig.hv.patch_syscall_result(b.address_space_id, b.stack_id, -1);
    });
    CHECK(rig.hv.deliver_syscall_return(a, 1, 5) == 5);
    CHECK(rig.hv.counters().mismatched_patches == 1);
  }
}

TEST_CASE("accounting is linear in trap counts") {
  Rig rig;
  rig.hv.note_syscall();
  rig.hv.note_io_blocks(4);
  const CostModel& cm = rig.hv.cost_model();
  CHECK(rig.hv.account().get("cycles.total") ==
        cm.syscall_base + 4 * cm.per_block_io);

  rig.hv.set_page_perms(1, true, false);
  const int traps = 5;
  for (int i = 0; i < traps; ++i) rig.hv.guest_write_u64(rig.ctx(), 0x1000, i);
  CHECK(rig.hv.account().get("cycles.total") ==
        cm.syscall_base + 4 * cm.per_block_io + traps * (cm.vmexit + cm.single_step));
}

TEST_CASE("in-flight registry tracks by (address space, stack)") {
  Rig rig;
  ProcContext c{3, 0x300, 33};
  InFlightSyscall rec;
  rec.name = SyscallName::Open;
  rec.path = "host:/x";
  rig.hv.register_inflight(c, rec);
  REQUIRE(rig.hv.inflight(0x300, 33) != nullptr);
  CHECK(rig.hv.inflight(0x300, 34) == nullptr);
  rig.hv.unregister_inflight(c);
  CHECK(rig.hv.inflight(0x300, 33) == nullptr);
}
