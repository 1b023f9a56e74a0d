#include "cfmsim/attacks.hpp"

#include <algorithm>

namespace cfmsim {

const char* to_string(AttackName a) {
  switch (a) {
    case AttackName::TamperRunc: return "TamperRunc";
    case AttackName::TamperWebPage: return "TamperWebPage";
    case AttackName::ReplaceLogin: return "ReplaceLogin";
    case AttackName::KillAgent: return "KillAgent";
    case AttackName::HardlinkBypass: return "HardlinkBypass";
    case AttackName::GuessFdBypass: return "GuessFdBypass";
    case AttackName::KernelPatch: return "KernelPatch";
  }
  return "?";
}

std::optional<AttackName> attack_from_string(const std::string& s) {
  for (AttackName a : all_attacks())
    if (s == to_string(a)) return a;
  return std::nullopt;
}

const std::vector<AttackName>& all_attacks() {
  static const std::vector<AttackName> names{
      AttackName::TamperRunc,    AttackName::TamperWebPage,
      AttackName::ReplaceLogin,  AttackName::KillAgent,
      AttackName::HardlinkBypass, AttackName::GuessFdBypass,
      AttackName::KernelPatch,
  };
  return names;
}

namespace {

std::int64_t find_by_name(const GuestKernel& k, const std::string& name,
                          const std::string& container) {
  for (const auto& p : k.roster())
    if (p.alive && p.name == name && p.scope.container == container) return p.pid;
  return 0;
}

}  // namespace

AttackResult run_attack(const Scenario& sc, AttackName name) {
  if (!sc.attack)
    throw ConfigError(sc.source + ": scenario has no attack section");
  const AttackConfig& cfg = *sc.attack;

  ScenarioInstance inst = build_instance(sc, Strategy::IsolatedPageWatch);
  GuestKernel& k = inst.kernel();
  const std::size_t events_before = inst.monitor->events().size();

  AttackResult res;
  res.name = name;
  const FsScope cscope = FsScope::in(cfg.container);

  switch (name) {
    case AttackName::TamperRunc: {
      const std::string before = k.read_content(FsScope::host(), cfg.runc_path);
      std::int64_t r = k.sys_open(cfg.host_attacker, cfg.runc_path, OpenMode::WriteOnly);
      const bool unchanged = k.read_content(FsScope::host(), cfg.runc_path) == before;
      res.blocked = r < 0 && unchanged && k.open_fds(cfg.host_attacker).empty();
      res.detail = "open=" + std::to_string(r) + (unchanged ? " content-intact" : " TAMPERED");
      break;
    }
    case AttackName::TamperWebPage: {
      const std::string before = k.read_content(cscope, cfg.web_page);
      std::int64_t w = k.sys_open(cfg.container_attacker, cfg.web_page, OpenMode::WriteOnly);
      std::int64_t rd = k.sys_open(cfg.container_attacker, cfg.web_page, OpenMode::ReadOnly);
      std::int64_t reader = find_by_name(k, cfg.web_reader, cfg.container);
      std::int64_t ok = reader ? k.sys_open(reader, cfg.web_page, OpenMode::ReadOnly)
                               : kErrSrch;
      if (ok >= 0) {
        k.sys_io(reader, int(ok), IoDir::Read, 4096, 4096);
        k.sys_close(reader, int(ok));
      }
      const bool unchanged = k.read_content(cscope, cfg.web_page) == before;
      res.blocked = w < 0 && rd < 0 && ok >= 0 && unchanged;
      res.detail = "write=" + std::to_string(w) + " read=" + std::to_string(rd) +
                   " reader_open=" + std::to_string(ok) +
                   (unchanged ? " content-intact" : " TAMPERED");
      break;
    }
    case AttackName::ReplaceLogin: {
      const std::string before = k.read_content(cscope, cfg.login_path);
      std::int64_t r = k.sys_open(cfg.container_attacker, cfg.login_path, OpenMode::WriteOnly);
      const bool unchanged = k.read_content(cscope, cfg.login_path) == before;
      res.blocked = r < 0 && unchanged;
      res.detail = "open=" + std::to_string(r) + (unchanged ? " content-intact" : " TAMPERED");
      break;
    }
    case AttackName::KillAgent: {
      const std::int64_t hidden = k.containers().at(cfg.container).hidden_agent_pid;
      const std::int64_t sec = k.security_agent_pid();
      std::int64_t r1 = hidden ? k.sys_kill(cfg.container_attacker, hidden) : kErrSrch;
      std::int64_t r2 = k.sys_kill(cfg.host_attacker, sec);
      const bool alive = (!hidden || k.proc(hidden)->alive) && k.proc(sec)->alive;
      res.blocked = r1 < 0 && r2 < 0 && alive;
      res.detail = "kill_hidden=" + std::to_string(r1) + " kill_agent=" + std::to_string(r2) +
                   (alive ? " agents-alive" : " AGENT-DEAD");
      break;
    }
    case AttackName::HardlinkBypass: {
      const std::string alias = "/lost+found-runc";
      const std::string before = k.read_content(FsScope::host(), cfg.runc_path);
      std::int64_t l = k.sys_link(cfg.host_attacker, cfg.runc_path, alias);
      std::int64_t w = k.sys_open(cfg.host_attacker, alias, OpenMode::WriteOnly);
      const bool unchanged = k.read_content(FsScope::host(), cfg.runc_path) == before &&
                             k.read_content(FsScope::host(), alias) == before;
      res.blocked = l == 0 && w < 0 && unchanged;
      res.detail = "link=" + std::to_string(l) + " write_via_alias=" + std::to_string(w) +
                   (unchanged ? " content-intact" : " TAMPERED");
      break;
    }
    case AttackName::GuessFdBypass: {
      const std::string before = k.read_content(FsScope::host(), cfg.runc_path);
      std::int64_t r = k.sys_open(cfg.host_attacker, cfg.runc_path, OpenMode::WriteOnly);
      bool all_guesses_fail = true;
      for (int fd = 0; fd < 16; ++fd)
        all_guesses_fail &= k.sys_io(cfg.host_attacker, fd, IoDir::Write, 4096, 4096) < 0;
      const bool unchanged = k.read_content(FsScope::host(), cfg.runc_path) == before;
      res.blocked = r < 0 && all_guesses_fail && unchanged &&
                    k.open_fds(cfg.host_attacker).empty();
      res.detail = "open=" + std::to_string(r) +
                   (all_guesses_fail ? " guesses-failed" : " GUESS-HIT") +
                   (unchanged ? " content-intact" : " TAMPERED");
      break;
    }
    case AttackName::KernelPatch: {
      // Overwrite the syscall-filter code, then check the agent stayed
      // hidden from container callers.
      const GuestAddr target = k.static_pages()[1] * inst.sim->memory().page_size() + 512;
      std::uint8_t before[8];
      inst.hv().vmi_read(target, before);
      std::uint8_t payload[8] = {0xde, 0xad, 0xbe, 0xef, 0xde, 0xad, 0xbe, 0xef};
      const bool wrote = k.raw_guest_write(cfg.container_attacker, target, payload);
      std::uint8_t after[8];
      inst.hv().vmi_read(target, after);
      const bool unchanged = std::equal(before, before + 8, after);

      std::vector<std::string> names;
      k.sys_getdents(cfg.container_attacker, "/proc", &names);
      const std::int64_t hidden = k.containers().at(cfg.container).hidden_agent_pid;
      const bool still_hidden =
          hidden == 0 || std::find(names.begin(), names.end(),
                                   std::to_string(hidden)) == names.end();
      res.blocked = !wrote && unchanged && still_hidden;
      res.detail = std::string(wrote ? "WRITE-LANDED" : "write-denied") +
                   (unchanged ? " code-intact" : " PATCHED") +
                   (still_hidden ? " agent-hidden" : " AGENT-VISIBLE");
      break;
    }
  }

  for (std::size_t i = events_before; i < inst.monitor->events().size(); ++i)
    res.events.push_back(inst.monitor->events()[i].to_line());
  return res;
}

}  // namespace cfmsim
