#pragma once

#include <optional>
#include <string>
#include <vector>

#include "cfmsim/scenario.hpp"

namespace cfmsim {

enum class AttackName {
  TamperRunc,
  TamperWebPage,
  ReplaceLogin,
  KillAgent,
  HardlinkBypass,
  GuessFdBypass,
  KernelPatch,
};

const char* to_string(AttackName a);
std::optional<AttackName> attack_from_string(const std::string& s);
const std::vector<AttackName>& all_attacks();

struct AttackResult {
  AttackName name = AttackName::TamperRunc;
  bool blocked = false;
  std::string detail;
  std::vector<std::string> events;  // monitor trace emitted during the attack
};

// Runs one scripted attack against a fresh fully monitored instance.
// Blocked means the guest saw a negative result and the target content is
// byte-identical before and after.
AttackResult run_attack(const Scenario& sc, AttackName name);

}  // namespace cfmsim
