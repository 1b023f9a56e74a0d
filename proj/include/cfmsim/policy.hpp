#pragma once

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "cfmsim/introspection.hpp"
#include "cfmsim/types.hpp"

namespace cfmsim {

enum OpBit : unsigned { kOpRead = 1, kOpWrite = 2 };

inline unsigned ops_of(OpenMode m) {
  switch (m) {
    case OpenMode::ReadOnly: return kOpRead;
    case OpenMode::WriteOnly: return kOpWrite;
    case OpenMode::ReadWrite: return kOpRead | kOpWrite;
  }
  return 0;
}

struct AllowRule {
  std::string process_glob = "*";
  std::string uid_pattern = "*";  // "*" or a decimal uid
  unsigned ops = 0;
};

// Per-file access rule. Anything not explicitly allowed is denied.
struct Policy {
  FsScope scope;
  std::string path;
  std::vector<AllowRule> allow;

  std::string target_key() const { return scope.qualify(path); }
};

struct PolicyLoad {
  std::vector<Policy> policies;
  // Rejected entries with their document positions (duplicate targets,
  // malformed rules).
  std::vector<std::string> rejected;
};

// Parses a policy document: {"policies": [{scope, path, allow: [{process,
// uid, ops}]}]}. A structurally unreadable document throws; bad entries are
// rejected individually with positions.
PolicyLoad load_policies(const nlohmann::json& doc);

bool glob_match(const std::string& pattern, const std::string& text);

class PolicyTable {
 public:
  PolicyTable() = default;
  explicit PolicyTable(std::vector<Policy> policies);

  std::size_t size() const { return policies_.size(); }
  const Policy& at(std::size_t idx) const { return policies_.at(idx); }
  const std::vector<Policy>& all() const { return policies_; }
  std::optional<std::size_t> find(const std::string& target_key) const;

  // The requested ops must all be covered by matching allow rules.
  bool allows(std::size_t idx, const introspection::ProcessInfo& proc,
              unsigned ops) const;
  // True when every process may read (no read restriction): read traps are
  // then unnecessary for this file.
  bool read_unrestricted(std::size_t idx) const;

  std::size_t append(Policy p);

 private:
  std::vector<Policy> policies_;
};

}  // namespace cfmsim
