#include "cfmsim/policy.hpp"

#include <set>

namespace cfmsim {

bool glob_match(const std::string& pattern, const std::string& text) {
  // Iterative * / ? matcher.
  std::size_t p = 0, t = 0, star = std::string::npos, mark = 0;
  while (t < text.size()) {
    if (p < pattern.size() && (pattern[p] == '?' || pattern[p] == text[t])) {
      ++p;
      ++t;
    } else if (p < pattern.size() && pattern[p] == '*') {
      star = p++;
      mark = t;
    } else if (star != std::string::npos) {
      p = star + 1;
      t = ++mark;
    } else {
      return false;
    }
  }
  while (p < pattern.size() && pattern[p] == '*') ++p;
  return p == pattern.size();
}

namespace {

unsigned parse_ops(const nlohmann::json& arr, const std::string& where) {
  unsigned ops = 0;
  if (!arr.is_array()) throw ConfigError(where + ": ops must be an array");
  for (const auto& o : arr) {
    std::string s = o.get<std::string>();
    if (s == "read")
      ops |= kOpRead;
    else if (s == "write")
      ops |= kOpWrite;
    else
      throw ConfigError(where + ": unknown op '" + s + "'");
  }
  return ops;
}

}  // namespace

PolicyLoad load_policies(const nlohmann::json& doc) {
  PolicyLoad out;
  const nlohmann::json* list = nullptr;
  if (doc.is_array())
    list = &doc;
  else if (doc.is_object() && doc.contains("policies"))
    list = &doc.at("policies");
  else if (doc.is_object() && doc.empty())
    return out;
  else
    throw ConfigError("policy document: expected {\"policies\": [...]}");

  std::set<std::string> seen;
  for (std::size_t i = 0; i < list->size(); ++i) {
    const std::string where = "/policies/" + std::to_string(i);
    const auto& entry = (*list)[i];
    try {
      if (!entry.is_object()) throw ConfigError(where + ": expected an object");
      Policy p;
      std::string scope = entry.value("scope", std::string("host"));
      if (scope == "host") {
        p.scope = FsScope::host();
      } else if (scope.rfind("container:", 0) == 0) {
        p.scope = FsScope::in(scope.substr(10));
        if (p.scope.container.empty())
          throw ConfigError(where + "/scope: empty container id");
      } else {
        throw ConfigError(where + "/scope: expected 'host' or 'container:<id>'");
      }
      if (!entry.contains("path")) throw ConfigError(where + ": missing path");
      p.path = entry.at("path").get<std::string>();
      if (p.path.empty() || p.path[0] != '/')
        throw ConfigError(where + "/path: must be absolute");
      if (entry.contains("allow")) {
        for (std::size_t j = 0; j < entry.at("allow").size(); ++j) {
          const auto& r = entry.at("allow")[j];
          const std::string rwhere = where + "/allow/" + std::to_string(j);
          AllowRule rule;
          rule.process_glob = r.value("process", std::string("*"));
          if (r.contains("uid")) {
            if (r.at("uid").is_number())
              rule.uid_pattern = std::to_string(r.at("uid").get<std::int64_t>());
            else
              rule.uid_pattern = r.at("uid").get<std::string>();
          }
          rule.ops = parse_ops(r.value("ops", nlohmann::json::array()), rwhere);
          p.allow.push_back(std::move(rule));
        }
      }
      if (!seen.insert(p.target_key()).second) {
        out.rejected.push_back(where + ": duplicate target " + p.target_key());
        continue;
      }
      out.policies.push_back(std::move(p));
    } catch (const ConfigError& e) {
      out.rejected.push_back(e.what());
    } catch (const nlohmann::json::exception& e) {
      out.rejected.push_back(where + ": " + e.what());
    }
  }
  return out;
}

PolicyTable::PolicyTable(std::vector<Policy> policies)
    : policies_(std::move(policies)) {}

std::optional<std::size_t> PolicyTable::find(const std::string& target_key) const {
  for (std::size_t i = 0; i < policies_.size(); ++i)
    if (policies_[i].target_key() == target_key) return i;
  return std::nullopt;
}

bool PolicyTable::allows(std::size_t idx, const introspection::ProcessInfo& proc,
                         unsigned ops) const {
  if (ops == 0) return true;
  const Policy& p = policies_.at(idx);
  unsigned granted = 0;
  for (const auto& r : p.allow) {
    if (!glob_match(r.process_glob, proc.name)) continue;
    if (r.uid_pattern != "*" && r.uid_pattern != std::to_string(proc.uid)) continue;
    granted |= r.ops;
  }
  return (ops & ~granted) == 0;
}

bool PolicyTable::read_unrestricted(std::size_t idx) const {
  const Policy& p = policies_.at(idx);
  for (const auto& r : p.allow)
    if ((r.ops & kOpRead) && r.process_glob == "*" && r.uid_pattern == "*")
      return true;
  return false;
}

std::size_t PolicyTable::append(Policy p) {
  policies_.push_back(std::move(p));
  return policies_.size() - 1;
}

}  // namespace cfmsim
