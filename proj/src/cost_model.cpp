#include "cfmsim/cost_model.hpp"

#include <cmath>
#include <cstdio>

#include "cfmsim/types.hpp"

namespace cfmsim {

void CostModel::apply_overrides(const nlohmann::json& doc) {
  if (doc.is_null()) return;
  if (!doc.is_object()) throw ConfigError("cost_model: expected an object");
  auto take = [&](const char* key, double& slot) {
    if (doc.contains(key)) {
      slot = doc.at(key).get<double>();
      if (slot < 0) throw ConfigError(std::string("cost_model.") + key + ": must be >= 0");
    }
  };
  take("vmexit", vmexit);
  take("single_step", single_step);
  take("breakpoint", breakpoint);
  take("syscall_base", syscall_base);
  take("per_block_io", per_block_io);
  take("per_byte_memcopy", per_byte_memcopy);
  take("cache_creation_per_file", cache_creation_per_file);
  take("cfwatcher_injection_per_file", cfwatcher_injection_per_file);
  take("base_startup_cycles", base_startup_cycles);
  take("memcopy_dump_factor", memcopy_dump_factor);
  take("memcopy_mcblock_factor", memcopy_mcblock_factor);
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    static const char* known[] = {
        "vmexit", "single_step", "breakpoint", "syscall_base", "per_block_io",
        "per_byte_memcopy", "cache_creation_per_file", "cfwatcher_injection_per_file",
        "base_startup_cycles", "memcopy_dump_factor", "memcopy_mcblock_factor"};
    bool ok = false;
    for (const char* k : known) ok = ok || it.key() == k;
    if (!ok) throw ConfigError("cost_model: unknown key '" + it.key() + "'");
  }
}

nlohmann::json CostModel::to_json() const {
  return nlohmann::json{
      {"vmexit", vmexit},
      {"single_step", single_step},
      {"breakpoint", breakpoint},
      {"syscall_base", syscall_base},
      {"per_block_io", per_block_io},
      {"per_byte_memcopy", per_byte_memcopy},
      {"cache_creation_per_file", cache_creation_per_file},
      {"cfwatcher_injection_per_file", cfwatcher_injection_per_file},
      {"base_startup_cycles", base_startup_cycles},
      {"memcopy_dump_factor", memcopy_dump_factor},
      {"memcopy_mcblock_factor", memcopy_mcblock_factor},
  };
}

double MetricsReport::get(const std::string& key) const {
  auto it = rows_.find(key);
  if (it == rows_.end()) throw SimFault("metrics: unknown key '" + key + "'");
  return it->second;
}

void MetricsReport::merge(const std::string& prefix, const MetricsReport& other) {
  for (const auto& [k, v] : other.rows_) rows_[prefix + k] = v;
}

std::string MetricsReport::format_value(double v) {
  char buf[64];
  if (v == std::floor(v) && std::fabs(v) < 1e15)
    std::snprintf(buf, sizeof buf, "%.0f", v);
  else
    std::snprintf(buf, sizeof buf, "%.6f", v);
  return buf;
}

std::string MetricsReport::to_records() const {
  std::string out;
  for (const auto& [k, v] : rows_) {
    out += k;
    out += ' ';
    out += format_value(v);
    out += '\n';
  }
  return out;
}

}  // namespace cfmsim
