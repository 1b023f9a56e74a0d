#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "json.hpp"

namespace cfmsim {

// Cycle-cost table converting event counts into modeled overhead. Absolute
// values are calibration knobs (config-overridable); reports assert only
// orderings and bands.
struct CostModel {
  double vmexit = 6000;
  double single_step = 1000;
  double breakpoint = 3000;
  double syscall_base = 300;
  double per_block_io = 2000;
  double per_byte_memcopy = 1;
  double cache_creation_per_file = 50000;
  double cfwatcher_injection_per_file = 4000000;  // 2 ms at a nominal 2 GHz

  // Container startup baseline: 550 ms at a nominal 3 GHz clock.
  double base_startup_cycles = 1650000000;

  // Relative per-byte cost of the three memory-copy modes, derived from the
  // measured MB/s ratios between them.
  double memcopy_dump_factor = 1.7954;
  double memcopy_mcblock_factor = 1.4502;

  static CostModel defaults() { return CostModel{}; }
  void apply_overrides(const nlohmann::json& doc);
  nlohmann::json to_json() const;
};

// Flat key -> number report. Keys are emitted sorted, so the line-oriented
// form is byte-stable across runs.
class MetricsReport {
 public:
  void set(const std::string& key, double value) { rows_[key] = value; }
  void add(const std::string& key, double value) { rows_[key] += value; }
  double get(const std::string& key) const;
  bool has(const std::string& key) const { return rows_.count(key) != 0; }
  void merge(const std::string& prefix, const MetricsReport& other);

  const std::map<std::string, double>& rows() const { return rows_; }

  // One "key value" line per metric.
  std::string to_records() const;
  static std::string format_value(double v);

 private:
  std::map<std::string, double> rows_;
};

}  // namespace cfmsim
