#include "cfmsim/bench.hpp"

#include <algorithm>
#include <cstdio>

namespace cfmsim {

void Bench::fill_common(CellMetrics& cell, ScenarioInstance& inst) {
  cell.metrics = inst.hv().account();
  cell.cycles = cell.metrics.get("cycles.total");
  cell.ept_violations = inst.hv().counters().vmexits;
  cell.breakpoints = inst.hv().counters().breakpoints;
  if (inst.monitor) {
    cell.false_traps = inst.monitor->stats().false_traps;
    cell.metrics.set("count.false_traps", double(cell.false_traps));
    cell.metrics.set("count.watched_hits", double(inst.monitor->stats().watched_hits));
    cell.metrics.set("count.watched", double(inst.monitor->watch_set().size()));
    cell.metrics.set("count.armed_pages", double(inst.monitor->armed_pages()));
  } else {
    cell.metrics.set("count.false_traps", 0);
    cell.metrics.set("count.watched_hits", 0);
    cell.metrics.set("count.watched", 0);
    cell.metrics.set("count.armed_pages", 0);
  }
}

CellMetrics Bench::run_file_io(const FileIoWorkload& spec, Strategy strategy,
                               std::optional<double> baseline_cycles) {
  if (spec.files.empty() || spec.block_size == 0 ||
      spec.total_bytes % spec.block_size != 0)
    throw ConfigError("fileio workload '" + spec.name + "' is not runnable");

  ScenarioInstance inst = build_instance(sc_, strategy);
  GuestKernel& k = inst.kernel();

  // Warm pass: the benchmark runs repeatedly over the same files, so their
  // caches exist before the measured window.
  for (const auto& scoped : spec.files) {
    auto [scope, path] = split_scoped_path(scoped);
    (void)scope;
    std::int64_t fd = k.sys_open(spec.runner, path, OpenMode::ReadOnly);
    if (fd < 0) throw SimFault("fileio: open failed for " + scoped);
    k.sys_close(spec.runner, int(fd));
  }
  inst.hv().reset_accounting();

  // Sequential per-file passes, one io syscall per record, the way the
  // throughput tool issues them.
  const std::uint64_t per_file = spec.total_bytes / spec.files.size();
  for (const auto& scoped : spec.files) {
    auto [scope, path] = split_scoped_path(scoped);
    (void)scope;
    std::int64_t fd = k.sys_open(spec.runner, path,
                                 spec.dir == IoDir::Read ? OpenMode::ReadOnly
                                                         : OpenMode::WriteOnly);
    if (fd < 0) throw SimFault("fileio: open failed for " + scoped);
    for (std::uint64_t off = 0; off + spec.block_size <= per_file; off += spec.block_size)
      k.sys_io(spec.runner, int(fd), spec.dir, spec.block_size, spec.block_size);
    k.sys_close(spec.runner, int(fd));
  }

  CellMetrics cell;
  cell.strategy = strategy;
  fill_common(cell, inst);
  if (baseline_cycles && *baseline_cycles > 0)
    cell.overhead_pct = (cell.cycles - *baseline_cycles) / *baseline_cycles * 100.0;
  cell.metrics.set("overhead_pct", cell.overhead_pct);
  return cell;
}

std::vector<StartupRow> Bench::run_startup(const StartupWorkload& spec) {
  std::vector<StartupRow> rows;
  const CostModel& cm = sc_.cost;
  std::set<std::string> existing;
  for (const auto& f : sc_.host_files) existing.insert(f.path);
  for (std::uint64_t n : spec.counts) {
    // Synthesize the monitored-file population for this run.
    Scenario sc2 = sc_;
    sc2.policies.clear();
    for (std::uint64_t i = 0; i < std::max(n, spec.files_count); ++i) {
      char path[64];
      std::snprintf(path, sizeof path, "%s/f%04llu", spec.files_dir.c_str(),
                    static_cast<unsigned long long>(i));
      if (!existing.count(path)) {
        Scenario::FileSpec f;
        f.path = path;
        f.content = "monitored";
        sc2.host_files.push_back(f);
      }
      if (i < n) {
        Policy p;
        p.scope = FsScope::host();
        p.path = path;
        p.allow.push_back({"*", "*", kOpRead});
        sc2.policies.push_back(std::move(p));
      }
    }
    ScenarioInstance inst = build_instance(sc2, Strategy::IsolatedPageWatch);

    StartupRow row;
    row.files = n;
    row.watched = inst.monitor->watch_set().size();
    row.watch_pages = inst.monitor->armed_pages();
    // Modeled startup: base plus the agent's per-file cache creation work.
    row.modeled_cycles = cm.base_startup_cycles + double(n) * cm.cache_creation_per_file;
    row.overhead_pct =
        double(n) * cm.cache_creation_per_file / cm.base_startup_cycles * 100.0;
    row.cfwatcher_overhead_pct =
        double(n) * cm.cfwatcher_injection_per_file / cm.base_startup_cycles * 100.0;
    rows.push_back(row);
  }
  return rows;
}

CellMetrics Bench::run_mem_copy(const MemCopyWorkload& spec, Strategy strategy,
                                std::optional<double> baseline_cycles) {
  ScenarioInstance inst = build_instance(sc_, strategy);
  GuestKernel& k = inst.kernel();
  GuestMemory& mem = inst.sim->memory();

  // Source/destination buffers in plain data pages.
  std::vector<GuestAddr> src, dst;
  for (int i = 0; i < 8; ++i) {
    auto p = mem.reserve_page(PageKind::Data);
    auto q = mem.reserve_page(PageKind::Data);
    if (!p || !q) throw SimFault("memcopy: out of data pages");
    src.push_back(*p * mem.page_size());
    dst.push_back(*q * mem.page_size());
  }

  double factor = 1.0;
  if (spec.mode == MemCopyWorkload::Mode::DUMP) factor = sc_.cost.memcopy_dump_factor;
  if (spec.mode == MemCopyWorkload::Mode::MCBLOCK) factor = sc_.cost.memcopy_mcblock_factor;

  inst.hv().reset_accounting();
  const std::uint64_t chunk = mem.page_size();
  const std::uint64_t chunks = spec.bytes / chunk;
  std::uint8_t buf[8];
  for (std::uint64_t i = 0; i < chunks; ++i) {
    k.raw_guest_read(1, src[i % src.size()] + (i * 64) % (chunk - 8), buf);
    k.raw_guest_write(1, dst[i % dst.size()] + (i * 64) % (chunk - 8), buf);
  }
  if (spec.bytes) inst.hv().note_memcopy(spec.bytes, factor);

  CellMetrics cell;
  cell.strategy = strategy;
  fill_common(cell, inst);
  if (baseline_cycles && *baseline_cycles > 0)
    cell.overhead_pct = (cell.cycles - *baseline_cycles) / *baseline_cycles * 100.0;
  cell.metrics.set("overhead_pct", cell.overhead_pct);
  return cell;
}

MetricsReport Bench::compare_strategies(const std::vector<Strategy>& strategies,
                                        const std::string& selector) {
  MetricsReport report;
  auto selected = [&](const std::string& name, const std::string& kind) {
    return selector == "all" || selector == name || selector == kind;
  };

  for (const auto& wl : sc_.fileio) {
    if (!selected(wl.name, "fileio")) continue;
    std::map<Strategy, CellMetrics> cells;
    CellMetrics base = run_file_io(wl, Strategy::NoMonitoring);
    double base_cycles = base.cycles;
    for (Strategy s : strategies) {
      CellMetrics c = s == Strategy::NoMonitoring
                          ? std::move(base)
                          : run_file_io(wl, s, base_cycles);
      if (s == Strategy::NoMonitoring) c.overhead_pct = 0;
      c.metrics.set("overhead_pct", c.overhead_pct);
      report.merge(wl.name + "." + to_string(s) + ".", c.metrics);
      cells[s] = std::move(c);
    }
    const bool have_all = cells.count(Strategy::NoMonitoring) &&
                          cells.count(Strategy::IsolatedPageWatch) &&
                          cells.count(Strategy::SharedPageWatch) &&
                          cells.count(Strategy::InterceptAllSyscalls);
    if (have_all) {
      const double iso = cells[Strategy::IsolatedPageWatch].overhead_pct;
      const double shared = cells[Strategy::SharedPageWatch].overhead_pct;
      const double icpt = cells[Strategy::InterceptAllSyscalls].overhead_pct;
      report.set("assert." + wl.name + ".ordering_ok",
                 (0 <= iso && iso < shared && shared <= icpt) ? 1 : 0);
      report.set("assert." + wl.name + ".isolated_below_2pct", iso < 2.0 ? 1 : 0);
      // 3% floor with the stated one-point tolerance.
      report.set("assert." + wl.name + ".shared_floor_ok", shared >= 2.0 ? 1 : 0);
      report.set("assert." + wl.name + ".isolated_zero_violations",
                 cells[Strategy::IsolatedPageWatch].ept_violations == 0 ? 1 : 0);
      report.set("assert." + wl.name + ".shared_false_traps_positive",
                 cells[Strategy::SharedPageWatch].false_traps > 0 ? 1 : 0);
    }
  }

  for (const auto& wl : sc_.startup) {
    if (!selected(wl.name, "startup")) continue;
    auto rows = run_startup(wl);
    bool monotone = true, band = true;
    double prev = -1;
    for (const auto& r : rows) {
      char key[128];
      std::snprintf(key, sizeof key, "%s.n%llu.", wl.name.c_str(),
                    static_cast<unsigned long long>(r.files));
      report.set(std::string(key) + "modeled_cycles", r.modeled_cycles);
      report.set(std::string(key) + "overhead_pct", r.overhead_pct);
      report.set(std::string(key) + "cfwatcher_overhead_pct", r.cfwatcher_overhead_pct);
      report.set(std::string(key) + "watch_pages", double(r.watch_pages));
      report.set(std::string(key) + "watched", double(r.watched));
      if (r.overhead_pct <= prev) monotone = false;
      prev = r.overhead_pct;
      if (r.overhead_pct < 0.3 || r.overhead_pct > 1.6) band = false;
    }
    report.set("assert." + wl.name + ".monotone", monotone ? 1 : 0);
    report.set("assert." + wl.name + ".band_ok", band ? 1 : 0);
    report.set("assert." + wl.name + ".per_file_below_cfwatcher",
               sc_.cost.cache_creation_per_file < sc_.cost.cfwatcher_injection_per_file
                   ? 1
                   : 0);
  }

  for (const auto& wl : sc_.memcopy) {
    if (!selected(wl.name, "memcopy")) continue;
    CellMetrics base = run_mem_copy(wl, Strategy::NoMonitoring);
    report.merge(wl.name + ".none.", base.metrics);
    CellMetrics mon = run_mem_copy(wl, Strategy::IsolatedPageWatch, base.cycles);
    report.merge(wl.name + ".isolated.", mon.metrics);
    report.set("assert." + wl.name + ".event_counts_equal",
               (base.ept_violations == mon.ept_violations &&
                base.metrics.get("count.single_steps") ==
                    mon.metrics.get("count.single_steps"))
                   ? 1
                   : 0);
  }
  return report;
}

std::string render_table(const MetricsReport& report) {
  std::string out;
  std::size_t width = 0;
  for (const auto& [k, v] : report.rows()) width = std::max(width, k.size());
  for (const auto& [k, v] : report.rows()) {
    out += k;
    out.append(width + 2 - k.size(), ' ');
    out += MetricsReport::format_value(v);
    out += '\n';
  }
  return out;
}

}  // namespace cfmsim
