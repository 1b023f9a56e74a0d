#include "cfmsim/scenario.hpp"

#include <fstream>
#include <set>

namespace cfmsim {

const char* to_string(Strategy s) {
  switch (s) {
    case Strategy::NoMonitoring: return "none";
    case Strategy::InterceptAllSyscalls: return "intercept";
    case Strategy::SharedPageWatch: return "sharedpage";
    case Strategy::IsolatedPageWatch: return "isolated";
  }
  return "?";
}

std::optional<Strategy> strategy_from_string(const std::string& s) {
  if (s == "none") return Strategy::NoMonitoring;
  if (s == "intercept") return Strategy::InterceptAllSyscalls;
  if (s == "sharedpage") return Strategy::SharedPageWatch;
  if (s == "isolated") return Strategy::IsolatedPageWatch;
  return std::nullopt;
}

namespace {

[[noreturn]] void bad(const std::string& source, const std::string& where,
                      const std::string& msg) {
  throw ConfigError(source + ":" + where + ": " + msg);
}

Scenario::FileSpec parse_file(const std::string& source, const std::string& where,
                              const std::string& path, const nlohmann::json& v) {
  Scenario::FileSpec f;
  f.path = path;
  if (path.empty() || path[0] != '/') bad(source, where, "path must be absolute");
  if (v.is_string()) {
    f.content = v.get<std::string>();
  } else if (v.is_object()) {
    f.content = v.value("content", std::string());
    f.readable = v.value("readable", true);
    f.writable = v.value("writable", true);
  } else {
    bad(source, where, "file entries are strings or {content, readable, writable}");
  }
  return f;
}

Scenario::ProcSpec parse_proc(const std::string& source, const std::string& where,
                              const nlohmann::json& v) {
  Scenario::ProcSpec p;
  if (!v.is_object() || !v.contains("pid") || !v.contains("name"))
    bad(source, where, "process entries need {pid, name}");
  p.pid = v.at("pid").get<std::int64_t>();
  p.name = v.at("name").get<std::string>();
  p.uid = v.value("uid", 0);
  if (p.pid <= 1) bad(source, where, "pid must be > 1");
  return p;
}

}  // namespace

Scenario parse_scenario(const nlohmann::json& doc, const std::string& source) {
  Scenario sc;
  sc.source = source;
  if (!doc.is_object()) bad(source, "/", "scenario must be an object");
  if (!doc.contains("seed")) bad(source, "/seed", "seed is mandatory");
  sc.seed = doc.at("seed").get<std::uint64_t>();

  if (doc.contains("memory")) {
    const auto& m = doc.at("memory");
    sc.memory.page_size = m.value("page_size", 4096);
    sc.memory.page_count = m.value("pages", 4096);
    sc.memory.isolated_pages = m.value("isolated_pages", 64);
  }
  if (doc.contains("profile") && !doc.at("profile").is_string())
    sc.profile = LayoutProfile::from_json(doc.at("profile"));
  if (doc.contains("cost_model")) sc.cost.apply_overrides(doc.at("cost_model"));

  if (doc.contains("layers")) {
    for (std::size_t i = 0; i < doc.at("layers").size(); ++i) {
      const auto& l = doc.at("layers")[i];
      const std::string where = "/layers/" + std::to_string(i);
      Scenario::LayerSpec spec;
      if (!l.contains("id")) bad(source, where, "layer needs an id");
      spec.id = l.at("id").get<std::string>();
      if (l.contains("files"))
        for (auto it = l.at("files").begin(); it != l.at("files").end(); ++it)
          spec.files.push_back(parse_file(source, where + "/files", it.key(), it.value()));
      if (l.contains("dirs"))
        for (const auto& d : l.at("dirs")) spec.dirs.push_back(d.get<std::string>());
      if (l.contains("generate")) {
        for (const auto& g : l.at("generate")) {
          std::string dir = g.value("dir", std::string("/files"));
          std::string prefix = g.value("prefix", std::string("f"));
          std::uint64_t count = g.value("count", 0);
          int pad = g.value("pad", 2);
          std::string content = g.value("content", std::string("payload-"));
          for (std::uint64_t f = 0; f < count; ++f) {
            char num[24];
            std::snprintf(num, sizeof num, "%0*llu", pad,
                          static_cast<unsigned long long>(f));
            Scenario::FileSpec fs;
            fs.path = dir + "/" + prefix + num;
            fs.content = content + num;
            spec.files.push_back(std::move(fs));
          }
        }
      }
      sc.layers.push_back(std::move(spec));
    }
  }
  if (doc.contains("host_files"))
    for (auto it = doc.at("host_files").begin(); it != doc.at("host_files").end(); ++it)
      sc.host_files.push_back(parse_file(source, "/host_files", it.key(), it.value()));

  if (doc.contains("containers")) {
    for (std::size_t i = 0; i < doc.at("containers").size(); ++i) {
      const auto& c = doc.at("containers")[i];
      const std::string where = "/containers/" + std::to_string(i);
      Scenario::ContainerSpec spec;
      if (!c.contains("id")) bad(source, where, "container needs an id");
      spec.id = c.at("id").get<std::string>();
      if (c.contains("layers"))
        for (const auto& l : c.at("layers")) spec.layers.push_back(l.get<std::string>());
      spec.upper = c.value("upper", spec.id + "-upper");
      if (c.contains("processes"))
        for (std::size_t j = 0; j < c.at("processes").size(); ++j)
          spec.processes.push_back(parse_proc(
              source, where + "/processes/" + std::to_string(j), c.at("processes")[j]));
      if (c.contains("hidden_agent"))
        spec.hidden_agent =
            parse_proc(source, where + "/hidden_agent", c.at("hidden_agent"));
      sc.containers.push_back(std::move(spec));
    }
  }
  if (doc.contains("host_processes"))
    for (std::size_t i = 0; i < doc.at("host_processes").size(); ++i)
      sc.host_processes.push_back(parse_proc(
          source, "/host_processes/" + std::to_string(i), doc.at("host_processes")[i]));
  if (doc.contains("security_agent"))
    sc.security_agent = parse_proc(source, "/security_agent", doc.at("security_agent"));

  nlohmann::json policy_list =
      doc.contains("policies") ? doc.at("policies") : nlohmann::json::array();

  // Bulk population of monitored host files plus their policies.
  if (doc.contains("generated_monitored")) {
    const auto& g = doc.at("generated_monitored");
    std::string dir = g.value("dir", std::string("/mon"));
    std::uint64_t count = g.value("count", 0);
    nlohmann::json allow = g.contains("allow")
                               ? g.at("allow")
                               : nlohmann::json::array({nlohmann::json{
                                     {"process", "*"}, {"uid", "*"}, {"ops", {"read"}}}});
    for (std::uint64_t i = 0; i < count; ++i) {
      char path[64];
      std::snprintf(path, sizeof path, "%s/f%04llu", dir.c_str(),
                    static_cast<unsigned long long>(i));
      Scenario::FileSpec f;
      f.path = path;
      f.content = "monitored";
      sc.host_files.push_back(std::move(f));
      policy_list.push_back(
          nlohmann::json{{"scope", "host"}, {"path", path}, {"allow", allow}});
    }
  }

  if (!policy_list.empty()) {
    sc.policy_doc = nlohmann::json{{"policies", policy_list}};
    auto load = load_policies(sc.policy_doc);
    sc.policies = std::move(load.policies);
    sc.policy_rejects = std::move(load.rejected);
  }

  if (doc.contains("workloads")) {
    for (std::size_t i = 0; i < doc.at("workloads").size(); ++i) {
      const auto& w = doc.at("workloads")[i];
      const std::string where = "/workloads/" + std::to_string(i);
      std::string kind = w.value("kind", std::string());
      std::string name = w.value("name", kind + "-" + std::to_string(i));
      if (kind == "fileio") {
        FileIoWorkload f;
        f.name = name;
        f.total_bytes = w.value("total_bytes", 64ull << 20);
        f.block_size = w.value("block_size", 256ull << 10);
        std::string dir = w.value("direction", std::string("read"));
        if (dir != "read" && dir != "write") bad(source, where, "direction: read|write");
        f.dir = dir == "read" ? IoDir::Read : IoDir::Write;
        if (w.contains("files"))
          for (const auto& p : w.at("files")) f.files.push_back(p.get<std::string>());
        f.runner = w.value("runner", 0);
        sc.fileio.push_back(std::move(f));
      } else if (kind == "startup") {
        StartupWorkload s;
        s.name = name;
        if (w.contains("counts"))
          for (const auto& n : w.at("counts")) s.counts.push_back(n.get<std::uint64_t>());
        s.files_dir = w.value("files_dir", std::string("/mon"));
        s.files_count = w.value("files_count", 0);
        sc.startup.push_back(std::move(s));
      } else if (kind == "memcopy") {
        MemCopyWorkload m;
        m.name = name;
        std::string mode = w.value("mode", std::string("MEMCPY"));
        if (mode == "MEMCPY")
          m.mode = MemCopyWorkload::Mode::MEMCPY;
        else if (mode == "DUMP")
          m.mode = MemCopyWorkload::Mode::DUMP;
        else if (mode == "MCBLOCK")
          m.mode = MemCopyWorkload::Mode::MCBLOCK;
        else
          bad(source, where, "mode: MEMCPY|DUMP|MCBLOCK");
        m.bytes = w.value("bytes", 128ull << 20);
        sc.memcopy.push_back(std::move(m));
      } else {
        bad(source, where, "unknown workload kind '" + kind + "'");
      }
    }
  }

  if (doc.contains("attack")) {
    const auto& a = doc.at("attack");
    AttackConfig cfg;
    cfg.host_attacker = a.value("host_attacker", 0);
    cfg.container_attacker = a.value("container_attacker", 0);
    cfg.container = a.value("container", std::string());
    cfg.runc_path = a.value("runc_path", cfg.runc_path);
    cfg.web_page = a.value("web_page", cfg.web_page);
    cfg.web_reader = a.value("web_reader", cfg.web_reader);
    cfg.login_path = a.value("login_path", cfg.login_path);
    sc.attack = cfg;
  }

  if (doc.contains("trace")) {
    if (!doc.at("trace").is_array()) bad(source, "/trace", "trace must be an array");
    sc.trace = doc.at("trace");
  }
  return sc;
}

Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path + ": cannot open scenario");
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(path + ": " + e.what());
  }
  return parse_scenario(doc, path);
}

std::vector<std::string> validate_scenario(const Scenario& sc) {
  std::vector<std::string> out;
  auto err = [&](const std::string& where, const std::string& msg) {
    out.push_back(sc.source + ":" + where + ": " + msg);
  };

  std::set<std::string> layer_ids;
  for (std::size_t i = 0; i < sc.layers.size(); ++i) {
    if (!layer_ids.insert(sc.layers[i].id).second)
      err("/layers/" + std::to_string(i), "duplicate layer id '" + sc.layers[i].id + "'");
  }

  std::set<std::string> container_ids;
  std::set<std::int64_t> pids{1};
  std::set<std::string> upper_ids;
  for (std::size_t i = 0; i < sc.containers.size(); ++i) {
    const auto& c = sc.containers[i];
    const std::string where = "/containers/" + std::to_string(i);
    if (!container_ids.insert(c.id).second)
      err(where, "duplicate container id '" + c.id + "'");
    for (const auto& l : c.layers)
      if (!layer_ids.count(l)) err(where, "unknown layer '" + l + "'");
    if (layer_ids.count(c.upper))
      ;  // an explicitly defined upper layer is fine
    if (!upper_ids.insert(c.upper).second)
      err(where, "upper layer '" + c.upper + "' used twice");
    for (const auto& p : c.processes)
      if (!pids.insert(p.pid).second)
        err(where, "duplicate pid " + std::to_string(p.pid));
    if (c.hidden_agent && !pids.insert(c.hidden_agent->pid).second)
      err(where + "/hidden_agent", "duplicate pid " + std::to_string(c.hidden_agent->pid));
  }
  for (std::size_t i = 0; i < sc.host_processes.size(); ++i)
    if (!pids.insert(sc.host_processes[i].pid).second)
      err("/host_processes/" + std::to_string(i),
          "duplicate pid " + std::to_string(sc.host_processes[i].pid));
  if (sc.security_agent && !pids.insert(sc.security_agent->pid).second)
    err("/security_agent", "duplicate pid " + std::to_string(sc.security_agent->pid));

  for (const auto& r : sc.policy_rejects) out.push_back(sc.source + ":" + r);
  for (std::size_t i = 0; i < sc.policies.size(); ++i) {
    const auto& p = sc.policies[i];
    if (!p.scope.is_host() && !container_ids.count(p.scope.container))
      err("/policies/" + std::to_string(i),
          "policy references undefined container '" + p.scope.container + "'");
  }

  for (std::size_t i = 0; i < sc.fileio.size(); ++i) {
    const auto& f = sc.fileio[i];
    const std::string where = "/workloads(fileio)/" + std::to_string(i);
    if (f.block_size == 0)
      err(where, "block_size must be positive");
    else if (f.total_bytes % f.block_size != 0)
      err(where, "total_bytes " + std::to_string(f.total_bytes) +
                     " is not a multiple of block_size " + std::to_string(f.block_size));
    if (f.files.empty()) err(where, "fileio needs target files");
    if (!pids.count(f.runner)) err(where, "unknown runner pid " + std::to_string(f.runner));
    for (const auto& sp : f.files) {
      auto [scope, path] = split_scoped_path(sp);
      if (!scope.is_host() && !container_ids.count(scope.container))
        err(where, "file '" + sp + "' references undefined container");
      (void)path;
    }
  }
  for (std::size_t i = 0; i < sc.startup.size(); ++i) {
    const auto& s = sc.startup[i];
    const std::string where = "/workloads(startup)/" + std::to_string(i);
    if (s.counts.empty()) err(where, "startup needs counts");
    for (auto n : s.counts)
      if (s.files_count < n)
        err(where, "files_count " + std::to_string(s.files_count) +
                       " below requested count " + std::to_string(n));
  }
  if (sc.attack) {
    const auto& a = *sc.attack;
    if (!pids.count(a.host_attacker)) err("/attack", "unknown host_attacker pid");
    if (!pids.count(a.container_attacker)) err("/attack", "unknown container_attacker pid");
    if (!container_ids.count(a.container))
      err("/attack", "unknown container '" + a.container + "'");
  }

  for (std::size_t i = 0; i < sc.trace.size(); ++i) {
    const auto& t = sc.trace[i];
    const std::string where = "/trace/" + std::to_string(i);
    if (!t.is_object() || !t.contains("op")) {
      err(where, "trace entries need an op");
      continue;
    }
    std::string op = t.at("op").get<std::string>();
    static const std::set<std::string> known{"open", "close",   "io",   "link", "kill",
                                             "getdents", "prune", "poll", "random"};
    if (!known.count(op)) err(where, "unknown op '" + op + "'");
    if (t.contains("pid") && !pids.count(t.at("pid").get<std::int64_t>()))
      err(where, "unknown pid " + std::to_string(t.at("pid").get<std::int64_t>()));
  }
  return out;
}

ScenarioInstance build_instance(const Scenario& sc, Strategy strategy,
                                std::optional<std::uint64_t> seed_override) {
  (void)seed_override;  // the seed feeds trace/bench randomness, not the boot
  ScenarioInstance inst;
  SimulationConfig cfg;
  cfg.memory = sc.memory;
  cfg.profile = sc.profile;
  cfg.cost = sc.cost;
  inst.sim = std::make_unique<Simulation>(std::move(cfg));
  GuestKernel& k = inst.sim->kernel();

  for (const auto& l : sc.layers) {
    k.layers().add_layer(l.id);
    for (const auto& d : l.dirs) k.layers().ensure_dir(l.id, d);
    for (const auto& f : l.files)
      k.layers().put_file(l.id, f.path, f.content, f.readable, f.writable);
  }
  for (const auto& f : sc.host_files)
    k.add_host_file(f.path, f.content, f.readable, f.writable);

  for (const auto& c : sc.containers) {
    k.define_container(c.id, c.layers, c.upper);
    if (c.hidden_agent) {
      ProcessSpec spec;
      spec.pid = c.hidden_agent->pid;
      spec.name = c.hidden_agent->name;
      spec.uid = c.hidden_agent->uid;
      spec.hidden = true;
      k.set_hidden_agent_spec(c.id, spec);
    }
    for (const auto& p : c.processes)
      k.defer_container_process(c.id, ProcessSpec{p.pid, p.name, p.uid, {}, false});
  }
  for (const auto& p : sc.host_processes)
    k.spawn_process(ProcessSpec{p.pid, p.name, p.uid, FsScope::host(), false});
  if (sc.security_agent)
    k.set_security_agent(
        ProcessSpec{sc.security_agent->pid, sc.security_agent->name,
                    sc.security_agent->uid, FsScope::host(), false});

  if (strategy != Strategy::NoMonitoring) {
    WatchMode mode = strategy == Strategy::InterceptAllSyscalls ? WatchMode::Intercept
                                                                : WatchMode::PageWatch;
    inst.monitor = std::make_unique<Monitor>(*inst.sim, PolicyTable(sc.policies), mode);
    inst.monitor->attach();
    if (mode == WatchMode::PageWatch) {
      Placement placement = strategy == Strategy::SharedPageWatch ? Placement::Default
                                                                  : Placement::Isolated;
      inst.monitor->create_caches(placement);
    }
  }

  k.start_containers();
  return inst;
}

}  // namespace cfmsim
