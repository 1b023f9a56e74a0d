#include "cfmsim/guest_kernel.hpp"

#include <algorithm>
#include <cassert>

namespace cfmsim {

namespace {

std::vector<std::string> split_components(const std::string& path) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : path) {
    if (c == '/') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string dirname_of(const std::string& path) {
  auto pos = path.find_last_of('/');
  if (pos == std::string::npos || pos == 0) return "/";
  return path.substr(0, pos);
}

std::string basename_of(const std::string& path) {
  auto pos = path.find_last_of('/');
  return pos == std::string::npos ? path : path.substr(pos + 1);
}

bool valid_abs_path(const std::string& path) {
  return !path.empty() && path[0] == '/' && path.find("//") == std::string::npos;
}

constexpr std::uint64_t kModeRead = 4;
constexpr std::uint64_t kModeWrite = 2;
constexpr std::uint64_t kModeDir = 1;

}  // namespace

// ---------------------------------------------------------------------------
// LayerStore

void LayerStore::add_layer(const std::string& id) {
  if (index_.count(id)) throw ConfigError("layer '" + id + "' defined twice");
  index_[id] = layers_.size();
  Layer l;
  l.id = id;
  layers_.push_back(std::move(l));
  ensure_dir(id, "/");
}

bool LayerStore::has_layer(const std::string& id) const { return index_.count(id) != 0; }

std::uint64_t LayerStore::layer_index(const std::string& id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw SimFault("unknown layer '" + id + "'");
  return it->second;
}

const std::string& LayerStore::layer_id(std::uint64_t index) const {
  if (index >= layers_.size()) throw SimFault("layer index out of range");
  return layers_[index].id;
}

LayerStore::Layer& LayerStore::require(const std::string& id) {
  return layers_[layer_index(id)];
}

const LayerStore::Layer& LayerStore::require(const std::string& id) const {
  return layers_[layer_index(id)];
}

void LayerStore::ensure_dir(const std::string& layer, const std::string& path) {
  Layer& l = require(layer);
  std::string cur = "/";
  auto put_dir = [&](const std::string& p) {
    if (l.paths.count(p)) return;
    std::uint64_t ino = next_ino_++;
    l.paths[p] = ino;
    FileMeta m;
    m.ino = ino;
    m.is_dir = true;
    m.writable = false;
    l.inodes[ino] = std::move(m);
  };
  put_dir("/");
  for (const auto& comp : split_components(path)) {
    cur = cur == "/" ? "/" + comp : cur + "/" + comp;
    put_dir(cur);
  }
}

std::uint64_t LayerStore::put_file(const std::string& layer, const std::string& path,
                                   std::string content, bool readable, bool writable) {
  if (!valid_abs_path(path))
    throw ConfigError("layer '" + layer + "': bad path '" + path + "'");
  ensure_dir(layer, dirname_of(path));
  Layer& l = require(layer);
  std::uint64_t ino = next_ino_++;
  l.paths[path] = ino;
  FileMeta m;
  m.ino = ino;
  m.content = std::move(content);
  m.readable = readable;
  m.writable = writable;
  l.inodes[ino] = std::move(m);
  return ino;
}

std::optional<LayerStore::Hit> LayerStore::resolve_union(
    const std::vector<std::string>& layers, const std::string& path) const {
  for (const auto& id : layers) {
    const Layer& l = require(id);
    auto it = l.paths.find(path);
    if (it != l.paths.end())
      return Hit{id, layer_index(id), it->second};
  }
  return std::nullopt;
}

const LayerStore::FileMeta* LayerStore::meta(const std::string& layer,
                                             std::uint64_t ino) const {
  const Layer& l = require(layer);
  auto it = l.inodes.find(ino);
  return it == l.inodes.end() ? nullptr : &it->second;
}

const LayerStore::FileMeta* LayerStore::meta_at(const std::string& layer,
                                                const std::string& path) const {
  const Layer& l = require(layer);
  auto it = l.paths.find(path);
  if (it == l.paths.end()) return nullptr;
  return meta(layer, it->second);
}

void LayerStore::set_content(const std::string& layer, std::uint64_t ino,
                             std::string content) {
  Layer& l = require(layer);
  auto it = l.inodes.find(ino);
  if (it == l.inodes.end()) throw SimFault("set_content: unknown inode");
  it->second.content = std::move(content);
}

std::uint64_t LayerStore::copy_up(const Hit& from, const std::string& path,
                                  const std::string& to) {
  const FileMeta* src = meta(from.layer, from.ino);
  if (!src) throw SimFault("copy_up: source inode missing");
  ensure_dir(to, dirname_of(path));
  Layer& l = require(to);
  std::uint64_t ino = next_ino_++;
  l.paths[path] = ino;
  FileMeta m = *src;
  m.ino = ino;
  l.inodes[ino] = std::move(m);
  return ino;
}

void LayerStore::add_link(const std::string& layer, const std::string& newpath,
                          std::uint64_t ino) {
  Layer& l = require(layer);
  if (!l.inodes.count(ino)) throw SimFault("add_link: unknown inode");
  ensure_dir(layer, dirname_of(newpath));
  l.paths[newpath] = ino;
}

std::uint64_t LayerStore::link_count(const std::string& layer, std::uint64_t ino) const {
  const Layer& l = require(layer);
  std::uint64_t n = 0;
  for (const auto& [p, i] : l.paths)
    if (i == ino && !l.inodes.at(i).is_dir) n++;
  return n == 0 ? 1 : n;
}

std::vector<std::string> LayerStore::list_dir(const std::vector<std::string>& layers,
                                              const std::string& path) const {
  std::set<std::string> names;
  const std::string prefix = path == "/" ? "/" : path + "/";
  for (const auto& id : layers) {
    const Layer& l = require(id);
    for (const auto& [p, ino] : l.paths) {
      if (p.size() <= prefix.size() || p.compare(0, prefix.size(), prefix) != 0)
        continue;
      std::string rest = p.substr(prefix.size());
      if (rest.find('/') == std::string::npos) names.insert(rest);
    }
  }
  return {names.begin(), names.end()};
}

bool LayerStore::is_dir(const std::vector<std::string>& layers,
                        const std::string& path) const {
  auto hit = resolve_union(layers, path);
  if (!hit) return false;
  const FileMeta* m = meta(hit->layer, hit->ino);
  return m && m->is_dir;
}

// ---------------------------------------------------------------------------
// GuestKernel boot

namespace {
// Fixed boot page layout; reserved in this order from a fresh memory image.
constexpr PageIndex kGlobalsPage = 0;
constexpr PageIndex kKernelCodeFirst = 1;
constexpr int kKernelCodeCount = 2;
constexpr PageIndex kAgentCodePage = 3;
constexpr PageIndex kMsgPage = 4;
constexpr PageIndex kIoPoolFirst = 5;
constexpr int kIoPoolCount = 8;
constexpr PageIndex kDcacheFirst = 13;
constexpr int kDcachePages = 2;
}  // namespace

void reserve_boot_pages(GuestMemory& mem) {
  auto need = [&](std::optional<PageIndex> got, PageIndex want) {
    if (!got || *got != want) throw SimFault("boot page layout mismatch");
  };
  need(mem.reserve_page(PageKind::KernelCode), kGlobalsPage);
  need(mem.reserve_range(kKernelCodeCount, PageKind::KernelCode), kKernelCodeFirst);
  need(mem.reserve_page(PageKind::AgentCode), kAgentCodePage);
  need(mem.reserve_page(PageKind::Data), kMsgPage);
  need(mem.reserve_range(kIoPoolCount, PageKind::Data), kIoPoolFirst);
  need(mem.reserve_range(kDcachePages, PageKind::Data), kDcacheFirst);
}

GuestKernel::GuestKernel(GuestMemory& mem, SlabAllocator& alloc, Hypervisor& hv,
                         const LayoutProfile& profile)
    : mem_(mem), alloc_(alloc), hv_(hv), prof_(profile) {
  if (mem_.kind(kGlobalsPage) != PageKind::KernelCode)
    throw SimFault("boot pages not reserved before kernel construction");

  // Deterministic code bytes so tamper checks can compare content.
  for (PageIndex p : {kKernelCodeFirst, kKernelCodeFirst + 1, kAgentCodePage,
                      kGlobalsPage}) {
    static_pages_.push_back(p);
    for (std::uint64_t off = 128; off < mem_.page_size(); off += 64)
      mem_.raw_write_u64(p * mem_.page_size() + off, 0x9090909090909090ull ^ (p << 8) ^ off);
  }
  std::sort(static_pages_.begin(), static_pages_.end());

  msg_page_addr_ = kMsgPage * mem_.page_size();
  for (int i = 0; i < kIoPoolCount; ++i) io_pool_.push_back(kIoPoolFirst + i);

  hash_table_ = kDcacheFirst * mem_.page_size();
  buckets_ = (kDcachePages * mem_.page_size()) / 8;

  initial_ns_ = NamespaceSet{1, 2, 3, 4, 5, 6};
  ns_counter_ = 16;

  layers_.add_layer(host_layer_);

  // Kernel anchor block, written once at boot then write-protected.
  const ProcContext boot = kernel_ctx();
  hv_.guest_write_u64(boot, prof_.field_addr(0, layout::kGlobals, "dcache_hash"), hash_table_);
  hv_.guest_write_u64(boot, prof_.field_addr(0, layout::kGlobals, "dcache_buckets"), buckets_);

  ProcessSpec init;
  init.pid = 1;
  init.name = "init";
  init.uid = 0;
  spawn_process(init);

  agent_spec_.pid = 8;
  agent_spec_.name = "cfm-agent";
  agent_spec_.uid = 0;
}

// ---------------------------------------------------------------------------
// memory helpers

GuestAddr GuestKernel::kalloc(const std::string& kind, Placement placement,
                              const ProcContext& ctx) {
  GuestAddr a = alloc_.alloc(kind, placement);
  if (!a) return 0;
  // The zero fill is a guest write so watchpoints see slab churn on armed
  // pages.
  std::vector<std::uint8_t> zeros(prof_.size_of(kind), 0);
  hv_.guest_write(ctx, a, zeros);
  return a;
}

void GuestKernel::kfree(GuestAddr addr) { alloc_.free(addr); }

bool GuestKernel::wfield(const ProcContext& ctx, GuestAddr obj, const char* strct,
                         const char* field, std::uint64_t v) {
  FieldLayout f = prof_.field(strct, field);
  std::uint32_t n = std::min<std::uint32_t>(f.size, 8);
  std::vector<std::uint8_t> b(n);
  for (std::uint32_t i = 0; i < n; ++i) b[i] = std::uint8_t(v >> (8 * i));
  return hv_.guest_write(ctx, obj + f.offset, b);
}

bool GuestKernel::rfield(const ProcContext& ctx, GuestAddr obj, const char* strct,
                         const char* field, std::uint64_t* v) {
  FieldLayout f = prof_.field(strct, field);
  std::uint32_t n = std::min<std::uint32_t>(f.size, 8);
  std::vector<std::uint8_t> b(n);
  if (!hv_.guest_read(ctx, obj + f.offset, b)) return false;
  std::uint64_t r = 0;
  for (std::int32_t i = n - 1; i >= 0; --i) r = (r << 8) | b[i];
  *v = r;
  return true;
}

void GuestKernel::write_name(const ProcContext& ctx, GuestAddr obj, const char* strct,
                             const char* field, const std::string& s) {
  FieldLayout f = prof_.field(strct, field);
  std::vector<std::uint8_t> b(f.size, 0);
  std::size_t n = std::min<std::size_t>(s.size(), f.size - 1);
  std::copy_n(s.begin(), n, b.begin());
  hv_.guest_write(ctx, obj + f.offset, b);
}

GuestKernel::ProcHandle& GuestKernel::require_proc(std::int64_t pid) {
  auto it = procs_.find(pid);
  if (it == procs_.end() || !it->second.alive)
    throw SimFault("no alive process with pid " + std::to_string(pid));
  return it->second;
}

ProcContext GuestKernel::make_ctx(ProcHandle& p) {
  return ProcContext{p.pid, p.address_space_id, ++stack_counter_};
}

// ---------------------------------------------------------------------------
// host/image setup

void GuestKernel::add_host_file(const std::string& path, std::string content,
                                bool readable, bool writable) {
  layers_.put_file(host_layer_, path, std::move(content), readable, writable);
}

void GuestKernel::define_container(const std::string& id,
                                   std::vector<std::string> lower_layers,
                                   std::string upper_layer) {
  if (containers_.count(id)) throw ConfigError("container '" + id + "' defined twice");
  for (const auto& l : lower_layers)
    if (!layers_.has_layer(l))
      throw ConfigError("container '" + id + "': unknown layer '" + l + "'");
  if (!layers_.has_layer(upper_layer)) layers_.add_layer(upper_layer);
  ContainerInfo c;
  c.id = id;
  c.lower_layers = std::move(lower_layers);
  c.upper_layer = std::move(upper_layer);
  c.ns = NamespaceSet{++ns_counter_, ++ns_counter_, ++ns_counter_,
                      ++ns_counter_, ++ns_counter_, ++ns_counter_};
  containers_[id] = std::move(c);
}

std::int64_t GuestKernel::spawn_process(const ProcessSpec& spec) {
  std::int64_t pid = spec.pid != 0 ? spec.pid : next_auto_pid_++;
  auto existing = procs_.find(pid);
  if (existing != procs_.end() && existing->second.alive)
    throw SimFault("pid " + std::to_string(pid) + " already alive");
  NamespaceSet ns = initial_ns_;
  if (!spec.scope.is_host()) {
    auto it = containers_.find(spec.scope.container);
    if (it == containers_.end())
      throw ConfigError("spawn: unknown container '" + spec.scope.container + "'");
    ns = it->second.ns;
    it->second.member_pids.push_back(pid);
    if (spec.hidden) it->second.hidden_agent_pid = pid;
  }

  const ProcContext ctx = kernel_ctx();
  GuestAddr task = kalloc(layout::kProcess, Placement::Default, ctx);
  GuestAddr fdt = kalloc(layout::kFdTable, Placement::Default, ctx);
  if (!task || !fdt) throw SimFault("spawn: out of memory");
  wfield(ctx, task, layout::kProcess, "pid", std::uint64_t(pid));
  wfield(ctx, task, layout::kProcess, "uid", std::uint64_t(spec.uid));
  wfield(ctx, task, layout::kProcess, "pid_ns", ns.pid_ns);
  wfield(ctx, task, layout::kProcess, "mnt_ns", ns.mnt_ns);
  wfield(ctx, task, layout::kProcess, "uts_ns", ns.uts_ns);
  wfield(ctx, task, layout::kProcess, "ipc_ns", ns.ipc_ns);
  wfield(ctx, task, layout::kProcess, "net_ns", ns.net_ns);
  wfield(ctx, task, layout::kProcess, "user_ns", ns.user_ns);
  wfield(ctx, task, layout::kProcess, "fd_table", fdt);
  std::uint64_t as_id = 0x10000000ull + std::uint64_t(pid) * 0x1000;
  wfield(ctx, task, layout::kProcess, "address_space_id", as_id);
  wfield(ctx, task, layout::kProcess, "alive", 1);
  wfield(ctx, task, layout::kProcess, "hidden", spec.hidden ? 1 : 0);
  write_name(ctx, task, layout::kProcess, "name", spec.name);

  // All processes sit on one circular doubly linked task list anchored at
  // the init task.
  if (init_task_ == 0) {
    wfield(ctx, task, layout::kProcess, "tasks_next", task);
    wfield(ctx, task, layout::kProcess, "tasks_prev", task);
    init_task_ = task;
    hv_.guest_write_u64(ctx, prof_.field_addr(0, layout::kGlobals, "init_task"), task);
  } else {
    std::uint64_t tail = 0;
    rfield(ctx, init_task_, layout::kProcess, "tasks_prev", &tail);
    wfield(ctx, tail, layout::kProcess, "tasks_next", task);
    wfield(ctx, task, layout::kProcess, "tasks_prev", tail);
    wfield(ctx, task, layout::kProcess, "tasks_next", init_task_);
    wfield(ctx, init_task_, layout::kProcess, "tasks_prev", task);
  }

  ProcHandle h;
  h.pid = pid;
  h.task_addr = task;
  h.scope = spec.scope;
  h.name = spec.name;
  h.uid = spec.uid;
  h.hidden = spec.hidden;
  h.address_space_id = as_id;
  procs_[pid] = std::move(h);
  return pid;
}

void GuestKernel::defer_container_process(const std::string& cid, ProcessSpec spec) {
  spec.scope = FsScope::in(cid);
  deferred_procs_[cid].push_back(std::move(spec));
}

void GuestKernel::start_containers() {
  for (auto& [cid, specs] : deferred_procs_) {
    for (const auto& s : specs) spawn_process(s);
    containers_[cid].started = true;
  }
  deferred_procs_.clear();
}

// ---------------------------------------------------------------------------
// path resolution / dentry cache

std::vector<std::string> GuestKernel::scope_layers(const FsScope& scope) const {
  if (scope.is_host()) return {host_layer_};
  auto it = containers_.find(scope.container);
  if (it == containers_.end()) throw SimFault("unknown container scope");
  std::vector<std::string> out;
  out.push_back(it->second.upper_layer);
  for (const auto& l : it->second.lower_layers) out.push_back(l);
  return out;
}

std::string GuestKernel::write_layer(const FsScope& scope) const {
  if (scope.is_host()) return host_layer_;
  return containers_.at(scope.container).upper_layer;
}

std::string GuestKernel::root_name(const FsScope& scope) const {
  return scope.is_host() ? "/" : "//" + scope.container;
}

std::uint64_t GuestKernel::bucket_of(GuestAddr parent, const std::string& name) const {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  h ^= parent + 0x9e3779b97f4a7c15ull;
  h *= 1099511628211ull;
  return h % buckets_;
}

GuestAddr GuestKernel::dcache_lookup(const ProcContext& ctx, GuestAddr parent,
                                     const std::string& name, std::int64_t* err) {
  const GuestAddr head_addr = hash_table_ + 8 * bucket_of(parent, name);
  std::uint64_t cur = 0;
  if (!hv_.guest_read_u64(ctx, head_addr, &cur)) {
    *err = kErrAccess;
    return 0;
  }
  const FieldLayout name_field = prof_.field(layout::kDentry, "name");
  std::uint64_t steps = 0;
  while (cur) {
    if (++steps > 1u << 20) throw SimFault("dcache hash chain does not terminate");
    std::uint64_t par = 0;
    if (!rfield(ctx, cur, layout::kDentry, "parent", &par)) {
      *err = kErrAccess;
      return 0;
    }
    if (par == parent) {
      std::vector<std::uint8_t> nb(name_field.size);
      if (!hv_.guest_read(ctx, cur + name_field.offset, nb)) {
        *err = kErrAccess;
        return 0;
      }
      std::string got(reinterpret_cast<const char*>(nb.data()));
      if (got == name) return cur;
    }
    if (!rfield(ctx, cur, layout::kDentry, "hash_next", &cur)) {
      *err = kErrAccess;
      return 0;
    }
  }
  return 0;
}

GuestAddr GuestKernel::inode_object(const ProcContext& ctx, const LayerStore::Hit& hit) {
  auto key = std::make_pair(hit.layer_index, hit.ino);
  auto it = inode_cache_.find(key);
  if (it != inode_cache_.end()) return it->second;
  GuestAddr io = kalloc(layout::kInode, Placement::Default, ctx);
  if (!io) return 0;
  const LayerStore::FileMeta* m = layers_.meta(hit.layer, hit.ino);
  wfield(ctx, io, layout::kInode, "ino", hit.ino);
  wfield(ctx, io, layout::kInode, "link_count", layers_.link_count(hit.layer, hit.ino));
  std::uint64_t mode = (m->readable ? kModeRead : 0) | (m->writable ? kModeWrite : 0) |
                       (m->is_dir ? kModeDir : 0);
  wfield(ctx, io, layout::kInode, "mode", mode);
  wfield(ctx, io, layout::kInode, "owner_layer", hit.layer_index);
  wfield(ctx, io, layout::kInode, "data_handle", hit.ino);
  inode_cache_[key] = io;
  return io;
}

GuestAddr GuestKernel::materialize(const ProcContext& ctx, GuestAddr parent,
                                   const std::string& name,
                                   const LayerStore::Hit& hit, Placement placement) {
  GuestAddr io = inode_object(ctx, hit);
  if (!io) return 0;
  GuestAddr d = kalloc(layout::kDentry, placement, ctx);
  if (!d) return 0;
  wfield(ctx, d, layout::kDentry, "parent", parent);
  wfield(ctx, d, layout::kDentry, "inode", io);
  write_name(ctx, d, layout::kDentry, "name", name);

  // Splice into the inode's alias cycle (hardlink aliases share the inode).
  std::uint64_t head = 0;
  rfield(ctx, io, layout::kInode, "alias_head", &head);
  if (!head) {
    wfield(ctx, d, layout::kDentry, "alias_next", d);
    wfield(ctx, d, layout::kDentry, "alias_prev", d);
    wfield(ctx, io, layout::kInode, "alias_head", d);
  } else {
    std::uint64_t hn = 0;
    rfield(ctx, head, layout::kDentry, "alias_next", &hn);
    wfield(ctx, d, layout::kDentry, "alias_next", hn);
    wfield(ctx, d, layout::kDentry, "alias_prev", head);
    wfield(ctx, hn, layout::kDentry, "alias_prev", d);
    wfield(ctx, head, layout::kDentry, "alias_next", d);
  }

  const GuestAddr head_addr = hash_table_ + 8 * bucket_of(parent, name);
  std::uint64_t bh = 0;
  hv_.guest_read_u64(ctx, head_addr, &bh);
  wfield(ctx, d, layout::kDentry, "hash_next", bh);
  hv_.guest_write_u64(ctx, head_addr, d);

  // Directory components are pinned by their children.
  if (parent) adjust_refcount(ctx, parent, +1);
  return d;
}

GuestKernel::ResolveOut GuestKernel::resolve_path(ProcHandle& proc,
                                                  const std::string& path,
                                                  Placement placement,
                                                  const ProcContext& ctx) {
  ResolveOut out;
  if (!valid_abs_path(path) && path != "/") {
    out.err = kErrNoEnt;
    return out;
  }
  const auto layer_set = scope_layers(proc.scope);
  GuestAddr parent = 0;
  std::string rel = "/";
  std::vector<std::string> comps = split_components(path);
  comps.insert(comps.begin(), root_name(proc.scope));

  for (std::size_t i = 0; i < comps.size(); ++i) {
    if (i > 0) rel = (rel == "/") ? "/" + comps[i] : rel + "/" + comps[i];
    std::int64_t err = 0;
    GuestAddr d = dcache_lookup(ctx, parent, comps[i], &err);
    if (err) {
      out.err = err;
      return out;
    }
    if (!d) {
      auto hit = layers_.resolve_union(layer_set, rel);
      if (!hit) {
        out.err = kErrNoEnt;
        return out;
      }
      d = materialize(ctx, parent, comps[i], *hit, placement);
      if (!d) {
        out.err = kErrNoMem;
        return out;
      }
    }
    parent = d;
  }

  out.dentry = parent;
  std::uint64_t io = 0;
  if (!rfield(ctx, parent, layout::kDentry, "inode", &io)) {
    out.err = kErrAccess;
    return out;
  }
  std::uint64_t layer_idx = 0, ino = 0;
  rfield(ctx, io, layout::kInode, "owner_layer", &layer_idx);
  rfield(ctx, io, layout::kInode, "data_handle", &ino);
  out.layer = layers_.layer_id(layer_idx);
  out.ino = ino;
  return out;
}

bool GuestKernel::adjust_refcount(const ProcContext& ctx, GuestAddr dentry,
                                  std::int64_t delta) {
  // Modeled as one atomic read-modify-write: only the store is a checkable
  // guest access; the load side is internal to the instruction.
  const GuestAddr rc_addr = prof_.field_addr(dentry, layout::kDentry, "refcount");
  std::uint64_t old = mem_.raw_read_u64(rc_addr);
  if (delta < 0 && old == 0) throw SimFault("refcount underflow");
  return hv_.guest_write_u64(ctx, rc_addr, old + std::uint64_t(delta));
}

void GuestKernel::free_dentry(GuestAddr d, const ProcContext& ctx) {
  std::uint64_t parent = mem_.raw_read_u64(prof_.field_addr(d, layout::kDentry, "parent"));
  std::string name = mem_.raw_read_cstr(prof_.field_addr(d, layout::kDentry, "name"),
                                        prof_.field(layout::kDentry, "name").size);

  // Unlink from the hash chain.
  const GuestAddr head_addr = hash_table_ + 8 * bucket_of(parent, name);
  std::uint64_t next = mem_.raw_read_u64(prof_.field_addr(d, layout::kDentry, "hash_next"));
  std::uint64_t cur = mem_.raw_read_u64(head_addr);
  if (cur == d) {
    hv_.guest_write_u64(ctx, head_addr, next);
  } else {
    std::uint64_t steps = 0;
    while (cur) {
      if (++steps > 1u << 20) throw SimFault("dcache chain corrupt during free");
      std::uint64_t cn = mem_.raw_read_u64(prof_.field_addr(cur, layout::kDentry, "hash_next"));
      if (cn == d) {
        hv_.guest_write_u64(ctx, prof_.field_addr(cur, layout::kDentry, "hash_next"), next);
        break;
      }
      cur = cn;
    }
  }

  // Unsplice from the alias cycle; release the inode object with the last
  // alias.
  std::uint64_t an = mem_.raw_read_u64(prof_.field_addr(d, layout::kDentry, "alias_next"));
  std::uint64_t ap = mem_.raw_read_u64(prof_.field_addr(d, layout::kDentry, "alias_prev"));
  std::uint64_t io = mem_.raw_read_u64(prof_.field_addr(d, layout::kDentry, "inode"));
  if (an == d) {
    std::uint64_t layer_idx = mem_.raw_read_u64(prof_.field_addr(io, layout::kInode, "owner_layer"));
    std::uint64_t ino = mem_.raw_read_u64(prof_.field_addr(io, layout::kInode, "data_handle"));
    inode_cache_.erase({layer_idx, ino});
    kfree(io);
  } else {
    hv_.guest_write_u64(ctx, prof_.field_addr(ap, layout::kDentry, "alias_next"), an);
    hv_.guest_write_u64(ctx, prof_.field_addr(an, layout::kDentry, "alias_prev"), ap);
    std::uint64_t head = mem_.raw_read_u64(prof_.field_addr(io, layout::kInode, "alias_head"));
    if (head == d)
      hv_.guest_write_u64(ctx, prof_.field_addr(io, layout::kInode, "alias_head"), an);
  }

  kfree(d);
  if (parent) adjust_refcount(ctx, parent, -1);
}

std::size_t GuestKernel::dcache_prune() {
  const ProcContext ctx = kernel_ctx();
  std::size_t freed_total = 0;
  bool progressed = true;
  while (progressed) {
    progressed = false;
    std::vector<GuestAddr> candidates;
    for (const auto& [addr, obj] : alloc_.objects()) {
      if (obj.kind != layout::kDentry) continue;
      if (mem_.raw_read_u64(prof_.field_addr(addr, layout::kDentry, "refcount")) == 0)
        candidates.push_back(addr);
    }
    for (GuestAddr d : candidates) {
      const GuestAddr rc_addr = prof_.field_addr(d, layout::kDentry, "refcount");
      // Touch the candidate's refcount through the hypervisor so a watching
      // monitor can reset it before release.
      hv_.guest_write_u64(ctx, rc_addr, 0);
      if (mem_.raw_read_u64(rc_addr) != 0) continue;  // rescued
      std::string path = dentry_path(d);
      free_dentry(d, ctx);
      SyscallLogEntry e;
      e.seq = ++log_seq_;
      e.pid = 0;
      e.name = SyscallName::Prune;
      e.path = path;
      e.result = 0;
      log_.push_back(std::move(e));
      freed_total++;
      progressed = true;
    }
  }
  return freed_total;
}

// ---------------------------------------------------------------------------
// syscall machinery

SyscallLogEntry& GuestKernel::log_append(const Instance& in, SyscallName name) {
  SyscallLogEntry e;
  e.seq = ++log_seq_;
  e.pid = in.pid;
  e.name = name;
  e.mode = in.call.mode;
  e.target_pid = in.call.target_pid;
  e.bytes = in.call.nbytes;
  log_.push_back(std::move(e));
  return log_.back();
}

std::uint64_t GuestKernel::submit(std::int64_t pid, const Call& call) {
  ProcHandle& p = require_proc(pid);
  if (p.inflight)
    throw SimFault("process " + std::to_string(pid) + " already has an in-flight syscall");
  p.inflight = true;

  Instance in;
  in.id = ++instance_counter_;
  in.pid = pid;
  in.call = call;
  in.ctx = make_ctx(p);

  InFlightSyscall rec;
  rec.name = call.op;
  rec.pid = pid;
  rec.path = call.path.empty() ? "" : p.scope.qualify(call.path);
  rec.path2 = call.path2.empty() ? "" : p.scope.qualify(call.path2);
  rec.mode = call.mode;
  rec.instance = in.id;
  hv_.register_inflight(in.ctx, rec);
  hv_.note_syscall();

  auto [it, ok] = inflight_.emplace(in.id, std::move(in));
  Instance& ref = it->second;
  switch (call.op) {
    case SyscallName::Open: body_open(p, ref); break;
    case SyscallName::Close: body_close(p, ref); break;
    case SyscallName::Read:
    case SyscallName::Write: body_io(p, ref); break;
    case SyscallName::Link: body_link(p, ref); break;
    case SyscallName::Kill: body_kill(p, ref); break;
    case SyscallName::Getdents: body_getdents(p, ref); break;
    case SyscallName::Monitor: body_monitor(p, ref); break;
    default: throw SimFault("unsupported syscall");
  }
  return ref.id;
}

std::int64_t GuestKernel::finish(std::uint64_t instance) {
  auto it = inflight_.find(instance);
  if (it == inflight_.end()) throw SimFault("finish: unknown syscall instance");
  Instance in = std::move(it->second);
  inflight_.erase(it);

  // The return-site breakpoint fires before the result is delivered; the
  // hypervisor may overwrite it.
  const std::int64_t result = hv_.deliver_syscall_return(in.ctx, in.id, in.provisional);
  ProcHandle& p = procs_.at(in.pid);

  switch (in.call.op) {
    case SyscallName::Open: {
      if (result != in.provisional && result < 0) {
        // Blocked out-of-band: the monitor already released the transient
        // dentry reference; drop the provisional handle state.
        if (in.file_obj) kfree(in.file_obj);
        p.reserved_fds.erase(in.fd);
      } else if (in.provisional >= 0) {
        std::uint64_t fdt = 0;
        rfield(in.ctx, p.task_addr, layout::kProcess, "fd_table", &fdt);
        hv_.guest_write_u64(in.ctx, fdt + std::uint64_t(in.fd) * 8, in.file_obj);
        p.reserved_fds.erase(in.fd);
      }
      break;
    }
    case SyscallName::Close: {
      if (result >= 0 && in.file_obj) {
        std::uint64_t fdt = 0;
        rfield(in.ctx, p.task_addr, layout::kProcess, "fd_table", &fdt);
        hv_.guest_write_u64(in.ctx, fdt + std::uint64_t(in.fd) * 8, 0);
        kfree(in.file_obj);
      }
      break;
    }
    default: break;
  }

  if (in.log_index != SIZE_MAX) log_[in.log_index].result = result;
  hv_.unregister_inflight(in.ctx);
  p.inflight = false;
  return result;
}

void GuestKernel::body_open(ProcHandle& p, Instance& in) {
  std::string scoped = p.scope.qualify(in.call.path);
  SyscallEntryArgs args;
  args.path = &scoped;
  args.mode = &in.call.mode;
  hv_.deliver_syscall_entry(in.ctx, SyscallName::Open, args);
  auto fail = [&](std::int64_t err) {
    in.provisional = err;
    in.log_index = log_.size();
    auto& e = log_append(in, SyscallName::Open);
    e.path = scoped;
    e.result = err;
  };
  if (args.veto < 0) return fail(args.veto);

  ResolveOut r = resolve_path(p, in.call.path, in.call.placement, in.ctx);
  if (r.err) return fail(r.err);

  std::uint64_t io = 0;
  rfield(in.ctx, r.dentry, layout::kDentry, "inode", &io);
  std::uint64_t mode = 0;
  rfield(in.ctx, io, layout::kInode, "mode", &mode);
  const bool wants_read = in.call.mode != OpenMode::WriteOnly;
  const bool wants_write = in.call.mode != OpenMode::ReadOnly;
  if (mode & kModeDir) {
    if (wants_write) return fail(kErrAccess);
  } else {
    if (wants_read && !(mode & kModeRead)) return fail(kErrAccess);
    if (wants_write && !(mode & kModeWrite)) return fail(kErrAccess);
  }

  // Copy-up on write-mode open of a lower-layer file in a container.
  if (wants_write && !p.scope.is_host() && !(mode & kModeDir)) {
    const std::string upper = write_layer(p.scope);
    if (r.layer != upper) {
      LayerStore::Hit from{r.layer, layers_.layer_index(r.layer), r.ino};
      std::uint64_t new_ino = layers_.copy_up(from, in.call.path, upper);
      LayerStore::Hit to{upper, layers_.layer_index(upper), new_ino};

      // Detach the dentry from the lower inode's alias cycle.
      std::uint64_t an = 0, ap = 0;
      rfield(in.ctx, r.dentry, layout::kDentry, "alias_next", &an);
      rfield(in.ctx, r.dentry, layout::kDentry, "alias_prev", &ap);
      if (an == r.dentry) {
        std::uint64_t li = 0, ino = 0;
        rfield(in.ctx, io, layout::kInode, "owner_layer", &li);
        rfield(in.ctx, io, layout::kInode, "data_handle", &ino);
        inode_cache_.erase({li, ino});
        kfree(io);
      } else {
        wfield(in.ctx, ap, layout::kDentry, "alias_next", an);
        wfield(in.ctx, an, layout::kDentry, "alias_prev", ap);
        std::uint64_t head = 0;
        rfield(in.ctx, io, layout::kInode, "alias_head", &head);
        if (head == r.dentry) wfield(in.ctx, io, layout::kInode, "alias_head", an);
      }

      GuestAddr nio = inode_object(in.ctx, to);
      if (!nio) return fail(kErrNoMem);
      wfield(in.ctx, r.dentry, layout::kDentry, "inode", nio);
      std::uint64_t head = 0;
      rfield(in.ctx, nio, layout::kInode, "alias_head", &head);
      if (!head) {
        wfield(in.ctx, nio, layout::kInode, "alias_head", r.dentry);
        wfield(in.ctx, r.dentry, layout::kDentry, "alias_next", r.dentry);
        wfield(in.ctx, r.dentry, layout::kDentry, "alias_prev", r.dentry);
      }
    }
  }

  // Reserve the smallest free descriptor, counting concurrent reservations.
  std::uint64_t fdt = 0;
  rfield(in.ctx, p.task_addr, layout::kProcess, "fd_table", &fdt);
  const std::uint32_t nslots =
      prof_.field(layout::kFdTable, "slots").size / 8;
  int fd = -1;
  for (std::uint32_t i = 0; i < nslots; ++i) {
    if (p.reserved_fds.count(int(i))) continue;
    std::uint64_t slot = 0;
    hv_.guest_read_u64(in.ctx, fdt + i * 8, &slot);
    if (slot == 0) {
      fd = int(i);
      break;
    }
  }
  if (fd < 0) return fail(kErrNFile);
  p.reserved_fds.insert(fd);
  in.fd = fd;

  GuestAddr fobj = kalloc(layout::kFile, Placement::Default, in.ctx);
  if (!fobj) {
    p.reserved_fds.erase(fd);
    return fail(kErrNoMem);
  }
  wfield(in.ctx, fobj, layout::kFile, "dentry", r.dentry);
  wfield(in.ctx, fobj, layout::kFile, "mode", std::uint64_t(in.call.mode));
  in.file_obj = fobj;

  // The reference-count write is the monitored signal.
  if (!adjust_refcount(in.ctx, r.dentry, +1)) {
    kfree(fobj);
    p.reserved_fds.erase(fd);
    in.file_obj = 0;
    return fail(kErrAccess);
  }
  in.holds_ref = true;
  in.provisional = fd;
  in.log_index = log_.size();
  auto& e = log_append(in, SyscallName::Open);
  e.path = scoped;
}

void GuestKernel::body_close(ProcHandle& p, Instance& in) {
  SyscallEntryArgs args;
  hv_.deliver_syscall_entry(in.ctx, SyscallName::Close, args);
  auto fail = [&](std::int64_t err) {
    in.provisional = err;
    in.log_index = log_.size();
    auto& e = log_append(in, SyscallName::Close);
    e.result = err;
  };
  if (args.veto < 0) return fail(args.veto);

  const int fd = in.call.fd;
  std::uint64_t fdt = 0;
  rfield(in.ctx, p.task_addr, layout::kProcess, "fd_table", &fdt);
  const std::uint32_t nslots = prof_.field(layout::kFdTable, "slots").size / 8;
  if (fd < 0 || std::uint32_t(fd) >= nslots) return fail(kErrBadFd);
  std::uint64_t fobj = 0;
  hv_.guest_read_u64(in.ctx, fdt + std::uint64_t(fd) * 8, &fobj);
  if (!fobj) return fail(kErrBadFd);

  std::uint64_t d = 0;
  rfield(in.ctx, fobj, layout::kFile, "dentry", &d);
  const std::string path = dentry_path(d);
  adjust_refcount(in.ctx, d, -1);
  in.fd = fd;
  in.file_obj = fobj;
  in.provisional = 0;
  in.log_index = log_.size();
  auto& e = log_append(in, SyscallName::Close);
  e.path = path;
}

void GuestKernel::body_io(ProcHandle& p, Instance& in) {
  const SyscallName name = in.call.dir == IoDir::Read ? SyscallName::Read : SyscallName::Write;
  SyscallEntryArgs args;
  hv_.deliver_syscall_entry(in.ctx, name, args);
  auto fail = [&](std::int64_t err) {
    in.provisional = err;
    in.log_index = log_.size();
    auto& e = log_append(in, name);
    e.result = err;
  };
  if (args.veto < 0) return fail(args.veto);
  if (in.call.block_size == 0) return fail(kErrInval);

  const int fd = in.call.fd;
  std::uint64_t fdt = 0;
  rfield(in.ctx, p.task_addr, layout::kProcess, "fd_table", &fdt);
  const std::uint32_t nslots = prof_.field(layout::kFdTable, "slots").size / 8;
  if (fd < 0 || std::uint32_t(fd) >= nslots) return fail(kErrBadFd);
  std::uint64_t fobj = 0;
  hv_.guest_read_u64(in.ctx, fdt + std::uint64_t(fd) * 8, &fobj);
  if (!fobj) return fail(kErrBadFd);
  std::uint64_t fmode = 0;
  rfield(in.ctx, fobj, layout::kFile, "mode", &fmode);
  const OpenMode omode = OpenMode(fmode);
  if (in.call.dir == IoDir::Read && omode == OpenMode::WriteOnly) return fail(kErrAccess);
  if (in.call.dir == IoDir::Write && omode == OpenMode::ReadOnly) return fail(kErrAccess);

  std::uint64_t d = 0;
  rfield(in.ctx, fobj, layout::kFile, "dentry", &d);
  std::uint64_t io = 0;
  rfield(in.ctx, d, layout::kDentry, "inode", &io);
  std::uint64_t mode = 0;
  rfield(in.ctx, io, layout::kInode, "mode", &mode);
  if (mode & kModeDir) return fail(kErrAccess);

  // One data-page access per block; file content itself stays host-side.
  const std::uint64_t blocks =
      (in.call.nbytes + in.call.block_size - 1) / in.call.block_size;
  for (std::uint64_t i = 0; i < blocks; ++i) {
    const GuestAddr page = io_pool_[i % io_pool_.size()] * mem_.page_size();
    const GuestAddr addr = page + (i * 64) % (mem_.page_size() - 8);
    if (in.call.dir == IoDir::Read) {
      std::uint8_t buf[8];
      hv_.guest_read(in.ctx, addr, buf);
    } else {
      hv_.guest_write_u64(in.ctx, addr, i + 1);
    }
  }
  hv_.note_io_blocks(blocks);

  if (in.call.dir == IoDir::Write && in.call.nbytes > 0) {
    std::uint64_t layer_idx = 0, ino = 0;
    rfield(in.ctx, io, layout::kInode, "owner_layer", &layer_idx);
    rfield(in.ctx, io, layout::kInode, "data_handle", &ino);
    layers_.set_content(layers_.layer_id(layer_idx), ino,
                        "W:" + p.name + ":" + std::to_string(log_seq_ + 1));
  }

  in.provisional = std::int64_t(in.call.nbytes);
  in.log_index = log_.size();
  auto& e = log_append(in, name);
  e.path = dentry_path(d);
}

void GuestKernel::body_link(ProcHandle& p, Instance& in) {
  std::string scoped1 = p.scope.qualify(in.call.path);
  std::string scoped2 = p.scope.qualify(in.call.path2);
  SyscallEntryArgs args;
  args.path = &scoped1;
  args.path2 = &scoped2;
  hv_.deliver_syscall_entry(in.ctx, SyscallName::Link, args);
  auto fail = [&](std::int64_t err) {
    in.provisional = err;
    in.log_index = log_.size();
    auto& e = log_append(in, SyscallName::Link);
    e.path = scoped1;
    e.path2 = scoped2;
    e.result = err;
  };
  if (args.veto < 0) return fail(args.veto);
  if (!valid_abs_path(in.call.path2)) return fail(kErrInval);

  ResolveOut src = resolve_path(p, in.call.path, Placement::Default, in.ctx);
  if (src.err) return fail(src.err);
  std::uint64_t sio = 0;
  rfield(in.ctx, src.dentry, layout::kDentry, "inode", &sio);
  std::uint64_t smode = 0;
  rfield(in.ctx, sio, layout::kInode, "mode", &smode);
  if (smode & kModeDir) return fail(kErrAccess);

  ResolveOut parent = resolve_path(p, dirname_of(in.call.path2), Placement::Default, in.ctx);
  if (parent.err) return fail(parent.err);
  std::uint64_t pio = 0;
  rfield(in.ctx, parent.dentry, layout::kDentry, "inode", &pio);
  std::uint64_t pmode = 0;
  rfield(in.ctx, pio, layout::kInode, "mode", &pmode);
  if (!(pmode & kModeDir)) return fail(kErrNotDir);

  const auto layer_set = scope_layers(p.scope);
  if (layers_.resolve_union(layer_set, in.call.path2)) return fail(kErrExists);

  // Hard links stay within one layer; linking across layers would alias
  // read-only image content into the writable layer.
  const std::string target_layer = write_layer(p.scope);
  if (src.layer != target_layer) return fail(kErrXDev);

  layers_.add_link(target_layer, in.call.path2, src.ino);
  std::uint64_t lc = 0;
  rfield(in.ctx, sio, layout::kInode, "link_count", &lc);
  wfield(in.ctx, sio, layout::kInode, "link_count", lc + 1);

  LayerStore::Hit hit{target_layer, layers_.layer_index(target_layer), src.ino};
  GuestAddr nd = materialize(in.ctx, parent.dentry, basename_of(in.call.path2), hit,
                             Placement::Default);
  if (!nd) return fail(kErrNoMem);

  in.provisional = 0;
  in.log_index = log_.size();
  auto& e = log_append(in, SyscallName::Link);
  e.path = scoped1;
  e.path2 = scoped2;
}

void GuestKernel::body_kill(ProcHandle& p, Instance& in) {
  SyscallEntryArgs args;
  args.target_pid = &in.call.target_pid;
  hv_.deliver_syscall_entry(in.ctx, SyscallName::Kill, args);
  auto fail = [&](std::int64_t err) {
    in.provisional = err;
    in.log_index = log_.size();
    auto& e = log_append(in, SyscallName::Kill);
    e.target_pid = in.call.target_pid;
    e.result = err;
  };
  if (args.veto < 0) return fail(args.veto);

  auto it = procs_.find(in.call.target_pid);
  if (it == procs_.end() || !it->second.alive) return fail(kErrSrch);
  ProcHandle& t = it->second;
  if (t.task_addr == init_task_) return fail(kErrAccess);
  if (t.inflight) throw SimFault("kill of a process with an in-flight syscall");

  t.alive = false;
  wfield(in.ctx, t.task_addr, layout::kProcess, "alive", 0);

  // Unlink from the task list.
  std::uint64_t prev = 0, next = 0;
  rfield(in.ctx, t.task_addr, layout::kProcess, "tasks_prev", &prev);
  rfield(in.ctx, t.task_addr, layout::kProcess, "tasks_next", &next);
  wfield(in.ctx, prev, layout::kProcess, "tasks_next", next);
  wfield(in.ctx, next, layout::kProcess, "tasks_prev", prev);

  // Close everything the victim held; each release is logged as an induced
  // close so the log stays a complete account of refcount traffic.
  std::uint64_t fdt = 0;
  rfield(in.ctx, t.task_addr, layout::kProcess, "fd_table", &fdt);
  const std::uint32_t nslots = prof_.field(layout::kFdTable, "slots").size / 8;
  for (std::uint32_t i = 0; i < nslots; ++i) {
    std::uint64_t fobj = 0;
    hv_.guest_read_u64(in.ctx, fdt + i * 8, &fobj);
    if (!fobj) continue;
    std::uint64_t d = 0;
    rfield(in.ctx, fobj, layout::kFile, "dentry", &d);
    const std::string path = dentry_path(d);
    adjust_refcount(in.ctx, d, -1);
    hv_.guest_write_u64(in.ctx, fdt + i * 8, 0);
    kfree(fobj);
    SyscallLogEntry e;
    e.seq = ++log_seq_;
    e.pid = t.pid;
    e.name = SyscallName::Close;
    e.path = path;
    e.result = 0;
    e.induced = true;
    log_.push_back(std::move(e));
  }
  kfree(fdt);
  kfree(t.task_addr);
  t.task_addr = 0;
  t.reserved_fds.clear();

  in.provisional = 0;
  in.log_index = log_.size();
  auto& e = log_append(in, SyscallName::Kill);
  e.target_pid = in.call.target_pid;
}

void GuestKernel::body_getdents(ProcHandle& p, Instance& in) {
  SyscallEntryArgs args;
  std::string scoped = p.scope.qualify(in.call.path);
  args.path = &scoped;
  hv_.deliver_syscall_entry(in.ctx, SyscallName::Getdents, args);
  auto fail = [&](std::int64_t err) {
    in.provisional = err;
    in.log_index = log_.size();
    auto& e = log_append(in, SyscallName::Getdents);
    e.path = scoped;
    e.result = err;
  };
  if (args.veto < 0) return fail(args.veto);

  if (in.call.path == "/proc") {
    // Synthetic pid listing. The injected hiding filter removes agent
    // processes from container-namespace callers; host callers see all.
    const bool container_view = !p.scope.is_host();
    std::uint64_t caller_ns = containers_.count(p.scope.container)
                                  ? containers_.at(p.scope.container).ns.pid_ns
                                  : initial_ns_.pid_ns;
    for (const auto& [pid, h] : procs_) {
      if (!h.alive) continue;
      if (container_view) {
        std::uint64_t ns = mem_.raw_read_u64(
            prof_.field_addr(h.task_addr, layout::kProcess, "pid_ns"));
        if (ns != caller_ns) continue;
        if (h.hidden) continue;
      }
      in.names.push_back(std::to_string(pid));
    }
  } else {
    const auto layer_set = scope_layers(p.scope);
    auto hit = layers_.resolve_union(layer_set, in.call.path);
    if (!hit) return fail(kErrNoEnt);
    if (!layers_.is_dir(layer_set, in.call.path)) return fail(kErrNotDir);
    in.names = layers_.list_dir(layer_set, in.call.path);
  }

  in.provisional = std::int64_t(in.names.size());
  in.log_index = log_.size();
  auto& e = log_append(in, SyscallName::Getdents);
  e.path = scoped;
}

void GuestKernel::body_monitor(ProcHandle& p, Instance& in) {
  // The payload travels through a fixed message page; the call body itself
  // is inert and the hypervisor-side breakpoint does all the work.
  const std::string& payload = in.call.payload;
  std::uint32_t n = std::uint32_t(std::min<std::size_t>(payload.size(), 2000));
  std::vector<std::uint8_t> buf(4 + n);
  buf[0] = std::uint8_t(n);
  buf[1] = std::uint8_t(n >> 8);
  buf[2] = std::uint8_t(n >> 16);
  buf[3] = std::uint8_t(n >> 24);
  std::copy_n(payload.begin(), n, buf.begin() + 4);
  hv_.guest_write(in.ctx, msg_page_addr_, buf);

  std::string reply = hv_.deliver_monitor_syscall(in.ctx, payload);

  std::uint32_t rn = std::uint32_t(std::min<std::size_t>(reply.size(), 2000));
  std::vector<std::uint8_t> rbuf(4 + rn);
  rbuf[0] = std::uint8_t(rn);
  rbuf[1] = std::uint8_t(rn >> 8);
  rbuf[2] = std::uint8_t(rn >> 16);
  rbuf[3] = std::uint8_t(rn >> 24);
  std::copy_n(reply.begin(), rn, rbuf.begin() + 4);
  hv_.guest_write(in.ctx, msg_page_addr_ + 2048, rbuf);
  std::vector<std::uint8_t> back(rn);
  hv_.guest_read(in.ctx, msg_page_addr_ + 2048 + 4, back);
  in.reply.assign(back.begin(), back.end());

  in.provisional = std::int64_t(rn);
  in.log_index = log_.size();
  log_append(in, SyscallName::Monitor);
}

std::int64_t GuestKernel::sys_open(std::int64_t pid, const std::string& path,
                                   OpenMode mode, Placement placement) {
  Call c;
  c.op = SyscallName::Open;
  c.path = path;
  c.mode = mode;
  c.placement = placement;
  return call(pid, c);
}

std::int64_t GuestKernel::sys_close(std::int64_t pid, int fd) {
  Call c;
  c.op = SyscallName::Close;
  c.fd = fd;
  return call(pid, c);
}

std::int64_t GuestKernel::sys_io(std::int64_t pid, int fd, IoDir dir,
                                 std::uint64_t nbytes, std::uint64_t block_size) {
  Call c;
  c.op = dir == IoDir::Read ? SyscallName::Read : SyscallName::Write;
  c.fd = fd;
  c.dir = dir;
  c.nbytes = nbytes;
  c.block_size = block_size;
  return call(pid, c);
}

std::int64_t GuestKernel::sys_link(std::int64_t pid, const std::string& existing,
                                   const std::string& newpath) {
  Call c;
  c.op = SyscallName::Link;
  c.path = existing;
  c.path2 = newpath;
  return call(pid, c);
}

std::int64_t GuestKernel::sys_kill(std::int64_t pid, std::int64_t target) {
  Call c;
  c.op = SyscallName::Kill;
  c.target_pid = target;
  return call(pid, c);
}

std::int64_t GuestKernel::sys_getdents(std::int64_t pid, const std::string& path,
                                       std::vector<std::string>* names) {
  Call c;
  c.op = SyscallName::Getdents;
  c.path = path;
  std::uint64_t id = submit(pid, c);
  auto it = inflight_.find(id);
  std::vector<std::string> got = it->second.names;
  std::int64_t r = finish(id);
  if (names) *names = std::move(got);
  return r;
}

std::string GuestKernel::sys_monitor(std::int64_t pid, const std::string& payload) {
  Call c;
  c.op = SyscallName::Monitor;
  c.payload = payload;
  std::uint64_t id = submit(pid, c);
  auto it = inflight_.find(id);
  std::string reply = it->second.reply;
  finish(id);
  return reply;
}

// ---------------------------------------------------------------------------
// agents

void GuestKernel::run_agents(Placement placement) {
  if (security_agent_pid_ == 0) {
    security_agent_pid_ = spawn_process(agent_spec_);
    agent_pids_.push_back(security_agent_pid_);
  }
  std::vector<std::string> failed;
  std::string hidden_list;

  for (const auto& t : image_tasks_) {
    if (!t.scope.is_host()) continue;
    if (sys_open(security_agent_pid_, t.path, OpenMode::ReadOnly, placement) < 0)
      failed.push_back(t.scope.qualify(t.path));
  }
  for (auto& [cid, info] : containers_) {
    bool any = false;
    for (const auto& t : image_tasks_)
      any = any || (!t.scope.is_host() && t.scope.container == cid);
    if (!any) continue;
    if (info.hidden_agent_pid == 0 ||
        !procs_.count(info.hidden_agent_pid) ||
        !procs_.at(info.hidden_agent_pid).alive) {
      ProcessSpec spec = hidden_agent_specs_.count(cid) ? hidden_agent_specs_[cid]
                                                        : ProcessSpec{};
      if (spec.name.empty()) spec.name = "cfm-hidsvc";
      spec.scope = FsScope::in(cid);
      spec.hidden = true;
      info.hidden_agent_pid = spawn_process(spec);
    }
    if (std::find(agent_pids_.begin(), agent_pids_.end(), info.hidden_agent_pid) ==
        agent_pids_.end())
      agent_pids_.push_back(info.hidden_agent_pid);
    // The hidden agent runs in the container, so policy paths need no
    // conversion.
    for (const auto& t : image_tasks_) {
      if (t.scope.is_host() || t.scope.container != cid) continue;
      if (sys_open(info.hidden_agent_pid, t.path, OpenMode::ReadOnly, placement) < 0)
        failed.push_back(t.scope.qualify(t.path));
    }
    if (!hidden_list.empty()) hidden_list += ",";
    hidden_list += cid + ":" + std::to_string(info.hidden_agent_pid);
  }

  agent_placement_ = placement;
  std::string payload = "caches-ready agent=" + std::to_string(security_agent_pid_);
  if (!hidden_list.empty()) payload += " hidden=" + hidden_list;
  if (!failed.empty()) {
    payload += " failed=";
    for (std::size_t i = 0; i < failed.size(); ++i)
      payload += (i ? "|" : "") + failed[i];
  }
  sys_monitor(security_agent_pid_, payload);
}

void GuestKernel::agent_poll() {
  if (security_agent_pid_ == 0) throw SimFault("agent_poll before run_agents");
  std::string reply = sys_monitor(security_agent_pid_, "poll");
  if (reply.empty() || reply == "none") return;
  bool opened = false;
  std::size_t pos = 0;
  while (pos < reply.size()) {
    std::size_t eol = reply.find('\n', pos);
    std::string line = reply.substr(pos, eol == std::string::npos ? std::string::npos
                                                                  : eol - pos);
    pos = eol == std::string::npos ? reply.size() : eol + 1;
    if (line.rfind("open ", 0) != 0) continue;
    auto [scope, path] = split_scoped_path(line.substr(5));
    if (scope.is_host()) {
      sys_open(security_agent_pid_, path, OpenMode::ReadOnly, agent_placement_);
    } else {
      auto it = containers_.find(scope.container);
      if (it == containers_.end() || it->second.hidden_agent_pid == 0) continue;
      sys_open(it->second.hidden_agent_pid, path, OpenMode::ReadOnly, agent_placement_);
    }
    opened = true;
  }
  if (opened)
    sys_monitor(security_agent_pid_, "caches-ready agent=" +
                                         std::to_string(security_agent_pid_));
}

// ---------------------------------------------------------------------------
// state access

std::vector<GuestKernel::ProcView> GuestKernel::roster() const {
  std::vector<ProcView> out;
  for (const auto& [pid, h] : procs_) {
    ProcView v;
    v.pid = h.pid;
    v.name = h.name;
    v.uid = h.uid;
    v.scope = h.scope;
    v.alive = h.alive;
    v.hidden = h.hidden;
    v.address_space_id = h.address_space_id;
    v.task_addr = h.task_addr;
    out.push_back(std::move(v));
  }
  return out;
}

std::optional<GuestKernel::ProcView> GuestKernel::proc(std::int64_t pid) const {
  auto it = procs_.find(pid);
  if (it == procs_.end()) return std::nullopt;
  ProcView v;
  v.pid = it->second.pid;
  v.name = it->second.name;
  v.uid = it->second.uid;
  v.scope = it->second.scope;
  v.alive = it->second.alive;
  v.hidden = it->second.hidden;
  v.address_space_id = it->second.address_space_id;
  v.task_addr = it->second.task_addr;
  return v;
}

std::vector<std::pair<int, GuestAddr>> GuestKernel::open_fds(std::int64_t pid) const {
  std::vector<std::pair<int, GuestAddr>> out;
  auto it = procs_.find(pid);
  if (it == procs_.end() || !it->second.alive) return out;
  std::uint64_t fdt = mem_.raw_read_u64(
      prof_.field_addr(it->second.task_addr, layout::kProcess, "fd_table"));
  const std::uint32_t nslots = prof_.field(layout::kFdTable, "slots").size / 8;
  for (std::uint32_t i = 0; i < nslots; ++i) {
    std::uint64_t fobj = mem_.raw_read_u64(fdt + i * 8);
    if (!fobj) continue;
    std::uint64_t d = mem_.raw_read_u64(prof_.field_addr(fobj, layout::kFile, "dentry"));
    out.emplace_back(int(i), d);
  }
  return out;
}

GuestAddr GuestKernel::lookup_dentry(const FsScope& scope, const std::string& path) const {
  GuestAddr parent = 0;
  std::vector<std::string> comps = split_components(path);
  comps.insert(comps.begin(), scope.is_host() ? "/" : "//" + scope.container);
  for (const auto& name : comps) {
    GuestAddr cur = mem_.raw_read_u64(hash_table_ + 8 * bucket_of(parent, name));
    GuestAddr found = 0;
    while (cur) {
      std::uint64_t par = mem_.raw_read_u64(prof_.field_addr(cur, layout::kDentry, "parent"));
      std::string got = mem_.raw_read_cstr(prof_.field_addr(cur, layout::kDentry, "name"),
                                           prof_.field(layout::kDentry, "name").size);
      if (par == parent && got == name) {
        found = cur;
        break;
      }
      cur = mem_.raw_read_u64(prof_.field_addr(cur, layout::kDentry, "hash_next"));
    }
    if (!found) return 0;
    parent = found;
  }
  return parent;
}

std::string GuestKernel::dentry_path(GuestAddr dentry) const {
  std::vector<std::string> parts;
  GuestAddr cur = dentry;
  std::uint64_t steps = 0;
  std::string root;
  while (cur) {
    if (++steps > 4096) throw SimFault("dentry parent chain corrupt");
    std::string name = mem_.raw_read_cstr(prof_.field_addr(cur, layout::kDentry, "name"),
                                          prof_.field(layout::kDentry, "name").size);
    GuestAddr par = mem_.raw_read_u64(prof_.field_addr(cur, layout::kDentry, "parent"));
    if (par == 0) {
      root = name;
      break;
    }
    parts.push_back(name);
    cur = par;
  }
  std::string scope = root == "/" ? "host" : root.substr(2);
  std::string path;
  for (auto it = parts.rbegin(); it != parts.rend(); ++it) path += "/" + *it;
  if (path.empty()) path = "/";
  return scope + ":" + path;
}

std::string GuestKernel::read_content(const FsScope& scope, const std::string& path) const {
  auto hit = layers_.resolve_union(scope_layers(scope), path);
  if (!hit) return {};
  const LayerStore::FileMeta* m = layers_.meta(hit->layer, hit->ino);
  return m ? m->content : std::string{};
}

std::uint64_t GuestKernel::live_dentries() const {
  std::uint64_t n = 0;
  for (const auto& [addr, obj] : alloc_.objects())
    if (obj.kind == layout::kDentry) n++;
  return n;
}

bool GuestKernel::raw_guest_write(std::int64_t pid, GuestAddr addr,
                                  std::span<const std::uint8_t> bytes) {
  ProcHandle& p = require_proc(pid);
  return hv_.guest_write(make_ctx(p), addr, bytes);
}

bool GuestKernel::raw_guest_read(std::int64_t pid, GuestAddr addr,
                                 std::span<std::uint8_t> out) {
  ProcHandle& p = require_proc(pid);
  return hv_.guest_read(make_ctx(p), addr, out);
}

}  // namespace cfmsim
