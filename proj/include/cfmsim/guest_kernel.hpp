#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "cfmsim/hypervisor.hpp"
#include "cfmsim/layout_profile.hpp"
#include "cfmsim/types.hpp"

namespace cfmsim {

struct NamespaceSet {
  std::uint64_t pid_ns = 0;
  std::uint64_t mnt_ns = 0;
  std::uint64_t uts_ns = 0;
  std::uint64_t ipc_ns = 0;
  std::uint64_t net_ns = 0;
  std::uint64_t user_ns = 0;
};

// Backing filesystem truth, host-side. Image layers hold path -> inode maps;
// the dentry cache materializes from here on lookup.
class LayerStore {
 public:
  struct FileMeta {
    std::uint64_t ino = 0;
    std::string content;
    bool readable = true;
    bool writable = true;
    bool is_dir = false;
  };
  struct Hit {
    std::string layer;
    std::uint64_t layer_index = 0;
    std::uint64_t ino = 0;
  };

  void add_layer(const std::string& id);
  bool has_layer(const std::string& id) const;
  std::uint64_t layer_index(const std::string& id) const;
  const std::string& layer_id(std::uint64_t index) const;

  std::uint64_t put_file(const std::string& layer, const std::string& path,
                         std::string content, bool readable = true,
                         bool writable = true);
  void ensure_dir(const std::string& layer, const std::string& path);

  // Topmost layer containing the path; layers given top-down.
  std::optional<Hit> resolve_union(const std::vector<std::string>& layers,
                                   const std::string& path) const;
  const FileMeta* meta(const std::string& layer, std::uint64_t ino) const;
  const FileMeta* meta_at(const std::string& layer, const std::string& path) const;
  void set_content(const std::string& layer, std::uint64_t ino, std::string content);

  // Copies a file into `to` under the same path; returns the new ino.
  std::uint64_t copy_up(const Hit& from, const std::string& path,
                        const std::string& to);
  // Adds a second path for an existing ino within one layer.
  void add_link(const std::string& layer, const std::string& newpath,
                std::uint64_t ino);
  std::uint64_t link_count(const std::string& layer, std::uint64_t ino) const;

  std::vector<std::string> list_dir(const std::vector<std::string>& layers,
                                    const std::string& path) const;
  bool is_dir(const std::vector<std::string>& layers, const std::string& path) const;

 private:
  struct Layer {
    std::string id;
    std::map<std::string, std::uint64_t> paths;
    std::map<std::uint64_t, FileMeta> inodes;
  };
  Layer& require(const std::string& id);
  const Layer& require(const std::string& id) const;

  std::vector<Layer> layers_;
  std::map<std::string, std::uint64_t> index_;
  std::uint64_t next_ino_ = 100;
};

struct ContainerInfo {
  std::string id;
  NamespaceSet ns;
  std::vector<std::string> lower_layers;  // topmost first
  std::string upper_layer;
  std::vector<std::int64_t> member_pids;
  std::int64_t hidden_agent_pid = 0;
  bool started = false;
};

struct SyscallLogEntry {
  std::uint64_t seq = 0;
  std::int64_t pid = 0;
  SyscallName name = SyscallName::Open;
  std::string path;   // scope-qualified
  std::string path2;  // scope-qualified (link)
  OpenMode mode = OpenMode::ReadOnly;
  std::int64_t target_pid = 0;
  std::uint64_t bytes = 0;
  std::int64_t result = 0;
  bool induced = false;  // e.g. close forced by kill
};

struct ProcessSpec {
  std::int64_t pid = 0;  // 0 = auto
  std::string name;
  std::int64_t uid = 0;
  FsScope scope;
  bool hidden = false;
};

// One syscall request; see GuestKernel::submit.
struct Call {
  SyscallName op = SyscallName::Open;
  std::string path;
  std::string path2;
  OpenMode mode = OpenMode::ReadOnly;
  Placement placement = Placement::Default;
  int fd = -1;
  IoDir dir = IoDir::Read;
  std::uint64_t nbytes = 0;
  std::uint64_t block_size = 0;
  std::int64_t target_pid = 0;
  std::string payload;
};

// Miniature guest OS: processes with namespaces, a syscall layer, a dentry
// cache with reference counting, overlay union mounts, and the guest-side
// monitoring hooks. All kernel-object field traffic goes through the
// hypervisor's guest access path so page watchpoints see it.
class GuestKernel {
 public:
  GuestKernel(GuestMemory& mem, SlabAllocator& alloc, Hypervisor& hv,
              const LayoutProfile& profile);

  // --- host/image setup -----------------------------------------------
  LayerStore& layers() { return layers_; }
  const LayerStore& layers() const { return layers_; }
  const std::string& host_layer() const { return host_layer_; }
  void add_host_file(const std::string& path, std::string content,
                     bool readable = true, bool writable = true);
  void define_container(const std::string& id,
                        std::vector<std::string> lower_layers,
                        std::string upper_layer);
  const std::map<std::string, ContainerInfo>& containers() const {
    return containers_;
  }
  const NamespaceSet& initial_ns() const { return initial_ns_; }

  std::int64_t spawn_process(const ProcessSpec& spec);
  void start_containers();  // spawns the deferred container rosters
  void defer_container_process(const std::string& cid, ProcessSpec spec);

  // --- syscall interface ----------------------------------------------
  // Two-phase form: submit runs the syscall body (entry breakpoint, path
  // resolution, reference count traffic); finish delivers the return-site
  // breakpoint and commits or rolls back. Interleaving finishes across
  // processes models context switches.
  std::uint64_t submit(std::int64_t pid, const Call& call);
  std::int64_t finish(std::uint64_t instance);
  std::int64_t call(std::int64_t pid, const Call& c) { return finish(submit(pid, c)); }

  std::int64_t sys_open(std::int64_t pid, const std::string& path, OpenMode mode,
                        Placement placement = Placement::Default);
  std::int64_t sys_close(std::int64_t pid, int fd);
  std::int64_t sys_io(std::int64_t pid, int fd, IoDir dir, std::uint64_t nbytes,
                      std::uint64_t block_size);
  std::int64_t sys_link(std::int64_t pid, const std::string& existing,
                        const std::string& newpath);
  std::int64_t sys_kill(std::int64_t pid, std::int64_t target);
  std::int64_t sys_getdents(std::int64_t pid, const std::string& path,
                            std::vector<std::string>* names);
  std::string sys_monitor(std::int64_t pid, const std::string& payload);

  // Periodic dcache cleanup: frees dentries whose reference count is zero.
  // Each candidate's refcount field is first touch-written through the
  // hypervisor so watchpoints can intervene before the object is released.
  std::size_t dcache_prune();

  // --- agents ----------------------------------------------------------
  // One monitored file per task, as written into the image at build time.
  struct AgentTask {
    FsScope scope;
    std::string path;
  };
  void set_image_tasks(std::vector<AgentTask> tasks) { image_tasks_ = std::move(tasks); }
  void set_security_agent(ProcessSpec spec) { agent_spec_ = std::move(spec); }
  void set_hidden_agent_spec(const std::string& cid, ProcessSpec spec) {
    hidden_agent_specs_[cid] = std::move(spec);
  }
  // Boots the security agent (and per-container hidden agents), opens every
  // policy file with the given placement, then signals the monitor.
  void run_agents(Placement placement);
  // One poll round: asks the monitor for late additions and opens them.
  void agent_poll();
  std::int64_t security_agent_pid() const { return security_agent_pid_; }
  const std::vector<std::int64_t>& agent_pids() const { return agent_pids_; }

  // --- state access (ground truth for tests and reports) ---------------
  struct ProcView {
    std::int64_t pid = 0;
    std::string name;
    std::int64_t uid = 0;
    FsScope scope;
    bool alive = false;
    bool hidden = false;
    std::uint64_t address_space_id = 0;
    GuestAddr task_addr = 0;
  };
  std::vector<ProcView> roster() const;
  std::optional<ProcView> proc(std::int64_t pid) const;
  std::vector<std::pair<int, GuestAddr>> open_fds(std::int64_t pid) const;  // fd -> dentry
  GuestAddr lookup_dentry(const FsScope& scope, const std::string& path) const;
  std::string dentry_path(GuestAddr dentry) const;  // scope-qualified
  std::string read_content(const FsScope& scope, const std::string& path) const;
  std::uint64_t live_dentries() const;
  const std::vector<SyscallLogEntry>& syscall_log() const { return log_; }

  GuestAddr globals_addr() const { return 0; }
  const std::vector<PageIndex>& static_pages() const { return static_pages_; }

  // Arbitrary in-guest memory write in a process context; models a root
  // attacker tampering with kernel or agent memory.
  bool raw_guest_write(std::int64_t pid, GuestAddr addr,
                       std::span<const std::uint8_t> bytes);
  bool raw_guest_read(std::int64_t pid, GuestAddr addr,
                      std::span<std::uint8_t> out);

  // Registers an untracked pointer to a kernel object; object migration
  // refuses to move objects with such references (test hook).
  void register_external_ref(GuestAddr addr) { external_refs_.push_back(addr); }
  const std::vector<GuestAddr>& external_refs() const { return external_refs_; }

 private:
  struct ProcHandle {
    std::int64_t pid = 0;
    GuestAddr task_addr = 0;
    FsScope scope;
    bool alive = true;
    bool hidden = false;
    std::string name;
    std::int64_t uid = 0;
    std::uint64_t address_space_id = 0;
    std::set<int> reserved_fds;
    bool inflight = false;
  };

  struct Instance {
    std::uint64_t id = 0;
    std::int64_t pid = 0;
    ProcContext ctx;
    Call call;
    std::int64_t provisional = 0;
    std::size_t log_index = SIZE_MAX;
    // open
    int fd = -1;
    GuestAddr file_obj = 0;
    bool holds_ref = false;
    // getdents
    std::vector<std::string> names;
    std::string reply;
  };

  struct ResolveOut {
    GuestAddr dentry = 0;
    std::int64_t err = 0;
    std::string layer;
    std::uint64_t ino = 0;
  };

  // memory helpers (all field traffic via the profile + hypervisor)
  GuestAddr kalloc(const std::string& kind, Placement placement, const ProcContext& ctx);
  void kfree(GuestAddr addr);
  bool wfield(const ProcContext& ctx, GuestAddr obj, const char* strct,
              const char* field, std::uint64_t v);
  bool rfield(const ProcContext& ctx, GuestAddr obj, const char* strct,
              const char* field, std::uint64_t* v);
  void write_name(const ProcContext& ctx, GuestAddr obj, const char* strct,
                  const char* field, const std::string& s);

  ProcHandle& require_proc(std::int64_t pid);
  ProcContext make_ctx(ProcHandle& p);
  static ProcContext kernel_ctx() { return ProcContext{}; }

  std::vector<std::string> scope_layers(const FsScope& scope) const;
  std::string write_layer(const FsScope& scope) const;
  std::string root_name(const FsScope& scope) const;

  std::uint64_t bucket_of(GuestAddr parent, const std::string& name) const;
  GuestAddr dcache_lookup(const ProcContext& ctx, GuestAddr parent,
                          const std::string& name, std::int64_t* err);
  GuestAddr materialize(const ProcContext& ctx, GuestAddr parent,
                        const std::string& name, const LayerStore::Hit& hit,
                        Placement placement);
  GuestAddr inode_object(const ProcContext& ctx, const LayerStore::Hit& hit);
  ResolveOut resolve_path(ProcHandle& proc, const std::string& path,
                          Placement placement, const ProcContext& ctx);
  void free_dentry(GuestAddr d, const ProcContext& ctx);
  bool adjust_refcount(const ProcContext& ctx, GuestAddr dentry, std::int64_t delta);

  // syscall bodies
  void body_open(ProcHandle& p, Instance& in);
  void body_close(ProcHandle& p, Instance& in);
  void body_io(ProcHandle& p, Instance& in);
  void body_link(ProcHandle& p, Instance& in);
  void body_kill(ProcHandle& p, Instance& in);
  void body_getdents(ProcHandle& p, Instance& in);
  void body_monitor(ProcHandle& p, Instance& in);

  SyscallLogEntry& log_append(const Instance& in, SyscallName name);

  GuestMemory& mem_;
  SlabAllocator& alloc_;
  Hypervisor& hv_;
  const LayoutProfile& prof_;

  LayerStore layers_;
  std::string host_layer_ = "host";
  std::map<std::string, ContainerInfo> containers_;
  std::map<std::string, std::vector<ProcessSpec>> deferred_procs_;
  NamespaceSet initial_ns_;
  std::uint64_t ns_counter_ = 0;

  std::map<std::int64_t, ProcHandle> procs_;
  GuestAddr init_task_ = 0;
  std::int64_t next_auto_pid_ = 500;

  GuestAddr hash_table_ = 0;
  std::uint64_t buckets_ = 1024;
  std::map<std::pair<std::uint64_t, std::uint64_t>, GuestAddr> inode_cache_;

  std::vector<PageIndex> static_pages_;
  std::vector<PageIndex> io_pool_;
  GuestAddr msg_page_addr_ = 0;

  std::vector<SyscallLogEntry> log_;
  std::uint64_t log_seq_ = 0;

  std::map<std::uint64_t, Instance> inflight_;
  std::uint64_t instance_counter_ = 0;
  std::uint64_t stack_counter_ = 0;

  std::vector<AgentTask> image_tasks_;
  ProcessSpec agent_spec_;
  std::map<std::string, ProcessSpec> hidden_agent_specs_;
  Placement agent_placement_ = Placement::Isolated;
  std::int64_t security_agent_pid_ = 0;
  std::vector<std::int64_t> agent_pids_;

  std::vector<GuestAddr> external_refs_;
};

// Reserves the fixed boot pages (kernel anchors/code, agent code, message
// page, IO pool, dcache table) from a fresh memory image. Must run before
// the slab allocator carves the isolated region.
void reserve_boot_pages(GuestMemory& mem);

}  // namespace cfmsim
