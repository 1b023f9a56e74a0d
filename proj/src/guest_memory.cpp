#include "cfmsim/guest_memory.hpp"

#include <algorithm>
#include <cstring>

namespace cfmsim {

const char* to_string(PageKind k) {
  switch (k) {
    case PageKind::Free: return "Free";
    case PageKind::KernelCode: return "KernelCode";
    case PageKind::AgentCode: return "AgentCode";
    case PageKind::SlabDefault: return "SlabDefault";
    case PageKind::SlabIsolated: return "SlabIsolated";
    case PageKind::Data: return "Data";
  }
  return "?";
}

GuestMemory::GuestMemory(GuestMemoryConfig cfg) : cfg_(cfg) {
  if (cfg_.page_size == 0 || (cfg_.page_size & (cfg_.page_size - 1)) != 0)
    throw ConfigError("memory: page_size must be a power of two");
  if (cfg_.page_count == 0)
    throw ConfigError("memory: page_count must be positive");
  bytes_.assign(cfg_.page_size * cfg_.page_count, 0);
  kinds_.assign(cfg_.page_count, PageKind::Free);
}

bool GuestMemory::in_range(GuestAddr addr, std::uint64_t len) const {
  return addr < byte_size() && len <= byte_size() - addr;
}

void GuestMemory::check_range(GuestAddr addr, std::uint64_t len) const {
  if (!in_range(addr, len))
    throw SimFault("memory access out of range: addr=" + std::to_string(addr) +
                   " len=" + std::to_string(len));
}

PageKind GuestMemory::kind(PageIndex page) const {
  if (page >= cfg_.page_count) throw SimFault("page index out of range");
  return kinds_[page];
}

void GuestMemory::set_kind(PageIndex page, PageKind kind) {
  if (page >= cfg_.page_count) throw SimFault("page index out of range");
  if (kinds_[page] == kind) return;
  if (kinds_[page] != PageKind::Free)
    throw SimFault("page kind may only transition from Free");
  kinds_[page] = kind;
}

std::optional<PageIndex> GuestMemory::reserve_page(PageKind kind) {
  return reserve_range(1, kind);
}

std::optional<PageIndex> GuestMemory::reserve_range(std::uint64_t pages, PageKind kind) {
  if (pages == 0) return std::nullopt;
  for (PageIndex p = reserve_cursor_; p + pages <= cfg_.page_count; ++p) {
    bool ok = true;
    for (PageIndex q = p; q < p + pages; ++q) {
      if (kinds_[q] != PageKind::Free) {
        ok = false;
        break;
      }
    }
    if (!ok) continue;
    for (PageIndex q = p; q < p + pages; ++q) kinds_[q] = kind;
    if (p == reserve_cursor_) reserve_cursor_ = p + pages;
    return p;
  }
  return std::nullopt;
}

void GuestMemory::raw_read(GuestAddr addr, std::span<std::uint8_t> out) const {
  check_range(addr, out.size());
  std::memcpy(out.data(), bytes_.data() + addr, out.size());
}

void GuestMemory::raw_write(GuestAddr addr, std::span<const std::uint8_t> bytes) {
  check_range(addr, bytes.size());
  std::memcpy(bytes_.data() + addr, bytes.data(), bytes.size());
}

std::uint64_t GuestMemory::raw_read_u64(GuestAddr addr) const {
  std::uint8_t b[8];
  raw_read(addr, b);
  std::uint64_t v = 0;
  for (int i = 7; i >= 0; --i) v = (v << 8) | b[i];
  return v;
}

void GuestMemory::raw_write_u64(GuestAddr addr, std::uint64_t value) {
  std::uint8_t b[8];
  for (int i = 0; i < 8; ++i) b[i] = std::uint8_t(value >> (8 * i));
  raw_write(addr, b);
}

std::string GuestMemory::raw_read_cstr(GuestAddr addr, std::uint64_t cap) const {
  check_range(addr, cap);
  std::string s;
  for (std::uint64_t i = 0; i < cap; ++i) {
    char c = char(bytes_[addr + i]);
    if (c == '\0') break;
    s.push_back(c);
  }
  return s;
}

void GuestMemory::raw_zero(GuestAddr addr, std::uint64_t len) {
  check_range(addr, len);
  std::memset(bytes_.data() + addr, 0, len);
}

std::vector<PageIndex> GuestMemory::pages_of_kind(PageKind kind) const {
  std::vector<PageIndex> out;
  for (PageIndex p = 0; p < cfg_.page_count; ++p)
    if (kinds_[p] == kind) out.push_back(p);
  return out;
}

SlabAllocator::SlabAllocator(GuestMemory& mem, const LayoutProfile& profile,
                             std::uint64_t isolated_pages)
    : mem_(mem), profile_(profile) {
  if (isolated_pages == 0)
    throw ConfigError("allocator: isolated_pages must be positive");
  auto begin = mem_.reserve_range(isolated_pages, PageKind::SlabIsolated);
  if (!begin)
    throw ConfigError("allocator: cannot reserve the isolated region");
  // Address 0 is the null sentinel; the kernel anchor page must already own
  // page 0 before any slab memory is handed out.
  if (*begin == 0)
    throw ConfigError("allocator: page 0 must be reserved before construction");
  iso_begin_page_ = *begin;
  iso_pages_ = isolated_pages;
  iso_cursor_ = iso_begin_page_ * mem_.page_size();
  iso_end_ = iso_cursor_ + isolated_pages * mem_.page_size();
}

std::uint32_t SlabAllocator::class_of(std::uint32_t size) const {
  return ((size + 63) / 64) * 64;
}

GuestAddr SlabAllocator::alloc(const std::string& kind, Placement placement) {
  if (!profile_.has_struct(kind))
    throw SimFault("alloc: layout profile does not know '" + kind + "'");
  const std::uint32_t size = profile_.size_of(kind);

  if (placement == Placement::Isolated) {
    if (iso_cursor_ + size > iso_end_) return 0;  // isolated region exhausted
    GuestAddr addr = iso_cursor_;
    iso_cursor_ += size;
    iso_objects_++;
    iso_bytes_ += size;
    mem_.raw_zero(addr, size);
    objects_[addr] = SlabObject{kind, size, placement};
    return addr;
  }

  const std::uint32_t cls = class_of(size);
  auto& pages = classes_[cls];
  for (std::uint32_t pi = 0; pi < pages.size(); ++pi) {
    SlabPage& sp = pages[pi];
    if (sp.free_slots == 0) continue;
    for (std::uint32_t slot = 0; slot < sp.used.size(); ++slot) {
      if (sp.used[slot]) continue;
      sp.used[slot] = true;
      sp.free_slots--;
      GuestAddr addr = sp.page * mem_.page_size() + std::uint64_t(slot) * cls;
      mem_.raw_zero(addr, size);
      objects_[addr] = SlabObject{kind, size, placement};
      return addr;
    }
  }
  auto page = mem_.reserve_page(PageKind::SlabDefault);
  if (!page) return 0;  // out of memory
  SlabPage sp;
  sp.page = *page;
  sp.slot_size = cls;
  sp.used.assign(mem_.page_size() / cls, false);
  sp.free_slots = std::uint32_t(sp.used.size());
  sp.used[0] = true;
  sp.free_slots--;
  page_slot_[*page] = {cls, std::uint32_t(pages.size())};
  pages.push_back(std::move(sp));
  GuestAddr addr = *page * mem_.page_size();
  mem_.raw_zero(addr, size);
  objects_[addr] = SlabObject{kind, size, placement};
  return addr;
}

void SlabAllocator::free(GuestAddr addr) {
  auto it = objects_.find(addr);
  if (it == objects_.end())
    throw SimFault("free of unknown or already freed address " + std::to_string(addr));
  const SlabObject obj = it->second;
  objects_.erase(it);
  mem_.raw_zero(addr, obj.size);
  if (obj.placement == Placement::Isolated) {
    // Bump allocator: isolated slots are never reused. Monitored objects are
    // kept alive indefinitely, so reuse pressure there is nil.
    return;
  }
  PageIndex page = mem_.page_of(addr);
  auto ps = page_slot_.find(page);
  if (ps == page_slot_.end()) throw SimFault("free: slab page metadata missing");
  auto [cls, idx] = ps->second;
  SlabPage& sp = classes_[cls][idx];
  std::uint32_t slot = std::uint32_t((addr % mem_.page_size()) / cls);
  if (!sp.used[slot]) throw SimFault("free: slot already free");
  sp.used[slot] = false;
  sp.free_slots++;
}

const SlabObject* SlabAllocator::find(GuestAddr addr) const {
  auto it = objects_.find(addr);
  return it == objects_.end() ? nullptr : &it->second;
}

const SlabObject* SlabAllocator::find_containing(GuestAddr addr, GuestAddr* base) const {
  auto it = objects_.upper_bound(addr);
  if (it == objects_.begin()) return nullptr;
  --it;
  if (addr >= it->first && addr < it->first + it->second.size) {
    if (base) *base = it->first;
    return &it->second;
  }
  return nullptr;
}

std::uint64_t SlabAllocator::isolated_pages_spanned() const {
  std::uint64_t used = iso_cursor_ - iso_begin_page_ * mem_.page_size();
  return (used + mem_.page_size() - 1) / mem_.page_size();
}

std::set<std::string> SlabAllocator::kinds_on_page(PageIndex page) const {
  std::set<std::string> out;
  GuestAddr lo = page * mem_.page_size();
  GuestAddr hi = lo + mem_.page_size();
  for (auto it = objects_.begin(); it != objects_.end(); ++it) {
    if (it->first + it->second.size <= lo) continue;
    if (it->first >= hi) break;
    out.insert(it->second.kind);
  }
  return out;
}

std::set<Placement> SlabAllocator::placements_on_page(PageIndex page) const {
  std::set<Placement> out;
  GuestAddr lo = page * mem_.page_size();
  GuestAddr hi = lo + mem_.page_size();
  for (auto it = objects_.begin(); it != objects_.end(); ++it) {
    if (it->first + it->second.size <= lo) continue;
    if (it->first >= hi) break;
    out.insert(it->second.placement);
  }
  return out;
}

}  // namespace cfmsim
