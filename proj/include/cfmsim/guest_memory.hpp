#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "cfmsim/layout_profile.hpp"
#include "cfmsim/types.hpp"

namespace cfmsim {

enum class PageKind : std::uint8_t {
  Free,
  KernelCode,
  AgentCode,
  SlabDefault,
  SlabIsolated,
  Data,
};

const char* to_string(PageKind k);

struct GuestMemoryConfig {
  std::uint64_t page_size = 4096;
  std::uint64_t page_count = 4096;
  std::uint64_t isolated_pages = 64;
};

// Byte-addressable simulated guest physical memory. Raw reads/writes here
// never generate events; permission checking lives in the hypervisor.
class GuestMemory {
 public:
  explicit GuestMemory(GuestMemoryConfig cfg);

  std::uint64_t page_size() const { return cfg_.page_size; }
  std::uint64_t page_count() const { return cfg_.page_count; }
  std::uint64_t byte_size() const { return cfg_.page_size * cfg_.page_count; }

  PageIndex page_of(GuestAddr addr) const { return addr / cfg_.page_size; }
  bool in_range(GuestAddr addr, std::uint64_t len) const;
  void check_range(GuestAddr addr, std::uint64_t len) const;

  PageKind kind(PageIndex page) const;
  // Page kinds transition only Free -> something; re-asserting the same kind
  // is a no-op.
  void set_kind(PageIndex page, PageKind kind);

  // Reserves the next free page (or a contiguous run) and assigns a kind.
  std::optional<PageIndex> reserve_page(PageKind kind);
  std::optional<PageIndex> reserve_range(std::uint64_t pages, PageKind kind);

  void raw_read(GuestAddr addr, std::span<std::uint8_t> out) const;
  void raw_write(GuestAddr addr, std::span<const std::uint8_t> bytes);
  std::uint64_t raw_read_u64(GuestAddr addr) const;
  void raw_write_u64(GuestAddr addr, std::uint64_t value);
  std::string raw_read_cstr(GuestAddr addr, std::uint64_t cap) const;
  void raw_zero(GuestAddr addr, std::uint64_t len);

  std::vector<PageIndex> pages_of_kind(PageKind kind) const;

 private:
  GuestMemoryConfig cfg_;
  std::vector<std::uint8_t> bytes_;
  std::vector<PageKind> kinds_;
  PageIndex reserve_cursor_ = 0;
};

struct SlabObject {
  std::string kind;
  std::uint32_t size = 0;
  Placement placement = Placement::Default;
};

// Kernel-object allocator with the two placement policies. Default placement
// is first-fit over partially filled pages of the same size class, which
// co-locates unrelated objects on shared pages. Isolated placement bump
// allocates out of a reserved contiguous page range, packing objects
// adjacently (they may straddle page boundaries) and never reusing slots.
class SlabAllocator {
 public:
  SlabAllocator(GuestMemory& mem, const LayoutProfile& profile,
                std::uint64_t isolated_pages);

  // Returns 0 when memory is exhausted.
  GuestAddr alloc(const std::string& kind, Placement placement);
  void free(GuestAddr addr);

  const SlabObject* find(GuestAddr addr) const;
  // Live object containing addr, if any.
  const SlabObject* find_containing(GuestAddr addr, GuestAddr* base) const;
  const std::map<GuestAddr, SlabObject>& objects() const { return objects_; }

  PageIndex isolated_region_begin() const { return iso_begin_page_; }
  PageIndex isolated_region_pages() const { return iso_pages_; }
  std::uint64_t isolated_objects() const { return iso_objects_; }
  std::uint64_t isolated_bytes() const { return iso_bytes_; }
  // Pages actually spanned by isolated objects so far.
  std::uint64_t isolated_pages_spanned() const;

  // Distinct object kinds with at least one live object on the page.
  std::set<std::string> kinds_on_page(PageIndex page) const;
  std::set<Placement> placements_on_page(PageIndex page) const;

 private:
  struct SlabPage {
    PageIndex page = 0;
    std::uint32_t slot_size = 0;
    std::vector<bool> used;
    std::uint32_t free_slots = 0;
  };

  std::uint32_t class_of(std::uint32_t size) const;

  GuestMemory& mem_;
  const LayoutProfile& profile_;
  std::map<std::uint32_t, std::vector<SlabPage>> classes_;
  std::map<PageIndex, std::pair<std::uint32_t, std::uint32_t>> page_slot_;  // page -> (class, index)
  std::map<GuestAddr, SlabObject> objects_;

  PageIndex iso_begin_page_ = 0;
  std::uint64_t iso_pages_ = 0;
  GuestAddr iso_cursor_ = 0;
  GuestAddr iso_end_ = 0;
  std::uint64_t iso_objects_ = 0;
  std::uint64_t iso_bytes_ = 0;
};

}  // namespace cfmsim
