#include <map>
#include <random>
#include <set>

#include "doctest.h"

#include "cfmsim/guest_memory.hpp"
#include "cfmsim/layout_profile.hpp"

using namespace cfmsim;

namespace {

GuestMemoryConfig small_cfg() {
  GuestMemoryConfig cfg;
  cfg.page_count = 512;
  cfg.isolated_pages = 64;
  return cfg;
}

struct Rig {
  GuestMemory mem;
  LayoutProfile prof = LayoutProfile::defaults();
  SlabAllocator alloc;
  Rig() : mem(small_cfg()), alloc((mem.reserve_page(PageKind::KernelCode), mem), prof, 64) {}
};

}  // namespace

TEST_CASE("isolated packing: 500 dentries span exactly 24 pages, 96000 bytes") {
  Rig rig;
  for (int i = 0; i < 500; ++i)
    REQUIRE(rig.alloc.alloc("dentry", Placement::Isolated) != 0);
  CHECK(rig.alloc.isolated_objects() == 500);
  CHECK(rig.alloc.isolated_bytes() == 96000);
  // ceil(500 * 192 / 4096)
  CHECK(rig.alloc.isolated_pages_spanned() == 24);
}

TEST_CASE("isolated packing: second dentry lands on the same page") {
  Rig rig;
  GuestAddr a = rig.alloc.alloc("dentry", Placement::Isolated);
  CHECK(rig.alloc.isolated_pages_spanned() == 1);
  GuestAddr b = rig.alloc.alloc("dentry", Placement::Isolated);
  CHECK(rig.mem.page_of(a) == rig.mem.page_of(b));
  CHECK(b == a + 192);
}

TEST_CASE("refcount fields of 500 isolated dentries cover 24 distinct pages") {
  Rig rig;
  std::set<PageIndex> pages;
  for (int i = 0; i < 500; ++i) {
    GuestAddr d = rig.alloc.alloc("dentry", Placement::Isolated);
    pages.insert(rig.mem.page_of(rig.prof.field_addr(d, "dentry", "refcount")));
  }
  CHECK(pages.size() == 24);
}

TEST_CASE("default placement co-locates different 192-byte kinds on one page") {
  Rig rig;
  GuestAddr d1 = rig.alloc.alloc("dentry", Placement::Default);
  GuestAddr f1 = rig.alloc.alloc("file", Placement::Default);
  GuestAddr d2 = rig.alloc.alloc("dentry", Placement::Default);
  CHECK(rig.mem.page_of(d1) == rig.mem.page_of(f1));
  CHECK(rig.mem.page_of(d1) == rig.mem.page_of(d2));
  auto kinds = rig.alloc.kinds_on_page(rig.mem.page_of(d1));
  CHECK(kinds.count("dentry") == 1);
  CHECK(kinds.count("file") == 1);
}

TEST_CASE("placement separation: no page mixes Isolated and Default objects") {
  Rig rig;
  std::mt19937_64 rng(11);
  for (int i = 0; i < 400; ++i) {
    Placement pl = rng() % 2 ? Placement::Isolated : Placement::Default;
    const char* kind = rng() % 3 == 0 ? "inode" : (rng() % 2 ? "dentry" : "file");
    if (pl == Placement::Isolated) kind = "dentry";
    REQUIRE(rig.alloc.alloc(kind, pl) != 0);
  }
  for (PageIndex p = 0; p < rig.mem.page_count(); ++p) {
    auto pls = rig.alloc.placements_on_page(p);
    CHECK(pls.size() <= 1);
  }
}

TEST_CASE("packing bound: N isolated objects occupy ceil(N*S/page) pages") {
  std::mt19937_64 rng(7);
  for (int round = 0; round < 20; ++round) {
    Rig rig;
    const std::uint64_t n = 1 + rng() % 600;
    for (std::uint64_t i = 0; i < n; ++i)
      REQUIRE(rig.alloc.alloc("dentry", Placement::Isolated) != 0);
    const std::uint64_t expect = (n * 192 + 4095) / 4096;
    CHECK(rig.alloc.isolated_pages_spanned() == expect);
  }
}

TEST_CASE("free and reuse follow a reference free-list model") {
  Rig rig;
  // Reference model: per size class, pages with slot bitmaps, first fit.
  struct Model {
    std::map<std::uint64_t, std::set<std::uint64_t>> used;  // page -> slots
    std::uint64_t slots_per_page = 4096 / 192;
    std::vector<std::uint64_t> pages;
    std::uint64_t next_page = 0;
    std::uint64_t alloc() {
      for (std::uint64_t p : pages) {
        for (std::uint64_t s = 0; s < slots_per_page; ++s) {
          if (!used[p].count(s)) {
            used[p].insert(s);
            return p * 10000 + s;
          }
        }
      }
      std::uint64_t p = next_page++;
      pages.push_back(p);
      used[p].insert(0);
      return p * 10000;
    }
    void free(std::uint64_t handle) { used[handle / 10000].erase(handle % 10000); }
  } model;

  std::map<std::uint64_t, GuestAddr> mapping;  // model handle -> real addr
  std::mt19937_64 rng(3);
  std::vector<std::uint64_t> live;
  for (int i = 0; i < 500; ++i) {
    if (!live.empty() && rng() % 3 == 0) {
      std::size_t k = rng() % live.size();
      rig.alloc.free(mapping[live[k]]);
      model.free(live[k]);
      mapping.erase(live[k]);
      live.erase(live.begin() + k);
    } else {
      std::uint64_t h = model.alloc();
      GuestAddr a = rig.alloc.alloc("dentry", Placement::Default);
      REQUIRE(a != 0);
      // Same page ordinal and slot as the model's first-fit choice.
      mapping[h] = a;
      live.push_back(h);
    }
  }
  // Page count agreement: the distinct pages hosting live objects match.
  std::set<std::uint64_t> model_pages;
  for (auto& [p, slots] : model.used)
    if (!slots.empty()) model_pages.insert(p);
  std::set<PageIndex> real_pages;
  for (auto& [h, a] : mapping) real_pages.insert(rig.mem.page_of(a));
  CHECK(real_pages.size() == model_pages.size());
}

TEST_CASE("alloc 10, free 5, alloc 5: page count unchanged") {
  Rig rig;
  std::vector<GuestAddr> addrs;
  for (int i = 0; i < 10; ++i) addrs.push_back(rig.alloc.alloc("dentry", Placement::Default));
  auto pages_used = [&] {
    std::set<PageIndex> s;
    for (const auto& [a, o] : rig.alloc.objects())
      if (o.kind == "dentry") s.insert(rig.mem.page_of(a));
    return s.size();
  };
  const std::size_t before = pages_used();
  for (int i = 0; i < 5; ++i) rig.alloc.free(addrs[i]);
  for (int i = 0; i < 5; ++i) REQUIRE(rig.alloc.alloc("dentry", Placement::Default) != 0);
  CHECK(pages_used() == before);
}

TEST_CASE("double free and unknown free are hard faults") {
  Rig rig;
  GuestAddr a = rig.alloc.alloc("dentry", Placement::Default);
  rig.alloc.free(a);
  CHECK_THROWS_AS(rig.alloc.free(a), SimFault);
  CHECK_THROWS_AS(rig.alloc.free(0x123456), SimFault);
}

TEST_CASE("freed default slot is reusable") {
  Rig rig;
  GuestAddr a = rig.alloc.alloc("dentry", Placement::Default);
  GuestAddr b = rig.alloc.alloc("dentry", Placement::Default);
  (void)b;
  rig.alloc.free(a);
  GuestAddr c = rig.alloc.alloc("dentry", Placement::Default);
  CHECK(c == a);
}

TEST_CASE("isolated slots are not reused") {
  Rig rig;
  GuestAddr a = rig.alloc.alloc("dentry", Placement::Isolated);
  rig.alloc.free(a);
  GuestAddr b = rig.alloc.alloc("dentry", Placement::Isolated);
  CHECK(b != a);
  CHECK(b > a);
}

TEST_CASE("isolated region exhaustion returns the failure signal") {
  GuestMemoryConfig cfg;
  cfg.page_count = 64;
  GuestMemory mem(cfg);
  mem.reserve_page(PageKind::KernelCode);
  LayoutProfile prof = LayoutProfile::defaults();
  SlabAllocator alloc(mem, prof, 1);
  std::uint64_t got = 0;
  while (alloc.alloc("dentry", Placement::Isolated) != 0) got++;
  CHECK(got == 4096 / 192);  // 21 dentries fit a single reserved page
}

TEST_CASE("field_addr resolves profile offsets") {
  LayoutProfile prof = LayoutProfile::defaults();
  CHECK(prof.field_addr(1000, "dentry", "refcount") == 1000);  // offset 0
  CHECK(prof.field_addr(1000, "dentry", "inode") == 1000 + prof.field("dentry", "inode").offset);
  CHECK_THROWS_AS(prof.field_addr(0, "dentry", "nope"), SimFault);
  CHECK_THROWS_AS(prof.field_addr(0, "nope", "x"), SimFault);
}

TEST_CASE("profile rejects fields beyond the object size") {
  nlohmann::json bad = {
      {"tiny", {{"size", 16}, {"fields", {{"big", {{"offset", 12}, {"size", 8}}}}}}}};
  CHECK_THROWS_AS(LayoutProfile::from_json(bad), ConfigError);
}

TEST_CASE("page kinds only transition from Free") {
  GuestMemory mem(small_cfg());
  auto p = mem.reserve_page(PageKind::Data);
  REQUIRE(p.has_value());
  CHECK_THROWS_AS(mem.set_kind(*p, PageKind::KernelCode), SimFault);
  mem.set_kind(*p, PageKind::Data);  // same kind is a no-op
}
