#pragma once

#include <memory>

#include "cfmsim/cost_model.hpp"
#include "cfmsim/guest_kernel.hpp"
#include "cfmsim/guest_memory.hpp"
#include "cfmsim/hypervisor.hpp"
#include "cfmsim/layout_profile.hpp"

namespace cfmsim {

struct SimulationConfig {
  GuestMemoryConfig memory;
  LayoutProfile profile = LayoutProfile::defaults();
  CostModel cost = CostModel::defaults();
};

// One self-contained instance: guest memory + hypervisor + allocator +
// kernel. Single-threaded; instances share nothing and may be run on
// different executors independently.
class Simulation {
 public:
  explicit Simulation(SimulationConfig cfg)
      : cfg_(std::move(cfg)),
        mem_(cfg_.memory),
        hv_((reserve_boot_pages(mem_), mem_), cfg_.cost),
        alloc_(mem_, cfg_.profile, cfg_.memory.isolated_pages),
        kernel_(mem_, alloc_, hv_, cfg_.profile) {}

  Simulation(const Simulation&) = delete;
  Simulation& operator=(const Simulation&) = delete;

  const SimulationConfig& config() const { return cfg_; }
  const LayoutProfile& profile() const { return cfg_.profile; }
  GuestMemory& memory() { return mem_; }
  Hypervisor& hypervisor() { return hv_; }
  const Hypervisor& hypervisor() const { return hv_; }
  SlabAllocator& allocator() { return alloc_; }
  GuestKernel& kernel() { return kernel_; }
  const GuestKernel& kernel() const { return kernel_; }

 private:
  SimulationConfig cfg_;
  GuestMemory mem_;
  Hypervisor hv_;
  SlabAllocator alloc_;
  GuestKernel kernel_;
};

}  // namespace cfmsim
