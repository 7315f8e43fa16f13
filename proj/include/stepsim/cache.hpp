#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <stdexcept>
#include <vector>

#include "stepsim/types.hpp"

namespace stepsim {

struct CacheGeometry {
  std::uint32_t line_size = 64;
  std::uint32_t sets = 1024;
  std::uint32_t ways = 8;
  Cycles hit_latency = 20;
  Cycles miss_latency = 200;
};

// Cache lines are identified by (address tag, ASID, C-bit). Data brought in
// by the guest can never be hit by the host even for the same physical
// address, which is what rules out flush/reload style attacks here.
struct CacheLineTag {
  std::uint64_t tag = 0;
  Asid asid = 0;
  bool c_bit = false;

  bool operator==(const CacheLineTag&) const = default;
};

struct PerfCounters {
  std::uint64_t guest_retired_instructions = 0;
  std::uint64_t l2_miss_from_l1d_miss = 0;
  std::uint64_t l2_hit_from_l1d_miss = 0;
};

struct AccessResult {
  bool hit = false;
  Cycles latency = 0;
};

// Physically indexed, set-associative, LRU-replaced cache. There is no
// separate L1 level: every modeled access counts as an L1D miss and hits
// the performance counters accordingly.
class CacheSim {
 public:
  explicit CacheSim(CacheGeometry g = {}) : geo_(g) {
    if ((g.sets & (g.sets - 1)) != 0 || (g.ways & (g.ways - 1)) != 0)
      throw std::invalid_argument("cache sets and ways must be powers of two");
    if (g.miss_latency <= g.hit_latency)
      throw std::invalid_argument("miss latency must exceed hit latency");
    sets_.resize(g.sets);
  }

  const CacheGeometry& geometry() const { return geo_; }
  PerfCounters& counters() { return counters_; }
  const PerfCounters& counters() const { return counters_; }

  std::uint32_t set_index(std::uint64_t paddr) const {
    return static_cast<std::uint32_t>((paddr / geo_.line_size) % geo_.sets);
  }

  AccessResult access(std::uint64_t paddr, Asid asid, bool c_bit) {
    CacheLineTag tag{paddr / geo_.line_size / geo_.sets, asid, c_bit};
    auto& set = sets_[set_index(paddr)];
    ++tick_;
    for (auto& line : set) {
      if (line.tag == tag) {
        line.last_use = tick_;
        ++counters_.l2_hit_from_l1d_miss;
        return {true, geo_.hit_latency};
      }
    }
    ++counters_.l2_miss_from_l1d_miss;
    if (set.size() < geo_.ways) {
      set.push_back({tag, tick_});
    } else {
      auto lru = std::min_element(
          set.begin(), set.end(),
          [](const Line& a, const Line& b) { return a.last_use < b.last_use; });
      *lru = {tag, tick_};
    }
    return {false, geo_.miss_latency};
  }

  // Read-only view for offline analysis and ground-truth assertions.
  std::vector<CacheLineTag> set_contents(std::uint32_t set) const {
    std::vector<CacheLineTag> out;
    for (const auto& line : sets_[set]) out.push_back(line.tag);
    return out;
  }

  std::uint64_t lines_with_asid(Asid asid) const {
    std::uint64_t n = 0;
    for (const auto& set : sets_)
      for (const auto& line : set)
        if (line.tag.asid == asid) ++n;
    return n;
  }

 private:
  struct Line {
    CacheLineTag tag;
    std::uint64_t last_use = 0;
  };

  CacheGeometry geo_;
  std::vector<std::vector<Line>> sets_;
  std::uint64_t tick_ = 0;
  PerfCounters counters_;
};

// Host physical pages the attacker may use for eviction sets. Pages can be
// requested with a PFN congruence constraint; the pool is disjoint from
// guest memory by construction.
class HostPageAllocator {
 public:
  explicit HostPageAllocator(std::uint64_t base_pfn = 1ull << 22,
                             std::uint64_t pool_pages = 1ull << 16)
      : base_(base_pfn), limit_(base_pfn + pool_pages) {}

  // Returns the PFN of a fresh page with pfn % modulus == residue.
  std::uint64_t alloc_pfn(std::uint64_t modulus, std::uint64_t residue) {
    std::uint64_t pfn = next_;
    if (modulus > 1) pfn += (modulus - (pfn % modulus) + residue) % modulus;
    if (pfn >= limit_) throw std::runtime_error("host page allocator exhausted");
    next_ = pfn + 1;
    return pfn;
  }

 private:
  std::uint64_t base_ = 0;
  std::uint64_t limit_ = 0;
  std::uint64_t next_ = base_;
};

struct EvictionSet {
  std::uint32_t target_set = 0;
  std::vector<std::uint64_t> members;  // line addresses, one per page
};

// Per-access probe result over the 16 consecutive sets covering one
// 16-line lookup table.
struct CacheTrace {
  static constexpr int kSets = 16;
  std::array<Cycles, kSets> latency{};
  std::array<std::uint8_t, kSets> miss{};  // 1 = classified as victim activity

  int hot_count() const {
    int n = 0;
    for (auto m : miss) n += m;
    return n;
  }
};

// Builds `ways` congruent line addresses on distinct pages. The line offset
// inside the page covers the low set-index bits, the PFN residue the rest.
inline EvictionSet build_eviction_set(CacheSim& cache, std::uint32_t target_set,
                                      HostPageAllocator& alloc) {
  const auto& g = cache.geometry();
  const std::uint64_t lines_per_page = kPageSize / g.line_size;       // 64
  const std::uint64_t page_residues = g.sets / lines_per_page;        // sets/64
  const std::uint64_t offset = (target_set % lines_per_page) * g.line_size;
  const std::uint64_t residue = target_set / lines_per_page;

  EvictionSet ev;
  ev.target_set = target_set;
  for (std::uint32_t i = 0; i < g.ways; ++i) {
    std::uint64_t pfn = alloc.alloc_pfn(page_residues, residue);
    std::uint64_t addr = page_base(pfn) + offset;
    if (cache.set_index(addr) != target_set)
      throw std::logic_error("eviction set congruence broken");
    ev.members.push_back(addr);
  }

  // Verification probe: after filling the set ourselves, re-walking it must
  // produce only hits, and one extra congruent line must evict exactly one.
  for (auto m : ev.members) cache.access(m, kHostAsid, false);
  for (auto it = ev.members.rbegin(); it != ev.members.rend(); ++it)
    if (!cache.access(*it, kHostAsid, false).hit)
      throw std::runtime_error("eviction set self-check failed (probe miss)");
  std::uint64_t extra_pfn = alloc.alloc_pfn(page_residues, residue);
  cache.access(page_base(extra_pfn) + offset, kHostAsid, false);
  int misses = 0;
  for (auto it = ev.members.rbegin(); it != ev.members.rend(); ++it)
    misses += cache.access(*it, kHostAsid, false).hit ? 0 : 1;
  if (misses != 1)
    throw std::runtime_error("eviction set self-eviction check failed");
  return ev;
}

inline void prime(CacheSim& cache, const std::vector<EvictionSet>& sets) {
  for (const auto& ev : sets)
    for (auto m : ev.members) cache.access(m, kHostAsid, false);
}

struct ProbeContext {
  Cycles threshold = 0;
  double p_noise = 0.0;
  std::mt19937_64* rng = nullptr;
};

// Walks each eviction set in reverse prime order, recording the summed
// access time per set. A set whose time exceeds the threshold is classified
// as touched by the victim. p_noise injects spurious misses into the
// measurement (L1–style noise), not into the cache state.
inline CacheTrace probe(CacheSim& cache, const std::vector<EvictionSet>& sets,
                        const ProbeContext& ctx) {
  if (sets.size() != CacheTrace::kSets)
    throw std::invalid_argument("probe expects 16 eviction sets");
  CacheTrace trace;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (std::size_t i = 0; i < sets.size(); ++i) {
    Cycles total = 0;
    for (auto it = sets[i].members.rbegin(); it != sets[i].members.rend(); ++it)
      total += cache.access(*it, kHostAsid, false).latency;
    if (ctx.rng && ctx.p_noise > 0.0 && uni(*ctx.rng) < ctx.p_noise) {
      total += cache.geometry().miss_latency - cache.geometry().hit_latency;
    }
    trace.latency[i] = total;
    trace.miss[i] = total > ctx.threshold ? 1 : 0;
  }
  return trace;
}

// Measures the all-hit and one-miss probe modes on a scratch cache with the
// same geometry and returns the midpoint between them.
inline Cycles calibrate_probe_threshold(const CacheGeometry& g) {
  CacheSim scratch(g);
  HostPageAllocator alloc;
  std::vector<EvictionSet> sets;
  for (std::uint32_t s = 0; s < CacheTrace::kSets; ++s)
    sets.push_back(build_eviction_set(scratch, s, alloc));

  ProbeContext raw{.threshold = ~0ull};
  prime(scratch, sets);
  Cycles hit_mode = probe(scratch, sets, raw).latency[0];

  prime(scratch, sets);
  // A victim access into set 0 evicts one of our lines.
  std::uint64_t victim_addr = 0;  // maps to set 0
  scratch.access(victim_addr, kGuestAsid, true);
  Cycles miss_mode = probe(scratch, sets, raw).latency[0];
  if (miss_mode <= hit_mode)
    throw std::logic_error("probe latency modes are not separable");
  return hit_mode + (miss_mode - hit_mode) / 2;
}

inline void write_trace_csv(std::ostream& out,
                            const std::vector<CacheTrace>& traces,
                            const std::vector<int>* truth = nullptr) {
  out << "ordinal";
  for (int s = 0; s < CacheTrace::kSets; ++s) out << ",set" << s;
  out << ",truth\n";
  for (std::size_t i = 0; i < traces.size(); ++i) {
    out << i;
    for (int s = 0; s < CacheTrace::kSets; ++s)
      out << ',' << int(traces[i].miss[s]);
    out << ',' << (truth ? (*truth)[i] : -1) << "\n";
  }
}

}  // namespace stepsim
