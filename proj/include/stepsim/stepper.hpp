#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <stdexcept>
#include <unordered_map>
#include <vector>

#include "stepsim/cache.hpp"
#include "stepsim/config.hpp"
#include "stepsim/events.hpp"
#include "stepsim/guest.hpp"
#include "stepsim/types.hpp"

namespace stepsim {

struct StepperKnobs {
  std::uint64_t timer_value = 51;
  Cycles tick_scale = 30;
  bool flush_tlb = true;
  bool reset_a_bit = false;
  bool suppress_virtual_timer = true;
  bool do_cache_attack = false;
  Cycles countermeasure_min_cycles = 0;  // 0 = off
  std::uint32_t countermeasure_max_extra = 32;
  double entry_mean = 1500.0;
  double entry_stddev = 40.0;
  Cycles exit_overhead = 900;

  static StepperKnobs from_config(const SimConfig& c) {
    StepperKnobs k;
    k.timer_value = c.timer_value;
    k.tick_scale = c.tick_scale;
    k.flush_tlb = c.flush_tlb;
    k.reset_a_bit = c.reset_a_bit;
    k.suppress_virtual_timer = c.suppress_virtual_timer;
    k.countermeasure_min_cycles = c.countermeasure_min_cycles;
    k.countermeasure_max_extra = c.countermeasure_max_extra;
    k.entry_mean = c.entry_mean;
    k.entry_stddev = c.entry_stddev;
    k.exit_overhead = c.exit_overhead;
    return k;
  }

  void validate() const {
    if (timer_value == 0) throw std::invalid_argument("timer value must be > 0");
    if (tick_scale == 0) throw std::invalid_argument("tick scale must be >= 1");
  }
};

// Prime+probe targets: per table id, the 16 eviction sets covering it.
struct AttackTargets {
  std::unordered_map<int, std::vector<EvictionSet>> sets_by_table;
  Cycles threshold = 0;
  int armed_table = -1;  // -1 = nothing armed

  bool armed() const {
    return armed_table >= 0 && sets_by_table.count(armed_table) != 0;
  }
};

// One simulated machine: guest VM, shared L2, one clock, plus the
// attacker-side measurement state. Owned by exactly one stepping loop.
struct Machine {
  SimConfig cfg;
  Clock clock;
  CacheSim cache;
  Vm vm;
  std::mt19937_64 rng_entry, rng_ooo, rng_noise, rng_cm;
  AttackTargets attack;

  // virtual-timer injection state
  std::uint32_t handler_remaining = 0;
  Gpa handler_page;

  Machine(const SimConfig& cfg_in, GuestProgram prog)
      : cfg(cfg_in),
        cache(CacheGeometry{64, cfg_in.cache_sets, cfg_in.cache_ways,
                            cfg_in.cache_hit_latency, cfg_in.cache_miss_latency}),
        vm(std::move(prog), cfg),
        rng_entry(make_rng(cfg_in.seed, "entry-jitter")),
        rng_ooo(make_rng(cfg_in.seed, "ooo")),
        rng_noise(make_rng(cfg_in.seed, "probe-noise")),
        rng_cm(make_rng(cfg_in.seed, "countermeasure")),
        handler_page(0xee000000ull >> 12) {
    map_program_pages(vm, vm.program());
    if (!vm.has_page(handler_page)) vm.map_page({handler_page, handler_page});
  }

  ProbeContext probe_context() {
    return {attack.threshold, cfg.p_noise, &rng_noise};
  }
};

namespace detail {

inline Cycles sample_entry_overhead(StepperKnobs const& k, std::mt19937_64& rng) {
  if (k.entry_stddev <= 0.0)
    return static_cast<Cycles>(std::llround(std::max(0.0, k.entry_mean)));
  std::normal_distribution<double> d(k.entry_mean, k.entry_stddev);
  return static_cast<Cycles>(std::llround(std::max(0.0, d(rng))));
}

// Executes one injected-interrupt-handler filler instruction. These retire
// like guest instructions and bump the retired counter, but the program
// cursor does not move.
inline void execute_filler(Machine& m) {
  Translation tr = m.vm.translate(page_base(m.handler_page), Access::execute);
  Cycles lat = tr.ok ? tr.latency : 0;
  m.clock.advance(lat + m.cfg.lat_nop);
  ++m.cache.counters().guest_retired_instructions;
}

}  // namespace detail

// Arms the timer, enters the VM, and classifies the exit. Instruction k is
// retired iff its issue time is <= the timer deadline; the in-flight
// instruction completes before the interrupt is taken. A guest fault exits
// immediately and is carried in the returned event.
inline StepEvent run_step(Machine& m, const StepperKnobs& knobs) {
  knobs.validate();
  StepEvent ev;

  if (knobs.flush_tlb) m.vm.flush_tlb();
  if (knobs.reset_a_bit && !m.vm.done())
    m.vm.reset_accessed_bit(m.vm.program().code_gpa[m.vm.cursor()]);
  if (knobs.do_cache_attack && m.attack.armed())
    prime(m.cache, m.attack.sets_by_table.at(m.attack.armed_table));

  ev.pre_ts = m.clock.now();
  const Cycles deadline = ev.pre_ts + knobs.timer_value * knobs.tick_scale;
  const Cycles entry = detail::sample_entry_overhead(knobs, m.rng_entry);
  m.clock.advance(entry);
  const Cycles entry_end = m.clock.now();
  m.vm.begin_entry();

  ev.first_index = m.vm.cursor();
  const std::uint64_t counter_before =
      m.cache.counters().guest_retired_instructions;
  std::uint64_t payload_retired = 0;
  bool timer_fired = false;

  const bool countermeasure_hit =
      knobs.countermeasure_min_cycles > 0 &&
      deadline < entry_end + knobs.countermeasure_min_cycles;

  if (countermeasure_hit) {
    // TDX-style randomized stepping: an interrupt arriving too soon after
    // entry still lets the guest retire a random burst of instructions.
    std::uniform_int_distribution<std::uint32_t> d(
        1, std::max(1u, knobs.countermeasure_max_extra));
    std::uint32_t burst = d(m.rng_cm);
    for (std::uint32_t i = 0; i < burst && !m.vm.done(); ++i) {
      StepOutcome out = m.vm.step_instruction(m.clock, m.cache);
      if (out.fault) {
        ev.fault = PageFaultEvent{out.fault->gpa, out.fault->type, m.vm.cursor()};
        break;
      }
      ++payload_retired;
    }
    timer_fired = true;
  } else {
    // Serve a previously injected virtual timer interrupt before any
    // payload instruction runs.
    while (m.handler_remaining > 0 && m.clock.now() <= deadline) {
      detail::execute_filler(m);
      --m.handler_remaining;
      ++ev.filler_count;
    }
    while (!m.vm.done() && m.handler_remaining == 0 &&
           m.clock.now() <= deadline) {
      StepOutcome out = m.vm.step_instruction(m.clock, m.cache);
      if (out.fault) {
        ev.fault = PageFaultEvent{out.fault->gpa, out.fault->type, m.vm.cursor()};
        break;
      }
      ++payload_retired;
    }
    timer_fired = !ev.fault && (!m.vm.done() || m.clock.now() >= deadline);
  }

  ev.retired_count = payload_retired;
  ev.step_size = m.cache.counters().guest_retired_instructions - counter_before;
  ev.vm_done = m.vm.done();

  // Out-of-order trails: future loads of the interrupted stream touch the
  // cache before the exit completes. Zero-steps leave no trace.
  if (!ev.fault && payload_retired > 0 && !m.vm.done())
    inject_ooo_noise(m.vm, m.cache, m.vm.cursor() - 1, m.cfg, m.rng_ooo);

  // The exit happens at the interrupt (or fault) boundary, never before the
  // timer deadline on timer exits.
  if (!ev.fault && timer_fired && m.clock.now() < deadline)
    m.clock.advance(deadline - m.clock.now());
  m.clock.advance(knobs.exit_overhead);
  ev.post_ts = m.clock.now();
  ev.latency = ev.post_ts - ev.pre_ts;

  if (!knobs.suppress_virtual_timer && timer_fired && !ev.fault)
    m.handler_remaining = m.cfg.handler_slide;

  if (knobs.do_cache_attack && m.attack.armed()) {
    auto ctx = m.probe_context();
    ev.cache_trace =
        probe(m.cache, m.attack.sets_by_table.at(m.attack.armed_table), ctx);
  }
  return ev;
}

// Runs the guest without a timer until it faults or completes. Used by the
// page-fault tracking phases.
inline StepEvent free_run(Machine& m, const StepperKnobs& knobs,
                          std::uint64_t max_instructions = ~0ull) {
  StepEvent ev;
  ev.pre_ts = m.clock.now();
  m.clock.advance(detail::sample_entry_overhead(knobs, m.rng_entry));
  m.vm.begin_entry();
  ev.first_index = m.vm.cursor();
  const std::uint64_t counter_before =
      m.cache.counters().guest_retired_instructions;
  std::uint64_t retired = 0;
  while (!m.vm.done() && retired < max_instructions) {
    StepOutcome out = m.vm.step_instruction(m.clock, m.cache);
    if (out.fault) {
      ev.fault = PageFaultEvent{out.fault->gpa, out.fault->type, m.vm.cursor()};
      break;
    }
    ++retired;
  }
  ev.retired_count = retired;
  ev.step_size = m.cache.counters().guest_retired_instructions - counter_before;
  ev.vm_done = m.vm.done();
  m.clock.advance(knobs.exit_overhead);
  ev.post_ts = m.clock.now();
  ev.latency = ev.post_ts - ev.pre_ts;
  return ev;
}

// --- timer calibration -------------------------------------------------------

struct CalibrationRow {
  std::uint64_t timer = 0;
  std::uint64_t zero = 0;
  std::uint64_t single = 0;
  std::uint64_t multi = 0;
  double mean_multi = 0.0;
  bool completed = false;
};

struct CalibrationResult {
  std::uint64_t timer_value = 0;
  std::vector<CalibrationRow> rows;
};

struct CalibrationOptions {
  std::uint64_t start_timer = 0;        // 0 = derive from entry mean
  std::uint64_t zero_streak_abort = 20000;
  std::uint64_t max_entries = 5'000'000;
};

// Sweeps the timer downward from an over-estimate, running the full slide
// at each candidate, until a further decrease yields only zero-steps.
// Returns the smallest candidate whose run completed with at least one
// single-step.
inline CalibrationResult calibrate_timer(
    const std::function<Machine()>& machine_factory, StepperKnobs knobs,
    CalibrationOptions opt = {}) {
  std::uint64_t start = opt.start_timer;
  if (start == 0)
    start = static_cast<std::uint64_t>(
                (knobs.entry_mean + 6.0 * knobs.entry_stddev) / knobs.tick_scale) +
            2;

  CalibrationResult result;
  for (std::uint64_t timer = start; timer >= 1; --timer) {
    knobs.timer_value = timer;
    Machine m = machine_factory();
    CalibrationRow row;
    row.timer = timer;
    std::uint64_t zero_streak = 0, entries = 0, multi_sum = 0;
    while (!m.vm.done() && entries < opt.max_entries &&
           zero_streak < opt.zero_streak_abort) {
      StepEvent ev = run_step(m, knobs);
      ++entries;
      if (ev.step_size == 0) {
        ++row.zero;
        ++zero_streak;
      } else {
        zero_streak = 0;
        if (ev.step_size == 1) {
          ++row.single;
        } else {
          ++row.multi;
          multi_sum += ev.step_size;
        }
      }
    }
    row.completed = m.vm.done();
    row.mean_multi = row.multi ? double(multi_sum) / double(row.multi) : 0.0;
    result.rows.push_back(row);
    if (row.single == 0 && row.multi == 0) break;  // only zero-steps: stop
  }

  for (auto it = result.rows.rbegin(); it != result.rows.rend(); ++it) {
    if (it->completed && it->single >= 1) {
      result.timer_value = it->timer;
      return result;
    }
  }
  throw std::runtime_error("calibration: no timer value retires any instruction");
}

inline void write_calibration_csv(std::ostream& out,
                                  const std::vector<CalibrationRow>& rows) {
  out << "timer,zero,single,multi,mean-multi\n";
  for (const auto& r : rows)
    out << r.timer << ',' << r.zero << ',' << r.single << ',' << r.multi << ','
        << r.mean_multi << "\n";
}

}  // namespace stepsim
