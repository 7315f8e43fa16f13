#pragma once

#include <functional>
#include <optional>
#include <stdexcept>
#include <vector>

#include "stepsim/event_channel.hpp"
#include "stepsim/pf_tracker.hpp"
#include "stepsim/stepper.hpp"

namespace stepsim {

// Thin controller-side convenience wrapper around the channel.
class Controller {
 public:
  explicit Controller(EventChannel& ch) : ch_(&ch) {}

  std::optional<Event> wait() { return ch_->wait_event(); }
  std::optional<Event> poll() { return ch_->poll_event(); }
  void ack(const Event& ev) { ch_->ack_event(ev.sequence); }
  void config(const ConfigPatch& p) { ch_->submit_config(p); }
  void close() { ch_->close(); }

 private:
  EventChannel* ch_;
};

// The supervisor pump: applies deferred configuration at every resume, runs
// the VM (stepping or free-running), and publishes each exit through the
// channel, blocking until acknowledged.
class Supervisor {
 public:
  Supervisor(Machine& m, EventChannel& ch, StepperKnobs knobs,
             RunMode mode = RunMode::single_step)
      : m_(&m), ch_(&ch), tracker_(m.vm), knobs_(knobs), mode_(mode) {}

  PfTracker& tracker() { return tracker_; }
  const StepperKnobs& knobs() const { return knobs_; }

  // Runs until the VM completes, the channel closes, a stop is requested,
  // or the predicate says enough.
  void run(const std::function<bool(const StepEvent&)>& until = nullptr) {
    while (!stop_) {
      if (auto p = ch_->take_config()) apply(*p);
      if (stop_) break;
      StepEvent ev = mode_ == RunMode::single_step ? run_step(*m_, knobs_)
                                                   : free_run(*m_, knobs_);
      EventKind kind = ev.fault ? EventKind::page_fault : EventKind::single_step;
      bool done = ev.vm_done;
      if (ch_->send_event(kind, ev) == EventChannel::SendResult::closed) break;
      if (done) break;
      if (until && until(ev)) break;
    }
  }

  void apply(const ConfigPatch& p) {
    if (p.timer_value) knobs_.timer_value = *p.timer_value;
    if (p.flush_tlb) knobs_.flush_tlb = *p.flush_tlb;
    if (p.reset_a_bit) knobs_.reset_a_bit = *p.reset_a_bit;
    if (p.suppress_virtual_timer)
      knobs_.suppress_virtual_timer = *p.suppress_virtual_timer;
    if (p.countermeasure_min_cycles)
      knobs_.countermeasure_min_cycles = *p.countermeasure_min_cycles;
    if (p.do_cache_attack) knobs_.do_cache_attack = *p.do_cache_attack;
    if (p.attack_table) m_->attack.armed_table = *p.attack_table;
    if (p.mode) mode_ = *p.mode;
    for (const auto& cmd : p.tracking) tracker_.apply(cmd);
    if (p.stop) stop_ = true;
  }

 private:
  Machine* m_;
  EventChannel* ch_;
  PfTracker tracker_;
  StepperKnobs knobs_;
  RunMode mode_;
  bool stop_ = false;
};

// Publishes a stream of step events until the predicate fires or the VM
// completes. Knob changes submitted while an event is pending take effect
// on the next step.
inline void single_step_region(Machine& m, EventChannel& ch, StepperKnobs knobs,
                               const std::function<bool(const StepEvent&)>& until) {
  Supervisor sup(m, ch, knobs);
  sup.run(until);
}

// ---------------------------------------------------------------------------
// Controller-side procedures built on the event protocol.

// Captures a page-fault trace with a one-page sliding window: every fault
// is logged, the faulting page is untracked for progress and the
// previously faulted page re-tracked. Returns page offsets relative to the
// text base. The caller must have tracked all code pages and switched the
// supervisor to free-running before the VM starts.
inline std::vector<std::uint64_t> run_fingerprint_capture(Controller& c,
                                                          Gpa text_base) {
  std::vector<std::uint64_t> offsets;
  std::optional<Gpa> prev;
  while (auto ev = c.wait()) {
    if (ev->step.fault) {
      Gpa gpa = ev->step.fault->gpa;
      offsets.push_back(page_of(gpa) - page_of(text_base));
      ConfigPatch p;
      p.tracking.push_back({gpa, TrackMode::execute, false});
      if (prev) p.tracking.push_back({*prev, TrackMode::execute, true});
      prev = gpa;
      c.config(p);
      c.ack(*ev);
      continue;
    }
    bool done = ev->step.vm_done;
    c.ack(*ev);
    if (done) return offsets;
  }
  throw std::runtime_error("fingerprint capture: channel closed early");
}

// Locates the data page behind the next instruction by sacrificing it:
// all candidate data pages are non-present, each fault re-enables its page,
// and the page faulting last before the instruction finally retires is the
// answer. The supervisor must be in single-step mode positioned at the
// instruction.
inline Gpa locate_table(Controller& c, const std::vector<Gpa>& data_pages) {
  ConfigPatch arm;
  for (Gpa g : data_pages) arm.tracking.push_back({g, TrackMode::access, true});
  c.config(arm);

  std::optional<Gpa> last_fault;
  while (auto ev = c.wait()) {
    if (ev->step.fault) {
      last_fault = ev->step.fault->gpa;
      ConfigPatch p;
      p.tracking.push_back({*last_fault, TrackMode::access, false});
      c.config(p);
      c.ack(*ev);
      continue;
    }
    if (ev->step.step_size >= 1) {  // the instruction retired
      ConfigPatch cleanup;
      for (Gpa g : data_pages)
        cleanup.tracking.push_back({g, TrackMode::access, false});
      c.config(cleanup);
      c.ack(*ev);
      if (!last_fault)
        throw std::runtime_error("locate_table: instruction performs no data access");
      return *last_fault;
    }
    c.ack(*ev);  // zero-step: retry
  }
  throw std::runtime_error("locate_table: channel closed early");
}

}  // namespace stepsim
