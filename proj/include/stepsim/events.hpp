#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <vector>

#include "stepsim/cache.hpp"
#include "stepsim/guest.hpp"

namespace stepsim {

// One VM exit observed by the supervisor. step_size is the retired
// instruction counter delta across the entry (filler included); the
// instruction-indices range covers only payload instructions.
struct StepEvent {
  std::uint64_t step_size = 0;
  Cycles latency = 0;  // post_ts - pre_ts
  Cycles pre_ts = 0;
  Cycles post_ts = 0;
  std::optional<CacheTrace> cache_trace;
  std::optional<PageFaultEvent> fault;
  std::size_t first_index = 0;
  std::uint64_t retired_count = 0;
  std::uint64_t filler_count = 0;
  bool vm_done = false;
};

enum class EventKind : std::uint8_t { page_fault = 0, single_step = 1 };

struct Event {
  std::uint64_t sequence = 0;
  EventKind kind = EventKind::single_step;
  StepEvent step;
};

enum class RunMode : std::uint8_t { single_step = 0, free_run = 1 };

enum class TrackMode : std::uint8_t { access = 0, execute = 1, write = 2 };

struct TrackCommand {
  Gpa gpa = 0;
  TrackMode mode = TrackMode::access;
  bool track = true;  // false = untrack
};

// Deferred reconfiguration, applied by the supervisor at the next VM
// resume. Scalar fields are last-writer-wins; tracking commands queue up.
struct ConfigPatch {
  std::optional<std::uint64_t> timer_value;
  std::optional<bool> flush_tlb;
  std::optional<bool> reset_a_bit;
  std::optional<bool> suppress_virtual_timer;
  std::optional<Cycles> countermeasure_min_cycles;
  std::optional<bool> do_cache_attack;
  std::optional<int> attack_table;
  std::optional<RunMode> mode;
  std::vector<TrackCommand> tracking;
  bool stop = false;

  void merge(const ConfigPatch& newer) {
    if (newer.timer_value) timer_value = newer.timer_value;
    if (newer.flush_tlb) flush_tlb = newer.flush_tlb;
    if (newer.reset_a_bit) reset_a_bit = newer.reset_a_bit;
    if (newer.suppress_virtual_timer)
      suppress_virtual_timer = newer.suppress_virtual_timer;
    if (newer.countermeasure_min_cycles)
      countermeasure_min_cycles = newer.countermeasure_min_cycles;
    if (newer.do_cache_attack) do_cache_attack = newer.do_cache_attack;
    if (newer.attack_table) attack_table = newer.attack_table;
    if (newer.mode) mode = newer.mode;
    tracking.insert(tracking.end(), newer.tracking.begin(), newer.tracking.end());
    stop = stop || newer.stop;
  }

  bool empty() const {
    return !timer_value && !flush_tlb && !reset_a_bit &&
           !suppress_virtual_timer && !countermeasure_min_cycles &&
           !do_cache_attack && !attack_table && !mode && tracking.empty() &&
           !stop;
  }
};

// --- binary event log -------------------------------------------------------
// Record framing: sequence u64 LE, kind u8, payload length u32 LE, payload.

namespace detail {

inline void put_u64(std::vector<std::uint8_t>& b, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) b.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline std::uint64_t get_u64(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(p[i]) << (8 * i);
  return v;
}
inline std::uint32_t get_u32(const std::uint8_t* p) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= std::uint32_t(p[i]) << (8 * i);
  return v;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_step_event(const StepEvent& e) {
  std::vector<std::uint8_t> b;
  detail::put_u64(b, e.step_size);
  detail::put_u64(b, e.latency);
  detail::put_u64(b, e.pre_ts);
  detail::put_u64(b, e.post_ts);
  detail::put_u64(b, e.first_index);
  detail::put_u64(b, e.retired_count);
  detail::put_u64(b, e.filler_count);
  std::uint8_t flags = 0;
  if (e.cache_trace) flags |= 1;
  if (e.fault) flags |= 2;
  if (e.vm_done) flags |= 4;
  b.push_back(flags);
  if (e.cache_trace) {
    for (int s = 0; s < CacheTrace::kSets; ++s) {
      detail::put_u32(b, static_cast<std::uint32_t>(e.cache_trace->latency[s]));
      b.push_back(e.cache_trace->miss[s]);
    }
  }
  if (e.fault) {
    detail::put_u64(b, e.fault->gpa);
    b.push_back(static_cast<std::uint8_t>(e.fault->type));
    detail::put_u64(b, e.fault->instruction_index);
  }
  return b;
}

inline StepEvent decode_step_event(const std::vector<std::uint8_t>& b) {
  if (b.size() < 57) throw std::invalid_argument("truncated step event");
  StepEvent e;
  const std::uint8_t* p = b.data();
  e.step_size = detail::get_u64(p); p += 8;
  e.latency = detail::get_u64(p); p += 8;
  e.pre_ts = detail::get_u64(p); p += 8;
  e.post_ts = detail::get_u64(p); p += 8;
  e.first_index = detail::get_u64(p); p += 8;
  e.retired_count = detail::get_u64(p); p += 8;
  e.filler_count = detail::get_u64(p); p += 8;
  std::uint8_t flags = *p++;
  if (flags & 1) {
    CacheTrace t;
    for (int s = 0; s < CacheTrace::kSets; ++s) {
      t.latency[s] = detail::get_u32(p); p += 4;
      t.miss[s] = *p++;
    }
    e.cache_trace = t;
  }
  if (flags & 2) {
    PageFaultEvent f;
    f.gpa = detail::get_u64(p); p += 8;
    f.type = static_cast<Access>(*p++);
    f.instruction_index = detail::get_u64(p); p += 8;
    e.fault = f;
  }
  e.vm_done = flags & 4;
  return e;
}

inline void write_event_record(std::ostream& out, const Event& ev) {
  std::vector<std::uint8_t> payload = encode_step_event(ev.step);
  std::vector<std::uint8_t> header;
  detail::put_u64(header, ev.sequence);
  header.push_back(static_cast<std::uint8_t>(ev.kind));
  detail::put_u32(header, static_cast<std::uint32_t>(payload.size()));
  out.write(reinterpret_cast<const char*>(header.data()),
            static_cast<std::streamsize>(header.size()));
  out.write(reinterpret_cast<const char*>(payload.data()),
            static_cast<std::streamsize>(payload.size()));
}

inline std::optional<Event> read_event_record(std::istream& in) {
  std::uint8_t header[13];
  in.read(reinterpret_cast<char*>(header), sizeof header);
  if (in.gcount() == 0) return std::nullopt;
  if (in.gcount() != sizeof header)
    throw std::invalid_argument("truncated event record header");
  Event ev;
  ev.sequence = detail::get_u64(header);
  ev.kind = static_cast<EventKind>(header[8]);
  std::uint32_t len = detail::get_u32(header + 9);
  std::vector<std::uint8_t> payload(len);
  in.read(reinterpret_cast<char*>(payload.data()), len);
  if (in.gcount() != static_cast<std::streamsize>(len))
    throw std::invalid_argument("truncated event record payload");
  ev.step = decode_step_event(payload);
  return ev;
}

}  // namespace stepsim
