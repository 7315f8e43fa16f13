#pragma once

#include <bit>
#include <cstdint>
#include <istream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "stepsim/cache.hpp"
#include "stepsim/config.hpp"
#include "stepsim/types.hpp"

namespace stepsim {

enum class OpClass {
  nop,
  add,
  mul,
  div,
  rdrand,
  lar,
  load,
  store,
  fence,
  generic,
};

inline const char* op_class_name(OpClass c) {
  switch (c) {
    case OpClass::nop: return "nop";
    case OpClass::add: return "add";
    case OpClass::mul: return "mul";
    case OpClass::div: return "div";
    case OpClass::rdrand: return "rdrand";
    case OpClass::lar: return "lar";
    case OpClass::load: return "load";
    case OpClass::store: return "store";
    case OpClass::fence: return "fence";
    case OpClass::generic: return "generic";
  }
  return "?";
}

inline std::optional<OpClass> op_class_from_name(const std::string& s) {
  for (OpClass c : {OpClass::nop, OpClass::add, OpClass::mul, OpClass::div,
                    OpClass::rdrand, OpClass::lar, OpClass::load, OpClass::store,
                    OpClass::fence, OpClass::generic}) {
    if (s == op_class_name(c)) return c;
  }
  return std::nullopt;
}

struct Instruction {
  OpClass op = OpClass::nop;
  Cycles base_latency = 1;
  std::vector<std::uint64_t> mem;        // virtual addresses of data operands
  std::optional<std::uint64_t> operand_meta;  // e.g. dividend for div
  std::optional<int> table_id;           // lookup-table tag for noise modeling
  bool filler = false;                   // injected interrupt-handler filler

  void validate() const {
    if (base_latency < 1) throw std::invalid_argument("base latency must be >= 1");
    if (op == OpClass::fence && !mem.empty())
      throw std::invalid_argument("fence instructions have no mem operands");
  }
};

// The AMD divider rule: base cost plus one cycle per 9 bits of quotient.
// With the divisor pinned to all-ones, the quotient width tracks the
// dividend's high half, which is what operand_meta carries.
inline Cycles div_extra_cycles(std::uint64_t quotient) {
  int bits = std::bit_width(quotient);
  return static_cast<Cycles>((bits + 8) / 9);
}

// Per-class default execution latency; program builders bake this into
// Instruction::base_latency unless a program overrides it explicitly.
inline Cycles class_latency(OpClass op, const SimConfig& cfg) {
  switch (op) {
    case OpClass::nop: return cfg.lat_nop;
    case OpClass::add: return cfg.lat_add;
    case OpClass::mul: return cfg.lat_mul;
    case OpClass::div: return cfg.lat_div_base;
    case OpClass::rdrand: return cfg.lat_rdrand;
    case OpClass::lar: return cfg.lat_lar;
    case OpClass::load: return cfg.lat_load;
    case OpClass::store: return cfg.lat_store;
    case OpClass::fence: return cfg.lat_fence;
    case OpClass::generic: return cfg.lat_generic;
  }
  return 1;
}

inline Cycles execution_latency(const Instruction& in) {
  Cycles lat = in.base_latency;
  if (in.op == OpClass::div) lat += div_extra_cycles(in.operand_meta.value_or(0));
  return lat;
}

enum class Access { read, write, execute };

inline const char* access_name(Access a) {
  switch (a) {
    case Access::read: return "read";
    case Access::write: return "write";
    case Access::execute: return "execute";
  }
  return "?";
}

struct PageEntry {
  std::uint64_t gpa_page = 0;
  std::uint64_t hpa_page = 0;
  bool present = true;
  bool no_execute = false;
  bool writable = true;
  bool accessed = false;
  bool c_bit = true;  // guest pages are encrypted
};

struct Fault {
  Gpa gpa = 0;
  Access type = Access::read;
};

struct PageFaultEvent {
  Gpa gpa = 0;
  Access type = Access::read;
  std::size_t instruction_index = 0;
};

struct Translation {
  bool ok = false;
  Hpa paddr = 0;
  Cycles latency = 0;
  Cycles walk_penalty = 0;  // portion attributable to walk + accessed-bit
  bool c_bit = false;
  Fault fault;
};

class Tlb {
 public:
  struct Entry {
    std::uint64_t hpa_page = 0;
    bool no_execute = false;
    bool writable = false;
  };

  explicit Tlb(std::uint64_t capacity = 0) : capacity_(capacity) {}

  const Entry* lookup(std::uint64_t gpa_page) const {
    auto it = entries_.find(gpa_page);
    return it == entries_.end() ? nullptr : &it->second;
  }

  void insert(std::uint64_t gpa_page, Entry e) {
    if (capacity_ && entries_.size() >= capacity_ &&
        entries_.find(gpa_page) == entries_.end()) {
      entries_.erase(entries_.begin());  // capacity knob; policy irrelevant here
    }
    entries_[gpa_page] = e;
  }

  void invalidate(std::uint64_t gpa_page) { entries_.erase(gpa_page); }
  void flush() { entries_.clear(); }
  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }

 private:
  std::uint64_t capacity_;
  std::unordered_map<std::uint64_t, Entry> entries_;
};

struct GuestProgram {
  std::vector<Instruction> instructions;
  std::vector<Gpa> code_gpa;  // one entry per instruction
  std::size_t entry_index = 0;

  std::size_t size() const { return instructions.size(); }

  void validate() const {
    if (code_gpa.size() != instructions.size())
      throw std::invalid_argument("code layout must cover every instruction");
    for (auto& in : instructions) in.validate();
  }
};

struct RetireRecord {
  std::size_t index = 0;
  Cycles issue_time = 0;
  Cycles retire_time = 0;
  Cycles walk_penalties = 0;
  std::optional<Fault> faulted;
  bool filler = false;
};

struct StepOutcome {
  bool retired = false;
  RetireRecord record;
  std::optional<Fault> fault;
};

// Guest VM: instruction stream plus the nested translation level the
// attacker manipulates. Guest-virtual equals guest-physical; page table
// entries map GPA pages to HPA pages.
class Vm {
 public:
  Vm(GuestProgram prog, const SimConfig& cfg)
      : prog_(std::move(prog)), cfg_(&cfg), tlb_(cfg.tlb_capacity) {
    prog_.validate();
    cursor_ = prog_.entry_index;
  }

  const GuestProgram& program() const { return prog_; }
  std::size_t cursor() const { return cursor_; }
  bool done() const { return cursor_ >= prog_.size(); }
  Tlb& tlb() { return tlb_; }
  const Tlb& tlb() const { return tlb_; }

  void map_page(PageEntry e) { pages_[e.gpa_page] = e; }

  PageEntry& page(std::uint64_t gpa_page) {
    auto it = pages_.find(gpa_page);
    if (it == pages_.end())
      throw std::out_of_range("unknown guest page 0x" +
                              to_hex_page(gpa_page));
    return it->second;
  }

  bool has_page(std::uint64_t gpa_page) const {
    return pages_.count(gpa_page) != 0;
  }

  const std::unordered_map<std::uint64_t, PageEntry>& pages() const {
    return pages_;
  }

  void flush_tlb() { tlb_.flush(); }

  void reset_accessed_bit(Gpa gpa) { page(page_of(gpa)).accessed = false; }

  // Permission-bit changes go through these so the TLB stays coherent.
  void set_present(Gpa gpa, bool v) {
    auto& e = page(page_of(gpa));
    e.present = v;
    tlb_.invalidate(e.gpa_page);
  }
  void set_no_execute(Gpa gpa, bool v) {
    auto& e = page(page_of(gpa));
    e.no_execute = v;
    tlb_.invalidate(e.gpa_page);
  }
  void set_writable(Gpa gpa, bool v) {
    auto& e = page(page_of(gpa));
    e.writable = v;
    tlb_.invalidate(e.gpa_page);
  }

  Translation translate(std::uint64_t vaddr, Access type) {
    const std::uint64_t gpa_page = page_of(vaddr);
    auto it = pages_.find(gpa_page);
    if (it == pages_.end())
      throw std::out_of_range("translate: vaddr outside mapped range");
    PageEntry& pe = it->second;

    Translation tr;
    if (const Tlb::Entry* te = tlb_.lookup(gpa_page)) {
      if (!permitted(type, te->no_execute, te->writable)) {
        tr.fault = {page_base(gpa_page), type};
        return tr;
      }
      tr.ok = true;
      tr.paddr = page_base(te->hpa_page) | (vaddr & (kPageSize - 1));
      tr.latency = cfg_->tlb_hit_latency;
      tr.c_bit = pe.c_bit;
      return tr;
    }

    if (!pe.present || !permitted(type, pe.no_execute, pe.writable)) {
      tr.fault = {page_base(gpa_page), type};
      return tr;
    }
    tr.ok = true;
    tr.paddr = page_base(pe.hpa_page) | (vaddr & (kPageSize - 1));
    tr.latency = cfg_->tlb_hit_latency + cfg_->page_walk_latency;
    tr.walk_penalty = cfg_->page_walk_latency;
    if (!pe.accessed) {
      tr.latency += cfg_->abit_penalty;
      tr.walk_penalty += cfg_->abit_penalty;
      pe.accessed = true;
    }
    tlb_.insert(gpa_page, {pe.hpa_page, pe.no_execute, pe.writable});
    return tr;
  }

  // Marks the next entry's first instruction so it re-translates its own
  // code page even without a page crossing.
  void begin_entry() { prev_code_page_ = kNoPage; }

  // Executes the instruction at the cursor. On success the cursor advances
  // and the clock covers translation, cache and execution latency. On a
  // fault nothing retires and the cursor stays put.
  StepOutcome step_instruction(Clock& clock, CacheSim& cache) {
    if (done()) throw std::out_of_range("cursor past end of program");
    const Instruction& in = prog_.instructions[cursor_];
    const Gpa code = prog_.code_gpa[cursor_];

    RetireRecord rec;
    rec.index = cursor_;
    rec.issue_time = clock.now();
    rec.filler = in.filler;
    Cycles latency = 0;

    if (prev_code_page_ == kNoPage || page_of(code) != prev_code_page_) {
      Translation tr = translate(code, Access::execute);
      if (!tr.ok) return fault_outcome(tr.fault);
      latency += tr.latency;
      rec.walk_penalties += tr.walk_penalty;
      prev_code_page_ = page_of(code);
    }

    for (std::uint64_t vaddr : in.mem) {
      Access acc = in.op == OpClass::store ? Access::write : Access::read;
      Translation tr = translate(vaddr, acc);
      if (!tr.ok) {
        clock.advance(latency);  // work done before the fault still took time
        return fault_outcome(tr.fault);
      }
      latency += tr.latency;
      rec.walk_penalties += tr.walk_penalty;
      latency += cache.access(tr.paddr, kGuestAsid, tr.c_bit).latency;
    }

    latency += execution_latency(in);
    clock.advance(latency);
    rec.retire_time = clock.now();
    ++cache.counters().guest_retired_instructions;
    ++cursor_;
    return {true, rec, std::nullopt};
  }

  void set_cursor(std::size_t c) { cursor_ = c; }

 private:
  static constexpr std::uint64_t kNoPage = ~0ull;

  static bool permitted(Access type, bool no_execute, bool writable) {
    if (type == Access::execute && no_execute) return false;
    if (type == Access::write && !writable) return false;
    return true;
  }

  static std::string to_hex_page(std::uint64_t page) {
    std::ostringstream os;
    os << std::hex << page;
    return os.str();
  }

  StepOutcome fault_outcome(Fault f) {
    StepOutcome out;
    out.fault = f;
    return out;
  }

  GuestProgram prog_;
  const SimConfig* cfg_;
  std::unordered_map<std::uint64_t, PageEntry> pages_;
  Tlb tlb_;
  std::size_t cursor_ = 0;
  std::uint64_t prev_code_page_ = kNoPage;
};

// Touches the cache lines of not-yet-retired future loads to the same
// lookup table, modeling out-of-order execution ahead of the stepping
// interrupt. A fence between the retired instruction and a future load
// stops the trail. The window counts same-table accesses, matching the
// observed trail depth in per-table traces.
inline std::vector<std::uint64_t> inject_ooo_noise(Vm& vm, CacheSim& cache,
                                                   std::size_t retired_index,
                                                   const SimConfig& cfg,
                                                   std::mt19937_64& rng) {
  std::vector<std::uint64_t> touched;
  if (cfg.ooo_window == 0 || cfg.p_ooo <= 0.0) return touched;
  const auto& prog = vm.program();
  if (retired_index >= prog.size()) return touched;
  std::optional<int> table = prog.instructions[retired_index].table_id;
  if (!table) return touched;

  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::uint32_t seen = 0;
  for (std::size_t i = retired_index + 1;
       i < prog.size() && i <= retired_index + cfg.ooo_scan_limit; ++i) {
    const Instruction& in = prog.instructions[i];
    if (in.op == OpClass::fence) break;
    if (in.op != OpClass::load || in.table_id != table) continue;
    if (++seen > cfg.ooo_window) break;
    if (uni(rng) >= cfg.p_ooo) continue;
    for (std::uint64_t vaddr : in.mem) {
      // Speculative fill: translation faults or tracked pages stop the
      // prefetch rather than raising an event.
      std::uint64_t gpa_page = page_of(vaddr);
      if (!vm.has_page(gpa_page)) continue;
      Translation tr = vm.translate(vaddr, Access::read);
      if (!tr.ok) continue;
      cache.access(tr.paddr, kGuestAsid, tr.c_bit);
      touched.push_back(tr.paddr);
    }
  }
  return touched;
}

// Line-oriented program loader:
//   <opcode-class> [lat=<n>] [mem=<hexaddr>,...] [table=<id>] [div=<hexvalue>]
inline GuestProgram load_program(std::istream& in, const SimConfig& cfg,
                                 Gpa code_base, std::uint32_t instr_bytes = 4) {
  GuestProgram prog;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream is(line);
    std::string word;
    if (!(is >> word)) continue;
    auto cls = op_class_from_name(word);
    if (!cls)
      throw std::invalid_argument("program line " + std::to_string(lineno) +
                                  ": unknown opcode class '" + word + "'");
    Instruction instr;
    instr.op = *cls;
    instr.base_latency = class_latency(*cls, cfg);
    while (is >> word) {
      auto eq = word.find('=');
      if (eq == std::string::npos)
        throw std::invalid_argument("program line " + std::to_string(lineno) +
                                    ": expected key=value, got '" + word + "'");
      std::string key = word.substr(0, eq);
      std::string value = word.substr(eq + 1);
      if (key == "lat") {
        instr.base_latency = std::stoull(value);
      } else if (key == "mem") {
        std::istringstream ms(value);
        std::string addr;
        while (std::getline(ms, addr, ','))
          instr.mem.push_back(std::stoull(addr, nullptr, 16));
      } else if (key == "table") {
        instr.table_id = std::stoi(value);
      } else if (key == "div") {
        instr.operand_meta = std::stoull(value, nullptr, 16);
      } else {
        throw std::invalid_argument("program line " + std::to_string(lineno) +
                                    ": unknown attribute '" + key + "'");
      }
    }
    instr.validate();
    prog.instructions.push_back(std::move(instr));
    prog.code_gpa.push_back(code_base +
                            (prog.instructions.size() - 1) * instr_bytes);
  }
  return prog;
}

// Convenience: a program of n identical instructions laid out from code_base.
inline GuestProgram make_slide(OpClass cls, std::size_t n, const SimConfig& cfg,
                               Gpa code_base, std::uint32_t instr_bytes = 4,
                               std::optional<std::uint64_t> meta = std::nullopt) {
  GuestProgram prog;
  prog.instructions.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    Instruction in;
    in.op = cls;
    in.base_latency = class_latency(cls, cfg);
    in.operand_meta = meta;
    prog.instructions.push_back(in);
    prog.code_gpa.push_back(code_base + i * instr_bytes);
  }
  return prog;
}

// Maps every page touched by the program (identity GPA->HPA), plus any
// extra data pages the caller lists.
inline void map_program_pages(Vm& vm, const GuestProgram& prog,
                              const std::vector<Gpa>& data_pages = {}) {
  auto add = [&](std::uint64_t page) {
    if (!vm.has_page(page)) vm.map_page({page, page});
  };
  for (Gpa g : prog.code_gpa) add(page_of(g));
  for (const auto& in : prog.instructions)
    for (auto vaddr : in.mem) add(page_of(vaddr));
  for (Gpa g : data_pages) add(page_of(g));
}

}  // namespace stepsim
