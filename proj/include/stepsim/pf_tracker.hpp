#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "stepsim/events.hpp"
#include "stepsim/guest.hpp"
#include "stepsim/victim.hpp"

namespace stepsim {

// Supervisor-side page tracking: adjusts the permission bits that force
// guest page faults and restores the original bits on untrack. The TLB is
// kept coherent by the Vm permission setters.
class PfTracker {
 public:
  explicit PfTracker(Vm& vm) : vm_(&vm) {}

  void track(Gpa gpa, TrackMode mode) {
    std::uint64_t page = page_of(gpa);
    PageEntry& pe = vm_->page(page);
    if (!tracked_.count(page))
      tracked_[page] = {pe.present, pe.no_execute, pe.writable};
    switch (mode) {
      case TrackMode::access: vm_->set_present(gpa, false); break;
      case TrackMode::execute: vm_->set_no_execute(gpa, true); break;
      case TrackMode::write: vm_->set_writable(gpa, false); break;
    }
  }

  void track_pages(const std::vector<Gpa>& gpas, TrackMode mode) {
    for (Gpa g : gpas) track(g, mode);
  }

  void untrack(Gpa gpa) {
    std::uint64_t page = page_of(gpa);
    auto it = tracked_.find(page);
    if (it == tracked_.end()) return;
    vm_->set_present(gpa, it->second.present);
    vm_->set_no_execute(gpa, it->second.no_execute);
    vm_->set_writable(gpa, it->second.writable);
    tracked_.erase(it);
  }

  void untrack_all() {
    while (!tracked_.empty()) untrack(page_base(tracked_.begin()->first));
  }

  bool is_tracked(Gpa gpa) const { return tracked_.count(page_of(gpa)) != 0; }
  std::size_t tracked_count() const { return tracked_.size(); }

  void apply(const TrackCommand& cmd) {
    if (cmd.track) {
      track(cmd.gpa, cmd.mode);
    } else {
      untrack(cmd.gpa);
    }
  }

 private:
  struct Saved {
    bool present;
    bool no_execute;
    bool writable;
  };
  Vm* vm_;
  std::unordered_map<std::uint64_t, Saved> tracked_;
};

// ---------------------------------------------------------------------------
// Execution fingerprints: page-fault sequences relative to the text base.

struct Fingerprint {
  struct Entry {
    std::uint64_t pfn_offset = 0;  // pages relative to text base
    bool payload = false;          // payload entries arm the stepper
    std::string label;
  };
  std::vector<Entry> entries;

  void validate() const {
    if (entries.empty()) throw std::invalid_argument("fingerprint is empty");
  }
};

// The bundled block-operation fingerprint for the modeled XTS victim.
inline Fingerprint xts_fingerprint(const VictimLayout& lay) {
  Fingerprint fp;
  fp.entries = {
      {lay.pf_xts_head, false, "xts_head"},
      {lay.pf_cipher_wrap, false, "cipher_wrap"},
      {lay.pf_encrypt_a, true, "tweak_encrypt_a"},
      {lay.pf_encrypt_b, true, "tweak_encrypt_b"},
      {lay.pf_ecb_mark, false, "ecb_dispatch"},
      {lay.pf_encrypt_b, true, "payload_decrypt_a"},
      {lay.pf_decrypt_b, true, "payload_decrypt_b"},
  };
  return fp;
}

// File format: one entry per line, "<hex-offset> <marker|payload> [label]".
inline void write_fingerprint(std::ostream& out, const Fingerprint& fp) {
  for (const auto& e : fp.entries) {
    out << std::hex << "0x" << e.pfn_offset << std::dec << ' '
        << (e.payload ? "payload" : "marker");
    if (!e.label.empty()) out << ' ' << e.label;
    out << "\n";
  }
}

inline Fingerprint read_fingerprint(std::istream& in) {
  Fingerprint fp;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    std::istringstream is(line);
    std::string off, role, label;
    if (!(is >> off)) continue;
    if (!(is >> role) || (role != "marker" && role != "payload"))
      throw std::invalid_argument("fingerprint line " + std::to_string(lineno) +
                                  ": expected '<offset> marker|payload'");
    Fingerprint::Entry e;
    e.pfn_offset = std::stoull(off, nullptr, 16);
    e.payload = role == "payload";
    if (is >> label) e.label = label;
    fp.entries.push_back(std::move(e));
  }
  fp.validate();
  return fp;
}

// ---------------------------------------------------------------------------
// Controller-side matcher: tracks only the next expected page. A fault on
// the expected page slides the tracking window forward; any other tracked
// fault holds the state. Completing the sequence re-arms at the start, so
// back-to-back block operations each produce one match.

class FingerprintMatcher {
 public:
  FingerprintMatcher(Fingerprint fp, Gpa text_base)
      : fp_(std::move(fp)), text_base_(text_base) {
    fp_.validate();
  }

  struct Advance {
    bool advanced = false;
    bool matched = false;                  // full sequence completed
    std::optional<std::size_t> entry_index;  // which entry just matched
    std::vector<TrackCommand> commands;
  };

  // Tracking command to install the initial state.
  std::vector<TrackCommand> arm() const {
    return {{page_addr(0), TrackMode::execute, true}};
  }

  const Fingerprint& fingerprint() const { return fp_; }
  std::size_t state() const { return next_; }

  Advance on_fault(Gpa gpa) {
    Advance adv;
    if (page_of(gpa) != page_of(page_addr(next_))) return adv;  // hold
    adv.advanced = true;
    adv.entry_index = next_;
    adv.commands.push_back({page_addr(next_), TrackMode::execute, false});
    std::size_t following = (next_ + 1) % fp_.entries.size();
    adv.commands.push_back({page_addr(following), TrackMode::execute, true});
    if (next_ + 1 == fp_.entries.size()) adv.matched = true;
    next_ = following;
    return adv;
  }

 private:
  Gpa page_addr(std::size_t i) const {
    return text_base_ + fp_.entries[i].pfn_offset * kPageSize;
  }

  Fingerprint fp_;
  Gpa text_base_;
  std::size_t next_ = 0;
};

}  // namespace stepsim
