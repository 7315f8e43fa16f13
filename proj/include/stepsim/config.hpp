#pragma once

#include <cstdint>
#include <functional>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <variant>
#include <vector>

#include "stepsim/types.hpp"

namespace stepsim {

// All model parameters in one place, addressable as flat dotted keys
// ("cache.sets = 1024"). Every field has a default; a reference config
// listing all keys can be emitted with write_reference().
struct SimConfig {
  // guest-model
  Cycles tlb_hit_latency = 2;
  Cycles page_walk_latency = 400;
  Cycles abit_penalty = 150;
  std::uint64_t tlb_capacity = 0;  // 0 = unbounded

  // cache-sim
  std::uint32_t cache_sets = 1024;
  std::uint32_t cache_ways = 8;
  Cycles cache_hit_latency = 20;
  Cycles cache_miss_latency = 200;
  double p_noise = 0.02;    // per-set false-miss probability during probe
  std::uint32_t ooo_window = 4;  // future same-table accesses touched out of order
  double p_ooo = 1.0;
  std::uint32_t ooo_scan_limit = 64;  // instruction scan bound for the window

  // stepper
  std::uint64_t timer_value = 51;
  Cycles tick_scale = 30;
  bool flush_tlb = true;
  bool reset_a_bit = false;
  bool suppress_virtual_timer = true;
  Cycles countermeasure_min_cycles = 0;  // 0 = countermeasure off
  std::uint32_t countermeasure_max_extra = 32;
  double entry_mean = 1500.0;
  double entry_stddev = 40.0;
  Cycles exit_overhead = 900;
  std::uint32_t handler_slide = 64;  // injected virtual-timer handler length

  // instruction latency classes
  Cycles lat_nop = 1;
  Cycles lat_add = 1;
  Cycles lat_mul = 3;
  Cycles lat_div_base = 8;
  Cycles lat_rdrand = 300;
  Cycles lat_lar = 60;
  Cycles lat_load = 1;
  Cycles lat_store = 1;
  Cycles lat_fence = 4;
  Cycles lat_generic = 1;

  // classifier
  std::uint32_t mlp_hidden1 = 182;
  std::uint32_t mlp_hidden2 = 64;
  double mlp_dropout = 0.2;
  double mlp_learning_rate = 0.05;
  std::uint32_t mlp_epochs = 12;
  std::uint32_t mlp_batch = 64;

  // key-recovery
  double rec_p_min = 0.01;
  std::uint32_t rec_max_candidates = 7;
  std::uint32_t rec_depth = 2;
  double rec_agreement = 0.75;  // fraction of ops a value must be consistent with

  // victim / fixture
  std::uint64_t text_base = 0;    // 0 = randomize per boot
  std::uint64_t table_base = 0;   // 0 = randomize per boot
  std::uint32_t sector_size = 512;
  bool victim_fences = false;

  // attack driver
  std::uint32_t attack_payload_blocks = 2;   // measured payload blocks per sector
  std::uint32_t attack_profile_ops = 400;    // labeled ops for classifier profiling
  std::uint32_t attack_train_epochs = 8;

  std::uint64_t seed = 1;
};

namespace detail {

using FieldRef = std::variant<bool*, std::uint32_t*, std::uint64_t*, double*>;

struct FieldEntry {
  const char* key;
  FieldRef ref;
};

inline std::vector<FieldEntry> config_fields(SimConfig& c) {
  return {
      {"guest.tlb-hit-latency", &c.tlb_hit_latency},
      {"guest.page-walk-latency", &c.page_walk_latency},
      {"guest.abit-penalty", &c.abit_penalty},
      {"guest.tlb-capacity", &c.tlb_capacity},
      {"cache.sets", &c.cache_sets},
      {"cache.ways", &c.cache_ways},
      {"cache.hit-latency", &c.cache_hit_latency},
      {"cache.miss-latency", &c.cache_miss_latency},
      {"cache.p-noise", &c.p_noise},
      {"cache.ooo-window", &c.ooo_window},
      {"cache.p-ooo", &c.p_ooo},
      {"cache.ooo-scan-limit", &c.ooo_scan_limit},
      {"stepper.timer-value", &c.timer_value},
      {"stepper.tick-scale", &c.tick_scale},
      {"stepper.flush-tlb", &c.flush_tlb},
      {"stepper.reset-a-bit", &c.reset_a_bit},
      {"stepper.suppress-virtual-timer", &c.suppress_virtual_timer},
      {"stepper.countermeasure-min-cycles", &c.countermeasure_min_cycles},
      {"stepper.countermeasure-max-extra", &c.countermeasure_max_extra},
      {"stepper.entry-mean", &c.entry_mean},
      {"stepper.entry-stddev", &c.entry_stddev},
      {"stepper.exit-overhead", &c.exit_overhead},
      {"stepper.handler-slide", &c.handler_slide},
      {"latency.nop", &c.lat_nop},
      {"latency.add", &c.lat_add},
      {"latency.mul", &c.lat_mul},
      {"latency.div-base", &c.lat_div_base},
      {"latency.rdrand", &c.lat_rdrand},
      {"latency.lar", &c.lat_lar},
      {"latency.load", &c.lat_load},
      {"latency.store", &c.lat_store},
      {"latency.fence", &c.lat_fence},
      {"latency.generic", &c.lat_generic},
      {"classifier.hidden1", &c.mlp_hidden1},
      {"classifier.hidden2", &c.mlp_hidden2},
      {"classifier.dropout", &c.mlp_dropout},
      {"classifier.learning-rate", &c.mlp_learning_rate},
      {"classifier.epochs", &c.mlp_epochs},
      {"classifier.batch", &c.mlp_batch},
      {"recovery.p-min", &c.rec_p_min},
      {"recovery.max-candidates", &c.rec_max_candidates},
      {"recovery.depth", &c.rec_depth},
      {"recovery.agreement", &c.rec_agreement},
      {"victim.text-base", &c.text_base},
      {"victim.table-base", &c.table_base},
      {"victim.sector-size", &c.sector_size},
      {"victim.fences", &c.victim_fences},
      {"attack.payload-blocks", &c.attack_payload_blocks},
      {"attack.profile-ops", &c.attack_profile_ops},
      {"attack.train-epochs", &c.attack_train_epochs},
      {"seed", &c.seed},
  };
}

inline std::string field_to_string(const FieldRef& ref) {
  return std::visit(
      [](auto* p) -> std::string {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, bool>) {
          return *p ? "true" : "false";
        } else {
          std::ostringstream os;
          os << *p;
          return os.str();
        }
      },
      ref);
}

inline void field_from_string(const FieldRef& ref, const std::string& key,
                              const std::string& value) {
  std::visit(
      [&](auto* p) {
        using T = std::remove_pointer_t<decltype(p)>;
        if constexpr (std::is_same_v<T, bool>) {
          if (value == "true" || value == "1") {
            *p = true;
          } else if (value == "false" || value == "0") {
            *p = false;
          } else {
            throw std::invalid_argument("config key '" + key +
                                        "': expected bool, got '" + value + "'");
          }
        } else {
          std::istringstream is(value);
          T v{};
          is >> v;
          if (is.fail()) {
            throw std::invalid_argument("config key '" + key +
                                        "': bad value '" + value + "'");
          }
          *p = v;
        }
      },
      ref);
}

inline std::string trim(const std::string& s) {
  auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos) return "";
  auto e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

}  // namespace detail

// Parses "key = value" lines; '#' starts a comment, blank lines are skipped.
// Unknown keys are an error so typos do not silently configure nothing.
inline void parse_config(std::istream& in, SimConfig& cfg) {
  auto fields = detail::config_fields(cfg);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected 'key = value'");
    }
    std::string key = detail::trim(line.substr(0, eq));
    std::string value = detail::trim(line.substr(eq + 1));
    bool found = false;
    for (auto& f : fields) {
      if (key == f.key) {
        detail::field_from_string(f.ref, key, value);
        found = true;
        break;
      }
    }
    if (!found) {
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": unknown key '" + key + "'");
    }
  }
}

inline void write_reference(std::ostream& out, SimConfig cfg = {}) {
  out << "# reference configuration; all keys with their default values\n";
  for (auto& f : detail::config_fields(cfg)) {
    out << f.key << " = " << detail::field_to_string(f.ref) << "\n";
  }
}

}  // namespace stepsim
