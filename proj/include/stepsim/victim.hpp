#pragma once

#include <cstdint>
#include <istream>
#include <optional>
#include <ostream>
#include <random>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "stepsim/aes.hpp"
#include "stepsim/config.hpp"
#include "stepsim/guest.hpp"
#include "stepsim/types.hpp"
#include "stepsim/xts.hpp"

namespace stepsim {

// ---------------------------------------------------------------------------
// Disk fixture: the encrypted disk image stand-in the victim decrypts and
// the attack is scored against.

struct DiskSectorRecord {
  std::uint64_t sector = 0;
  std::vector<std::uint8_t> ciphertext;
  std::optional<std::vector<std::uint8_t>> known_plaintext;
};

struct DiskFixture {
  Block data_key{};
  Block tweak_key{};
  std::uint32_t sector_size = 512;
  std::vector<DiskSectorRecord> sectors;

  XtsContext context() const { return {data_key, tweak_key, sector_size}; }
};

inline DiskFixture make_fixture(std::uint64_t seed, std::uint32_t n_sectors,
                                std::uint32_t n_known,
                                std::uint32_t sector_size = 512) {
  if (n_sectors == 0) throw std::invalid_argument("sector count must be positive");
  if (n_known > n_sectors)
    throw std::invalid_argument("known-plaintext count exceeds sector count");
  auto rng = make_rng(seed, "fixture");
  std::uniform_int_distribution<int> byte(0, 255);

  DiskFixture fx;
  fx.sector_size = sector_size;
  for (auto* key : {&fx.data_key, &fx.tweak_key})
    for (auto& b : *key) b = static_cast<std::uint8_t>(byte(rng));

  // Deterministic choice of which sectors carry known plaintext.
  std::vector<std::uint32_t> order(n_sectors);
  for (std::uint32_t i = 0; i < n_sectors; ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::unordered_set<std::uint32_t> known(order.begin(), order.begin() + n_known);

  XtsContext ctx = fx.context();
  for (std::uint32_t s = 0; s < n_sectors; ++s) {
    std::vector<std::uint8_t> pt(sector_size);
    for (auto& b : pt) b = static_cast<std::uint8_t>(byte(rng));
    DiskSectorRecord rec;
    rec.sector = s;
    rec.ciphertext = xts_encrypt_sector(ctx, s, pt).first;
    if (known.count(s)) rec.known_plaintext = pt;
    fx.sectors.push_back(std::move(rec));
  }
  return fx;
}

inline void write_fixture(std::ostream& out, const DiskFixture& fx) {
  std::array<std::uint8_t, 32> blob{};
  std::copy(fx.data_key.begin(), fx.data_key.end(), blob.begin());
  std::copy(fx.tweak_key.begin(), fx.tweak_key.end(), blob.begin() + 16);
  out << "keys " << to_hex(blob) << "\n";
  out << "sector-size " << fx.sector_size << "\n";
  for (const auto& rec : fx.sectors) {
    out << "sector " << rec.sector << " " << to_hex(rec.ciphertext);
    if (rec.known_plaintext) out << " " << to_hex(*rec.known_plaintext);
    out << "\n";
  }
}

inline DiskFixture read_fixture(std::istream& in) {
  DiskFixture fx;
  std::string line;
  bool have_keys = false;
  while (std::getline(in, line)) {
    std::istringstream is(line);
    std::string word;
    if (!(is >> word) || word[0] == '#') continue;
    if (word == "keys") {
      std::string hex;
      is >> hex;
      auto blob = parse_hex_array<32>(hex);
      std::copy(blob.begin(), blob.begin() + 16, fx.data_key.begin());
      std::copy(blob.begin() + 16, blob.end(), fx.tweak_key.begin());
      have_keys = true;
    } else if (word == "sector-size") {
      is >> fx.sector_size;
    } else if (word == "sector") {
      DiskSectorRecord rec;
      std::string ct, pt;
      is >> rec.sector >> ct;
      rec.ciphertext = parse_hex(ct);
      if (is >> pt) rec.known_plaintext = parse_hex(pt);
      fx.sectors.push_back(std::move(rec));
    } else {
      throw std::invalid_argument("fixture: unknown record '" + word + "'");
    }
  }
  if (!have_keys) throw std::invalid_argument("fixture: missing key blob");
  return fx;
}

// ---------------------------------------------------------------------------
// Victim code layout. Function placement mirrors the attacked kernel build:
// page offsets are relative to the randomized text base, and one page is
// shared between the tail of the tweak cipher and the head of the payload
// cipher, which is why it faults twice per block operation.

struct VictimLayout {
  Gpa text_base = 0x4000000;
  Gpa table_base = 0x100000;

  std::uint64_t pf_xts_head = 0x65c;
  std::uint64_t pf_cipher_wrap = 0x64b;
  std::uint64_t pf_encrypt_a = 0x65f;
  std::uint64_t pf_encrypt_b = 0x660;   // also hosts the decrypt entry
  std::uint64_t pf_ecb_mark = 0x65b;
  std::uint64_t pf_decrypt_b = 0x661;

  bool fences = false;          // fence between table loads
  std::uint32_t head_len = 8;   // glue instruction counts
  std::uint32_t wrap_len = 6;
  std::uint32_t ecb_len = 6;
  std::uint32_t prologue_len = 10;
  std::uint32_t epilogue_len = 4;
  std::uint32_t split_round = 5;  // rounds >= split execute on the second page

  Gpa page_addr(std::uint64_t pfn_offset) const {
    return text_base + pfn_offset * kPageSize;
  }

  std::vector<std::uint64_t> code_page_offsets() const {
    return {pf_xts_head, pf_cipher_wrap, pf_encrypt_a,
            pf_encrypt_b, pf_ecb_mark,   pf_decrypt_b};
  }

  // Page-fault sequence of one block operation, as page offsets.
  std::vector<std::uint64_t> expected_fault_sequence() const {
    return {pf_xts_head, pf_cipher_wrap, pf_encrypt_a, pf_encrypt_b,
            pf_ecb_mark, pf_encrypt_b,   pf_decrypt_b};
  }
};

// Draws randomized text/table bases (KASLR-style) for one "boot".
inline VictimLayout randomize_layout(std::uint64_t seed, const SimConfig& cfg) {
  VictimLayout lay;
  auto rng = make_rng(seed, "kaslr");
  if (cfg.text_base) {
    lay.text_base = cfg.text_base;
  } else {
    std::uniform_int_distribution<std::uint64_t> d(0x1000, 0x8000);
    lay.text_base = page_base(d(rng) * 2);
  }
  if (cfg.table_base) {
    lay.table_base = cfg.table_base;
  } else {
    std::uniform_int_distribution<std::uint64_t> d(0x100, 0xf00);
    lay.table_base = page_base(d(rng));
  }
  lay.fences = cfg.victim_fences;
  return lay;
}

// ---------------------------------------------------------------------------
// Offline-analysis manifest: for every table access of every block
// operation, where in the instruction stream it happens.

struct ManifestAccess {
  std::size_t op_index = 0;      // block operation ordinal
  std::size_t instr_index = 0;   // absolute index in the program
  std::uint32_t func_offset = 0; // instructions since function entry
  bool tweak_phase = false;      // tweak-generation encrypt vs payload decrypt
  std::uint8_t round = 0;
  TableId table = TableId::TE0;
  std::uint8_t byte_pos = 0;
  std::uint8_t index = 0;        // ground-truth table index
  std::uint16_t table_ordinal = 0;  // per-(op, table) access number
};

struct FunctionSpan {
  std::size_t op_index = 0;
  bool tweak_phase = false;
  std::size_t begin = 0;  // first instruction index
  std::size_t end = 0;    // one past last
};

struct VictimManifest {
  std::size_t ops = 0;
  std::uint32_t encrypt_len = 0;  // instruction count of the tweak cipher
  std::uint32_t decrypt_len = 0;
  std::vector<ManifestAccess> accesses;
  std::vector<FunctionSpan> functions;
};

struct CompiledVictim {
  GuestProgram program;
  VictimManifest manifest;
  TTableSet tables;
  VictimLayout layout;
};

namespace detail {

class VictimBuilder {
 public:
  VictimBuilder(const VictimLayout& lay, const SimConfig& cfg)
      : lay_(lay), cfg_(cfg), tables_(TTableSet::contiguous(lay.table_base)) {
    // A table page doubling as a code page would make the layout ambiguous.
    std::unordered_set<std::uint64_t> code_pages;
    for (auto off : lay.code_page_offsets())
      code_pages.insert(page_of(lay.page_addr(off)));
    for (auto p : tables_.pages())
      if (code_pages.count(p))
        throw std::invalid_argument("layout collision between tables and code");
  }

  void add_block_op(const AccessScript& tweak_script,
                    const AccessScript& payload_script) {
    std::size_t op = manifest_.ops++;
    emit_glue(lay_.pf_xts_head, lay_.head_len);
    emit_glue(lay_.pf_cipher_wrap, lay_.wrap_len);
    emit_function(op, /*tweak=*/true, tweak_script, lay_.pf_encrypt_a,
                  lay_.pf_encrypt_b, 0);
    emit_glue(lay_.pf_ecb_mark, lay_.ecb_len);
    // The decrypt entry shares the encrypt tail page; its own code starts
    // in the upper half of that page.
    emit_function(op, /*tweak=*/false, payload_script, lay_.pf_encrypt_b,
                  lay_.pf_decrypt_b, kPageSize / 2);
  }

  CompiledVictim finish() && {
    prog_.validate();
    manifest_.encrypt_len = func_len_[0];
    manifest_.decrypt_len = func_len_[1];
    return {std::move(prog_), std::move(manifest_), tables_, lay_};
  }

 private:
  void emit(Instruction in, Gpa addr) {
    prog_.instructions.push_back(std::move(in));
    prog_.code_gpa.push_back(addr);
  }

  void emit_glue(std::uint64_t pfn_offset, std::uint32_t n) {
    Gpa base = lay_.page_addr(pfn_offset);
    for (std::uint32_t i = 0; i < n; ++i) {
      Instruction in;
      in.op = OpClass::generic;
      in.base_latency = class_latency(OpClass::generic, cfg_);
      emit(in, base + 4ull * i);
    }
  }

  void emit_function(std::size_t op, bool tweak, const AccessScript& script,
                     std::uint64_t page_a, std::uint64_t page_b,
                     std::uint64_t entry_offset) {
    FunctionSpan span;
    span.op_index = op;
    span.tweak_phase = tweak;
    span.begin = prog_.size();

    Gpa addr_a = lay_.page_addr(page_a) + entry_offset;
    Gpa addr_b = lay_.page_addr(page_b);
    std::uint32_t emitted_a = 0, emitted_b = 0;
    auto emit_on = [&](Instruction in, bool second_page) {
      if (second_page) {
        emit(std::move(in), addr_b + 4ull * emitted_b++);
      } else {
        emit(std::move(in), addr_a + 4ull * emitted_a++);
      }
    };

    std::array<std::uint16_t, kTableCount> ordinal{};
    for (std::uint32_t i = 0; i < lay_.prologue_len; ++i) {
      Instruction in;
      in.op = OpClass::generic;
      in.base_latency = class_latency(OpClass::generic, cfg_);
      emit_on(std::move(in), false);
    }
    for (const auto& e : script.entries) {
      bool second = e.round >= lay_.split_round;
      ManifestAccess ma;
      ma.op_index = op;
      ma.instr_index = prog_.size();
      ma.func_offset = static_cast<std::uint32_t>(prog_.size() - span.begin);
      ma.tweak_phase = tweak;
      ma.round = e.round;
      ma.table = e.table;
      ma.byte_pos = e.byte_pos;
      ma.index = e.index;
      ma.table_ordinal = ordinal[static_cast<int>(e.table)]++;
      manifest_.accesses.push_back(ma);

      Instruction in;
      in.op = OpClass::load;
      in.base_latency = class_latency(OpClass::load, cfg_);
      in.table_id = static_cast<int>(e.table);
      in.mem.push_back(tables_.entry_address(e.table, e.index));
      emit_on(std::move(in), second);
      if (lay_.fences) {
        Instruction f;
        f.op = OpClass::fence;
        f.base_latency = class_latency(OpClass::fence, cfg_);
        emit_on(std::move(f), second);
      }
    }
    for (std::uint32_t i = 0; i < lay_.epilogue_len; ++i) {
      Instruction in;
      in.op = OpClass::generic;
      in.base_latency = class_latency(OpClass::generic, cfg_);
      emit_on(std::move(in), true);
    }

    span.end = prog_.size();
    func_len_[tweak ? 0 : 1] = static_cast<std::uint32_t>(span.end - span.begin);
    manifest_.functions.push_back(span);
  }

  VictimLayout lay_;
  const SimConfig& cfg_;
  TTableSet tables_;
  GuestProgram prog_;
  VictimManifest manifest_;
  std::array<std::uint32_t, 2> func_len_{};
};

}  // namespace detail

// Compiles the block operations of one sector decryption into a guest
// program. Each block operation regenerates the tweak (encrypt of the
// sector IV) and then decrypts its payload block, so every operation walks
// the full page-fault sequence of the layout.
inline CompiledVictim compile_xts_victim(const XtsScripts& scripts,
                                         const VictimLayout& lay,
                                         const SimConfig& cfg) {
  detail::VictimBuilder b(lay, cfg);
  for (const auto& payload : scripts.payload)
    b.add_block_op(scripts.tweak, payload);
  return std::move(b).finish();
}

// Maps all victim pages (code + tables) into the VM, identity GPA->HPA.
inline void map_victim_pages(Vm& vm, const CompiledVictim& v) {
  map_program_pages(vm, v.program);
  for (auto p : v.tables.pages())
    if (!vm.has_page(p)) vm.map_page({p, p});
}

}  // namespace stepsim
