#pragma once

#include <array>
#include <cstdint>
#include <stdexcept>
#include <utility>
#include <vector>

#include "stepsim/types.hpp"

namespace stepsim {

using Block = std::array<std::uint8_t, 16>;

namespace aes {

inline constexpr std::array<std::uint8_t, 256> kSbox = {
    0x63, 0x7c, 0x77, 0x7b, 0xf2, 0x6b, 0x6f, 0xc5, 0x30, 0x01, 0x67, 0x2b,
    0xfe, 0xd7, 0xab, 0x76, 0xca, 0x82, 0xc9, 0x7d, 0xfa, 0x59, 0x47, 0xf0,
    0xad, 0xd4, 0xa2, 0xaf, 0x9c, 0xa4, 0x72, 0xc0, 0xb7, 0xfd, 0x93, 0x26,
    0x36, 0x3f, 0xf7, 0xcc, 0x34, 0xa5, 0xe5, 0xf1, 0x71, 0xd8, 0x31, 0x15,
    0x04, 0xc7, 0x23, 0xc3, 0x18, 0x96, 0x05, 0x9a, 0x07, 0x12, 0x80, 0xe2,
    0xeb, 0x27, 0xb2, 0x75, 0x09, 0x83, 0x2c, 0x1a, 0x1b, 0x6e, 0x5a, 0xa0,
    0x52, 0x3b, 0xd6, 0xb3, 0x29, 0xe3, 0x2f, 0x84, 0x53, 0xd1, 0x00, 0xed,
    0x20, 0xfc, 0xb1, 0x5b, 0x6a, 0xcb, 0xbe, 0x39, 0x4a, 0x4c, 0x58, 0xcf,
    0xd0, 0xef, 0xaa, 0xfb, 0x43, 0x4d, 0x33, 0x85, 0x45, 0xf9, 0x02, 0x7f,
    0x50, 0x3c, 0x9f, 0xa8, 0x51, 0xa3, 0x40, 0x8f, 0x92, 0x9d, 0x38, 0xf5,
    0xbc, 0xb6, 0xda, 0x21, 0x10, 0xff, 0xf3, 0xd2, 0xcd, 0x0c, 0x13, 0xec,
    0x5f, 0x97, 0x44, 0x17, 0xc4, 0xa7, 0x7e, 0x3d, 0x64, 0x5d, 0x19, 0x73,
    0x60, 0x81, 0x4f, 0xdc, 0x22, 0x2a, 0x90, 0x88, 0x46, 0xee, 0xb8, 0x14,
    0xde, 0x5e, 0x0b, 0xdb, 0xe0, 0x32, 0x3a, 0x0a, 0x49, 0x06, 0x24, 0x5c,
    0xc2, 0xd3, 0xac, 0x62, 0x91, 0x95, 0xe4, 0x79, 0xe7, 0xc8, 0x37, 0x6d,
    0x8d, 0xd5, 0x4e, 0xa9, 0x6c, 0x56, 0xf4, 0xea, 0x65, 0x7a, 0xae, 0x08,
    0xba, 0x78, 0x25, 0x2e, 0x1c, 0xa6, 0xb4, 0xc6, 0xe8, 0xdd, 0x74, 0x1f,
    0x4b, 0xbd, 0x8b, 0x8a, 0x70, 0x3e, 0xb5, 0x66, 0x48, 0x03, 0xf6, 0x0e,
    0x61, 0x35, 0x57, 0xb9, 0x86, 0xc1, 0x1d, 0x9e, 0xe1, 0xf8, 0x98, 0x11,
    0x69, 0xd9, 0x8e, 0x94, 0x9b, 0x1e, 0x87, 0xe9, 0xce, 0x55, 0x28, 0xdf,
    0x8c, 0xa1, 0x89, 0x0d, 0xbf, 0xe6, 0x42, 0x68, 0x41, 0x99, 0x2d, 0x0f,
    0xb0, 0x54, 0xbb, 0x16};

inline constexpr std::array<std::uint8_t, 256> make_inverse_sbox() {
  std::array<std::uint8_t, 256> inv{};
  for (int i = 0; i < 256; ++i) inv[kSbox[i]] = static_cast<std::uint8_t>(i);
  return inv;
}

inline constexpr std::array<std::uint8_t, 256> kInvSbox = make_inverse_sbox();

constexpr std::uint8_t gmul(std::uint8_t a, std::uint8_t b) {
  std::uint8_t p = 0;
  for (int i = 0; i < 8; ++i) {
    if (b & 1) p ^= a;
    bool hi = a & 0x80;
    a = static_cast<std::uint8_t>(a << 1);
    if (hi) a ^= 0x1b;
    b >>= 1;
  }
  return p;
}

constexpr std::uint32_t ror8(std::uint32_t v) { return (v >> 8) | (v << 24); }

// Te0[x] = (02·s, 01·s, 01·s, 03·s) with s = sbox[x]; Te1..Te3 are byte
// rotations. Td tables analogously over the inverse s-box and InvMixColumns.
inline constexpr std::array<std::uint32_t, 256> make_te0() {
  std::array<std::uint32_t, 256> t{};
  for (int i = 0; i < 256; ++i) {
    std::uint8_t s = kSbox[i];
    t[i] = (std::uint32_t(gmul(s, 2)) << 24) | (std::uint32_t(s) << 16) |
           (std::uint32_t(s) << 8) | gmul(s, 3);
  }
  return t;
}

inline constexpr std::array<std::uint32_t, 256> make_td0() {
  std::array<std::uint32_t, 256> t{};
  for (int i = 0; i < 256; ++i) {
    std::uint8_t s = kInvSbox[i];
    t[i] = (std::uint32_t(gmul(s, 0x0e)) << 24) |
           (std::uint32_t(gmul(s, 0x09)) << 16) |
           (std::uint32_t(gmul(s, 0x0d)) << 8) | gmul(s, 0x0b);
  }
  return t;
}

inline constexpr std::array<std::uint32_t, 256> rotate_table(
    const std::array<std::uint32_t, 256>& in) {
  std::array<std::uint32_t, 256> t{};
  for (int i = 0; i < 256; ++i) t[i] = ror8(in[i]);
  return t;
}

inline constexpr auto kTe0 = make_te0();
inline constexpr auto kTe1 = rotate_table(kTe0);
inline constexpr auto kTe2 = rotate_table(kTe1);
inline constexpr auto kTe3 = rotate_table(kTe2);
inline constexpr auto kTd0 = make_td0();
inline constexpr auto kTd1 = rotate_table(kTd0);
inline constexpr auto kTd2 = rotate_table(kTd1);
inline constexpr auto kTd3 = rotate_table(kTd2);

inline const std::array<std::uint32_t, 256>& te_table(int j) {
  switch (j) {
    case 0: return kTe0;
    case 1: return kTe1;
    case 2: return kTe2;
    default: return kTe3;
  }
}

inline const std::array<std::uint32_t, 256>& td_table(int j) {
  switch (j) {
    case 0: return kTd0;
    case 1: return kTd1;
    case 2: return kTd2;
    default: return kTd3;
  }
}

inline std::uint32_t pack(const std::uint8_t* b) {
  return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
         (std::uint32_t(b[2]) << 8) | b[3];
}

inline void unpack(std::uint32_t w, std::uint8_t* b) {
  b[0] = static_cast<std::uint8_t>(w >> 24);
  b[1] = static_cast<std::uint8_t>(w >> 16);
  b[2] = static_cast<std::uint8_t>(w >> 8);
  b[3] = static_cast<std::uint8_t>(w);
}

inline std::uint8_t word_byte(std::uint32_t w, int j) {
  return static_cast<std::uint8_t>(w >> (24 - 8 * j));
}

constexpr std::uint32_t sub_word(std::uint32_t w) {
  return (std::uint32_t(kSbox[(w >> 24) & 0xff]) << 24) |
         (std::uint32_t(kSbox[(w >> 16) & 0xff]) << 16) |
         (std::uint32_t(kSbox[(w >> 8) & 0xff]) << 8) | kSbox[w & 0xff];
}

constexpr std::uint32_t rot_word(std::uint32_t w) { return (w << 8) | (w >> 24); }

inline constexpr std::array<std::uint32_t, 11> kRcon = {
    0, 0x01000000, 0x02000000, 0x04000000, 0x08000000, 0x10000000,
    0x20000000, 0x40000000, 0x80000000, 0x1b000000, 0x36000000};

inline std::uint32_t inv_mix_word(std::uint32_t w) {
  std::uint8_t a0 = word_byte(w, 0), a1 = word_byte(w, 1), a2 = word_byte(w, 2),
               a3 = word_byte(w, 3);
  std::uint8_t b0 = gmul(a0, 0x0e) ^ gmul(a1, 0x0b) ^ gmul(a2, 0x0d) ^ gmul(a3, 0x09);
  std::uint8_t b1 = gmul(a0, 0x09) ^ gmul(a1, 0x0e) ^ gmul(a2, 0x0b) ^ gmul(a3, 0x0d);
  std::uint8_t b2 = gmul(a0, 0x0d) ^ gmul(a1, 0x09) ^ gmul(a2, 0x0e) ^ gmul(a3, 0x0b);
  std::uint8_t b3 = gmul(a0, 0x0b) ^ gmul(a1, 0x0d) ^ gmul(a2, 0x09) ^ gmul(a3, 0x0e);
  return (std::uint32_t(b0) << 24) | (std::uint32_t(b1) << 16) |
         (std::uint32_t(b2) << 8) | b3;
}

}  // namespace aes

// Which lookup table an access touches. The final rounds use dedicated
// s-box style tables so the last round leaks as well.
enum class TableId : std::uint8_t {
  TE0 = 0,
  TE1 = 1,
  TE2 = 2,
  TE3 = 3,
  FE = 4,   // encrypt final-round table
  TD0 = 5,
  TD1 = 6,
  TD2 = 7,
  TD3 = 8,
  FD = 9,   // decrypt final-round table
};

inline constexpr int kTableCount = 10;
inline constexpr std::uint64_t kTableBytes = 256 * 4;  // 16 cache lines

inline const char* table_name(TableId t) {
  static constexpr const char* names[] = {"te0", "te1", "te2", "te3", "fe",
                                          "td0", "td1", "td2", "td3", "fd"};
  return names[static_cast<int>(t)];
}

struct AccessScript {
  struct Entry {
    std::uint8_t round;     // 1..10
    TableId table;
    std::uint8_t byte_pos;  // state byte position whose value is the index
    std::uint8_t index;     // table index actually accessed
  };
  std::vector<Entry> entries;
};

struct AesKeySchedule {
  std::array<Block, 11> round_keys;          // encrypt order
  std::array<Block, 11> inverse_round_keys;  // equivalent-inverse-cipher order

  std::array<std::uint32_t, 4> round_words(int r) const {
    return words_of(round_keys[r]);
  }
  std::array<std::uint32_t, 4> inverse_round_words(int r) const {
    return words_of(inverse_round_keys[r]);
  }

 private:
  static std::array<std::uint32_t, 4> words_of(const Block& b) {
    return {aes::pack(&b[0]), aes::pack(&b[4]), aes::pack(&b[8]),
            aes::pack(&b[12])};
  }
};

inline AesKeySchedule aes128_expand_key(const Block& key) {
  std::array<std::uint32_t, 44> w{};
  for (int i = 0; i < 4; ++i) w[i] = aes::pack(&key[4 * i]);
  for (int i = 4; i < 44; ++i) {
    std::uint32_t t = w[i - 1];
    if (i % 4 == 0) t = aes::sub_word(aes::rot_word(t)) ^ aes::kRcon[i / 4];
    w[i] = w[i - 4] ^ t;
  }
  AesKeySchedule ks;
  for (int r = 0; r <= 10; ++r)
    for (int c = 0; c < 4; ++c) aes::unpack(w[4 * r + c], &ks.round_keys[r][4 * c]);

  ks.inverse_round_keys[0] = ks.round_keys[10];
  ks.inverse_round_keys[10] = ks.round_keys[0];
  for (int r = 1; r <= 9; ++r) {
    for (int c = 0; c < 4; ++c) {
      std::uint32_t w10 = aes::pack(&ks.round_keys[10 - r][4 * c]);
      aes::unpack(aes::inv_mix_word(w10), &ks.inverse_round_keys[r][4 * c]);
    }
  }
  return ks;
}

// Walks the expansion recurrence backwards from the last round key to the
// master key.
inline Block aes128_invert_expansion(const Block& last_round_key) {
  std::array<std::uint32_t, 4> col = {
      aes::pack(&last_round_key[0]), aes::pack(&last_round_key[4]),
      aes::pack(&last_round_key[8]), aes::pack(&last_round_key[12])};
  for (int r = 10; r >= 1; --r) {
    std::array<std::uint32_t, 4> prev{};
    prev[3] = col[3] ^ col[2];
    prev[2] = col[2] ^ col[1];
    prev[1] = col[1] ^ col[0];
    prev[0] = col[0] ^ aes::sub_word(aes::rot_word(prev[3])) ^ aes::kRcon[r];
    col = prev;
  }
  Block key;
  for (int c = 0; c < 4; ++c) aes::unpack(col[c], &key[4 * c]);
  return key;
}

// T-table AES-128 encryption. Besides the ciphertext, returns the exact
// sequence of table lookups performed, in execution order.
inline std::pair<Block, AccessScript> ttable_encrypt(const Block& pt,
                                                     const AesKeySchedule& ks) {
  AccessScript script;
  script.entries.reserve(160);
  std::array<std::uint32_t, 4> w{};
  auto rk0 = ks.round_words(0);
  for (int c = 0; c < 4; ++c) w[c] = aes::pack(&pt[4 * c]) ^ rk0[c];

  for (int r = 1; r <= 9; ++r) {
    auto rk = ks.round_words(r);
    std::array<std::uint32_t, 4> y{};
    for (int c = 0; c < 4; ++c) {
      std::uint32_t acc = rk[c];
      for (int j = 0; j < 4; ++j) {
        int src = (c + j) & 3;
        std::uint8_t idx = aes::word_byte(w[src], j);
        acc ^= aes::te_table(j)[idx];
        script.entries.push_back({static_cast<std::uint8_t>(r),
                                  static_cast<TableId>(j),
                                  static_cast<std::uint8_t>(4 * src + j), idx});
      }
      y[c] = acc;
    }
    w = y;
  }

  Block ct{};
  auto rk10 = ks.round_words(10);
  for (int c = 0; c < 4; ++c) {
    for (int j = 0; j < 4; ++j) {
      int src = (c + j) & 3;
      std::uint8_t idx = aes::word_byte(w[src], j);
      ct[4 * c + j] = aes::kSbox[idx] ^ aes::word_byte(rk10[c], j);
      script.entries.push_back({10, TableId::FE,
                                static_cast<std::uint8_t>(4 * src + j), idx});
    }
  }
  return {ct, std::move(script)};
}

// Equivalent-inverse-cipher decryption over the Td tables.
inline std::pair<Block, AccessScript> ttable_decrypt(const Block& ct,
                                                     const AesKeySchedule& ks) {
  AccessScript script;
  script.entries.reserve(160);
  std::array<std::uint32_t, 4> w{};
  auto ik0 = ks.inverse_round_words(0);
  for (int c = 0; c < 4; ++c) w[c] = aes::pack(&ct[4 * c]) ^ ik0[c];

  for (int r = 1; r <= 9; ++r) {
    auto ik = ks.inverse_round_words(r);
    std::array<std::uint32_t, 4> y{};
    for (int c = 0; c < 4; ++c) {
      std::uint32_t acc = ik[c];
      for (int j = 0; j < 4; ++j) {
        int src = (c - j) & 3;
        std::uint8_t idx = aes::word_byte(w[src], j);
        acc ^= aes::td_table(j)[idx];
        script.entries.push_back(
            {static_cast<std::uint8_t>(r),
             static_cast<TableId>(static_cast<int>(TableId::TD0) + j),
             static_cast<std::uint8_t>(4 * src + j), idx});
      }
      y[c] = acc;
    }
    w = y;
  }

  Block pt{};
  auto ik10 = ks.inverse_round_words(10);
  for (int c = 0; c < 4; ++c) {
    for (int j = 0; j < 4; ++j) {
      int src = (c - j) & 3;
      std::uint8_t idx = aes::word_byte(w[src], j);
      pt[4 * c + j] = aes::kInvSbox[idx] ^ aes::word_byte(ik10[c], j);
      script.entries.push_back({10, TableId::FD,
                                static_cast<std::uint8_t>(4 * src + j), idx});
    }
  }
  return {pt, std::move(script)};
}

// Guest-memory placement of the ten tables, 1 KiB each, line aligned. The
// alignment makes table line l coincide with probe slot l.
struct TTableSet {
  std::array<Gpa, kTableCount> base{};

  Gpa base_of(TableId t) const { return base[static_cast<int>(t)]; }

  Gpa entry_address(TableId t, std::uint8_t index) const {
    return base_of(t) + 4ull * index;
  }

  void validate() const {
    for (auto b : base) {
      if (b % kTableBytes != 0)
        throw std::invalid_argument("table base must be 1 KiB aligned");
    }
  }

  // Four tables per page starting at table_base: te0..te3, then fe (own
  // page), td0..td3, then fd.
  static TTableSet contiguous(Gpa table_base) {
    if (table_base % kPageSize != 0)
      throw std::invalid_argument("table base must be page aligned");
    TTableSet t;
    t.base[0] = table_base + 0 * kTableBytes;   // te0..te3: page 0
    t.base[1] = table_base + 1 * kTableBytes;
    t.base[2] = table_base + 2 * kTableBytes;
    t.base[3] = table_base + 3 * kTableBytes;
    t.base[4] = table_base + 4 * kTableBytes;   // fe: page 1
    t.base[5] = table_base + 8 * kTableBytes;   // td0..td3: page 2
    t.base[6] = table_base + 9 * kTableBytes;
    t.base[7] = table_base + 10 * kTableBytes;
    t.base[8] = table_base + 11 * kTableBytes;
    t.base[9] = table_base + 12 * kTableBytes;  // fd: page 3
    return t;
  }

  std::vector<Gpa> pages() const {
    std::vector<Gpa> out;
    for (auto b : base) {
      Gpa p = page_of(b);
      bool seen = false;
      for (auto q : out) seen |= (q == p);
      if (!seen) out.push_back(p);
    }
    return out;
  }
};

}  // namespace stepsim
