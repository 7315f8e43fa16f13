#pragma once

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "stepsim/aes.hpp"
#include "stepsim/types.hpp"

namespace stepsim {

// XTS-plain64 context. In the concatenated 32-byte key blob the data key
// comes first, the tweak key second.
struct XtsContext {
  Block data_key{};
  Block tweak_key{};
  std::uint32_t sector_size = 512;

  void validate() const {
    if (sector_size == 0 || sector_size % 16 != 0)
      throw std::invalid_argument("sector size must be a positive multiple of 16");
  }

  static XtsContext from_blob(const std::array<std::uint8_t, 32>& blob,
                              std::uint32_t sector_size = 512) {
    XtsContext ctx;
    std::copy(blob.begin(), blob.begin() + 16, ctx.data_key.begin());
    std::copy(blob.begin() + 16, blob.end(), ctx.tweak_key.begin());
    ctx.sector_size = sector_size;
    return ctx;
  }
};

// Multiplication by alpha in GF(2^128) with the XTS bit order: byte 0 bit 0
// is the least significant coefficient, reduction folds 0x87 into byte 0.
inline Block xts_mul_alpha(const Block& in) {
  Block out{};
  std::uint8_t carry = 0;
  for (int i = 0; i < 16; ++i) {
    std::uint8_t b = in[i];
    out[i] = static_cast<std::uint8_t>((b << 1) | carry);
    carry = b >> 7;
  }
  if (carry) out[0] ^= 0x87;
  return out;
}

// plain64: the sector number as a little-endian 128-bit value.
inline Block xts_sector_iv(std::uint64_t sector) {
  Block iv{};
  for (int i = 0; i < 8; ++i) iv[i] = static_cast<std::uint8_t>(sector >> (8 * i));
  return iv;
}

struct XtsScripts {
  AccessScript tweak;                    // one tweak-generation encryption
  std::vector<AccessScript> payload;     // one per 16-byte block
  Block tweak0{};                        // first tweak value (ground truth)
};

inline void xor_block(Block& a, const Block& b) {
  for (int i = 0; i < 16; ++i) a[i] ^= b[i];
}

inline std::pair<std::vector<std::uint8_t>, XtsScripts> xts_encrypt_sector(
    const XtsContext& ctx, std::uint64_t sector,
    const std::vector<std::uint8_t>& plaintext) {
  ctx.validate();
  if (plaintext.size() != ctx.sector_size)
    throw std::invalid_argument("plaintext length must equal sector size");
  AesKeySchedule data_ks = aes128_expand_key(ctx.data_key);
  AesKeySchedule tweak_ks = aes128_expand_key(ctx.tweak_key);

  XtsScripts scripts;
  auto [tweak, tweak_script] = ttable_encrypt(xts_sector_iv(sector), tweak_ks);
  scripts.tweak = std::move(tweak_script);
  scripts.tweak0 = tweak;

  std::vector<std::uint8_t> out(plaintext.size());
  for (std::size_t j = 0; j * 16 < plaintext.size(); ++j) {
    Block b{};
    std::copy_n(plaintext.begin() + 16 * j, 16, b.begin());
    xor_block(b, tweak);
    auto [enc, script] = ttable_encrypt(b, data_ks);
    xor_block(enc, tweak);
    std::copy(enc.begin(), enc.end(), out.begin() + 16 * j);
    scripts.payload.push_back(std::move(script));
    tweak = xts_mul_alpha(tweak);
  }
  return {std::move(out), std::move(scripts)};
}

inline std::pair<std::vector<std::uint8_t>, XtsScripts> xts_decrypt_sector(
    const XtsContext& ctx, std::uint64_t sector,
    const std::vector<std::uint8_t>& ciphertext) {
  ctx.validate();
  if (ciphertext.size() != ctx.sector_size)
    throw std::invalid_argument("ciphertext length must equal sector size");
  AesKeySchedule data_ks = aes128_expand_key(ctx.data_key);
  AesKeySchedule tweak_ks = aes128_expand_key(ctx.tweak_key);

  XtsScripts scripts;
  auto [tweak, tweak_script] = ttable_encrypt(xts_sector_iv(sector), tweak_ks);
  scripts.tweak = std::move(tweak_script);
  scripts.tweak0 = tweak;

  std::vector<std::uint8_t> out(ciphertext.size());
  for (std::size_t j = 0; j * 16 < ciphertext.size(); ++j) {
    Block b{};
    std::copy_n(ciphertext.begin() + 16 * j, 16, b.begin());
    xor_block(b, tweak);
    auto [dec, script] = ttable_decrypt(b, data_ks);
    xor_block(dec, tweak);
    std::copy(dec.begin(), dec.end(), out.begin() + 16 * j);
    scripts.payload.push_back(std::move(script));
    tweak = xts_mul_alpha(tweak);
  }
  return {std::move(out), std::move(scripts)};
}

// Recomputes the tweak used for block j of a sector.
inline Block xts_tweak_for_block(const Block& tweak_key, std::uint64_t sector,
                                 std::size_t block) {
  AesKeySchedule ks = aes128_expand_key(tweak_key);
  Block tweak = ttable_encrypt(xts_sector_iv(sector), ks).first;
  for (std::size_t j = 0; j < block; ++j) tweak = xts_mul_alpha(tweak);
  return tweak;
}

}  // namespace stepsim
