#pragma once

#include <array>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace stepsim {

using Cycles = std::uint64_t;
using Gpa = std::uint64_t;    // guest-physical address
using Hpa = std::uint64_t;    // host-physical address
using Asid = std::uint32_t;

inline constexpr std::uint64_t kPageSize = 4096;
inline constexpr std::uint64_t kLineSize = 64;
inline constexpr Asid kHostAsid = 0;
inline constexpr Asid kGuestAsid = 1;

inline std::uint64_t page_of(std::uint64_t addr) { return addr >> 12; }
inline std::uint64_t page_base(std::uint64_t page) { return page << 12; }

// Simulated cycle counter. All latencies in the model are abstract cycles
// accumulating here; there is one clock per machine instance.
class Clock {
 public:
  Cycles now() const { return cycles_; }
  void advance(Cycles d) { cycles_ += d; }

 private:
  Cycles cycles_ = 0;
};

// rdpru-style timestamp read. Advances the clock by the read cost so
// consecutive reads are strictly monotone.
inline Cycles measure_time(Clock& clock, Cycles read_cost = 10) {
  clock.advance(read_cost);
  return clock.now();
}

// Deterministic per-purpose RNG streams derived from one master seed.
inline std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream) {
  std::uint64_t h = 1469598103934665603ull;
  for (char c : stream) {
    h ^= static_cast<std::uint8_t>(c);
    h *= 1099511628211ull;
  }
  std::uint64_t x = seed * 0x9e3779b97f4a7c15ull ^ h;
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  return x;
}

inline std::mt19937_64 make_rng(std::uint64_t seed, std::string_view stream) {
  return std::mt19937_64(derive_seed(seed, stream));
}

inline std::string to_hex(const std::uint8_t* data, std::size_t n) {
  static constexpr char digits[] = "0123456789abcdef";
  std::string out;
  out.reserve(2 * n);
  for (std::size_t i = 0; i < n; ++i) {
    out.push_back(digits[data[i] >> 4]);
    out.push_back(digits[data[i] & 0xf]);
  }
  return out;
}

template <std::size_t N>
std::string to_hex(const std::array<std::uint8_t, N>& a) {
  return to_hex(a.data(), N);
}

inline std::string to_hex(const std::vector<std::uint8_t>& v) {
  return to_hex(v.data(), v.size());
}

inline int hex_nibble(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  return -1;
}

inline std::vector<std::uint8_t> parse_hex(std::string_view s) {
  if (s.size() % 2 != 0) throw std::invalid_argument("odd hex string length");
  std::vector<std::uint8_t> out(s.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    int hi = hex_nibble(s[2 * i]);
    int lo = hex_nibble(s[2 * i + 1]);
    if (hi < 0 || lo < 0) throw std::invalid_argument("bad hex digit");
    out[i] = static_cast<std::uint8_t>(hi << 4 | lo);
  }
  return out;
}

template <std::size_t N>
std::array<std::uint8_t, N> parse_hex_array(std::string_view s) {
  auto v = parse_hex(s);
  if (v.size() != N) throw std::invalid_argument("hex string has wrong length");
  std::array<std::uint8_t, N> a{};
  std::copy(v.begin(), v.end(), a.begin());
  return a;
}

}  // namespace stepsim
