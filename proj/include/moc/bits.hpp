#pragma once

// MSB-first bit packing, big-endian integer helpers and the BinaryTemplate
// value type shared by host and card code.

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace moc {

using Byte = std::uint8_t;
using Bytes = std::vector<Byte>;

class CodecError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Template lengths the protocol supports (HashLenBits field).
inline constexpr std::array<unsigned, 4> kSupportedLengths{16, 32, 64, 128};
inline constexpr std::size_t kMaxTemplateBytes = 16;

constexpr bool is_supported_length(unsigned length_bits) noexcept {
  for (unsigned l : kSupportedLengths) {
    if (l == length_bits) return true;
  }
  return false;
}

/// Packs bits (each 0 or 1) MSB-first: bit 8i lands in the top bit of byte i.
inline Bytes pack_bits(std::span<const std::uint8_t> bits) {
  if (bits.size() % 8 != 0) {
    throw CodecError("pack_bits: bit count " + std::to_string(bits.size()) +
                     " is not a multiple of 8");
  }
  Bytes out(bits.size() / 8, 0);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    if (bits[i] != 0) out[i / 8] |= static_cast<Byte>(0x80u >> (i % 8));
  }
  return out;
}

inline std::vector<std::uint8_t> unpack_bits(std::span<const Byte> bytes) {
  std::vector<std::uint8_t> bits(bytes.size() * 8);
  for (std::size_t i = 0; i < bits.size(); ++i) {
    bits[i] = (bytes[i / 8] >> (7 - i % 8)) & 1u;
  }
  return bits;
}

inline void put_u16_be(Bytes& out, std::uint16_t v) {
  out.push_back(static_cast<Byte>(v >> 8));
  out.push_back(static_cast<Byte>(v & 0xFF));
}

constexpr std::uint16_t get_u16_be(std::span<const Byte> in, std::size_t offset) {
  return static_cast<std::uint16_t>((in[offset] << 8) | in[offset + 1]);
}

/// L bits packed into L/8 bytes. Construction validates the length.
class BinaryTemplate {
 public:
  BinaryTemplate() = default;

  static BinaryTemplate from_bits(std::span<const std::uint8_t> bits) {
    check_length(static_cast<unsigned>(bits.size()));
    BinaryTemplate t;
    t.length_bits_ = static_cast<unsigned>(bits.size());
    t.bytes_ = pack_bits(bits);
    return t;
  }

  static BinaryTemplate from_bytes(std::span<const Byte> bytes) {
    check_length(static_cast<unsigned>(bytes.size() * 8));
    BinaryTemplate t;
    t.length_bits_ = static_cast<unsigned>(bytes.size() * 8);
    t.bytes_.assign(bytes.begin(), bytes.end());
    return t;
  }

  unsigned length_bits() const noexcept { return length_bits_; }
  std::size_t byte_length() const noexcept { return bytes_.size(); }
  const Bytes& bytes() const noexcept { return bytes_; }
  std::vector<std::uint8_t> bits() const { return unpack_bits(bytes_); }

  bool bit(std::size_t i) const { return (bytes_.at(i / 8) >> (7 - i % 8)) & 1u; }

  // Overwrites the stored bytes with zeros in place.
  void scrub() noexcept {
    volatile Byte* p = bytes_.data();
    for (std::size_t i = 0; i < bytes_.size(); ++i) p[i] = 0;
  }

  friend bool operator==(const BinaryTemplate&, const BinaryTemplate&) = default;

 private:
  static void check_length(unsigned length_bits) {
    if (!is_supported_length(length_bits)) {
      throw CodecError("unsupported template length " + std::to_string(length_bits) +
                       " bits (expected 16, 32, 64 or 128)");
    }
  }

  unsigned length_bits_ = 0;
  Bytes bytes_;
};

inline std::string to_hex(std::span<const Byte> bytes, bool spaced = false) {
  static constexpr char kDigits[] = "0123456789ABCDEF";
  std::string s;
  s.reserve(bytes.size() * 3);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    if (spaced && i != 0) s.push_back(' ');
    s.push_back(kDigits[bytes[i] >> 4]);
    s.push_back(kDigits[bytes[i] & 0xF]);
  }
  return s;
}

/// Accepts upper or lower case; whitespace between digits is ignored.
inline Bytes from_hex(std::string_view hex) {
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  Bytes out;
  int hi = -1;
  for (char c : hex) {
    if (c == ' ' || c == '\t' || c == '\n' || c == '\r') continue;
    int v = nibble(c);
    if (v < 0) throw CodecError(std::string("invalid hex digit '") + c + "'");
    if (hi < 0) {
      hi = v;
    } else {
      out.push_back(static_cast<Byte>((hi << 4) | v));
      hi = -1;
    }
  }
  if (hi >= 0) throw CodecError("odd number of hex digits");
  return out;
}

}  // namespace moc
