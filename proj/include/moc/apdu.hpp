#pragma once

// Short-APDU framing and the ENROLL / VERIFY / REKEY payload layouts.
//
// Payloads come in two canonical sizes, selected by Lc alone:
//   short form: Version(1) HashLenBits(1) RotationID(2) template(L/8)
//   long form:  Version(1) HashLenBits(1) RotationID(2) SaltID(2) TemplateID(2) template(L/8)
// All multi-byte integers are big-endian.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <variant>

#include "moc/bits.hpp"

namespace moc {

inline constexpr Byte kCla = 0x80;
inline constexpr Byte kProtocolVersion = 0x01;

enum class Ins : Byte {
  kEnrollTemplate = 0x10,
  kVerifyBinary = 0x20,
  kRekeyRotation = 0x30,
};

namespace sw {
inline constexpr std::uint16_t kOk = 0x9000;
inline constexpr std::uint16_t kConditionsNotSatisfied = 0x6985;
inline constexpr std::uint16_t kWrongData = 0x6A80;
inline constexpr std::uint16_t kRecordNotFound = 0x6A82;
inline constexpr std::uint16_t kNotEnoughMemory = 0x6A84;
inline constexpr std::uint16_t kSecurityStatusNotSatisfied = 0x6982;
inline constexpr std::uint16_t kWrongLength = 0x6700;
inline constexpr std::uint16_t kInsNotSupported = 0x6D00;

inline constexpr std::array<std::uint16_t, 8> kAll{
    kOk,          kConditionsNotSatisfied,     kWrongData,  kRecordNotFound,
    kNotEnoughMemory, kSecurityStatusNotSatisfied, kWrongLength, kInsNotSupported};

constexpr bool is_known(std::uint16_t value) noexcept {
  for (auto v : kAll) {
    if (v == value) return true;
  }
  return false;
}

inline std::string name(std::uint16_t value) {
  switch (value) {
    case kOk: return "OK";
    case kConditionsNotSatisfied: return "conditions not satisfied";
    case kWrongData: return "wrong data";
    case kRecordNotFound: return "record not found";
    case kNotEnoughMemory: return "not enough memory space";
    case kSecurityStatusNotSatisfied: return "security status not satisfied";
    case kWrongLength: return "wrong length";
    case kInsNotSupported: return "instruction not supported";
    default: return "unknown";
  }
}
}  // namespace sw

struct ApduCommand {
  Byte cla = kCla;
  Byte ins = 0;
  Byte p1 = 0;
  Byte p2 = 0;
  Bytes data;
  std::optional<Byte> le;

  friend bool operator==(const ApduCommand&, const ApduCommand&) = default;
};

struct ApduResponse {
  Bytes data;
  std::uint16_t sw = sw::kOk;

  Bytes serialize() const {
    Bytes out = data;
    put_u16_be(out, sw);
    return out;
  }

  friend bool operator==(const ApduResponse&, const ApduResponse&) = default;
};

enum class DecodeError {
  kFraming,  // header or Lc/Le inconsistent with the frame size
  kLength,   // payload size is not one of the canonical sizes
  kFormat,   // version or HashLenBits not supported
};

constexpr std::uint16_t status_for(DecodeError e) noexcept {
  return e == DecodeError::kFormat ? sw::kWrongData : sw::kWrongLength;
}

template <class T>
using Decoded = std::variant<T, DecodeError>;

/// Total parser for short APDUs:
///   4 bytes          header only
///   5 bytes          header + Le
///   5 + Lc           header + Lc + data
///   6 + Lc           header + Lc + data + Le
/// Anything else is a framing error.
inline Decoded<ApduCommand> parse_command(std::span<const Byte> raw) {
  if (raw.size() < 4) return DecodeError::kFraming;
  ApduCommand cmd{raw[0], raw[1], raw[2], raw[3], {}, std::nullopt};
  if (raw.size() == 4) return cmd;
  if (raw.size() == 5) {
    cmd.le = raw[4];
    return cmd;
  }
  const std::size_t lc = raw[4];
  if (lc == 0) return DecodeError::kFraming;
  if (raw.size() == 5 + lc) {
    cmd.data.assign(raw.begin() + 5, raw.end());
  } else if (raw.size() == 6 + lc) {
    cmd.data.assign(raw.begin() + 5, raw.end() - 1);
    cmd.le = raw.back();
  } else {
    return DecodeError::kFraming;
  }
  return cmd;
}

inline Bytes serialize_command(const ApduCommand& cmd) {
  if (cmd.data.size() > 255) {
    throw CodecError("command data of " + std::to_string(cmd.data.size()) +
                     " bytes exceeds short APDU limit");
  }
  Bytes out{cmd.cla, cmd.ins, cmd.p1, cmd.p2};
  if (!cmd.data.empty()) {
    out.push_back(static_cast<Byte>(cmd.data.size()));
    out.insert(out.end(), cmd.data.begin(), cmd.data.end());
  }
  if (cmd.le) out.push_back(*cmd.le);
  return out;
}

// ENROLL_TEMPLATE and VERIFY_BINARY share one layout.
struct TemplatePayload {
  Byte version = kProtocolVersion;
  std::uint16_t rotation_id = 0;
  std::optional<std::uint16_t> salt_id;
  std::optional<std::uint16_t> template_id;
  BinaryTemplate templ;

  unsigned hash_len_bits() const noexcept { return templ.length_bits(); }
  bool long_form() const noexcept { return salt_id.has_value() || template_id.has_value(); }

  friend bool operator==(const TemplatePayload&, const TemplatePayload&) = default;
};

using EnrollPayload = TemplatePayload;
using VerifyPayload = TemplatePayload;

inline constexpr std::size_t kShortHeaderBytes = 4;
inline constexpr std::size_t kLongHeaderBytes = 8;

/// Long form is emitted whenever either optional field is set; an unset field
/// is written as zero.
inline Bytes encode_template_payload(const TemplatePayload& p) {
  Bytes out{p.version, static_cast<Byte>(p.templ.length_bits())};
  put_u16_be(out, p.rotation_id);
  if (p.long_form()) {
    put_u16_be(out, p.salt_id.value_or(0));
    put_u16_be(out, p.template_id.value_or(0));
  }
  out.insert(out.end(), p.templ.bytes().begin(), p.templ.bytes().end());
  return out;
}

inline Decoded<TemplatePayload> decode_template_payload(std::span<const Byte> data) {
  if (data.size() < 2) return DecodeError::kLength;
  if (data[0] != kProtocolVersion) return DecodeError::kFormat;
  const unsigned bits = data[1];
  if (!is_supported_length(bits)) return DecodeError::kFormat;
  const std::size_t tbytes = bits / 8;

  std::size_t header = 0;
  if (data.size() == kShortHeaderBytes + tbytes) {
    header = kShortHeaderBytes;
  } else if (data.size() == kLongHeaderBytes + tbytes) {
    header = kLongHeaderBytes;
  } else {
    return DecodeError::kLength;
  }

  TemplatePayload p;
  p.version = data[0];
  p.rotation_id = get_u16_be(data, 2);
  if (header == kLongHeaderBytes) {
    p.salt_id = get_u16_be(data, 4);
    p.template_id = get_u16_be(data, 6);
  }
  p.templ = BinaryTemplate::from_bytes(data.subspan(header, tbytes));
  return p;
}

inline Bytes encode_enroll_payload(const EnrollPayload& p) { return encode_template_payload(p); }
inline Bytes encode_verify_payload(const VerifyPayload& p) { return encode_template_payload(p); }
inline Decoded<EnrollPayload> decode_enroll_payload(std::span<const Byte> d) {
  return decode_template_payload(d);
}
inline Decoded<VerifyPayload> decode_verify_payload(std::span<const Byte> d) {
  return decode_template_payload(d);
}

struct RekeyPayload {
  std::uint16_t new_rotation_id = 0;
  friend bool operator==(const RekeyPayload&, const RekeyPayload&) = default;
};

inline Bytes encode_rekey_payload(const RekeyPayload& p) {
  Bytes out;
  put_u16_be(out, p.new_rotation_id);
  return out;
}

inline Decoded<RekeyPayload> decode_rekey_payload(std::span<const Byte> data) {
  if (data.size() != 2) return DecodeError::kLength;
  return RekeyPayload{get_u16_be(data, 0)};
}

inline ApduCommand make_enroll_command(const EnrollPayload& p) {
  return {kCla, static_cast<Byte>(Ins::kEnrollTemplate), 0, 0, encode_enroll_payload(p), std::nullopt};
}

inline ApduCommand make_verify_command(const VerifyPayload& p) {
  return {kCla, static_cast<Byte>(Ins::kVerifyBinary), 0, 0, encode_verify_payload(p), std::nullopt};
}

inline ApduCommand make_rekey_command(const RekeyPayload& p) {
  return {kCla, static_cast<Byte>(Ins::kRekeyRotation), 0, 0, encode_rekey_payload(p), std::nullopt};
}

// Trace lines: "> 80 20 00 00 0C ..." for commands, "< 90 00" for responses.
inline std::string trace_command(std::span<const Byte> raw) { return "> " + to_hex(raw, true); }
inline std::string trace_response(const ApduResponse& r) { return "< " + to_hex(r.serialize(), true); }

}  // namespace moc
