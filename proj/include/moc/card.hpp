#pragma once

// Simulated secure element: EEPROM-model record store, constant-time Hamming
// verification and decision-only status words.

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>

#include "moc/apdu.hpp"
#include "moc/bits.hpp"

namespace moc {

inline constexpr std::size_t kRotationIdBytes = 2;
inline constexpr std::size_t kPolicyFlagBytes = 1;
inline constexpr std::size_t kMinTagBytes = 8;
inline constexpr std::size_t kMaxTagBytes = 16;

/// Per-identity EEPROM footprint: template + RotationID + policy flags
/// (+ optional integrity tag).
constexpr std::size_t record_footprint(unsigned length_bits, std::size_t tag_bytes = 0) {
  return length_bits / 8 + kRotationIdBytes + kPolicyFlagBytes + tag_bytes;
}

struct CardConfig {
  std::map<unsigned, unsigned> thresholds{{16, 5}, {32, 11}, {64, 23}, {128, 51}};
  std::size_t eeprom_quota_bytes = 256;
  bool require_issuer_auth_for_enroll = false;
  // Consecutive rejected VERIFY attempts allowed before lockout.
  std::optional<unsigned> rate_limit;
  // 0 (no tag) or 8..16 reserved bytes per record.
  std::size_t integrity_tag_bytes = 0;
  Byte default_policy_flags = 0;

  void validate() const {
    for (auto [bits, tau] : thresholds) {
      if (!is_supported_length(bits)) {
        throw std::invalid_argument("threshold for unsupported length " + std::to_string(bits));
      }
      if (tau > bits) {
        throw std::invalid_argument("tau " + std::to_string(tau) + " exceeds L=" + std::to_string(bits));
      }
    }
    if (integrity_tag_bytes != 0 &&
        (integrity_tag_bytes < kMinTagBytes || integrity_tag_bytes > kMaxTagBytes)) {
      throw std::invalid_argument("integrity tag must be 0 or 8..16 bytes");
    }
  }

  friend bool operator==(const CardConfig&, const CardConfig&) = default;
};

struct TemplateRecord {
  BinaryTemplate templ;
  std::uint16_t rotation_id = 0;
  Byte policy_flags = 0;
  std::optional<std::uint16_t> salt_id;
  std::optional<std::uint16_t> template_id;
  Bytes integrity_tag;  // opaque, reserved

  std::size_t footprint() const { return record_footprint(templ.length_bits(), integrity_tag.size()); }

  friend bool operator==(const TemplateRecord&, const TemplateRecord&) = default;
};

// Records are keyed by TemplateID; single-record mode uses kDefaultSlot.
inline constexpr std::uint32_t kDefaultSlot = 0x10000;

struct CardState {
  CardConfig config;
  std::map<std::uint32_t, TemplateRecord> records;
  std::optional<std::uint16_t> active_rotation_id;
  bool issuer_authenticated = false;
  unsigned verify_attempt_counter = 0;
  std::array<Byte, kMaxTemplateBytes> probe_buffer{};

  std::size_t used_bytes() const {
    std::size_t total = 0;
    for (const auto& [key, rec] : records) total += rec.footprint();
    return total;
  }

  friend bool operator==(const CardState&, const CardState&) = default;
};

/// Byte-level operation tally for the verify path.
struct OpCounter {
  std::uint64_t xors = 0;
  std::uint64_t popcounts = 0;
  std::uint64_t compares = 0;
  std::uint64_t buffer_writes = 0;

  friend bool operator==(const OpCounter&, const OpCounter&) = default;
};

namespace detail {

// Branch-free byte popcount.
constexpr unsigned popcount8(Byte v) noexcept {
  unsigned x = v;
  x = x - ((x >> 1) & 0x55u);
  x = (x & 0x33u) + ((x >> 2) & 0x33u);
  return (x + (x >> 4)) & 0x0Fu;
}

// All-ones when a <= b, else zero; no branches.
constexpr std::uint32_t le_mask(std::uint32_t a, std::uint32_t b) noexcept {
  // b - a borrows into bit 32 iff a > b.
  const std::uint64_t diff = static_cast<std::uint64_t>(b) - static_cast<std::uint64_t>(a);
  const std::uint32_t borrow = static_cast<std::uint32_t>(diff >> 63);
  return borrow - 1u;
}

inline void secure_zero(std::span<Byte> buf, OpCounter* ops) noexcept {
  volatile Byte* p = buf.data();
  for (std::size_t i = 0; i < buf.size(); ++i) p[i] = 0;
  if (ops) ops->buffer_writes += buf.size();
}

}  // namespace detail

/// popcount(a XOR b) with a fixed loop over the byte length.
inline unsigned hamming_ct(std::span<const Byte> a, std::span<const Byte> b, OpCounter* ops = nullptr) {
  if (a.size() != b.size()) {
    throw std::logic_error("hamming_ct: operand lengths differ");
  }
  unsigned distance = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    distance += detail::popcount8(static_cast<Byte>(a[i] ^ b[i]));
  }
  if (ops) {
    ops->xors += a.size();
    ops->popcounts += a.size();
  }
  return distance;
}

/// Decision status word for distance vs threshold, selected without branching.
inline std::uint16_t decide_ct(unsigned distance, unsigned tau, OpCounter* ops = nullptr) noexcept {
  const std::uint32_t accept = detail::le_mask(distance, tau);
  if (ops) ops->compares += 1;
  constexpr std::uint32_t kFlip = sw::kOk ^ sw::kConditionsNotSatisfied;
  return static_cast<std::uint16_t>(sw::kConditionsNotSatisfied ^ (accept & kFlip));
}

inline std::uint16_t handle_enroll(CardState& state, const EnrollPayload& p) {
  if (state.config.require_issuer_auth_for_enroll && !state.issuer_authenticated) {
    return sw::kSecurityStatusNotSatisfied;
  }
  if (!state.config.thresholds.contains(p.hash_len_bits())) return sw::kWrongData;
  if (state.active_rotation_id && *state.active_rotation_id != p.rotation_id) return sw::kWrongData;

  const std::uint32_t key = p.template_id ? *p.template_id : kDefaultSlot;
  TemplateRecord rec{p.templ,     p.rotation_id, state.config.default_policy_flags,
                     p.salt_id,   p.template_id, Bytes(state.config.integrity_tag_bytes, 0)};

  std::size_t used = state.used_bytes();
  if (auto it = state.records.find(key); it != state.records.end()) used -= it->second.footprint();
  if (used + rec.footprint() > state.config.eeprom_quota_bytes) return sw::kNotEnoughMemory;

  state.records.insert_or_assign(key, std::move(rec));
  return sw::kOk;
}

inline std::uint16_t handle_verify(CardState& state, const VerifyPayload& p, OpCounter* ops = nullptr) {
  const std::uint32_t key = p.template_id ? *p.template_id : kDefaultSlot;
  const auto it = state.records.find(key);
  if (it == state.records.end() || it->second.templ.length_bits() != p.hash_len_bits()) {
    return sw::kRecordNotFound;
  }
  const TemplateRecord& rec = it->second;
  if (rec.rotation_id != p.rotation_id || rec.salt_id.value_or(0) != p.salt_id.value_or(0)) {
    return sw::kWrongData;
  }
  const auto tau_it = state.config.thresholds.find(p.hash_len_bits());
  if (tau_it == state.config.thresholds.end()) return sw::kWrongData;

  if (state.config.rate_limit && state.verify_attempt_counter >= *state.config.rate_limit) {
    return sw::kConditionsNotSatisfied;
  }

  const std::size_t n = p.templ.byte_length();
  std::span<Byte> probe(state.probe_buffer.data(), n);
  std::copy_n(p.templ.bytes().begin(), n, probe.begin());
  if (ops) ops->buffer_writes += n;

  const unsigned distance = hamming_ct(probe, rec.templ.bytes(), ops);
  const std::uint16_t status = decide_ct(distance, tau_it->second, ops);
  detail::secure_zero(state.probe_buffer, ops);

  state.verify_attempt_counter = status == sw::kOk ? 0 : state.verify_attempt_counter + 1;
  return status;
}

inline std::uint16_t handle_rekey(CardState& state, const RekeyPayload& p) {
  if (state.config.require_issuer_auth_for_enroll && !state.issuer_authenticated) {
    return sw::kSecurityStatusNotSatisfied;
  }
  for (auto& [key, rec] : state.records) {
    rec.templ.scrub();
    rec.rotation_id = 0;
  }
  state.records.clear();
  state.active_rotation_id = p.new_rotation_id;
  state.verify_attempt_counter = 0;
  return sw::kOk;
}

/// Applies one raw command to the state. Never throws; every outcome is a
/// status word and the response never carries data.
inline ApduResponse process_in_place(CardState& state, std::span<const Byte> raw, OpCounter* ops = nullptr) {
  auto respond = [&](std::uint16_t status) {
    detail::secure_zero(state.probe_buffer, nullptr);
    return ApduResponse{{}, status};
  };

  if (raw.size() < 4) return respond(sw::kWrongLength);
  if (raw[0] != kCla) return respond(sw::kInsNotSupported);
  const Byte ins = raw[1];
  if (ins != static_cast<Byte>(Ins::kEnrollTemplate) && ins != static_cast<Byte>(Ins::kVerifyBinary) &&
      ins != static_cast<Byte>(Ins::kRekeyRotation)) {
    return respond(sw::kInsNotSupported);
  }

  auto parsed = parse_command(raw);
  if (auto* err = std::get_if<DecodeError>(&parsed)) return respond(status_for(*err));
  const ApduCommand& cmd = std::get<ApduCommand>(parsed);
  if (cmd.le && *cmd.le != 0x00) return respond(sw::kWrongLength);
  if (cmd.p1 != 0 || cmd.p2 != 0) return respond(sw::kWrongData);

  switch (static_cast<Ins>(ins)) {
    case Ins::kEnrollTemplate: {
      auto p = decode_enroll_payload(cmd.data);
      if (auto* err = std::get_if<DecodeError>(&p)) return respond(status_for(*err));
      return respond(handle_enroll(state, std::get<EnrollPayload>(p)));
    }
    case Ins::kVerifyBinary: {
      auto p = decode_verify_payload(cmd.data);
      if (auto* err = std::get_if<DecodeError>(&p)) return respond(status_for(*err));
      return respond(handle_verify(state, std::get<VerifyPayload>(p), ops));
    }
    case Ins::kRekeyRotation: {
      auto p = decode_rekey_payload(cmd.data);
      if (auto* err = std::get_if<DecodeError>(&p)) return respond(status_for(*err));
      return respond(handle_rekey(state, std::get<RekeyPayload>(p)));
    }
  }
  return respond(sw::kInsNotSupported);
}

/// Pure form: (state, raw) -> (state', response).
inline std::pair<CardState, ApduResponse> process(CardState state, std::span<const Byte> raw) {
  ApduResponse r = process_in_place(state, raw);
  return {std::move(state), std::move(r)};
}

/// Owning wrapper around CardState with the simulator-level session API.
class Card {
 public:
  explicit Card(CardConfig config = {}) {
    config.validate();
    state_.config = std::move(config);
  }
  explicit Card(CardState state) : state_(std::move(state)) { state_.config.validate(); }

  ApduResponse process(std::span<const Byte> raw) { return process_in_place(state_, raw, &ops_); }
  ApduResponse process(const ApduCommand& cmd) { return process(serialize_command(cmd)); }

  // Issuer authentication is out of band; the simulator toggles it directly.
  void set_issuer_authenticated(bool on) { state_.issuer_authenticated = on; }
  void reset_session() {
    state_.issuer_authenticated = false;
    state_.verify_attempt_counter = 0;
  }

  const CardState& state() const noexcept { return state_; }
  std::span<const Byte> probe_buffer() const noexcept { return state_.probe_buffer; }

  const OpCounter& op_counter() const noexcept { return ops_; }
  void reset_op_counter() noexcept { ops_ = {}; }

 private:
  CardState state_;
  OpCounter ops_;
};

// Persistent card image: "MOCS" magic, version 1, big-endian integers.
namespace card_file {

inline constexpr std::array<Byte, 4> kMagic{'M', 'O', 'C', 'S'};
inline constexpr Byte kVersion = 1;

inline Bytes serialize(const CardState& s) {
  Bytes out(kMagic.begin(), kMagic.end());
  out.push_back(kVersion);
  const CardConfig& c = s.config;
  out.push_back(static_cast<Byte>(c.thresholds.size()));
  for (auto [bits, tau] : c.thresholds) {
    put_u16_be(out, static_cast<std::uint16_t>(bits));
    put_u16_be(out, static_cast<std::uint16_t>(tau));
  }
  put_u16_be(out, static_cast<std::uint16_t>(c.eeprom_quota_bytes >> 16));
  put_u16_be(out, static_cast<std::uint16_t>(c.eeprom_quota_bytes & 0xFFFF));
  out.push_back(c.require_issuer_auth_for_enroll ? 1 : 0);
  out.push_back(c.rate_limit ? 1 : 0);
  put_u16_be(out, static_cast<std::uint16_t>(c.rate_limit.value_or(0)));
  out.push_back(static_cast<Byte>(c.integrity_tag_bytes));
  out.push_back(c.default_policy_flags);

  out.push_back(s.active_rotation_id ? 1 : 0);
  put_u16_be(out, s.active_rotation_id.value_or(0));
  out.push_back(s.issuer_authenticated ? 1 : 0);
  put_u16_be(out, static_cast<std::uint16_t>(std::min(s.verify_attempt_counter, 0xFFFFu)));

  put_u16_be(out, static_cast<std::uint16_t>(s.records.size()));
  for (const auto& [key, rec] : s.records) {
    out.push_back(key == kDefaultSlot ? 1 : 0);
    put_u16_be(out, static_cast<std::uint16_t>(key & 0xFFFF));
    out.push_back(static_cast<Byte>(rec.templ.length_bits()));
    out.insert(out.end(), rec.templ.bytes().begin(), rec.templ.bytes().end());
    put_u16_be(out, rec.rotation_id);
    out.push_back(rec.policy_flags);
    out.push_back(rec.salt_id ? 1 : 0);
    put_u16_be(out, rec.salt_id.value_or(0));
    out.push_back(rec.template_id ? 1 : 0);
    put_u16_be(out, rec.template_id.value_or(0));
    out.push_back(static_cast<Byte>(rec.integrity_tag.size()));
    out.insert(out.end(), rec.integrity_tag.begin(), rec.integrity_tag.end());
  }
  return out;
}

inline CardState deserialize(std::span<const Byte> in) {
  std::size_t pos = 0;
  auto need = [&](std::size_t n) {
    if (pos + n > in.size()) throw CodecError("card image truncated");
  };
  auto u8 = [&]() -> Byte {
    need(1);
    return in[pos++];
  };
  auto u16 = [&]() -> std::uint16_t {
    need(2);
    auto v = get_u16_be(in, pos);
    pos += 2;
    return v;
  };
  auto raw = [&](std::size_t n) {
    need(n);
    Bytes b(in.begin() + pos, in.begin() + pos + n);
    pos += n;
    return b;
  };

  if (raw(4) != Bytes(kMagic.begin(), kMagic.end())) throw CodecError("not a card image (bad magic)");
  if (u8() != kVersion) throw CodecError("unsupported card image version");

  CardState s;
  CardConfig& c = s.config;
  c.thresholds.clear();
  const unsigned n_thresholds = u8();
  for (unsigned i = 0; i < n_thresholds; ++i) {
    unsigned bits = u16();
    c.thresholds[bits] = u16();
  }
  const std::size_t quota_hi = u16();
  c.eeprom_quota_bytes = (quota_hi << 16) | u16();
  c.require_issuer_auth_for_enroll = u8() != 0;
  const bool has_limit = u8() != 0;
  const unsigned limit = u16();
  if (has_limit) c.rate_limit = limit;
  c.integrity_tag_bytes = u8();
  c.default_policy_flags = u8();

  const bool has_active = u8() != 0;
  const std::uint16_t active = u16();
  if (has_active) s.active_rotation_id = active;
  s.issuer_authenticated = u8() != 0;
  s.verify_attempt_counter = u16();

  const unsigned n_records = u16();
  for (unsigned i = 0; i < n_records; ++i) {
    const bool default_slot = u8() != 0;
    const std::uint16_t key = u16();
    const unsigned bits = u8();
    if (!is_supported_length(bits)) throw CodecError("card image: bad template length");
    TemplateRecord rec;
    rec.templ = BinaryTemplate::from_bytes(raw(bits / 8));
    rec.rotation_id = u16();
    rec.policy_flags = u8();
    const bool has_salt = u8() != 0;
    const std::uint16_t salt = u16();
    if (has_salt) rec.salt_id = salt;
    const bool has_tid = u8() != 0;
    const std::uint16_t tid = u16();
    if (has_tid) rec.template_id = tid;
    rec.integrity_tag = raw(u8());
    s.records.emplace(default_slot ? kDefaultSlot : std::uint32_t{key}, std::move(rec));
  }
  if (pos != in.size()) throw CodecError("card image has trailing bytes");
  c.validate();
  return s;
}

}  // namespace card_file

}  // namespace moc
