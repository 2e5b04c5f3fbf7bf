#include <gtest/gtest.h>

#include <random>

#include "moc/apdu.hpp"
#include "moc/bits.hpp"

namespace moc {
namespace {

Bytes random_bytes(std::mt19937_64& rng, std::size_t n) {
  Bytes b(n);
  for (auto& x : b) x = static_cast<Byte>(rng());
  return b;
}

TEST(PackBits, MsbFirst) {
  const std::vector<std::uint8_t> bits{1, 0, 1, 1, 0, 0, 0, 1};
  EXPECT_EQ(pack_bits(bits), Bytes{0xB1});
}

TEST(PackBits, ZeroBits) {
  const std::vector<std::uint8_t> bits(16, 0);
  EXPECT_EQ(pack_bits(bits), (Bytes{0x00, 0x00}));
}

TEST(PackBits, RejectsPartialByte) {
  const std::vector<std::uint8_t> bits(7, 1);
  EXPECT_THROW(pack_bits(bits), CodecError);
}

TEST(PackBits, RoundTripRandom64) {
  std::mt19937_64 rng(11);
  for (int i = 0; i < 1000; ++i) {
    std::vector<std::uint8_t> bits(64);
    for (auto& b : bits) b = rng() & 1;
    EXPECT_EQ(unpack_bits(pack_bits(bits)), bits);
  }
}

TEST(UnpackBits, Examples) {
  EXPECT_EQ(unpack_bits(Bytes{0xB1}), (std::vector<std::uint8_t>{1, 0, 1, 1, 0, 0, 0, 1}));
  EXPECT_EQ(unpack_bits(Bytes{0xFF}), std::vector<std::uint8_t>(8, 1));
}

TEST(UnpackBits, ExhaustiveSingleByte) {
  for (unsigned v = 0; v <= 0xFF; ++v) {
    const Bytes b{static_cast<Byte>(v)};
    EXPECT_EQ(pack_bits(unpack_bits(b)), b);
  }
}

TEST(BinaryTemplate, LengthValidation) {
  EXPECT_THROW(BinaryTemplate::from_bytes(Bytes(3, 0)), CodecError);
  EXPECT_THROW(BinaryTemplate::from_bytes(Bytes(0)), CodecError);
  for (unsigned l : kSupportedLengths) {
    EXPECT_EQ(BinaryTemplate::from_bytes(Bytes(l / 8, 0xA5)).byte_length(), l / 8);
  }
}

TEST(Hex, RoundTripAndTraceFormat) {
  const Bytes b{0x80, 0x20, 0x0C, 0xFF};
  EXPECT_EQ(to_hex(b, true), "80 20 0C FF");
  EXPECT_EQ(from_hex("80 20 0c ff"), b);
  EXPECT_THROW(from_hex("8"), CodecError);
  EXPECT_THROW(from_hex("zz"), CodecError);
  EXPECT_EQ(trace_response(ApduResponse{{}, sw::kRecordNotFound}), "< 6A 82");
}

TEST(ParseCommand, VerifyFrame) {
  Bytes raw{0x80, 0x20, 0x00, 0x00, 0x0C};
  for (int i = 0; i < 12; ++i) raw.push_back(static_cast<Byte>(i));
  auto parsed = parse_command(raw);
  ASSERT_TRUE(std::holds_alternative<ApduCommand>(parsed));
  const auto& cmd = std::get<ApduCommand>(parsed);
  EXPECT_EQ(cmd.cla, 0x80);
  EXPECT_EQ(cmd.ins, static_cast<Byte>(Ins::kVerifyBinary));
  EXPECT_EQ(cmd.data.size(), 12u);
  EXPECT_FALSE(cmd.le.has_value());
}

TEST(ParseCommand, LcMismatch) {
  Bytes raw{0x80, 0x20, 0x00, 0x00, 0x0C};
  raw.resize(raw.size() + 11, 0x00);
  auto parsed = parse_command(raw);
  ASSERT_TRUE(std::holds_alternative<DecodeError>(parsed));
  EXPECT_EQ(std::get<DecodeError>(parsed), DecodeError::kFraming);
}

TEST(ParseCommand, TooShort) {
  for (std::size_t n = 0; n < 4; ++n) {
    EXPECT_TRUE(std::holds_alternative<DecodeError>(parse_command(Bytes(n, 0x80))));
  }
}

TEST(ParseCommand, TrailingLe) {
  const Bytes raw{0x80, 0x30, 0x00, 0x00, 0x02, 0x00, 0x05, 0x00};
  auto parsed = parse_command(raw);
  ASSERT_TRUE(std::holds_alternative<ApduCommand>(parsed));
  EXPECT_EQ(std::get<ApduCommand>(parsed).le, Byte{0x00});
  EXPECT_EQ(std::get<ApduCommand>(parsed).data, (Bytes{0x00, 0x05}));
}

TEST(SerializeCommand, Rekey) {
  EXPECT_EQ(serialize_command(make_rekey_command({0x0002})),
            (Bytes{0x80, 0x30, 0x00, 0x00, 0x02, 0x00, 0x02}));
}

TEST(SerializeCommand, HeaderOnly) {
  const ApduCommand cmd{0x80, 0x10, 0x00, 0x00, {}, std::nullopt};
  EXPECT_EQ(serialize_command(cmd).size(), 4u);
}

TEST(SerializeCommand, RejectsOversizedData) {
  ApduCommand cmd;
  cmd.data.resize(256);
  EXPECT_THROW(serialize_command(cmd), CodecError);
}

TEST(SerializeCommand, RoundTripRandom) {
  std::mt19937_64 rng(5);
  for (int i = 0; i < 1000; ++i) {
    ApduCommand cmd;
    cmd.cla = static_cast<Byte>(rng());
    cmd.ins = static_cast<Byte>(rng());
    cmd.p1 = static_cast<Byte>(rng());
    cmd.p2 = static_cast<Byte>(rng());
    cmd.data = random_bytes(rng, rng() % 256);
    if (rng() & 1) cmd.le = static_cast<Byte>(rng());
    auto parsed = parse_command(serialize_command(cmd));
    ASSERT_TRUE(std::holds_alternative<ApduCommand>(parsed));
    EXPECT_EQ(std::get<ApduCommand>(parsed), cmd);
  }
}

TEST(ParseCommand, TotalOnRandomInput) {
  std::mt19937_64 rng(99);
  std::size_t ok = 0;
  for (int i = 0; i < 100000; ++i) {
    const Bytes raw = random_bytes(rng, rng() % 40);
    auto parsed = parse_command(raw);
    if (std::holds_alternative<ApduCommand>(parsed)) {
      ++ok;
      EXPECT_EQ(serialize_command(std::get<ApduCommand>(parsed)), raw);
    }
  }
  EXPECT_GT(ok, 0u);
}

TEST(TemplatePayload, ShortFormEnroll) {
  Bytes data{0x01, 0x40, 0x00, 0x01};
  for (int i = 0; i < 8; ++i) data.push_back(static_cast<Byte>(0x10 + i));
  auto decoded = decode_enroll_payload(data);
  ASSERT_TRUE(std::holds_alternative<EnrollPayload>(decoded));
  const auto& p = std::get<EnrollPayload>(decoded);
  EXPECT_EQ(p.hash_len_bits(), 64u);
  EXPECT_EQ(p.rotation_id, 1);
  EXPECT_FALSE(p.salt_id.has_value());
  EXPECT_FALSE(p.template_id.has_value());
  EXPECT_EQ(encode_enroll_payload(p), data);
}

TEST(TemplatePayload, TruncatedIsLengthError) {
  Bytes data{0x01, 0x40, 0x00, 0x01};
  data.resize(data.size() + 7, 0);
  auto decoded = decode_enroll_payload(data);
  ASSERT_TRUE(std::holds_alternative<DecodeError>(decoded));
  EXPECT_EQ(std::get<DecodeError>(decoded), DecodeError::kLength);
  EXPECT_EQ(status_for(DecodeError::kLength), sw::kWrongLength);
}

TEST(TemplatePayload, UnsupportedHashLenIsFormatError) {
  Bytes data{0x01, 0x21, 0x00, 0x01};
  data.resize(data.size() + 4, 0);
  auto decoded = decode_enroll_payload(data);
  ASSERT_TRUE(std::holds_alternative<DecodeError>(decoded));
  EXPECT_EQ(std::get<DecodeError>(decoded), DecodeError::kFormat);
  EXPECT_EQ(status_for(DecodeError::kFormat), sw::kWrongData);
}

TEST(TemplatePayload, WrongVersionIsFormatError) {
  Bytes data{0x02, 0x40, 0x00, 0x01};
  data.resize(12, 0);
  auto decoded = decode_verify_payload(data);
  ASSERT_TRUE(std::holds_alternative<DecodeError>(decoded));
  EXPECT_EQ(std::get<DecodeError>(decoded), DecodeError::kFormat);
}

TEST(TemplatePayload, LongFormLayout) {
  TemplatePayload p;
  p.rotation_id = 0x0102;
  p.salt_id = 0x0304;
  p.template_id = 0x0506;
  p.templ = BinaryTemplate::from_bytes(Bytes{0xAA, 0xBB});
  const Bytes enc = encode_verify_payload(p);
  EXPECT_EQ(enc, (Bytes{0x01, 0x10, 0x01, 0x02, 0x03, 0x04, 0x05, 0x06, 0xAA, 0xBB}));
  auto decoded = decode_verify_payload(enc);
  ASSERT_TRUE(std::holds_alternative<VerifyPayload>(decoded));
  EXPECT_EQ(std::get<VerifyPayload>(decoded), p);
}

TEST(TemplatePayload, RotationIdIsBigEndian) {
  TemplatePayload p;
  p.rotation_id = 0x0102;
  p.templ = BinaryTemplate::from_bytes(Bytes(8, 0));
  const Bytes enc = encode_enroll_payload(p);
  EXPECT_EQ(enc[2], 0x01);
  EXPECT_EQ(enc[3], 0x02);
}

TEST(TemplatePayload, ExactlyTwoCanonicalLengths) {
  for (unsigned l : kSupportedLengths) {
    std::vector<std::size_t> accepted;
    for (std::size_t n = 0; n <= 64; ++n) {
      Bytes data(n, 0x00);
      if (n >= 1) data[0] = kProtocolVersion;
      if (n >= 2) data[1] = static_cast<Byte>(l);
      if (std::holds_alternative<TemplatePayload>(decode_template_payload(data))) accepted.push_back(n);
    }
    EXPECT_EQ(accepted, (std::vector<std::size_t>{4 + l / 8, 8 + l / 8})) << "L=" << l;
  }
}

TEST(TemplatePayload, RoundTripRandom) {
  std::mt19937_64 rng(17);
  for (int i = 0; i < 1000; ++i) {
    TemplatePayload p;
    p.rotation_id = static_cast<std::uint16_t>(rng());
    if (rng() & 1) {
      p.salt_id = static_cast<std::uint16_t>(rng());
      p.template_id = static_cast<std::uint16_t>(rng());
    }
    const unsigned l = kSupportedLengths[rng() % 4];
    p.templ = BinaryTemplate::from_bytes(random_bytes(rng, l / 8));
    auto decoded = decode_template_payload(encode_template_payload(p));
    ASSERT_TRUE(std::holds_alternative<TemplatePayload>(decoded));
    EXPECT_EQ(std::get<TemplatePayload>(decoded), p);
  }
}

TEST(TemplatePayload, TotalOnRandomInput) {
  std::mt19937_64 rng(23);
  for (int i = 0; i < 100000; ++i) {
    Bytes data = random_bytes(rng, rng() % 32);
    if (!data.empty() && (rng() & 1)) data[0] = kProtocolVersion;
    if (data.size() > 1 && (rng() & 1)) data[1] = static_cast<Byte>(kSupportedLengths[rng() % 4]);
    (void)decode_template_payload(data);
    (void)decode_rekey_payload(data);
  }
}

TEST(RekeyPayload, ExactLength) {
  auto ok = decode_rekey_payload(Bytes{0x00, 0x02});
  ASSERT_TRUE(std::holds_alternative<RekeyPayload>(ok));
  EXPECT_EQ(std::get<RekeyPayload>(ok).new_rotation_id, 2);
  EXPECT_TRUE(std::holds_alternative<DecodeError>(decode_rekey_payload(Bytes{0x00, 0x02, 0x03})));
  EXPECT_TRUE(std::holds_alternative<DecodeError>(decode_rekey_payload(Bytes{0x00})));
}

}  // namespace
}  // namespace moc
