#pragma once

// Transport-bounded latency: T_total = T_io(wire bytes, bitrate) + T_card.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "moc/bits.hpp"

namespace moc {

inline constexpr double kCardBudgetMs = 0.128;
inline constexpr unsigned kStatusWordBytes = 2;

enum class LinkStandard { kContact, kContactless };

inline std::string to_string(LinkStandard s) {
  return s == LinkStandard::kContact ? "contact" : "contactless";
}

inline LinkStandard link_standard_from_string(const std::string& s) {
  if (s == "contact") return LinkStandard::kContact;
  if (s == "contactless") return LinkStandard::kContactless;
  throw std::invalid_argument("unknown link standard '" + s + "'");
}

struct LinkProfile {
  std::string name;
  LinkStandard standard = LinkStandard::kContact;
  double bitrate = 9600;  // bits/s
  double bits_per_byte = 10;
  unsigned per_transaction_overhead_bytes = 0;
  // Command-data header carried ahead of the template (4 for short-form VERIFY).
  unsigned payload_header_bytes = 0;

  void validate() const {
    static constexpr double kContactRates[] = {9600, 38400, 115200};
    static constexpr double kContactlessRates[] = {106000, 212000, 424000, 848000};
    const bool contact = standard == LinkStandard::kContact;
    const auto* begin = contact ? std::begin(kContactRates) : std::begin(kContactlessRates);
    const auto* end = contact ? std::end(kContactRates) : std::end(kContactlessRates);
    if (std::find(begin, end, bitrate) == end) {
      throw std::invalid_argument("profile '" + name + "': bitrate " + std::to_string(bitrate) +
                                  " is not a supported " + to_string(standard) + " rate");
    }
    if (!(bits_per_byte >= 8)) throw std::invalid_argument("profile '" + name + "': bits_per_byte must be >= 8");
  }
};

/// Bytes on the link for one VERIFY exchange.
inline unsigned wire_bytes(unsigned length_bits, unsigned helper_bytes, const LinkProfile& p) {
  if (!is_supported_length(length_bits)) {
    throw std::invalid_argument("unsupported template length " + std::to_string(length_bits));
  }
  return length_bits / 8 + helper_bytes + p.payload_header_bytes + kStatusWordBytes +
         p.per_transaction_overhead_bytes;
}

inline double t_io_ms(unsigned length_bits, unsigned helper_bytes, const LinkProfile& p) {
  return static_cast<double>(wire_bytes(length_bits, helper_bytes, p)) * p.bits_per_byte / p.bitrate * 1000.0;
}

inline double t_total_ms(unsigned length_bits, unsigned helper_bytes, const LinkProfile& p) {
  return t_io_ms(length_bits, helper_bytes, p) + kCardBudgetMs;
}

// Contact links use 10 bits/byte serial framing; the 28-byte overhead plus
// the 4-byte VERIFY data header gives 42 wire bytes for a 64-bit template.
inline LinkProfile calibrated_contact(double bitrate) {
  char name[32];
  std::snprintf(name, sizeof name, "contact-%g", bitrate / 1000.0);
  return {name, LinkStandard::kContact, bitrate, 10.0, 28, 4};
}

inline LinkProfile calibrated_contactless(double bitrate) {
  char name[32];
  std::snprintf(name, sizeof name, "contactless-%g", bitrate / 1000.0);
  return {name, LinkStandard::kContactless, bitrate, 8.0, 28, 4};
}

inline std::vector<LinkProfile> default_profiles() {
  std::vector<LinkProfile> out;
  for (double r : {9600.0, 38400.0, 115200.0}) out.push_back(calibrated_contact(r));
  for (double r : {106000.0, 212000.0, 424000.0, 848000.0}) out.push_back(calibrated_contactless(r));
  return out;
}

struct PayloadConfig {
  std::string label;
  unsigned length_bits = 64;
  unsigned helper_bytes = 0;
};

inline std::vector<PayloadConfig> default_payloads() {
  return {{"64b", 64, 0}, {"128b", 128, 0}, {"64b+6B", 64, 6}};
}

struct LatencyRow {
  std::string profile;
  LinkStandard standard = LinkStandard::kContact;
  double bitrate = 0;
  std::string config;
  unsigned length_bits = 0;
  unsigned helper_bytes = 0;
  unsigned n_bytes_on_wire = 0;
  double t_io_ms = 0;
  double t_card_ms = 0;
  double t_total_ms = 0;
};

using LatencyReport = std::vector<LatencyRow>;

/// Profiles x payload configurations, profile-major.
inline LatencyReport sweep(const std::vector<LinkProfile>& profiles, const std::vector<PayloadConfig>& configs) {
  if (profiles.empty() || configs.empty()) throw std::invalid_argument("sweep needs profiles and configurations");
  LatencyReport out;
  for (const auto& p : profiles) {
    p.validate();
    for (const auto& c : configs) {
      LatencyRow r;
      r.profile = p.name;
      r.standard = p.standard;
      r.bitrate = p.bitrate;
      r.config = c.label;
      r.length_bits = c.length_bits;
      r.helper_bytes = c.helper_bytes;
      r.n_bytes_on_wire = wire_bytes(c.length_bits, c.helper_bytes, p);
      r.t_io_ms = t_io_ms(c.length_bits, c.helper_bytes, p);
      r.t_card_ms = kCardBudgetMs;
      r.t_total_ms = r.t_io_ms + r.t_card_ms;
      out.push_back(std::move(r));
    }
  }
  return out;
}

inline LinkProfile profile_from_json(const nlohmann::json& j) {
  LinkProfile p;
  p.name = j.at("name").get<std::string>();
  p.standard = link_standard_from_string(j.at("standard").get<std::string>());
  p.bitrate = j.at("bitrate").get<double>();
  p.bits_per_byte = j.at("bits_per_byte").get<double>();
  p.per_transaction_overhead_bytes = j.at("per_transaction_overhead_bytes").get<unsigned>();
  p.payload_header_bytes = j.value("payload_header_bytes", 0u);
  p.validate();
  return p;
}

inline nlohmann::json to_json(const LinkProfile& p) {
  return {{"name", p.name},
          {"standard", to_string(p.standard)},
          {"bitrate", p.bitrate},
          {"bits_per_byte", p.bits_per_byte},
          {"per_transaction_overhead_bytes", p.per_transaction_overhead_bytes},
          {"payload_header_bytes", p.payload_header_bytes}};
}

/// Accepts either a bare array of profiles or {"profiles": [...]}.
inline std::vector<LinkProfile> profiles_from_json(const nlohmann::json& doc) {
  const nlohmann::json& list = doc.is_object() ? doc.at("profiles") : doc;
  if (!list.is_array()) throw std::invalid_argument("profile document must be a list");
  std::vector<LinkProfile> out;
  for (const auto& j : list) out.push_back(profile_from_json(j));
  if (out.empty()) throw std::invalid_argument("profile document is empty");
  return out;
}

inline std::string latency_csv(const LatencyReport& report) {
  std::string s = "profile,standard,bitrate,config,length_bits,helper_bytes,n_bytes_on_wire,t_io_ms,t_card_ms,t_total_ms\n";
  char buf[256];
  for (const auto& r : report) {
    std::snprintf(buf, sizeof buf, "%s,%s,%.0f,%s,%u,%u,%u,%.4f,%.4f,%.4f\n", r.profile.c_str(),
                  to_string(r.standard).c_str(), r.bitrate, r.config.c_str(), r.length_bits, r.helper_bytes,
                  r.n_bytes_on_wire, r.t_io_ms, r.t_card_ms, r.t_total_ms);
    s += buf;
  }
  return s;
}

inline nlohmann::json latency_json(const LatencyReport& report) {
  auto r4 = [](double v) { return std::round(v * 1e4) / 1e4; };
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& r : report) {
    rows.push_back({{"profile", r.profile},
                    {"standard", to_string(r.standard)},
                    {"bitrate", r.bitrate},
                    {"config", r.config},
                    {"length_bits", r.length_bits},
                    {"helper_bytes", r.helper_bytes},
                    {"n_bytes_on_wire", r.n_bytes_on_wire},
                    {"t_io_ms", r4(r.t_io_ms)},
                    {"t_card_ms", r4(r.t_card_ms)},
                    {"t_total_ms", r4(r.t_total_ms)}});
  }
  return {{"rows", rows}};
}

}  // namespace moc
