#pragma once

// Offline ROC / EER / TPR@FAR, synthetic embeddings, embedding files and
// streamed enrol->verify replay through the card simulator.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "moc/apdu.hpp"
#include "moc/card.hpp"
#include "moc/pcaitq.hpp"

namespace moc {

struct ScoreSet {
  std::vector<unsigned> genuine;
  std::vector<unsigned> impostor;
  unsigned length_bits = 0;
};

struct RocRow {
  unsigned tau = 0;
  std::size_t genuine_accepted = 0;
  std::size_t impostor_accepted = 0;
  double tpr = 0;
  double far = 0;
  double frr = 1;
};

struct RocCurve {
  unsigned length_bits = 0;
  std::size_t n_genuine = 0;
  std::size_t n_impostor = 0;
  std::vector<RocRow> rows;  // one per tau in [0, L]
};

struct OperatingPoint {
  unsigned tau = 0;
  double tpr = 0;
  double far = 0;
  std::optional<double> target_far;
  // EER only: (far + frr) / 2 at tau.
  double eer = 0;
};

struct ConfusionMatrix {
  std::size_t tp = 0;
  std::size_t fn = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;

  double tpr() const { return tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn); }
  double far() const { return fp + tn == 0 ? 0.0 : static_cast<double>(fp) / static_cast<double>(fp + tn); }

  friend bool operator==(const ConfusionMatrix&, const ConfusionMatrix&) = default;
};

inline RocCurve compute_roc(const ScoreSet& scores) {
  if (scores.genuine.empty() || scores.impostor.empty()) {
    throw std::invalid_argument("compute_roc: genuine and impostor sets must be non-empty");
  }
  const unsigned len = scores.length_bits;
  // Histogram then prefix sums: count(d <= tau).
  std::vector<std::size_t> gh(len + 1, 0), ih(len + 1, 0);
  for (unsigned d : scores.genuine) {
    if (d > len) throw std::invalid_argument("genuine distance exceeds L");
    ++gh[d];
  }
  for (unsigned d : scores.impostor) {
    if (d > len) throw std::invalid_argument("impostor distance exceeds L");
    ++ih[d];
  }
  RocCurve c{len, scores.genuine.size(), scores.impostor.size(), {}};
  c.rows.reserve(len + 1);
  std::size_t ga = 0, ia = 0;
  for (unsigned tau = 0; tau <= len; ++tau) {
    ga += gh[tau];
    ia += ih[tau];
    RocRow r;
    r.tau = tau;
    r.genuine_accepted = ga;
    r.impostor_accepted = ia;
    r.tpr = static_cast<double>(ga) / static_cast<double>(c.n_genuine);
    r.far = static_cast<double>(ia) / static_cast<double>(c.n_impostor);
    r.frr = 1.0 - r.tpr;
    c.rows.push_back(r);
  }
  return c;
}

/// tau minimizing |FAR - FRR| (smallest tau on ties); EER is the midpoint.
inline OperatingPoint find_eer(const RocCurve& curve) {
  // |ia/I - (G-ga)/G| compared exactly as |ia*G - (G-ga)*I|.
  const auto G = static_cast<long double>(curve.n_genuine);
  const auto I = static_cast<long double>(curve.n_impostor);
  const RocRow* best = nullptr;
  long double best_gap = 0;
  for (const auto& r : curve.rows) {
    const long double gap =
        std::fabs(static_cast<long double>(r.impostor_accepted) * G -
                  (G - static_cast<long double>(r.genuine_accepted)) * I);
    if (!best || gap < best_gap) {
      best = &r;
      best_gap = gap;
    }
  }
  OperatingPoint op;
  op.tau = best->tau;
  op.tpr = best->tpr;
  op.far = best->far;
  op.eer = (best->far + best->frr) / 2.0;
  return op;
}

/// tau whose achieved FAR is closest to the target. Ties go to the lower
/// FAR, then to the smaller tau.
inline OperatingPoint tpr_at_far(const RocCurve& curve, double target) {
  if (!(target > 0.0 && target < 1.0)) throw std::invalid_argument("FAR target must be in (0, 1)");
  const RocRow* best = nullptr;
  double best_gap = 0;
  for (const auto& r : curve.rows) {
    const double gap = std::fabs(r.far - target);
    if (!best || gap < best_gap || (gap == best_gap && r.far < best->far)) {
      best = &r;
      best_gap = gap;
    }
  }
  OperatingPoint op;
  op.tau = best->tau;
  op.tpr = best->tpr;
  op.far = best->far;
  op.target_far = target;
  return op;
}

/// Wilson score interval for a binomial proportion.
inline std::pair<double, double> wilson_interval(std::size_t successes, std::size_t trials, double z = 2.5758293035489004) {
  if (trials == 0) return {0.0, 1.0};
  const double n = static_cast<double>(trials);
  const double p = static_cast<double>(successes) / n;
  const double z2 = z * z;
  const double centre = (p + z2 / (2 * n)) / (1 + z2 / n);
  const double half = z * std::sqrt(p * (1 - p) / n + z2 / (4 * n * n)) / (1 + z2 / n);
  return {std::max(0.0, centre - half), std::min(1.0, centre + half)};
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticDatasetSpec {
  std::size_t n_identities = 55;
  std::size_t images_per_identity = 7;
  // When non-zero, images are distributed round-robin so the dataset holds
  // exactly this many (e.g. 412 over 55 identities gives 7 or 8 each).
  std::size_t total_images = 0;
  std::size_t dim = 128;
  double sigma_between = 1.0;
  double sigma_within = 0.9;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_identities == 0 || dim == 0) throw std::invalid_argument("synthetic spec: sizes must be positive");
    if (total_images == 0 && images_per_identity == 0) {
      throw std::invalid_argument("synthetic spec: images per identity must be positive");
    }
    if (total_images != 0 && total_images < n_identities) {
      throw std::invalid_argument("synthetic spec: fewer images than identities");
    }
    if (!(sigma_between > 0) || !(sigma_within >= 0) || !(sigma_within < sigma_between)) {
      throw std::invalid_argument("synthetic spec: need 0 <= sigma_within < sigma_between");
    }
  }

  std::size_t images_for(std::size_t identity) const {
    if (total_images == 0) return images_per_identity;
    return total_images / n_identities + (identity < total_images % n_identities ? 1 : 0);
  }
};

/// Identity means ~ N(0, sigma_between^2 I); images = mean + N(0, sigma_within^2 I).
inline std::vector<FloatEmbedding> generate_synthetic(const SyntheticDatasetSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  std::vector<FloatEmbedding> out;
  std::vector<double> mean(spec.dim);
  for (std::size_t id = 0; id < spec.n_identities; ++id) {
    for (auto& m : mean) m = spec.sigma_between * normal(rng);
    for (std::size_t k = 0; k < spec.images_for(id); ++k) {
      FloatEmbedding e{static_cast<std::uint32_t>(id), std::vector<double>(spec.dim)};
      for (std::size_t j = 0; j < spec.dim; ++j) e.values[j] = mean[j] + spec.sigma_within * normal(rng);
      out.push_back(std::move(e));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Embedding files: binary "EMB1" (LE u32 count, u32 dim, then per record
// u32 label + dim f32) or CSV lines "label,f1,...,fd".

namespace embedding_file {

inline constexpr std::array<char, 4> kMagic{'E', 'M', 'B', '1'};

inline Bytes serialize_emb1(const std::vector<FloatEmbedding>& data) {
  auto put32 = [](Bytes& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<Byte>(v >> (8 * i)));
  };
  const std::size_t dim = data.empty() ? 0 : data.front().values.size();
  Bytes out(kMagic.begin(), kMagic.end());
  put32(out, static_cast<std::uint32_t>(data.size()));
  put32(out, static_cast<std::uint32_t>(dim));
  for (const auto& e : data) {
    if (e.values.size() != dim) throw DimensionError("embeddings have mixed dimensions");
    put32(out, e.label);
    for (double v : e.values) put32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

inline std::vector<FloatEmbedding> parse_emb1(std::span<const Byte> in) {
  std::size_t pos = 0;
  auto get32 = [&]() {
    if (pos + 4 > in.size()) throw CodecError("EMB1 file truncated");
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(in[pos + i]) << (8 * i);
    pos += 4;
    return v;
  };
  if (in.size() < 4 || !std::equal(kMagic.begin(), kMagic.end(), in.begin(),
                                   [](char c, Byte b) { return static_cast<Byte>(c) == b; })) {
    throw CodecError("not an EMB1 file");
  }
  pos = 4;
  const std::uint32_t count = get32();
  const std::uint32_t dim = get32();
  if (in.size() != 12 + static_cast<std::size_t>(count) * (4 + 4 * static_cast<std::size_t>(dim))) {
    throw CodecError("EMB1 size does not match header");
  }
  std::vector<FloatEmbedding> out(count);
  for (auto& e : out) {
    e.label = get32();
    e.values.resize(dim);
    for (auto& v : e.values) v = std::bit_cast<float>(get32());
  }
  return out;
}

inline std::string serialize_csv(const std::vector<FloatEmbedding>& data) {
  std::string s;
  char buf[32];
  for (const auto& e : data) {
    s += std::to_string(e.label);
    for (double v : e.values) {
      std::snprintf(buf, sizeof buf, ",%.17g", v);
      s += buf;
    }
    s += '\n';
  }
  return s;
}

inline std::vector<FloatEmbedding> parse_csv(const std::string& text) {
  std::vector<FloatEmbedding> out;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string field;
    FloatEmbedding e;
    bool first = true;
    while (std::getline(ls, field, ',')) {
      try {
        std::size_t used = 0;
        if (first) {
          e.label = static_cast<std::uint32_t>(std::stoul(field, &used));
        } else {
          e.values.push_back(std::stod(field, &used));
        }
        if (used != field.size()) throw std::invalid_argument(field);
      } catch (const std::exception&) {
        throw CodecError("CSV line " + std::to_string(lineno) + ": bad field '" + field + "'");
      }
      first = false;
    }
    if (e.values.empty()) throw CodecError("CSV line " + std::to_string(lineno) + ": no features");
    if (!out.empty() && out.front().values.size() != e.values.size()) {
      throw CodecError("CSV line " + std::to_string(lineno) + ": dimension mismatch");
    }
    out.push_back(std::move(e));
  }
  return out;
}

inline void save(const std::filesystem::path& path, const std::vector<FloatEmbedding>& data) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  if (path.extension() == ".csv") {
    os << serialize_csv(data);
  } else {
    const Bytes b = serialize_emb1(data);
    os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
  }
}

/// Format is detected from the magic bytes, not the extension.
inline std::vector<FloatEmbedding> load(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  const std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  if (text.size() >= 4 && text.compare(0, 4, "EMB1") == 0) {
    return parse_emb1(std::span(reinterpret_cast<const Byte*>(text.data()), text.size()));
  }
  return parse_csv(text);
}

}  // namespace embedding_file

// ---------------------------------------------------------------------------
// Enrollment split and scoring

struct IdentitySplit {
  std::uint32_t label = 0;
  std::array<std::size_t, 2> enroll{};  // dataset indices
  std::vector<std::size_t> probes;      // dataset indices
};

struct SplitResult {
  std::vector<IdentitySplit> identities;  // ascending label
  std::vector<std::string> warnings;
};

/// Two seeded-random enrollment images per identity; the rest are probes.
/// Identities with fewer than three images are skipped.
inline SplitResult split_enrollment(const std::vector<FloatEmbedding>& data, std::uint64_t seed) {
  std::map<std::uint32_t, std::vector<std::size_t>> by_label;
  for (std::size_t i = 0; i < data.size(); ++i) by_label[data[i].label].push_back(i);

  SplitResult out;
  std::mt19937_64 rng(seed);
  for (auto& [label, idx] : by_label) {
    if (idx.size() < 3) {
      out.warnings.push_back("identity " + std::to_string(label) + " has " + std::to_string(idx.size()) +
                             " image(s); need at least 3, skipped");
      continue;
    }
    const std::size_t a = rng() % idx.size();
    std::size_t b = rng() % (idx.size() - 1);
    if (b >= a) ++b;
    IdentitySplit s{label, {idx[a], idx[b]}, {}};
    for (std::size_t k = 0; k < idx.size(); ++k) {
      if (k != a && k != b) s.probes.push_back(idx[k]);
    }
    out.identities.push_back(std::move(s));
  }
  return out;
}

struct Trial {
  std::uint32_t reference_label = 0;
  std::size_t probe_index = 0;
  bool genuine = false;
};

/// Trial order shared by offline scoring and replay: per reference identity
/// (ascending), its own probes, then every other identity's probes.
inline std::vector<Trial> trials_for(const SplitResult& split, std::size_t reference) {
  std::vector<Trial> out;
  const auto& ref = split.identities[reference];
  for (std::size_t p : ref.probes) out.push_back({ref.label, p, true});
  for (std::size_t j = 0; j < split.identities.size(); ++j) {
    if (j == reference) continue;
    for (std::size_t p : split.identities[j].probes) out.push_back({ref.label, p, false});
  }
  return out;
}

struct EncodedSet {
  std::vector<BinaryTemplate> templates;   // per dataset index
  std::vector<BinaryTemplate> references;  // per split identity
};

inline EncodedSet encode_split(const std::vector<FloatEmbedding>& data, const SplitResult& split,
                               const PcaItqModel& model) {
  EncodedSet out;
  out.templates.reserve(data.size());
  for (const auto& e : data) out.templates.push_back(encode(model, e));
  for (const auto& id : split.identities) {
    const std::array<BinaryTemplate, 2> pair{out.templates[id.enroll[0]], out.templates[id.enroll[1]]};
    out.references.push_back(majority_fuse(pair));
  }
  return out;
}

struct OfflineScores {
  ScoreSet scores;
  std::vector<Trial> trials;
  std::vector<unsigned> distances;  // parallel to trials
};

inline OfflineScores offline_scores(const std::vector<FloatEmbedding>& data, const SplitResult& split,
                                    const PcaItqModel& model) {
  const EncodedSet enc = encode_split(data, split, model);
  OfflineScores out;
  out.scores.length_bits = model.length_bits();
  for (std::size_t r = 0; r < split.identities.size(); ++r) {
    for (const Trial& t : trials_for(split, r)) {
      const unsigned d = hamming_ct(enc.templates[t.probe_index].bytes(), enc.references[r].bytes());
      (t.genuine ? out.scores.genuine : out.scores.impostor).push_back(d);
      out.trials.push_back(t);
      out.distances.push_back(d);
    }
  }
  return out;
}

struct Transaction {
  Trial trial;
  std::uint16_t sw = 0;
};

struct ReplayResult {
  ConfusionMatrix confusion;
  std::vector<Transaction> transactions;
  std::vector<std::string> trace;  // hex trace lines when requested
  std::vector<std::string> warnings;
};

struct ReplayOptions {
  std::uint64_t seed = 0;
  unsigned jobs = 1;
  bool long_form = false;
  bool record_trace = false;
};

/// Enrol->verify replay: one fresh card per identity, provisioned with tau,
/// receiving a fused ENROLL_TEMPLATE and then every genuine and impostor
/// probe as VERIFY_BINARY. Only status words are observed.
inline ReplayResult streamed_replay(const std::vector<FloatEmbedding>& data, const PcaItqModel& model,
                                    unsigned tau, const ReplayOptions& opt = {}) {
  const unsigned len = model.length_bits();
  if (tau > len) throw std::invalid_argument("tau exceeds L");
  const SplitResult split = split_enrollment(data, opt.seed);
  const EncodedSet enc = encode_split(data, split, model);

  auto payload_for = [&](const BinaryTemplate& t, std::uint16_t template_id) {
    TemplatePayload p;
    p.rotation_id = model.rotation_id;
    p.templ = t;
    if (opt.long_form) {
      p.salt_id = 0;
      p.template_id = template_id;
    }
    return p;
  };

  struct Slot {
    std::vector<Transaction> tx;
    std::vector<std::string> trace;
  };
  std::vector<Slot> slots(split.identities.size());

  auto run_identity = [&](std::size_t r) {
    CardConfig cfg;
    cfg.thresholds = {{len, tau}};
    Card card(cfg);
    Slot& slot = slots[r];
    const auto id16 = static_cast<std::uint16_t>(split.identities[r].label & 0xFFFF);

    auto send = [&](const ApduCommand& cmd) {
      const Bytes raw = serialize_command(cmd);
      ApduResponse resp = card.process(raw);
      if (opt.record_trace) {
        slot.trace.push_back(trace_command(raw));
        slot.trace.push_back(trace_response(resp));
      }
      return resp.sw;
    };

    const std::uint16_t enrolled = send(make_enroll_command(payload_for(enc.references[r], id16)));
    if (enrolled != sw::kOk) throw std::runtime_error("enrollment failed with SW " + to_hex(Bytes{
                                                          static_cast<Byte>(enrolled >> 8), static_cast<Byte>(enrolled)}));
    for (const Trial& t : trials_for(split, r)) {
      slot.tx.push_back({t, send(make_verify_command(payload_for(enc.templates[t.probe_index], id16)))});
    }
  };

  const unsigned jobs = std::max(1u, std::min<unsigned>(opt.jobs, static_cast<unsigned>(slots.size())));
  if (jobs <= 1) {
    for (std::size_t r = 0; r < slots.size(); ++r) run_identity(r);
  } else {
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(jobs);
    for (unsigned w = 0; w < jobs; ++w) {
      workers.emplace_back([&, w] {
        try {
          for (std::size_t r = w; r < slots.size(); r += jobs) run_identity(r);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
    for (auto& t : workers) t.join();
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

  ReplayResult out;
  out.warnings = split.warnings;
  for (auto& slot : slots) {
    for (const auto& tx : slot.tx) {
      const bool accepted = tx.sw == sw::kOk;
      if (tx.trial.genuine) {
        (accepted ? out.confusion.tp : out.confusion.fn)++;
      } else {
        (accepted ? out.confusion.fp : out.confusion.tn)++;
      }
      out.transactions.push_back(tx);
    }
    out.trace.insert(out.trace.end(), slot.trace.begin(), slot.trace.end());
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reports

inline double round4(double v) { return std::round(v * 1e4) / 1e4; }

struct EvaluationReport {
  unsigned length_bits = 0;
  unsigned tau = 0;
  OperatingPoint eer;
  std::vector<OperatingPoint> tpr_at_far;
  ConfusionMatrix streamed;
  std::uint64_t seed = 0;
};

inline nlohmann::json to_json(const EvaluationReport& r) {
  nlohmann::json ops = nlohmann::json::array();
  for (const auto& op : r.tpr_at_far) {
    ops.push_back({{"target", op.target_far.value_or(0.0)},
                   {"tau", op.tau},
                   {"tpr", round4(op.tpr)},
                   {"far", round4(op.far)}});
  }
  return {{"length_bits", r.length_bits},
          {"tau", r.tau},
          {"eer", round4(r.eer.eer)},
          {"tau_eer", r.eer.tau},
          {"tpr_at_far", ops},
          {"streamed",
           {{"tp", r.streamed.tp},
            {"fn", r.streamed.fn},
            {"fp", r.streamed.fp},
            {"tn", r.streamed.tn},
            {"tpr", round4(r.streamed.tpr())},
            {"far", round4(r.streamed.far())}}},
          {"seed", r.seed}};
}

inline EvaluationReport report_from_json(const nlohmann::json& j) {
  EvaluationReport r;
  r.length_bits = j.at("length_bits").get<unsigned>();
  r.tau = j.at("tau").get<unsigned>();
  r.eer.eer = j.at("eer").get<double>();
  r.eer.tau = j.at("tau_eer").get<unsigned>();
  for (const auto& op : j.at("tpr_at_far")) {
    OperatingPoint p;
    p.target_far = op.at("target").get<double>();
    p.tau = op.at("tau").get<unsigned>();
    p.tpr = op.at("tpr").get<double>();
    p.far = op.at("far").get<double>();
    r.tpr_at_far.push_back(p);
  }
  const auto& s = j.at("streamed");
  r.streamed = {s.at("tp").get<std::size_t>(), s.at("fn").get<std::size_t>(), s.at("fp").get<std::size_t>(),
                s.at("tn").get<std::size_t>()};
  r.seed = j.at("seed").get<std::uint64_t>();
  return r;
}

inline std::string roc_csv(const RocCurve& c) {
  std::string s = "tau,tpr,far,frr\n";
  char buf[96];
  for (const auto& r : c.rows) {
    std::snprintf(buf, sizeof buf, "%u,%.4f,%.4f,%.4f\n", r.tau, r.tpr, r.far, r.frr);
    s += buf;
  }
  return s;
}

}  // namespace moc
