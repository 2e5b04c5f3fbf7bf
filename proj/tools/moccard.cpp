// moccard: host-side tooling for the match-on-card simulator.
//
// Exit codes: 0 = SW 9000, 1 = SW 6985, 2 = any other SW or a usage error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "moc/moc.hpp"

namespace fs = std::filesystem;
using namespace moc;

namespace {

constexpr int kExitAccept = 0;
constexpr int kExitReject = 1;
constexpr int kExitOther = 2;

struct Globals {
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  int verbosity = 0;
};

struct SynthOptions {
  std::size_t identities = 55;
  std::size_t images = 7;
  std::size_t total_images = 412;
  std::size_t dim = 128;
  double sigma_between = 1.0;
  double sigma_within = 0.9;

  SyntheticDatasetSpec spec(std::uint64_t seed) const {
    return {identities, images, total_images, dim, sigma_between, sigma_within, seed};
  }
};

struct CardOptions {
  std::string card_path;
  std::optional<unsigned> tau;
  std::size_t quota = 256;
  bool require_issuer_auth = false;
  bool issuer_auth = false;
  std::optional<unsigned> rate_limit;
  std::string trace_path;
};

int exit_code_for(std::uint16_t status) {
  if (status == sw::kOk) return kExitAccept;
  if (status == sw::kConditionsNotSatisfied) return kExitReject;
  return kExitOther;
}

std::string sw_text(std::uint16_t status) {
  return "SW " + to_hex(Bytes{static_cast<Byte>(status >> 8), static_cast<Byte>(status & 0xFF)}) + " (" +
         sw::name(status) + ")";
}

fs::path resolve_output(const Globals& g, const std::string& path) {
  fs::path p(path);
  if (p.is_absolute() || g.out_dir.empty()) return p;
  fs::create_directories(g.out_dir);
  return fs::path(g.out_dir) / p;
}

std::uint64_t require_seed(const Globals& g) {
  if (!g.seed) throw CLI::ValidationError("--seed", "a seed is required for this subcommand");
  return *g.seed;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

Bytes read_bytes(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  return Bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
}

std::vector<FloatEmbedding> load_dataset(const std::string& path, bool synthetic, const SynthOptions& so,
                                         const Globals& g) {
  if (!path.empty()) {
    if (!fs::exists(path)) throw std::runtime_error("embedding file not found: " + path);
    return embedding_file::load(path);
  }
  if (synthetic) return generate_synthetic(so.spec(require_seed(g)));
  throw CLI::ValidationError("input", "give --embeddings PATH or --synthetic");
}

void add_synth_flags(CLI::App* app, SynthOptions& so) {
  app->add_option("--identities", so.identities, "Number of synthetic identities")->capture_default_str();
  app->add_option("--images", so.images, "Images per identity (ignored when --total-images > 0)")
      ->capture_default_str();
  app->add_option("--total-images", so.total_images, "Total images, spread round-robin")->capture_default_str();
  app->add_option("--dim", so.dim, "Embedding dimension")->capture_default_str();
  app->add_option("--sigma-between", so.sigma_between, "Spread of identity means")->capture_default_str();
  app->add_option("--sigma-within", so.sigma_within, "Per-image noise")->capture_default_str();
}

CardState load_or_create_card(const CardOptions& co, unsigned length_bits) {
  CardState state;
  if (fs::exists(co.card_path)) {
    state = card_file::deserialize(read_bytes(co.card_path));
  } else {
    state.config.eeprom_quota_bytes = co.quota;
    state.config.require_issuer_auth_for_enroll = co.require_issuer_auth;
    state.config.rate_limit = co.rate_limit;
  }
  if (co.tau) state.config.thresholds[length_bits] = *co.tau;
  state.issuer_authenticated = co.issuer_auth;
  state.config.validate();
  return state;
}

void save_card(const CardOptions& co, const CardState& state) {
  const Bytes b = card_file::serialize(state);
  std::ofstream os(co.card_path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot write card image " + co.card_path);
  os.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}

std::uint16_t transmit(CardState& state, const ApduCommand& cmd, const std::string& trace_path) {
  const Bytes raw = serialize_command(cmd);
  const ApduResponse resp = process_in_place(state, raw);
  if (!trace_path.empty()) {
    std::ofstream os(trace_path, std::ios::app);
    if (!os) throw std::runtime_error("cannot append to trace " + trace_path);
    os << trace_command(raw) << '\n' << trace_response(resp) << '\n';
  }
  return resp.sw;
}

void add_card_flags(CLI::App* app, CardOptions& co) {
  app->add_option("--card", co.card_path, "Card image file (created if missing)")->required();
  app->add_option("--tau", co.tau, "Provision the threshold for this template length");
  app->add_option("--quota", co.quota, "EEPROM quota in bytes for a new card")->capture_default_str();
  app->add_flag("--require-issuer-auth", co.require_issuer_auth, "New card requires issuer auth for ENROLL/REKEY");
  app->add_flag("--issuer-auth", co.issuer_auth, "Establish issuer authentication for this session");
  app->add_option("--rate-limit", co.rate_limit, "Consecutive rejected VERIFY attempts before lockout");
  app->add_option("--trace", co.trace_path, "Append an APDU hex trace to this file");
}

struct TemplateCmdOptions {
  std::string model_path;
  std::string embeddings_path;
  std::vector<std::size_t> indices;
  bool long_form = false;
  std::uint16_t template_id = 0;
  std::uint16_t salt_id = 0;
  std::optional<std::uint16_t> rotation_override;
};

TemplatePayload build_payload(const TemplateCmdOptions& o, const PcaItqModel& model,
                              const std::vector<FloatEmbedding>& data) {
  std::vector<BinaryTemplate> templates;
  for (std::size_t i : o.indices) {
    if (i >= data.size()) throw std::runtime_error("image index " + std::to_string(i) + " out of range");
    templates.push_back(encode(model, data[i]));
  }
  TemplatePayload p;
  p.rotation_id = o.rotation_override.value_or(model.rotation_id);
  p.templ = majority_fuse(templates);
  if (o.long_form) {
    p.salt_id = o.salt_id;
    p.template_id = o.template_id;
  }
  return p;
}

void add_template_flags(CLI::App* app, TemplateCmdOptions& o, bool multiple) {
  app->add_option("--model", o.model_path, "PITQ model file")->required()->check(CLI::ExistingFile);
  app->add_option("--embeddings", o.embeddings_path, "Embedding file (EMB1 or CSV)")
      ->required()
      ->check(CLI::ExistingFile);
  auto* idx = app->add_option("--index", o.indices, multiple ? "Image indices to fuse (repeatable)" : "Image index")
                  ->required();
  if (!multiple) idx->expected(1);
  app->add_flag("--long-form", o.long_form, "Use the 8-byte payload header (SaltID, TemplateID)");
  app->add_option("--template-id", o.template_id, "TemplateID for long form");
  app->add_option("--salt-id", o.salt_id, "SaltID for long form");
  app->add_option("--rotation-id", o.rotation_override, "Override the RotationID sent to the card");
}

int run_template_command(const TemplateCmdOptions& o, CardOptions& co, bool enroll) {
  const PcaItqModel model = model_file::load(o.model_path);
  const auto data = embedding_file::load(o.embeddings_path);
  const TemplatePayload p = build_payload(o, model, data);
  CardState state = load_or_create_card(co, model.length_bits());
  const std::uint16_t status =
      transmit(state, enroll ? make_enroll_command(p) : make_verify_command(p), co.trace_path);
  state.issuer_authenticated = false;
  save_card(co, state);
  std::cout << sw_text(status) << '\n';
  return exit_code_for(status);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Match-on-card face verification: templates, card simulator, evaluation and latency"};
  app.require_subcommand(1);

  Globals g;
  if (const char* env = std::getenv("MOC_OUT_DIR")) g.out_dir = env;
  app.add_option("--seed", g.seed, "RNG seed (required by randomized subcommands)");
  app.add_option("--out-dir", g.out_dir, "Directory for relative output paths (env: MOC_OUT_DIR)");
  app.add_flag("-v,--verbose", g.verbosity, "More diagnostics");

  // synth
  SynthOptions synth_opts;
  std::string synth_out = "synthetic.emb";
  auto* synth = app.add_subcommand("synth", "Generate a synthetic embedding dataset");
  add_synth_flags(synth, synth_opts);
  synth->add_option("-o,--output", synth_out, "Output file (.emb binary or .csv)")->capture_default_str();

  // train
  SynthOptions train_synth;
  std::string train_embeddings, train_registry = "registry", train_out;
  bool train_synthetic = false;
  unsigned train_bits = 64, train_iterations = 50;
  auto* train = app.add_subcommand("train", "Train a PCA-ITQ model and register it under a fresh RotationID");
  train->add_option("--embeddings", train_embeddings, "Embedding file (EMB1 or CSV)");
  train->add_flag("--synthetic", train_synthetic, "Train on a generated dataset");
  add_synth_flags(train, train_synth);
  train->add_option("--bits", train_bits, "Template length")->check(CLI::IsMember({16, 32, 64, 128}))
      ->capture_default_str();
  train->add_option("--iterations", train_iterations, "ITQ iterations")->check(CLI::PositiveNumber)
      ->capture_default_str();
  train->add_option("--registry", train_registry, "Rotation registry directory")->capture_default_str();
  train->add_option("-o,--output", train_out, "Also write the model to this path");

  // enroll / verify
  TemplateCmdOptions enroll_opts, verify_opts;
  CardOptions enroll_card, verify_card;
  auto* enroll = app.add_subcommand("enroll", "Encode, fuse and send ENROLL_TEMPLATE");
  add_template_flags(enroll, enroll_opts, true);
  add_card_flags(enroll, enroll_card);
  auto* verify = app.add_subcommand("verify", "Encode a probe and send VERIFY_BINARY");
  add_template_flags(verify, verify_opts, false);
  add_card_flags(verify, verify_card);

  // rekey
  CardOptions rekey_card;
  std::uint16_t new_rotation = 0;
  auto* rekey = app.add_subcommand("rekey", "Send REKEY_ROTATION (erases stored templates)");
  add_card_flags(rekey, rekey_card);
  rekey->add_option("--new-rotation-id", new_rotation, "New RotationID")->required();

  // replay / roc share a data source and model
  SynthOptions replay_synth;
  std::string replay_embeddings, replay_model, replay_out = "replay_report.json", replay_trace;
  bool replay_synthetic = false, replay_long = false;
  std::optional<unsigned> replay_tau;
  std::optional<double> replay_far;
  unsigned replay_jobs = 1;
  auto* replay = app.add_subcommand("replay", "Stream enrol->verify transactions through fresh cards");
  replay->add_option("--embeddings", replay_embeddings, "Embedding file (EMB1 or CSV)");
  replay->add_flag("--synthetic", replay_synthetic, "Use a generated dataset");
  add_synth_flags(replay, replay_synth);
  replay->add_option("--model", replay_model, "PITQ model file")->required()->check(CLI::ExistingFile);
  auto* tau_opt = replay->add_option("--tau", replay_tau, "Fixed threshold");
  replay->add_option("--far-target", replay_far, "Pick tau from the offline ROC at this FAR")->excludes(tau_opt);
  replay->add_option("--jobs", replay_jobs, "Worker threads")->check(CLI::PositiveNumber);
  replay->add_flag("--long-form", replay_long, "Use the 8-byte payload header");
  replay->add_option("--trace", replay_trace, "Write the APDU hex trace to this file");
  replay->add_option("-o,--output", replay_out, "JSON report path")->capture_default_str();

  SynthOptions roc_synth;
  std::string roc_embeddings, roc_model, roc_out = "roc.csv";
  bool roc_synthetic = false;
  std::vector<double> roc_targets{0.001, 0.01};
  auto* roc = app.add_subcommand("roc", "Offline ROC, EER and TPR@FAR");
  roc->add_option("--embeddings", roc_embeddings, "Embedding file (EMB1 or CSV)");
  roc->add_flag("--synthetic", roc_synthetic, "Use a generated dataset");
  add_synth_flags(roc, roc_synth);
  roc->add_option("--model", roc_model, "PITQ model file")->required()->check(CLI::ExistingFile);
  roc->add_option("--far-target", roc_targets, "FAR targets (repeatable)")->capture_default_str();
  roc->add_option("-o,--output", roc_out, "ROC table CSV path")->capture_default_str();

  // latency
  std::string latency_profiles, latency_format = "csv", latency_out;
  auto* latency = app.add_subcommand("latency", "Transport latency sweep");
  latency->add_option("--profiles", latency_profiles, "Profile document (JSON)")->check(CLI::ExistingFile);
  latency->add_option("--format", latency_format, "csv or json")->check(CLI::IsMember({"csv", "json"}))
      ->capture_default_str();
  latency->add_option("-o,--output", latency_out, "Output path (stdout when omitted)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : kExitOther;
  }

  try {
    if (*synth) {
      const auto data = generate_synthetic(synth_opts.spec(require_seed(g)));
      const fs::path out = resolve_output(g, synth_out);
      embedding_file::save(out, data);
      std::cout << "wrote " << data.size() << " embeddings to " << out.string() << '\n';
      return 0;
    }

    if (*train) {
      const auto data = load_dataset(train_embeddings, train_synthetic, train_synth, g);
      RotationRegistry registry(resolve_output(g, train_registry));
      TrainOptions opt{train_bits, train_iterations, require_seed(g), registry.next_id()};
      ItqResult itq;
      const PcaItqModel model = train_model(data, opt, &itq);
      const fs::path stored = registry.store(model);

      const PcaItqModel check = model_file::load(stored);
      const double r_err = max_orthogonality_error(check.r);
      const double w_err = max_orthogonality_error(check.w_pca);
      if (r_err > 1e-6 || w_err > 1e-6) {
        std::cerr << "trained model failed orthogonality check (R " << r_err << ", W " << w_err << ")\n";
        return kExitOther;
      }
      if (!train_out.empty()) model_file::save(resolve_output(g, train_out), model);
      char id[8];
      std::snprintf(id, sizeof id, "0x%04X", model.rotation_id);
      std::cout << "rotation_id=" << id << '\n' << "model=" << stored.string() << '\n';
      if (g.verbosity > 0) std::cerr << "final ITQ loss " << itq.loss.back() << '\n';
      return 0;
    }

    if (*enroll) return run_template_command(enroll_opts, enroll_card, true);
    if (*verify) return run_template_command(verify_opts, verify_card, false);

    if (*rekey) {
      CardState state = load_or_create_card(rekey_card, 64);
      const std::uint16_t status = transmit(state, make_rekey_command({new_rotation}), rekey_card.trace_path);
      state.issuer_authenticated = false;
      save_card(rekey_card, state);
      std::cout << sw_text(status) << '\n';
      return exit_code_for(status);
    }

    if (*replay) {
      const std::uint64_t seed = require_seed(g);
      const auto data = load_dataset(replay_embeddings, replay_synthetic, replay_synth, g);
      const PcaItqModel model = model_file::load(replay_model);
      const SplitResult split = split_enrollment(data, seed);
      for (const auto& w : split.warnings) std::cerr << "warning: " << w << '\n';
      const OfflineScores offline = offline_scores(data, split, model);
      const RocCurve curve = compute_roc(offline.scores);

      EvaluationReport report;
      report.length_bits = model.length_bits();
      report.seed = seed;
      report.eer = find_eer(curve);
      std::vector<double> targets{0.001, 0.01};
      if (replay_far && std::find(targets.begin(), targets.end(), *replay_far) == targets.end()) {
        targets.push_back(*replay_far);
      }
      for (double t : targets) report.tpr_at_far.push_back(tpr_at_far(curve, t));
      if (replay_tau) {
        report.tau = *replay_tau;
      } else {
        report.tau = tpr_at_far(curve, replay_far.value_or(0.01)).tau;
      }

      ReplayOptions ro{seed, replay_jobs, replay_long, !replay_trace.empty()};
      const ReplayResult result = streamed_replay(data, model, report.tau, ro);
      report.streamed = result.confusion;

      const fs::path out = resolve_output(g, replay_out);
      write_text(out, to_json(report).dump(2) + "\n");
      if (!replay_trace.empty()) {
        std::string t;
        for (const auto& line : result.trace) t += line + '\n';
        write_text(resolve_output(g, replay_trace), t);
      }
      const auto& c = result.confusion;
      std::cout << "tau=" << report.tau << " L=" << report.length_bits << '\n'
                << "            accept   reject\n"
                << "genuine  " << std::setw(8) << c.tp << " " << std::setw(8) << c.fn << '\n'
                << "impostor " << std::setw(8) << c.fp << " " << std::setw(8) << c.tn << '\n'
                << "report=" << out.string() << '\n';
      return 0;
    }

    if (*roc) {
      const std::uint64_t seed = require_seed(g);
      const auto data = load_dataset(roc_embeddings, roc_synthetic, roc_synth, g);
      const PcaItqModel model = model_file::load(roc_model);
      const SplitResult split = split_enrollment(data, seed);
      for (const auto& w : split.warnings) std::cerr << "warning: " << w << '\n';
      const RocCurve curve = compute_roc(offline_scores(data, split, model).scores);
      write_text(resolve_output(g, roc_out), roc_csv(curve));

      const OperatingPoint eer = find_eer(curve);
      nlohmann::json summary{{"length_bits", curve.length_bits},
                             {"tau_eer", eer.tau},
                             {"eer", round4(eer.eer)},
                             {"n_genuine", curve.n_genuine},
                             {"n_impostor", curve.n_impostor},
                             {"seed", seed}};
      nlohmann::json ops = nlohmann::json::array();
      for (double t : roc_targets) {
        const OperatingPoint op = tpr_at_far(curve, t);
        ops.push_back({{"target", t}, {"tau", op.tau}, {"tpr", round4(op.tpr)}, {"far", round4(op.far)}});
      }
      summary["tpr_at_far"] = ops;
      std::cout << summary.dump(2) << '\n';
      return 0;
    }

    if (*latency) {
      std::vector<LinkProfile> profiles = default_profiles();
      if (!latency_profiles.empty()) {
        std::ifstream is(latency_profiles);
        profiles = profiles_from_json(nlohmann::json::parse(is));
      }
      const LatencyReport report = sweep(profiles, default_payloads());
      const std::string text = latency_format == "json" ? latency_json(report).dump(2) + "\n" : latency_csv(report);
      if (latency_out.empty()) {
        std::cout << text;
      } else {
        write_text(resolve_output(g, latency_out), text);
      }
      return 0;
    }
  } catch (const CLI::Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitOther;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitOther;
  }
  return kExitOther;
}
