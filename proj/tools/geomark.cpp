// geomark: stage-wise driver for the watermarking pipeline.
//
//   gen-data -> init -> protect -> steal -> query -> [attack ...] -> verify
//
// Every stage reads its predecessors' files from --out-dir (or explicit
// paths), writes its artifact plus <stage>.meta.json, and is byte-identical
// across runs with the same inputs and --seed. Exit codes: 0 success or
// verdict true, 2 usage error, 3 verdict false, 1 anything else.

#include <chrono>
#include <csignal>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include "geomark/geomark.hpp"

#include <CLI11.hpp>

namespace fs = std::filesystem;
using namespace geomark;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitFailure = 1;
constexpr int kExitUsage = 2;
constexpr int kExitVerdictFalse = 3;

// Seed salts, shared with run_cell so the CLI reproduces sweep cells.
constexpr std::uint64_t kSaltSecret = 1;
constexpr std::uint64_t kSaltTraining = 2;
constexpr std::uint64_t kSaltCse = 3;
constexpr std::uint64_t kSaltParaphrase = 4;
constexpr std::uint64_t kSaltVerify = 5;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Globals {
  std::uint64_t seed = 1;
  std::string out_dir = ".";
  std::string config_path;
  bool quiet = false;
  BenchmarkConfig bench;
};

std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

std::string in_out_dir(const Globals& g, const std::string& explicit_path, const std::string& default_name) {
  if (!explicit_path.empty()) return explicit_path;
  return (fs::path(g.out_dir) / default_name).string();
}

void require_file(const std::string& path, const std::string& what, const std::string& stage) {
  if (!fs::exists(path)) {
    throw Error(ErrorCode::IoError, "missing " + what + " '" + path + "' (produced by `geomark " + stage + "`)");
  }
}

void write_meta(const Globals& g, const std::string& stage, nlohmann::json params, const nlohmann::json& outputs,
                nlohmann::json extra = nlohmann::json::object()) {
  nlohmann::json meta{{"command", stage},
                      {"seed", g.seed},
                      {"timestamp", utc_timestamp()},
                      {"params", std::move(params)},
                      {"benchmark", benchmark_to_json(g.bench)},
                      {"outputs", outputs}};
  for (auto& [k, v] : extra.items()) meta[k] = v;
  if (!g.config_path.empty()) meta["config_path"] = g.config_path;
  write_json(meta, (fs::path(g.out_dir) / (stage + ".meta.json")).string());
}

void say(const Globals& g, const std::string& line) {
  if (!g.quiet) std::cout << line << "\n";
}

SyntheticProvider provider_from(const Globals& g) { return make_provider(g.bench.provider); }

// gen-data ------------------------------------------------------------------

struct GenDataOpts {
  std::size_t corpus_size = 0;
  std::uint64_t corpus_seed = 0;
  FileFormat format = FileFormat::binary;
  std::string format_name = "binary";
  bool with_reference = true;
};

int cmd_gen_data(const Globals& g, const GenDataOpts& o) {
  if (o.corpus_size == 0) throw UsageError("--corpus-size must be at least 1");
  const auto provider = provider_from(g);
  const auto corpus = sample_corpus(provider, o.corpus_size, o.corpus_seed);
  const auto clean = encode_corpus(provider, corpus);
  const std::string ext = o.format == FileFormat::binary ? ".bin" : ".jsonl";
  const auto corpus_path = in_out_dir(g, "", "corpus.bin");
  const auto emb_path = in_out_dir(g, "", "embeddings" + ext);
  write_corpus(corpus, corpus_path);
  write_embeddings(clean, emb_path, o.format);
  nlohmann::json outputs{corpus_path, emb_path};
  if (o.with_reference) {
    const auto ref = encode_corpus(make_reference_encoder(provider, g.bench.reference_jitter, g.bench.reference_seed),
                                   corpus);
    const auto ref_path = in_out_dir(g, "", "reference" + ext);
    write_embeddings(ref, ref_path, o.format);
    outputs.push_back(ref_path);
  }
  write_meta(g, "gen-data",
             {{"corpus_size", o.corpus_size},
              {"corpus_seed", o.corpus_seed},
              {"format", o.format_name},
              {"provider_fingerprint", provider.fingerprint()}},
             outputs);
  say(g, "gen-data: " + std::to_string(corpus.size()) + " inputs, dim " + std::to_string(clean.dim()) + " -> " +
             emb_path);
  return kExitOk;
}

// init ----------------------------------------------------------------------

struct InitOpts {
  std::string embeddings;
  std::string out;
  WatermarkParams params;
  std::string strategy = "fps";
};

int cmd_init(const Globals& g, InitOpts o) {
  if (o.params.k < 1) throw UsageError("--k must be at least 1");
  o.params.strategy = parse_strategy(o.strategy);
  o.params.seed = detail::derive_seed(g.seed, kSaltSecret);
  const auto emb_path = in_out_dir(g, o.embeddings, "embeddings.bin");
  require_file(emb_path, "clean embeddings", "gen-data");
  const auto clean = read_embeddings(emb_path);
  const auto secret = initialize_secret(clean, o.params);
  const auto outcome = protect_set(clean, secret);
  const auto out = in_out_dir(g, o.out, "secret.json");
  write_secret(secret, out);
  write_meta(g, "init",
             {{"k", o.params.k},
              {"rho", o.params.rho},
              {"lambda", o.params.lambda},
              {"strategy", o.strategy},
              {"embeddings", emb_path}},
             {out},
             {{"activation_ratio", outcome.activated_fraction()},
              {"secret_fingerprint", secret_fingerprint(secret)},
              {"target_anchor_min_distance", min_target_anchor_distance(secret)}});
  say(g, "init: target " + secret.target_id + ", " + std::to_string(secret.k) + " anchors (" + o.strategy +
             "), activation ratio " + format_double(outcome.activated_fraction()) + " -> " + out);
  return kExitOk;
}

// protect -------------------------------------------------------------------

struct ProtectOpts {
  std::string embeddings;
  std::string corpus;
  std::string secret;
  std::string out;
  std::string served = "geomark";
};

int cmd_protect(const Globals& g, const ProtectOpts& o) {
  const auto secret_path = in_out_dir(g, o.secret, "secret.json");
  require_file(secret_path, "secret", "init");
  const auto secret = read_secret(secret_path);
  EmbeddingSet clean;
  std::string source;
  if (!o.corpus.empty()) {
    require_file(o.corpus, "corpus", "gen-data");
    clean = encode_corpus(provider_from(g), read_corpus(o.corpus));
    source = o.corpus;
  } else {
    source = in_out_dir(g, o.embeddings, "embeddings.bin");
    require_file(source, "clean embeddings", "gen-data");
    clean = read_embeddings(source);
  }
  const auto mode = parse_served_mode(o.served);
  const auto served = served_embeddings(clean, secret, mode);
  const auto out = in_out_dir(g, o.out, "protected.bin");
  // The uniform-shift control is deliberately unnormalized.
  write_embeddings(served, out, FileFormat::binary, mode == ServedMode::uniform_shift);
  const auto outcome = protect_set(clean, secret);
  write_meta(g, "protect", {{"source", source}, {"secret", secret_path}, {"served", o.served}}, {out},
             {{"activated_fraction", outcome.activated_fraction()},
              {"mean_fidelity", mean_fidelity(clean, outcome.protected_set)}});
  say(g, "protect: " + std::to_string(served.size()) + " vectors, activated " +
             format_double(outcome.activated_fraction()) + " -> " + out);
  return kExitOk;
}

// steal ---------------------------------------------------------------------

struct StealOpts {
  std::string corpus;
  std::string targets;
  std::string out;
};

int cmd_steal(const Globals& g, const StealOpts& o) {
  const auto corpus_path = in_out_dir(g, o.corpus, "corpus.bin");
  const auto targets_path = in_out_dir(g, o.targets, "protected.bin");
  require_file(corpus_path, "corpus", "gen-data");
  require_file(targets_path, "served embeddings", "protect");
  const auto corpus = read_corpus(corpus_path);
  const auto targets = read_embeddings(targets_path);
  TrainingConfig tc = g.bench.training;
  tc.seed = detail::derive_seed(g.seed, kSaltTraining);
  // A paraphrased corpus keeps ids, so targets are matched by id.
  const auto model = train_surrogate(corpus, targets, tc);
  const auto out = in_out_dir(g, o.out, "model.gmrk");
  write_model(model, out);
  write_meta(g, "steal", {{"corpus", corpus_path}, {"targets", targets_path}}, {out, model_sidecar_path(out)},
             {{"final_loss", model.info.final_loss}, {"warning", model.info.warning}});
  say(g, "steal: final loss " + format_double(model.info.final_loss) + " -> " + out);
  if (!model.info.warning.empty()) std::cerr << "warning: " << model.info.warning << "\n";
  return kExitOk;
}

// query ---------------------------------------------------------------------

struct QueryOpts {
  std::string model;
  std::string corpus;
  std::string out;
};

int cmd_query(const Globals& g, const QueryOpts& o) {
  const auto model_path = in_out_dir(g, o.model, "model.gmrk");
  const auto corpus_path = in_out_dir(g, o.corpus, "corpus.bin");
  require_file(model_path, "surrogate model", "steal");
  require_file(corpus_path, "corpus", "gen-data");
  const auto suspect = surrogate_encode_corpus(read_model(model_path), read_corpus(corpus_path));
  const auto out = in_out_dir(g, o.out, "suspect.bin");
  write_embeddings(suspect, out, FileFormat::binary, true);
  write_meta(g, "query", {{"model", model_path}, {"corpus", corpus_path}}, {out});
  say(g, "query: " + std::to_string(suspect.size()) + " suspect outputs -> " + out);
  return kExitOk;
}

// attack --------------------------------------------------------------------

struct AttackOpts {
  std::string input;
  std::string reference;
  std::string corpus;
  std::string secret;
  std::string out;
  std::size_t shift = 0;
  std::size_t keep = 0;
};

int cmd_attack_cse(const Globals& g, const AttackOpts& o) {
  const auto in = in_out_dir(g, o.input, "protected.bin");
  const auto ref_path = in_out_dir(g, o.reference, "reference.bin");
  require_file(in, "served embeddings", "protect");
  require_file(ref_path, "reference embeddings", "gen-data");
  CseConfig cc = g.bench.cse;
  cc.seed = detail::derive_seed(g.seed, kSaltCse);
  const auto outcome = cse_attack(read_embeddings(in), read_embeddings(ref_path), cc);
  const auto out = in_out_dir(g, o.out, "cleansed.bin");
  write_embeddings(outcome.cleansed, out, FileFormat::binary);
  nlohmann::json extra{{"suspected", outcome.suspected_ids.size()},
                       {"removed_components", outcome.removed_basis.size()},
                       {"degenerate", outcome.degenerate}};
  std::string recon;
  if (!o.secret.empty()) {
    require_file(o.secret, "secret", "init");
    const double r = cse_reconstruction_cosine(outcome, read_secret(o.secret));
    extra["reconstruction_cosine"] = r;
    recon = ", reconstruction cosine " + format_double(r);
  }
  write_meta(g, "attack-cse",
             {{"input", in},
              {"reference", ref_path},
              {"n_components", cc.n_components},
              {"n_clusters", cc.n_clusters},
              {"selection_fraction", cc.selection_fraction}},
             {out}, extra);
  say(g, "attack cse: removed " + std::to_string(outcome.removed_basis.size()) + " components" + recon + " -> " + out);
  return kExitOk;
}

int cmd_attack_dims(const Globals& g, const AttackOpts& o, bool shift) {
  const auto in = in_out_dir(g, o.input, "suspect.bin");
  require_file(in, "suspect outputs", "query");
  const auto set = read_embeddings(in);
  std::size_t amount = 0;
  EmbeddingSet result;
  if (shift) {
    amount = o.shift ? o.shift : (g.bench.shift ? g.bench.shift : default_shift(set.dim()));
    result = dimension_shift(set, amount);
  } else {
    amount = o.keep ? o.keep : (g.bench.keep ? g.bench.keep : default_keep(set.dim()));
    result = dimension_reduction(set, amount);
  }
  const std::string stage = shift ? "attack-dim-shift" : "attack-dim-reduce";
  const auto out = in_out_dir(g, o.out, shift ? "suspect-shifted.bin" : "suspect-reduced.bin");
  write_embeddings(result, out, FileFormat::binary, true);
  write_meta(g, stage, {{"input", in}, {shift ? "shift" : "keep", amount}}, {out});
  say(g, std::string(shift ? "attack dim-shift: " : "attack dim-reduce: ") + std::to_string(amount) + " -> " + out);
  return kExitOk;
}

int cmd_attack_paraphrase(const Globals& g, const AttackOpts& o) {
  const auto corpus_path = in_out_dir(g, o.corpus, "corpus.bin");
  require_file(corpus_path, "corpus", "gen-data");
  ParaphraseConfig pc = g.bench.paraphrase;
  pc.seed = detail::derive_seed(g.seed, kSaltParaphrase);
  const auto rewritten = paraphrase_corpus(read_corpus(corpus_path), provider_from(g), pc);
  const auto out = in_out_dir(g, o.out, "corpus-paraphrased.bin");
  write_corpus(rewritten, out);
  write_meta(g, "attack-paraphrase",
             {{"corpus", corpus_path},
              {"k_candidates", pc.k_candidates},
              {"sim_threshold", pc.sim_threshold},
              {"noise_scale", pc.noise_scale}},
             {out});
  say(g, "attack paraphrase: " + std::to_string(rewritten.size()) + " inputs -> " + out +
             " (serve them with `protect --corpus`)");
  return kExitOk;
}

// verify --------------------------------------------------------------------

struct VerifyOpts {
  std::string suspect;
  std::string secret;
  std::string embeddings;
  std::string out;
  std::string attack_label = "none";
  std::size_t n_backdoor = 0;
  std::size_t n_benign = 0;
};

int cmd_verify(const Globals& g, const VerifyOpts& o) {
  const auto suspect_path = in_out_dir(g, o.suspect, "suspect.bin");
  const auto secret_path = in_out_dir(g, o.secret, "secret.json");
  const auto emb_path = in_out_dir(g, o.embeddings, "embeddings.bin");
  require_file(suspect_path, "suspect outputs", "query");
  require_file(secret_path, "secret", "init");
  require_file(emb_path, "clean embeddings", "gen-data");
  const auto suspect = read_embeddings(suspect_path);
  const auto secret = read_secret(secret_path);
  const auto clean = read_embeddings(emb_path);
  const auto sets = capped_verification_sets(clean, secret, o.n_backdoor ? o.n_backdoor : g.bench.n_backdoor,
                                             o.n_benign ? o.n_benign : g.bench.n_benign,
                                             detail::derive_seed(g.seed, kSaltVerify));
  const auto report = verify([&suspect](const std::string& id) { return suspect.at(id); }, secret, sets.backdoor_ids,
                             sets.benign_ids, g.bench.threshold);
  ReportMetadata meta{secret_fingerprint(secret), utc_timestamp(), o.attack_label};
  const auto out = in_out_dir(g, o.out, "report.json");
  // The timestamp lives only in the metadata file, keeping the report stable.
  auto stable = meta;
  stable.timestamp.clear();
  write_json(report_to_json(report, stable), out);
  const auto csv = fs::path(out).replace_extension(".csv").string();
  write_file_atomic(csv, report_csv_header() + "\n" + report_csv_row(report, meta) + "\n");
  write_meta(g, "verify",
             {{"suspect", suspect_path},
              {"secret", secret_path},
              {"embeddings", emb_path},
              {"attack_label", o.attack_label},
              {"n_backdoor", report.n_backdoor},
              {"n_benign", report.n_benign},
              {"threshold", report.threshold}},
             {out, csv}, {{"secret_fingerprint", meta.secret_fingerprint}});
  if (!g.quiet) {
    std::cout << "p_value " << format_double(report.p_value) << "\n"
              << "delta_cos " << format_double(report.delta_cos) << "\n"
              << "delta_l2 " << format_double(report.delta_l2) << "\n"
              << "verdict " << (report.verdict ? "true" : "false") << "\n";
  }
  return report.verdict ? kExitOk : kExitVerdictFalse;
}

// sweep ---------------------------------------------------------------------

struct SweepOpts {
  std::string spec;
  std::string out;
  std::size_t workers = 0;
};

int cmd_sweep(const Globals& g, const SweepOpts& o) {
  SweepSpec spec;
  if (!o.spec.empty()) {
    require_file(o.spec, "sweep spec", "(hand-written JSON)");
    try {
      spec = sweep_from_json(read_json(o.spec));
    } catch (const Error& e) {
      if (e.code() != ErrorCode::InvalidArgument) throw;
      throw UsageError(e.what());
    }
  } else {
    spec.benchmark = g.bench;
  }
  if (o.workers) spec.workers = o.workers;
  std::vector<CellSpec> cells;
  try {
    cells = expand(spec);
  } catch (const Error& e) {
    throw UsageError(e.what());
  }
  const World world(spec.benchmark);
  std::size_t done = 0;
  const auto results = run_cells(world, cells, spec.workers, [&](const CellResult& r) {
    ++done;
    if (!g.quiet) {
      std::cerr << "[" << done << "/" << cells.size() << "] " << to_string(r.spec.served) << " "
                << to_string(r.spec.attack) << " k=" << r.spec.watermark.k << " rho=" << r.spec.watermark.rho
                << " seed=" << r.spec.replicate_seed << " " << r.status << "\n";
    }
  });
  std::string csv = sweep_csv_header() + "\n";
  for (const auto& r : results) csv += sweep_csv_row(r) + "\n";
  const auto out = in_out_dir(g, o.out, "sweep.csv");
  write_file_atomic(out, csv);
  std::size_t failed = 0;
  for (const auto& r : results) failed += r.status != "ok";
  write_meta(g, "sweep", {{"spec", o.spec}, {"cells", cells.size()}, {"workers", spec.workers}}, {out},
             {{"benchmark", benchmark_to_json(spec.benchmark)}, {"failed_cells", failed}});
  say(g, "sweep: " + std::to_string(results.size()) + " rows (" + std::to_string(failed) + " failed) -> " + out);
  return kExitOk;
}

// serve / bench -------------------------------------------------------------

struct ServeOpts {
  std::string service_config;
  std::string secret;
  std::string listen;
  std::string embeddings;
  std::size_t max_batch = 0;
  std::size_t timeout_ms = 0;
  bool debug_activation = false;
};

httplib::Server* g_server = nullptr;

int cmd_serve(const Globals& g, const ServeOpts& o) {
  // Precedence: flags > environment > config file.
  ServiceConfig cfg;
  cfg.synthetic = g.bench.provider;
  if (!o.service_config.empty()) {
    require_file(o.service_config, "service config", "(hand-written JSON)");
    cfg = service_config_from_json(read_json(o.service_config), cfg);
  }
  apply_service_env(cfg);
  if (!o.secret.empty()) cfg.secret_path = o.secret;
  if (cfg.secret_path.empty()) cfg.secret_path = in_out_dir(g, "", "secret.json");
  if (!o.listen.empty()) cfg.listen_address = o.listen;
  if (!o.embeddings.empty()) {
    cfg.provider_mode = ProviderMode::file_backed;
    cfg.embeddings_path = o.embeddings;
  }
  if (o.max_batch) cfg.max_batch = o.max_batch;
  if (o.timeout_ms) cfg.request_timeout_ms = o.timeout_ms;
  if (o.debug_activation) cfg.debug_activation = true;
  require_file(cfg.secret_path, "secret", "init");

  httplib::Server server;
  g_server = &server;
  std::signal(SIGINT, [](int) { if (g_server) g_server->stop(); });
  std::signal(SIGTERM, [](int) { if (g_server) g_server->stop(); });
  serve(cfg, server, g.quiet ? std::clog : std::cerr);
  g_server = nullptr;
  return kExitOk;
}

struct BenchOpts {
  std::size_t k = 5;
  std::size_t dim = 1536;
  std::size_t n_queries = 10000;
  std::string secret;
  std::string out;
};

int cmd_bench(const Globals& g, const BenchOpts& o) {
  const auto secret = o.secret.empty() ? make_bench_secret(o.k, o.dim, g.seed) : read_secret(o.secret);
  const auto report = bench_injection(secret, o.n_queries, g.seed);
  const auto out = in_out_dir(g, o.out, "bench.json");
  write_json(latency_to_json(report), out);
  write_meta(g, "bench", {{"k", report.k}, {"dim", report.dim}, {"n_queries", report.n_queries}}, {out});
  if (!g.quiet) {
    std::cout << "k " << report.k << " dim " << report.dim << " queries " << report.n_queries << "\n"
              << "mean_us " << format_double(report.mean_us) << "\n"
              << "p50_us " << format_double(report.p50_us) << "\n"
              << "p95_us " << format_double(report.p95_us) << "\n"
              << "p99_us " << format_double(report.p99_us) << "\n";
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"GeoMark: localized embedding watermarking, extraction simulation and attacks"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--seed", g.seed, "Master seed for secrets, training, attacks and verification")->capture_default_str();
  app.add_option("--out-dir", g.out_dir, "Directory for artifacts and metadata")->capture_default_str();
  app.add_option("--config", g.config_path, "JSON benchmark/experiment config (defaults otherwise)");
  app.add_flag("--quiet", g.quiet, "Suppress progress output");

  GenDataOpts gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Sample a corpus and its clean provider embeddings");
  auto* gen_size = gen_cmd->add_option("--corpus-size", gen.corpus_size, "Number of inputs");
  auto* gen_seed = gen_cmd->add_option("--corpus-seed", gen.corpus_seed, "Corpus sampling seed");
  gen_cmd->add_option("--format", gen.format_name, "binary or jsonl")
      ->check(CLI::IsMember({"binary", "jsonl"}))
      ->capture_default_str();
  gen_cmd->add_flag("!--no-reference", gen.with_reference, "Skip the attacker's reference embeddings");

  InitOpts init;
  auto* init_cmd = app.add_subcommand("init", "Select target, anchors and radii");
  init_cmd->add_option("--embeddings", init.embeddings, "Clean embeddings (default <out-dir>/embeddings.bin)");
  init_cmd->add_option("--out", init.out, "Secret path (default <out-dir>/secret.json)");
  init_cmd->add_option("--k", init.params.k, "Number of anchors")->capture_default_str();
  init_cmd->add_option("--rho", init.params.rho, "Local coverage ratio")->check(CLI::Range(0.0, 1.0))->capture_default_str();
  init_cmd->add_option("--lambda", init.params.lambda, "Injection strength")->check(CLI::NonNegativeNumber)->capture_default_str();
  init_cmd->add_option("--strategy", init.strategy, "fps or random")
      ->check(CLI::IsMember({"fps", "random"}))
      ->capture_default_str();

  ProtectOpts prot;
  auto* prot_cmd = app.add_subcommand("protect", "Serve embeddings through the watermark");
  prot_cmd->add_option("--embeddings", prot.embeddings, "Clean embeddings (default <out-dir>/embeddings.bin)");
  prot_cmd->add_option("--corpus", prot.corpus, "Encode this corpus with the provider instead");
  prot_cmd->add_option("--secret", prot.secret, "Secret (default <out-dir>/secret.json)");
  prot_cmd->add_option("--out", prot.out, "Output (default <out-dir>/protected.bin)");
  prot_cmd->add_option("--served", prot.served, "geomark, clean or uniform-shift")
      ->check(CLI::IsMember({"geomark", "clean", "uniform-shift"}))
      ->capture_default_str();

  StealOpts steal;
  auto* steal_cmd = app.add_subcommand("steal", "Train a surrogate on served embeddings");
  steal_cmd->add_option("--corpus", steal.corpus, "Training inputs (default <out-dir>/corpus.bin)");
  steal_cmd->add_option("--targets", steal.targets, "Served embeddings (default <out-dir>/protected.bin)");
  steal_cmd->add_option("--out", steal.out, "Model path (default <out-dir>/model.gmrk)");
  std::size_t epochs = 0, hidden = 0, batch = 0;
  double lr = -1.0;
  steal_cmd->add_option("--epochs", epochs, "Training epochs")->check(CLI::PositiveNumber);
  steal_cmd->add_option("--hidden", hidden, "Hidden width")->check(CLI::PositiveNumber);
  steal_cmd->add_option("--batch", batch, "Mini-batch size")->check(CLI::PositiveNumber);
  steal_cmd->add_option("--lr", lr, "Learning rate")->check(CLI::NonNegativeNumber);

  QueryOpts query;
  auto* query_cmd = app.add_subcommand("query", "Run the surrogate over a corpus");
  query_cmd->add_option("--model", query.model, "Model (default <out-dir>/model.gmrk)");
  query_cmd->add_option("--corpus", query.corpus, "Inputs (default <out-dir>/corpus.bin)");
  query_cmd->add_option("--out", query.out, "Output (default <out-dir>/suspect.bin)");

  AttackOpts atk;
  auto* attack_cmd = app.add_subcommand("attack", "Watermark-removal attacks");
  attack_cmd->require_subcommand(1);
  auto* cse_cmd = attack_cmd->add_subcommand("cse", "Clustering, Selection, Elimination on served embeddings");
  cse_cmd->add_option("--input", atk.input, "Served embeddings (default <out-dir>/protected.bin)");
  cse_cmd->add_option("--reference", atk.reference, "Reference embeddings (default <out-dir>/reference.bin)");
  cse_cmd->add_option("--secret", atk.secret, "Secret, only to report the reconstruction cosine");
  cse_cmd->add_option("--out", atk.out, "Output (default <out-dir>/cleansed.bin)");
  auto* shift_cmd = attack_cmd->add_subcommand("dim-shift", "Cyclic coordinate shift of suspect outputs");
  shift_cmd->add_option("--input", atk.input, "Suspect outputs (default <out-dir>/suspect.bin)");
  shift_cmd->add_option("--shift", atk.shift, "Positions (default dim/15)");
  shift_cmd->add_option("--out", atk.out, "Output (default <out-dir>/suspect-shifted.bin)");
  auto* reduce_cmd = attack_cmd->add_subcommand("dim-reduce", "Keep a coordinate prefix of suspect outputs");
  reduce_cmd->add_option("--input", atk.input, "Suspect outputs (default <out-dir>/suspect.bin)");
  reduce_cmd->add_option("--keep", atk.keep, "Coordinates kept (default 2*dim/3)")->check(CLI::PositiveNumber);
  reduce_cmd->add_option("--out", atk.out, "Output (default <out-dir>/suspect-reduced.bin)");
  auto* para_cmd = attack_cmd->add_subcommand("paraphrase", "Simulated rewriting of the stealing corpus");
  para_cmd->add_option("--corpus", atk.corpus, "Inputs (default <out-dir>/corpus.bin)");
  para_cmd->add_option("--out", atk.out, "Output (default <out-dir>/corpus-paraphrased.bin)");

  VerifyOpts ver;
  auto* verify_cmd = app.add_subcommand("verify", "KS ownership test against suspect outputs");
  verify_cmd->add_option("--suspect", ver.suspect, "Suspect outputs (default <out-dir>/suspect.bin)");
  verify_cmd->add_option("--secret", ver.secret, "Secret (default <out-dir>/secret.json)");
  verify_cmd->add_option("--embeddings", ver.embeddings, "Clean embeddings (default <out-dir>/embeddings.bin)");
  verify_cmd->add_option("--out", ver.out, "Report (default <out-dir>/report.json)");
  verify_cmd->add_option("--attack-label", ver.attack_label, "Label recorded in the report")->capture_default_str();
  verify_cmd->add_option("--n-backdoor", ver.n_backdoor, "Backdoor group size")->check(CLI::PositiveNumber);
  verify_cmd->add_option("--n-benign", ver.n_benign, "Benign group size")->check(CLI::PositiveNumber);

  SweepOpts sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "Run a parameter grid and write a tidy CSV");
  sweep_cmd->add_option("--spec", sweep.spec, "Sweep spec JSON");
  sweep_cmd->add_option("--out", sweep.out, "CSV path (default <out-dir>/sweep.csv)");
  sweep_cmd->add_option("--workers", sweep.workers, "Worker threads (default: logical cores)");

  ServeOpts srv;
  auto* serve_cmd = app.add_subcommand("serve", "Embedding proxy with in-line watermarking");
  serve_cmd->add_option("--service-config", srv.service_config, "Service config JSON");
  serve_cmd->add_option("--secret", srv.secret, "Secret (overrides GEOMARK_SECRET)");
  serve_cmd->add_option("--listen", srv.listen, "host:port (overrides GEOMARK_LISTEN)");
  serve_cmd->add_option("--embeddings", srv.embeddings, "Serve this embedding file instead of the synthetic provider");
  serve_cmd->add_option("--max-batch", srv.max_batch, "Largest accepted batch")->check(CLI::PositiveNumber);
  serve_cmd->add_option("--timeout-ms", srv.timeout_ms, "Per-request budget")->check(CLI::PositiveNumber);
  serve_cmd->add_flag("--debug-activation", srv.debug_activation, "Expose per-item `watermarked` (leaks geometry)");

  BenchOpts bench;
  auto* bench_cmd = app.add_subcommand("bench", "Time activation + injection in isolation");
  bench_cmd->add_option("--k", bench.k, "Anchors")->check(CLI::PositiveNumber)->capture_default_str();
  bench_cmd->add_option("--dim", bench.dim, "Dimension")->check(CLI::Range(2, 1 << 20))->capture_default_str();
  bench_cmd->add_option("--queries", bench.n_queries, "Timed queries (>= 1000)")
      ->check(CLI::Range(1000, 100000000))
      ->capture_default_str();
  bench_cmd->add_option("--secret", bench.secret, "Time a real secret instead of a random one");
  bench_cmd->add_option("--out", bench.out, "Report (default <out-dir>/bench.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    if (!g.config_path.empty()) {
      require_file(g.config_path, "config", "(hand-written JSON)");
      g.bench = benchmark_from_json(read_json(g.config_path));
    }
    fs::create_directories(g.out_dir);

    if (*gen_cmd) {
      if (gen_size->count() == 0) gen.corpus_size = g.bench.corpus_size;
      if (gen_seed->count() == 0) gen.corpus_seed = g.bench.corpus_seed;
      gen.format = parse_file_format(gen.format_name);
      return cmd_gen_data(g, gen);
    }
    if (*init_cmd) return cmd_init(g, init);
    if (*prot_cmd) return cmd_protect(g, prot);
    if (*steal_cmd) {
      if (epochs) g.bench.training.epochs = epochs;
      if (hidden) g.bench.training.hidden = hidden;
      if (batch) g.bench.training.batch = batch;
      if (lr >= 0.0) g.bench.training.learning_rate = lr;
      return cmd_steal(g, steal);
    }
    if (*query_cmd) return cmd_query(g, query);
    if (*attack_cmd) {
      if (*cse_cmd) return cmd_attack_cse(g, atk);
      if (*shift_cmd) return cmd_attack_dims(g, atk, true);
      if (*reduce_cmd) return cmd_attack_dims(g, atk, false);
      if (*para_cmd) return cmd_attack_paraphrase(g, atk);
    }
    if (*verify_cmd) return cmd_verify(g, ver);
    if (*sweep_cmd) return cmd_sweep(g, sweep);
    if (*serve_cmd) return cmd_serve(g, srv);
    if (*bench_cmd) return cmd_bench(g, bench);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitFailure;
  }
  return kExitUsage;
}
