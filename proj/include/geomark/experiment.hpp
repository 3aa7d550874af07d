#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "geomark/attacks.hpp"
#include "geomark/embedding_set.hpp"
#include "geomark/extraction.hpp"
#include "geomark/format.hpp"
#include "geomark/verification.hpp"
#include "geomark/watermark.hpp"

namespace geomark {

/// What the provider hands the thief.
enum class ServedMode {
  geomark,       // localized injection
  clean,         // no watermark at all
  uniform_shift  // control: every activated vector moved by the same unnormalized lambda * w
};

enum class AttackKind { none, cse, dim_shift, dim_reduce, paraphrase };

inline std::string to_string(AttackKind a) {
  switch (a) {
    case AttackKind::none: return "none";
    case AttackKind::cse: return "cse";
    case AttackKind::dim_shift: return "dim-shift";
    case AttackKind::dim_reduce: return "dim-reduce";
    case AttackKind::paraphrase: return "paraphrase";
  }
  return "none";
}

inline AttackKind parse_attack(const std::string& s) {
  if (s == "none") return AttackKind::none;
  if (s == "cse") return AttackKind::cse;
  if (s == "dim-shift") return AttackKind::dim_shift;
  if (s == "dim-reduce") return AttackKind::dim_reduce;
  if (s == "paraphrase") return AttackKind::paraphrase;
  throw Error(ErrorCode::InvalidArgument, "unknown attack '" + s + "'");
}

inline std::string to_string(ServedMode m) {
  switch (m) {
    case ServedMode::geomark: return "geomark";
    case ServedMode::clean: return "clean";
    case ServedMode::uniform_shift: return "uniform-shift";
  }
  return "geomark";
}

inline ServedMode parse_served_mode(const std::string& s) {
  if (s == "geomark") return ServedMode::geomark;
  if (s == "clean") return ServedMode::clean;
  if (s == "uniform-shift") return ServedMode::uniform_shift;
  throw Error(ErrorCode::InvalidArgument, "unknown served mode '" + s + "'");
}

/// Frozen desk-scale benchmark. Every default here is what the acceptance
/// suite runs against.
struct BenchmarkConfig {
  ProviderParams provider{};
  std::size_t corpus_size = 5000;
  std::uint64_t corpus_seed = 7;
  double reference_jitter = 0.3;
  std::uint64_t reference_seed = 99;
  TrainingConfig training{};
  std::size_t n_backdoor = 500;
  std::size_t n_benign = 500;
  double threshold = kDefaultSignificance;
  CseConfig cse{};
  ParaphraseConfig paraphrase{};
  std::size_t shift = 0;  // 0: dim / 15
  std::size_t keep = 0;   // 0: 2 * dim / 3
};

/// Provider, corpus and the clean embeddings every cell shares.
struct World {
  BenchmarkConfig config;
  SyntheticProvider provider;
  Corpus corpus;
  EmbeddingSet clean;
  SyntheticProvider reference_encoder;
  EmbeddingSet reference;

  explicit World(const BenchmarkConfig& cfg)
      : config(cfg),
        provider(make_provider(cfg.provider)),
        corpus(sample_corpus(provider, cfg.corpus_size, cfg.corpus_seed)),
        clean(encode_corpus(provider, corpus)),
        reference_encoder(make_reference_encoder(provider, cfg.reference_jitter, cfg.reference_seed)),
        reference(encode_corpus(reference_encoder, corpus)) {}
};

struct CellSpec {
  WatermarkParams watermark{};
  ServedMode served = ServedMode::geomark;
  AttackKind attack = AttackKind::none;
  std::uint64_t replicate_seed = 0;
};

struct CellResult {
  CellSpec spec;
  std::string status = "ok";
  VerificationReport report;
  std::optional<VerificationReport> report_before_attack;  // filled when an attack wraps the suspect outputs
  double activated_fraction = 0.0;
  double fidelity = 1.0;
  double reconstruction_cosine = -1.0;
  double target_anchor_min_distance = 0.0;
  double final_loss = 0.0;
  std::vector<double> epoch_loss;
  double wall_seconds = 0.0;
};

namespace detail {

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t salt) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace detail

/// What the thief receives for the given inputs under the cell's serving mode.
inline EmbeddingSet served_embeddings(const EmbeddingSet& clean, const WatermarkSecret& secret, ServedMode mode) {
  switch (mode) {
    case ServedMode::clean: return clean;
    case ServedMode::geomark: return protect_set(clean, secret).protected_set;
    case ServedMode::uniform_shift: {
      EmbeddingSet out(clean.dim());
      out.reserve(clean.size());
      for (std::size_t i = 0; i < clean.size(); ++i) {
        Vector v = clean.vector(i);
        if (!activation_set(v, secret).empty()) {
          for (std::size_t j = 0; j < v.size(); ++j) v[j] += secret.lambda * secret.target_w[j];
        }
        out.add_raw(clean.id(i), std::move(v));
      }
      return out;
    }
  }
  return clean;
}

inline double min_target_anchor_distance(const WatermarkSecret& secret) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& a : secret.anchors) best = std::min(best, l2_distance(a, secret.target_w));
  return best;
}

/// Verification id groups with the requested sizes capped by what the secret
/// makes available.
inline VerificationSets capped_verification_sets(const EmbeddingSet& clean, const WatermarkSecret& secret,
                                                 std::size_t n_backdoor, std::size_t n_benign, std::uint64_t seed) {
  std::size_t backdoor_available = 0;
  std::size_t benign_available = 0;
  for (std::size_t i = 0; i < clean.size(); ++i) {
    if (clean.id(i) == secret.target_id) continue;
    (activation_set(clean.vector(i), secret).empty() ? benign_available : backdoor_available) += 1;
  }
  return build_verification_sets(clean, secret, std::min(n_backdoor, backdoor_available),
                                 std::min(n_benign, benign_available), seed);
}

/// Verification against a suspect lookup table.
inline VerificationReport verify_suspect(const World& world, const WatermarkSecret& secret,
                                         const EmbeddingSet& suspect, std::uint64_t seed) {
  const auto sets = capped_verification_sets(world.clean, secret, world.config.n_backdoor, world.config.n_benign, seed);
  return verify([&suspect](const std::string& id) { return suspect.at(id); }, secret, sets.backdoor_ids,
                sets.benign_ids, world.config.threshold);
}

/// One full defender/thief/verifier round.
inline CellResult run_cell(const World& world, const CellSpec& spec) {
  const auto start = std::chrono::steady_clock::now();
  CellResult result;
  result.spec = spec;
  const auto& cfg = world.config;

  WatermarkParams wp = spec.watermark;
  wp.seed = detail::derive_seed(spec.replicate_seed, 1);
  const auto secret = initialize_secret(world.clean, wp);
  result.target_anchor_min_distance = min_target_anchor_distance(secret);

  const EmbeddingSet served = served_embeddings(world.clean, secret, spec.served);
  {
    const auto outcome = protect_set(world.clean, secret);
    result.activated_fraction = outcome.activated_fraction();
    result.fidelity = mean_fidelity(world.clean, outcome.protected_set);
  }

  TrainingConfig tc = cfg.training;
  tc.seed = detail::derive_seed(spec.replicate_seed, 2);
  const Corpus* train_inputs = &world.corpus;
  Corpus paraphrased;
  EmbeddingSet targets;
  switch (spec.attack) {
    case AttackKind::cse: {
      CseConfig cc = cfg.cse;
      cc.seed = detail::derive_seed(spec.replicate_seed, 3);
      auto outcome = cse_attack(served, world.reference, cc);
      result.reconstruction_cosine = cse_reconstruction_cosine(outcome, secret);
      targets = std::move(outcome.cleansed);
      break;
    }
    case AttackKind::paraphrase: {
      ParaphraseConfig pc = cfg.paraphrase;
      pc.seed = detail::derive_seed(spec.replicate_seed, 4);
      paraphrased = paraphrase_corpus(world.corpus, world.provider, pc);
      train_inputs = &paraphrased;
      targets = served_embeddings(encode_corpus(world.provider, paraphrased), secret, spec.served);
      break;
    }
    default:
      targets = served;
      break;
  }

  const auto model = train_surrogate(*train_inputs, targets, tc);
  result.final_loss = model.info.final_loss;
  result.epoch_loss = model.info.epoch_loss;

  EmbeddingSet suspect = surrogate_encode_corpus(model, world.corpus);
  const auto verify_seed = detail::derive_seed(spec.replicate_seed, 5);
  if (spec.attack == AttackKind::dim_shift || spec.attack == AttackKind::dim_reduce) {
    result.report_before_attack = verify_suspect(world, secret, suspect, verify_seed);
    suspect = spec.attack == AttackKind::dim_shift
                  ? dimension_shift(suspect, cfg.shift ? cfg.shift : default_shift(suspect.dim()))
                  : dimension_reduction(suspect, cfg.keep ? cfg.keep : default_keep(suspect.dim()));
  }
  result.report = verify_suspect(world, secret, suspect, verify_seed);
  result.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

/// Runs cells on a bounded pool; results come back in input order.
inline std::vector<CellResult> run_cells(const World& world, const std::vector<CellSpec>& cells, std::size_t workers = 0,
                                         const std::function<void(const CellResult&)>& on_done = {}) {
  if (workers == 0) workers = std::max(1u, std::thread::hardware_concurrency());
  std::vector<CellResult> results(cells.size());
  std::atomic<std::size_t> next{0};
  std::mutex done_mutex;
  auto work = [&] {
    for (std::size_t i = next++; i < cells.size(); i = next++) {
      try {
        results[i] = run_cell(world, cells[i]);
      } catch (const std::exception& e) {
        results[i].spec = cells[i];
        results[i].status = std::string("error: ") + e.what();
      }
      if (on_done) {
        std::lock_guard lock(done_mutex);
        on_done(results[i]);
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 1; w < std::min(workers, cells.size()); ++w) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  return results;
}

// Sweep ---------------------------------------------------------------------

struct SweepSpec {
  BenchmarkConfig benchmark{};
  std::vector<std::size_t> k_grid{5};
  std::vector<double> rho_grid{0.04};
  std::vector<double> lambda_grid{0.4};
  std::vector<AnchorStrategy> strategies{AnchorStrategy::fps};
  std::vector<ServedMode> served{ServedMode::geomark};
  std::vector<AttackKind> attacks{AttackKind::none};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::size_t workers = 0;
};

inline std::vector<CellSpec> expand(const SweepSpec& s) {
  if (s.k_grid.empty() || s.rho_grid.empty() || s.lambda_grid.empty() || s.strategies.empty() || s.served.empty() ||
      s.attacks.empty() || s.seeds.empty()) {
    throw Error(ErrorCode::InvalidArgument, "every sweep grid needs at least one value");
  }
  std::vector<CellSpec> cells;
  for (auto served : s.served)
    for (auto attack : s.attacks)
      for (auto strategy : s.strategies)
        for (auto k : s.k_grid)
          for (auto rho : s.rho_grid)
            for (auto lambda : s.lambda_grid)
              for (auto seed : s.seeds) {
                CellSpec c;
                c.watermark.k = k;
                c.watermark.rho = rho;
                c.watermark.lambda = lambda;
                c.watermark.strategy = strategy;
                c.served = served;
                c.attack = attack;
                c.replicate_seed = seed;
                cells.push_back(c);
              }
  return cells;
}

inline std::string sweep_csv_header() {
  return "served,attack,strategy,k,rho,lambda,seed,status,p_value,delta_cos,delta_l2,ks_statistic,n_backdoor,n_benign,"
         "verdict,reconstruction_cosine,activated_fraction,fidelity,final_loss,wall_seconds";
}

inline std::string sweep_csv_row(const CellResult& r) {
  const auto& s = r.spec;
  std::string status = r.status;
  std::replace(status.begin(), status.end(), ',', ';');
  std::replace(status.begin(), status.end(), '\n', ' ');
  std::string row = to_string(s.served) + "," + to_string(s.attack) + "," + to_string(s.watermark.strategy) + "," +
                    std::to_string(s.watermark.k) + "," + format_double(s.watermark.rho) + "," +
                    format_double(s.watermark.lambda) + "," + std::to_string(s.replicate_seed) + "," + status + ",";
  if (r.status != "ok") return row + ",,,,,,,,,,,";
  const auto& rep = r.report;
  row += format_double(rep.p_value) + "," + format_double(rep.delta_cos) + "," + format_double(rep.delta_l2) + "," +
         format_double(rep.ks_statistic) + "," + std::to_string(rep.n_backdoor) + "," + std::to_string(rep.n_benign) +
         "," + (rep.verdict ? "true" : "false") + ",";
  row += (r.reconstruction_cosine >= 0.0 ? format_double(r.reconstruction_cosine) : std::string()) + ",";
  row += format_double(r.activated_fraction) + "," + format_double(r.fidelity) + "," + format_double(r.final_loss) + "," +
         format_double(r.wall_seconds);
  return row;
}

namespace detail {

template <typename T>
void read_grid(const nlohmann::json& j, const char* key, std::vector<T>& out) {
  if (j.contains(key)) out = j.at(key).get<std::vector<T>>();
}

}  // namespace detail

inline nlohmann::json benchmark_to_json(const BenchmarkConfig& b) {
  return {{"provider",
           {{"seed", b.provider.seed},
            {"input_dim", b.provider.input_dim},
            {"output_dim", b.provider.output_dim},
            {"n_modes", b.provider.n_modes}}},
          {"corpus_size", b.corpus_size},
          {"corpus_seed", b.corpus_seed},
          {"reference_jitter", b.reference_jitter},
          {"reference_seed", b.reference_seed},
          {"training",
           {{"epochs", b.training.epochs},
            {"learning_rate", b.training.learning_rate},
            {"batch", b.training.batch},
            {"hidden", b.training.hidden}}},
          {"n_backdoor", b.n_backdoor},
          {"n_benign", b.n_benign},
          {"threshold", b.threshold},
          {"cse",
           {{"n_components", b.cse.n_components},
            {"n_clusters", b.cse.n_clusters},
            {"selection_fraction", b.cse.selection_fraction},
            {"max_iters", b.cse.max_iters}}},
          {"paraphrase",
           {{"k_candidates", b.paraphrase.k_candidates},
            {"sim_threshold", b.paraphrase.sim_threshold},
            {"noise_scale", b.paraphrase.noise_scale}}},
          {"shift", b.shift},
          {"keep", b.keep}};
}

/// Missing keys keep the values in `b`; unknown keys are ignored.
inline BenchmarkConfig benchmark_from_json(const nlohmann::json& j, BenchmarkConfig b = {}) {
  try {
    if (j.contains("provider")) {
      const auto& p = j.at("provider");
      b.provider.seed = p.value("seed", b.provider.seed);
      b.provider.input_dim = p.value("input_dim", b.provider.input_dim);
      b.provider.output_dim = p.value("output_dim", b.provider.output_dim);
      b.provider.n_modes = p.value("n_modes", b.provider.n_modes);
    }
    b.corpus_size = j.value("corpus_size", b.corpus_size);
    b.corpus_seed = j.value("corpus_seed", b.corpus_seed);
    b.reference_jitter = j.value("reference_jitter", b.reference_jitter);
    b.reference_seed = j.value("reference_seed", b.reference_seed);
    if (j.contains("training")) {
      const auto& t = j.at("training");
      b.training.epochs = t.value("epochs", b.training.epochs);
      b.training.learning_rate = t.value("learning_rate", b.training.learning_rate);
      b.training.batch = t.value("batch", b.training.batch);
      b.training.hidden = t.value("hidden", b.training.hidden);
    }
    b.n_backdoor = j.value("n_backdoor", b.n_backdoor);
    b.n_benign = j.value("n_benign", b.n_benign);
    b.threshold = j.value("threshold", b.threshold);
    if (j.contains("cse")) {
      const auto& c = j.at("cse");
      b.cse.n_components = c.value("n_components", b.cse.n_components);
      b.cse.n_clusters = c.value("n_clusters", b.cse.n_clusters);
      b.cse.selection_fraction = c.value("selection_fraction", b.cse.selection_fraction);
      b.cse.max_iters = c.value("max_iters", b.cse.max_iters);
    }
    if (j.contains("paraphrase")) {
      const auto& c = j.at("paraphrase");
      b.paraphrase.k_candidates = c.value("k_candidates", b.paraphrase.k_candidates);
      b.paraphrase.sim_threshold = c.value("sim_threshold", b.paraphrase.sim_threshold);
      b.paraphrase.noise_scale = c.value("noise_scale", b.paraphrase.noise_scale);
    }
    b.shift = j.value("shift", b.shift);
    b.keep = j.value("keep", b.keep);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("benchmark config: ") + e.what());
  }
  return b;
}

/// Parses a sweep spec: benchmark settings plus the grids.
inline SweepSpec sweep_from_json(const nlohmann::json& j) {
  SweepSpec s;
  s.benchmark = benchmark_from_json(j);
  try {
    detail::read_grid(j, "k", s.k_grid);
    detail::read_grid(j, "rho", s.rho_grid);
    detail::read_grid(j, "lambda", s.lambda_grid);
    detail::read_grid(j, "seeds", s.seeds);
    if (j.contains("strategies")) {
      s.strategies.clear();
      for (const auto& v : j.at("strategies")) s.strategies.push_back(parse_strategy(v.get<std::string>()));
    }
    if (j.contains("served")) {
      s.served.clear();
      for (const auto& v : j.at("served")) s.served.push_back(parse_served_mode(v.get<std::string>()));
    }
    if (j.contains("attacks")) {
      s.attacks.clear();
      for (const auto& v : j.at("attacks")) s.attacks.push_back(parse_attack(v.get<std::string>()));
    }
    s.workers = j.value("workers", s.workers);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::InvalidArgument, std::string("sweep spec: ") + e.what());
  }
  std::vector<std::uint64_t> sorted = s.seeds;
  std::sort(sorted.begin(), sorted.end());
  if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
    throw Error(ErrorCode::InvalidArgument, "replicate seeds must be distinct");
  }
  return s;
}

}  // namespace geomark
