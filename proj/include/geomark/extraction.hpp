#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "geomark/embedding_set.hpp"
#include "geomark/error.hpp"
#include "geomark/format.hpp"
#include "geomark/vecmath.hpp"

namespace geomark {

struct InputFeature {
  std::string id;
  Vector features;
};

using Corpus = std::vector<InputFeature>;

/// Seeded stand-in for a provider encoder. Inputs are routed softly to one of
/// several modes on the unit sphere (with deliberately skewed occupancy) and
/// then displaced by a fixed random tanh map, so the output manifold is a
/// mixture of clusters with uneven density.
struct SyntheticProvider {
  std::uint64_t seed = 0;
  std::size_t input_dim = 0;
  std::size_t output_dim = 0;
  std::size_t n_modes = 0;
  std::size_t map_hidden = 0;
  double gate_sharpness = 3.0;
  double mode_strength = 1.0;

  std::vector<Vector> mode_centers;
  std::vector<double> mixing_weights;
  std::vector<Vector> gate_directions;
  std::vector<double> gate_bias;
  Eigen::MatrixXd map_in;   // map_hidden x input_dim
  Eigen::VectorXd map_in_bias;
  Eigen::MatrixXd map_out;  // output_dim x map_hidden

  std::string fingerprint() const {
    std::uint64_t h = fnv1a64(std::to_string(input_dim) + ":" + std::to_string(output_dim) + ":" +
                              std::to_string(n_modes));
    auto mix = [&h](const double* data, std::size_t n) {
      h = fnv1a64(std::string_view(reinterpret_cast<const char*>(data), n * sizeof(double)), h);
    };
    for (const auto& c : mode_centers) mix(c.data(), c.size());
    for (const auto& g : gate_directions) mix(g.data(), g.size());
    mix(gate_bias.data(), gate_bias.size());
    mix(map_in.data(), static_cast<std::size_t>(map_in.size()));
    mix(map_in_bias.data(), static_cast<std::size_t>(map_in_bias.size()));
    mix(map_out.data(), static_cast<std::size_t>(map_out.size()));
    return hex64(h);
  }
};

struct ProviderParams {
  std::uint64_t seed = 1;
  std::size_t input_dim = 32;
  std::size_t output_dim = 256;
  std::size_t n_modes = 8;
};

namespace detail {

inline std::vector<double> gate_scores(const SyntheticProvider& p, VectorView x) {
  std::vector<double> s(p.n_modes);
  for (std::size_t m = 0; m < p.n_modes; ++m) s[m] = dot(p.gate_directions[m], x) + p.gate_bias[m];
  return s;
}

inline std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace detail

/// Hard mode assignment of an input (the mode with the largest gate score).
inline std::size_t provider_mode(const SyntheticProvider& p, VectorView x) {
  return detail::argmax(detail::gate_scores(p, x));
}

inline Vector encode(const SyntheticProvider& p, VectorView x) {
  if (x.size() != p.input_dim) {
    throw Error(ErrorCode::DimMismatch, "input dim " + std::to_string(x.size()) + ", provider expects " +
                                            std::to_string(p.input_dim));
  }
  auto scores = detail::gate_scores(p, x);
  const double top = *std::max_element(scores.begin(), scores.end());
  double z = 0.0;
  for (double& s : scores) {
    s = std::exp(p.gate_sharpness * (s - top));
    z += s;
  }
  Eigen::Map<const Eigen::VectorXd> xv(x.data(), static_cast<Eigen::Index>(x.size()));
  const Eigen::VectorXd hidden = (p.map_in * xv + p.map_in_bias).array().tanh().matrix();
  const Eigen::VectorXd local = p.map_out * hidden;
  Vector out(p.output_dim);
  for (std::size_t j = 0; j < p.output_dim; ++j) {
    double pull = 0.0;
    for (std::size_t m = 0; m < p.n_modes; ++m) pull += scores[m] * p.mode_centers[m][j];
    out[j] = p.mode_strength * pull / z + local(static_cast<Eigen::Index>(j));
  }
  return normalize(out);
}

inline SyntheticProvider make_provider(const ProviderParams& params) {
  if (params.input_dim < 4 || params.output_dim < 16 || params.n_modes < 2) {
    throw Error(ErrorCode::BadDims, "provider needs p >= 4, d >= 16 and at least two modes");
  }
  SyntheticProvider p;
  p.seed = params.seed;
  p.input_dim = params.input_dim;
  p.output_dim = params.output_dim;
  p.n_modes = params.n_modes;
  p.map_hidden = 64;

  std::mt19937_64 rng(params.seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  auto random_unit = [&](std::size_t dim) {
    Vector v(dim);
    for (double& x : v) x = gauss(rng);
    return normalize(v);
  };

  for (std::size_t m = 0; m < p.n_modes; ++m) p.mode_centers.push_back(random_unit(p.output_dim));
  for (std::size_t m = 0; m < p.n_modes; ++m) p.gate_directions.push_back(random_unit(p.input_dim));

  // Geometric weights: the most popular mode is five times the rarest.
  const double ratio = 5.0;
  double total = 0.0;
  for (std::size_t m = 0; m < p.n_modes; ++m) {
    const double w = std::pow(ratio, -static_cast<double>(m) / static_cast<double>(p.n_modes - 1));
    p.mixing_weights.push_back(w);
    total += w;
  }
  for (double& w : p.mixing_weights) w /= total;

  const auto h = static_cast<Eigen::Index>(p.map_hidden);
  const auto pin = static_cast<Eigen::Index>(p.input_dim);
  const auto pout = static_cast<Eigen::Index>(p.output_dim);
  p.map_in.resize(h, pin);
  p.map_in_bias.resize(h);
  p.map_out.resize(pout, h);
  const double in_scale = 1.0 / std::sqrt(static_cast<double>(p.input_dim));
  for (Eigen::Index i = 0; i < p.map_in.size(); ++i) p.map_in.data()[i] = gauss(rng) * in_scale;
  for (Eigen::Index i = 0; i < h; ++i) p.map_in_bias(i) = 0.3 * gauss(rng);
  const double out_scale = 1.6 / std::sqrt(static_cast<double>(p.map_hidden));
  for (Eigen::Index i = 0; i < p.map_out.size(); ++i) {
    p.map_out.data()[i] = gauss(rng) * out_scale / std::sqrt(static_cast<double>(p.output_dim));
  }

  // Calibrate gate biases on a fixed probe sample so hard-assignment
  // occupancy follows the mixing weights.
  p.gate_bias.assign(p.n_modes, 0.0);
  for (std::size_t m = 0; m < p.n_modes; ++m) p.gate_bias[m] = std::log(p.mixing_weights[m] * p.n_modes);
  std::vector<Vector> probe(4000, Vector(p.input_dim));
  for (auto& x : probe) {
    for (double& v : x) v = gauss(rng);
  }
  for (int round = 0; round < 40; ++round) {
    std::vector<double> occupancy(p.n_modes, 0.5);
    for (const auto& x : probe) occupancy[provider_mode(p, x)] += 1.0;
    for (std::size_t m = 0; m < p.n_modes; ++m) {
      const double observed = occupancy[m] / static_cast<double>(probe.size());
      p.gate_bias[m] += 0.5 * (std::log(p.mixing_weights[m]) - std::log(observed));
    }
  }
  return p;
}

/// An encoder of the same family with independently jittered parameters,
/// standing in for the attacker's own clean local model.
inline SyntheticProvider make_reference_encoder(const SyntheticProvider& provider, double jitter, std::uint64_t seed) {
  SyntheticProvider r = provider;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  for (auto& c : r.mode_centers) {
    for (double& x : c) x += jitter * gauss(rng) / std::sqrt(static_cast<double>(c.size()));
    c = normalize(c);
  }
  for (Eigen::Index i = 0; i < r.map_out.size(); ++i) {
    r.map_out.data()[i] *= 1.0 + jitter * gauss(rng);
  }
  return r;
}

inline EmbeddingSet encode_corpus(const SyntheticProvider& p, const Corpus& corpus) {
  EmbeddingSet set(p.output_dim);
  set.reserve(corpus.size());
  for (const auto& x : corpus) set.add_raw(x.id, encode(p, x.features));
  return set;
}

inline std::string corpus_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "x%06zu", i);
  return buf;
}

inline Corpus sample_corpus(std::size_t input_dim, std::size_t n, std::uint64_t seed) {
  if (n == 0) throw Error(ErrorCode::InvalidArgument, "corpus size must be positive");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Corpus corpus(n);
  for (std::size_t i = 0; i < n; ++i) {
    corpus[i].id = corpus_id(i + 1);
    corpus[i].features.resize(input_dim);
    for (double& v : corpus[i].features) v = gauss(rng);
  }
  return corpus;
}

inline Corpus sample_corpus(const SyntheticProvider& p, std::size_t n, std::uint64_t seed) {
  return sample_corpus(p.input_dim, n, seed);
}

// Surrogate -----------------------------------------------------------------

struct TrainingConfig {
  std::size_t epochs = 200;
  double learning_rate = 1e-3;
  std::size_t batch = 64;
  std::size_t hidden = 512;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

struct TrainingInfo {
  TrainingConfig config;
  std::vector<double> epoch_loss;
  double final_loss = 0.0;
  std::string warning;
};

/// Two-layer tanh MLP: y = W2 tanh(W1 x + b1) + b2.
struct SurrogateModel {
  Eigen::MatrixXd w1;  // hidden x input
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;  // output x hidden
  Eigen::VectorXd b2;
  TrainingInfo info;

  std::size_t input_dim() const noexcept { return static_cast<std::size_t>(w1.cols()); }
  std::size_t hidden_dim() const noexcept { return static_cast<std::size_t>(w1.rows()); }
  std::size_t output_dim() const noexcept { return static_cast<std::size_t>(w2.rows()); }
};

struct SurrogateGradients {
  Eigen::MatrixXd w1;
  Eigen::VectorXd b1;
  Eigen::MatrixXd w2;
  Eigen::VectorXd b2;
};

inline SurrogateModel init_surrogate(std::size_t input_dim, std::size_t hidden, std::size_t output_dim,
                                     std::uint64_t seed) {
  SurrogateModel m;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const auto in = static_cast<Eigen::Index>(input_dim);
  const auto hid = static_cast<Eigen::Index>(hidden);
  const auto out = static_cast<Eigen::Index>(output_dim);
  m.w1.resize(hid, in);
  m.w2.resize(out, hid);
  const double s1 = 1.0 / std::sqrt(static_cast<double>(input_dim));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden) * static_cast<double>(output_dim));
  for (Eigen::Index i = 0; i < m.w1.size(); ++i) m.w1.data()[i] = gauss(rng) * s1;
  for (Eigen::Index i = 0; i < m.w2.size(); ++i) m.w2.data()[i] = gauss(rng) * s2;
  m.b1 = Eigen::VectorXd::Zero(hid);
  m.b2 = Eigen::VectorXd::Zero(out);
  return m;
}

/// Mean squared error over every element of the batch, and its gradient.
inline double surrogate_loss(const SurrogateModel& m, const Eigen::MatrixXd& x, const Eigen::MatrixXd& t,
                             SurrogateGradients* grad = nullptr) {
  const double inv_b = 1.0 / static_cast<double>(x.cols() * t.rows());
  const Eigen::MatrixXd h = ((m.w1 * x).colwise() + m.b1).array().tanh().matrix();
  const Eigen::MatrixXd err = ((m.w2 * h).colwise() + m.b2) - t;
  const double loss = err.squaredNorm() * inv_b;
  if (grad) {
    const Eigen::MatrixXd dy = (2.0 * inv_b) * err;
    grad->w2.noalias() = dy * h.transpose();
    grad->b2 = dy.rowwise().sum();
    const Eigen::MatrixXd dh = ((m.w2.transpose() * dy).array() * (1.0 - h.array().square())).matrix();
    grad->w1.noalias() = dh * x.transpose();
    grad->b1 = dh.rowwise().sum();
  }
  return loss;
}

namespace detail {

struct AdamSlot {
  Eigen::ArrayXXd m;
  Eigen::ArrayXXd v;

  template <typename Param, typename Grad>
  void step(Param& param, const Grad& g, double lr, const TrainingConfig& c, double bias1, double bias2) {
    if (m.size() == 0) {
      m = Eigen::ArrayXXd::Zero(param.rows(), param.cols());
      v = Eigen::ArrayXXd::Zero(param.rows(), param.cols());
    }
    m = c.beta1 * m + (1.0 - c.beta1) * g.array();
    v = c.beta2 * v + (1.0 - c.beta2) * g.array().square();
    param.array() -= lr * (m / bias1) / ((v / bias2).sqrt() + c.epsilon);
  }
};

}  // namespace detail

/// Fits the surrogate to `targets` (matched by id) with Adam on shuffled
/// mini-batches.
inline SurrogateModel train_surrogate(const Corpus& corpus, const EmbeddingSet& targets, const TrainingConfig& cfg) {
  if (corpus.empty()) throw Error(ErrorCode::EmptyInput, "empty training corpus");
  if (corpus.size() != targets.size()) throw Error(ErrorCode::IdMismatch, "corpus and targets differ in size");
  if (cfg.batch == 0 || corpus.size() < cfg.batch) {
    throw Error(ErrorCode::InvalidArgument, "corpus smaller than one batch");
  }
  const std::size_t n = corpus.size();
  const std::size_t p = corpus.front().features.size();
  const std::size_t d = targets.dim();

  Eigen::MatrixXd x(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(n));
  Eigen::MatrixXd t(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i) {
    if (corpus[i].features.size() != p) throw Error(ErrorCode::DimMismatch, "corpus features differ in dimension");
    const auto& target = targets.at(corpus[i].id);
    for (std::size_t j = 0; j < p; ++j) x(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = corpus[i].features[j];
    for (std::size_t j = 0; j < d; ++j) t(static_cast<Eigen::Index>(j), static_cast<Eigen::Index>(i)) = target[j];
  }

  SurrogateModel model = init_surrogate(p, cfg.hidden, d, cfg.seed);
  model.info.config = cfg;
  std::mt19937_64 rng(cfg.seed ^ 0xa0761d6478bd642fULL);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  detail::AdamSlot s_w1, s_b1, s_w2, s_b2;
  SurrogateGradients g;
  Eigen::MatrixXd xb, tb;
  double bias1 = 1.0, bias2 = 1.0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    double epoch_loss = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch) {
      const std::size_t count = std::min(cfg.batch, n - start);
      xb.resize(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(count));
      tb.resize(static_cast<Eigen::Index>(d), static_cast<Eigen::Index>(count));
      for (std::size_t c = 0; c < count; ++c) {
        const auto col = static_cast<Eigen::Index>(order[start + c]);
        xb.col(static_cast<Eigen::Index>(c)) = x.col(col);
        tb.col(static_cast<Eigen::Index>(c)) = t.col(col);
      }
      const double loss = surrogate_loss(model, xb, tb, &g);
      if (!std::isfinite(loss)) {
        throw Error(ErrorCode::Diverged, "loss became non-finite at epoch " + std::to_string(epoch + 1));
      }
      epoch_loss += loss * static_cast<double>(count);
      bias1 *= cfg.beta1;
      bias2 *= cfg.beta2;
      const double b1c = 1.0 - bias1;
      const double b2c = 1.0 - bias2;
      s_w1.step(model.w1, g.w1, cfg.learning_rate, cfg, b1c, b2c);
      s_b1.step(model.b1, g.b1, cfg.learning_rate, cfg, b1c, b2c);
      s_w2.step(model.w2, g.w2, cfg.learning_rate, cfg, b1c, b2c);
      s_b2.step(model.b2, g.b2, cfg.learning_rate, cfg, b1c, b2c);
    }
    model.info.epoch_loss.push_back(epoch_loss / static_cast<double>(n));
  }
  model.info.final_loss = surrogate_loss(model, x, t);
  if (cfg.learning_rate <= 0.0 || model.info.epoch_loss.size() < 2 ||
      !(model.info.epoch_loss.back() < model.info.epoch_loss.front())) {
    model.info.warning = "training loss did not decrease";
  }
  return model;
}

/// Raw forward pass; the output is deliberately not normalized.
inline Vector surrogate_encode(const SurrogateModel& m, VectorView x) {
  if (x.size() != m.input_dim()) {
    throw Error(ErrorCode::DimMismatch, "input dim " + std::to_string(x.size()) + ", model expects " +
                                            std::to_string(m.input_dim()));
  }
  Eigen::Map<const Eigen::VectorXd> xv(x.data(), static_cast<Eigen::Index>(x.size()));
  const Eigen::VectorXd y = m.w2 * (m.w1 * xv + m.b1).array().tanh().matrix() + m.b2;
  return Vector(y.data(), y.data() + y.size());
}

/// Surrogate outputs for a whole corpus, keyed by id, unnormalized.
inline EmbeddingSet surrogate_encode_corpus(const SurrogateModel& m, const Corpus& corpus) {
  EmbeddingSet out(m.output_dim());
  out.reserve(corpus.size());
  for (const auto& x : corpus) out.add_raw(x.id, surrogate_encode(m, x.features));
  return out;
}

}  // namespace geomark
