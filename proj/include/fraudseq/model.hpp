#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "fraudseq/error.hpp"
#include "fraudseq/rng.hpp"
#include "fraudseq/schema.hpp"

namespace fraudseq {

enum class Precision { kF32, kF64 };

/// Shapes of every learnable block. Built from a fitted pipeline (dense_dim,
/// cat_cardinalities) plus the architecture choices.
struct ModelConfig {
  std::size_t dense_dim = 0;
  std::vector<int> cat_cardinalities;
  std::vector<int> embed_dims;  // one per categorical
  int input_width = 32;
  std::vector<int> gru_widths{128, 64};
  std::vector<int> classifier_widths{64};
  Precision precision = Precision::kF32;
  std::uint64_t schema_hash = 0;

  void check() const;
  std::size_t concat_dim() const;
  int state_width() const;  // sum over layers
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

template <class Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
template <class Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <class Scalar>
struct DenseLayer {
  MatrixX<Scalar> w;
  VectorX<Scalar> b;
};

/// One GRU layer: reset (r), update (z) and candidate (h) gates.
template <class Scalar>
struct GruLayer {
  MatrixX<Scalar> w_r, u_r;
  VectorX<Scalar> b_r;
  MatrixX<Scalar> w_z, u_z;
  VectorX<Scalar> b_z;
  MatrixX<Scalar> w_h, u_h;
  VectorX<Scalar> b_h;

  int width() const { return static_cast<int>(b_h.size()); }
};

template <class Scalar>
struct ModelParams {
  ModelConfig config;
  std::vector<MatrixX<Scalar>> embeddings;  // rows = cardinality
  DenseLayer<Scalar> input;                 // concat -> input_width, ReLU
  std::vector<GruLayer<Scalar>> gru;
  std::vector<DenseLayer<Scalar>> hidden;   // classifier ReLU layers
  DenseLayer<Scalar> output;                // -> one logit

  /// Same shapes, every entry zero. Also the gradient and Adam-moment layout.
  static ModelParams zeros(const ModelConfig& cfg);
};

/// Calls f(name, a, b, ...) for every tensor, walking the parameter sets in
/// lockstep. All sets must share one config.
template <class F, class First, class... Rest>
void visit_tensors(F&& f, First& first, Rest&... rest) {
  for (std::size_t i = 0; i < first.embeddings.size(); ++i) {
    f("embedding." + std::to_string(i), first.embeddings[i], rest.embeddings[i]...);
  }
  f(std::string("input.w"), first.input.w, rest.input.w...);
  f(std::string("input.b"), first.input.b, rest.input.b...);
  for (std::size_t l = 0; l < first.gru.size(); ++l) {
    const std::string p = "gru." + std::to_string(l) + ".";
    f(p + "w_r", first.gru[l].w_r, rest.gru[l].w_r...);
    f(p + "u_r", first.gru[l].u_r, rest.gru[l].u_r...);
    f(p + "b_r", first.gru[l].b_r, rest.gru[l].b_r...);
    f(p + "w_z", first.gru[l].w_z, rest.gru[l].w_z...);
    f(p + "u_z", first.gru[l].u_z, rest.gru[l].u_z...);
    f(p + "b_z", first.gru[l].b_z, rest.gru[l].b_z...);
    f(p + "w_h", first.gru[l].w_h, rest.gru[l].w_h...);
    f(p + "u_h", first.gru[l].u_h, rest.gru[l].u_h...);
    f(p + "b_h", first.gru[l].b_h, rest.gru[l].b_h...);
  }
  for (std::size_t j = 0; j < first.hidden.size(); ++j) {
    const std::string p = "hidden." + std::to_string(j) + ".";
    f(p + "w", first.hidden[j].w, rest.hidden[j].w...);
    f(p + "b", first.hidden[j].b, rest.hidden[j].b...);
  }
  f(std::string("output.w"), first.output.w, rest.output.w...);
  f(std::string("output.b"), first.output.b, rest.output.b...);
}

template <class Scalar>
ModelParams<Scalar> ModelParams<Scalar>::zeros(const ModelConfig& cfg) {
  cfg.check();
  ModelParams p;
  p.config = cfg;
  for (std::size_t i = 0; i < cfg.cat_cardinalities.size(); ++i) {
    p.embeddings.push_back(MatrixX<Scalar>::Zero(cfg.cat_cardinalities[i], cfg.embed_dims[i]));
  }
  const auto concat = static_cast<Eigen::Index>(cfg.concat_dim());
  p.input.w = MatrixX<Scalar>::Zero(cfg.input_width, concat);
  p.input.b = VectorX<Scalar>::Zero(cfg.input_width);
  int in = cfg.input_width;
  for (int width : cfg.gru_widths) {
    GruLayer<Scalar> g;
    g.w_r = g.w_z = g.w_h = MatrixX<Scalar>::Zero(width, in);
    g.u_r = g.u_z = g.u_h = MatrixX<Scalar>::Zero(width, width);
    g.b_r = g.b_z = g.b_h = VectorX<Scalar>::Zero(width);
    p.gru.push_back(std::move(g));
    in = width;
  }
  int cls_in = cfg.gru_widths.back() + cfg.input_width;
  for (int width : cfg.classifier_widths) {
    p.hidden.push_back({MatrixX<Scalar>::Zero(width, cls_in), VectorX<Scalar>::Zero(width)});
    cls_in = width;
  }
  p.output = {MatrixX<Scalar>::Zero(1, cls_in), VectorX<Scalar>::Zero(1)};
  return p;
}

/// Glorot-uniform matrices with a = sqrt(6 / (fan_in + fan_out)), zero biases,
/// embeddings uniform in (-0.05, 0.05). Deterministic per seed.
template <class Scalar>
ModelParams<Scalar> init_params(const ModelConfig& cfg, std::uint64_t seed) {
  auto p = ModelParams<Scalar>::zeros(cfg);
  Rng rng(seed);
  auto glorot = [&](MatrixX<Scalar>& m) {
    const double a = std::sqrt(6.0 / static_cast<double>(m.rows() + m.cols()));
    for (Eigen::Index j = 0; j < m.cols(); ++j)
      for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = static_cast<Scalar>(rng.uniform(-a, a));
  };
  for (auto& e : p.embeddings) {
    for (Eigen::Index j = 0; j < e.cols(); ++j)
      for (Eigen::Index i = 0; i < e.rows(); ++i) e(i, j) = static_cast<Scalar>(rng.uniform(-0.05, 0.05));
  }
  glorot(p.input.w);
  for (auto& g : p.gru) {
    for (auto* m : {&g.w_r, &g.u_r, &g.w_z, &g.u_z, &g.w_h, &g.u_h}) glorot(*m);
  }
  for (auto& h : p.hidden) glorot(h.w);
  glorot(p.output.w);
  return p;
}

template <class To, class From>
ModelParams<To> cast_params(const ModelParams<From>& src) {
  auto dst = ModelParams<To>::zeros(src.config);
  visit_tensors([](const std::string&, auto& d, const auto& s) { d = s.template cast<To>(); }, dst, src);
  return dst;
}

/// Per-entity recurrent state: one hidden vector per GRU layer plus the
/// timestamp of the last event folded into it.
template <class Scalar>
struct EntityState {
  std::vector<VectorX<Scalar>> layers;
  std::optional<TimestampMs> last_event_ts;

  static EntityState fresh(const ModelConfig& cfg) {
    EntityState s;
    for (int w : cfg.gru_widths) s.layers.push_back(VectorX<Scalar>::Zero(w));
    return s;
  }

  bool operator==(const EntityState& o) const {
    if (last_event_ts != o.last_event_ts || layers.size() != o.layers.size()) return false;
    for (std::size_t i = 0; i < layers.size(); ++i) {
      if (layers[i].size() != o.layers[i].size() || layers[i] != o.layers[i]) return false;
    }
    return true;
  }
};

}  // namespace fraudseq
