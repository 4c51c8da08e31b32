#pragma once

#include <cmath>
#include <vector>

#include "fraudseq/gru.hpp"
#include "fraudseq/model.hpp"
#include "fraudseq/rng.hpp"
#include "fraudseq/sequence_store.hpp"

namespace fraudseq::testing {

/// 2 dense + 2 categorical features, embed_dim 3, GRU [5, 4], classifier [6].
inline ModelConfig tiny_config(Precision precision = Precision::kF64) {
  ModelConfig c;
  c.dense_dim = 2;
  c.cat_cardinalities = {4, 5};
  c.embed_dims = {3, 3};
  c.input_width = 6;
  c.gru_widths = {5, 4};
  c.classifier_widths = {6};
  c.precision = precision;
  return c;
}

inline SequenceRecord random_sequence(const ModelConfig& cfg, std::size_t length, Rng& rng,
                                      double scorable_p = 0.7) {
  SequenceRecord rec;
  rec.entity_id = "e" + std::to_string(rng.below(1000000));
  TimestampMs ts = 1600000000000;
  for (std::size_t t = 0; t < length; ++t) {
    SequenceEvent e;
    e.event_id = rec.entity_id + "#" + std::to_string(t);
    ts += static_cast<TimestampMs>(rng.below(100000));
    e.ts = ts;
    e.label = rng.bernoulli(0.3) ? Label::kFraud : Label::kLegit;
    e.scorable = rng.bernoulli(scorable_p);
    for (std::size_t d = 0; d < cfg.dense_dim; ++d) e.features.dense.push_back(rng.uniform(-2, 2));
    for (int card : cfg.cat_cardinalities) e.features.cat_indices.push_back(static_cast<int>(rng.below(card)));
    rec.has_fraud = rec.has_fraud || e.label == Label::kFraud;
    rec.events.push_back(std::move(e));
  }
  return rec;
}

/// Random parameters including biases, so every code path carries signal.
template <class Scalar>
ModelParams<Scalar> random_params(const ModelConfig& cfg, Rng& rng, double scale = 0.6) {
  auto p = ModelParams<Scalar>::zeros(cfg);
  visit_tensors(
      [&](const std::string&, auto& t) {
        for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(rng.uniform(-scale, scale));
      },
      p);
  return p;
}

/// Mean BCE over scorable events, computed without touching backward code.
template <class Scalar>
double sequence_loss(const ModelParams<Scalar>& p, const SequenceRecord& rec) {
  const auto fwd = forward_sequence(p, std::span<const SequenceEvent>(rec.events), EntityState<Scalar>::fresh(p.config));
  double sum = 0;
  int n = 0;
  for (std::size_t t = 0; t < rec.events.size(); ++t) {
    if (!rec.events[t].scorable) continue;
    const double y = rec.events[t].label == Label::kFraud ? 1.0 : 0.0;
    const double yh = static_cast<double>(fwd.scores[t]);
    sum += -(y * std::log(yh) + (1 - y) * std::log(1 - yh));
    ++n;
  }
  return sum / n;
}

struct GradCheckResult {
  double max_rel_error = 0;
  std::size_t checked = 0;
};

/// Central differences over every parameter entry. Relative error is
/// |analytic - numeric| / max(|analytic|, |numeric|, 1e-4); the floor keeps
/// entries whose true gradient is ~0 from dividing roundoff by roundoff.
inline GradCheckResult finite_difference_check(ModelParams<double> p, const SequenceRecord& rec,
                                               const ModelParams<double>& analytic, double eps = 1e-5) {
  GradCheckResult out;
  visit_tensors(
      [&](const std::string&, auto& t, const auto& g) {
        for (Eigen::Index i = 0; i < t.size(); ++i) {
          const double orig = t.data()[i];
          t.data()[i] = orig + eps;
          const double lp = sequence_loss(p, rec);
          t.data()[i] = orig - eps;
          const double lm = sequence_loss(p, rec);
          t.data()[i] = orig;
          const double numeric = (lp - lm) / (2 * eps);
          const double a = g.data()[i];
          const double denom = std::max({std::abs(a), std::abs(numeric), 1e-4});
          out.max_rel_error = std::max(out.max_rel_error, std::abs(a - numeric) / denom);
          ++out.checked;
        }
      },
      p, analytic);
  return out;
}

}  // namespace fraudseq::testing
