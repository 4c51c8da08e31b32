#include "fraudseq/baseline.hpp"

#include <cmath>

#include "fraudseq/rng.hpp"

namespace fraudseq {

LogisticModel LogisticModel::zeros(std::size_t dense_dim, const std::vector<int>& cardinalities) {
  LogisticModel m;
  m.w = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(dense_dim));
  for (int c : cardinalities) m.tables.push_back(Eigen::VectorXd::Zero(c));
  return m;
}

double LogisticModel::logit(const FeatureVector& fv) const {
  if (fv.dense.size() != static_cast<std::size_t>(w.size()) || fv.cat_indices.size() != tables.size()) {
    fail(ErrorCode::kShapeMismatch, "feature vector does not match the logistic model");
  }
  double z = b;
  for (std::size_t i = 0; i < fv.dense.size(); ++i) z += w(static_cast<Eigen::Index>(i)) * fv.dense[i];
  for (std::size_t i = 0; i < tables.size(); ++i) {
    const auto idx = fv.cat_indices[i];
    if (idx < 0 || idx >= tables[i].size()) fail(ErrorCode::kIndexOutOfRange, "categorical index");
    z += tables[i](idx);
  }
  return z;
}

double LogisticModel::score(const FeatureVector& fv) const { return 1.0 / (1.0 + std::exp(-logit(fv))); }

namespace {

struct Adam {
  Eigen::VectorXd m, v;
  void init(Eigen::Index n) { m = v = Eigen::VectorXd::Zero(n); }
};

}  // namespace

LogisticModel train_logistic(const SequenceStore& train, std::size_t dense_dim, const std::vector<int>& cardinalities,
                             const LogisticConfig& cfg,
                             const std::function<double(const LogisticModel&)>& validate) {
  if (cfg.epochs < 1 || cfg.batch_events < 1 || !(cfg.lr > 0)) fail(ErrorCode::kInvalidConfig, "logistic config");
  std::vector<const SequenceEvent*> events;
  for (const auto& rec : train) {
    for (const auto& e : rec.events) {
      if (e.scorable && e.label != Label::kUnknown) events.push_back(&e);
    }
  }
  if (events.empty()) fail(ErrorCode::kEmptyScorableSet, "no scorable training event");

  auto m = LogisticModel::zeros(dense_dim, cardinalities);
  auto best = m;
  double best_metric = -1;
  // flat parameter vector: [w, tables..., b]
  Eigen::Index n = m.w.size() + 1;
  for (const auto& t : m.tables) n += t.size();
  Adam adam;
  adam.init(n);
  Eigen::VectorXd grad(n);
  std::int64_t step = 0;
  Rng rng(cfg.seed);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    rng.shuffle(events.begin(), events.end());
    for (std::size_t start = 0; start < events.size(); start += cfg.batch_events) {
      const std::size_t end = std::min(events.size(), start + cfg.batch_events);
      grad.setZero();
      const double scale = 1.0 / static_cast<double>(end - start);
      for (std::size_t k = start; k < end; ++k) {
        const auto& e = *events[k];
        const double y = e.label == Label::kFraud ? 1.0 : 0.0;
        const double d = (m.score(e.features) - y) * scale;
        Eigen::Index at = 0;
        for (std::size_t i = 0; i < e.features.dense.size(); ++i) grad(at++) += d * e.features.dense[i];
        for (std::size_t i = 0; i < m.tables.size(); ++i) {
          grad(at + e.features.cat_indices[i]) += d;
          at += m.tables[i].size();
        }
        grad(at) += d;
      }
      ++step;
      adam.m = b1 * adam.m + (1 - b1) * grad;
      adam.v = b2 * adam.v + (1 - b2) * grad.cwiseAbs2();
      const double c1 = 1 - std::pow(b1, static_cast<double>(step));
      const double c2 = 1 - std::pow(b2, static_cast<double>(step));
      const Eigen::VectorXd delta =
          (cfg.lr * (adam.m.array() / c1) / ((adam.v.array() / c2).sqrt() + eps)).matrix();
      Eigen::Index at = 0;
      m.w -= delta.segment(at, m.w.size());
      at += m.w.size();
      for (auto& t : m.tables) {
        t -= delta.segment(at, t.size());
        at += t.size();
      }
      m.b -= delta(at);
    }
    if (validate) {
      const double metric = validate(m);
      if (metric > best_metric) {
        best_metric = metric;
        best = m;
      }
    }
  }
  return validate ? best : m;
}

std::vector<ScoreRecord> score_logistic(const LogisticModel& m, const SequenceStore& store, ScoreWindow window) {
  std::vector<ScoreRecord> out;
  for (const auto& rec : store) {
    for (const auto& e : rec.events) {
      if (e.scorable && window.contains(e.ts)) out.push_back({e.event_id, rec.entity_id, e.ts, m.score(e.features)});
    }
  }
  return out;
}

}  // namespace fraudseq
