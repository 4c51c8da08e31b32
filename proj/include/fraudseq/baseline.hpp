#pragma once

#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "fraudseq/batch_inference.hpp"
#include "fraudseq/sequence_store.hpp"

namespace fraudseq {

/// Memoryless logistic regression over one FeatureVector: a weight per dense
/// slot plus a learned weight per category value of every categorical.
struct LogisticModel {
  Eigen::VectorXd w;
  std::vector<Eigen::VectorXd> tables;
  double b = 0;

  static LogisticModel zeros(std::size_t dense_dim, const std::vector<int>& cardinalities);
  double logit(const FeatureVector& fv) const;
  double score(const FeatureVector& fv) const;
};

struct LogisticConfig {
  int epochs = 10;
  std::size_t batch_events = 256;
  double lr = 0.01;
  std::uint64_t seed = 1;
};

/// Adam on mean BCE over the scorable events of the store, one pass per epoch
/// in shuffled order. With a validator, the best epoch by its metric is
/// returned; otherwise the last.
LogisticModel train_logistic(const SequenceStore& train, std::size_t dense_dim, const std::vector<int>& cardinalities,
                             const LogisticConfig& cfg,
                             const std::function<double(const LogisticModel&)>& validate = {});

std::vector<ScoreRecord> score_logistic(const LogisticModel& m, const SequenceStore& store, ScoreWindow window = {});

}  // namespace fraudseq
