#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "fraudseq/schema.hpp"

namespace fraudseq {

struct ScoredEvent {
  double score = 0;
  int label = 0;  // 1 fraud, 0 legit
  double amount = 0;
  std::string entity_id;
  TimestampMs ts = 0;
};

struct RecallAtPrecision {
  double recall = 0;
  double threshold = 0;
  double precision = 0;
};

/// Best recall over thresholds whose precision reaches target. Thresholds are
/// the distinct scores; an event is flagged iff score >= threshold. Equal
/// recall keeps the higher threshold.
RecallAtPrecision recall_at_precision(std::span<const ScoredEvent> s, double target);

/// FP / (FP + TN).
double fp_rate(std::span<const ScoredEvent> s, double threshold);

struct MoneyRecall {
  double recall = 0;
  double caught = 0;
  double total = 0;
};
MoneyRecall money_recall(std::span<const ScoredEvent> s, double threshold);

/// Per UTC day, alert the alerts_per_day cards with the highest max score
/// (ties by entity id). Returns alerted fraud (day, card) pairs over all fraud
/// (day, card) pairs.
double card_recall_at_alert_budget(std::span<const ScoredEvent> s, int alerts_per_day);

/// Nearest-rank: the value at 1-based ordinal ceil(p * n / 100) of the sorted
/// sample. Empty input gives 0.
double nearest_rank(std::vector<double> values, double p);

}  // namespace fraudseq
