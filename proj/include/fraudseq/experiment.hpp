#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "fraudseq/baseline.hpp"
#include "fraudseq/batch_inference.hpp"
#include "fraudseq/metrics.hpp"
#include "fraudseq/model.hpp"
#include "fraudseq/pipeline.hpp"
#include "fraudseq/sequence_store.hpp"
#include "fraudseq/trainer.hpp"

namespace fraudseq {

/// Architecture choices; the shapes that depend on data come from the pipeline.
struct ArchConfig {
  int embed_dim = 0;  // 0: min(8, 1 + ceil(sqrt(cardinality))) per categorical
  int input_width = 32;
  std::vector<int> gru_widths{128, 64};
  std::vector<int> classifier_widths{64};
  Precision precision = Precision::kF32;

  nlohmann::json to_json() const;
  static ArchConfig from_json(const nlohmann::json& j);
};

ModelConfig model_config_for(const FittedPipeline& pipeline, const ArchConfig& arch);

/// Training covers [begin, train_end), validation [train_end, val_end), test
/// [val_end, end).
struct PeriodSplit {
  TimestampMs train_end = 0;
  TimestampMs val_end = 0;
};

/// Cuts the span between the first and last event by fractions of time.
PeriodSplit split_period(std::span<const RawEvent> events, double train_frac = 0.6, double val_frac = 0.2);
PeriodSplit split_period(const SequenceStore& store, double train_frac = 0.6, double val_frac = 0.2);

struct EventFacts {
  Label label = Label::kUnknown;
  double amount = 0;
};
using FactIndex = std::unordered_map<std::string, EventFacts>;

FactIndex facts_from_events(std::span<const RawEvent> events, std::string_view amount_field = "amount");
FactIndex facts_from_store(const SequenceStore& store);

/// Scores with a known label; unknown ids and labels are dropped.
std::vector<ScoredEvent> join_scores(std::span<const ScoreRecord> scores, const FactIndex& facts);

/// recall_at_precision, with 0 when no threshold reaches the target.
double recall_or_zero(std::span<const ScoredEvent> s, double target);

/// Validation metric: recall at target precision over events in
/// [train_end, val_end), each scored with all of its history before val_end.
template <class Scalar>
Validator<Scalar> make_validator(const SequenceStore& full, const PeriodSplit& split, double target,
                                 unsigned threads = 1);

struct TrainingSets {
  SequenceStore fraud;
  SequenceStore nonfraud;
};
/// Sequences cut at train_end, split by whether they hold fraud.
TrainingSets training_sets(const SequenceStore& full, const PeriodSplit& split);

struct HistoryComparison {
  double gru_recall = 0;
  double baseline_recall = 0;
  int best_epoch = -1;
  int epochs = 0;
  std::size_t events = 0;
  std::size_t fraud_events = 0;
};

/// Fits the pipeline on the training period, trains the GRU and the
/// memoryless baseline on the same feature vectors, and reports recall at
/// the target precision over the test period.
HistoryComparison compare_with_baseline(std::span<const RawEvent> events, const DatasetSchema& schema,
                                        const ArchConfig& arch, const TrainConfig& train_cfg,
                                        const LogisticConfig& baseline_cfg, const PeriodSplit& split);

}  // namespace fraudseq
