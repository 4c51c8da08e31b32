#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fraudseq/gru.hpp"
#include "fraudseq/model.hpp"
#include "fraudseq/rng.hpp"
#include "fraudseq/sequence_store.hpp"

namespace fraudseq {

struct TrainConfig {
  int batch_cards = 64;
  double fraud_fraction = 0.05;
  int cutoff = 200;
  double lr = 1e-3;
  int patience_stop = 20;
  int patience_lr = 10;
  double lr_decay = 10.0;
  double epoch_nonfraud_fraction = 0.10;
  int max_epochs = 200;
  double target_precision = 0.15;  // validation metric: recall at this precision
  std::size_t queue_capacity = 8;
  std::uint64_t seed = 1;
  std::string checkpoint_path;  // empty: no checkpoints
  std::string metrics_log;      // empty: no log file

  void check() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

/// A card picked for an epoch: which store, which ordinal.
struct CardRef {
  bool fraud = false;
  std::uint32_t index = 0;

  friend bool operator==(const CardRef&, const CardRef&) = default;
};

/// All fraud cards plus floor(epoch_nonfraud_fraction * |nonfraud|) non-fraud
/// cards drawn with replacement, shuffled.
std::vector<CardRef> sample_epoch(const SequenceStore& fraud, const SequenceStore& nonfraud, const TrainConfig& cfg,
                                  Rng& rng);

/// The most recent `length` events of one card.
struct BatchItem {
  const SequenceRecord* record = nullptr;
  std::size_t begin = 0;
  std::size_t length = 0;
  bool fraud = false;

  std::span<const SequenceEvent> events() const { return {record->events.data() + begin, length}; }
};

BatchItem truncate_to_cutoff(const SequenceRecord& rec, int cutoff, bool fraud);

/// Cards padded at the end to the longest member. Padded steps are never run.
struct Batch {
  std::vector<BatchItem> items;
  std::size_t padded_length = 0;

  std::size_t fraud_cards() const;
  std::size_t scorable_events() const;
  /// [card][step] masks over the padded layout.
  std::vector<std::vector<std::uint8_t>> padding_mask() const;
  std::vector<std::vector<std::uint8_t>> scorable_mask() const;
  std::vector<std::vector<double>> labels() const;
};

/// Cuts an epoch card list into batches holding ceil(fraud_fraction *
/// batch_cards) fraud cards and non-fraud cards for the rest. The epoch ends
/// when its non-fraud cards run out; fraud cards are redrawn with replacement
/// once the epoch's own are used up.
class EpochBatcher {
 public:
  EpochBatcher(const SequenceStore& fraud, const SequenceStore& nonfraud, std::vector<CardRef> epoch,
               const TrainConfig& cfg, Rng& rng);

  std::optional<Batch> next();
  std::size_t fraud_per_batch() const { return fraud_per_batch_; }

 private:
  const SequenceStore& fraud_;
  const SequenceStore& nonfraud_;
  std::vector<std::uint32_t> fraud_ids_, nonfraud_ids_;
  std::size_t fraud_pos_ = 0, nonfraud_pos_ = 0;
  std::size_t fraud_per_batch_ = 0;
  int batch_cards_;
  int cutoff_;
  Rng& rng_;
};

/// Mean BCE over masked-in steps, with y_hat clamped to [1e-7, 1 - 1e-7].
double masked_bce(std::span<const double> y_hat, std::span<const double> y, std::span<const std::uint8_t> mask);

template <class Scalar>
struct AdamState {
  ModelParams<Scalar> m, v;
  std::int64_t step = 0;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;

  static AdamState zeros(const ModelConfig& cfg) {
    return {ModelParams<Scalar>::zeros(cfg), ModelParams<Scalar>::zeros(cfg)};
  }
};

/// Bias-corrected Adam. Throws NonFiniteGradient, leaving p and st untouched,
/// if any gradient entry is NaN or infinite.
template <class Scalar>
void adam_step(ModelParams<Scalar>& p, const ModelParams<Scalar>& grads, AdamState<Scalar>& st, double lr);

template <class Scalar>
struct BatchGradient {
  ModelParams<Scalar> grads;
  double loss = 0;
  std::size_t scorable = 0;
};

/// Gradient of the batch mean BCE. Sequences are reduced in batch order.
template <class Scalar>
BatchGradient<Scalar> batch_gradient(const ModelParams<Scalar>& p, const Batch& batch);

/// Early stopping and step-wise LR decay on a validation metric (higher is
/// better). Improvement means strictly above the best so far.
class PlateauSchedule {
 public:
  struct Step {
    bool improved = false;
    bool decayed = false;
    bool stop = false;
    double lr = 0;
  };

  PlateauSchedule(double lr, int patience_lr, int patience_stop, double decay);
  Step observe(double metric);

  double lr() const { return lr_; }
  int since_improvement() const { return since_improve_; }
  std::optional<double> best() const { return best_; }

  nlohmann::json to_json() const;
  static PlateauSchedule from_json(const nlohmann::json& j);

 private:
  double lr_;
  int patience_lr_, patience_stop_;
  double decay_;
  std::optional<double> best_;
  int since_improve_ = 0;
  int since_decay_ = 0;
};

struct EpochMetrics {
  int epoch = 0;
  double loss = 0;
  double val_metric = 0;
  double lr = 0;
  std::size_t batches = 0;
  bool improved = false;
  bool decayed = false;

  friend bool operator==(const EpochMetrics&, const EpochMetrics&) = default;
};

template <class Scalar>
struct TrainState {
  ModelParams<Scalar> params;
  AdamState<Scalar> adam;
  PlateauSchedule schedule{1e-3, 10, 20, 10};
  Rng rng;
  int next_epoch = 0;
  bool finished = false;
  ModelParams<Scalar> best;
  int best_epoch = -1;
  std::vector<EpochMetrics> history;
};

/// Model file at path (current parameters), everything else in path + ".opt".
template <class Scalar>
void save_checkpoint(const TrainState<Scalar>& st, const std::string& path);
template <class Scalar>
TrainState<Scalar> load_checkpoint(const std::string& path);

template <class Scalar>
using Validator = std::function<double(const ModelParams<Scalar>&, int epoch)>;

struct TrainHooks {
  std::function<void(const Batch&)> on_batch;  // sees every batch used for an update
  std::function<void(const EpochMetrics&)> on_epoch;
  int stop_after_epochs = -1;  // for tests of resume: return early after this many epochs
};

template <class Scalar>
struct TrainResult {
  ModelParams<Scalar> best;
  int best_epoch = -1;
  std::vector<EpochMetrics> history;
  bool early_stopped = false;
};

template <class Scalar>
TrainState<Scalar> initial_train_state(ModelParams<Scalar> init, const TrainConfig& cfg);

/// Runs epochs until the schedule stops or max_epochs is reached. A producer
/// thread builds batches into a bounded queue; this thread does every update.
template <class Scalar>
TrainResult<Scalar> train(TrainState<Scalar>& st, const SequenceStore& fraud, const SequenceStore& nonfraud,
                          const TrainConfig& cfg, const Validator<Scalar>& validate, const TrainHooks& hooks = {});

}  // namespace fraudseq
