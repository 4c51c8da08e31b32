#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "fraudseq/schema.hpp"

namespace fraudseq {

inline constexpr double kDefaultClip = 3.0;
inline constexpr double kDefaultDeltaImputeSecs = 30.0 * 86400.0;
inline constexpr int kDefaultMinOccurrences = 5;
inline constexpr int kDefaultEmbeddingCap = 10000;

struct ZScoreTransform {
  double mean = 0.0;
  double std = 1.0;
  double clip = kDefaultClip;

  friend bool operator==(const ZScoreTransform&, const ZScoreTransform&) = default;
};

/// Sample mean and population standard deviation of the non-missing values.
ZScoreTransform fit_zscore(std::span<const std::optional<double>> values, double clip = kDefaultClip);
ZScoreTransform fit_zscore(std::span<const double> values, double clip = kDefaultClip);

/// Missing or non-finite input maps to 0.0, the transformed mean.
double apply_zscore(std::optional<double> x, const ZScoreTransform& t);

struct PercentileBucketer {
  static constexpr int kMissingBucket = 100;
  static constexpr int kCardinality = 101;

  std::vector<double> boundaries;  // P^1..P^99, non-decreasing

  friend bool operator==(const PercentileBucketer&, const PercentileBucketer&) = default;
};

/// Nearest-rank percentiles: P^k is the value at 1-based ordinal ceil(k*n/100).
PercentileBucketer fit_percentile(std::span<const std::optional<double>> values);
PercentileBucketer fit_percentile(std::span<const double> values);

/// Bucket 0 below P^1, k in [P^k, P^{k+1}), 99 at or above P^99, 100 when
/// missing or non-finite.
int apply_percentile(std::optional<double> x, const PercentileBucketer& b);

/// Frequency-descending index: the most frequent kept value maps to 0.
/// Rare values and values ranked past the cap share overflow_index();
/// missing gets its own slot right after it.
class CategoricalIndexer {
 public:
  CategoricalIndexer() = default;
  explicit CategoricalIndexer(std::vector<std::string> kept_by_rank);

  int index(const std::optional<std::string>& value) const;
  int overflow_index() const { return static_cast<int>(kept_.size()); }
  int missing_index() const { return overflow_index() + 1; }
  int cardinality() const { return overflow_index() + 2; }

  /// Kept values in rank order (index i holds the value mapped to i).
  const std::vector<std::string>& values() const { return kept_; }

  friend bool operator==(const CategoricalIndexer& a, const CategoricalIndexer& b) {
    return a.kept_ == b.kept_;
  }

 private:
  std::vector<std::string> kept_;
  std::unordered_map<std::string, int> lookup_;
};

/// Missing training values count as their own value and are not ranked.
CategoricalIndexer fit_categorical(std::span<const std::optional<std::string>> values,
                                   int min_occurrences = kDefaultMinOccurrences,
                                   int cap = kDefaultEmbeddingCap);

/// (sin h, cos h, sin dw, cos dw, sin dm, cos dm) in UTC, Monday = weekday 0,
/// day-of-month projected as (day - 1) * 2pi / 30.
std::array<double, 6> time_cyclical(TimestampMs ts);

/// event_ts - aux_ts in days for every auxiliary timestamp, schema order.
std::vector<std::optional<double>> timestamp_deltas(const RawEvent& e);

/// Per-event gap to the previous event of the same entity, in seconds. The
/// first element takes impute_secs. Throws kUnsortedSequence on a negative gap.
std::vector<double> entity_delta_t(std::span<const TimestampMs> ts,
                                   double impute_secs = kDefaultDeltaImputeSecs);

/// Input to the learnable part of the model: dense slots first, then indices
/// into one embedding table per categorical (string categoricals followed by
/// percentile-bucketed numericals).
struct FeatureVector {
  std::vector<double> dense;
  std::vector<std::int32_t> cat_indices;

  friend bool operator==(const FeatureVector&, const FeatureVector&) = default;
};

}  // namespace fraudseq
