#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fraudseq/schema.hpp"
#include "fraudseq/transforms.hpp"

namespace fraudseq {

struct PipelineConfig {
  double clip = kDefaultClip;
  int min_occurrences = kDefaultMinOccurrences;
  int embedding_cap = kDefaultEmbeddingCap;
  double delta_impute_secs = kDefaultDeltaImputeSecs;

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;
};

/// All non-learnable transforms, fitted on the training period only.
///
/// Dense layout: z-scored numericals (schema order), the six cyclical features
/// of the event timestamp, one z-scored delta per auxiliary timestamp, then the
/// z-scored entity gap. Categorical layout: string categoricals (schema order)
/// followed by percentile-bucketed numericals.
class FittedPipeline {
 public:
  static constexpr int kFormatVersion = 1;

  FittedPipeline() = default;

  static FittedPipeline fit(std::span<const RawEvent> train, const DatasetSchema& schema,
                            const PipelineConfig& cfg = {});

  /// prev_ts is the timestamp of the entity's previous event, if any.
  FeatureVector apply(const RawEvent& e, std::optional<TimestampMs> prev_ts) const;

  const DatasetSchema& schema() const { return schema_; }
  std::uint64_t schema_hash() const { return schema_.hash(); }
  const PipelineConfig& config() const { return cfg_; }

  std::size_t dense_dim() const;
  /// Embedding table sizes in cat_indices order.
  std::vector<int> cat_cardinalities() const;

  nlohmann::json to_json() const;
  static FittedPipeline from_json(const nlohmann::json& j);
  void save(const std::string& path) const;
  static FittedPipeline load(const std::string& path);

  friend bool operator==(const FittedPipeline&, const FittedPipeline&) = default;

 private:
  DatasetSchema schema_;
  PipelineConfig cfg_;
  // parallel to schema_.numericals; only the slot matching the transform is used
  std::vector<std::optional<ZScoreTransform>> numeric_z_;
  std::vector<std::optional<PercentileBucketer>> numeric_p_;
  std::vector<CategoricalIndexer> categorical_;
  std::vector<ZScoreTransform> timestamp_delta_;
  ZScoreTransform entity_delta_;
};

}  // namespace fraudseq
