#include "fraudseq/pipeline.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <numeric>

#include "fraudseq/error.hpp"

namespace fraudseq {

namespace {

using nlohmann::json;

json zscore_json(const ZScoreTransform& t) {
  return {{"mean", t.mean}, {"std", t.std}, {"clip", t.clip}};
}

ZScoreTransform zscore_from(const json& j) {
  return {j.at("mean").get<double>(), j.at("std").get<double>(), j.at("clip").get<double>()};
}

}  // namespace

FittedPipeline FittedPipeline::fit(std::span<const RawEvent> train, const DatasetSchema& schema,
                                   const PipelineConfig& cfg) {
  schema.check();
  FittedPipeline p;
  p.schema_ = schema;
  p.cfg_ = cfg;

  for (std::size_t i = 0; i < schema.numericals.size(); ++i) {
    std::vector<std::optional<double>> column;
    column.reserve(train.size());
    for (const auto& e : train) column.push_back(e.numericals.at(i).second);
    if (schema.numericals[i].transform == NumericTransform::kZScore) {
      p.numeric_z_.emplace_back(fit_zscore(std::span<const std::optional<double>>(column), cfg.clip));
      p.numeric_p_.emplace_back(std::nullopt);
    } else {
      p.numeric_z_.emplace_back(std::nullopt);
      p.numeric_p_.emplace_back(fit_percentile(std::span<const std::optional<double>>(column)));
    }
  }

  for (std::size_t i = 0; i < schema.categoricals.size(); ++i) {
    std::vector<std::optional<std::string>> column;
    column.reserve(train.size());
    for (const auto& e : train) column.push_back(e.categoricals.at(i).second);
    p.categorical_.push_back(fit_categorical(column, cfg.min_occurrences, cfg.embedding_cap));
  }

  for (std::size_t i = 0; i < schema.timestamps.size(); ++i) {
    std::vector<std::optional<double>> column;
    column.reserve(train.size());
    for (const auto& e : train) column.push_back(timestamp_deltas(e).at(i));
    p.timestamp_delta_.push_back(fit_zscore(std::span<const std::optional<double>>(column), cfg.clip));
  }

  // entity gaps need per-entity chronological order; ties keep input order
  std::map<std::string, std::vector<TimestampMs>> by_entity;
  std::vector<std::size_t> order(train.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return train[a].ts() < train[b].ts(); });
  for (std::size_t i : order) by_entity[train[i].entity_id].push_back(train[i].ts());
  std::vector<double> gaps;
  for (const auto& [_, ts] : by_entity) {
    const auto d = entity_delta_t(ts, cfg.delta_impute_secs);
    gaps.insert(gaps.end(), d.begin(), d.end());
  }
  p.entity_delta_ = fit_zscore(std::span<const double>(gaps), cfg.clip);
  return p;
}

std::size_t FittedPipeline::dense_dim() const {
  std::size_t n = 0;
  for (const auto& z : numeric_z_) n += z ? 1 : 0;
  return n + 6 + timestamp_delta_.size() + 1;
}

std::vector<int> FittedPipeline::cat_cardinalities() const {
  std::vector<int> out;
  for (const auto& c : categorical_) out.push_back(c.cardinality());
  for (const auto& b : numeric_p_) {
    if (b) out.push_back(PercentileBucketer::kCardinality);
  }
  return out;
}

FeatureVector FittedPipeline::apply(const RawEvent& e, std::optional<TimestampMs> prev_ts) const {
  if (e.numericals.size() != schema_.numericals.size() ||
      e.categoricals.size() != schema_.categoricals.size() ||
      e.timestamps.size() != schema_.timestamps.size()) {
    fail(ErrorCode::kSchemaMismatch, "event is not aligned to the pipeline schema");
  }
  FeatureVector fv;
  fv.dense.reserve(dense_dim());
  for (std::size_t i = 0; i < numeric_z_.size(); ++i) {
    if (numeric_z_[i]) fv.dense.push_back(apply_zscore(e.numericals[i].second, *numeric_z_[i]));
  }
  const auto cyc = time_cyclical(e.ts());
  fv.dense.insert(fv.dense.end(), cyc.begin(), cyc.end());
  const auto deltas = timestamp_deltas(e);
  for (std::size_t i = 0; i < timestamp_delta_.size(); ++i) {
    fv.dense.push_back(apply_zscore(deltas[i], timestamp_delta_[i]));
  }
  double gap = cfg_.delta_impute_secs;
  if (prev_ts) {
    if (e.ts() < *prev_ts) fail(ErrorCode::kUnsortedSequence, "event '" + e.event_id + "' precedes its entity's last event");
    gap = static_cast<double>(e.ts() - *prev_ts) / 1000.0;
  }
  fv.dense.push_back(apply_zscore(gap, entity_delta_));

  fv.cat_indices.reserve(categorical_.size() + numeric_p_.size());
  for (std::size_t i = 0; i < categorical_.size(); ++i) {
    fv.cat_indices.push_back(categorical_[i].index(e.categoricals[i].second));
  }
  for (std::size_t i = 0; i < numeric_p_.size(); ++i) {
    if (numeric_p_[i]) fv.cat_indices.push_back(apply_percentile(e.numericals[i].second, *numeric_p_[i]));
  }
  return fv;
}

nlohmann::json FittedPipeline::to_json() const {
  json numericals = json::array();
  for (std::size_t i = 0; i < schema_.numericals.size(); ++i) {
    json f = {{"name", schema_.numericals[i].name}};
    if (numeric_z_[i]) {
      f["kind"] = "zscore";
      f["params"] = zscore_json(*numeric_z_[i]);
    } else {
      f["kind"] = "percentile";
      f["boundaries"] = numeric_p_[i]->boundaries;
    }
    numericals.push_back(std::move(f));
  }
  json categoricals = json::array();
  for (std::size_t i = 0; i < categorical_.size(); ++i) {
    categoricals.push_back({{"name", schema_.categoricals[i]}, {"values", categorical_[i].values()}});
  }
  json timestamps = json::array();
  for (std::size_t i = 0; i < timestamp_delta_.size(); ++i) {
    timestamps.push_back({{"name", schema_.timestamps[i]}, {"params", zscore_json(timestamp_delta_[i])}});
  }
  return {{"format", "fraudseq-pipeline"},
          {"version", kFormatVersion},
          {"schema", schema_to_json(schema_)},
          {"config",
           {{"clip", cfg_.clip},
            {"min_occurrences", cfg_.min_occurrences},
            {"embedding_cap", cfg_.embedding_cap},
            {"delta_impute_secs", cfg_.delta_impute_secs}}},
          {"numericals", numericals},
          {"categoricals", categoricals},
          {"timestamps", timestamps},
          {"entity_delta", zscore_json(entity_delta_)}};
}

FittedPipeline FittedPipeline::from_json(const nlohmann::json& j) {
  FittedPipeline p;
  try {
    if (j.at("format") != "fraudseq-pipeline") fail(ErrorCode::kInvalidConfig, "not a pipeline document");
    if (j.at("version").get<int>() != kFormatVersion) fail(ErrorCode::kInvalidConfig, "unsupported pipeline version");
    p.schema_ = schema_from_json(j.at("schema"));
    const auto& c = j.at("config");
    p.cfg_.clip = c.at("clip").get<double>();
    p.cfg_.min_occurrences = c.at("min_occurrences").get<int>();
    p.cfg_.embedding_cap = c.at("embedding_cap").get<int>();
    p.cfg_.delta_impute_secs = c.at("delta_impute_secs").get<double>();
    for (const auto& f : j.at("numericals")) {
      if (f.at("kind") == "zscore") {
        p.numeric_z_.emplace_back(zscore_from(f.at("params")));
        p.numeric_p_.emplace_back(std::nullopt);
      } else {
        p.numeric_z_.emplace_back(std::nullopt);
        p.numeric_p_.emplace_back(PercentileBucketer{f.at("boundaries").get<std::vector<double>>()});
      }
    }
    for (const auto& f : j.at("categoricals")) {
      p.categorical_.emplace_back(f.at("values").get<std::vector<std::string>>());
    }
    for (const auto& f : j.at("timestamps")) p.timestamp_delta_.push_back(zscore_from(f.at("params")));
    p.entity_delta_ = zscore_from(j.at("entity_delta"));
  } catch (const json::exception& ex) {
    fail(ErrorCode::kInvalidConfig, std::string("pipeline document: ") + ex.what());
  }
  if (p.numeric_z_.size() != p.schema_.numericals.size() ||
      p.categorical_.size() != p.schema_.categoricals.size() ||
      p.timestamp_delta_.size() != p.schema_.timestamps.size()) {
    fail(ErrorCode::kInvalidConfig, "pipeline document does not match its schema");
  }
  return p;
}

void FittedPipeline::save(const std::string& path) const {
  std::ofstream out(path);
  if (!out) fail(ErrorCode::kIo, "cannot write pipeline " + path);
  out << to_json().dump(2) << '\n';
}

FittedPipeline FittedPipeline::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open pipeline " + path);
  try {
    return from_json(json::parse(in));
  } catch (const json::parse_error& ex) {
    fail(ErrorCode::kInvalidConfig, std::string("pipeline document: ") + ex.what());
  }
}

}  // namespace fraudseq
