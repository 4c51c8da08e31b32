#include "fraudseq/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

#include "fraudseq/error.hpp"

namespace fraudseq {

nlohmann::json ArchConfig::to_json() const {
  return {{"embed_dim", embed_dim},
          {"input_width", input_width},
          {"gru_widths", gru_widths},
          {"classifier_widths", classifier_widths},
          {"precision", precision == Precision::kF32 ? "f32" : "f64"}};
}

ArchConfig ArchConfig::from_json(const nlohmann::json& j) {
  ArchConfig a;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "embed_dim") a.embed_dim = v.get<int>();
      else if (key == "input_width") a.input_width = v.get<int>();
      else if (key == "gru_widths") a.gru_widths = v.get<std::vector<int>>();
      else if (key == "classifier_widths") a.classifier_widths = v.get<std::vector<int>>();
      else if (key == "precision") {
        const auto s = v.get<std::string>();
        if (s != "f32" && s != "f64") fail(ErrorCode::kInvalidConfig, "precision must be f32 or f64");
        a.precision = s == "f32" ? Precision::kF32 : Precision::kF64;
      } else {
        fail(ErrorCode::kInvalidConfig, "unknown architecture key: " + key);
      }
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidConfig, e.what());
  }
  return a;
}

ModelConfig model_config_for(const FittedPipeline& pipeline, const ArchConfig& arch) {
  ModelConfig c;
  c.dense_dim = pipeline.dense_dim();
  c.cat_cardinalities = pipeline.cat_cardinalities();
  for (int card : c.cat_cardinalities) {
    c.embed_dims.push_back(arch.embed_dim > 0 ? arch.embed_dim
                                              : std::min(8, 1 + static_cast<int>(std::ceil(std::sqrt(card)))));
  }
  c.input_width = arch.input_width;
  c.gru_widths = arch.gru_widths;
  c.classifier_widths = arch.classifier_widths;
  c.precision = arch.precision;
  c.schema_hash = pipeline.schema_hash();
  c.check();
  return c;
}

namespace {

PeriodSplit split_range(TimestampMs lo, TimestampMs hi, double train_frac, double val_frac) {
  if (!(train_frac > 0 && val_frac >= 0 && train_frac + val_frac < 1)) fail(ErrorCode::kInvalidConfig, "bad split fractions");
  const auto span = static_cast<double>(hi - lo);
  return {lo + static_cast<TimestampMs>(span * train_frac), lo + static_cast<TimestampMs>(span * (train_frac + val_frac))};
}

}  // namespace

PeriodSplit split_period(std::span<const RawEvent> events, double train_frac, double val_frac) {
  if (events.empty()) fail(ErrorCode::kInvalidConfig, "no events to split");
  TimestampMs lo = std::numeric_limits<TimestampMs>::max(), hi = std::numeric_limits<TimestampMs>::min();
  for (const auto& e : events) {
    lo = std::min(lo, e.ts());
    hi = std::max(hi, e.ts());
  }
  return split_range(lo, hi, train_frac, val_frac);
}

PeriodSplit split_period(const SequenceStore& store, double train_frac, double val_frac) {
  if (store.total_events() == 0) fail(ErrorCode::kInvalidConfig, "no events to split");
  TimestampMs lo = std::numeric_limits<TimestampMs>::max(), hi = std::numeric_limits<TimestampMs>::min();
  for (const auto& r : store) {
    if (r.events.empty()) continue;
    lo = std::min(lo, r.events.front().ts);
    hi = std::max(hi, r.events.back().ts);
  }
  return split_range(lo, hi, train_frac, val_frac);
}

FactIndex facts_from_events(std::span<const RawEvent> events, std::string_view amount_field) {
  FactIndex out;
  out.reserve(events.size());
  for (const auto& e : events) {
    EventFacts f{e.label, 0};
    for (const auto& [name, v] : e.numericals) {
      if (name == amount_field && v) f.amount = *v;
    }
    out[e.event_id] = f;
  }
  return out;
}

FactIndex facts_from_store(const SequenceStore& store) {
  FactIndex out;
  for (const auto& r : store) {
    for (const auto& e : r.events) out[e.event_id] = {e.label, 0};
  }
  return out;
}

std::vector<ScoredEvent> join_scores(std::span<const ScoreRecord> scores, const FactIndex& facts) {
  std::vector<ScoredEvent> out;
  out.reserve(scores.size());
  for (const auto& s : scores) {
    const auto it = facts.find(s.event_id);
    if (it == facts.end() || it->second.label == Label::kUnknown) continue;
    out.push_back({s.score, it->second.label == Label::kFraud ? 1 : 0, it->second.amount, s.entity_id, s.ts});
  }
  return out;
}

double recall_or_zero(std::span<const ScoredEvent> s, double target) {
  try {
    return recall_at_precision(s, target).recall;
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kUnachievablePrecision) throw;
    return 0.0;
  }
}

template <class Scalar>
Validator<Scalar> make_validator(const SequenceStore& full, const PeriodSplit& split, double target, unsigned threads) {
  struct Ctx {
    SequenceStore store;
    BatchPlan plan;
    FactIndex facts;
    ScoreWindow window;
  };
  auto ctx = std::make_shared<Ctx>();
  ctx->store = sort_by_length_desc(truncate_at(full, split.val_end));
  ctx->plan = plan_batches(ctx->store);
  ctx->facts = facts_from_store(ctx->store);
  ctx->window = {split.train_end, split.val_end};
  return [ctx, target, threads](const ModelParams<Scalar>& p, int) {
    const auto scores = score_all(ctx->plan, ctx->store, p, ctx->window, threads);
    return recall_or_zero(join_scores(scores, ctx->facts), target);
  };
}

TrainingSets training_sets(const SequenceStore& full, const PeriodSplit& split) {
  auto [fraud, nonfraud] = split_fraud(truncate_at(full, split.train_end));
  return {std::move(fraud), std::move(nonfraud)};
}

namespace {

template <class Scalar>
std::pair<double, TrainResult<Scalar>> train_and_test(const FittedPipeline& pipeline, const SequenceStore& full,
                                                      const ArchConfig& arch, const TrainConfig& cfg,
                                                      const PeriodSplit& split, const FactIndex& facts) {
  const auto sets = training_sets(full, split);
  auto st = initial_train_state(init_params<Scalar>(model_config_for(pipeline, arch), cfg.seed), cfg);
  auto result = train<Scalar>(st, sets.fraud, sets.nonfraud, cfg, make_validator<Scalar>(full, split, cfg.target_precision));
  const auto sorted = sort_by_length_desc(full);
  const auto scores = score_all(plan_batches(sorted), sorted, result.best, {split.val_end});
  return {recall_or_zero(join_scores(scores, facts), cfg.target_precision), std::move(result)};
}

}  // namespace

HistoryComparison compare_with_baseline(std::span<const RawEvent> events, const DatasetSchema& schema,
                                        const ArchConfig& arch, const TrainConfig& train_cfg,
                                        const LogisticConfig& baseline_cfg, const PeriodSplit& split) {
  std::vector<RawEvent> train_events;
  for (const auto& e : events) {
    if (e.ts() < split.train_end) train_events.push_back(e);
  }
  const auto pipeline = FittedPipeline::fit(train_events, schema);
  const auto full = build_sequences(events, pipeline);
  const auto facts = facts_from_events(events);

  HistoryComparison out;
  out.events = events.size();
  for (const auto& e : events) out.fraud_events += e.label == Label::kFraud;

  if (arch.precision == Precision::kF32) {
    auto [recall, res] = train_and_test<float>(pipeline, full, arch, train_cfg, split, facts);
    out.gru_recall = recall;
    out.best_epoch = res.best_epoch;
    out.epochs = static_cast<int>(res.history.size());
  } else {
    auto [recall, res] = train_and_test<double>(pipeline, full, arch, train_cfg, split, facts);
    out.gru_recall = recall;
    out.best_epoch = res.best_epoch;
    out.epochs = static_cast<int>(res.history.size());
  }

  const auto train_store = truncate_at(full, split.train_end);
  const auto val_store = truncate_at(full, split.val_end);
  const ScoreWindow val_window{split.train_end, split.val_end};
  const double target = train_cfg.target_precision;
  const auto baseline = train_logistic(train_store, pipeline.dense_dim(), pipeline.cat_cardinalities(), baseline_cfg,
                                       [&](const LogisticModel& m) {
                                         return recall_or_zero(join_scores(score_logistic(m, val_store, val_window), facts), target);
                                       });
  out.baseline_recall = recall_or_zero(join_scores(score_logistic(baseline, full, {split.val_end}), facts), target);
  return out;
}

template Validator<float> make_validator<float>(const SequenceStore&, const PeriodSplit&, double, unsigned);
template Validator<double> make_validator<double>(const SequenceStore&, const PeriodSplit&, double, unsigned);

}  // namespace fraudseq
