#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "fraudseq/schema.hpp"

namespace fraudseq {

struct CategorySpec {
  std::string name;
  int size = 0;
  friend bool operator==(const CategorySpec&, const CategorySpec&) = default;
};

/// Synthetic card-transaction stream. Legitimate cards keep stable habits
/// (one preferred value per categorical, an amount level, a daily rate);
/// fraud cards get one burst of rapid events. Camouflaged burst events draw
/// amount and channel from the card's own legitimate behaviour and use
/// ordinary but out-of-habit categories, so only history gives them away.
/// The rest use risky categories and inflated amounts.
struct GenConfig {
  int n_entities = 2000;
  double period_days = 60;
  TimestampMs start_ts = 1704067200000;  // 2024-01-01T00:00:00Z

  // per-card daily rate ~ lognormal with this mean
  double rate_mean_per_day = 1.5;
  double rate_log_sigma = 0.5;

  // per-card amount level ~ lognormal(amount_log_mean, amount_log_sigma);
  // each event ~ lognormal(level, amount_within_sigma)
  double amount_log_mean = 3.5;
  double amount_log_sigma = 0.8;
  double amount_within_sigma = 0.4;

  std::vector<CategorySpec> categories{{"mcc", 40}, {"country", 20}};
  /// The last risky_values of each vocabulary are rare for legitimate cards.
  int risky_values = 3;
  double habit_stickiness = 0.9;
  double risky_legit_prob = 0.01;

  // short legitimate follow-ups, so a small gap alone is not fraud
  double session_prob = 0.05;
  double session_gap_min_secs = 5;
  double session_gap_max_secs = 120;

  /// Explicit fraction of fraud cards; unset derives it from fraud_ratio.
  std::optional<double> fraud_card_fraction;
  double fraud_ratio = 1.0 / 200.0;  // fraud : legit events
  int burst_len = 10;
  double burst_gap_secs = 10;
  double burst_amount_multiplier = 3.0;
  double camouflage_fraction = 0.8;

  double nonscorable_fraction = 0.1;
  std::uint64_t seed = 1;

  void check() const;
  nlohmann::json to_json() const;
  static GenConfig from_json(const nlohmann::json& j);
};

/// Schema of the generated events.
DatasetSchema synth_schema(const GenConfig& cfg);

/// Globally time-ordered events, ties broken by entity id. Same config, same
/// output.
std::vector<RawEvent> generate(const GenConfig& cfg);

struct GenStats {
  std::size_t events = 0;
  std::size_t fraud_events = 0;
  std::size_t legit_events = 0;
  std::size_t fraud_cards = 0;
  std::size_t nonscorable = 0;
};
GenStats summarize(const std::vector<RawEvent>& events);

}  // namespace fraudseq
