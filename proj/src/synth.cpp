#include "fraudseq/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "fraudseq/error.hpp"
#include "fraudseq/rng.hpp"

namespace fraudseq {

namespace {

constexpr double kDayMs = 86400000.0;

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

std::string category_value(const CategorySpec& c, int v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "_%02d", v);
  return c.name + buf;
}

struct Card {
  std::string id;
  double rate_per_ms = 0;
  double amount_level = 0;
  double pos_share = 0.5;
  std::vector<int> habit;
  TimestampMs issue_ts = 0;
};

class CardGen {
 public:
  CardGen(const GenConfig& cfg, Card& card, Rng& rng) : cfg_(cfg), card_(card), rng_(rng) {}

  double legit_amount() { return std::round(std::exp(rng_.normal(card_.amount_level, cfg_.amount_within_sigma)) * 100) / 100; }

  std::string channel() { return rng_.bernoulli(card_.pos_share) ? "pos" : "ecom"; }

  int ordinary_value(const CategorySpec& c) { return static_cast<int>(rng_.below(static_cast<std::uint64_t>(c.size - cfg_.risky_values))); }
  int risky_value(const CategorySpec& c) {
    return c.size - cfg_.risky_values + static_cast<int>(rng_.below(static_cast<std::uint64_t>(cfg_.risky_values)));
  }

  RawEvent legit(TimestampMs ts) {
    RawEvent e = base(ts);
    e.label = Label::kLegit;
    e.scorable = !rng_.bernoulli(cfg_.nonscorable_fraction);
    for (std::size_t c = 0; c < cfg_.categories.size(); ++c) {
      const auto& spec = cfg_.categories[c];
      int v = card_.habit[c];
      if (!rng_.bernoulli(cfg_.habit_stickiness)) v = rng_.bernoulli(cfg_.risky_legit_prob) ? risky_value(spec) : ordinary_value(spec);
      e.categoricals.emplace_back(spec.name, category_value(spec, v));
    }
    e.categoricals.emplace_back("channel", e.scorable ? channel() : std::string("auth"));
    e.numericals.emplace_back("amount", legit_amount());
    return e;
  }

  std::vector<RawEvent> burst(TimestampMs t0, bool camouflaged) {
    std::vector<int> values;
    for (std::size_t c = 0; c < cfg_.categories.size(); ++c) {
      const auto& spec = cfg_.categories[c];
      int v;
      if (camouflaged) {
        do v = ordinary_value(spec);
        while (v == card_.habit[c] && spec.size - cfg_.risky_values > 1);
      } else {
        v = risky_value(spec);
      }
      values.push_back(v);
    }
    std::vector<RawEvent> out;
    for (int k = 0; k < cfg_.burst_len; ++k) {
      RawEvent e = base(t0 + static_cast<TimestampMs>(std::llround(k * cfg_.burst_gap_secs * 1000.0)));
      e.label = Label::kFraud;
      e.scorable = true;
      for (std::size_t c = 0; c < cfg_.categories.size(); ++c) {
        e.categoricals.emplace_back(cfg_.categories[c].name, category_value(cfg_.categories[c], values[c]));
      }
      e.categoricals.emplace_back("channel", camouflaged ? channel() : std::string("ecom"));
      const double amount = legit_amount();
      e.numericals.emplace_back("amount", camouflaged ? amount : std::round(amount * cfg_.burst_amount_multiplier * 100) / 100);
      out.push_back(std::move(e));
    }
    return out;
  }

 private:
  RawEvent base(TimestampMs ts) {
    RawEvent e;
    e.entity_id = card_.id;
    e.event_ts = ts;
    e.timestamps.emplace_back("issue_ts", card_.issue_ts);
    return e;
  }

  const GenConfig& cfg_;
  Card& card_;
  Rng& rng_;
};

}  // namespace

void GenConfig::check() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::kInvalidConfig, what); };
  auto prob = [&](double p, const char* name) {
    if (!(p >= 0 && p <= 1)) bad(std::string(name) + " must be in [0, 1]");
  };
  if (n_entities < 1) bad("n_entities must be >= 1");
  if (!(period_days > 0)) bad("period_days must be positive");
  if (!(rate_mean_per_day > 0)) bad("rate_mean_per_day must be positive");
  if (!(rate_log_sigma >= 0) || !(amount_log_sigma >= 0) || !(amount_within_sigma >= 0)) bad("sigmas must be >= 0");
  if (risky_values < 1) bad("risky_values must be >= 1");
  for (const auto& c : categories) {
    if (c.name.empty() || c.name == "channel" || c.name == "amount" || c.name == "issue_ts") bad("bad category name '" + c.name + "'");
    if (c.size < risky_values + 2) bad("category '" + c.name + "' needs at least risky_values + 2 values");
  }
  prob(habit_stickiness, "habit_stickiness");
  prob(risky_legit_prob, "risky_legit_prob");
  prob(session_prob, "session_prob");
  prob(camouflage_fraction, "camouflage_fraction");
  prob(nonscorable_fraction, "nonscorable_fraction");
  if (fraud_card_fraction) prob(*fraud_card_fraction, "fraud_card_fraction");
  if (!(session_gap_min_secs > 0 && session_gap_min_secs <= session_gap_max_secs)) bad("need 0 < session_gap_min_secs <= session_gap_max_secs");
  if (!(fraud_ratio >= 0)) bad("fraud_ratio must be >= 0");
  if (burst_len < 1) bad("burst_len must be >= 1");
  if (!(burst_gap_secs > 0)) bad("burst_gap_secs must be positive");
  if ((burst_len - 1) * burst_gap_secs >= period_days * 86400 * 0.1) bad("burst does not fit the period");
  if (!(burst_amount_multiplier > 0)) bad("burst_amount_multiplier must be positive");
}

nlohmann::json GenConfig::to_json() const {
  auto cats = nlohmann::json::array();
  for (const auto& c : categories) cats.push_back({{"name", c.name}, {"size", c.size}});
  nlohmann::json j{{"n_entities", n_entities},
                   {"period_days", period_days},
                   {"start_ts", start_ts},
                   {"rate_mean_per_day", rate_mean_per_day},
                   {"rate_log_sigma", rate_log_sigma},
                   {"amount_log_mean", amount_log_mean},
                   {"amount_log_sigma", amount_log_sigma},
                   {"amount_within_sigma", amount_within_sigma},
                   {"categories", cats},
                   {"risky_values", risky_values},
                   {"habit_stickiness", habit_stickiness},
                   {"risky_legit_prob", risky_legit_prob},
                   {"session_prob", session_prob},
                   {"session_gap_min_secs", session_gap_min_secs},
                   {"session_gap_max_secs", session_gap_max_secs},
                   {"fraud_ratio", fraud_ratio},
                   {"burst_len", burst_len},
                   {"burst_gap_secs", burst_gap_secs},
                   {"burst_amount_multiplier", burst_amount_multiplier},
                   {"camouflage_fraction", camouflage_fraction},
                   {"nonscorable_fraction", nonscorable_fraction},
                   {"seed", seed}};
  j["fraud_card_fraction"] = fraud_card_fraction ? nlohmann::json(*fraud_card_fraction) : nlohmann::json(nullptr);
  return j;
}

GenConfig GenConfig::from_json(const nlohmann::json& j) {
  GenConfig c;
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "n_entities") c.n_entities = v.get<int>();
      else if (key == "period_days") c.period_days = v.get<double>();
      else if (key == "start_ts") c.start_ts = v.get<TimestampMs>();
      else if (key == "rate_mean_per_day") c.rate_mean_per_day = v.get<double>();
      else if (key == "rate_log_sigma") c.rate_log_sigma = v.get<double>();
      else if (key == "amount_log_mean") c.amount_log_mean = v.get<double>();
      else if (key == "amount_log_sigma") c.amount_log_sigma = v.get<double>();
      else if (key == "amount_within_sigma") c.amount_within_sigma = v.get<double>();
      else if (key == "categories") {
        c.categories.clear();
        for (const auto& cat : v) c.categories.push_back({cat.at("name").get<std::string>(), cat.at("size").get<int>()});
      }
      else if (key == "risky_values") c.risky_values = v.get<int>();
      else if (key == "habit_stickiness") c.habit_stickiness = v.get<double>();
      else if (key == "risky_legit_prob") c.risky_legit_prob = v.get<double>();
      else if (key == "session_prob") c.session_prob = v.get<double>();
      else if (key == "session_gap_min_secs") c.session_gap_min_secs = v.get<double>();
      else if (key == "session_gap_max_secs") c.session_gap_max_secs = v.get<double>();
      else if (key == "fraud_card_fraction") {
        if (v.is_null()) c.fraud_card_fraction.reset();
        else c.fraud_card_fraction = v.get<double>();
      }
      else if (key == "fraud_ratio") c.fraud_ratio = v.get<double>();
      else if (key == "burst_len") c.burst_len = v.get<int>();
      else if (key == "burst_gap_secs") c.burst_gap_secs = v.get<double>();
      else if (key == "burst_amount_multiplier") c.burst_amount_multiplier = v.get<double>();
      else if (key == "camouflage_fraction") c.camouflage_fraction = v.get<double>();
      else if (key == "nonscorable_fraction") c.nonscorable_fraction = v.get<double>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else fail(ErrorCode::kInvalidConfig, "unknown generator config key: " + key);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidConfig, e.what());
  }
  c.check();
  return c;
}

DatasetSchema synth_schema(const GenConfig& cfg) {
  DatasetSchema s;
  s.entity_field = "card";
  s.timestamp_field = "ts";
  s.numericals = {{"amount", NumericTransform::kPercentile}};
  for (const auto& c : cfg.categories) s.categoricals.push_back(c.name);
  s.categoricals.push_back("channel");
  s.timestamps = {"issue_ts"};
  return s;
}

std::vector<RawEvent> generate(const GenConfig& cfg) {
  cfg.check();
  const auto n = static_cast<std::size_t>(cfg.n_entities);
  const double period_ms = cfg.period_days * kDayMs;
  const TimestampMs end = cfg.start_ts + static_cast<TimestampMs>(period_ms);

  std::vector<Card> cards(n);
  std::vector<std::vector<RawEvent>> per_card(n);
  std::size_t legit_total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    Rng rng(splitmix(cfg.seed ^ splitmix(i + 1)));
    Card& card = cards[i];
    char id[24];
    std::snprintf(id, sizeof id, "card%06zu", i);
    card.id = id;
    const double s = cfg.rate_log_sigma;
    card.rate_per_ms = cfg.rate_mean_per_day * std::exp(s * rng.normal() - 0.5 * s * s) / kDayMs;
    card.amount_level = rng.normal(cfg.amount_log_mean, cfg.amount_log_sigma);
    card.pos_share = rng.uniform(0.2, 0.8);
    for (const auto& c : cfg.categories) card.habit.push_back(static_cast<int>(rng.below(static_cast<std::uint64_t>(c.size - cfg.risky_values))));
    card.issue_ts = cfg.start_ts - static_cast<TimestampMs>((30 + rng.below(2000)) * kDayMs);

    CardGen gen(cfg, card, rng);
    auto& out = per_card[i];
    double t = static_cast<double>(cfg.start_ts) + rng.exponential(card.rate_per_ms);
    while (t < static_cast<double>(end)) {
      out.push_back(gen.legit(static_cast<TimestampMs>(t)));
      if (rng.bernoulli(cfg.session_prob)) {
        double u = t;
        const auto follow = 1 + rng.below(2);
        for (std::uint64_t k = 0; k < follow; ++k) {
          u += 1000.0 * rng.uniform(cfg.session_gap_min_secs, cfg.session_gap_max_secs);
          if (u < static_cast<double>(end)) out.push_back(gen.legit(static_cast<TimestampMs>(u)));
        }
        t = u;
      }
      t += rng.exponential(card.rate_per_ms);
    }
    legit_total += out.size();
  }

  std::size_t n_fraud;
  if (cfg.fraud_card_fraction) {
    n_fraud = static_cast<std::size_t>(std::llround(*cfg.fraud_card_fraction * static_cast<double>(n)));
  } else {
    n_fraud = static_cast<std::size_t>(std::llround(cfg.fraud_ratio * static_cast<double>(legit_total) / cfg.burst_len));
  }
  n_fraud = std::min(n_fraud, n);
  Rng pick(splitmix(cfg.seed ^ 0xF4A0DULL));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  pick.shuffle(order.begin(), order.end());
  const auto n_camo = static_cast<std::size_t>(std::llround(cfg.camouflage_fraction * static_cast<double>(n_fraud)));
  const double burst_span_ms = (cfg.burst_len - 1) * cfg.burst_gap_secs * 1000.0;
  for (std::size_t f = 0; f < n_fraud; ++f) {
    const std::size_t i = order[f];
    Rng rng(splitmix(cfg.seed ^ splitmix(i + 1) ^ 0xB0B5ULL));
    const double lo = static_cast<double>(cfg.start_ts) + 0.05 * period_ms;
    const double hi = static_cast<double>(end) - burst_span_ms - 1000.0;
    const auto t0 = static_cast<TimestampMs>(rng.uniform(lo, hi));
    CardGen gen(cfg, cards[i], rng);
    auto b = gen.burst(t0, f < n_camo);
    auto& out = per_card[i];
    out.insert(out.end(), std::make_move_iterator(b.begin()), std::make_move_iterator(b.end()));
    std::stable_sort(out.begin(), out.end(), [](const RawEvent& a, const RawEvent& b) { return a.ts() < b.ts(); });
  }

  std::vector<RawEvent> all;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < per_card[i].size(); ++k) {
      per_card[i][k].event_id = cards[i].id + "-" + std::to_string(k);
      all.push_back(std::move(per_card[i][k]));
    }
  }
  std::stable_sort(all.begin(), all.end(), [](const RawEvent& a, const RawEvent& b) {
    if (a.ts() != b.ts()) return a.ts() < b.ts();
    return a.entity_id < b.entity_id;
  });
  return all;
}

GenStats summarize(const std::vector<RawEvent>& events) {
  GenStats s;
  std::vector<std::string> fraud_cards;
  for (const auto& e : events) {
    ++s.events;
    if (e.label == Label::kFraud) {
      ++s.fraud_events;
      fraud_cards.push_back(e.entity_id);
    } else if (e.label == Label::kLegit) {
      ++s.legit_events;
    }
    s.nonscorable += !e.scorable;
  }
  std::sort(fraud_cards.begin(), fraud_cards.end());
  s.fraud_cards = static_cast<std::size_t>(std::unique(fraud_cards.begin(), fraud_cards.end()) - fraud_cards.begin());
  return s;
}

}  // namespace fraudseq
