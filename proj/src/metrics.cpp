#include "fraudseq/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <unordered_map>

#include "fraudseq/error.hpp"

namespace fraudseq {

namespace {

std::int64_t utc_day(TimestampMs ts) {
  constexpr std::int64_t kDay = 86400000;
  return ts >= 0 ? ts / kDay : -((-ts + kDay - 1) / kDay);
}

}  // namespace

RecallAtPrecision recall_at_precision(std::span<const ScoredEvent> s, double target) {
  std::vector<std::size_t> order(s.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return s[a].score > s[b].score; });
  std::size_t positives = 0;
  for (const auto& e : s) positives += e.label == 1;
  if (positives == 0) fail(ErrorCode::kUnachievablePrecision, "no positive events");

  bool found = false;
  RecallAtPrecision best;
  std::size_t tp = 0, fp = 0;
  for (std::size_t i = 0; i < order.size();) {
    const double t = s[order[i]].score;
    for (; i < order.size() && s[order[i]].score == t; ++i) (s[order[i]].label == 1 ? tp : fp) += 1;
    if (tp == 0) continue;
    const double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    const double recall = static_cast<double>(tp) / static_cast<double>(positives);
    if (precision >= target && (!found || recall > best.recall)) {
      best = {recall, t, precision};
      found = true;
    }
  }
  if (!found) fail(ErrorCode::kUnachievablePrecision, "no threshold reaches precision " + std::to_string(target));
  return best;
}

double fp_rate(std::span<const ScoredEvent> s, double threshold) {
  std::size_t fp = 0, negatives = 0;
  for (const auto& e : s) {
    if (e.label != 0) continue;
    ++negatives;
    fp += e.score >= threshold;
  }
  if (negatives == 0) fail(ErrorCode::kNoNegatives, "fp_rate needs at least one legit event");
  return static_cast<double>(fp) / static_cast<double>(negatives);
}

MoneyRecall money_recall(std::span<const ScoredEvent> s, double threshold) {
  MoneyRecall out;
  bool any = false;
  for (const auto& e : s) {
    if (e.label != 1) continue;
    any = true;
    out.total += e.amount;
    if (e.score >= threshold) out.caught += e.amount;
  }
  if (!any) fail(ErrorCode::kNoFraud, "money_recall needs at least one fraud event");
  out.recall = out.total > 0 ? out.caught / out.total : 0.0;
  return out;
}

double card_recall_at_alert_budget(std::span<const ScoredEvent> s, int alerts_per_day) {
  struct Card {
    double max_score;
    bool fraud;
  };
  std::map<std::int64_t, std::unordered_map<std::string, Card>> days;
  for (const auto& e : s) {
    auto& cards = days[utc_day(e.ts)];
    auto [it, inserted] = cards.try_emplace(e.entity_id, Card{e.score, e.label == 1});
    if (!inserted) {
      it->second.max_score = std::max(it->second.max_score, e.score);
      it->second.fraud = it->second.fraud || e.label == 1;
    }
  }
  std::size_t present = 0, caught = 0;
  std::vector<std::pair<const std::string*, const Card*>> ranked;
  for (const auto& [day, cards] : days) {
    ranked.clear();
    for (const auto& [id, card] : cards) {
      ranked.emplace_back(&id, &card);
      present += card.fraud;
    }
    const auto k = std::min<std::size_t>(ranked.size(), static_cast<std::size_t>(std::max(alerts_per_day, 0)));
    std::partial_sort(ranked.begin(), ranked.begin() + static_cast<std::ptrdiff_t>(k), ranked.end(),
                      [](const auto& a, const auto& b) {
                        if (a.second->max_score != b.second->max_score) return a.second->max_score > b.second->max_score;
                        return *a.first < *b.first;
                      });
    for (std::size_t i = 0; i < k; ++i) caught += ranked[i].second->fraud;
  }
  return present == 0 ? 0.0 : static_cast<double>(caught) / static_cast<double>(present);
}

double nearest_rank(std::vector<double> values, double p) {
  if (values.empty()) return 0.0;
  std::sort(values.begin(), values.end());
  // p is taken to 1e-6 so that e.g. 99.9 * 1000 / 100 is exactly 999
  const auto micro = static_cast<unsigned __int128>(std::llround(std::clamp(p, 0.0, 100.0) * 1e6));
  const unsigned __int128 denom = 100000000;
  auto rank = static_cast<std::size_t>((micro * values.size() + denom - 1) / denom);
  rank = std::clamp<std::size_t>(rank, 1, values.size());
  return values[rank - 1];
}

}  // namespace fraudseq
