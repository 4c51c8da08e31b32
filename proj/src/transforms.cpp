#include "fraudseq/transforms.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <map>
#include <numbers>

#include "fraudseq/error.hpp"

namespace fraudseq {

namespace {

std::vector<double> finite_values(std::span<const std::optional<double>> values) {
  std::vector<double> out;
  out.reserve(values.size());
  for (const auto& v : values) {
    if (v && std::isfinite(*v)) out.push_back(*v);
  }
  return out;
}

}  // namespace

ZScoreTransform fit_zscore(std::span<const std::optional<double>> values, double clip) {
  const auto finite = finite_values(values);
  return fit_zscore(std::span<const double>(finite), clip);
}

ZScoreTransform fit_zscore(std::span<const double> values, double clip) {
  if (!(clip > 0.0)) fail(ErrorCode::kInvalidConfig, "clip must be positive");
  if (values.empty()) fail(ErrorCode::kTooFewValues, "z-score fit needs values");
  // two-pass for stability; n is small enough that this is never the bottleneck
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  const double std = std::sqrt(sq / static_cast<double>(values.size()));
  if (!(std > 0.0)) fail(ErrorCode::kDegenerateDistribution, "zero variance");
  return {mean, std, clip};
}

double apply_zscore(std::optional<double> x, const ZScoreTransform& t) {
  if (!x || !std::isfinite(*x)) return 0.0;
  const double z = (*x - t.mean) / t.std;
  return std::max(std::min(z, t.clip), -t.clip);
}

PercentileBucketer fit_percentile(std::span<const std::optional<double>> values) {
  const auto finite = finite_values(values);
  return fit_percentile(std::span<const double>(finite));
}

PercentileBucketer fit_percentile(std::span<const double> values) {
  if (values.size() < 2) fail(ErrorCode::kTooFewValues, "percentile fit needs at least 2 values");
  std::vector<double> sorted(values.begin(), values.end());
  std::sort(sorted.begin(), sorted.end());
  const std::size_t n = sorted.size();
  PercentileBucketer b;
  b.boundaries.reserve(99);
  for (std::size_t k = 1; k <= 99; ++k) {
    const std::size_t rank = (k * n + 99) / 100;  // ceil(k*n/100), 1-based
    b.boundaries.push_back(sorted[std::max<std::size_t>(rank, 1) - 1]);
  }
  return b;
}

int apply_percentile(std::optional<double> x, const PercentileBucketer& b) {
  if (!x || !std::isfinite(*x)) return PercentileBucketer::kMissingBucket;
  // number of boundaries <= x is exactly the bucket of the half-open scheme
  const auto it = std::upper_bound(b.boundaries.begin(), b.boundaries.end(), *x);
  return static_cast<int>(it - b.boundaries.begin());
}

CategoricalIndexer::CategoricalIndexer(std::vector<std::string> kept_by_rank)
    : kept_(std::move(kept_by_rank)) {
  lookup_.reserve(kept_.size());
  for (std::size_t i = 0; i < kept_.size(); ++i) lookup_.emplace(kept_[i], static_cast<int>(i));
}

int CategoricalIndexer::index(const std::optional<std::string>& value) const {
  if (!value) return missing_index();
  auto it = lookup_.find(*value);
  return it == lookup_.end() ? overflow_index() : it->second;
}

CategoricalIndexer fit_categorical(std::span<const std::optional<std::string>> values,
                                   int min_occurrences, int cap) {
  std::map<std::string, long> counts;
  for (const auto& v : values) {
    if (v) ++counts[*v];
  }
  std::vector<std::pair<std::string, long>> ranked(counts.begin(), counts.end());
  // map iteration is lexicographic, so a stable sort by count keeps the tie rule
  std::stable_sort(ranked.begin(), ranked.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::vector<std::string> kept;
  for (const auto& [value, count] : ranked) {
    if (count < min_occurrences || static_cast<int>(kept.size()) >= cap) break;
    kept.push_back(value);
  }
  return CategoricalIndexer(std::move(kept));
}

std::array<double, 6> time_cyclical(TimestampMs ts) {
  using namespace std::chrono;
  const sys_time<milliseconds> tp{milliseconds{ts}};
  const auto day = floor<days>(tp);
  const year_month_day ymd{day};
  const auto hour = floor<hours>(tp - day).count();
  const unsigned weekday_mon0 = weekday{day}.iso_encoding() - 1;
  const unsigned mday = static_cast<unsigned>(ymd.day());

  constexpr double kTwoPi = 2.0 * std::numbers::pi;
  const double h = static_cast<double>(hour) * kTwoPi / 24.0;
  const double dw = static_cast<double>(weekday_mon0) * kTwoPi / 7.0;
  const double dm = static_cast<double>(mday - 1) * kTwoPi / 30.0;
  return {std::sin(h), std::cos(h), std::sin(dw), std::cos(dw), std::sin(dm), std::cos(dm)};
}

std::vector<std::optional<double>> timestamp_deltas(const RawEvent& e) {
  constexpr double kMsPerDay = 86400.0 * 1000.0;
  std::vector<std::optional<double>> out;
  out.reserve(e.timestamps.size());
  for (const auto& [name, aux] : e.timestamps) {
    if (aux && e.event_ts) {
      out.emplace_back(static_cast<double>(*e.event_ts - *aux) / kMsPerDay);
    } else {
      out.emplace_back(std::nullopt);
    }
  }
  return out;
}

std::vector<double> entity_delta_t(std::span<const TimestampMs> ts, double impute_secs) {
  std::vector<double> out;
  out.reserve(ts.size());
  for (std::size_t i = 0; i < ts.size(); ++i) {
    if (i == 0) {
      out.push_back(impute_secs);
      continue;
    }
    const TimestampMs gap = ts[i] - ts[i - 1];
    if (gap < 0) fail(ErrorCode::kUnsortedSequence, "timestamps go backwards at position " + std::to_string(i));
    out.push_back(static_cast<double>(gap) / 1000.0);
  }
  return out;
}

}  // namespace fraudseq
