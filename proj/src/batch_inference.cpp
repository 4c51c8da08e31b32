#include "fraudseq/batch_inference.hpp"

#include <algorithm>
#include <atomic>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

namespace fraudseq {

BatchPlan plan_batches(std::span<const std::size_t> lengths, std::size_t budget) {
  if (budget == 0) fail(ErrorCode::kInvalidConfig, "event budget must be positive");
  for (std::size_t i = 1; i < lengths.size(); ++i) {
    if (lengths[i] > lengths[i - 1]) fail(ErrorCode::kInvalidConfig, "plan_batches needs lengths sorted descending");
  }
  BatchPlan plan;
  plan.budget = budget;
  for (std::size_t i = 0; i < lengths.size(); ++i) {
    if (!plan.groups.empty()) {
      auto& g = plan.groups.back();
      if ((g.members.size() + 1) * g.max_length <= budget) {
        g.members.push_back(i);
        continue;
      }
    }
    plan.groups.push_back({{i}, lengths[i]});
  }
  return plan;
}

BatchPlan plan_batches(const SequenceStore& sorted, std::size_t budget) {
  std::vector<std::size_t> lengths;
  lengths.reserve(sorted.size());
  for (const auto& r : sorted) lengths.push_back(r.events.size());
  return plan_batches(lengths, budget);
}

namespace {

template <class Scalar>
void score_group(const BatchGroup& g, const SequenceStore& store, const ModelParams<Scalar>& p,
                 const ScoreWindow& window, std::size_t chunk, std::vector<ScoreRecord>& out) {
  std::vector<EntityState<Scalar>> states(g.members.size(), EntityState<Scalar>::fresh(p.config));
  std::vector<std::vector<ScoreRecord>> per_member(g.members.size());
  // time-step major, as a padded batch would run; each member keeps its own
  // state so scores match scoring the sequence alone. Long singletons are
  // walked chunk by chunk with the state carried across.
  for (std::size_t begin = 0; begin < g.max_length; begin += chunk) {
    const std::size_t end = std::min(g.max_length, begin + chunk);
    for (std::size_t t = begin; t < end; ++t) {
      for (std::size_t m = 0; m < g.members.size(); ++m) {
        const auto& rec = store[g.members[m]];
        if (t >= rec.events.size()) continue;
        const auto& e = rec.events[t];
        const Scalar y = model_step(p, e.features, states[m]);
        states[m].last_event_ts = e.ts;
        if (e.scorable && window.contains(e.ts)) {
          per_member[m].push_back({e.event_id, rec.entity_id, e.ts, static_cast<double>(y)});
        }
      }
    }
  }
  for (auto& v : per_member) {
    for (auto& r : v) out.push_back(std::move(r));
  }
}

}  // namespace

template <class Scalar>
std::vector<ScoreRecord> score_all(const BatchPlan& plan, const SequenceStore& store, const ModelParams<Scalar>& p,
                                   ScoreWindow window, unsigned threads) {
  std::vector<std::vector<ScoreRecord>> results(plan.groups.size());
  std::atomic<std::size_t> next{0};
  auto worker = [&] {
    for (std::size_t i = next++; i < plan.groups.size(); i = next++) {
      score_group(plan.groups[i], store, p, window, std::max<std::size_t>(plan.budget, 1), results[i]);
    }
  };
  threads = std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(plan.groups.size())));
  if (threads == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(worker);
  }
  std::vector<ScoreRecord> out;
  for (auto& r : results) {
    for (auto& s : r) out.push_back(std::move(s));
  }
  return out;
}

template std::vector<ScoreRecord> score_all(const BatchPlan&, const SequenceStore&, const ModelParams<float>&,
                                            ScoreWindow, unsigned);
template std::vector<ScoreRecord> score_all(const BatchPlan&, const SequenceStore&, const ModelParams<double>&,
                                            ScoreWindow, unsigned);

std::string format_score(double score) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", score);
  return buf;
}

void write_scores(std::ostream& out, std::span<const ScoreRecord> scores) {
  for (const auto& s : scores) {
    out << s.event_id << '\t' << s.entity_id << '\t' << s.ts << '\t' << format_score(s.score) << '\n';
  }
}

void write_scores(const std::string& path, std::span<const ScoreRecord> scores) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) fail(ErrorCode::kIo, "cannot open " + path);
  write_scores(f, scores);
  if (!f) fail(ErrorCode::kIo, "write failed: " + path);
}

std::vector<ScoreRecord> read_scores(const std::string& path) {
  std::ifstream f(path);
  if (!f) fail(ErrorCode::kIo, "cannot open " + path);
  std::vector<ScoreRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(f, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream in(line);
    ScoreRecord r;
    std::string ts, score;
    if (!std::getline(in, r.event_id, '\t') || !std::getline(in, r.entity_id, '\t') || !std::getline(in, ts, '\t') ||
        !std::getline(in, score)) {
      fail(ErrorCode::kSchemaMismatch, path + ":" + std::to_string(lineno) + ": expected 4 tab-separated columns");
    }
    try {
      r.ts = std::stoll(ts);
      r.score = std::stod(score);
    } catch (const std::exception&) {
      fail(ErrorCode::kSchemaMismatch, path + ":" + std::to_string(lineno) + ": bad number");
    }
    out.push_back(std::move(r));
  }
  return out;
}

}  // namespace fraudseq
