#pragma once

#include <cstdint>
#include <limits>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "fraudseq/gru.hpp"
#include "fraudseq/sequence_store.hpp"

namespace fraudseq {

inline constexpr std::size_t kDefaultEventBudget = 8192;

struct BatchGroup {
  std::vector<std::size_t> members;  // ordinals into the store
  std::size_t max_length = 0;
};

struct BatchPlan {
  std::vector<BatchGroup> groups;
  std::size_t budget = kDefaultEventBudget;
};

/// Greedy over lengths sorted longest first: a group grows while
/// (count + 1) * (group max length) <= budget. A sequence longer than the
/// budget gets a group of its own.
BatchPlan plan_batches(std::span<const std::size_t> lengths, std::size_t budget = kDefaultEventBudget);
BatchPlan plan_batches(const SequenceStore& sorted, std::size_t budget = kDefaultEventBudget);

struct ScoreRecord {
  std::string event_id;
  std::string entity_id;
  TimestampMs ts = 0;
  double score = 0;
};

struct ScoreWindow {
  TimestampMs begin = std::numeric_limits<TimestampMs>::min();
  TimestampMs end = std::numeric_limits<TimestampMs>::max();
  bool contains(TimestampMs ts) const { return begin <= ts && ts < end; }
};

/// Scores every scorable event inside window with the full history of its
/// sequence. Output order is (group, member, event). Groups are spread over
/// threads; results do not depend on the plan or the thread count.
template <class Scalar>
std::vector<ScoreRecord> score_all(const BatchPlan& plan, const SequenceStore& store, const ModelParams<Scalar>& p,
                                   ScoreWindow window = {}, unsigned threads = 1);

/// "event_id\tentity_id\tts\tscore" with the score at 9 significant digits.
void write_scores(std::ostream& out, std::span<const ScoreRecord> scores);
void write_scores(const std::string& path, std::span<const ScoreRecord> scores);
std::vector<ScoreRecord> read_scores(const std::string& path);
std::string format_score(double score);

}  // namespace fraudseq
