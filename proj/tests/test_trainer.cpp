#include <doctest.h>

#include <cmath>
#include <fstream>
#include <set>

#include "fraudseq/model_io.hpp"
#include "fraudseq/trainer.hpp"
#include "model_fixtures.hpp"
#include "test_util.hpp"

using namespace fraudseq;
using fraudseq::testing::random_params;
using fraudseq::testing::random_sequence;
using fraudseq::testing::tiny_config;

namespace {

template <class Fn>
ErrorCode code_of(Fn&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("expected an Error");
  return ErrorCode::kIo;
}

SequenceRecord card(const ModelConfig& cfg, Rng& rng, std::size_t len, bool fraud, const std::string& id) {
  auto r = random_sequence(cfg, len, rng, 0.8);
  r.entity_id = id;
  r.has_fraud = false;
  for (auto& e : r.events) e.label = Label::kLegit;
  if (fraud) {
    r.events.back().label = Label::kFraud;
    r.events.back().scorable = true;
    r.has_fraud = true;
  }
  return r;
}

std::pair<SequenceStore, SequenceStore> stores(const ModelConfig& cfg, Rng& rng, std::size_t n_fraud,
                                               std::size_t n_legit, std::size_t max_len = 12) {
  std::vector<SequenceRecord> f, l;
  for (std::size_t i = 0; i < n_fraud; ++i) f.push_back(card(cfg, rng, 1 + rng.below(max_len), true, "f" + std::to_string(i)));
  for (std::size_t i = 0; i < n_legit; ++i) l.push_back(card(cfg, rng, 1 + rng.below(max_len), false, "l" + std::to_string(i)));
  return {SequenceStore(std::move(f), 0), SequenceStore(std::move(l), 0)};
}

TrainConfig small_train_config() {
  TrainConfig c;
  c.batch_cards = 8;
  c.fraud_fraction = 0.25;
  c.cutoff = 10;
  c.lr = 0.01;
  c.epoch_nonfraud_fraction = 0.5;
  c.max_epochs = 6;
  c.seed = 3;
  return c;
}

}  // namespace

TEST_CASE("sample_epoch takes every fraud card and a tenth of the others") {
  const auto cfg = tiny_config();
  Rng rng(1);
  auto [fraud, legit] = stores(cfg, rng, 10, 1000, 2);
  TrainConfig tc;
  Rng a(7), b(7);
  const auto e1 = sample_epoch(fraud, legit, tc, a);
  const auto e2 = sample_epoch(fraud, legit, tc, b);
  CHECK(e1.size() == 110);
  CHECK(e1 == e2);
  std::set<std::uint32_t> fraud_ids;
  for (const auto& c : e1) {
    if (c.fraud) fraud_ids.insert(c.index);
  }
  CHECK(fraud_ids.size() == 10);
  CHECK(code_of([&] { sample_epoch(SequenceStore(), legit, tc, a); }) == ErrorCode::kNoFraudCards);
}

TEST_CASE("batches hold ceil(fraction * cards) fraud cards and respect the cutoff") {
  const auto cfg = tiny_config();
  Rng rng(2);
  auto [fraud, legit] = stores(cfg, rng, 30, 2000, 40);
  TrainConfig tc;
  tc.batch_cards = 20;
  tc.fraud_fraction = 0.05;
  tc.cutoff = 15;
  tc.epoch_nonfraud_fraction = 1.0;
  Rng r(5);
  EpochBatcher batcher(fraud, legit, sample_epoch(fraud, legit, tc, r), tc, r);
  CHECK(batcher.fraud_per_batch() == 1);
  std::size_t batches = 0, cards = 0;
  while (auto b = batcher.next()) {
    ++batches;
    CHECK(b->fraud_cards() == 1);
    cards += b->items.size() - 1;
    for (const auto& item : b->items) {
      CHECK(item.length <= 15);
      CHECK(item.length == std::min<std::size_t>(15, item.record->events.size()));
      CHECK(item.begin + item.length == item.record->events.size());
    }
  }
  CHECK(cards == 2000);
  CHECK(batches == 106);
}

TEST_CASE("truncation keeps the most recent events and pads short cards") {
  const auto cfg = tiny_config();
  Rng rng(3);
  const auto long_card = card(cfg, rng, 700, false, "long");
  const auto item = truncate_to_cutoff(long_card, 400, false);
  CHECK(item.length == 400);
  CHECK(item.events().front().event_id == long_card.events[300].event_id);
  CHECK(item.events().back().event_id == long_card.events.back().event_id);

  const auto short_card = card(cfg, rng, 3, true, "short");
  Batch b;
  b.items = {item, truncate_to_cutoff(short_card, 400, true)};
  b.padded_length = 400;
  const auto pad = b.padding_mask();
  const auto sc = b.scorable_mask();
  CHECK(std::count(pad[1].begin(), pad[1].end(), 1) == 397);
  for (std::size_t t = 0; t < 400; ++t) CHECK(!(pad[1][t] && sc[1][t]));
}

TEST_CASE("masked_bce examples") {
  const double ln2 = std::log(2.0);
  CHECK(masked_bce(std::vector<double>{0.5}, std::vector<double>{1}, std::vector<std::uint8_t>{1}) ==
        doctest::Approx(ln2).epsilon(1e-12));
  CHECK(masked_bce(std::vector<double>{0.5, 0.9}, std::vector<double>{1, 1}, std::vector<std::uint8_t>{1, 0}) ==
        doctest::Approx(ln2).epsilon(1e-12));
  CHECK(code_of([] {
          masked_bce(std::vector<double>{0.5}, std::vector<double>{1}, std::vector<std::uint8_t>{0});
        }) == ErrorCode::kEmptyScorableSet);
  const double extreme =
      masked_bce(std::vector<double>{0.0, 1.0, 1.0, 0.0}, std::vector<double>{0, 1, 0, 1}, std::vector<std::uint8_t>{1, 1, 1, 1});
  CHECK(std::isfinite(extreme));
  CHECK(extreme == doctest::Approx(-std::log(1e-7) / 2).epsilon(1e-6));
}

TEST_CASE("adam_step against the closed form") {
  const auto cfg = tiny_config();
  Rng rng(4);
  const auto p0 = random_params<double>(cfg, rng);

  auto p = p0;
  auto st = AdamState<double>::zeros(cfg);
  adam_step(p, ModelParams<double>::zeros(cfg), st, 1e-3);
  bool same = true;
  visit_tensors([&](const std::string&, const auto& a, const auto& b) { same = same && a == b; }, p, p0);
  CHECK(same);

  // g = 1 everywhere at step 1: m_hat = v_hat = 1, so every entry moves by lr / (1 + eps)
  auto ones = ModelParams<double>::zeros(cfg);
  visit_tensors([](const std::string&, auto& t) { t.setOnes(); }, ones);
  p = p0;
  st = AdamState<double>::zeros(cfg);
  adam_step(p, ones, st, 1e-3);
  double max_err = 0;
  visit_tensors(
      [&](const std::string&, const auto& a, const auto& b) {
        max_err = std::max(max_err, ((b - a).array() - 1e-3 / (1 + 1e-8)).abs().maxCoeff());
      },
      p, p0);
  CHECK(max_err < 1e-15);

  auto bad = ModelParams<double>::zeros(cfg);
  bad.gru[1].u_z(0, 0) = std::nan("");
  const auto before = p;
  CHECK(code_of([&] { adam_step(p, bad, st, 1e-3); }) == ErrorCode::kNonFiniteGradient);
  CHECK(st.step == 1);
  same = true;
  visit_tensors([&](const std::string&, const auto& a, const auto& b) { same = same && a == b; }, p, before);
  CHECK(same);
}

TEST_CASE("batch_gradient matches finite differences of the batch loss") {
  const auto cfg = tiny_config();
  Rng rng(6);
  auto p = random_params<double>(cfg, rng);
  std::vector<SequenceRecord> recs{card(cfg, rng, 5, true, "a"), card(cfg, rng, 7, false, "b")};
  Batch b;
  for (const auto& r : recs) b.items.push_back(truncate_to_cutoff(r, 6, r.has_fraud));
  b.padded_length = 6;
  const auto g = batch_gradient(p, b);
  double max_rel = 0;
  visit_tensors(
      [&](const std::string&, auto& t, const auto& gt) {
        for (Eigen::Index i = 0; i < t.size(); ++i) {
          const double orig = t.data()[i];
          t.data()[i] = orig + 1e-5;
          const double lp = batch_gradient(p, b).loss;
          t.data()[i] = orig - 1e-5;
          const double lm = batch_gradient(p, b).loss;
          t.data()[i] = orig;
          const double num = (lp - lm) / 2e-5;
          const double a = gt.data()[i];
          max_rel = std::max(max_rel, std::abs(a - num) / std::max({std::abs(a), std::abs(num), 1e-4}));
        }
      },
      p, g.grads);
  CHECK(max_rel < 1e-6);
}

TEST_CASE("one small Adam step lowers the loss on the same batch") {
  const auto cfg = tiny_config();
  Rng rng(12);
  auto p = random_params<double>(cfg, rng);
  std::vector<SequenceRecord> recs;
  for (int i = 0; i < 4; ++i) recs.push_back(card(cfg, rng, 8, i == 0, "c" + std::to_string(i)));
  Batch b;
  for (const auto& r : recs) b.items.push_back(truncate_to_cutoff(r, 8, r.has_fraud));
  b.padded_length = 8;
  const auto g = batch_gradient(p, b);
  auto st = AdamState<double>::zeros(cfg);
  adam_step(p, g.grads, st, 1e-4);
  CHECK(batch_gradient(p, b).loss < g.loss);
}

TEST_CASE("plateau schedule semantics") {
  SUBCASE("steady improvement never decays") {
    PlateauSchedule s(1e-3, 10, 20, 10);
    for (int e = 0; e < 5; ++e) {
      const auto st = s.observe(0.1 * (e + 1));
      CHECK(st.improved);
      CHECK_FALSE(st.decayed);
    }
    CHECK(s.lr() == 1e-3);
  }
  SUBCASE("flat for 20 epochs stops at epoch 20") {
    PlateauSchedule s(1e-3, 10, 20, 10);
    int stop_epoch = -1, decays = 0;
    for (int e = 0; e <= 40 && stop_epoch < 0; ++e) {
      const auto st = s.observe(0.3);
      decays += st.decayed;
      if (st.stop) stop_epoch = e;
    }
    CHECK(stop_epoch == 20);
    CHECK(decays == 1);
  }
  SUBCASE("flat for 10 then improving decays exactly once") {
    PlateauSchedule s(1e-3, 10, 20, 10);
    int decays = 0;
    for (int e = 0; e <= 10; ++e) decays += s.observe(0.3).decayed;
    for (int e = 0; e < 10; ++e) decays += s.observe(0.4 + 0.01 * e).decayed;
    CHECK(decays == 1);
    CHECK(s.lr() == doctest::Approx(1e-4));
  }
}

TEST_CASE("train follows the scripted metric and logs every epoch") {
  const auto cfg = tiny_config();
  Rng rng(9);
  auto [fraud, legit] = stores(cfg, rng, 6, 40);
  auto tc = small_train_config();
  tc.max_epochs = 50;
  tc.lr = 1e-3;
  fraudseq::testing::TempDir dir;
  tc.metrics_log = dir.file("metrics.tsv");
  // flat 10, improve, flat 20
  auto trace = [](const ModelParams<double>&, int epoch) { return epoch < 10 ? 0.1 : 0.2; };
  auto st = initial_train_state(init_params<double>(cfg, 1), tc);
  const auto res = train<double>(st, fraud, legit, tc, trace);
  CHECK(res.early_stopped);
  CHECK(res.history.size() == 31);
  CHECK(res.best_epoch == 10);
  int decays = 0;
  for (const auto& m : res.history) decays += m.decayed;
  CHECK(decays == 1);
  CHECK(res.history[20].decayed);
  CHECK(res.history[20].lr == 1e-3);
  CHECK(res.history[21].lr == doctest::Approx(1e-4));

  std::ifstream log(tc.metrics_log);
  std::string line;
  int lines = 0;
  while (std::getline(log, line)) ++lines;
  CHECK(lines == 32);
}

TEST_CASE("resuming from a checkpoint reproduces an uninterrupted run") {
  const auto cfg = tiny_config(Precision::kF32);
  Rng rng(10);
  auto [fraud, legit] = stores(cfg, rng, 5, 30);
  auto tc = small_train_config();
  tc.max_epochs = 4;
  auto metric = [](const ModelParams<float>& p, int) { return static_cast<double>(p.output.w.sum()); };

  auto straight = initial_train_state(init_params<float>(cfg, 2), tc);
  const auto full = train<float>(straight, fraud, legit, tc, metric);

  fraudseq::testing::TempDir dir;
  tc.checkpoint_path = dir.file("ckpt.model");
  auto first = initial_train_state(init_params<float>(cfg, 2), tc);
  TrainHooks hooks;
  hooks.stop_after_epochs = 2;
  train<float>(first, fraud, legit, tc, metric, hooks);
  auto resumed = load_checkpoint<float>(tc.checkpoint_path);
  CHECK(resumed.next_epoch == 2);
  const auto rest = train<float>(resumed, fraud, legit, tc, metric);

  CHECK(rest.history == full.history);
  bool same = true;
  visit_tensors([&](const std::string&, const auto& a, const auto& b) { same = same && a == b; }, resumed.params,
                straight.params);
  CHECK(same);
  CHECK(rest.best_epoch == full.best_epoch);
}

TEST_CASE("updates only see events before the validation start") {
  const auto cfg = tiny_config();
  Rng rng(11);
  auto [fraud, legit] = stores(cfg, rng, 8, 60, 30);
  std::vector<SequenceRecord> all(fraud.begin(), fraud.end());
  all.insert(all.end(), legit.begin(), legit.end());
  const SequenceStore full(std::move(all), 0);
  TimestampMs lo = INT64_MAX, hi = INT64_MIN;
  for (const auto& r : full) {
    lo = std::min(lo, r.events.front().ts);
    hi = std::max(hi, r.events.back().ts);
  }
  const TimestampMs val_start = lo + (hi - lo) / 2;
  const auto [train_fraud, train_legit] = split_fraud(truncate_at(full, val_start));
  REQUIRE(!train_fraud.empty());

  TimestampMs max_seen = INT64_MIN;
  std::size_t seen = 0;
  TrainHooks hooks;
  hooks.on_batch = [&](const Batch& b) {
    for (const auto& item : b.items) {
      for (const auto& e : item.events()) {
        max_seen = std::max(max_seen, e.ts);
        ++seen;
      }
    }
  };
  auto tc = small_train_config();
  tc.max_epochs = 3;
  auto st = initial_train_state(init_params<double>(cfg, 5), tc);
  train<double>(st, train_fraud, train_legit, tc, [](const ModelParams<double>&, int) { return 0.0; }, hooks);
  CHECK(seen > 0);
  CHECK(max_seen < val_start);
}

TEST_CASE("train config validation and JSON round-trip") {
  TrainConfig c;
  c.cutoff = 150;
  c.seed = 99;
  const auto back = TrainConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  auto bad = c.to_json();
  bad["fraud_fraction"] = 1.5;
  CHECK(code_of([&] { TrainConfig::from_json(bad); }) == ErrorCode::kInvalidConfig);
  bad = c.to_json();
  bad["patience_lr"] = 30;
  CHECK(code_of([&] { TrainConfig::from_json(bad); }) == ErrorCode::kInvalidConfig);
  bad = c.to_json();
  bad["bogus"] = 1;
  CHECK(code_of([&] { TrainConfig::from_json(bad); }) == ErrorCode::kInvalidConfig);
}
