#include "fraudseq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>
#include <thread>

#include "fraudseq/binary_io.hpp"
#include "fraudseq/bounded_queue.hpp"
#include "fraudseq/model_io.hpp"

namespace fraudseq {

namespace {

// guards against 0.05 * 20 landing a hair above 1
std::size_t ceil_count(double x) { return static_cast<std::size_t>(std::ceil(x - 1e-9)); }
std::size_t floor_count(double x) { return static_cast<std::size_t>(std::floor(x + 1e-9)); }

bool uses_event(const SequenceEvent& e) { return e.scorable && e.label != Label::kUnknown; }

}  // namespace

void TrainConfig::check() const {
  auto bad = [](const std::string& what) { fail(ErrorCode::kInvalidConfig, what); };
  if (batch_cards < 1) bad("batch_cards must be >= 1");
  if (!(fraud_fraction > 0 && fraud_fraction < 1)) bad("fraud_fraction must be in (0, 1)");
  if (cutoff < 1) bad("cutoff must be >= 1");
  if (!(lr > 0)) bad("lr must be positive");
  if (patience_lr < 1 || patience_lr >= patience_stop) bad("need 1 <= patience_lr < patience_stop");
  if (!(lr_decay > 0)) bad("lr_decay must be positive");
  if (!(epoch_nonfraud_fraction > 0 && epoch_nonfraud_fraction <= 1)) bad("epoch_nonfraud_fraction must be in (0, 1]");
  if (max_epochs < 1) bad("max_epochs must be >= 1");
  if (!(target_precision > 0 && target_precision <= 1)) bad("target_precision must be in (0, 1]");
  if (queue_capacity < 1) bad("queue_capacity must be >= 1");
}

nlohmann::json TrainConfig::to_json() const {
  return {{"batch_cards", batch_cards},
          {"fraud_fraction", fraud_fraction},
          {"cutoff", cutoff},
          {"lr", lr},
          {"patience_stop", patience_stop},
          {"patience_lr", patience_lr},
          {"lr_decay", lr_decay},
          {"epoch_nonfraud_fraction", epoch_nonfraud_fraction},
          {"max_epochs", max_epochs},
          {"target_precision", target_precision},
          {"queue_capacity", queue_capacity},
          {"seed", seed},
          {"checkpoint_path", checkpoint_path},
          {"metrics_log", metrics_log}};
}

TrainConfig TrainConfig::from_json(const nlohmann::json& j) {
  TrainConfig c;
  try {
    for (const auto& [key, value] : j.items()) {
      if (key == "batch_cards") c.batch_cards = value.get<int>();
      else if (key == "fraud_fraction") c.fraud_fraction = value.get<double>();
      else if (key == "cutoff") c.cutoff = value.get<int>();
      else if (key == "lr") c.lr = value.get<double>();
      else if (key == "patience_stop") c.patience_stop = value.get<int>();
      else if (key == "patience_lr") c.patience_lr = value.get<int>();
      else if (key == "lr_decay") c.lr_decay = value.get<double>();
      else if (key == "epoch_nonfraud_fraction") c.epoch_nonfraud_fraction = value.get<double>();
      else if (key == "max_epochs") c.max_epochs = value.get<int>();
      else if (key == "target_precision") c.target_precision = value.get<double>();
      else if (key == "queue_capacity") c.queue_capacity = value.get<std::size_t>();
      else if (key == "seed") c.seed = value.get<std::uint64_t>();
      else if (key == "checkpoint_path") c.checkpoint_path = value.get<std::string>();
      else if (key == "metrics_log") c.metrics_log = value.get<std::string>();
      else fail(ErrorCode::kInvalidConfig, "unknown train config key: " + key);
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kInvalidConfig, e.what());
  }
  c.check();
  return c;
}

std::vector<CardRef> sample_epoch(const SequenceStore& fraud, const SequenceStore& nonfraud, const TrainConfig& cfg,
                                  Rng& rng) {
  if (fraud.empty()) fail(ErrorCode::kNoFraudCards, "fraud store is empty");
  std::vector<CardRef> out;
  for (std::size_t i = 0; i < fraud.size(); ++i) out.push_back({true, static_cast<std::uint32_t>(i)});
  const std::size_t n = nonfraud.empty() ? 0 : floor_count(cfg.epoch_nonfraud_fraction * nonfraud.size());
  for (std::size_t i = 0; i < n; ++i) out.push_back({false, static_cast<std::uint32_t>(rng.below(nonfraud.size()))});
  rng.shuffle(out.begin(), out.end());
  return out;
}

BatchItem truncate_to_cutoff(const SequenceRecord& rec, int cutoff, bool fraud) {
  const std::size_t n = rec.events.size();
  const std::size_t keep = std::min(n, static_cast<std::size_t>(cutoff));
  return {&rec, n - keep, keep, fraud};
}

std::size_t Batch::fraud_cards() const {
  return static_cast<std::size_t>(std::count_if(items.begin(), items.end(), [](const auto& i) { return i.fraud; }));
}

std::size_t Batch::scorable_events() const {
  std::size_t n = 0;
  for (const auto& item : items) {
    for (const auto& e : item.events()) n += uses_event(e);
  }
  return n;
}

std::vector<std::vector<std::uint8_t>> Batch::padding_mask() const {
  std::vector<std::vector<std::uint8_t>> out;
  for (const auto& item : items) {
    std::vector<std::uint8_t> row(padded_length, 1);
    std::fill(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(item.length), 0);
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<std::vector<std::uint8_t>> Batch::scorable_mask() const {
  std::vector<std::vector<std::uint8_t>> out;
  for (const auto& item : items) {
    std::vector<std::uint8_t> row(padded_length, 0);
    const auto ev = item.events();
    for (std::size_t t = 0; t < ev.size(); ++t) row[t] = uses_event(ev[t]);
    out.push_back(std::move(row));
  }
  return out;
}

std::vector<std::vector<double>> Batch::labels() const {
  std::vector<std::vector<double>> out;
  for (const auto& item : items) {
    std::vector<double> row(padded_length, 0.0);
    const auto ev = item.events();
    for (std::size_t t = 0; t < ev.size(); ++t) row[t] = ev[t].label == Label::kFraud ? 1.0 : 0.0;
    out.push_back(std::move(row));
  }
  return out;
}

EpochBatcher::EpochBatcher(const SequenceStore& fraud, const SequenceStore& nonfraud, std::vector<CardRef> epoch,
                           const TrainConfig& cfg, Rng& rng)
    : fraud_(fraud), nonfraud_(nonfraud), batch_cards_(cfg.batch_cards), cutoff_(cfg.cutoff), rng_(rng) {
  for (const auto& c : epoch) (c.fraud ? fraud_ids_ : nonfraud_ids_).push_back(c.index);
  fraud_per_batch_ = nonfraud_ids_.empty()
                         ? static_cast<std::size_t>(batch_cards_)
                         : std::min<std::size_t>(batch_cards_, ceil_count(cfg.fraud_fraction * batch_cards_));
}

std::optional<Batch> EpochBatcher::next() {
  Batch b;
  auto add = [&](const SequenceRecord& rec, bool fraud) {
    b.items.push_back(truncate_to_cutoff(rec, cutoff_, fraud));
    b.padded_length = std::max(b.padded_length, b.items.back().length);
  };
  if (nonfraud_ids_.empty()) {
    // fraud-only epoch: plain chunks, no resampling
    if (fraud_pos_ >= fraud_ids_.size()) return std::nullopt;
    for (std::size_t i = 0; i < fraud_per_batch_ && fraud_pos_ < fraud_ids_.size(); ++i) {
      add(fraud_[fraud_ids_[fraud_pos_++]], true);
    }
    return b;
  }
  if (nonfraud_pos_ >= nonfraud_ids_.size()) return std::nullopt;
  for (std::size_t i = 0; i < fraud_per_batch_ && !fraud_.empty(); ++i) {
    const std::size_t id = fraud_pos_ < fraud_ids_.size() ? fraud_ids_[fraud_pos_++] : rng_.below(fraud_.size());
    add(fraud_[id], true);
  }
  const std::size_t want = static_cast<std::size_t>(batch_cards_) - fraud_per_batch_;
  for (std::size_t i = 0; i < want && nonfraud_pos_ < nonfraud_ids_.size(); ++i) {
    add(nonfraud_[nonfraud_ids_[nonfraud_pos_++]], false);
  }
  return b;
}

double masked_bce(std::span<const double> y_hat, std::span<const double> y, std::span<const std::uint8_t> mask) {
  if (y_hat.size() != y.size() || y.size() != mask.size()) fail(ErrorCode::kShapeMismatch, "masked_bce inputs");
  double sum = 0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < y_hat.size(); ++i) {
    if (!mask[i]) continue;
    const double p = std::clamp(y_hat[i], 1e-7, 1.0 - 1e-7);
    sum -= y[i] * std::log(p) + (1.0 - y[i]) * std::log(1.0 - p);
    ++n;
  }
  if (n == 0) fail(ErrorCode::kEmptyScorableSet, "no scorable event");
  return sum / static_cast<double>(n);
}

template <class Scalar>
void adam_step(ModelParams<Scalar>& p, const ModelParams<Scalar>& grads, AdamState<Scalar>& st, double lr) {
  bool finite = true;
  visit_tensors([&](const std::string&, const auto& g) { finite = finite && g.allFinite(); }, grads);
  if (!finite) fail(ErrorCode::kNonFiniteGradient, "gradient has NaN or Inf entries");
  ++st.step;
  const auto b1 = static_cast<Scalar>(st.beta1);
  const auto b2 = static_cast<Scalar>(st.beta2);
  const auto c1 = static_cast<Scalar>(1.0 - std::pow(st.beta1, static_cast<double>(st.step)));
  const auto c2 = static_cast<Scalar>(1.0 - std::pow(st.beta2, static_cast<double>(st.step)));
  const auto rate = static_cast<Scalar>(lr);
  const auto eps = static_cast<Scalar>(st.eps);
  visit_tensors(
      [&](const std::string&, auto& w, const auto& g, auto& m, auto& v) {
        m = b1 * m + (Scalar(1) - b1) * g;
        v = b2 * v + (Scalar(1) - b2) * g.cwiseAbs2();
        w.array() -= rate * (m.array() / c1) / ((v.array() / c2).sqrt() + eps);
      },
      p, grads, st.m, st.v);
}

template <class Scalar>
BatchGradient<Scalar> batch_gradient(const ModelParams<Scalar>& p, const Batch& batch) {
  BatchGradient<Scalar> out{ModelParams<Scalar>::zeros(p.config)};
  out.scorable = batch.scorable_events();
  if (out.scorable == 0) fail(ErrorCode::kEmptyScorableSet, "batch has no scorable event");
  const Scalar scale = Scalar(1) / static_cast<Scalar>(out.scorable);
  std::vector<double> all_yhat, all_y;
  std::vector<std::uint8_t> all_mask;
  std::vector<double> labels;
  std::vector<std::uint8_t> mask;
  for (const auto& item : batch.items) {
    const auto events = item.events();
    const auto fwd = forward_sequence(p, events, EntityState<Scalar>::fresh(p.config), true);
    labels.clear();
    mask.clear();
    for (std::size_t t = 0; t < events.size(); ++t) {
      labels.push_back(events[t].label == Label::kFraud ? 1.0 : 0.0);
      mask.push_back(uses_event(events[t]));
      all_yhat.push_back(static_cast<double>(fwd.scores[t]));
    }
    all_y.insert(all_y.end(), labels.begin(), labels.end());
    all_mask.insert(all_mask.end(), mask.begin(), mask.end());
    backward_sequence<Scalar>(p, fwd.tape, labels, mask, scale, out.grads);
  }
  out.loss = masked_bce(all_yhat, all_y, all_mask);
  return out;
}

PlateauSchedule::PlateauSchedule(double lr, int patience_lr, int patience_stop, double decay)
    : lr_(lr), patience_lr_(patience_lr), patience_stop_(patience_stop), decay_(decay) {}

PlateauSchedule::Step PlateauSchedule::observe(double metric) {
  Step s;
  if (!best_ || metric > *best_) {
    best_ = metric;
    since_improve_ = 0;
    since_decay_ = 0;
    s.improved = true;
  } else {
    ++since_improve_;
    ++since_decay_;
    if (since_improve_ >= patience_stop_) {
      s.stop = true;
    } else if (since_decay_ >= patience_lr_) {
      lr_ /= decay_;
      since_decay_ = 0;
      s.decayed = true;
    }
  }
  s.lr = lr_;
  return s;
}

nlohmann::json PlateauSchedule::to_json() const {
  nlohmann::json j{{"lr", lr_},
                   {"patience_lr", patience_lr_},
                   {"patience_stop", patience_stop_},
                   {"decay", decay_},
                   {"since_improve", since_improve_},
                   {"since_decay", since_decay_}};
  j["best"] = best_ ? nlohmann::json(*best_) : nlohmann::json(nullptr);
  return j;
}

PlateauSchedule PlateauSchedule::from_json(const nlohmann::json& j) {
  PlateauSchedule s(j.at("lr").get<double>(), j.at("patience_lr").get<int>(), j.at("patience_stop").get<int>(),
                    j.at("decay").get<double>());
  s.since_improve_ = j.at("since_improve").get<int>();
  s.since_decay_ = j.at("since_decay").get<int>();
  if (!j.at("best").is_null()) s.best_ = j.at("best").get<double>();
  return s;
}

namespace {

constexpr char kOptMagic[4] = {'F', 'S', 'Q', 'O'};
constexpr std::uint32_t kOptVersion = 1;

nlohmann::json history_json(const std::vector<EpochMetrics>& h) {
  auto arr = nlohmann::json::array();
  for (const auto& m : h) {
    arr.push_back({m.epoch, m.loss, m.val_metric, m.lr, m.batches, m.improved, m.decayed});
  }
  return arr;
}

std::vector<EpochMetrics> history_from_json(const nlohmann::json& arr) {
  std::vector<EpochMetrics> h;
  for (const auto& a : arr) {
    h.push_back({a[0].get<int>(), a[1].get<double>(), a[2].get<double>(), a[3].get<double>(),
                 a[4].get<std::size_t>(), a[5].get<bool>(), a[6].get<bool>()});
  }
  return h;
}

std::string format_epoch_line(const EpochMetrics& m) {
  char buf[160];
  std::snprintf(buf, sizeof buf, "%d\t%.9g\t%.9g\t%.9g\t%zu\n", m.epoch, m.loss, m.val_metric, m.lr, m.batches);
  return buf;
}

}  // namespace

template <class Scalar>
void save_checkpoint(const TrainState<Scalar>& st, const std::string& path) {
  save_params(st.params, path);
  std::ostringstream rng_text;
  rng_text << st.rng.engine();
  const nlohmann::json meta{{"schedule", st.schedule.to_json()},
                            {"rng", rng_text.str()},
                            {"next_epoch", st.next_epoch},
                            {"finished", st.finished},
                            {"best_epoch", st.best_epoch},
                            {"adam", {{"step", st.adam.step}, {"beta1", st.adam.beta1}, {"beta2", st.adam.beta2},
                                      {"eps", st.adam.eps}}},
                            {"history", history_json(st.history)}};
  binary::Writer w;
  w.put_bytes({reinterpret_cast<const std::uint8_t*>(kOptMagic), 4});
  w.put(kOptVersion);
  w.put_string(meta.dump());
  for (const auto* p : {&st.adam.m, &st.adam.v, &st.best}) {
    const auto bytes = serialize_params(*p);
    w.put(static_cast<std::uint64_t>(bytes.size()));
    w.put_bytes(bytes);
  }
  binary::write_file_atomic(path + ".opt", w.bytes());
}

template <class Scalar>
TrainState<Scalar> load_checkpoint(const std::string& path) {
  TrainState<Scalar> st;
  st.params = load_params<Scalar>(path);
  const auto bytes = binary::read_file(path + ".opt");
  binary::Reader r(bytes, ErrorCode::kCorruptModelFile);
  const auto magic = r.get_bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kOptMagic) || r.get<std::uint32_t>() != kOptVersion) {
    fail(ErrorCode::kCorruptModelFile, "not an optimizer sidecar: " + path + ".opt");
  }
  try {
    const auto meta = nlohmann::json::parse(r.get_string());
    st.schedule = PlateauSchedule::from_json(meta.at("schedule"));
    std::istringstream rng_text(meta.at("rng").get<std::string>());
    rng_text >> st.rng.engine();
    st.next_epoch = meta.at("next_epoch").get<int>();
    st.finished = meta.at("finished").get<bool>();
    st.best_epoch = meta.at("best_epoch").get<int>();
    const auto& adam = meta.at("adam");
    st.adam.step = adam.at("step").get<std::int64_t>();
    st.adam.beta1 = adam.at("beta1").get<double>();
    st.adam.beta2 = adam.at("beta2").get<double>();
    st.adam.eps = adam.at("eps").get<double>();
    st.history = history_from_json(meta.at("history"));
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kCorruptModelFile, std::string("optimizer sidecar: ") + e.what());
  }
  for (auto* p : {&st.adam.m, &st.adam.v, &st.best}) {
    const auto n = r.get<std::uint64_t>();
    *p = deserialize_params<Scalar>(r.get_bytes(n), &st.params.config);
  }
  return st;
}

template <class Scalar>
TrainState<Scalar> initial_train_state(ModelParams<Scalar> init, const TrainConfig& cfg) {
  cfg.check();
  TrainState<Scalar> st;
  st.adam = AdamState<Scalar>::zeros(init.config);
  st.best = init;
  st.params = std::move(init);
  st.schedule = PlateauSchedule(cfg.lr, cfg.patience_lr, cfg.patience_stop, cfg.lr_decay);
  st.rng = Rng(cfg.seed);
  return st;
}

template <class Scalar>
TrainResult<Scalar> train(TrainState<Scalar>& st, const SequenceStore& fraud, const SequenceStore& nonfraud,
                          const TrainConfig& cfg, const Validator<Scalar>& validate, const TrainHooks& hooks) {
  cfg.check();
  if (fraud.empty()) fail(ErrorCode::kNoFraudCards, "fraud store is empty");
  std::ofstream log;
  if (!cfg.metrics_log.empty()) {
    const bool resume = st.next_epoch > 0;
    log.open(cfg.metrics_log, resume ? std::ios::app : std::ios::trunc);
    if (!log) fail(ErrorCode::kIo, "cannot open " + cfg.metrics_log);
    if (!resume) log << "epoch\tloss\tval_metric\tlr\tbatches\n";
  }

  int ran = 0;
  while (!st.finished && st.next_epoch < cfg.max_epochs) {
    const int epoch = st.next_epoch;
    auto cards = sample_epoch(fraud, nonfraud, cfg, st.rng);
    EpochBatcher batcher(fraud, nonfraud, std::move(cards), cfg, st.rng);
    BoundedQueue<Batch> queue(cfg.queue_capacity);
    std::exception_ptr producer_error;
    std::thread producer([&] {
      try {
        while (auto b = batcher.next()) {
          if (!queue.push(std::move(*b))) break;
        }
      } catch (...) {
        producer_error = std::current_exception();
      }
      queue.close();
    });

    double loss_sum = 0;
    std::size_t batches = 0;
    try {
      while (auto b = queue.pop()) {
        if (b->scorable_events() == 0) continue;
        if (hooks.on_batch) hooks.on_batch(*b);
        const auto g = batch_gradient(st.params, *b);
        adam_step(st.params, g.grads, st.adam, st.schedule.lr());
        loss_sum += g.loss;
        ++batches;
      }
    } catch (...) {
      queue.close();
      producer.join();
      throw;
    }
    producer.join();
    if (producer_error) std::rethrow_exception(producer_error);

    EpochMetrics m;
    m.epoch = epoch;
    m.loss = batches ? loss_sum / static_cast<double>(batches) : 0.0;
    m.lr = st.schedule.lr();
    m.batches = batches;
    m.val_metric = validate(st.params, epoch);
    const auto step = st.schedule.observe(m.val_metric);
    m.improved = step.improved;
    m.decayed = step.decayed;
    if (step.improved) {
      st.best = st.params;
      st.best_epoch = epoch;
    }
    st.history.push_back(m);
    st.next_epoch = epoch + 1;
    st.finished = step.stop;

    if (log) log << format_epoch_line(m) << std::flush;
    if (hooks.on_epoch) hooks.on_epoch(m);
    if (!cfg.checkpoint_path.empty()) save_checkpoint(st, cfg.checkpoint_path);
    if (hooks.stop_after_epochs >= 0 && ++ran >= hooks.stop_after_epochs) break;
  }
  return {st.best, st.best_epoch, st.history, st.finished};
}

#define FRAUDSEQ_INSTANTIATE(S)                                                                                  \
  template void adam_step<S>(ModelParams<S>&, const ModelParams<S>&, AdamState<S>&, double);                     \
  template BatchGradient<S> batch_gradient<S>(const ModelParams<S>&, const Batch&);                              \
  template void save_checkpoint<S>(const TrainState<S>&, const std::string&);                                    \
  template TrainState<S> load_checkpoint<S>(const std::string&);                                                 \
  template TrainState<S> initial_train_state<S>(ModelParams<S>, const TrainConfig&);                             \
  template TrainResult<S> train<S>(TrainState<S>&, const SequenceStore&, const SequenceStore&, const TrainConfig&, \
                                   const Validator<S>&, const TrainHooks&);

FRAUDSEQ_INSTANTIATE(float)
FRAUDSEQ_INSTANTIATE(double)

}  // namespace fraudseq
