#include "cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <fstream>
#include <iomanip>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

#include <nlohmann/json.hpp>

#include "fraudseq/batch_inference.hpp"
#include "fraudseq/experiment.hpp"
#include "fraudseq/model_io.hpp"
#include "fraudseq/pipeline.hpp"
#include "fraudseq/sequence_store.hpp"
#include "fraudseq/state_store.hpp"
#include "fraudseq/stream_engine.hpp"
#include "fraudseq/synth.hpp"
#include "fraudseq/trainer.hpp"

namespace fraudseq::cli {

namespace {

using nlohmann::json;

json read_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::kIo, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::kInvalidConfig, path + ": " + e.what());
  }
}

/// A config section, or an empty object when the file or the key is absent.
json section(const std::string& path, const char* key) {
  if (path.empty()) return json::object();
  const auto j = read_json(path);
  if (!j.is_object()) fail(ErrorCode::kInvalidConfig, path + " is not a JSON object");
  const auto it = j.find(key);
  return it == j.end() ? json::object() : *it;
}

template <class T>
void override_if(const CLI::Option* opt, T& field, const T& value) {
  if (opt->count() > 0) field = value;
}

unsigned default_threads() { return std::max(1u, std::thread::hardware_concurrency()); }

Precision model_precision(const std::string& model_path) { return peek_model_config(model_path).precision; }

// gen ------------------------------------------------------------------------

struct GenArgs {
  std::string config, out, schema_out;
  std::uint64_t seed = 1;
  int entities = 0;
  double days = 0, fraud_ratio = 0, camouflage = 0, nonscorable = 0;
  CLI::Option *seed_opt, *entities_opt, *days_opt, *ratio_opt, *camo_opt, *nonscorable_opt;
};

void add_gen(CLI::App& app, GenArgs& a) {
  auto* sub = app.add_subcommand("gen", "Generate a synthetic card-transaction stream");
  sub->add_option("--config", a.config, "JSON file with a \"gen\" section")->check(CLI::ExistingFile);
  sub->add_option("--out", a.out, "Event file (JSON lines)")->required();
  sub->add_option("--schema-out", a.schema_out, "Schema file")->required();
  a.seed_opt = sub->add_option("--seed", a.seed, "Random seed");
  a.entities_opt = sub->add_option("--entities", a.entities, "Number of cards");
  a.days_opt = sub->add_option("--days", a.days, "Length of the period in days");
  a.ratio_opt = sub->add_option("--fraud-ratio", a.fraud_ratio, "Fraud to legitimate event ratio");
  a.camo_opt = sub->add_option("--camouflage", a.camouflage, "Fraction of camouflaged fraud cards");
  a.nonscorable_opt = sub->add_option("--nonscorable", a.nonscorable, "Fraction of non-scorable legitimate events");
}

int run_gen(const GenArgs& a, std::ostream& out) {
  auto cfg = GenConfig::from_json(section(a.config, "gen"));
  override_if(a.seed_opt, cfg.seed, a.seed);
  override_if(a.entities_opt, cfg.n_entities, a.entities);
  override_if(a.days_opt, cfg.period_days, a.days);
  override_if(a.ratio_opt, cfg.fraud_ratio, a.fraud_ratio);
  override_if(a.camo_opt, cfg.camouflage_fraction, a.camouflage);
  override_if(a.nonscorable_opt, cfg.nonscorable_fraction, a.nonscorable);
  cfg.check();
  const auto schema = synth_schema(cfg);
  const auto events = generate(cfg);
  save_schema(schema, a.schema_out);
  write_events(events, schema, a.out);
  const auto st = summarize(events);
  out << "events=" << st.events << "\nfraud_events=" << st.fraud_events << "\nlegit_events=" << st.legit_events
      << "\nfraud_cards=" << st.fraud_cards << "\nnonscorable=" << st.nonscorable << "\n";
  return 0;
}

// prep -----------------------------------------------------------------------

struct PrepFitArgs {
  std::string schema, events, out;
  double train_frac = 0.6;
  std::optional<TimestampMs> train_end;
  PipelineConfig cfg;
};

struct PrepApplyArgs {
  std::string pipeline, events, out;
};

void add_prep(CLI::App& app, PrepFitArgs& f, PrepApplyArgs& a) {
  auto* prep = app.add_subcommand("prep", "Fit or apply the feature pipeline");
  prep->require_subcommand(1);
  auto* fit = prep->add_subcommand("fit", "Fit transforms on the training period");
  fit->add_option("--schema", f.schema, "Schema file")->required()->check(CLI::ExistingFile);
  fit->add_option("--events", f.events, "Event file")->required()->check(CLI::ExistingFile);
  fit->add_option("--out", f.out, "Pipeline file")->required();
  fit->add_option("--train-frac", f.train_frac, "Leading fraction of the time span used for fitting")
      ->capture_default_str();
  fit->add_option("--train-end", f.train_end, "Fit on events before this timestamp (ms); overrides --train-frac");
  fit->add_option("--clip", f.cfg.clip, "Z-score clip")->capture_default_str();
  fit->add_option("--min-occurrences", f.cfg.min_occurrences, "Rarer categories share one index")
      ->capture_default_str();
  fit->add_option("--embedding-cap", f.cfg.embedding_cap, "Largest categorical vocabulary")->capture_default_str();

  auto* apply = prep->add_subcommand("apply", "Write the feature vector of every event");
  apply->add_option("--pipeline", a.pipeline, "Pipeline file")->required()->check(CLI::ExistingFile);
  apply->add_option("--events", a.events, "Event file")->required()->check(CLI::ExistingFile);
  apply->add_option("--out", a.out, "Feature file (JSON lines)")->required();
}

int run_prep_fit(const PrepFitArgs& a, std::ostream& out) {
  const auto schema = load_schema(a.schema);
  const auto events = read_events(a.events, schema);
  const TimestampMs end = a.train_end ? *a.train_end : split_period(events, a.train_frac, 0).train_end;
  std::vector<RawEvent> train;
  for (const auto& e : events) {
    if (e.ts() < end) train.push_back(e);
  }
  const auto p = FittedPipeline::fit(train, schema, a.cfg);
  p.save(a.out);
  out << "train_end=" << end << "\ntrain_events=" << train.size() << "\ndense_dim=" << p.dense_dim()
      << "\ncategoricals=" << p.cat_cardinalities().size() << "\n";
  return 0;
}

int run_prep_apply(const PrepApplyArgs& a, std::ostream&) {
  const auto p = FittedPipeline::load(a.pipeline);
  const auto events = read_events(a.events, p.schema());
  std::ofstream f(a.out);
  if (!f) fail(ErrorCode::kIo, "cannot write " + a.out);
  std::unordered_map<std::string, TimestampMs> last;
  for (const auto& e : events) {
    const auto it = last.find(e.entity_id);
    const auto fv = p.apply(e, it == last.end() ? std::nullopt : std::optional<TimestampMs>(it->second));
    last[e.entity_id] = e.ts();
    f << json{{"event_id", e.event_id}, {"dense", fv.dense}, {"cat", fv.cat_indices}}.dump() << "\n";
  }
  if (!f) fail(ErrorCode::kIo, "write failed: " + a.out);
  return 0;
}

// build-seq ------------------------------------------------------------------

struct BuildSeqArgs {
  std::string pipeline, events, out;
};

void add_build_seq(CLI::App& app, BuildSeqArgs& a) {
  auto* sub = app.add_subcommand("build-seq", "Group events into per-card sequences");
  sub->add_option("--pipeline", a.pipeline, "Pipeline file")->required()->check(CLI::ExistingFile);
  sub->add_option("--events", a.events, "Event file")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", a.out, "Sequence file")->required();
}

int run_build_seq(const BuildSeqArgs& a, std::ostream& out) {
  const auto p = FittedPipeline::load(a.pipeline);
  const auto events = read_events(a.events, p.schema());
  const auto store = build_sequences(events, p);
  store.save(a.out);
  out << "sequences=" << store.size() << "\nevents=" << store.total_events() << "\n";
  return 0;
}

// train ----------------------------------------------------------------------

struct TrainArgs {
  std::string pipeline, sequences, out, config, checkpoint, metrics_log, precision;
  std::uint64_t seed = 1;
  int epochs = 0, batch_cards = 0, cutoff = 0;
  double lr = 0, train_frac = 0.6, val_frac = 0.2;
  unsigned threads = 0;
  bool resume = false;
  CLI::Option *seed_opt, *epochs_opt, *batch_opt, *cutoff_opt, *lr_opt, *precision_opt;
};

void add_train(CLI::App& app, TrainArgs& a) {
  auto* sub = app.add_subcommand("train", "Train the recurrent model");
  sub->add_option("--pipeline", a.pipeline, "Pipeline file")->required()->check(CLI::ExistingFile);
  sub->add_option("--sequences", a.sequences, "Sequence file")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", a.out, "Model file (best epoch)")->required();
  sub->add_option("--config", a.config, "JSON file with \"train\" and \"arch\" sections")->check(CLI::ExistingFile);
  sub->add_option("--train-frac", a.train_frac, "Training share of the time span")->capture_default_str();
  sub->add_option("--val-frac", a.val_frac, "Validation share of the time span")->capture_default_str();
  sub->add_option("--checkpoint", a.checkpoint, "Checkpoint path, written every epoch");
  sub->add_flag("--resume", a.resume, "Continue from --checkpoint");
  sub->add_option("--metrics-log", a.metrics_log, "Per-epoch JSON lines");
  sub->add_option("--threads", a.threads, "Validation threads (default: all)");
  a.seed_opt = sub->add_option("--seed", a.seed, "Random seed");
  a.epochs_opt = sub->add_option("--epochs", a.epochs, "Maximum epochs");
  a.batch_opt = sub->add_option("--batch-cards", a.batch_cards, "Cards per batch");
  a.cutoff_opt = sub->add_option("--cutoff", a.cutoff, "Most recent events kept per card");
  a.lr_opt = sub->add_option("--lr", a.lr, "Initial learning rate");
  a.precision_opt =
      sub->add_option("--precision", a.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
}

template <class Scalar>
void train_typed(const TrainArgs& a, const FittedPipeline& p, const SequenceStore& full, const ArchConfig& arch,
                 const TrainConfig& cfg, std::ostream& out) {
  const auto split = split_period(full, a.train_frac, a.val_frac);
  const auto sets = training_sets(full, split);
  auto st = a.resume ? load_checkpoint<Scalar>(cfg.checkpoint_path)
                     : initial_train_state(init_params<Scalar>(model_config_for(p, arch), cfg.seed), cfg);
  const unsigned threads = a.threads ? a.threads : default_threads();
  const auto res = train<Scalar>(st, sets.fraud, sets.nonfraud, cfg,
                                 make_validator<Scalar>(full, split, cfg.target_precision, threads));
  save_params(res.best, a.out);
  const double best = res.best_epoch >= 0 ? res.history[res.best_epoch].val_metric : 0.0;
  out << "epochs=" << res.history.size() << "\nbest_epoch=" << res.best_epoch << "\nbest_val_metric=" << best
      << "\nearly_stopped=" << (res.early_stopped ? 1 : 0) << "\ntrain_end=" << split.train_end
      << "\nval_end=" << split.val_end << "\n";
}

int run_train(const TrainArgs& a, std::ostream& out) {
  auto cfg = TrainConfig::from_json(section(a.config, "train"));
  auto arch = ArchConfig::from_json(section(a.config, "arch"));
  override_if(a.seed_opt, cfg.seed, a.seed);
  override_if(a.epochs_opt, cfg.max_epochs, a.epochs);
  override_if(a.batch_opt, cfg.batch_cards, a.batch_cards);
  override_if(a.cutoff_opt, cfg.cutoff, a.cutoff);
  override_if(a.lr_opt, cfg.lr, a.lr);
  if (a.precision_opt->count()) arch.precision = a.precision == "f32" ? Precision::kF32 : Precision::kF64;
  if (!a.checkpoint.empty()) cfg.checkpoint_path = a.checkpoint;
  if (!a.metrics_log.empty()) cfg.metrics_log = a.metrics_log;
  if (a.resume && cfg.checkpoint_path.empty()) fail(ErrorCode::kInvalidConfig, "--resume needs --checkpoint");
  cfg.check();

  const auto p = FittedPipeline::load(a.pipeline);
  const auto full = SequenceStore::load(a.sequences);
  if (full.schema_hash() != p.schema_hash()) fail(ErrorCode::kSchemaMismatch, "sequences and pipeline differ");
  if (arch.precision == Precision::kF32) {
    train_typed<float>(a, p, full, arch, cfg, out);
  } else {
    train_typed<double>(a, p, full, arch, cfg, out);
  }
  return 0;
}

// score-batch ----------------------------------------------------------------

struct ScoreBatchArgs {
  std::string model, sequences, out;
  TimestampMs from = std::numeric_limits<TimestampMs>::min();
  TimestampMs to = std::numeric_limits<TimestampMs>::max();
  std::size_t budget = kDefaultEventBudget;
  unsigned threads = 0;
};

void add_score_batch(CLI::App& app, ScoreBatchArgs& a) {
  auto* sub = app.add_subcommand("score-batch", "Score every scorable event with its full history");
  sub->add_option("--model", a.model, "Model file")->required()->check(CLI::ExistingFile);
  sub->add_option("--sequences", a.sequences, "Sequence file")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", a.out, "Score file")->required();
  sub->add_option("--from", a.from, "Only events at or after this timestamp (ms)");
  sub->add_option("--to", a.to, "Only events before this timestamp (ms)");
  sub->add_option("--budget", a.budget, "Padded events per batch")->capture_default_str();
  sub->add_option("--threads", a.threads, "Worker threads (default: all)");
}

template <class Scalar>
std::vector<ScoreRecord> score_batch_typed(const ScoreBatchArgs& a, const SequenceStore& store) {
  const auto p = load_params<Scalar>(a.model);
  if (p.config.schema_hash != store.schema_hash()) fail(ErrorCode::kSchemaMismatch, "model and sequences differ");
  const auto sorted = sort_by_length_desc(store);
  return score_all(plan_batches(sorted, a.budget), sorted, p, {a.from, a.to}, a.threads ? a.threads : default_threads());
}

int run_score_batch(const ScoreBatchArgs& a, std::ostream& out) {
  const auto store = SequenceStore::load(a.sequences);
  const auto scores = model_precision(a.model) == Precision::kF32 ? score_batch_typed<float>(a, store)
                                                                  : score_batch_typed<double>(a, store);
  write_scores(a.out, scores);
  out << "scored=" << scores.size() << "\n";
  return 0;
}

// serve and bench ------------------------------------------------------------

struct EngineArgs {
  std::string pipeline, model, state, config;
  double threshold = 0.5;
  unsigned lanes = 0;
  std::size_t cache = 15000;
  double ttl_days = 90;
  std::uint64_t max_bytes = 1ull << 30;
  int write_delay_ms = 0;
  bool no_fsync = false;
  CLI::Option *threshold_opt, *lanes_opt, *cache_opt, *ttl_opt, *max_bytes_opt, *delay_opt;
};

void add_engine_options(CLI::App* sub, EngineArgs& a) {
  sub->add_option("--pipeline", a.pipeline, "Pipeline file")->required()->check(CLI::ExistingFile);
  sub->add_option("--model", a.model, "Model file")->required()->check(CLI::ExistingFile);
  sub->add_option("--state", a.state, "State store log")->required();
  sub->add_option("--config", a.config, "JSON file with a \"stream\" section")->check(CLI::ExistingFile);
  a.threshold_opt = sub->add_option("--threshold", a.threshold, "Block iff score >= threshold");
  a.lanes_opt = sub->add_option("--lanes", a.lanes, "Scoring lanes (default: all hardware threads)");
  a.cache_opt = sub->add_option("--cache", a.cache, "Cached card states");
  a.ttl_opt = sub->add_option("--ttl-days", a.ttl_days, "Card state time to live");
  a.max_bytes_opt = sub->add_option("--max-bytes", a.max_bytes, "State store size budget");
  a.delay_opt = sub->add_option("--write-delay-ms", a.write_delay_ms, "Extra delay per write-behind batch");
  sub->add_flag("--no-fsync", a.no_fsync, "Skip fdatasync on state writes");
}

StreamConfig stream_config(const EngineArgs& a) {
  StreamConfig c;
  for (const auto& [key, v] : section(a.config, "stream").items()) {
    if (key == "threshold") c.threshold = v.get<double>();
    else if (key == "cache_capacity") c.cache_capacity = v.get<std::size_t>();
    else if (key == "lanes") c.lanes = v.get<unsigned>();
    else if (key == "lane_queue_capacity") c.lane_queue_capacity = v.get<std::size_t>();
    else if (key == "write_queue_capacity") c.write_queue_capacity = v.get<std::size_t>();
    else if (key == "write_batch") c.write_batch = v.get<std::size_t>();
    else if (key == "write_delay_ms") c.write_delay = std::chrono::milliseconds(v.get<int>());
    else if (key == "ttl_days") c.ttl = std::chrono::milliseconds(static_cast<std::int64_t>(v.get<double>() * 86400000.0));
    else if (key == "max_bytes") c.max_bytes = v.get<std::uint64_t>();
    else fail(ErrorCode::kInvalidConfig, "unknown stream config key: " + key);
  }
  override_if(a.threshold_opt, c.threshold, a.threshold);
  override_if(a.lanes_opt, c.lanes, a.lanes);
  override_if(a.cache_opt, c.cache_capacity, a.cache);
  override_if(a.max_bytes_opt, c.max_bytes, a.max_bytes);
  if (a.ttl_opt->count()) c.ttl = std::chrono::milliseconds(static_cast<std::int64_t>(a.ttl_days * 86400000.0));
  if (a.delay_opt->count()) c.write_delay = std::chrono::milliseconds(a.write_delay_ms);
  return c;
}

StateStoreConfig store_config(bool no_fsync) {
  auto c = entity_store_config();
  c.fsync = !no_fsync;
  return c;
}

struct ServeArgs {
  EngineArgs engine;
  std::string events, out, decisions;
  std::int64_t expire_every = 0;
};

void add_serve(CLI::App& app, ServeArgs& a) {
  auto* sub = app.add_subcommand("serve", "Score an event stream in real time against the state store");
  add_engine_options(sub, a.engine);
  sub->add_option("--events", a.events, "Event file, in arrival order")->required()->check(CLI::ExistingFile);
  sub->add_option("--out", a.out, "Score file (scorable events)")->required();
  sub->add_option("--decisions", a.decisions, "Also write event_id, score and decision for every event");
  sub->add_option("--expire-every", a.expire_every, "Run expiry every N events, at the latest event time");
}

template <class Scalar>
int serve_typed(const ServeArgs& a, const FittedPipeline& p, std::ostream& out) {
  const auto params = load_params<Scalar>(a.engine.model);
  const auto events = read_events(a.events, p.schema());
  StateStore store(a.engine.state, store_config(a.engine.no_fsync));
  StreamEngine<Scalar> engine(p, params, store, stream_config(a.engine));

  // a restarted server resumes after the last durable event
  const std::size_t from = std::min<std::uint64_t>(engine.watermark(), events.size());
  std::vector<StreamResult> results;
  std::mutex mu;
  engine.set_sink([&](const StreamResult& r) {
    std::lock_guard lock(mu);
    results.push_back(r);
  });
  TimestampMs latest = std::numeric_limits<TimestampMs>::min();
  std::size_t expired = 0;
  for (std::size_t i = from; i < events.size(); ++i) {
    latest = std::max(latest, events[i].ts());
    engine.submit(events[i]);
    if (a.expire_every > 0 && (i + 1) % static_cast<std::size_t>(a.expire_every) == 0) {
      engine.drain();
      expired += engine.expiry_tick(latest);
    }
  }
  engine.drain();
  engine.flush_writer();
  std::sort(results.begin(), results.end(), [](const auto& x, const auto& y) { return x.ordinal < y.ordinal; });

  std::vector<ScoreRecord> scores;
  std::size_t blocked = 0, duplicates = 0;
  for (const auto& r : results) {
    if (r.duplicate) {
      ++duplicates;
      continue;
    }
    blocked += r.decision;
    if (r.scorable) scores.push_back({r.event_id, r.entity_id, r.ts, r.score});
  }
  write_scores(a.out, scores);
  if (!a.decisions.empty()) {
    std::ofstream f(a.decisions);
    if (!f) fail(ErrorCode::kIo, "cannot write " + a.decisions);
    for (const auto& r : results) {
      if (r.duplicate) continue;
      f << r.event_id << '\t' << format_score(r.score) << '\t' << (r.decision ? "block" : "pass") << '\n';
    }
  }
  out << "resumed_from=" << from << "\nevents=" << results.size() - duplicates << "\nduplicates=" << duplicates
      << "\nscored=" << scores.size() << "\nblocked=" << blocked << "\nexpired=" << expired
      << "\nwatermark=" << engine.watermark() << "\n";
  return 0;
}

int run_serve(const ServeArgs& a, std::ostream& out) {
  const auto p = FittedPipeline::load(a.engine.pipeline);
  return model_precision(a.engine.model) == Precision::kF32 ? serve_typed<float>(a, p, out)
                                                             : serve_typed<double>(a, p, out);
}

struct BenchArgs {
  EngineArgs engine;
  std::string events;
  double rate = 500, duration_s = 60;
  std::size_t max_backlog = 5000;
};

void add_bench(CLI::App& app, BenchArgs& a) {
  auto* sub = app.add_subcommand("bench", "Inject events at a fixed rate and report latency percentiles");
  add_engine_options(sub, a.engine);
  sub->add_option("--events", a.events, "Source events, replayed shifted in time when exhausted")
      ->required()
      ->check(CLI::ExistingFile);
  sub->add_option("--rate", a.rate, "Events per second")->capture_default_str();
  sub->add_option("--duration", a.duration_s, "Seconds")->capture_default_str();
  sub->add_option("--max-backlog", a.max_backlog, "Unscored events tolerated")->capture_default_str();
}

template <class Scalar>
int bench_typed(const BenchArgs& a, const FittedPipeline& p, std::ostream& out) {
  const auto params = load_params<Scalar>(a.engine.model);
  const auto events = read_events(a.events, p.schema());
  StateStore store(a.engine.state, store_config(a.engine.no_fsync));
  StreamEngine<Scalar> engine(p, params, store, stream_config(a.engine));
  BenchConfig cfg;
  cfg.rate = a.rate;
  cfg.duration = std::chrono::milliseconds(static_cast<std::int64_t>(a.duration_s * 1000));
  cfg.max_backlog = a.max_backlog;
  out << format_bench_report(run_bench(engine, events, cfg));
  return 0;
}

int run_bench_cmd(const BenchArgs& a, std::ostream& out) {
  const auto p = FittedPipeline::load(a.engine.pipeline);
  return model_precision(a.engine.model) == Precision::kF32 ? bench_typed<float>(a, p, out)
                                                             : bench_typed<double>(a, p, out);
}

// eval -----------------------------------------------------------------------

struct EvalArgs {
  std::string scores, events, schema, amount_field = "amount";
  double target = 0.15;
  int alerts_per_day = 5000;
  std::optional<double> threshold;
};

void add_eval(CLI::App& app, EvalArgs& a) {
  auto* sub = app.add_subcommand("eval", "Business metrics of a score file");
  sub->add_option("--scores", a.scores, "Score file")->required()->check(CLI::ExistingFile);
  sub->add_option("--events", a.events, "Labelled event file")->required()->check(CLI::ExistingFile);
  sub->add_option("--schema", a.schema, "Schema of the event file")->required()->check(CLI::ExistingFile);
  sub->add_option("--amount-field", a.amount_field, "Numerical holding the amount")->capture_default_str();
  sub->add_option("--target-precision", a.target, "Operating point")->capture_default_str();
  sub->add_option("--threshold", a.threshold, "Fixed threshold instead of the operating point");
  sub->add_option("--alerts-per-day", a.alerts_per_day, "Card alert budget")->capture_default_str();
}

std::string fmt(double v) {
  std::ostringstream s;
  s << std::setprecision(9) << v;
  return s.str();
}

int run_eval(const EvalArgs& a, std::ostream& out) {
  const auto schema = load_schema(a.schema);
  const auto events = read_events(a.events, schema);
  const auto scored = join_scores(read_scores(a.scores), facts_from_events(events, a.amount_field));
  std::size_t fraud = 0;
  for (const auto& s : scored) fraud += s.label;
  out << "events=" << scored.size() << "\nfraud_events=" << fraud << "\n";

  double threshold;
  if (a.threshold) {
    threshold = *a.threshold;
  } else {
    try {
      const auto r = recall_at_precision(scored, a.target);
      threshold = r.threshold;
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kUnachievablePrecision) throw;
      threshold = 1.0;
      out << "# target precision unreachable; reporting at threshold 1\n";
    }
  }
  std::size_t tp = 0, flagged = 0;
  for (const auto& s : scored) {
    if (s.score < threshold) continue;
    ++flagged;
    tp += s.label;
  }
  const auto money = money_recall(scored, threshold);
  out << "target_precision=" << fmt(a.target) << "\nthreshold=" << fmt(threshold)
      << "\nprecision=" << fmt(flagged ? static_cast<double>(tp) / flagged : 0.0)
      << "\nrecall=" << fmt(fraud ? static_cast<double>(tp) / fraud : 0.0) << "\nfp_rate=" << fmt(fp_rate(scored, threshold))
      << "\nmoney_recall=" << fmt(money.recall) << "\nmoney_caught=" << fmt(money.caught)
      << "\nmoney_total=" << fmt(money.total) << "\nalerts_per_day=" << a.alerts_per_day
      << "\ncard_recall=" << fmt(card_recall_at_alert_budget(scored, a.alerts_per_day)) << "\n";
  return 0;
}

// expire and compact ---------------------------------------------------------

struct ExpireArgs {
  std::string state;
  TimestampMs now = 0;
  double ttl_days = 90;
  std::uint64_t max_bytes = 1ull << 30;
};

void add_expire(CLI::App& app, ExpireArgs& a) {
  auto* sub = app.add_subcommand("expire", "Delete stale card states and enforce the size budget");
  sub->add_option("--state", a.state, "State store log")->required()->check(CLI::ExistingFile);
  sub->add_option("--now", a.now, "Current time (ms)")->required();
  sub->add_option("--ttl-days", a.ttl_days, "Time to live")->capture_default_str();
  sub->add_option("--max-bytes", a.max_bytes, "Size budget for live records")->capture_default_str();
}

int run_expire(const ExpireArgs& a, std::ostream& out) {
  StateStore store(a.state, entity_store_config());
  const auto n = store.expire(a.now, std::chrono::milliseconds(static_cast<std::int64_t>(a.ttl_days * 86400000.0)),
                              a.max_bytes);
  out << "evicted=" << n << "\nlive_keys=" << store.size() << "\nlive_bytes=" << store.live_bytes() << "\n";
  store.close();
  return 0;
}

struct CompactArgs {
  std::string state;
};

void add_compact(CLI::App& app, CompactArgs& a) {
  auto* sub = app.add_subcommand("compact", "Rewrite the state log with live records only");
  sub->add_option("--state", a.state, "State store log")->required()->check(CLI::ExistingFile);
}

int run_compact(const CompactArgs& a, std::ostream& out) {
  StateStore store(a.state, entity_store_config());
  const auto st = store.compact();
  out << "bytes_before=" << st.bytes_before << "\nbytes_after=" << st.bytes_after << "\nlive_keys=" << st.live_keys
      << "\n";
  store.close();
  return 0;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Sequence-based fraud scoring: data generation, training, batch and streaming inference"};
  app.name("fraudseq");
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  GenArgs gen;
  PrepFitArgs prep_fit;
  PrepApplyArgs prep_apply;
  BuildSeqArgs build_seq;
  TrainArgs train_args;
  ScoreBatchArgs score_batch;
  ServeArgs serve;
  BenchArgs bench;
  EvalArgs eval;
  ExpireArgs expire;
  CompactArgs compact;
  add_gen(app, gen);
  add_prep(app, prep_fit, prep_apply);
  add_build_seq(app, build_seq);
  add_train(app, train_args);
  add_score_batch(app, score_batch);
  add_serve(app, serve);
  add_bench(app, bench);
  add_eval(app, eval);
  add_expire(app, expire);
  add_compact(app, compact);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : kExitUsage;
  }

  try {
    const auto* cmd = app.get_subcommands().front();
    const std::string name = cmd->get_name();
    if (name == "gen") return run_gen(gen, out);
    if (name == "prep") {
      return cmd->got_subcommand("fit") ? run_prep_fit(prep_fit, out) : run_prep_apply(prep_apply, out);
    }
    if (name == "build-seq") return run_build_seq(build_seq, out);
    if (name == "train") return run_train(train_args, out);
    if (name == "score-batch") return run_score_batch(score_batch, out);
    if (name == "serve") return run_serve(serve, out);
    if (name == "bench") return run_bench_cmd(bench, out);
    if (name == "eval") return run_eval(eval, out);
    if (name == "expire") return run_expire(expire, out);
    if (name == "compact") return run_compact(compact, out);
    err << "unhandled command " << name << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << e.what() << "\n";
    return exit_code(e.code());
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitOther;
  }
}

}  // namespace fraudseq::cli
