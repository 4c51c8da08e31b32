#include <doctest.h>

#include <fstream>
#include <set>
#include <sstream>

#include "cli.hpp"
#include "test_util.hpp"

using namespace fraudseq;
using fraudseq::testing::TempDir;

namespace {

struct Run {
  int code;
  std::string out, err;
};

Run invoke(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("--help succeeds everywhere") {
  const std::vector<std::vector<std::string>> commands{
      {},         {"gen"},   {"prep"}, {"prep", "fit"}, {"prep", "apply"}, {"build-seq"}, {"train"},
      {"score-batch"}, {"serve"}, {"bench"}, {"eval"}, {"expire"}, {"compact"}};
  for (auto args : commands) {
    args.push_back("--help");
    const auto r = invoke(args);
    CAPTURE(args.size());
    CHECK(r.code == 0);
    CHECK(r.out.find("Usage") != std::string::npos);
  }
}

TEST_CASE("usage errors exit 2") {
  CHECK(invoke({"frobnicate"}).code == cli::kExitUsage);
  CHECK(invoke({}).code == cli::kExitUsage);
  CHECK(invoke({"prep"}).code == cli::kExitUsage);
  CHECK(invoke({"gen", "--out", "x"}).code == cli::kExitUsage);
  CHECK(invoke({"gen", "--out", "x", "--schema-out", "y", "--seed", "abc"}).code == cli::kExitUsage);
  const auto r = invoke({"frobnicate"});
  CHECK(r.err.find("Usage") != std::string::npos);
}

TEST_CASE("each error class has its own exit code") {
  std::set<int> codes;
  for (int c = 0; c <= static_cast<int>(ErrorCode::kIo); ++c) {
    const int code = cli::exit_code(static_cast<ErrorCode>(c));
    CHECK(code > cli::kExitUsage);
    CHECK(code < 256);
    codes.insert(code);
  }
  CHECK(codes.size() == static_cast<std::size_t>(ErrorCode::kIo) + 1);

  TempDir dir;
  const auto bogus = dir.file("bogus.log");
  std::ofstream(bogus) << "not a state log at all";
  CHECK(invoke({"compact", "--state", bogus}).code == cli::exit_code(ErrorCode::kUnreadableLog));
  const auto cfg = dir.file("gen.json");
  std::ofstream(cfg) << R"({"gen": {"n_entities": -3}})";
  CHECK(invoke({"gen", "--config", cfg, "--out", dir.file("e"), "--schema-out", dir.file("s")}).code ==
        cli::exit_code(ErrorCode::kInvalidConfig));
}

TEST_CASE("gen honours --seed and lets flags override the config file") {
  TempDir dir;
  const auto cfg = dir.file("gen.json");
  std::ofstream(cfg) << R"({"gen": {"n_entities": 20, "period_days": 5}})";
  auto gen = [&](const std::string& name, const std::string& seed, std::vector<std::string> extra = {}) {
    std::vector<std::string> args{"gen", "--config", cfg, "--out", dir.file(name), "--schema-out", dir.file("schema.json"),
                                  "--seed", seed};
    args.insert(args.end(), extra.begin(), extra.end());
    return invoke(args);
  };
  REQUIRE(gen("a", "7").code == 0);
  REQUIRE(gen("b", "7").code == 0);
  REQUIRE(gen("c", "8").code == 0);
  CHECK(slurp(dir.file("a")) == slurp(dir.file("b")));
  CHECK(slurp(dir.file("a")) != slurp(dir.file("c")));

  const auto events = read_events(dir.file("a"), load_schema(dir.file("schema.json")));
  std::set<std::string> cards;
  for (const auto& e : events) cards.insert(e.entity_id);
  CHECK(cards.size() <= 20);

  REQUIRE(gen("d", "7", {"--entities", "45"}).code == 0);
  cards.clear();
  for (const auto& e : read_events(dir.file("d"), load_schema(dir.file("schema.json")))) cards.insert(e.entity_id);
  CHECK(cards.size() > 20);
}

TEST_CASE("eval gives identical metrics on batch and streaming score files") {
  TempDir dir;
  auto f = [&](const char* name) { return dir.file(name); };
  auto ok = [](const Run& r) {
    INFO(r.err);
    REQUIRE(r.code == 0);
  };
  ok(invoke({"gen", "--out", f("ev.jsonl"), "--schema-out", f("schema.json"), "--entities", "120", "--days", "20",
          "--nonscorable", "0.3", "--seed", "3"}));
  ok(invoke({"prep", "fit", "--schema", f("schema.json"), "--events", f("ev.jsonl"), "--out", f("pipe.json")}));
  ok(invoke({"prep", "apply", "--pipeline", f("pipe.json"), "--events", f("ev.jsonl"), "--out", f("feat.jsonl")}));
  ok(invoke({"build-seq", "--pipeline", f("pipe.json"), "--events", f("ev.jsonl"), "--out", f("seq.bin")}));
  ok(invoke({"train", "--pipeline", f("pipe.json"), "--sequences", f("seq.bin"), "--out", f("model.bin"), "--epochs", "2",
          "--precision", "f64", "--seed", "5", "--threads", "1"}));
  ok(invoke({"score-batch", "--model", f("model.bin"), "--sequences", f("seq.bin"), "--out", f("batch.tsv")}));
  ok(invoke({"serve", "--pipeline", f("pipe.json"), "--model", f("model.bin"), "--state", f("state.log"), "--events",
          f("ev.jsonl"), "--out", f("stream.tsv"), "--lanes", "2", "--no-fsync"}));

  const std::vector<std::string> common{"--events", f("ev.jsonl"), "--schema", f("schema.json"), "--alerts-per-day", "3"};
  auto eval = [&](const std::string& scores, std::vector<std::string> extra) {
    std::vector<std::string> args{"eval", "--scores", scores};
    args.insert(args.end(), common.begin(), common.end());
    args.insert(args.end(), extra.begin(), extra.end());
    const auto r = invoke(args);
    REQUIRE(r.code == 0);
    return r.out;
  };
  for (const std::vector<std::string> extra : {std::vector<std::string>{}, {"--threshold", "0.02"}}) {
    const auto batch = eval(f("batch.tsv"), extra);
    const auto stream = eval(f("stream.tsv"), extra);
    CHECK(batch == stream);
    CHECK(batch.find("recall=") != std::string::npos);
    CHECK(batch.find("card_recall=") != std::string::npos);
  }

  // a second serve resumes after the persisted watermark and scores nothing
  const auto again = invoke({"serve", "--pipeline", f("pipe.json"), "--model", f("model.bin"), "--state", f("state.log"),
                          "--events", f("ev.jsonl"), "--out", f("again.tsv"), "--no-fsync"});
  REQUIRE(again.code == 0);
  CHECK(again.out.find("events=0\n") != std::string::npos);

  const auto c = invoke({"compact", "--state", f("state.log")});
  REQUIRE(c.code == 0);
  CHECK(c.out.find("live_keys=120") != std::string::npos);
  const auto x = invoke({"expire", "--state", f("state.log"), "--now", "4102444800000", "--ttl-days", "1"});
  REQUIRE(x.code == 0);
  CHECK(x.out.find("evicted=120") != std::string::npos);
}
