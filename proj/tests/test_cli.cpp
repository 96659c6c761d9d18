#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "decalign/cli.hpp"
#include "fixtures.hpp"

using namespace decalign;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

void spit(const fs::path& p, const std::string& text) {
  std::ofstream f(p, std::ios::binary);
  f << text;
}

// Scratch directory holding a translation-like task and a config for it.
struct Workspace {
  fs::path dir;

  explicit Workspace(const std::string& name, int examples = 24) {
    dir = fs::temp_directory_path() / ("decalign_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    TranslationTaskOptions o;
    o.examples = examples;
    auto task = make_translation_task(13, o);
    spit(dir / "model.json", tabular_lm_dump(*task.model));
    write_dataset_jsonl(dir / "data.jsonl", task.dataset, task.model->vocab());
  }
  ~Workspace() { fs::remove_all(dir); }

  fs::path config(const std::string& decoder, const std::string& extra = "", const std::string& file = "config.json") const {
    const std::string text = R"({"model": {"type": "tabular", "path": "model.json"},
      "dataset": "data.jsonl",
      "decoder": )" + decoder + R"(,
      "utility": {"type": "bleu"},
      "analysis": {"bootstrap": 300},
      "seed": 7)" + extra + "}";
    spit(dir / file, text);
    return dir / file;
  }
};

const char* kSampler = R"({"kind": "sample", "max_len": 8, "temperature": 0.8})";

}  // namespace

TEST_CASE("config errors name the offending field") {
  Workspace ws("errors", 4);
  auto expect = [&](const std::string& decoder, const std::string& extra, const std::string& needle) {
    std::ostringstream out, err;
    CHECK(cmd_decode(ws.config(decoder, extra), {}, out, err) == 2);
    INFO(err.str());
    CHECK(err.str().find(needle) != std::string::npos);
  };
  expect(R"({"kind": "beam", "bogus": 1})", "", "decoder.bogus");
  expect(R"({"kind": "teleport"})", "", "decoder.kind");
  expect(R"({"kind": "vgbs"})", "", "value");
  expect(R"({"kind": "beam", "num_beams": 0})", "", "decoder.num_beams");
  expect(R"({"kind": "beam"})", R"(, "value": {"type": "interpolated", "lambda": 2})", "value.lambda");
  expect(R"({"kind": "beam"})", R"(, "dataset": "nope.jsonl")", "");
  std::ostringstream out, err;
  CHECK(cmd_decode(ws.dir / "missing.json", {}, out, err) == 2);
  spit(ws.dir / "broken.json", "{");
  CHECK(cmd_decode(ws.dir / "broken.json", {}, out, err) == 2);
  try {
    parse_config(R"({"model": {"type": "tabular", "path": "absent.json"}, "dataset": "data.jsonl",
      "decoder": {"kind": "greedy"}, "utility": {"type": "exact_match"}})",
                 ws.dir);
    FAIL("expected a config error");
  } catch (const ConfigError& e) {
    CHECK(e.field() == "model.path");
  }
}

TEST_CASE("decode is byte-identical across runs and job counts") {
  Workspace ws("determinism");
  for (const char* decoder : {kSampler, R"({"kind": "beam", "max_len": 8, "num_beams": 3})"}) {
    const auto cfg = ws.config(decoder);
    std::ostringstream out, err;
    DecodeOptions a;
    a.out = ws.dir / "a";
    DecodeOptions b;
    b.out = ws.dir / "b";
    b.jobs = 4;
    DecodeOptions c = a;
    c.out = ws.dir / "c";
    REQUIRE(cmd_decode(cfg, a, out, err) == 0);
    REQUIRE(cmd_decode(cfg, b, out, err) == 0);
    REQUIRE(cmd_decode(cfg, c, out, err) == 0);
    const auto first = slurp(ws.dir / "a" / "results.jsonl");
    CHECK(first.size() > 0);
    CHECK(first == slurp(ws.dir / "b" / "results.jsonl"));
    CHECK(first == slurp(ws.dir / "c" / "results.jsonl"));
    CHECK(slurp(ws.dir / "a" / "summary.csv") == slurp(ws.dir / "b" / "summary.csv"));
    CHECK_FALSE(fs::exists(ws.dir / "a" / "results.jsonl.partial"));
    CHECK(read_results_file(ws.dir / "a" / "results.jsonl").size() == 24);
  }
}

TEST_CASE("seed override changes sampled outputs") {
  Workspace ws("seed");
  const auto cfg = ws.config(kSampler);
  std::ostringstream out, err;
  DecodeOptions a;
  a.out = ws.dir / "a";
  DecodeOptions b = a;
  b.out = ws.dir / "b";
  b.seed = 8;
  REQUIRE(cmd_decode(cfg, a, out, err) == 0);
  REQUIRE(cmd_decode(cfg, b, out, err) == 0);
  CHECK(slurp(ws.dir / "a" / "results.jsonl") != slurp(ws.dir / "b" / "results.jsonl"));
}

TEST_CASE("resume continues from a partial results file") {
  Workspace ws("resume");
  const auto cfg = ws.config(kSampler);
  std::ostringstream out, err;
  DecodeOptions fresh;
  fresh.out = ws.dir / "fresh";
  REQUIRE(cmd_decode(cfg, fresh, out, err) == 0);
  const auto full = slurp(ws.dir / "fresh" / "results.jsonl");
  auto records = read_results_file(ws.dir / "fresh" / "results.jsonl");

  fs::create_directories(ws.dir / "resumed");
  RunRecord stale = records[2];
  stale.params_digest = "0000000000000000";
  stale.utility = -5;
  std::string partial = record_to_json_line(records[0]) + "\n" + record_to_json_line(stale) + "\n" +
                        record_to_json_line(records[5]) + "\n" + R"({"id": "torn)";
  spit(ws.dir / "resumed" / "results.jsonl.partial", partial);
  DecodeOptions resumed;
  resumed.out = ws.dir / "resumed";
  resumed.resume = true;
  REQUIRE(cmd_decode(cfg, resumed, out, err) == 0);
  CHECK(slurp(ws.dir / "resumed" / "results.jsonl") == full);
}

TEST_CASE("oracle prints the argmaxes") {
  const fs::path dir = fs::temp_directory_path() / "decalign_cli_oracle";
  fs::remove_all(dir);
  fs::create_directories(dir);
  spit(dir / "model.json", tabular_lm_dump(fixtures::adversarial_lm()));
  spit(dir / "data.jsonl", R"({"id": "adv", "context": [], "reference": ["a", "</s>"]})" "\n");
  spit(dir / "config.json", R"({"model": {"type": "tabular", "path": "model.json"}, "dataset": "data.jsonl",
    "decoder": {"kind": "greedy", "max_len": 2}, "utility": {"type": "exact_match"}})");
  std::ostringstream out, err;
  REQUIRE(cmd_oracle(dir / "config.json", {}, out, err) == 0);
  CHECK(out.str().find("argmax_likelihood = \"b </s>\"") != std::string::npos);
  CHECK(out.str().find("argmax_utility = \"a </s>\"") != std::string::npos);
  CHECK(fs::exists(dir / "out" / "oracle.jsonl"));
  fs::remove_all(dir);
}

TEST_CASE("analyze recomputes aggregates from results files") {
  const fs::path dir = fs::temp_directory_path() / "decalign_cli_analyze";
  fs::remove_all(dir);
  fs::create_directories(dir);
  std::vector<RunRecord> recs;
  for (int i = 0; i < 10; ++i) {
    RunRecord r;
    r.id = "r" + std::to_string(i);
    r.decoder = "beam";
    r.params_digest = "abcd";
    r.logprob = -0.5 * i;
    r.normalized_logprob = r.logprob + 1;
    r.utility = 0.9 - 0.05 * i;
    r.candidates = {{r.logprob, r.utility}, {r.logprob - 1, r.utility - 0.1}, {r.logprob - 2, r.utility - 0.2}};
    recs.push_back(r);
  }
  write_results_file(dir / "results.jsonl", recs);
  AnalyzeOptions o;
  o.results = {dir / "results.jsonl"};
  o.out = dir / "analysis";
  o.bootstrap = 200;
  std::ostringstream out, err;
  REQUIRE(cmd_analyze(o, out, err) == 0);
  INFO(out.str());
  CHECK(out.str().find("pearson_r = 1") != std::string::npos);
  CHECK(out.str().find("mean_tau = 1") != std::string::npos);
  const auto summary = slurp(dir / "analysis" / "summary.csv");
  CHECK(summary.rfind(summary_csv_header(), 0) == 0);
  CHECK(slurp(dir / "analysis" / "hexbin_outputs.csv").rfind("cx,cy,count,mean", 0) == 0);
  CHECK(fs::exists(dir / "analysis" / "hexbin_tau.csv"));
  o.results = {dir / "absent.jsonl"};
  CHECK(cmd_analyze(o, out, err) != 0);
  fs::remove_all(dir);
}

TEST_CASE("sweep writes a quality table") {
  Workspace ws("sweep", 30);
  const auto cfg = ws.config(R"({"kind": "beam", "max_len": 8, "num_beams": 3, "top_tokens": 5})",
                             R"(, "value": {"type": "interpolated", "metric": "bleu_smoothed"},
      "sweep": {"grid": [0, 1], "dev_size": 10, "decoders": ["bs", "vgbs"], "alpha_grid": [0.25, 0.99]})");
  std::ostringstream out, err;
  REQUIRE(cmd_sweep(cfg, {}, out, err) == 0);
  const auto table = slurp(ws.dir / "out" / "sweep.csv");
  CHECK(table.rfind("decoder,quality,selected,n,mean_utility,ci_low,ci_high", 0) == 0);
  CHECK(std::count(table.begin(), table.end(), '\n') == 5);
  const auto small = ws.config(R"({"kind": "beam"})", R"(, "value": {"type": "oracle"}, "sweep": {"grid": [1], "dev_size": 80})",
                               "small.json");
  CHECK(cmd_sweep(small, {}, out, err) == 2);
}

TEST_CASE("params digest tracks the canonical config") {
  Workspace ws("digest", 4);
  auto a = load_config_file(ws.config(R"({"kind": "beam", "num_beams": 3})", "", "a.json"));
  auto b = load_config_file(ws.config(R"({"num_beams": 3, "kind": "beam"})", "", "b.json"));
  auto c = load_config_file(ws.config(R"({"kind": "beam", "num_beams": 4})", "", "c.json"));
  CHECK(params_digest(a) == params_digest(b));
  CHECK(params_digest(a) != params_digest(c));
  CHECK(params_digest(a).size() == 16);
}
