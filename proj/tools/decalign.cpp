// Command-line front end: decode, sweep, oracle, analyze, protocheck.

#include <iostream>

#include <CLI11.hpp>

#include "decalign/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Decoding/alignment experiment runner"};
  app.require_subcommand(1);

  decalign::DecodeOptions run;
  std::string config;
  std::uint64_t seed = 0;
  std::string out;
  auto add_run_flags = [&](CLI::App* sub, bool resumable) {
    sub->add_option("config", config, "Experiment config (JSON)")->required();
    sub->add_option("--seed", seed, "Override the config seed");
    sub->add_option("--out", out, "Override the output directory");
    sub->add_option("--jobs", run.jobs, "Worker threads")->check(CLI::PositiveNumber);
    if (resumable) sub->add_flag("--resume", run.resume, "Skip examples already in results.jsonl.partial");
  };
  auto* decode = app.add_subcommand("decode", "Run a decoder over a dataset");
  add_run_flags(decode, true);
  auto* sweep = app.add_subcommand("sweep", "Value-quality sweep");
  add_run_flags(sweep, false);
  auto* oracle = app.add_subcommand("oracle", "Brute-force argmax table");
  add_run_flags(oracle, false);

  decalign::AnalyzeOptions analyze_opts;
  std::string analyze_out;
  auto* analyze = app.add_subcommand("analyze", "Recompute aggregates from results files");
  analyze->add_option("results", analyze_opts.results, "Results files")->required();
  analyze->add_option("--out", analyze_out, "Directory for summary and hexbin exports");
  analyze->add_option("--top-c", analyze_opts.top_c, "Candidates per example for tau");
  analyze->add_option("--nx", analyze_opts.nx, "Horizontal hexagon count");
  analyze->add_option("--bootstrap", analyze_opts.bootstrap, "Bootstrap resamples");
  analyze->add_option("--seed", analyze_opts.seed, "Bootstrap seed");

  std::string endpoint;
  std::size_t vocab_size = 0;
  auto* check = app.add_subcommand("protocheck", "Wire-protocol conformance probes");
  check->add_option("endpoint", endpoint, "http://host:port or tcp://host:port")->required();
  check->add_option("--vocab-size", vocab_size, "Vocabulary size (stream endpoints)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  auto finish_run_flags = [&](CLI::App* sub) {
    if (sub->count("--seed")) run.seed = seed;
    if (sub->count("--out")) run.out = out;
  };
  if (decode->parsed()) {
    finish_run_flags(decode);
    return decalign::cmd_decode(config, run, std::cout, std::cerr);
  }
  if (sweep->parsed()) {
    finish_run_flags(sweep);
    return decalign::cmd_sweep(config, run, std::cout, std::cerr);
  }
  if (oracle->parsed()) {
    finish_run_flags(oracle);
    return decalign::cmd_oracle(config, run, std::cout, std::cerr);
  }
  if (analyze->parsed()) {
    if (!analyze_out.empty()) analyze_opts.out = analyze_out;
    return decalign::cmd_analyze(analyze_opts, std::cout, std::cerr);
  }
  return decalign::cmd_protocheck(endpoint, vocab_size ? std::optional<std::size_t>(vocab_size) : std::nullopt, std::cout,
                                  std::cerr);
}
