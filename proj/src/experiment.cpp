#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <numeric>
#include <thread>

#include <json.hpp>

#include "decalign/analysis.hpp"

namespace decalign {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Datasets

void Dataset::validate() const {
  std::set<std::string> ids;
  for (const auto& e : examples) {
    if (!ids.insert(e.id).second) throw Error(ErrorKind::kInvalidArgument, "duplicate example id '" + e.id + "'");
  }
}

Dataset load_dataset_jsonl(const std::filesystem::path& path, const Vocabulary& vocab) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kLoad, "cannot open dataset " + path.string());
  Dataset ds;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      json j = json::parse(line);
      Example e;
      e.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
      if (j.contains("context")) e.context.ids = vocab.encode(j.at("context").get<std::vector<std::string>>());
      if (j.contains("target") && !j.at("target").is_null()) {
        Sequence t = vocab.encode(j.at("target").get<std::vector<std::string>>());
        if (!ends_with_eos(vocab, t)) t.push_back(vocab.eos_id());
        validate_sequence(vocab, t);
        e.target = std::move(t);
      }
      if (j.contains("reference") && !j.at("reference").is_null()) {
        e.reference = vocab.encode(j.at("reference").get<std::vector<std::string>>());
      } else if (e.target) {
        e.reference = *e.target;
      }
      ds.examples.push_back(std::move(e));
    } catch (const json::exception& ex) {
      throw Error(ErrorKind::kLoad, path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    } catch (const Error& ex) {
      throw Error(ErrorKind::kLoad, path.string() + ":" + std::to_string(lineno) + ": " + ex.what());
    }
  }
  ds.validate();
  return ds;
}

void write_dataset_jsonl(const std::filesystem::path& path, const Dataset& dataset, const Vocabulary& vocab) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorKind::kLoad, "cannot write " + path.string());
  auto names = [&](std::span<const TokenId> ids) {
    std::vector<std::string> v;
    for (TokenId t : ids) v.push_back(vocab.token(t));
    return v;
  };
  for (const auto& e : dataset.examples) {
    json j{{"id", e.id}, {"context", names(e.context.ids)}};
    if (e.target) j["target"] = names(*e.target);
    j["reference"] = names(e.reference);
    out << j.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Decoder dispatch

std::string decoder_name(DecoderKind kind) {
  switch (kind) {
    case DecoderKind::kGreedy: return "greedy";
    case DecoderKind::kBeam: return "beam";
    case DecoderKind::kSample: return "sample";
    case DecoderKind::kStochasticBeam: return "stochastic_beam";
    case DecoderKind::kConstrainedBeam: return "constrained_beam";
    case DecoderKind::kVgbs: return "vgbs";
    case DecoderKind::kMcts: return "mcts";
  }
  return "unknown";
}

DecoderKind parse_decoder_kind(std::string_view name) {
  for (auto k : {DecoderKind::kGreedy, DecoderKind::kBeam, DecoderKind::kSample, DecoderKind::kStochasticBeam,
                 DecoderKind::kConstrainedBeam, DecoderKind::kVgbs, DecoderKind::kMcts}) {
    if (decoder_name(k) == name) return k;
  }
  throw Error(ErrorKind::kConfig, "unknown decoder kind '" + std::string(name) + "'");
}

bool needs_value_model(DecoderKind kind) { return kind == DecoderKind::kVgbs || kind == DecoderKind::kMcts; }

DecodeResult run_decoder(const LanguageModel& model, const DecoderSpec& spec, const Context& context, std::uint64_t seed,
                         const ValueModel* vm) {
  DecodeParams params = spec.params;
  params.seed = seed;
  if (needs_value_model(spec.kind) && !vm) throw Error(ErrorKind::kConfig, decoder_name(spec.kind) + " needs a value model");
  switch (spec.kind) {
    case DecoderKind::kGreedy: return greedy_decode(model, context, params);
    case DecoderKind::kBeam: return beam_decode(model, context, params);
    case DecoderKind::kSample: return sample_decode(model, context, params, spec.sampler);
    case DecoderKind::kStochasticBeam: return stochastic_beam_decode(model, context, params);
    case DecoderKind::kConstrainedBeam:
      if (!spec.constraint) throw Error(ErrorKind::kConfig, "constrained_beam needs a constraint");
      return constrained_beam_decode(model, context, params, *spec.constraint);
    case DecoderKind::kVgbs: {
      VgbsParams vp{params, spec.top_tokens, spec.alpha};
      return vgbs_decode(model, *vm, context, vp);
    }
    case DecoderKind::kMcts: {
      MctsParams mp{params, spec.simulations, spec.c_puct, spec.top_m, spec.leaf_eval};
      return mcts_decode(model, *vm, context, mp);
    }
  }
  throw Error(ErrorKind::kConfig, "unknown decoder kind");
}

// ---------------------------------------------------------------------------
// Experiments

namespace {

RunRecord run_one(const LanguageModel& model, const DecoderSpec& spec, const Example& example, std::size_t index,
                  const Utility& utility, const ValueFactory* values, const RunOptions& options) {
  RunRecord rec;
  rec.id = example.id;
  rec.decoder = decoder_name(spec.kind);
  rec.params_digest = options.params_digest;
  rec.seed = mix_seed(options.seed, index);
  try {
    ValueModelPtr vm;
    if (values && needs_value_model(spec.kind)) vm = (*values)(index, example);
    const DecodeResult res = run_decoder(model, spec, example.context, rec.seed, vm.get());
    rec.output = res.best.seq;
    rec.logprob = res.best.logprob;
    rec.counters = res.counters;
    rec.utility = std::clamp(utility.score(rec.output, example.reference), 0.0, 1.0);
    for (const auto& c : res.candidates) {
      rec.candidates.push_back({c.logprob, std::clamp(utility.score(c.seq, example.reference), 0.0, 1.0)});
    }
    if (example.target) {
      rec.target_logprob = sequence_logprob(model, example.context, *example.target);
      rec.normalized_logprob = rec.logprob - *rec.target_logprob;
    }
  } catch (const std::exception& e) {
    rec.error = e.what();
  }
  return rec;
}

}  // namespace

std::vector<RunRecord> run_experiment(const LanguageModel& model, const DecoderSpec& spec, const Dataset& dataset,
                                      const Utility& utility, const ValueFactory* values, const RunOptions& options) {
  dataset.validate();
  std::vector<std::size_t> todo;
  for (std::size_t i = 0; i < dataset.examples.size(); ++i) {
    if (!options.skip.contains(dataset.examples[i].id)) todo.push_back(i);
  }
  std::vector<std::optional<RunRecord>> slots(dataset.examples.size());
  std::atomic<std::size_t> next{0};
  std::mutex emit_mutex;
  auto worker = [&] {
    for (;;) {
      const std::size_t k = next.fetch_add(1);
      if (k >= todo.size()) return;
      const std::size_t i = todo[k];
      RunRecord rec = run_one(model, spec, dataset.examples[i], i, utility, values, options);
      if (options.on_record) {
        std::lock_guard lock(emit_mutex);
        options.on_record(rec);
      }
      slots[i] = std::move(rec);
    }
  };
  const int jobs = std::max(1, std::min<int>(options.jobs, static_cast<int>(std::max<std::size_t>(todo.size(), 1))));
  if (jobs == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  std::vector<RunRecord> out;
  for (auto& s : slots) {
    if (s) out.push_back(std::move(*s));
  }
  return out;
}

AlignmentSummary candidate_alignment(std::span<const RunRecord> records, std::size_t top_c) {
  AlignmentSummary summary;
  double sum = 0.0;
  std::size_t defined = 0;
  for (const auto& rec : records) {
    std::vector<CandidatePoint> cands = rec.candidates;
    std::stable_sort(cands.begin(), cands.end(), [](const CandidatePoint& a, const CandidatePoint& b) { return a.logprob > b.logprob; });
    if (cands.size() > top_c) cands.resize(top_c);
    std::optional<double> tau;
    if (!rec.error && cands.size() >= 2) {
      std::vector<double> x, y;
      for (const auto& c : cands) {
        x.push_back(c.logprob);
        y.push_back(c.utility);
      }
      try {
        tau = kendall_tau_b(x, y);
      } catch (const Error& e) {
        if (e.kind() != ErrorKind::kUndefinedCorrelation) throw;
      }
    }
    if (tau) {
      sum += *tau;
      ++defined;
    } else {
      ++summary.excluded;
    }
    summary.per_example.push_back(tau);
  }
  summary.mean_tau = defined ? sum / static_cast<double>(defined) : std::nan("");
  return summary;
}

double mean_utility(std::span<const RunRecord> records) {
  if (records.empty()) return 0.0;
  double s = 0.0;
  for (const auto& r : records) s += r.utility;
  return s / static_cast<double>(records.size());
}

// ---------------------------------------------------------------------------
// Oracle

OracleResult brute_force_oracle(const LanguageModel& model, const Utility& utility, std::span<const TokenId> reference,
                                const Context& context, int max_len, std::uint64_t cap) {
  auto seqs = enumerate_sequences(model, context, max_len, cap);
  if (seqs.empty()) throw Error(ErrorKind::kEmptySupport, "model assigns zero probability to every sequence");
  OracleResult out;
  std::size_t best_lp = 0, best_u = 0;
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    const double u = std::clamp(utility.score(seqs[i].seq, reference), 0.0, 1.0);
    out.table.push_back({seqs[i].seq, seqs[i].logprob, u});
    // Enumeration runs in token order, so strict comparisons keep the lower-id tie.
    if (seqs[i].logprob > out.table[best_lp].logprob) best_lp = i;
    if (u > out.table[best_u].utility) best_u = i;
  }
  out.argmax_likelihood = out.table[best_lp].seq;
  out.argmax_utility = out.table[best_u].seq;
  return out;
}

// ---------------------------------------------------------------------------
// Sweeps

std::vector<SweepRow> sweep_value_quality(const LanguageModel& model, const DecoderSpec& base, const Dataset& dev,
                                          const Dataset& test, const Utility& utility,
                                          const std::function<ValueFactory(double)>& values, const SweepSpec& spec) {
  if (spec.quality_grid.empty() || spec.decoders.empty()) throw Error(ErrorKind::kInvalidArgument, "sweep grids must be nonempty");
  if (test.examples.empty()) throw Error(ErrorKind::kInvalidArgument, "sweep needs a nonempty test split");
  RunOptions opts;
  opts.seed = spec.seed;
  opts.jobs = spec.jobs;
  auto evaluate = [&](const DecoderSpec& ds, const Dataset& data, const ValueFactory* vf) {
    auto recs = run_experiment(model, ds, data, utility, vf, opts);
    for (const auto& r : recs) {
      if (r.error) throw Error(ErrorKind::kInvalidArgument, "sweep decode failed on example " + r.id + ": " + *r.error);
    }
    return recs;
  };
  auto ci_of = [&](const std::vector<RunRecord>& recs) {
    std::vector<double> u;
    for (const auto& r : recs) u.push_back(r.utility);
    return bootstrap_mean_ci(u, spec.bootstrap_resamples, spec.seed);
  };

  std::vector<SweepRow> rows;
  std::map<DecoderKind, MeanCI> likelihood_only;
  for (double quality : spec.quality_grid) {
    const ValueFactory factory = values(quality);
    for (DecoderKind kind : spec.decoders) {
      DecoderSpec ds = base;
      ds.kind = kind;
      SweepRow row;
      row.decoder = decoder_name(kind);
      row.quality = quality;
      row.n = test.examples.size();
      if (!needs_value_model(kind)) {
        if (!likelihood_only.contains(kind)) likelihood_only[kind] = ci_of(evaluate(ds, test, nullptr));
        row.utility = likelihood_only[kind];
        rows.push_back(row);
        continue;
      }
      const auto& grid = kind == DecoderKind::kVgbs ? spec.alpha_grid : spec.cpuct_grid;
      auto set_param = [kind](DecoderSpec& d, double p) {
        if (kind == DecoderKind::kVgbs) d.alpha = p;
        else d.c_puct = p;
      };
      GridSearchResult gs;
      if (dev.examples.empty()) {
        gs.best = grid.front();
      } else {
        gs = hyperparam_search(grid, [&](double p) {
          DecoderSpec trial = ds;
          set_param(trial, p);
          return mean_utility(evaluate(trial, dev, &factory));
        });
      }
      set_param(ds, gs.best);
      row.selected = gs.best;
      row.utility = ci_of(evaluate(ds, test, &factory));
      rows.push_back(row);
    }
  }
  return rows;
}

}  // namespace decalign
