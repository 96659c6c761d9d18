#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "decalign/analysis.hpp"
#include "decalign/cli.hpp"

namespace py = pybind11;
using namespace decalign;

namespace {

Context to_context(const std::vector<TokenId>& ids) { return Context{ids}; }

// Python subclasses override estimate(context, prefix) -> float.
class PyValueModel : public ValueModel {
 public:
  double estimate(const Context& context, std::span<const TokenId> prefix) const override {
    py::gil_scoped_acquire gil;
    py::function fn = py::get_override(static_cast<const ValueModel*>(this), "estimate");
    if (!fn) throw Error(ErrorKind::kInvalidArgument, "ValueModel subclass must implement estimate()");
    return fn(context.ids, Sequence(prefix.begin(), prefix.end())).cast<double>();
  }
};

py::dict utility_dict(const std::map<Sequence, double>& table) {
  py::dict d;
  for (const auto& [seq, u] : table) d[py::tuple(py::cast(seq))] = u;
  return d;
}

std::map<Sequence, double> utility_map(const py::dict& d) {
  std::map<Sequence, double> out;
  for (const auto& [k, v] : d) out[k.cast<Sequence>()] = v.cast<double>();
  return out;
}

DecodeParams base_params(int max_len, int num_beams, std::uint64_t seed) {
  DecodeParams p;
  p.max_len = max_len;
  p.num_beams = num_beams;
  p.seed = seed;
  return p;
}

// Runs a config-driven subcommand and captures its console output.
py::tuple run_config(const std::string& command, const std::filesystem::path& config, std::optional<std::filesystem::path> out,
                     std::optional<std::uint64_t> seed, int jobs) {
  DecodeOptions o;
  o.out = std::move(out);
  o.seed = seed;
  o.jobs = jobs;
  std::ostringstream sout, serr;
  int code = 0;
  {
    py::gil_scoped_release release;
    if (command == "decode")
      code = cmd_decode(config, o, sout, serr);
    else if (command == "sweep")
      code = cmd_sweep(config, o, sout, serr);
    else if (command == "oracle")
      code = cmd_oracle(config, o, sout, serr);
    else
      throw Error(ErrorKind::kInvalidArgument, "unknown command '" + command + "'");
  }
  return py::make_tuple(code, sout.str(), serr.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Native core of the decalign package";

  static py::exception<Error> base_error(m, "DecalignError");
  static py::exception<ConfigError> config_error(m, "ConfigError", base_error.ptr());
  py::register_exception_translator([](std::exception_ptr p) {
    try {
      if (p) std::rethrow_exception(p);
    } catch (const ConfigError& e) {
      py::set_error(config_error, e.what());
    } catch (const Error& e) {
      py::set_error(base_error, e.what());
    }
  });

  py::class_<Vocabulary>(m, "Vocabulary")
      .def(py::init<std::vector<std::string>, std::string_view>(), py::arg("tokens"), py::arg("eos"))
      .def("__len__", &Vocabulary::size)
      .def_property_readonly("eos_id", &Vocabulary::eos_id)
      .def_property_readonly("tokens", &Vocabulary::tokens)
      .def("id_of", &Vocabulary::id_of)
      .def("token", &Vocabulary::token)
      .def("encode", [](const Vocabulary& v, const std::vector<std::string>& toks) { return v.encode(toks); })
      .def("decode", [](const Vocabulary& v, const Sequence& ids) { return v.decode(ids); })
      .def("__eq__", &Vocabulary::operator==);

  py::class_<LanguageModel, std::shared_ptr<LanguageModel>>(m, "LanguageModel")
      .def_property_readonly("vocab", &LanguageModel::vocab)
      .def(
          "next_token_logprobs",
          [](const LanguageModel& lm, const Sequence& prefix, const std::vector<TokenId>& context) {
            return lm.next_token_logprobs(to_context(context), prefix);
          },
          py::arg("prefix"), py::arg("context") = std::vector<TokenId>{})
      .def(
          "sequence_logprob",
          [](const LanguageModel& lm, const Sequence& seq, const std::vector<TokenId>& context) {
            return sequence_logprob(lm, to_context(context), seq);
          },
          py::arg("seq"), py::arg("context") = std::vector<TokenId>{});

  py::class_<TabularLM, LanguageModel, std::shared_ptr<TabularLM>>(m, "TabularLM")
      .def_static("loads", [](const std::string& doc) { return std::make_shared<TabularLM>(tabular_lm_load(doc)); })
      .def_static("load", [](const std::filesystem::path& p) { return std::make_shared<TabularLM>(tabular_lm_load_file(p)); })
      .def("dumps", [](const TabularLM& lm) { return tabular_lm_dump(lm); })
      .def_property_readonly("row_count", &TabularLM::row_count);

  py::class_<ScoredHypothesis>(m, "Hypothesis")
      .def_readonly("seq", &ScoredHypothesis::seq)
      .def_readonly("logprob", &ScoredHypothesis::logprob)
      .def_readonly("finished", &ScoredHypothesis::finished)
      .def("__repr__", [](const ScoredHypothesis& h) {
        return "Hypothesis(seq=" + py::repr(py::cast(h.seq)).cast<std::string>() + ", logprob=" + std::to_string(h.logprob) + ")";
      });

  py::class_<DecodeResult>(m, "DecodeResult")
      .def_readonly("best", &DecodeResult::best)
      .def_readonly("candidates", &DecodeResult::candidates)
      .def_readonly("steps", &DecodeResult::steps)
      .def_readonly("seed_used", &DecodeResult::seed_used)
      .def_property_readonly("lm_calls", [](const DecodeResult& r) { return r.counters.lm_calls; })
      .def_property_readonly("value_calls", [](const DecodeResult& r) { return r.counters.value_calls; });

  py::class_<ValueModel, PyValueModel, std::shared_ptr<ValueModel>>(m, "ValueModel")
      .def(py::init<>())
      .def(
          "estimate",
          [](const ValueModel& vm, const std::vector<TokenId>& context, const Sequence& prefix) {
            return vm.estimate(to_context(context), prefix);
          },
          py::arg("context"), py::arg("prefix"));

  py::class_<UniformNoiseValue, ValueModel, std::shared_ptr<UniformNoiseValue>>(m, "UniformNoiseValue")
      .def(py::init<std::uint64_t>(), py::arg("seed"));

  py::class_<LookaheadOracleValue, ValueModel, std::shared_ptr<LookaheadOracleValue>>(m, "LookaheadValue")
      .def(py::init([](const LanguageModel& lm, int max_len, const py::dict& utility, const std::vector<TokenId>& context) {
             const auto all = enumerate_sequences(lm, to_context(context), max_len);
             const auto table = make_table_utility(utility_map(utility));
             return std::make_shared<LookaheadOracleValue>(all, *table, Sequence{});
           }),
           py::arg("model"), py::arg("max_len"), py::arg("utility"), py::arg("context") = std::vector<TokenId>{},
           "Best utility reachable from each prefix, over a table keyed by token-id tuples.");

  const auto ctx = py::arg("context") = std::vector<TokenId>{};
  m.def(
      "greedy",
      [](const LanguageModel& lm, const std::vector<TokenId>& context, int max_len) {
        return greedy_decode(lm, to_context(context), base_params(max_len, 1, 0));
      },
      py::arg("model"), ctx, py::arg("max_len") = 20);
  m.def(
      "beam",
      [](const LanguageModel& lm, const std::vector<TokenId>& context, int max_len, int num_beams) {
        return beam_decode(lm, to_context(context), base_params(max_len, num_beams, 0));
      },
      py::arg("model"), ctx, py::arg("max_len") = 20, py::arg("num_beams") = 5);
  m.def(
      "sample",
      [](const LanguageModel& lm, const std::vector<TokenId>& context, int max_len, std::uint64_t seed, double temperature,
         int top_k, double top_p) {
        SamplerParams s;
        s.temperature = temperature;
        s.top_k = top_k;
        s.top_p = top_p;
        return sample_decode(lm, to_context(context), base_params(max_len, 1, seed), s);
      },
      py::arg("model"), ctx, py::arg("max_len") = 20, py::arg("seed") = 0, py::arg("temperature") = 1.0, py::arg("top_k") = 0,
      py::arg("top_p") = 1.0);
  m.def(
      "stochastic_beam",
      [](const LanguageModel& lm, const std::vector<TokenId>& context, int max_len, int num_beams, std::uint64_t seed) {
        return stochastic_beam_decode(lm, to_context(context), base_params(max_len, num_beams, seed));
      },
      py::arg("model"), ctx, py::arg("max_len") = 20, py::arg("num_beams") = 5, py::arg("seed") = 0);
  m.def(
      "vgbs",
      [](const LanguageModel& lm, const ValueModel& vm, const std::vector<TokenId>& context, int max_len, int num_beams,
         int top_tokens, double alpha) {
        VgbsParams p;
        p.base = base_params(max_len, num_beams, 0);
        p.top_tokens = top_tokens;
        p.alpha = alpha;
        return vgbs_decode(lm, vm, to_context(context), p);
      },
      py::arg("model"), py::arg("value"), ctx, py::arg("max_len") = 20, py::arg("num_beams") = 5, py::arg("top_tokens") = 10,
      py::arg("alpha") = 0.5);
  m.def(
      "mcts",
      [](const LanguageModel& lm, const ValueModel& vm, const std::vector<TokenId>& context, int max_len, int simulations,
         double c_puct, int top_m) {
        MctsParams p;
        p.base = base_params(max_len, 1, 0);
        p.simulations = simulations;
        p.c_puct = c_puct;
        p.top_m = top_m;
        return mcts_decode(lm, vm, to_context(context), p);
      },
      py::arg("model"), py::arg("value"), ctx, py::arg("max_len") = 20, py::arg("simulations") = 50, py::arg("c_puct") = 1.25,
      py::arg("top_m") = 20);

  m.def(
      "enumerate_sequences",
      [](const LanguageModel& lm, int max_len, const std::vector<TokenId>& context) {
        std::vector<std::pair<Sequence, double>> out;
        for (auto& s : enumerate_sequences(lm, to_context(context), max_len)) out.emplace_back(std::move(s.seq), s.logprob);
        return out;
      },
      py::arg("model"), py::arg("max_len"), ctx);

  m.def("bleu4", [](const Sequence& h, const Sequence& r, bool smooth) { return bleu4(h, r, smooth); }, py::arg("hypothesis"),
        py::arg("reference"), py::arg("smoothing") = false);
  m.def("exact_match", [](const Sequence& h, const Sequence& r) { return exact_match(h, r); });

  m.def("pearson", [](const std::vector<double>& x, const std::vector<double>& y) {
    const auto c = pearson(x, y);
    return py::make_tuple(c.r, c.p_value);
  }, "Returns (r, two-sided p-value).");
  m.def("kendall_tau_b", [](const std::vector<double>& x, const std::vector<double>& y) { return kendall_tau_b(x, y); });
  m.def("spearman", [](const std::vector<double>& x, const std::vector<double>& y) { return spearman(x, y); });
  m.def(
      "bootstrap_mean_ci",
      [](const std::vector<double>& v, int resamples, std::uint64_t seed, double level) {
        const auto ci = bootstrap_mean_ci(v, resamples, seed, level);
        return py::make_tuple(ci.mean, ci.low, ci.high);
      },
      py::arg("values"), py::arg("resamples") = 10'000, py::arg("seed") = 0, py::arg("level") = 0.95,
      "Returns (mean, low, high).");

  m.def(
      "brute_force_oracle",
      [](const LanguageModel& lm, const py::dict& utility, int max_len, const std::vector<TokenId>& context) {
        const auto table = make_table_utility(utility_map(utility));
        const auto r = brute_force_oracle(lm, *table, Sequence{}, to_context(context), max_len);
        return py::make_tuple(r.argmax_likelihood, r.argmax_utility);
      },
      py::arg("model"), py::arg("utility"), py::arg("max_len"), ctx,
      "Returns (likelihood argmax, utility argmax) over every sequence up to max_len.");

  py::class_<PlantedTask>(m, "PlantedTask")
      .def_property_readonly("model",
                             [](const PlantedTask& t) { return std::const_pointer_cast<TabularLM>(t.model); })
      .def_readonly("max_len", &PlantedTask::max_len)
      .def_readonly("spearman", &PlantedTask::spearman)
      .def_readonly("pearson", &PlantedTask::pearson)
      .def_property_readonly("utility", [](const PlantedTask& t) { return utility_dict(t.utility); });
  m.def("generate_misaligned_task", &generate_misaligned_task, py::arg("seed"), py::arg("vocab_size"), py::arg("max_len"),
        py::arg("rho"), py::arg("cap") = kDefaultEnumerationCap);

  m.def("run_config", &run_config, py::arg("command"), py::arg("config"), py::arg("out") = std::nullopt,
        py::arg("seed") = std::nullopt, py::arg("jobs") = 1,
        "Runs decode, sweep or oracle on a config file; returns (exit code, stdout, stderr).");
}
