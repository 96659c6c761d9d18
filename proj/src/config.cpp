#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "decalign/cli.hpp"
#include "decalign/remote.hpp"

namespace decalign {

using nlohmann::json;

namespace {

// Typed access with field-path diagnostics.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_.empty() ? "<root>" : path_, "expected an object");
  }

  std::string field(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key) && !j_.at(key).is_null(); }
  const json& raw(const std::string& key) const {
    if (!has(key)) throw ConfigError(field(key), "missing required field");
    return j_.at(key);
  }
  Section sub(const std::string& key) const { return Section(raw(key), field(key)); }

  template <class T>
  T get(const std::string& key) const {
    try {
      return raw(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(field(key), "wrong type");
    }
  }
  template <class T>
  T get(const std::string& key, T fallback) const {
    return has(key) ? get<T>(key) : fallback;
  }

  void only(std::initializer_list<const char*> allowed) const {
    for (const auto& [k, _] : j_.items()) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || k == a;
      if (!ok) throw ConfigError(field(k), "unknown field");
    }
  }

 private:
  const json& j_;
  std::string path_;
};

std::filesystem::path existing_file(const Section& s, const std::string& key, const std::filesystem::path& base) {
  std::filesystem::path p = s.get<std::string>(key);
  if (p.is_relative()) p = base / p;
  if (!std::filesystem::exists(p)) throw ConfigError(s.field(key), "file not found: " + p.string());
  return p;
}

void require(bool ok, const Section& s, const std::string& key, const std::string& message) {
  if (!ok) throw ConfigError(s.field(key), message);
}

ModelConfig parse_model(const Section& s, const std::filesystem::path& base) {
  s.only({"type", "path", "corpus", "order", "smoothing", "endpoint", "vocab", "eos"});
  ModelConfig m;
  const auto type = s.get<std::string>("type");
  m.eos = s.get<std::string>("eos", "</s>");
  if (type == "tabular") {
    m.kind = ModelConfig::Kind::kTabular;
    m.path = existing_file(s, "path", base);
  } else if (type == "ngram") {
    m.kind = ModelConfig::Kind::kNgram;
    m.corpus = existing_file(s, "corpus", base);
    m.order = s.get<int>("order", 2);
    m.smoothing = s.get<double>("smoothing", 1.0);
    require(m.order >= 1, s, "order", "must be >= 1");
    require(m.smoothing >= 0.0, s, "smoothing", "must be >= 0");
  } else if (type == "remote") {
    m.kind = ModelConfig::Kind::kRemote;
    m.endpoint = s.get<std::string>("endpoint");
    try {
      Endpoint::parse(m.endpoint);
    } catch (const Error& e) {
      throw ConfigError(s.field("endpoint"), e.what());
    }
    if (s.has("vocab")) m.vocab = s.get<std::vector<std::string>>("vocab");
    require(m.vocab || m.endpoint.rfind("http://", 0) == 0, s, "vocab", "required for stream endpoints");
  } else {
    throw ConfigError(s.field("type"), "unknown model type '" + type + "'");
  }
  return m;
}

void parse_decoder(const Section& s, ExperimentConfig& cfg) {
  s.only({"kind", "max_len", "num_beams", "length_normalize", "temperature", "top_k", "top_p", "top_tokens", "alpha",
          "simulations", "c_puct", "top_m", "leaf_eval", "min_length", "no_repeat_ngram", "ban_tokens", "constraint"});
  DecoderSpec& d = cfg.decoder;
  try {
    d.kind = parse_decoder_kind(s.get<std::string>("kind"));
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(s.field("kind"), e.what());
  }
  d.params.max_len = s.get<int>("max_len", 20);
  d.params.num_beams = s.get<int>("num_beams", 5);
  d.params.length_normalize_final = s.get<bool>("length_normalize", false);
  require(d.params.max_len >= 1, s, "max_len", "must be >= 1");
  require(d.params.num_beams >= 1, s, "num_beams", "must be >= 1");
  d.sampler.temperature = s.get<double>("temperature", 1.0);
  d.sampler.top_k = s.get<int>("top_k", 0);
  d.sampler.top_p = s.get<double>("top_p", 1.0);
  require(d.sampler.temperature > 0.0, s, "temperature", "must be > 0");
  require(d.sampler.top_k >= 0, s, "top_k", "must be >= 0");
  require(d.sampler.top_p > 0.0 && d.sampler.top_p <= 1.0, s, "top_p", "must be in (0, 1]");
  d.top_tokens = s.get<int>("top_tokens", 10);
  d.alpha = s.get<double>("alpha", 0.5);
  require(d.alpha >= 0.0 && d.alpha <= 1.0, s, "alpha", "must be in [0, 1]");
  if (d.kind == DecoderKind::kVgbs) require(d.top_tokens >= d.params.num_beams, s, "top_tokens", "must be >= num_beams");
  d.simulations = s.get<int>("simulations", 50);
  d.c_puct = s.get<double>("c_puct", 1.25);
  d.top_m = s.get<int>("top_m", 20);
  require(d.simulations >= 1, s, "simulations", "must be >= 1");
  require(d.c_puct > 0.0, s, "c_puct", "must be > 0");
  require(d.top_m >= 1, s, "top_m", "must be >= 1");
  const auto leaf = s.get<std::string>("leaf_eval", "value");
  if (leaf == "value") d.leaf_eval = LeafEval::kValue;
  else if (leaf == "rollout") d.leaf_eval = LeafEval::kRolloutGreedy;
  else throw ConfigError(s.field("leaf_eval"), "expected 'value' or 'rollout'");
  if (s.has("min_length")) {
    const int m = s.get<int>("min_length");
    require(m >= 0 && m <= d.params.max_len, s, "min_length", "must be in [0, max_len]");
    d.params.heuristics.push_back(MinLength{m});
  }
  if (s.has("no_repeat_ngram")) {
    const int n = s.get<int>("no_repeat_ngram");
    require(n >= 1, s, "no_repeat_ngram", "must be >= 1");
    d.params.heuristics.push_back(NoRepeatNgram{n});
  }
  cfg.ban_tokens = s.get<std::vector<std::string>>("ban_tokens", {});
  cfg.constraint = s.get<std::vector<std::vector<std::string>>>("constraint", {});
  require(d.kind != DecoderKind::kConstrainedBeam || !cfg.constraint.empty(), s, "constraint",
          "constrained_beam needs at least one sequence");
}

UtilityConfig parse_utility(const Section& s, const std::filesystem::path& base) {
  s.only({"type", "smoothing", "lexicon", "markers"});
  UtilityConfig u;
  const auto type = s.get<std::string>("type");
  if (type == "exact_match") u.kind = UtilityConfig::Kind::kExactMatch;
  else if (type == "bleu") u.kind = UtilityConfig::Kind::kBleu;
  else if (type == "triple_f1") u.kind = UtilityConfig::Kind::kTripleF1;
  else if (type == "nontoxicity") u.kind = UtilityConfig::Kind::kNonToxicity;
  else throw ConfigError(s.field("type"), "unknown utility '" + type + "'");
  u.smoothing = s.get<bool>("smoothing", false);
  if (u.kind == UtilityConfig::Kind::kNonToxicity) u.lexicon = existing_file(s, "lexicon", base);
  if (s.has("markers")) {
    const Section m = s.sub("markers");
    m.only({"sub", "rel", "obj", "end"});
    u.sub = m.get<std::string>("sub", u.sub);
    u.rel = m.get<std::string>("rel", u.rel);
    u.obj = m.get<std::string>("obj", u.obj);
    u.end = m.get<std::string>("end", u.end);
  }
  return u;
}

ValueConfig parse_value(const Section& s) {
  s.only({"type", "lambda", "eta", "seed", "metric"});
  ValueConfig v;
  const auto type = s.get<std::string>("type");
  if (type == "oracle") v.kind = ValueConfig::Kind::kOracle;
  else if (type == "interpolated") v.kind = ValueConfig::Kind::kInterpolated;
  else if (type == "degraded") v.kind = ValueConfig::Kind::kDegraded;
  else if (type == "uniform") v.kind = ValueConfig::Kind::kUniform;
  else throw ConfigError(s.field("type"), "unknown value model '" + type + "'");
  v.lambda = s.get<double>("lambda", 1.0);
  v.eta = s.get<double>("eta", 0.0);
  v.seed = s.get<std::uint64_t>("seed", 0);
  require(v.lambda >= 0.0 && v.lambda <= 1.0, s, "lambda", "must be in [0, 1]");
  require(v.eta >= 0.0 && v.eta <= 1.0, s, "eta", "must be in [0, 1]");
  const auto metric = s.get<std::string>("metric", "utility");
  if (metric == "bleu_smoothed") v.smoothed_bleu = true;
  else if (metric != "utility") throw ConfigError(s.field("metric"), "expected 'utility' or 'bleu_smoothed'");
  return v;
}

std::vector<double> unit_grid(const Section& s, const std::string& key, std::vector<double> fallback) {
  auto g = s.get<std::vector<double>>(key, std::move(fallback));
  require(!g.empty(), s, key, "grid must be nonempty");
  return g;
}

SweepConfig parse_sweep(const Section& s, const std::filesystem::path& base) {
  s.only({"quality", "grid", "decoders", "dev_size", "dev_dataset", "alpha_grid", "cpuct_grid"});
  SweepConfig w;
  const auto q = s.get<std::string>("quality", "lambda");
  if (q == "lambda") w.quality = SweepConfig::Quality::kLambda;
  else if (q == "eta") w.quality = SweepConfig::Quality::kEta;
  else throw ConfigError(s.field("quality"), "expected 'lambda' or 'eta'");
  w.grid = unit_grid(s, "grid", {0.0, 0.25, 0.5, 0.75, 1.0});
  for (double g : w.grid) require(g >= 0.0 && g <= 1.0, s, "grid", "values must be in [0, 1]");
  if (s.has("decoders")) {
    w.decoders.clear();
    for (const auto& name : s.get<std::vector<std::string>>("decoders")) {
      DecoderKind k;
      try {
        k = parse_decoder_kind(name == "bs" ? "beam" : name);
      } catch (const Error& e) {
        throw ConfigError(s.field("decoders"), e.what());
      }
      require(k == DecoderKind::kBeam || k == DecoderKind::kVgbs || k == DecoderKind::kMcts, s, "decoders",
              "sweeps support beam, vgbs and mcts");
      w.decoders.push_back(k);
    }
    require(!w.decoders.empty(), s, "decoders", "must be nonempty");
  }
  w.dev_size = s.get<std::size_t>("dev_size", 80);
  if (s.has("dev_dataset")) w.dev_dataset = existing_file(s, "dev_dataset", base);
  w.alpha_grid = unit_grid(s, "alpha_grid", w.alpha_grid);
  w.cpuct_grid = unit_grid(s, "cpuct_grid", w.cpuct_grid);
  return w;
}

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

ExperimentConfig parse_config(std::string_view document, const std::filesystem::path& base_dir) {
  json j;
  try {
    j = json::parse(document);
  } catch (const json::exception& e) {
    throw ConfigError("<root>", std::string("not valid JSON: ") + e.what());
  }
  const Section root(j, "");
  root.only({"model", "dataset", "decoder", "utility", "value", "analysis", "sweep", "seed", "output_dir"});
  ExperimentConfig cfg;
  cfg.model = parse_model(root.sub("model"), base_dir);
  cfg.dataset = existing_file(root, "dataset", base_dir);
  parse_decoder(root.sub("decoder"), cfg);
  cfg.utility = parse_utility(root.sub("utility"), base_dir);
  if (root.has("value")) cfg.value = parse_value(root.sub("value"));
  if (needs_value_model(cfg.decoder.kind) && !cfg.value) throw ConfigError("value", cfg.decoder.kind == DecoderKind::kVgbs
                                                                                        ? "vgbs needs a value model"
                                                                                        : "mcts needs a value model");
  if (root.has("analysis")) {
    const Section a = root.sub("analysis");
    a.only({"top_c", "nx", "bootstrap"});
    cfg.analysis.top_c = a.get<std::size_t>("top_c", 5);
    cfg.analysis.nx = a.get<int>("nx", 20);
    cfg.analysis.bootstrap = a.get<int>("bootstrap", 10'000);
    require(cfg.analysis.top_c >= 2, a, "top_c", "must be >= 2");
    require(cfg.analysis.nx >= 1, a, "nx", "must be >= 1");
    require(cfg.analysis.bootstrap >= 1, a, "bootstrap", "must be >= 1");
  }
  if (root.has("sweep")) {
    cfg.sweep = parse_sweep(root.sub("sweep"), base_dir);
    require(cfg.value.has_value(), root, "value", "sweeps need a value model");
  }
  cfg.seed = root.get<std::uint64_t>("seed", 0);
  std::filesystem::path out = root.get<std::string>("output_dir", "out");
  cfg.output_dir = out.is_relative() ? base_dir / out : out;
  json canon{{"decoder", j.at("decoder")}, {"utility", j.at("utility")}};
  if (root.has("value")) canon["value"] = j.at("value");
  cfg.canonical = canon.dump();
  return cfg;
}

ExperimentConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("<config>", "cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.parent_path().empty() ? std::filesystem::path(".") : path.parent_path());
}

std::string params_digest(const ExperimentConfig& config) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(fnv1a(config.canonical)));
  return buf;
}

// ---------------------------------------------------------------------------

namespace {

TokenId config_token(const Vocabulary& vocab, const std::string& tok, const std::string& field) {
  if (!vocab.contains(tok)) throw ConfigError(field, "token '" + tok + "' is not in the vocabulary");
  return vocab.id_of(tok);
}

std::shared_ptr<const LanguageModel> build_model(const ModelConfig& m) {
  try {
    switch (m.kind) {
      case ModelConfig::Kind::kTabular:
        return std::make_shared<TabularLM>(tabular_lm_load_file(m.path));
      case ModelConfig::Kind::kNgram:
        return std::make_shared<NgramLM>(ngram_train(read_corpus_file(m.corpus), m.order, m.smoothing, std::nullopt, m.eos));
      case ModelConfig::Kind::kRemote: {
        std::optional<Vocabulary> vocab;
        if (m.vocab) vocab = Vocabulary(*m.vocab, m.eos);
        return std::shared_ptr<const LanguageModel>(remote_connect(m.endpoint, vocab));
      }
    }
  } catch (const TransportError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("model", e.what());
  }
  throw ConfigError("model.type", "unsupported");
}

}  // namespace

UtilityPtr build_utility(const UtilityConfig& u, const Vocabulary& vocab) {
  switch (u.kind) {
    case UtilityConfig::Kind::kExactMatch: return make_exact_match_utility(vocab.eos_id());
    case UtilityConfig::Kind::kBleu: return make_bleu_utility(vocab.eos_id(), u.smoothing);
    case UtilityConfig::Kind::kTripleF1:
      return make_triple_f1_utility(vocab.eos_id(), TripleMarkers{config_token(vocab, u.sub, "utility.markers.sub"),
                                                                  config_token(vocab, u.rel, "utility.markers.rel"),
                                                                  config_token(vocab, u.obj, "utility.markers.obj"),
                                                                  config_token(vocab, u.end, "utility.markers.end")});
    case UtilityConfig::Kind::kNonToxicity: {
      std::unordered_set<TokenId> banned;
      for (const auto& w : read_lexicon_file(u.lexicon)) {
        if (vocab.contains(w)) banned.insert(vocab.id_of(w));
      }
      return make_nontoxicity_utility(vocab.eos_id(), std::move(banned));
    }
  }
  throw ConfigError("utility.type", "unsupported");
}

ValueFactory build_value_factory(const ValueConfig& v, const Vocabulary& vocab, const UtilityPtr& utility,
                                 const std::vector<Example>& pool) {
  const UtilityPtr metric = v.smoothed_bleu ? make_bleu_utility(vocab.eos_id(), true) : utility;
  switch (v.kind) {
    case ValueConfig::Kind::kOracle:
      return [metric](std::size_t, const Example& ex) -> ValueModelPtr { return std::make_shared<OracleValue>(metric, ex.reference); };
    case ValueConfig::Kind::kDegraded: {
      const double eta = v.eta;
      const std::uint64_t seed = v.seed;
      return [metric, eta, seed](std::size_t, const Example& ex) -> ValueModelPtr {
        return std::make_shared<DegradedOracleValue>(std::make_shared<OracleValue>(metric, ex.reference), eta, seed);
      };
    }
    case ValueConfig::Kind::kUniform: {
      const std::uint64_t seed = v.seed;
      return [seed](std::size_t, const Example&) -> ValueModelPtr { return std::make_shared<UniformNoiseValue>(seed); };
    }
    case ValueConfig::Kind::kInterpolated: {
      std::vector<Sequence> refs;
      auto ids = std::make_shared<std::map<std::string, std::size_t>>();
      for (const auto& ex : pool) {
        if (!ids->emplace(ex.id, refs.size()).second) throw ConfigError("value", "duplicate example id '" + ex.id + "'");
        refs.push_back(ex.reference);
      }
      if (refs.size() < 2) throw ConfigError("value.type", "interpolated value needs at least two examples");
      auto oracle = std::make_shared<InterpolatedOracleValue>(make_interpolated_oracle(metric, refs, v.seed, v.lambda));
      return [oracle, ids](std::size_t, const Example& ex) -> ValueModelPtr {
        const auto it = ids->find(ex.id);
        if (it == ids->end()) throw Error(ErrorKind::kInvalidArgument, "no value target for example '" + ex.id + "'");
        return oracle->bind(it->second);
      };
    }
  }
  throw ConfigError("value.type", "unsupported");
}

Experiment build_experiment(const ExperimentConfig& config) {
  Experiment ex;
  ex.config = config;
  ex.model = build_model(config.model);
  const Vocabulary& vocab = ex.model->vocab();
  try {
    ex.dataset = load_dataset_jsonl(config.dataset, vocab);
  } catch (const Error& e) {
    throw ConfigError("dataset", e.what());
  }
  ex.utility = build_utility(config.utility, vocab);
  ex.decoder = config.decoder;
  if (!config.ban_tokens.empty()) {
    BanTokens ban;
    for (const auto& t : config.ban_tokens) ban.tokens.push_back(config_token(vocab, t, "decoder.ban_tokens"));
    ex.decoder.params.heuristics.push_back(ban);
  }
  if (!config.constraint.empty()) {
    std::vector<Sequence> seqs;
    for (const auto& words : config.constraint) {
      Sequence s;
      for (const auto& w : words) s.push_back(config_token(vocab, w, "decoder.constraint"));
      if (!ends_with_eos(vocab, s)) s.push_back(vocab.eos_id());
      seqs.push_back(std::move(s));
    }
    try {
      ex.decoder.constraint = ConstraintSpec::from_trie(PrefixTrie(vocab, seqs));
    } catch (const Error& e) {
      throw ConfigError("decoder.constraint", e.what());
    }
  }
  return ex;
}

}  // namespace decalign
