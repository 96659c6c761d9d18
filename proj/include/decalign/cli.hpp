#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "decalign/analysis.hpp"

namespace decalign {

/// Invalid configuration; the message starts with the offending field path.
class ConfigError : public Error {
 public:
  ConfigError(const std::string& field, const std::string& message)
      : Error(ErrorKind::kConfig, field + ": " + message), field_(field) {}
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

struct ModelConfig {
  enum class Kind { kTabular, kNgram, kRemote } kind = Kind::kTabular;
  std::filesystem::path path;    // tabular table
  std::filesystem::path corpus;  // ngram training lines
  int order = 2;
  double smoothing = 1.0;
  std::string endpoint;
  std::optional<std::vector<std::string>> vocab;  // remote; required for tcp://
  std::string eos = "</s>";
};

struct UtilityConfig {
  enum class Kind { kExactMatch, kBleu, kTripleF1, kNonToxicity } kind = Kind::kExactMatch;
  bool smoothing = false;
  std::filesystem::path lexicon;
  std::string sub = "<S>", rel = "<R>", obj = "<O>", end = "<E>";
};

struct ValueConfig {
  enum class Kind { kOracle, kInterpolated, kDegraded, kUniform } kind = Kind::kOracle;
  double lambda = 1.0;
  double eta = 0.0;
  std::uint64_t seed = 0;
  /// Score prefixes with add-one smoothed BLEU instead of the utility itself.
  bool smoothed_bleu = false;
};

struct AnalysisConfig {
  std::size_t top_c = 5;
  int nx = 20;
  int bootstrap = 10'000;
};

struct SweepConfig {
  enum class Quality { kLambda, kEta } quality = Quality::kLambda;
  std::vector<double> grid;
  std::vector<DecoderKind> decoders{DecoderKind::kBeam, DecoderKind::kVgbs};
  std::size_t dev_size = 80;
  std::optional<std::filesystem::path> dev_dataset;
  std::vector<double> alpha_grid{std::begin(kDefaultAlphaGrid), std::end(kDefaultAlphaGrid)};
  std::vector<double> cpuct_grid{std::begin(kDefaultCpuctGrid), std::end(kDefaultCpuctGrid)};
};

struct ExperimentConfig {
  ModelConfig model;
  std::filesystem::path dataset;
  DecoderSpec decoder;
  /// Constraint sequences as token strings; turned into a trie once the vocabulary is known.
  std::vector<std::vector<std::string>> constraint;
  std::vector<std::string> ban_tokens;
  UtilityConfig utility;
  std::optional<ValueConfig> value;
  AnalysisConfig analysis;
  std::optional<SweepConfig> sweep;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  /// Canonical decoder/utility/value section, hashed into params_digest.
  std::string canonical;
};

/// Parses a JSON config document. Relative paths resolve against `base_dir`;
/// referenced files must exist.
ExperimentConfig parse_config(std::string_view document, const std::filesystem::path& base_dir);
ExperimentConfig load_config_file(const std::filesystem::path& path);

std::string params_digest(const ExperimentConfig& config);

/// Everything a run needs, built from a config.
struct Experiment {
  ExperimentConfig config;
  std::shared_ptr<const LanguageModel> model;
  Dataset dataset;
  UtilityPtr utility;
  DecoderSpec decoder;
};

Experiment build_experiment(const ExperimentConfig& config);
UtilityPtr build_utility(const UtilityConfig& config, const Vocabulary& vocab);
/// Value models for `pool`, looked up by example id.
ValueFactory build_value_factory(const ValueConfig& config, const Vocabulary& vocab, const UtilityPtr& utility,
                                 const std::vector<Example>& pool);

// Subcommands. Each returns the process exit code: 0 ok, 1 runtime failure,
// 2 config error.

struct DecodeOptions {
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> out;
  int jobs = 1;
  bool resume = false;
};

int cmd_decode(const std::filesystem::path& config, const DecodeOptions& options, std::ostream& out, std::ostream& err);
int cmd_sweep(const std::filesystem::path& config, const DecodeOptions& options, std::ostream& out, std::ostream& err);
int cmd_oracle(const std::filesystem::path& config, const DecodeOptions& options, std::ostream& out, std::ostream& err);

struct AnalyzeOptions {
  std::vector<std::filesystem::path> results;
  std::optional<std::filesystem::path> out;
  std::size_t top_c = 5;
  int nx = 20;
  int bootstrap = 10'000;
  std::uint64_t seed = 0;
};

int cmd_analyze(const AnalyzeOptions& options, std::ostream& out, std::ostream& err);

struct ProtocheckRule {
  std::string name;
  bool passed = false;
  std::string detail;
};

/// Probes a wire-protocol endpoint. Stream endpoints need `vocab_size`.
std::vector<ProtocheckRule> protocheck(const std::string& endpoint, std::optional<std::size_t> vocab_size = std::nullopt,
                                       std::chrono::milliseconds timeout = std::chrono::milliseconds{5000});
int cmd_protocheck(const std::string& endpoint, std::optional<std::size_t> vocab_size, std::ostream& out, std::ostream& err);

}  // namespace decalign
