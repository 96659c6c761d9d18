#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "decalign/decoders.hpp"
#include "decalign/guided.hpp"
#include "decalign/metrics.hpp"
#include "decalign/models.hpp"
#include "decalign/value.hpp"

namespace decalign {

// ---------------------------------------------------------------------------
// Statistics

struct Correlation {
  double r = 0.0;
  double p_value = 1.0;
};

/// Product-moment r with a two-sided Student-t p-value (n - 2 dof).
Correlation pearson(std::span<const double> x, std::span<const double> y);
/// Tau-b with tie corrections, by exact pair counting.
double kendall_tau_b(std::span<const double> x, std::span<const double> y);
/// Pearson r of average ranks.
double spearman(std::span<const double> x, std::span<const double> y);
std::vector<double> average_ranks(std::span<const double> x);

struct MeanCI {
  double mean = 0.0;
  double low = 0.0;
  double high = 0.0;
};

/// Percentile bootstrap of the mean.
MeanCI bootstrap_mean_ci(std::span<const double> values, int resamples = 10'000, std::uint64_t seed = 0, double level = 0.95);

// ---------------------------------------------------------------------------
// Hexagonal binning

struct HexPoint {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;
};

struct HexCell {
  int q = 0;
  int r = 0;
  double cx = 0.0;
  double cy = 0.0;
  std::size_t count = 0;
  double mean = 0.0;
};

/// Pointy-top hexagons in axial coordinates. Both axes are rescaled so the
/// bounding box spans nx cell widths; cells are Voronoi regions of centers.
class HexGrid {
 public:
  HexGrid(double xmin, double xmax, double ymin, double ymax, int nx);

  std::pair<int, int> cell_of(double x, double y) const;
  std::pair<double, double> center(int q, int r) const;
  /// Squared distance between a point and a cell center in the rescaled plane.
  double scaled_distance2(double x, double y, int q, int r) const;
  int nx() const noexcept { return nx_; }

  std::vector<HexCell> cells;

 private:
  double xmin_, ymin_, sx_, sy_;
  int nx_;
};

HexGrid hexbin(std::span<const HexPoint> points, int nx);

// ---------------------------------------------------------------------------
// Datasets and runs

struct Example {
  std::string id;
  Context context;
  std::optional<Sequence> target;
  Sequence reference;
};

struct Dataset {
  std::vector<Example> examples;
  void validate() const;
};

/// JSONL: {"id", "context":[tokens], "target":[tokens]?, "reference":[tokens]?}.
/// Targets get an EOS appended when missing; reference defaults to target.
Dataset load_dataset_jsonl(const std::filesystem::path& path, const Vocabulary& vocab);
void write_dataset_jsonl(const std::filesystem::path& path, const Dataset& dataset, const Vocabulary& vocab);

enum class DecoderKind { kGreedy, kBeam, kSample, kStochasticBeam, kConstrainedBeam, kVgbs, kMcts };

std::string decoder_name(DecoderKind kind);
DecoderKind parse_decoder_kind(std::string_view name);
bool needs_value_model(DecoderKind kind);

struct DecoderSpec {
  DecoderKind kind = DecoderKind::kBeam;
  DecodeParams params;
  SamplerParams sampler;
  int top_tokens = 10;
  double alpha = 0.5;
  int simulations = 50;
  double c_puct = 1.25;
  int top_m = 20;
  LeafEval leaf_eval = LeafEval::kValue;
  std::optional<ConstraintSpec> constraint;
};

/// Runs one decoder on one context. `vm` is required for vgbs and mcts.
DecodeResult run_decoder(const LanguageModel& model, const DecoderSpec& spec, const Context& context, std::uint64_t seed,
                         const ValueModel* vm);

struct CandidatePoint {
  double logprob = 0.0;
  double utility = 0.0;
};

struct RunRecord {
  std::string id;
  std::string decoder;
  std::string params_digest;
  std::uint64_t seed = 0;
  Sequence output;
  double logprob = 0.0;
  std::optional<double> target_logprob;
  std::optional<double> normalized_logprob;
  double utility = 0.0;
  std::vector<CandidatePoint> candidates;
  CallCounters counters;
  std::optional<std::string> error;
};

using ValueFactory = std::function<ValueModelPtr(std::size_t index, const Example& example)>;

struct RunOptions {
  std::uint64_t seed = 0;
  int jobs = 1;
  std::string params_digest;
  /// Example ids to skip (already present from an earlier run).
  std::set<std::string> skip;
  /// Invoked once per finished example, serialized, in completion order.
  std::function<void(const RunRecord&)> on_record;
};

/// Per-example seed: mix_seed(seed, example index). Records come back in
/// dataset order regardless of `jobs`; skipped examples are omitted.
std::vector<RunRecord> run_experiment(const LanguageModel& model, const DecoderSpec& spec, const Dataset& dataset,
                                      const Utility& utility, const ValueFactory* values, const RunOptions& options);

struct AlignmentSummary {
  /// Tau per record; nullopt when undefined (ties or fewer than two candidates).
  std::vector<std::optional<double>> per_example;
  double mean_tau = 0.0;
  std::size_t excluded = 0;
};

AlignmentSummary candidate_alignment(std::span<const RunRecord> records, std::size_t top_c = 5);

// ---------------------------------------------------------------------------
// Oracles and planted tasks

struct OracleRow {
  Sequence seq;
  double logprob = 0.0;
  double utility = 0.0;
};

struct OracleResult {
  Sequence argmax_likelihood;
  Sequence argmax_utility;
  std::vector<OracleRow> table;
};

OracleResult brute_force_oracle(const LanguageModel& model, const Utility& utility, std::span<const TokenId> reference,
                                const Context& context, int max_len, std::uint64_t cap = kDefaultEnumerationCap);

struct PlantedTask {
  std::shared_ptr<const TabularLM> model;
  int max_len = 0;
  std::vector<ScoredSequence> sequences;
  std::map<Sequence, double> utility;
  double spearman = 0.0;
  double pearson = 0.0;
};

/// Random tabular LM plus a utility table whose rank correlation with the
/// log-likelihood over the whole output space is close to `rho_target`.
PlantedTask generate_misaligned_task(std::uint64_t seed, int vocab_size, int max_len, double rho_target,
                                     std::uint64_t cap = kDefaultEnumerationCap);

struct TranslationTaskOptions {
  int examples = 200;
  int content_tokens = 10;
  int min_target_len = 4;
  int max_target_len = 6;
  /// Fraction of examples whose reference is also the likelihood favourite.
  double aligned_fraction = 0.25;
};

struct TranslationTask {
  std::shared_ptr<const TabularLM> model;
  Dataset dataset;
};

/// Translation-like task: per source context the model prefers a fluent
/// distractor over the reference on most examples.
TranslationTask make_translation_task(std::uint64_t seed, const TranslationTaskOptions& options = {});

// ---------------------------------------------------------------------------
// Value-quality sweeps

struct SweepSpec {
  std::vector<double> quality_grid;
  std::vector<DecoderKind> decoders{DecoderKind::kBeam, DecoderKind::kVgbs};
  std::vector<double> alpha_grid{std::begin(kDefaultAlphaGrid), std::end(kDefaultAlphaGrid)};
  std::vector<double> cpuct_grid{std::begin(kDefaultCpuctGrid), std::end(kDefaultCpuctGrid)};
  int bootstrap_resamples = 10'000;
  std::uint64_t seed = 0;
  int jobs = 1;
};

struct SweepRow {
  std::string decoder;
  double quality = 0.0;
  /// alpha for vgbs, c_puct for mcts; nullopt for likelihood-only decoders.
  std::optional<double> selected;
  std::size_t n = 0;
  MeanCI utility;
};

/// For each quality level: grid-search the value weight on `dev`, then
/// evaluate on `test`. Likelihood-only decoders are evaluated once.
std::vector<SweepRow> sweep_value_quality(const LanguageModel& model, const DecoderSpec& base, const Dataset& dev,
                                          const Dataset& test, const Utility& utility,
                                          const std::function<ValueFactory(double quality)>& values, const SweepSpec& spec);

double mean_utility(std::span<const RunRecord> records);

// ---------------------------------------------------------------------------
// Results files

struct SummaryRow {
  std::string decoder;
  std::string params_digest;
  std::size_t n = 0;
  MeanCI utility;
  std::optional<Correlation> pearson;
  std::optional<double> mean_tau;
  std::size_t tau_excluded = 0;
};

std::string record_to_json_line(const RunRecord& record);
RunRecord record_from_json_line(std::string_view line);
std::vector<RunRecord> read_results_file(const std::filesystem::path& path);
void write_results_file(const std::filesystem::path& path, std::span<const RunRecord> records);

/// Aggregates one run; records with errors are ignored.
SummaryRow summarize(std::span<const RunRecord> records, std::size_t top_c, int bootstrap_resamples, std::uint64_t seed);
void write_summary_csv(const std::filesystem::path& path, std::span<const SummaryRow> rows);
std::string summary_csv_header();
std::string summary_csv_line(const SummaryRow& row);
/// Rows of cx,cy,count,mean.
void write_hexbin_csv(const std::filesystem::path& path, const HexGrid& grid);

}  // namespace decalign
