#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "decalign/core.hpp"
#include "decalign/models.hpp"

namespace decalign {

// ---------------------------------------------------------------------------
// Logits processors

void validate_processors(std::span<const LogitsProcessorSpec> processors, int max_len);

/// Applies the processors in order to a copy of `logits`. The result may be
/// all -inf; use has_support() to detect that.
std::vector<double> process_logits(const Vocabulary& vocab, std::span<const TokenId> prefix, std::span<const double> logits,
                                   std::span<const LogitsProcessorSpec> processors);

bool has_support(std::span<const double> logits);

// ---------------------------------------------------------------------------
// Constraints

/// Prefix trie over a finite set of valid EOS-terminated outputs.
class PrefixTrie {
 public:
  PrefixTrie(const Vocabulary& vocab, const std::vector<Sequence>& sequences);

  /// Tokens extending `prefix` toward some member of length <= max_len.
  std::vector<TokenId> allowed(std::span<const TokenId> prefix, int max_len) const;
  bool contains(std::span<const TokenId> seq) const;
  std::size_t size() const noexcept { return count_; }

 private:
  struct Node {
    std::map<TokenId, int> children;
    bool terminal = false;
    int min_remaining = 0;  // shortest distance to a terminal node
  };
  const Node* find(std::span<const TokenId> prefix) const;

  std::vector<Node> nodes_;
  std::size_t count_ = 0;
};

using AllowedTokensFn = std::function<std::vector<TokenId>(std::span<const TokenId> prefix)>;

/// Either a trie of valid outputs or an opaque prefix -> allowed-set predicate.
class ConstraintSpec {
 public:
  static ConstraintSpec from_trie(PrefixTrie trie);
  static ConstraintSpec from_predicate(AllowedTokensFn fn);

  std::vector<TokenId> allowed(std::span<const TokenId> prefix, int max_len) const;
  /// Accepted by the trie, or every step admitted by the predicate.
  bool accepts(std::span<const TokenId> seq) const;
  bool is_trie() const noexcept { return trie_ != nullptr; }

 private:
  std::shared_ptr<const PrefixTrie> trie_;
  AllowedTokensFn predicate_;
};

// ---------------------------------------------------------------------------
// Results

struct StepTrace {
  int step = 0;
  /// Hypotheses selected at this step (live and newly finished), in selection order.
  std::vector<ScoredHypothesis> selected;
};

struct DecodeResult {
  ScoredHypothesis best;
  /// Final pool sorted by logprob, descending.
  std::vector<ScoredHypothesis> candidates;
  std::vector<StepTrace> step_traces;
  CallCounters counters;
  std::uint64_t seed_used = 0;
  /// Decoding steps performed (N in the call-count contracts).
  int steps = 0;
};

/// Sorts by logprob descending; ties by token order, shorter first.
void sort_by_logprob(std::vector<ScoredHypothesis>& hyps);

// ---------------------------------------------------------------------------
// Decoders

DecodeResult greedy_decode(const LanguageModel& model, const Context& context, const DecodeParams& params);

DecodeResult beam_decode(const LanguageModel& model, const Context& context, const DecodeParams& params);

struct SamplerParams {
  double temperature = 1.0;
  int top_k = 0;       // 0 disables
  double top_p = 1.0;  // 1 disables
};

/// Token ids that may be sampled from `logits` after temperature and truncation,
/// with their renormalized probabilities.
struct SamplingSupport {
  std::vector<TokenId> tokens;
  std::vector<double> probs;
};
SamplingSupport sampling_support(std::span<const double> logits, const SamplerParams& sampler);

DecodeResult sample_decode(const LanguageModel& model, const Context& context, const DecodeParams& params,
                           const SamplerParams& sampler);

/// Receives (parent perturbed score, children perturbed scores) per expansion.
using ExpansionObserver = std::function<void(double parent, std::span<const double> children)>;

/// Draws num_beams distinct complete sequences without replacement.
DecodeResult stochastic_beam_decode(const LanguageModel& model, const Context& context, const DecodeParams& params,
                                    const ExpansionObserver& observer = {});

/// -log(exp(-parent) - exp(-max_child) + exp(-child)), evaluated in log space.
double conditioned_gumbel(double parent, double max_child, double child);

DecodeResult constrained_beam_decode(const LanguageModel& model, const Context& context, const DecodeParams& params,
                                     const ConstraintSpec& constraint);

}  // namespace decalign
