#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "decalign/core.hpp"

namespace decalign {

/// Autoregressive next-token model p(y_i | y_<i, x).
///
/// Implementations are read-only after construction and may be queried
/// concurrently. Call accounting lives in the caller-owned CallCounters.
class LanguageModel {
 public:
  virtual ~LanguageModel() = default;

  const Vocabulary& vocab() const noexcept { return vocab_; }

  /// Normalized log-probabilities over the vocabulary for the next token.
  /// Throws kClosedHypothesis if `prefix` already ends with EOS.
  std::vector<double> next_token_logprobs(const Context& context, std::span<const TokenId> prefix,
                                          CallCounters* counters = nullptr) const;

 protected:
  explicit LanguageModel(Vocabulary vocab) : vocab_(std::move(vocab)) {}
  LanguageModel(const LanguageModel&) = default;
  LanguageModel& operator=(const LanguageModel&) = default;

  virtual std::vector<double> compute_logprobs(const Context& context, std::span<const TokenId> prefix) const = 0;

 private:
  Vocabulary vocab_;
};

struct TabularRow {
  std::vector<TokenId> context;
  Sequence prefix;
  std::vector<double> probs;  // linear domain
};

/// Explicit table of next-token distributions keyed by (context, prefix).
class TabularLM final : public LanguageModel {
 public:
  TabularLM(Vocabulary vocab, const std::vector<TabularRow>& rows, std::optional<std::vector<double>> default_row = std::nullopt);

  std::size_t row_count() const noexcept { return table_.size(); }
  bool has_default() const noexcept { return default_.has_value(); }

  /// Linear-domain rows in key order; used to serialize the model.
  std::vector<TabularRow> rows() const;
  std::optional<std::vector<double>> default_row() const;

 protected:
  std::vector<double> compute_logprobs(const Context& context, std::span<const TokenId> prefix) const override;

 private:
  using Key = std::pair<std::vector<TokenId>, Sequence>;
  std::map<Key, std::vector<double>> table_;
  std::optional<std::vector<double>> default_;
};

/// Parses the structured-text table document ({vocab, eos, rows, default}).
TabularLM tabular_lm_load(std::string_view document);
TabularLM tabular_lm_load_file(const std::filesystem::path& path);
std::string tabular_lm_dump(const TabularLM& model);

/// Count-based n-gram model with additive smoothing.
class NgramLM final : public LanguageModel {
 public:
  static constexpr TokenId kBos = -1;

  NgramLM(Vocabulary vocab, int order, double smoothing, std::map<std::vector<TokenId>, std::vector<double>> counts);

  int order() const noexcept { return order_; }
  double smoothing() const noexcept { return smoothing_; }
  /// Linear probability P(token | history), history padded with kBos.
  double probability(std::span<const TokenId> history, TokenId token) const;

 protected:
  std::vector<double> compute_logprobs(const Context& context, std::span<const TokenId> prefix) const override;

 private:
  std::vector<TokenId> history_for(const Context& context, std::span<const TokenId> prefix) const;

  int order_;
  double smoothing_;
  std::map<std::vector<TokenId>, std::vector<double>> counts_;
};

/// Trains on pre-tokenized lines. Without an explicit vocabulary one is built
/// from the corpus in first-appearance order with `eos` appended.
NgramLM ngram_train(const std::vector<std::vector<std::string>>& corpus, int order, double smoothing,
                    std::optional<Vocabulary> vocab = std::nullopt, std::string_view eos = "</s>");
std::vector<std::vector<std::string>> read_corpus_file(const std::filesystem::path& path);

/// Sum of per-step next-token log-probabilities; exactly |seq| model calls.
double sequence_logprob(const LanguageModel& model, const Context& context, std::span<const TokenId> seq,
                        CallCounters* counters = nullptr);

struct ScoredSequence {
  Sequence seq;
  double logprob = 0.0;
};

inline constexpr std::uint64_t kDefaultEnumerationCap = 1'000'000;

/// Every EOS-terminated sequence of length <= max_len plus every length-max_len
/// sequence without EOS, in depth-first token-id order. Zero-probability
/// branches are skipped.
std::vector<ScoredSequence> enumerate_sequences(const LanguageModel& model, const Context& context, int max_len,
                                                std::uint64_t cap = kDefaultEnumerationCap);

}  // namespace decalign
