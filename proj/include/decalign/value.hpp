#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <vector>

#include "decalign/core.hpp"
#include "decalign/metrics.hpp"
#include "decalign/models.hpp"

namespace decalign {

/// Estimate of the expected final utility of a (possibly partial) sequence.
/// Outputs lie in [0, 1] and depend only on (context, prefix).
class ValueModel {
 public:
  virtual ~ValueModel() = default;
  virtual double estimate(const Context& context, std::span<const TokenId> prefix) const = 0;
};

using ValueModelPtr = std::shared_ptr<const ValueModel>;

/// Calls the estimator and counts one value call.
double value_estimate(const ValueModel& vm, const Context& context, std::span<const TokenId> prefix,
                      CallCounters* counters = nullptr);

/// The metric evaluated with the prefix treated as a complete hypothesis.
double partial_sequence_value(const Utility& metric, std::span<const TokenId> reference, std::span<const TokenId> prefix);

/// Utility against a fixed reference, scored on the prefix as-is.
class OracleValue final : public ValueModel {
 public:
  OracleValue(UtilityPtr metric, Sequence reference) : metric_(std::move(metric)), reference_(std::move(reference)) {}
  double estimate(const Context& context, std::span<const TokenId> prefix) const override;

 private:
  UtilityPtr metric_;
  Sequence reference_;
};

/// lambda * u(prefix, true target) + (1 - lambda) * u(prefix, false target).
/// The false-target assignment is a fixed derangement of the dataset.
class InterpolatedOracleValue {
 public:
  InterpolatedOracleValue(UtilityPtr metric, std::vector<Sequence> targets, std::vector<std::size_t> false_assignment,
                          double lambda);

  double lambda() const noexcept { return lambda_; }
  const std::vector<std::size_t>& false_assignment() const noexcept { return false_; }
  InterpolatedOracleValue with_lambda(double lambda) const;

  double score(std::size_t example, std::span<const TokenId> prefix) const;
  /// Value model for one example of the dataset.
  ValueModelPtr bind(std::size_t example) const;

 private:
  std::shared_ptr<const std::vector<Sequence>> targets_;
  UtilityPtr metric_;
  std::vector<std::size_t> false_;
  double lambda_;
};

/// Builds the false-target derangement from `seed`. Needs at least two targets.
InterpolatedOracleValue make_interpolated_oracle(UtilityPtr metric, std::vector<Sequence> targets, std::uint64_t seed,
                                                 double lambda = 1.0);

/// With probability eta (decided by hashing (seed, context, prefix)) the oracle
/// output is replaced by a pseudo-random uniform score.
class DegradedOracleValue final : public ValueModel {
 public:
  DegradedOracleValue(ValueModelPtr oracle, double eta, std::uint64_t seed);
  double estimate(const Context& context, std::span<const TokenId> prefix) const override;

 private:
  ValueModelPtr oracle_;
  double eta_;
  std::uint64_t seed_;
};

/// Hash-based uniform noise in [0, 1]; the eta = 1 end of the ladder.
class UniformNoiseValue final : public ValueModel {
 public:
  explicit UniformNoiseValue(std::uint64_t seed) : seed_(seed) {}
  double estimate(const Context& context, std::span<const TokenId> prefix) const override;

 private:
  std::uint64_t seed_;
};

/// For enumerable tasks: the best utility reachable from the prefix among the
/// enumerated complete sequences (exact utility for complete ones).
class LookaheadOracleValue final : public ValueModel {
 public:
  LookaheadOracleValue(std::span<const ScoredSequence> sequences, const Utility& utility, std::span<const TokenId> reference);
  double estimate(const Context& context, std::span<const TokenId> prefix) const override;

 private:
  std::map<Sequence, double> best_;
};

/// Two independent uniforms in (0, 1) derived from (seed, context, prefix).
std::pair<double, double> hash_uniforms(std::uint64_t seed, const Context& context, std::span<const TokenId> prefix);

}  // namespace decalign
