#include "decalign/value.hpp"

#include <algorithm>
#include <numeric>

namespace decalign {

double value_estimate(const ValueModel& vm, const Context& context, std::span<const TokenId> prefix, CallCounters* counters) {
  if (counters) ++counters->value_calls;
  return vm.estimate(context, prefix);
}

double partial_sequence_value(const Utility& metric, std::span<const TokenId> reference, std::span<const TokenId> prefix) {
  return std::clamp(metric.score(prefix, reference), 0.0, 1.0);
}

double OracleValue::estimate(const Context&, std::span<const TokenId> prefix) const {
  return partial_sequence_value(*metric_, reference_, prefix);
}

// ---------------------------------------------------------------------------

namespace {

class BoundInterpolatedValue final : public ValueModel {
 public:
  BoundInterpolatedValue(InterpolatedOracleValue parent, std::size_t example) : parent_(std::move(parent)), example_(example) {}
  double estimate(const Context&, std::span<const TokenId> prefix) const override { return parent_.score(example_, prefix); }

 private:
  InterpolatedOracleValue parent_;
  std::size_t example_;
};

}  // namespace

InterpolatedOracleValue::InterpolatedOracleValue(UtilityPtr metric, std::vector<Sequence> targets,
                                                 std::vector<std::size_t> false_assignment, double lambda)
    : targets_(std::make_shared<const std::vector<Sequence>>(std::move(targets))),
      metric_(std::move(metric)),
      false_(std::move(false_assignment)),
      lambda_(lambda) {
  if (!(lambda_ >= 0.0 && lambda_ <= 1.0)) throw Error(ErrorKind::kInvalidArgument, "lambda must be in [0, 1]");
  if (false_.size() != targets_->size()) throw Error(ErrorKind::kInvalidArgument, "false assignment size mismatch");
  for (std::size_t i = 0; i < false_.size(); ++i) {
    if (false_[i] >= false_.size() || false_[i] == i) throw Error(ErrorKind::kInvalidArgument, "false assignment must be a derangement");
  }
}

InterpolatedOracleValue InterpolatedOracleValue::with_lambda(double lambda) const {
  InterpolatedOracleValue copy = *this;
  if (!(lambda >= 0.0 && lambda <= 1.0)) throw Error(ErrorKind::kInvalidArgument, "lambda must be in [0, 1]");
  copy.lambda_ = lambda;
  return copy;
}

double InterpolatedOracleValue::score(std::size_t example, std::span<const TokenId> prefix) const {
  const auto& targets = *targets_;
  const double truth = lambda_ > 0.0 ? partial_sequence_value(*metric_, targets.at(example), prefix) : 0.0;
  const double decoy = lambda_ < 1.0 ? partial_sequence_value(*metric_, targets.at(false_.at(example)), prefix) : 0.0;
  return std::clamp(lambda_ * truth + (1.0 - lambda_) * decoy, 0.0, 1.0);
}

ValueModelPtr InterpolatedOracleValue::bind(std::size_t example) const {
  if (example >= targets_->size()) throw Error(ErrorKind::kInvalidArgument, "example index out of range");
  return std::make_shared<BoundInterpolatedValue>(*this, example);
}

InterpolatedOracleValue make_interpolated_oracle(UtilityPtr metric, std::vector<Sequence> targets, std::uint64_t seed, double lambda) {
  const std::size_t n = targets.size();
  if (n < 2) throw Error(ErrorKind::kInvalidArgument, "a false target needs at least two examples");
  // Sattolo's shuffle: a uniformly random single cycle, hence no fixed points.
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  Rng rng(mix_seed(seed, 0xFA15E));
  for (std::size_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.below(i));
    std::swap(perm[i], perm[j]);
  }
  return InterpolatedOracleValue(std::move(metric), std::move(targets), std::move(perm), lambda);
}

// ---------------------------------------------------------------------------

std::pair<double, double> hash_uniforms(std::uint64_t seed, const Context& context, std::span<const TokenId> prefix) {
  std::uint64_t h = mix_seed(seed, 0x5EED);
  for (TokenId t : context.ids) h = mix_seed(h, static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)) + 1);
  h = mix_seed(h, 0xC0FFEE);  // context / prefix separator
  for (TokenId t : prefix) h = mix_seed(h, static_cast<std::uint64_t>(static_cast<std::uint32_t>(t)) + 1);
  const std::uint64_t h2 = mix_seed(h, 1);
  auto to_unit = [](std::uint64_t x) { return (static_cast<double>(x >> 11) + 0.5) * 0x1.0p-53; };
  return {to_unit(h), to_unit(h2)};
}

DegradedOracleValue::DegradedOracleValue(ValueModelPtr oracle, double eta, std::uint64_t seed)
    : oracle_(std::move(oracle)), eta_(eta), seed_(seed) {
  if (!(eta_ >= 0.0 && eta_ <= 1.0)) throw Error(ErrorKind::kInvalidArgument, "eta must be in [0, 1]");
  if (!oracle_) throw Error(ErrorKind::kInvalidArgument, "degraded value needs an oracle");
}

double DegradedOracleValue::estimate(const Context& context, std::span<const TokenId> prefix) const {
  const auto [decide, noise] = hash_uniforms(seed_, context, prefix);
  if (decide < eta_) return noise;
  return std::clamp(oracle_->estimate(context, prefix), 0.0, 1.0);
}

double UniformNoiseValue::estimate(const Context& context, std::span<const TokenId> prefix) const {
  return hash_uniforms(seed_, context, prefix).second;
}

LookaheadOracleValue::LookaheadOracleValue(std::span<const ScoredSequence> sequences, const Utility& utility,
                                           std::span<const TokenId> reference) {
  for (const auto& s : sequences) {
    const double u = std::clamp(utility.score(s.seq, reference), 0.0, 1.0);
    for (std::size_t len = 0; len <= s.seq.size(); ++len) {
      Sequence p(s.seq.begin(), s.seq.begin() + static_cast<std::ptrdiff_t>(len));
      auto [it, inserted] = best_.emplace(std::move(p), u);
      if (!inserted) it->second = std::max(it->second, u);
    }
  }
}

double LookaheadOracleValue::estimate(const Context&, std::span<const TokenId> prefix) const {
  auto it = best_.find(Sequence(prefix.begin(), prefix.end()));
  return it == best_.end() ? 0.0 : it->second;
}

}  // namespace decalign
