#pragma once

#include <cstdint>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

namespace decalign {

using TokenId = std::int32_t;

/// Generated tokens (never includes the conditioning context).
using Sequence = std::vector<TokenId>;

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

enum class ErrorKind {
  kInvalidArgument,
  kEmptySupport,
  kClosedHypothesis,
  kInvalidSequence,
  kEnumerationCap,
  kLoad,
  kTransport,
  kConstraintDeadEnd,
  kUndefinedCorrelation,
  kConfig,
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

class Vocabulary {
 public:
  Vocabulary() = default;
  Vocabulary(std::vector<std::string> tokens, TokenId eos_id);
  /// Looks the EOS token up by string.
  Vocabulary(std::vector<std::string> tokens, std::string_view eos);

  std::size_t size() const noexcept { return tokens_.size(); }
  TokenId eos_id() const noexcept { return eos_id_; }
  const std::string& token(TokenId id) const;
  const std::vector<std::string>& tokens() const noexcept { return tokens_; }
  TokenId id_of(std::string_view token) const;
  bool contains(TokenId id) const noexcept { return id >= 0 && static_cast<std::size_t>(id) < tokens_.size(); }
  bool contains(std::string_view token) const { return index_.contains(std::string(token)); }

  Sequence encode(std::span<const std::string> tokens) const;
  /// Space-joined token strings.
  std::string decode(std::span<const TokenId> ids) const;

  bool operator==(const Vocabulary& other) const { return tokens_ == other.tokens_ && eos_id_ == other.eos_id_; }

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, TokenId> index_;
  TokenId eos_id_ = 0;
};

/// The conditioning input x (also carries any prompt prefix).
struct Context {
  std::vector<TokenId> ids;
  bool operator==(const Context&) const = default;
};

struct ScoredHypothesis {
  Sequence seq;
  double logprob = 0.0;
  bool finished = false;
};

struct MinLength {
  int min_len = 0;
};
struct NoRepeatNgram {
  int n = 2;
};
struct BanTokens {
  std::vector<TokenId> tokens;
};
using LogitsProcessorSpec = std::variant<MinLength, NoRepeatNgram, BanTokens>;

struct DecodeParams {
  int max_len = 20;
  int num_beams = 5;
  std::uint64_t seed = 0;
  std::vector<LogitsProcessorSpec> heuristics;
  bool length_normalize_final = false;
  bool record_traces = false;
};

struct CallCounters {
  std::int64_t lm_calls = 0;
  std::int64_t value_calls = 0;
};

/// Log-softmax of `logits`. Throws kEmptySupport when every entry is -inf.
std::vector<double> validate_distribution(std::span<const double> logits);

/// Checks ids against the vocabulary and that EOS only appears last.
void validate_sequence(const Vocabulary& vocab, std::span<const TokenId> seq);
void validate_context(const Vocabulary& vocab, const Context& context);

bool ends_with_eos(const Vocabulary& vocab, std::span<const TokenId> seq);
bool is_finished(const Vocabulary& vocab, std::span<const TokenId> seq, int max_len);

/// Natural-log of sum of exponentials; -inf for an all -inf input.
double log_sum_exp(std::span<const double> xs);

/// Deterministic 64-bit mixing used to derive per-example RNG streams.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

/// splitmix64-based generator with platform-independent uniform draws.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}
  std::uint64_t next_u64();
  /// Uniform on the open interval (0, 1).
  double uniform_open();
  /// Index in [0, n).
  std::uint64_t below(std::uint64_t n);

 private:
  std::uint64_t state_;
};

/// Lexicographic order on token ids; a proper prefix orders first.
bool token_order_less(std::span<const TokenId> a, std::span<const TokenId> b);

}  // namespace decalign
