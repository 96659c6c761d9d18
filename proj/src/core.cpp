#include "decalign/core.hpp"

#include <algorithm>
#include <cmath>

namespace decalign {

Vocabulary::Vocabulary(std::vector<std::string> tokens, TokenId eos_id)
    : tokens_(std::move(tokens)), eos_id_(eos_id) {
  if (tokens_.empty()) throw Error(ErrorKind::kInvalidArgument, "vocabulary is empty");
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    if (tokens_[i].empty()) throw Error(ErrorKind::kInvalidArgument, "empty token string at index " + std::to_string(i));
    if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
      throw Error(ErrorKind::kInvalidArgument, "duplicate token '" + tokens_[i] + "'");
    }
  }
  if (!contains(eos_id_)) throw Error(ErrorKind::kInvalidArgument, "eos id out of range");
}

Vocabulary::Vocabulary(std::vector<std::string> tokens, std::string_view eos) {
  auto it = std::find(tokens.begin(), tokens.end(), eos);
  if (it == tokens.end()) throw Error(ErrorKind::kInvalidArgument, "eos token '" + std::string(eos) + "' not in vocabulary");
  auto id = static_cast<TokenId>(it - tokens.begin());
  *this = Vocabulary(std::move(tokens), id);
}

const std::string& Vocabulary::token(TokenId id) const {
  if (!contains(id)) throw Error(ErrorKind::kInvalidSequence, "token id " + std::to_string(id) + " out of range");
  return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::id_of(std::string_view token) const {
  auto it = index_.find(std::string(token));
  if (it == index_.end()) throw Error(ErrorKind::kInvalidSequence, "unknown token '" + std::string(token) + "'");
  return it->second;
}

Sequence Vocabulary::encode(std::span<const std::string> tokens) const {
  Sequence out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(id_of(t));
  return out;
}

std::string Vocabulary::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (i) out += ' ';
    out += token(ids[i]);
  }
  return out;
}

std::vector<double> validate_distribution(std::span<const double> logits) {
  double lse = log_sum_exp(logits);
  if (!std::isfinite(lse)) {
    if (std::isnan(lse) || lse > 0) throw Error(ErrorKind::kInvalidArgument, "distribution contains NaN or +inf");
    throw Error(ErrorKind::kEmptySupport, "empty support: every logit is -inf");
  }
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

void validate_sequence(const Vocabulary& vocab, std::span<const TokenId> seq) {
  for (std::size_t i = 0; i < seq.size(); ++i) {
    if (!vocab.contains(seq[i])) {
      throw Error(ErrorKind::kInvalidSequence, "token id " + std::to_string(seq[i]) + " out of range at position " + std::to_string(i));
    }
    if (seq[i] == vocab.eos_id() && i + 1 != seq.size()) {
      throw Error(ErrorKind::kInvalidSequence, "token after EOS at position " + std::to_string(i + 1));
    }
  }
}

void validate_context(const Vocabulary& vocab, const Context& context) {
  for (TokenId id : context.ids) {
    if (!vocab.contains(id)) throw Error(ErrorKind::kInvalidSequence, "context token id " + std::to_string(id) + " out of range");
  }
}

bool ends_with_eos(const Vocabulary& vocab, std::span<const TokenId> seq) {
  return !seq.empty() && seq.back() == vocab.eos_id();
}

bool is_finished(const Vocabulary& vocab, std::span<const TokenId> seq, int max_len) {
  return ends_with_eos(vocab, seq) || static_cast<int>(seq.size()) >= max_len;
}

double log_sum_exp(std::span<const double> xs) {
  double m = kNegInf;
  for (double x : xs) {
    if (std::isnan(x)) return x;
    m = std::max(m, x);
  }
  if (!std::isfinite(m)) return m;
  double s = 0.0;
  for (double x : xs) s += std::exp(x - m);
  return m + std::log(s);
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed ^ (stream * 0x9E3779B97F4A7C15ULL + 0xD1B54A32D192ED03ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t Rng::next_u64() {
  std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double Rng::uniform_open() {
  // 53 random mantissa bits, shifted off zero.
  return (static_cast<double>(next_u64() >> 11) + 0.5) * 0x1.0p-53;
}

std::uint64_t Rng::below(std::uint64_t n) {
  if (n == 0) throw Error(ErrorKind::kInvalidArgument, "Rng::below(0)");
  const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
  std::uint64_t x;
  do {
    x = next_u64();
  } while (x >= limit);
  return x % n;
}

bool token_order_less(std::span<const TokenId> a, std::span<const TokenId> b) {
  return std::lexicographical_compare(a.begin(), a.end(), b.begin(), b.end());
}

}  // namespace decalign
