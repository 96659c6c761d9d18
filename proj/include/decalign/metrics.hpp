#pragma once

#include <compare>
#include <filesystem>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include "decalign/core.hpp"

namespace decalign {

/// BLEU-4 against a single reference: geometric mean of modified 1..4-gram
/// precisions times min(1, exp(1 - |ref|/|hyp|)). Without smoothing any zero
/// precision gives 0; `add_one_smoothing` adds one to the counts of n >= 2.
double bleu4(std::span<const TokenId> hypothesis, std::span<const TokenId> reference, bool add_one_smoothing = false);

struct Triple {
  Sequence subject;
  Sequence relation;
  Sequence object;
  auto operator<=>(const Triple&) const = default;
};
using TripleSet = std::set<Triple>;

struct TripleMarkers {
  TokenId sub = 0;
  TokenId rel = 0;
  TokenId obj = 0;
  TokenId end = 0;
};

/// Consumes well-formed SUB s.. REL r.. OBJ o.. END spans; malformed spans are skipped.
TripleSet parse_triples(std::span<const TokenId> seq, const TripleMarkers& markers);
Sequence linearize_triples(const TripleSet& triples, const TripleMarkers& markers);
double triple_set_f1(const TripleSet& pred, const TripleSet& gold);

/// 1 - banned/total over the given tokens; 1.0 for an empty sequence.
double lexicon_nontoxicity(std::span<const TokenId> seq, const std::unordered_set<TokenId>& banned);
std::vector<std::string> read_lexicon_file(const std::filesystem::path& path);

double exact_match(std::span<const TokenId> hypothesis, std::span<const TokenId> reference);

/// Task utility u(y | x) in [0, 1]. Hypothesis and reference are generated
/// sequences; a trailing EOS is stripped before scoring except for table lookups.
class Utility {
 public:
  virtual ~Utility() = default;
  virtual double score(std::span<const TokenId> hypothesis, std::span<const TokenId> reference) const = 0;
};

using UtilityPtr = std::shared_ptr<const Utility>;

UtilityPtr make_bleu_utility(TokenId eos, bool add_one_smoothing = false);
UtilityPtr make_triple_f1_utility(TokenId eos, TripleMarkers markers);
UtilityPtr make_nontoxicity_utility(TokenId eos, std::unordered_set<TokenId> banned);
UtilityPtr make_exact_match_utility(TokenId eos);
/// Looks the full hypothesis up in a table; unknown sequences score `missing`.
UtilityPtr make_table_utility(std::map<Sequence, double> table, double missing = 0.0);

}  // namespace decalign
