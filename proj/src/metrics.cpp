#include "decalign/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace decalign {

namespace {

std::span<const TokenId> strip_eos(std::span<const TokenId> seq, TokenId eos) {
  if (!seq.empty() && seq.back() == eos) return seq.first(seq.size() - 1);
  return seq;
}

std::map<Sequence, int> ngram_counts(std::span<const TokenId> seq, std::size_t n) {
  std::map<Sequence, int> counts;
  if (seq.size() < n) return counts;
  for (std::size_t i = 0; i + n <= seq.size(); ++i) ++counts[Sequence(seq.begin() + static_cast<std::ptrdiff_t>(i), seq.begin() + static_cast<std::ptrdiff_t>(i + n))];
  return counts;
}

class BleuUtility final : public Utility {
 public:
  BleuUtility(TokenId eos, bool smoothing) : eos_(eos), smoothing_(smoothing) {}
  double score(std::span<const TokenId> hyp, std::span<const TokenId> ref) const override {
    auto r = strip_eos(ref, eos_);
    if (r.empty()) return 0.0;
    return bleu4(strip_eos(hyp, eos_), r, smoothing_);
  }

 private:
  TokenId eos_;
  bool smoothing_;
};

class TripleF1Utility final : public Utility {
 public:
  TripleF1Utility(TokenId eos, TripleMarkers m) : eos_(eos), markers_(m) {}
  double score(std::span<const TokenId> hyp, std::span<const TokenId> ref) const override {
    return triple_set_f1(parse_triples(strip_eos(hyp, eos_), markers_), parse_triples(strip_eos(ref, eos_), markers_));
  }

 private:
  TokenId eos_;
  TripleMarkers markers_;
};

class NontoxicityUtility final : public Utility {
 public:
  NontoxicityUtility(TokenId eos, std::unordered_set<TokenId> banned) : eos_(eos), banned_(std::move(banned)) {}
  double score(std::span<const TokenId> hyp, std::span<const TokenId>) const override {
    return lexicon_nontoxicity(strip_eos(hyp, eos_), banned_);
  }

 private:
  TokenId eos_;
  std::unordered_set<TokenId> banned_;
};

class ExactMatchUtility final : public Utility {
 public:
  explicit ExactMatchUtility(TokenId eos) : eos_(eos) {}
  double score(std::span<const TokenId> hyp, std::span<const TokenId> ref) const override {
    return exact_match(strip_eos(hyp, eos_), strip_eos(ref, eos_));
  }

 private:
  TokenId eos_;
};

class TableUtility final : public Utility {
 public:
  TableUtility(std::map<Sequence, double> table, double missing) : table_(std::move(table)), missing_(missing) {}
  double score(std::span<const TokenId> hyp, std::span<const TokenId>) const override {
    auto it = table_.find(Sequence(hyp.begin(), hyp.end()));
    return it == table_.end() ? missing_ : it->second;
  }

 private:
  std::map<Sequence, double> table_;
  double missing_;
};

}  // namespace

double bleu4(std::span<const TokenId> hyp, std::span<const TokenId> ref, bool add_one_smoothing) {
  if (ref.empty()) throw Error(ErrorKind::kInvalidArgument, "BLEU needs a nonempty reference");
  if (hyp.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    const auto h = ngram_counts(hyp, n);
    const auto r = ngram_counts(ref, n);
    double matched = 0.0, total = 0.0;
    for (const auto& [gram, c] : h) {
      total += c;
      auto it = r.find(gram);
      if (it != r.end()) matched += std::min(c, it->second);
    }
    if (add_one_smoothing && n >= 2) {
      matched += 1.0;
      total += 1.0;
    }
    if (matched == 0.0 || total == 0.0) return 0.0;
    log_sum += std::log(matched / total);
  }
  const double c = static_cast<double>(hyp.size()), rl = static_cast<double>(ref.size());
  const double bp = c >= rl ? 1.0 : std::exp(1.0 - rl / c);
  return std::clamp(bp * std::exp(log_sum / 4.0), 0.0, 1.0);
}

TripleSet parse_triples(std::span<const TokenId> seq, const TripleMarkers& m) {
  TripleSet out;
  std::size_t i = 0;
  while (i < seq.size()) {
    if (seq[i] != m.sub) {
      ++i;
      continue;
    }
    // Try to read one SUB .. REL .. OBJ .. END span starting at i.
    Triple t;
    Sequence* field = &t.subject;
    TokenId expected = m.rel;
    std::size_t j = i + 1;
    bool ok = false;
    for (; j < seq.size(); ++j) {
      const TokenId tok = seq[j];
      if (tok == expected && !field->empty()) {
        if (expected == m.rel) {
          field = &t.relation;
          expected = m.obj;
        } else if (expected == m.obj) {
          field = &t.object;
          expected = m.end;
        } else {
          ok = true;
          break;
        }
      } else if (tok == m.sub || tok == m.rel || tok == m.obj || tok == m.end) {
        break;
      } else {
        field->push_back(tok);
      }
    }
    if (ok) {
      out.insert(std::move(t));
      i = j + 1;
    } else {
      // A SUB that broke the span may start the next one.
      i = (j < seq.size() && seq[j] == m.sub) ? j : j + 1;
    }
  }
  return out;
}

Sequence linearize_triples(const TripleSet& triples, const TripleMarkers& m) {
  Sequence out;
  for (const auto& t : triples) {
    out.push_back(m.sub);
    out.insert(out.end(), t.subject.begin(), t.subject.end());
    out.push_back(m.rel);
    out.insert(out.end(), t.relation.begin(), t.relation.end());
    out.push_back(m.obj);
    out.insert(out.end(), t.object.begin(), t.object.end());
    out.push_back(m.end);
  }
  return out;
}

double triple_set_f1(const TripleSet& pred, const TripleSet& gold) {
  if (pred.empty() && gold.empty()) return 1.0;
  if (pred.empty() || gold.empty()) return 0.0;
  std::size_t common = 0;
  for (const auto& t : pred) common += gold.count(t);
  if (common == 0) return 0.0;
  const double p = static_cast<double>(common) / static_cast<double>(pred.size());
  const double r = static_cast<double>(common) / static_cast<double>(gold.size());
  return 2.0 * p * r / (p + r);
}

double lexicon_nontoxicity(std::span<const TokenId> seq, const std::unordered_set<TokenId>& banned) {
  if (seq.empty()) return 1.0;
  const auto bad = std::count_if(seq.begin(), seq.end(), [&](TokenId t) { return banned.contains(t); });
  return std::clamp(1.0 - static_cast<double>(bad) / static_cast<double>(seq.size()), 0.0, 1.0);
}

std::vector<std::string> read_lexicon_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kLoad, "cannot open lexicon " + path.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::string tok;
    if (ls >> tok) out.push_back(tok);
  }
  return out;
}

double exact_match(std::span<const TokenId> hyp, std::span<const TokenId> ref) {
  return std::equal(hyp.begin(), hyp.end(), ref.begin(), ref.end()) ? 1.0 : 0.0;
}

UtilityPtr make_bleu_utility(TokenId eos, bool add_one_smoothing) { return std::make_shared<BleuUtility>(eos, add_one_smoothing); }
UtilityPtr make_triple_f1_utility(TokenId eos, TripleMarkers markers) { return std::make_shared<TripleF1Utility>(eos, markers); }
UtilityPtr make_nontoxicity_utility(TokenId eos, std::unordered_set<TokenId> banned) {
  return std::make_shared<NontoxicityUtility>(eos, std::move(banned));
}
UtilityPtr make_exact_match_utility(TokenId eos) { return std::make_shared<ExactMatchUtility>(eos); }
UtilityPtr make_table_utility(std::map<Sequence, double> table, double missing) {
  return std::make_shared<TableUtility>(std::move(table), missing);
}

}  // namespace decalign
