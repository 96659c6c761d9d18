#pragma once

#include <cmath>
#include <functional>
#include <map>
#include <memory>
#include <vector>

#include "decalign/analysis.hpp"

namespace fixtures {

using namespace decalign;

inline Vocabulary abc_vocab() { return Vocabulary({"a", "b", "</s>"}, "</s>"); }

// root [.5 a, .45 b, .05 eos]; after a [.1, .1, .8]; after b [.05, .05, .9].
inline TabularLM adversarial_lm() {
  return TabularLM(abc_vocab(), {{{}, {}, {0.5, 0.45, 0.05}}, {{}, {0}, {0.1, 0.1, 0.8}}, {{}, {1}, {0.05, 0.05, 0.9}}});
}

// root [.6, .3, .1]; after a [.1, .2, .7].
inline TabularLM two_level_lm() {
  return TabularLM(abc_vocab(), {{{}, {}, {0.6, 0.3, 0.1}}, {{}, {0}, {0.1, 0.2, 0.7}}},
                   std::vector<double>{1.0 / 3, 1.0 / 3, 1.0 / 3});
}

inline Vocabulary numbered_vocab(int size) {
  std::vector<std::string> names;
  for (int i = 0; i + 1 < size; ++i) names.push_back("t" + std::to_string(i));
  names.push_back("</s>");
  return Vocabulary(names, "</s>");
}

// Full tree of random rows below every non-terminal prefix shorter than
// max_len. With `zeros`, some non-EOS entries are zeroed out.
inline std::shared_ptr<TabularLM> random_tabular_lm(std::uint64_t seed, int vocab_size, int max_len, bool zeros = false) {
  Vocabulary vocab = numbered_vocab(vocab_size);
  Rng rng(seed);
  std::vector<TabularRow> rows;
  std::function<void(Sequence&)> grow = [&](Sequence& prefix) {
    std::vector<double> p(vocab.size());
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) {
      p[i] = -std::log(rng.uniform_open());
      if (zeros && static_cast<TokenId>(i) != vocab.eos_id() && rng.uniform_open() < 0.2) p[i] = 0.0;
      s += p[i];
    }
    for (auto& v : p) v /= s;
    rows.push_back({{}, prefix, p});
    if (static_cast<int>(prefix.size()) + 1 >= max_len) return;
    for (std::size_t t = 0; t < vocab.size(); ++t) {
      if (static_cast<TokenId>(t) == vocab.eos_id() || p[t] == 0.0) continue;
      prefix.push_back(static_cast<TokenId>(t));
      grow(prefix);
      prefix.pop_back();
    }
  };
  Sequence root;
  grow(root);
  return std::make_shared<TabularLM>(vocab, rows);
}

// Independent brute force: walks the tree through next_token_logprobs only.
inline std::vector<ScoredSequence> brute_force(const LanguageModel& model, const Context& ctx, int max_len) {
  std::vector<ScoredSequence> out;
  const TokenId eos = model.vocab().eos_id();
  std::function<void(Sequence&, double)> walk = [&](Sequence& seq, double lp) {
    if ((!seq.empty() && seq.back() == eos) || static_cast<int>(seq.size()) == max_len) {
      out.push_back({seq, lp});
      return;
    }
    const auto row = model.next_token_logprobs(ctx, seq);
    for (std::size_t t = 0; t < row.size(); ++t) {
      if (std::isinf(row[t])) continue;
      seq.push_back(static_cast<TokenId>(t));
      walk(seq, lp + row[t]);
      seq.pop_back();
    }
  };
  Sequence s;
  walk(s, 0.0);
  return out;
}

// Highest logprob; ties to the lexicographically smaller sequence.
inline ScoredSequence argmax_likelihood(const std::vector<ScoredSequence>& all) {
  ScoredSequence best = all.front();
  for (const auto& s : all) {
    if (s.logprob > best.logprob || (s.logprob == best.logprob && token_order_less(s.seq, best.seq))) best = s;
  }
  return best;
}

inline Sequence ids(const Vocabulary& v, std::initializer_list<const char*> toks) {
  Sequence s;
  for (const char* t : toks) s.push_back(v.id_of(t));
  return s;
}

// Small search task: a random LM whose utility is exact match against a
// reference drawn uniformly from its output space.
struct ReferenceTask {
  std::shared_ptr<TabularLM> model;
  std::vector<ScoredSequence> all;
  Sequence reference;
  std::map<Sequence, double> utility;
};

inline ReferenceTask reference_task(std::uint64_t seed, int vocab_size, int max_len) {
  ReferenceTask t;
  t.model = random_tabular_lm(seed, vocab_size, max_len);
  t.all = enumerate_sequences(*t.model, Context{}, max_len);
  Rng rng(mix_seed(seed, 0x5EF));
  t.reference = t.all[rng.below(t.all.size())].seq;
  for (const auto& s : t.all) t.utility[s.seq] = s.seq == t.reference ? 1.0 : 0.0;
  return t;
}

}  // namespace fixtures
