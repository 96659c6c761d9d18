#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "fixtures.hpp"

using namespace decalign;
using fixtures::ids;

namespace {

DecodeParams params(int max_len, int beams) {
  DecodeParams p;
  p.max_len = max_len;
  p.num_beams = beams;
  return p;
}

}  // namespace

TEST_CASE("greedy examples") {
  auto lm = fixtures::two_level_lm();
  auto r = greedy_decode(lm, Context{}, params(5, 1));
  CHECK(r.best.seq == Sequence{0, 2});
  CHECK(r.best.logprob == doctest::Approx(std::log(0.6) + std::log(0.7)).epsilon(1e-12));
  CHECK(r.counters.lm_calls == 2);
  CHECK(r.candidates.size() == 1);

  auto adv = fixtures::adversarial_lm();
  auto g = greedy_decode(adv, Context{}, params(2, 1));
  CHECK(g.best.seq == Sequence{0, 2});
  CHECK(std::exp(g.best.logprob) == doctest::Approx(0.40));

  TabularLM flat(fixtures::abc_vocab(), {{{}, {}, {0.4, 0.4, 0.2}}}, std::vector<double>{0.0, 0.0, 1.0});
  CHECK(greedy_decode(flat, Context{}, params(3, 1)).best.seq.front() == 0);
}

TEST_CASE("greedy at max_len without EOS") {
  TabularLM loop(fixtures::abc_vocab(), {}, std::vector<double>{0.9, 0.05, 0.05});
  auto r = greedy_decode(loop, Context{}, params(4, 1));
  CHECK(r.best.seq == Sequence{0, 0, 0, 0});
  CHECK(r.best.finished);
  CHECK(r.counters.lm_calls == 4);
}

TEST_CASE("beam on the greedy-adversarial fixture") {
  auto adv = fixtures::adversarial_lm();
  auto b = beam_decode(adv, Context{}, params(2, 2));
  CHECK(b.best.seq == Sequence{1, 2});
  CHECK(std::exp(b.best.logprob) == doctest::Approx(0.405));
  CHECK(b.candidates.size() <= 2);
  for (std::size_t i = 1; i < b.candidates.size(); ++i) CHECK(b.candidates[i - 1].logprob >= b.candidates[i].logprob);
}

TEST_CASE("beam with one beam equals greedy") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto lm = fixtures::random_tabular_lm(seed, 4, 4, true);
    auto g = greedy_decode(*lm, Context{}, params(4, 1));
    auto b = beam_decode(*lm, Context{}, params(4, 1));
    CHECK(g.best.seq == b.best.seq);
    CHECK(g.best.logprob == b.best.logprob);
  }
}

TEST_CASE("wide beam finds the likelihood argmax") {
  for (std::uint64_t seed = 100; seed < 160; ++seed) {
    Rng r(seed);
    const int V = 2 + static_cast<int>(r.below(5));
    const int L = 1 + static_cast<int>(r.below(5));
    auto lm = fixtures::random_tabular_lm(seed, V, L, seed % 3 == 0);
    auto all = fixtures::brute_force(*lm, Context{}, L);
    if (all.size() > 400) continue;
    auto best = fixtures::argmax_likelihood(all);
    auto b = beam_decode(*lm, Context{}, params(L, static_cast<int>(all.size())));
    CHECK(b.best.seq == best.seq);
    CHECK(b.best.logprob == doctest::Approx(best.logprob).epsilon(1e-12));
  }
}

TEST_CASE("beam score is monotone in width") {
  for (std::uint64_t seed = 0; seed < 40; ++seed) {
    auto lm = fixtures::random_tabular_lm(seed, 5, 4);
    double prev = -std::numeric_limits<double>::infinity();
    for (int B : {1, 2, 4, 8}) {
      const double lp = beam_decode(*lm, Context{}, params(4, B)).best.logprob;
      CHECK(lp >= prev - 1e-12);
      prev = lp;
    }
  }
}

TEST_CASE("decoder outputs carry their recomputed logprob") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto lm = fixtures::random_tabular_lm(seed, 4, 4, true);
    DecodeParams p = params(4, 3);
    p.seed = seed;
    std::vector<DecodeResult> runs{greedy_decode(*lm, Context{}, p), beam_decode(*lm, Context{}, p),
                                   sample_decode(*lm, Context{}, p, SamplerParams{}),
                                   stochastic_beam_decode(*lm, Context{}, p)};
    for (const auto& r : runs) {
      for (const auto& c : r.candidates) {
        CHECK(c.logprob == doctest::Approx(sequence_logprob(*lm, Context{}, c.seq)).epsilon(1e-9));
        CHECK(c.finished);
      }
    }
  }
}

TEST_CASE("beam call counts stay within N x B") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto lm = fixtures::random_tabular_lm(seed, 5, 5);
    for (int B : {1, 3, 5}) {
      auto r = beam_decode(*lm, Context{}, params(5, B));
      CHECK(r.counters.lm_calls <= static_cast<std::int64_t>(r.steps) * B);
      CHECK(r.counters.value_calls == 0);
    }
  }
}

TEST_CASE("length normalization changes only the final ranking") {
  // a</s> = .4 (len 2); b b </s> = .5 * .9 * .95 = .4275 (len 3).
  TabularLM lm(fixtures::abc_vocab(),
               {{{}, {}, {0.4, 0.5, 0.1}}, {{}, {0}, {0.0, 0.0, 1.0}}, {{}, {1}, {0.0, 0.9, 0.1}}, {{}, {1, 1}, {0.0, 0.05, 0.95}}});
  DecodeParams p = params(3, 3);
  auto raw = beam_decode(lm, Context{}, p);
  CHECK(raw.best.seq == Sequence{1, 1, 2});
  p.length_normalize_final = true;
  auto norm = beam_decode(lm, Context{}, p);
  CHECK(norm.best.seq == Sequence{1, 1, 2});
  // per-token: log(.4)/2 = -0.458 vs log(.4275)/3 = -0.283
  TabularLM lm2(fixtures::abc_vocab(),
                {{{}, {}, {0.45, 0.5, 0.05}}, {{}, {0}, {0.0, 0.0, 1.0}}, {{}, {1}, {0.0, 0.9, 0.1}}, {{}, {1, 1}, {0.0, 0.05, 0.95}}});
  CHECK(beam_decode(lm2, Context{}, params(3, 3)).best.seq == Sequence{0, 2});
  p.length_normalize_final = true;
  CHECK(beam_decode(lm2, Context{}, p).best.seq == Sequence{1, 1, 2});
}

// ---------------------------------------------------------------------------
// Processors

TEST_CASE("processor examples") {
  Vocabulary v = fixtures::abc_vocab();
  const std::vector<double> logits{std::log(0.05), std::log(0.05), std::log(0.9)};
  std::vector<LogitsProcessorSpec> minlen{MinLength{3}};
  auto out = process_logits(v, Sequence{0}, logits, minlen);
  CHECK(out[2] == kNegInf);
  CHECK(out[0] == logits[0]);

  std::vector<LogitsProcessorSpec> ngram{NoRepeatNgram{2}};
  auto rep = process_logits(v, ids(v, {"a", "b", "a"}), logits, ngram);
  CHECK(rep[1] == kNegInf);
  CHECK(rep[0] == logits[0]);
  CHECK(rep[2] == logits[2]);

  std::vector<LogitsProcessorSpec> none{BanTokens{}};
  CHECK(process_logits(v, Sequence{}, logits, none) == logits);

  std::vector<LogitsProcessorSpec> all{BanTokens{{0, 1, 2}}};
  CHECK_FALSE(has_support(process_logits(v, Sequence{}, logits, all)));

  CHECK_THROWS_AS(validate_processors(std::vector<LogitsProcessorSpec>{MinLength{6}}, 5), Error);
  CHECK_THROWS_AS(validate_processors(std::vector<LogitsProcessorSpec>{NoRepeatNgram{0}}, 5), Error);
}

TEST_CASE("min length steers greedy away from EOS") {
  TabularLM lm(fixtures::abc_vocab(), {}, std::vector<double>{0.06, 0.04, 0.9});
  auto plain = greedy_decode(lm, Context{}, params(5, 1));
  CHECK(plain.best.seq == Sequence{2});
  DecodeParams p = params(5, 1);
  p.heuristics.push_back(MinLength{3});
  auto r = greedy_decode(lm, Context{}, p);
  CHECK(r.best.seq == Sequence{0, 0, 0, 2});
}

TEST_CASE("banning every token is an empty-support error") {
  auto lm = fixtures::two_level_lm();
  DecodeParams p = params(3, 2);
  p.heuristics.push_back(BanTokens{{0, 1, 2}});
  for (auto run : {&greedy_decode, &beam_decode}) {
    try {
      run(lm, Context{}, p);
      FAIL("expected empty support");
    } catch (const Error& e) {
      CHECK(e.kind() == ErrorKind::kEmptySupport);
    }
  }
}

TEST_CASE("no-repeat ban holds on decoded outputs") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto lm = fixtures::random_tabular_lm(seed, 3, 6);
    DecodeParams p = params(6, 3);
    p.heuristics.push_back(NoRepeatNgram{2});
    DecodeResult r;
    try {
      r = beam_decode(*lm, Context{}, p);
    } catch (const Error&) {
      continue;
    }
    std::set<std::pair<TokenId, TokenId>> seen;
    for (std::size_t i = 1; i < r.best.seq.size(); ++i) CHECK(seen.insert({r.best.seq[i - 1], r.best.seq[i]}).second);
  }
}

// ---------------------------------------------------------------------------
// Sampling

TEST_CASE("sampling support examples") {
  const std::vector<double> lp{std::log(0.5), std::log(0.3), std::log(0.15), std::log(0.05)};
  auto top_p = sampling_support(lp, SamplerParams{1.0, 0, 0.8});
  CHECK(top_p.tokens == std::vector<TokenId>{0, 1});
  CHECK(top_p.probs[0] == doctest::Approx(0.625));
  auto top_k = sampling_support(lp, SamplerParams{1.0, 2, 1.0});
  CHECK(top_k.tokens == std::vector<TokenId>{0, 1});
  auto full = sampling_support(lp, SamplerParams{});
  CHECK(full.tokens.size() == 4);
  auto tiny = sampling_support(lp, SamplerParams{1.0, 0, 1e-9});
  CHECK(tiny.tokens == std::vector<TokenId>{0});
}

TEST_CASE("low temperature sampling equals greedy") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto lm = fixtures::random_tabular_lm(seed, 4, 4);
    DecodeParams p = params(4, 1);
    p.seed = seed;
    auto g = greedy_decode(*lm, Context{}, p);
    auto s = sample_decode(*lm, Context{}, p, SamplerParams{1e-4, 2, 0.9});
    CHECK(g.best.seq == s.best.seq);
  }
}

TEST_CASE("sampling is seeded and stays inside the declared support") {
  auto lm = fixtures::random_tabular_lm(9, 5, 5);
  const SamplerParams sp{0.8, 3, 0.7};
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    DecodeParams p = params(5, 1);
    p.seed = seed;
    auto a = sample_decode(*lm, Context{}, p, sp);
    auto b = sample_decode(*lm, Context{}, p, sp);
    CHECK(a.best.seq == b.best.seq);
    for (std::size_t i = 0; i < a.best.seq.size(); ++i) {
      const auto row = lm->next_token_logprobs(Context{}, std::span(a.best.seq).first(i));
      const auto support = sampling_support(row, sp);
      CHECK(std::find(support.tokens.begin(), support.tokens.end(), a.best.seq[i]) != support.tokens.end());
    }
  }
}

TEST_CASE("pure sampling matches the model distribution") {
  auto lm = fixtures::adversarial_lm();
  std::map<Sequence, int> counts;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    DecodeParams p = params(2, 1);
    p.seed = static_cast<std::uint64_t>(i);
    counts[sample_decode(lm, Context{}, p, SamplerParams{}).best.seq]++;
  }
  double tv = 0.0;
  for (const auto& s : enumerate_sequences(lm, Context{}, 2)) tv += std::abs(std::exp(s.logprob) - counts[s.seq] / double(n));
  CHECK(tv / 2 < 0.02);
}

// ---------------------------------------------------------------------------
// Stochastic beams

TEST_CASE("conditioned gumbel identity") {
  CHECK(conditioned_gumbel(1.5, 2.0, 2.0) == doctest::Approx(1.5).epsilon(1e-12));
  CHECK(conditioned_gumbel(-3.0, 0.7, 0.7) == doctest::Approx(-3.0).epsilon(1e-12));
  CHECK(conditioned_gumbel(1.5, 2.0, 1.0) < 1.5);
  // Direct formula when well conditioned.
  const double T = 0.3, Z = 1.1, g = 0.2;
  CHECK(conditioned_gumbel(T, Z, g) == doctest::Approx(-std::log(std::exp(-T) - std::exp(-Z) + std::exp(-g))).epsilon(1e-12));
}

TEST_CASE("stochastic beams: conditioning identity at every expansion") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto lm = fixtures::random_tabular_lm(seed, 5, 4, true);
    DecodeParams p = params(4, 4);
    p.seed = seed;
    int expansions = 0;
    stochastic_beam_decode(*lm, Context{}, p, [&](double parent, std::span<const double> kids) {
      ++expansions;
      double m = -std::numeric_limits<double>::infinity();
      for (double k : kids) {
        CHECK(k <= parent + 1e-9);
        m = std::max(m, k);
      }
      CHECK(std::abs(m - parent) < 1e-9);
    });
    CHECK(expansions > 0);
  }
}

TEST_CASE("stochastic beams: distinct outputs and exhaustion") {
  auto lm = fixtures::adversarial_lm();
  const auto all = enumerate_sequences(lm, Context{}, 2);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    DecodeParams p = params(2, static_cast<int>(all.size()));
    p.seed = seed;
    auto r = stochastic_beam_decode(lm, Context{}, p);
    std::set<Sequence> got;
    for (const auto& c : r.candidates) got.insert(c.seq);
    CHECK(got.size() == r.candidates.size());
    CHECK(got.size() == all.size());
  }
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto rl = fixtures::random_tabular_lm(seed, 4, 4);
    DecodeParams p = params(4, 6);
    p.seed = seed;
    auto r = stochastic_beam_decode(*rl, Context{}, p);
    std::set<Sequence> got;
    for (const auto& c : r.candidates) got.insert(c.seq);
    CHECK(got.size() == r.candidates.size());
    CHECK(r.counters.lm_calls <= static_cast<std::int64_t>(r.steps) * 6);
  }
}

TEST_CASE("stochastic beams with one sample draw from the model") {
  // Sequence probabilities .405, .40, .10, .05, .045.
  Vocabulary v({"a", "b", "c", "</s>"}, "</s>");
  TabularLM lm(v, {{{}, {}, {0.5, 0.45, 0.0, 0.05}}, {{}, {0}, {0.0, 0.0, 0.2, 0.8}}, {{}, {1}, {0.0, 0.0, 0.1, 0.9}},
                   {{}, {0, 2}, {0.0, 0.0, 0.0, 1.0}}, {{}, {1, 2}, {0.0, 0.0, 0.0, 1.0}}});
  const auto all = enumerate_sequences(lm, Context{}, 3);
  REQUIRE(all.size() == 5);
  std::map<Sequence, int> counts;
  const int n = 20000;
  for (int i = 0; i < n; ++i) {
    DecodeParams p = params(3, 1);
    p.seed = static_cast<std::uint64_t>(i);
    counts[stochastic_beam_decode(lm, Context{}, p).best.seq]++;
  }
  double tv = 0.0;
  for (const auto& s : all) tv += std::abs(std::exp(s.logprob) - counts[s.seq] / double(n));
  CHECK(tv / 2 < 0.02);
}

// ---------------------------------------------------------------------------
// Constraints

TEST_CASE("constrained beam examples") {
  Vocabulary v = fixtures::abc_vocab();
  // Model prefers a a ...
  TabularLM lm(v, {{{}, {}, {0.7, 0.2, 0.1}}, {{}, {0}, {0.8, 0.1, 0.1}}, {{}, {1}, {0.5, 0.3, 0.2}}},
               std::vector<double>{0.3, 0.3, 0.4});
  const Sequence ab = ids(v, {"a", "b", "</s>"}), ba = ids(v, {"b", "a", "</s>"});
  auto spec = ConstraintSpec::from_trie(PrefixTrie(v, {ab, ba}));
  auto r = constrained_beam_decode(lm, Context{}, params(5, 2), spec);
  const double lab = sequence_logprob(lm, Context{}, ab), lba = sequence_logprob(lm, Context{}, ba);
  CHECK(r.best.seq == (lab >= lba ? ab : ba));
  for (const auto& c : r.candidates) CHECK(spec.accepts(c.seq));

  const Sequence only = ids(v, {"b", "b", "b", "</s>"});
  auto forced = constrained_beam_decode(lm, Context{}, params(5, 3), ConstraintSpec::from_trie(PrefixTrie(v, {only})));
  CHECK(forced.best.seq == only);

  auto everything = ConstraintSpec::from_predicate([&](std::span<const TokenId>) { return std::vector<TokenId>{0, 1, 2}; });
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    auto rl = fixtures::random_tabular_lm(seed, 3, 4);
    auto a = constrained_beam_decode(*rl, Context{}, params(4, 3), everything);
    auto b = beam_decode(*rl, Context{}, params(4, 3));
    CHECK(a.best.seq == b.best.seq);
  }
}

TEST_CASE("trie respects max_len and rejects open sequences") {
  Vocabulary v = fixtures::abc_vocab();
  PrefixTrie trie(v, {ids(v, {"a", "a", "a", "</s>"}), ids(v, {"b", "</s>"})});
  CHECK(trie.allowed(Sequence{}, 2) == std::vector<TokenId>{1});
  CHECK(trie.allowed(Sequence{}, 4) == std::vector<TokenId>{0, 1});
  CHECK(trie.contains(ids(v, {"b", "</s>"})));
  CHECK_FALSE(trie.contains(ids(v, {"b"})));
  CHECK_THROWS_AS(PrefixTrie(v, {ids(v, {"a", "b"})}), Error);
}

TEST_CASE("predicate dead ends raise") {
  Vocabulary v = fixtures::abc_vocab();
  TabularLM lm(v, {}, std::vector<double>{0.4, 0.4, 0.2});
  auto spec = ConstraintSpec::from_predicate([](std::span<const TokenId> prefix) {
    return prefix.empty() ? std::vector<TokenId>{0} : std::vector<TokenId>{};
  });
  try {
    constrained_beam_decode(lm, Context{}, params(4, 2), spec);
    FAIL("dead end not reported");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::kConstraintDeadEnd);
  }
  CHECK_THROWS_AS(ConstraintSpec::from_predicate([](std::span<const TokenId>) { return std::vector<TokenId>{}; }), Error);
}

TEST_CASE("constrained outputs are always trie members") {
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    auto lm = fixtures::random_tabular_lm(seed, 4, 4);
    const auto all = enumerate_sequences(*lm, Context{}, 4);
    std::vector<Sequence> members;
    Rng r(seed);
    for (const auto& s : all) {
      if (s.seq.back() == lm->vocab().eos_id() && r.uniform_open() < 0.1) members.push_back(s.seq);
    }
    if (members.empty()) continue;
    auto spec = ConstraintSpec::from_trie(PrefixTrie(lm->vocab(), members));
    auto out = constrained_beam_decode(*lm, Context{}, params(4, 2), spec);
    for (const auto& c : out.candidates) CHECK(spec.accepts(c.seq));
  }
}
