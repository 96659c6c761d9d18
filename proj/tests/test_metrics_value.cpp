#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>

#include "fixtures.hpp"

using namespace decalign;

namespace {

// Straight textbook BLEU-4 used as an oracle.
double reference_bleu(const Sequence& hyp, const Sequence& ref, bool smooth) {
  if (hyp.empty()) return 0.0;
  double log_sum = 0.0;
  for (std::size_t n = 1; n <= 4; ++n) {
    std::map<Sequence, int> h, r;
    for (std::size_t i = 0; i + n <= hyp.size(); ++i) h[Sequence(hyp.begin() + i, hyp.begin() + i + n)]++;
    for (std::size_t i = 0; i + n <= ref.size(); ++i) r[Sequence(ref.begin() + i, ref.begin() + i + n)]++;
    double match = 0, total = 0;
    for (const auto& [g, c] : h) {
      total += c;
      match += std::min(c, r.count(g) ? r[g] : 0);
    }
    if (smooth && n >= 2) {
      match += 1;
      total += 1;
    }
    if (match == 0 || total == 0) return 0.0;
    log_sum += std::log(match / total) / 4.0;
  }
  const double bp = std::min(1.0, std::exp(1.0 - double(ref.size()) / double(hyp.size())));
  return bp * std::exp(log_sum);
}

const TripleMarkers kMarkers{10, 11, 12, 13};

}  // namespace

TEST_CASE("bleu examples") {
  CHECK(bleu4(Sequence{1, 2, 3, 4, 5}, Sequence{1, 2, 3, 4, 5}) == doctest::Approx(1.0));
  CHECK(bleu4(Sequence{}, Sequence{1, 2, 3, 4}) == 0.0);
  CHECK(bleu4(Sequence{1, 2, 3, 4}, Sequence{1, 2, 3, 4, 5}) == doctest::Approx(std::exp(1.0 - 5.0 / 4.0)).epsilon(1e-12));
  CHECK(std::exp(1.0 - 5.0 / 4.0) == doctest::Approx(0.7788).epsilon(1e-4));
  CHECK(bleu4(Sequence{1, 2}, Sequence{1, 2, 3, 4}) == 0.0);
  CHECK_THROWS_AS(bleu4(Sequence{1}, Sequence{}), Error);
}

TEST_CASE("bleu agrees with a textbook implementation") {
  Rng rng(12);
  for (int trial = 0; trial < 2000; ++trial) {
    Sequence h(rng.below(9)), r(1 + rng.below(9));
    for (auto& t : h) t = static_cast<TokenId>(rng.below(4));
    for (auto& t : r) t = static_cast<TokenId>(rng.below(4));
    const bool smooth = trial % 2 == 1;
    CHECK(bleu4(h, r, smooth) == doctest::Approx(reference_bleu(h, r, smooth)).epsilon(1e-12));
    const double b = bleu4(h, r, smooth);
    CHECK(b >= 0.0);
    CHECK(b <= 1.0);
  }
}

TEST_CASE("bleu is invariant to relabeling tokens") {
  Rng rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    Sequence h(4 + rng.below(5)), r(4 + rng.below(5));
    for (auto& t : h) t = static_cast<TokenId>(rng.below(5));
    for (auto& t : r) t = static_cast<TokenId>(rng.below(5));
    std::vector<TokenId> perm(5);
    std::iota(perm.begin(), perm.end(), 0);
    for (std::size_t i = 4; i > 0; --i) std::swap(perm[i], perm[rng.below(i + 1)]);
    Sequence hp = h, rp = r;
    for (auto& t : hp) t = perm[static_cast<std::size_t>(t)];
    for (auto& t : rp) t = perm[static_cast<std::size_t>(t)];
    CHECK(bleu4(h, r) == bleu4(hp, rp));
    CHECK(bleu4(h, h) == doctest::Approx(1.0));
  }
}

TEST_CASE("triple f1 examples") {
  const Triple t1{{1}, {2}, {3}}, t2{{4}, {5}, {6}};
  CHECK(triple_set_f1({t1, t2}, {t1, t2}) == 1.0);
  CHECK(triple_set_f1({t1}, {t1, t2}) == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(triple_set_f1({t1}, {t2}) == 0.0);
  CHECK(triple_set_f1({}, {}) == 1.0);
  CHECK(triple_set_f1({}, {t1}) == 0.0);
  CHECK(triple_set_f1({t1}, {}) == 0.0);
}

TEST_CASE("triple parsing skips malformed spans") {
  const Sequence good{10, 1, 11, 2, 12, 3, 13};
  CHECK(parse_triples(good, kMarkers) == TripleSet{Triple{{1}, {2}, {3}}});
  // Missing relation text, then a valid triple.
  const Sequence mixed{10, 1, 11, 12, 3, 13, 10, 4, 4, 11, 5, 12, 6, 13};
  CHECK(parse_triples(mixed, kMarkers) == TripleSet{Triple{{4, 4}, {5}, {6}}});
  // Truncated tail.
  const Sequence tail{10, 1, 11, 2, 12, 3, 13, 10, 7, 11};
  CHECK(parse_triples(tail, kMarkers).size() == 1);
  // A SUB inside a broken span restarts parsing there.
  const Sequence restart{10, 1, 10, 2, 11, 3, 12, 4, 13};
  CHECK(parse_triples(restart, kMarkers) == TripleSet{Triple{{2}, {3}, {4}}});
  // Duplicates collapse.
  CHECK(parse_triples(Sequence{10, 1, 11, 2, 12, 3, 13, 10, 1, 11, 2, 12, 3, 13}, kMarkers).size() == 1);
}

TEST_CASE("triple round trip and symmetry") {
  Rng rng(8);
  for (int trial = 0; trial < 300; ++trial) {
    TripleSet set;
    const auto n = rng.below(4);
    for (std::uint64_t i = 0; i < n; ++i) {
      Triple t;
      for (Sequence* part : {&t.subject, &t.relation, &t.object}) {
        part->resize(1 + rng.below(3));
        for (auto& x : *part) x = static_cast<TokenId>(rng.below(6));
      }
      set.insert(t);
    }
    CHECK(parse_triples(linearize_triples(set, kMarkers), kMarkers) == set);
    TripleSet other;
    for (const auto& t : set) {
      if (rng.uniform_open() < 0.5) other.insert(t);
    }
    other.insert(Triple{{0}, {0}, {0}});
    CHECK(triple_set_f1(set, other) == triple_set_f1(other, set));
  }
}

TEST_CASE("non-toxicity and exact match examples") {
  const std::unordered_set<TokenId> banned{3};
  CHECK(lexicon_nontoxicity(Sequence{1, 2}, banned) == 1.0);
  CHECK(lexicon_nontoxicity(Sequence{3, 3}, banned) == 0.0);
  CHECK(lexicon_nontoxicity(Sequence{1, 3, 2, 1}, banned) == 0.75);
  CHECK(lexicon_nontoxicity(Sequence{}, banned) == 1.0);
  CHECK(exact_match(Sequence{1, 2}, Sequence{1, 2}) == 1.0);
  CHECK(exact_match(Sequence{1, 2}, Sequence{1, 3}) == 0.0);
  CHECK(exact_match(Sequence{}, Sequence{}) == 1.0);
}

TEST_CASE("lexicon file") {
  const auto path = std::filesystem::temp_directory_path() / "decalign_lexicon.txt";
  {
    std::ofstream f(path);
    f << "bad\n\n worse \n";
  }
  CHECK(read_lexicon_file(path) == std::vector<std::string>{"bad", "worse"});
  std::filesystem::remove(path);
}

TEST_CASE("utility objects strip EOS and stay in range") {
  const TokenId eos = 9;
  auto bleu = make_bleu_utility(eos);
  CHECK(bleu->score(Sequence{1, 2, 3, 4, eos}, Sequence{1, 2, 3, 4, eos}) == doctest::Approx(1.0));
  auto em = make_exact_match_utility(eos);
  CHECK(em->score(Sequence{1, eos}, Sequence{1}) == 1.0);
  auto tox = make_nontoxicity_utility(eos, {3});
  CHECK(tox->score(Sequence{3, 1, eos}, Sequence{}) == 0.5);
  auto trip = make_triple_f1_utility(eos, kMarkers);
  CHECK(trip->score(Sequence{10, 1, 11, 2, 12, 3, 13, eos}, Sequence{10, 1, 11, 2, 12, 3, 13}) == 1.0);
  auto table = make_table_utility({{Sequence{1, eos}, 0.7}}, 0.1);
  CHECK(table->score(Sequence{1, eos}, Sequence{}) == 0.7);
  CHECK(table->score(Sequence{1}, Sequence{}) == 0.1);
}

// ---------------------------------------------------------------------------
// Value models

TEST_CASE("partial sequence values") {
  auto bleu = make_bleu_utility(9);
  const Sequence ref{1, 2, 3, 4, 9};
  CHECK(partial_sequence_value(*bleu, ref, Sequence{}) == 0.0);
  CHECK(partial_sequence_value(*bleu, ref, ref) == doctest::Approx(1.0));
  CHECK(partial_sequence_value(*bleu, ref, Sequence{1, 2}) == 0.0);
}

TEST_CASE("value_estimate counts calls") {
  OracleValue vm(make_exact_match_utility(9), Sequence{1, 9});
  CallCounters cc;
  CHECK(value_estimate(vm, Context{}, Sequence{1, 9}, &cc) == 1.0);
  CHECK(value_estimate(vm, Context{}, Sequence{2}, &cc) == 0.0);
  CHECK(cc.value_calls == 2);
  CHECK(cc.lm_calls == 0);
}

TEST_CASE("interpolated oracle examples") {
  auto bleu = make_bleu_utility(9);
  const std::vector<Sequence> targets{{1, 2, 3, 4, 9}, {5, 6, 7, 8, 9}};
  auto vm = make_interpolated_oracle(bleu, targets, 3, 1.0);
  CHECK(vm.false_assignment() == std::vector<std::size_t>{1, 0});
  CHECK(vm.score(0, targets[0]) == doctest::Approx(1.0));
  CHECK(vm.with_lambda(0.0).score(0, targets[1]) == doctest::Approx(1.0));
  CHECK(vm.bind(1)->estimate(Context{}, targets[1]) == doctest::Approx(1.0));

  // 0.5 * u(true) + 0.5 * u(false) with hand-set utilities.
  struct Fixed final : Utility {
    double score(std::span<const TokenId>, std::span<const TokenId> ref) const override { return ref[0] == 1 ? 0.8 : 0.2; }
  };
  auto half = make_interpolated_oracle(std::make_shared<Fixed>(), targets, 3, 0.5);
  CHECK(half.score(0, Sequence{7}) == doctest::Approx(0.5));

  CHECK_THROWS_AS(make_interpolated_oracle(bleu, {targets[0]}, 0), Error);
  CHECK_THROWS_AS(InterpolatedOracleValue(bleu, targets, {0, 1}, 0.5), Error);
}

TEST_CASE("false assignments are seeded derangements") {
  std::vector<Sequence> targets;
  for (int i = 0; i < 100; ++i) targets.push_back({static_cast<TokenId>(i % 7), 9});
  auto bleu = make_bleu_utility(9);
  auto a = make_interpolated_oracle(bleu, targets, 17);
  auto b = make_interpolated_oracle(bleu, targets, 17);
  CHECK(a.false_assignment() == b.false_assignment());
  std::vector<std::size_t> sorted = a.false_assignment();
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t i = 0; i < sorted.size(); ++i) CHECK(sorted[i] == i);
  for (std::size_t i = 0; i < 100; ++i) CHECK(a.false_assignment()[i] != i);
  CHECK(make_interpolated_oracle(bleu, targets, 18).false_assignment() != a.false_assignment());
}

TEST_CASE("interpolated fidelity improves with lambda") {
  Rng rng(2);
  std::vector<Sequence> targets;
  for (int i = 0; i < 40; ++i) {
    Sequence s(4 + rng.below(3));
    for (auto& t : s) t = static_cast<TokenId>(rng.below(6));
    s.push_back(9);
    targets.push_back(s);
  }
  auto bleu = make_bleu_utility(9, true);
  auto base = make_interpolated_oracle(bleu, targets, 5);
  double prev = std::numeric_limits<double>::infinity();
  for (double lambda : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    auto vm = base.with_lambda(lambda);
    double err = 0.0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
      for (std::size_t j = 0; j < targets.size(); j += 3) {
        err += std::abs(vm.score(i, targets[j]) - bleu->score(targets[j], targets[i]));
      }
    }
    CHECK(err <= prev + 1e-12);
    prev = err;
  }
  CHECK(prev == doctest::Approx(0.0));
}

TEST_CASE("degraded oracle is uniform at full corruption") {
  auto oracle = std::make_shared<OracleValue>(make_exact_match_utility(9), Sequence{1, 9});
  DegradedOracleValue noisy(oracle, 1.0, 99);
  std::vector<double> xs;
  for (int i = 0; i < 10000; ++i) {
    const Sequence prefix{static_cast<TokenId>(i % 9), static_cast<TokenId>(i / 9 % 9), static_cast<TokenId>(i / 81)};
    xs.push_back(noisy.estimate(Context{}, prefix));
  }
  std::sort(xs.begin(), xs.end());
  double ks = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double n = static_cast<double>(xs.size());
    ks = std::max({ks, std::abs((i + 1) / n - xs[i]), std::abs(xs[i] - i / n)});
  }
  CHECK(ks < 0.02);
}

TEST_CASE("degraded oracle fidelity falls with eta") {
  auto utility = make_bleu_utility(9, true);
  const Sequence ref{1, 2, 3, 4, 5, 9};
  auto oracle = std::make_shared<OracleValue>(utility, ref);
  std::set<Sequence> distinct;
  Rng rng(6);
  while (distinct.size() < 1500) {
    Sequence s(3 + rng.below(4));
    for (auto& t : s) t = static_cast<TokenId>(1 + rng.below(6));
    distinct.insert(s);
  }
  const std::vector<Sequence> prefixes(distinct.begin(), distinct.end());
  std::vector<double> truth;
  for (const auto& p : prefixes) truth.push_back(oracle->estimate(Context{}, p));
  double prev = 2.0;
  for (double eta : {0.0, 0.25, 0.5, 0.75, 1.0}) {
    DegradedOracleValue vm(oracle, eta, 4);
    std::vector<double> est;
    for (const auto& p : prefixes) {
      const double v = vm.estimate(Context{}, p);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      CHECK(v == vm.estimate(Context{}, p));
      est.push_back(v);
    }
    const double r = pearson(truth, est).r;
    CHECK(r <= prev + 1e-12);
    prev = r;
    if (eta == 0.0) CHECK(r == doctest::Approx(1.0));
    if (eta == 1.0) CHECK(std::abs(r) < 0.1);
  }
}

TEST_CASE("uniform noise and lookahead values") {
  UniformNoiseValue u(3);
  CHECK(u.estimate(Context{}, Sequence{1}) == u.estimate(Context{}, Sequence{1}));
  CHECK(u.estimate(Context{}, Sequence{1}) != u.estimate(Context{}, Sequence{2}));

  auto lm = fixtures::adversarial_lm();
  const auto all = enumerate_sequences(lm, Context{}, 2);
  auto table = make_table_utility({{Sequence{0, 2}, 1.0}, {Sequence{1, 0}, 0.3}});
  LookaheadOracleValue look(all, *table, Sequence{});
  CHECK(look.estimate(Context{}, Sequence{}) == 1.0);
  CHECK(look.estimate(Context{}, Sequence{0}) == 1.0);
  CHECK(look.estimate(Context{}, Sequence{1}) == 0.3);
  CHECK(look.estimate(Context{}, Sequence{1, 2}) == 0.0);
}
