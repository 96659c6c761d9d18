#include <algorithm>
#include <cmath>
#include <numbers>
#include <set>

#include <boost/math/distributions/normal.hpp>

#include "decalign/analysis.hpp"

namespace decalign {

namespace {

double standard_normal(Rng& rng) {
  const double u1 = rng.uniform_open(), u2 = rng.uniform_open();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

// Symmetric Dirichlet concentration of the planted rows. Flat rows would make
// likelihood so peaked that a few hundred decoded samples only cover the top
// of the output space, which attenuates their rank correlation.
constexpr int kRowConcentration = 4;

// Symmetric Dirichlet draw; Gamma(k, 1) is a sum of k unit exponentials.
std::vector<double> dirichlet_row(Rng& rng, std::size_t n) {
  std::vector<double> p(n);
  double s = 0.0;
  for (auto& v : p) {
    v = 0.0;
    for (int k = 0; k < kRowConcentration; ++k) v -= std::log(rng.uniform_open());
    s += v;
  }
  for (auto& v : p) v /= s;
  return p;
}

void add_rows(Rng& rng, const Vocabulary& vocab, int max_len, Sequence& prefix, std::vector<TabularRow>& rows) {
  rows.push_back({{}, prefix, dirichlet_row(rng, vocab.size())});
  if (static_cast<int>(prefix.size()) + 1 >= max_len) return;
  for (std::size_t t = 0; t < vocab.size(); ++t) {
    if (static_cast<TokenId>(t) == vocab.eos_id()) continue;
    prefix.push_back(static_cast<TokenId>(t));
    add_rows(rng, vocab, max_len, prefix, rows);
    prefix.pop_back();
  }
}

// Utilities are ranks of a latent score rescaled to [0, 1].
std::vector<double> rank_utilities(std::span<const double> latent) {
  auto ranks = average_ranks(latent);
  const double denom = latent.size() > 1 ? static_cast<double>(latent.size() - 1) : 1.0;
  for (auto& r : ranks) r = (r - 1.0) / denom;
  return ranks;
}

}  // namespace

PlantedTask generate_misaligned_task(std::uint64_t seed, int vocab_size, int max_len, double rho_target, std::uint64_t cap) {
  if (vocab_size < 2) throw Error(ErrorKind::kInvalidArgument, "planted task needs at least two tokens");
  if (max_len < 1) throw Error(ErrorKind::kInvalidArgument, "max_len must be >= 1");
  if (!(rho_target >= -1.0 && rho_target <= 1.0)) throw Error(ErrorKind::kInvalidArgument, "rho_target must be in [-1, 1]");
  if (std::pow(static_cast<double>(vocab_size), max_len) > static_cast<double>(cap)) {
    throw Error(ErrorKind::kEnumerationCap, "output space exceeds enumeration cap " + std::to_string(cap));
  }

  std::vector<std::string> names;
  for (int i = 0; i + 1 < vocab_size; ++i) names.push_back("t" + std::to_string(i));
  names.push_back("</s>");
  Vocabulary vocab(names, "</s>");

  Rng rng(mix_seed(seed, 0x91A7));
  std::vector<TabularRow> rows;
  Sequence prefix;
  add_rows(rng, vocab, max_len, prefix, rows);

  PlantedTask task;
  task.model = std::make_shared<const TabularLM>(vocab, rows);
  task.max_len = max_len;
  task.sequences = enumerate_sequences(*task.model, Context{}, max_len, cap);

  const std::size_t n = task.sequences.size();
  std::vector<double> lp(n);
  for (std::size_t i = 0; i < n; ++i) lp[i] = task.sequences[i].logprob;
  if (std::set<double>(lp.begin(), lp.end()).size() < 3) {
    throw Error(ErrorKind::kInvalidArgument, "infeasible correlation target: fewer than 3 distinct log-probabilities");
  }

  std::vector<double> util;
  if (std::abs(rho_target) == 1.0) {
    std::vector<double> latent = lp;
    if (rho_target < 0) {
      for (auto& v : latent) v = -v;
    }
    util = rank_utilities(latent);
  } else {
    // Gaussian copula on normal scores of the likelihood ranks. The latent
    // correlation is mapped so the induced rank correlation hits the target.
    const boost::math::normal unit;
    const auto ranks = average_ranks(lp);
    std::vector<double> z(n);
    for (std::size_t i = 0; i < n; ++i) z[i] = boost::math::quantile(unit, (ranks[i] - 0.5) / static_cast<double>(n));
    const double rho_g = 2.0 * std::sin(std::numbers::pi * rho_target / 6.0);
    const double noise = std::sqrt(std::max(0.0, 1.0 - rho_g * rho_g));
    double best_gap = std::numeric_limits<double>::infinity();
    for (int attempt = 0; attempt < 500 && best_gap > 0.025; ++attempt) {
      std::vector<double> latent(n);
      for (std::size_t i = 0; i < n; ++i) latent[i] = rho_g * z[i] + noise * standard_normal(rng);
      auto cand = rank_utilities(latent);
      const double gap = std::abs(spearman(lp, cand) - rho_target);
      if (gap < best_gap) {
        best_gap = gap;
        util = std::move(cand);
      }
    }
  }
  for (std::size_t i = 0; i < n; ++i) task.utility[task.sequences[i].seq] = util[i];
  task.spearman = spearman(lp, util);
  task.pearson = pearson(lp, util).r;
  return task;
}

// ---------------------------------------------------------------------------

namespace {

// Row favouring `next`, with the remaining mass spread evenly.
std::vector<double> peaked_row(std::size_t size, TokenId next, double mass) {
  std::vector<double> p(size, (1.0 - mass) / static_cast<double>(size - 1));
  p[static_cast<std::size_t>(next)] = mass;
  return p;
}

Sequence random_sequence(Rng& rng, int content, int len) {
  Sequence s;
  for (int i = 0; i < len; ++i) s.push_back(static_cast<TokenId>(rng.below(static_cast<std::uint64_t>(content))));
  return s;
}

void add_path(std::vector<TabularRow>& rows, std::map<std::pair<Sequence, Sequence>, std::size_t>& index,
              const Sequence& ctx, const Sequence& path, TokenId eos, std::size_t vsize, double first, double follow) {
  for (std::size_t k = 0; k <= path.size(); ++k) {
    Sequence prefix(path.begin(), path.begin() + static_cast<std::ptrdiff_t>(k));
    const TokenId next = k < path.size() ? path[k] : eos;
    const auto key = std::make_pair(ctx, prefix);
    if (index.contains(key)) continue;  // shared prefix keeps its first row
    index[key] = rows.size();
    rows.push_back({ctx, prefix, peaked_row(vsize, next, k == 0 ? first : follow)});
  }
}

}  // namespace

TranslationTask make_translation_task(std::uint64_t seed, const TranslationTaskOptions& options) {
  if (options.examples < 1 || options.content_tokens < 2) throw Error(ErrorKind::kInvalidArgument, "translation task too small");
  if (options.min_target_len < 1 || options.max_target_len < options.min_target_len) {
    throw Error(ErrorKind::kInvalidArgument, "bad target length range");
  }
  std::vector<std::string> names;
  for (int i = 0; i < options.content_tokens; ++i) names.push_back("w" + std::to_string(i));
  names.push_back("</s>");
  Vocabulary vocab(names, "</s>");
  const TokenId eos = vocab.eos_id();
  const std::size_t vsize = vocab.size();

  Rng rng(mix_seed(seed, 0x7A5C));
  std::vector<TabularRow> rows;
  std::map<std::pair<Sequence, Sequence>, std::size_t> index;
  std::set<Sequence> contexts;
  TranslationTask task;
  const auto span = static_cast<std::uint64_t>(options.max_target_len - options.min_target_len + 1);

  for (int e = 0; e < options.examples; ++e) {
    Sequence ctx;
    do {
      ctx = random_sequence(rng, options.content_tokens, 3);
    } while (contexts.contains(ctx));
    contexts.insert(ctx);

    const int tlen = options.min_target_len + static_cast<int>(rng.below(span));
    const int dlen = options.min_target_len + static_cast<int>(rng.below(span));
    Sequence target = random_sequence(rng, options.content_tokens, tlen);
    Sequence distractor;
    do {
      distractor = random_sequence(rng, options.content_tokens, dlen);
    } while (distractor[0] == target[0]);
    const bool aligned = rng.uniform_open() < options.aligned_fraction;
    const Sequence& favourite = aligned ? target : distractor;
    const Sequence& other = aligned ? distractor : target;

    // Root row carries both first tokens; the paths then continue on their own.
    std::vector<double> root(vsize, 0.25 / static_cast<double>(vsize - 2));
    root[static_cast<std::size_t>(favourite[0])] = 0.45;
    root[static_cast<std::size_t>(other[0])] = 0.30;
    index[{ctx, {}}] = rows.size();
    rows.push_back({ctx, {}, root});
    add_path(rows, index, ctx, favourite, eos, vsize, 0.45, 0.7);
    add_path(rows, index, ctx, other, eos, vsize, 0.30, 0.6);

    Example ex;
    ex.id = "ex" + std::string(e < 10 ? "00" : e < 100 ? "0" : "") + std::to_string(e);
    ex.context.ids = ctx;
    ex.target = target;
    ex.target->push_back(eos);
    ex.reference = *ex.target;
    task.dataset.examples.push_back(std::move(ex));
  }
  std::vector<double> fallback(vsize, 0.7 / static_cast<double>(vsize - 1));
  fallback[static_cast<std::size_t>(eos)] = 0.3;
  task.model = std::make_shared<const TabularLM>(vocab, rows, fallback);
  return task;
}

}  // namespace decalign
