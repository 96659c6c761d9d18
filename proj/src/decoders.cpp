#include "decalign/decoders.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

namespace decalign {

namespace {

bool hyp_less(const ScoredHypothesis& a, const ScoredHypothesis& b) {
  if (a.logprob != b.logprob) return a.logprob > b.logprob;
  return token_order_less(a.seq, b.seq);
}

/// Finite entries sorted by value descending, ties to the lower id; at most k.
std::vector<TokenId> top_tokens(std::span<const double> logits, std::size_t k) {
  std::vector<TokenId> ids;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] != kNegInf) ids.push_back(static_cast<TokenId>(i));
  }
  auto cmp = [&](TokenId a, TokenId b) {
    const double la = logits[static_cast<std::size_t>(a)], lb = logits[static_cast<std::size_t>(b)];
    return la != lb ? la > lb : a < b;
  };
  if (ids.size() > k) {
    std::partial_sort(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(k), ids.end(), cmp);
    ids.resize(k);
  } else {
    std::sort(ids.begin(), ids.end(), cmp);
  }
  return ids;
}

void check_params(const DecodeParams& params) {
  if (params.max_len < 1) throw Error(ErrorKind::kInvalidArgument, "max_len must be >= 1");
  if (params.num_beams < 1) throw Error(ErrorKind::kInvalidArgument, "num_beams must be >= 1");
  validate_processors(params.heuristics, params.max_len);
}

ScoredHypothesis pick_best(const std::vector<ScoredHypothesis>& pool, bool length_normalize) {
  if (!length_normalize) return pool.front();
  auto norm = [](const ScoredHypothesis& h) { return h.seq.empty() ? h.logprob : h.logprob / static_cast<double>(h.seq.size()); };
  const ScoredHypothesis* best = &pool.front();
  for (const auto& h : pool) {
    const double a = norm(h), b = norm(*best);
    if (a > b || (a == b && token_order_less(h.seq, best->seq))) best = &h;
  }
  return *best;
}

double log1mexp(double x) {
  // log(1 - exp(x)) for x <= 0
  if (x == 0.0) return kNegInf;
  return x > -0.6931471805599453 ? std::log(-std::expm1(x)) : std::log1p(-std::exp(x));
}

double log_add_exp(double a, double b) {
  if (a == kNegInf) return b;
  if (b == kNegInf) return a;
  const double m = std::max(a, b);
  return m + std::log1p(std::exp(-std::abs(a - b)));
}

DecodeResult run_beam(const LanguageModel& model, const Context& context, const DecodeParams& params,
                      const ConstraintSpec* constraint) {
  check_params(params);
  validate_context(model.vocab(), context);
  const Vocabulary& vocab = model.vocab();
  const auto width = static_cast<std::size_t>(params.num_beams);

  DecodeResult result;
  result.seed_used = params.seed;
  std::vector<ScoredHypothesis> live{ScoredHypothesis{}};
  std::vector<ScoredHypothesis> completed;

  for (int step = 0; step < params.max_len && !live.empty(); ++step) {
    ++result.steps;
    std::vector<ScoredHypothesis> candidates;
    for (const auto& beam : live) {
      auto raw = model.next_token_logprobs(context, beam.seq, &result.counters);
      auto proc = process_logits(vocab, beam.seq, raw, params.heuristics);
      if (constraint) {
        std::vector<double> masked(proc.size(), kNegInf);
        for (TokenId t : constraint->allowed(beam.seq, params.max_len)) {
          if (vocab.contains(t)) masked[static_cast<std::size_t>(t)] = proc[static_cast<std::size_t>(t)];
        }
        proc = std::move(masked);
      }
      for (TokenId t : top_tokens(proc, width)) {
        ScoredHypothesis c{beam.seq, beam.logprob + raw[static_cast<std::size_t>(t)], false};
        c.seq.push_back(t);
        c.finished = is_finished(vocab, c.seq, params.max_len);
        candidates.push_back(std::move(c));
      }
    }
    if (candidates.empty()) {
      if (!completed.empty()) break;
      if (constraint) throw Error(ErrorKind::kConstraintDeadEnd, "constraint dead end: no live beam has an allowed token");
      throw Error(ErrorKind::kEmptySupport, "empty support after processing");
    }
    std::sort(candidates.begin(), candidates.end(), hyp_less);
    if (candidates.size() > width) candidates.resize(width);
    if (params.record_traces) result.step_traces.push_back({step, candidates});

    live.clear();
    for (auto& c : candidates) (c.finished ? completed : live).push_back(std::move(c));
    std::sort(completed.begin(), completed.end(), hyp_less);
    if (completed.size() > width) completed.resize(width);
    // Increments are <= 0, so no extension of a live beam can overtake the pool.
    if (completed.size() >= width && !live.empty() && live.front().logprob <= completed.back().logprob) break;
  }
  if (completed.empty()) throw Error(ErrorKind::kEmptySupport, "beam search produced no complete hypothesis");
  result.candidates = std::move(completed);
  result.best = pick_best(result.candidates, params.length_normalize_final);
  return result;
}

}  // namespace

// ---------------------------------------------------------------------------
// Processors

void validate_processors(std::span<const LogitsProcessorSpec> processors, int max_len) {
  for (const auto& p : processors) {
    if (const auto* ml = std::get_if<MinLength>(&p)) {
      if (ml->min_len < 0 || ml->min_len > max_len) throw Error(ErrorKind::kInvalidArgument, "min_length must be in [0, max_len]");
    } else if (const auto* nr = std::get_if<NoRepeatNgram>(&p)) {
      if (nr->n < 1) throw Error(ErrorKind::kInvalidArgument, "no_repeat_ngram size must be >= 1");
    }
  }
}

std::vector<double> process_logits(const Vocabulary& vocab, std::span<const TokenId> prefix, std::span<const double> logits,
                                   std::span<const LogitsProcessorSpec> processors) {
  if (logits.size() != vocab.size()) throw Error(ErrorKind::kInvalidArgument, "logits length does not match vocabulary");
  std::vector<double> out(logits.begin(), logits.end());
  for (const auto& p : processors) {
    if (const auto* ml = std::get_if<MinLength>(&p)) {
      if (static_cast<int>(prefix.size()) < ml->min_len) out[static_cast<std::size_t>(vocab.eos_id())] = kNegInf;
    } else if (const auto* nr = std::get_if<NoRepeatNgram>(&p)) {
      const std::size_t h = static_cast<std::size_t>(nr->n - 1);
      if (prefix.size() < h) continue;
      auto tail = prefix.last(h);
      for (std::size_t j = 0; j + h < prefix.size(); ++j) {
        if (std::equal(tail.begin(), tail.end(), prefix.begin() + static_cast<std::ptrdiff_t>(j))) {
          out[static_cast<std::size_t>(prefix[j + h])] = kNegInf;
        }
      }
    } else if (const auto* ban = std::get_if<BanTokens>(&p)) {
      for (TokenId t : ban->tokens) {
        if (vocab.contains(t)) out[static_cast<std::size_t>(t)] = kNegInf;
      }
    }
  }
  return out;
}

bool has_support(std::span<const double> logits) {
  return std::any_of(logits.begin(), logits.end(), [](double x) { return x != kNegInf; });
}

// ---------------------------------------------------------------------------
// Constraints

PrefixTrie::PrefixTrie(const Vocabulary& vocab, const std::vector<Sequence>& sequences) {
  nodes_.emplace_back();
  for (const auto& seq : sequences) {
    validate_sequence(vocab, seq);
    if (!ends_with_eos(vocab, seq)) throw Error(ErrorKind::kInvalidArgument, "trie members must be EOS-terminated");
    int node = 0;
    for (TokenId t : seq) {
      auto it = nodes_[static_cast<std::size_t>(node)].children.find(t);
      if (it == nodes_[static_cast<std::size_t>(node)].children.end()) {
        nodes_.emplace_back();
        const int child = static_cast<int>(nodes_.size()) - 1;
        nodes_[static_cast<std::size_t>(node)].children.emplace(t, child);
        node = child;
      } else {
        node = it->second;
      }
    }
    if (!nodes_[static_cast<std::size_t>(node)].terminal) ++count_;
    nodes_[static_cast<std::size_t>(node)].terminal = true;
  }
  // Children always have larger indices, so a reverse sweep is post-order.
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    Node& n = nodes_[i];
    if (n.terminal) {
      n.min_remaining = 0;
      continue;
    }
    int best = std::numeric_limits<int>::max() / 2;
    for (const auto& [_, c] : n.children) best = std::min(best, 1 + nodes_[static_cast<std::size_t>(c)].min_remaining);
    n.min_remaining = best;
  }
}

const PrefixTrie::Node* PrefixTrie::find(std::span<const TokenId> prefix) const {
  int node = 0;
  for (TokenId t : prefix) {
    const auto& ch = nodes_[static_cast<std::size_t>(node)].children;
    auto it = ch.find(t);
    if (it == ch.end()) return nullptr;
    node = it->second;
  }
  return &nodes_[static_cast<std::size_t>(node)];
}

std::vector<TokenId> PrefixTrie::allowed(std::span<const TokenId> prefix, int max_len) const {
  std::vector<TokenId> out;
  const Node* n = find(prefix);
  if (!n) return out;
  const int depth = static_cast<int>(prefix.size()) + 1;
  for (const auto& [t, c] : n->children) {
    if (depth + nodes_[static_cast<std::size_t>(c)].min_remaining <= max_len) out.push_back(t);
  }
  return out;
}

bool PrefixTrie::contains(std::span<const TokenId> seq) const {
  const Node* n = find(seq);
  return n && n->terminal;
}

ConstraintSpec ConstraintSpec::from_trie(PrefixTrie trie) {
  ConstraintSpec c;
  c.trie_ = std::make_shared<const PrefixTrie>(std::move(trie));
  return c;
}

ConstraintSpec ConstraintSpec::from_predicate(AllowedTokensFn fn) {
  ConstraintSpec c;
  if (!fn) throw Error(ErrorKind::kInvalidArgument, "constraint predicate is empty");
  if (fn({}).empty()) throw Error(ErrorKind::kInvalidArgument, "constraint predicate allows nothing at the empty prefix");
  c.predicate_ = std::move(fn);
  return c;
}

std::vector<TokenId> ConstraintSpec::allowed(std::span<const TokenId> prefix, int max_len) const {
  if (trie_) return trie_->allowed(prefix, max_len);
  return predicate_(prefix);
}

bool ConstraintSpec::accepts(std::span<const TokenId> seq) const {
  if (trie_) return trie_->contains(seq);
  for (std::size_t i = 0; i < seq.size(); ++i) {
    auto allowed = predicate_(seq.first(i));
    if (std::find(allowed.begin(), allowed.end(), seq[i]) == allowed.end()) return false;
  }
  return true;
}

// ---------------------------------------------------------------------------
// Decoders

void sort_by_logprob(std::vector<ScoredHypothesis>& hyps) { std::sort(hyps.begin(), hyps.end(), hyp_less); }

DecodeResult greedy_decode(const LanguageModel& model, const Context& context, const DecodeParams& params) {
  check_params(params);
  validate_context(model.vocab(), context);
  const Vocabulary& vocab = model.vocab();
  DecodeResult result;
  result.seed_used = params.seed;
  ScoredHypothesis hyp;
  while (!is_finished(vocab, hyp.seq, params.max_len)) {
    auto raw = model.next_token_logprobs(context, hyp.seq, &result.counters);
    auto proc = process_logits(vocab, hyp.seq, raw, params.heuristics);
    auto top = top_tokens(proc, 1);
    if (top.empty()) throw Error(ErrorKind::kEmptySupport, "empty support after processing");
    hyp.seq.push_back(top.front());
    hyp.logprob += raw[static_cast<std::size_t>(top.front())];
    hyp.finished = is_finished(vocab, hyp.seq, params.max_len);
    if (params.record_traces) result.step_traces.push_back({result.steps, {hyp}});
    ++result.steps;
  }
  hyp.finished = true;
  result.best = hyp;
  result.candidates = {hyp};
  return result;
}

DecodeResult beam_decode(const LanguageModel& model, const Context& context, const DecodeParams& params) {
  return run_beam(model, context, params, nullptr);
}

DecodeResult constrained_beam_decode(const LanguageModel& model, const Context& context, const DecodeParams& params,
                                     const ConstraintSpec& constraint) {
  return run_beam(model, context, params, &constraint);
}

SamplingSupport sampling_support(std::span<const double> logits, const SamplerParams& sampler) {
  if (!(sampler.temperature > 0.0)) throw Error(ErrorKind::kInvalidArgument, "temperature must be > 0");
  if (sampler.top_k < 0) throw Error(ErrorKind::kInvalidArgument, "top_k must be >= 0");
  if (!(sampler.top_p > 0.0 && sampler.top_p <= 1.0)) throw Error(ErrorKind::kInvalidArgument, "top_p must be in (0, 1]");
  std::vector<double> scaled(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) scaled[i] = logits[i] == kNegInf ? kNegInf : logits[i] / sampler.temperature;
  const auto logp = validate_distribution(scaled);

  SamplingSupport s;
  std::vector<TokenId> order = top_tokens(logp, logp.size());
  std::vector<double> probs;
  for (TokenId t : order) probs.push_back(std::exp(logp[static_cast<std::size_t>(t)]));
  // Drop tokens whose tempered probability underflowed to zero.
  while (!probs.empty() && probs.back() == 0.0) {
    probs.pop_back();
    order.pop_back();
  }
  if (sampler.top_k > 0 && order.size() > static_cast<std::size_t>(sampler.top_k)) {
    order.resize(static_cast<std::size_t>(sampler.top_k));
    probs.resize(order.size());
  }
  double mass = std::accumulate(probs.begin(), probs.end(), 0.0);
  if (sampler.top_p < 1.0) {
    double cum = 0.0;
    std::size_t keep = 0;
    while (keep < probs.size()) {
      cum += probs[keep] / mass;
      ++keep;
      if (cum >= sampler.top_p - 1e-12) break;
    }
    order.resize(keep);
    probs.resize(keep);
    mass = std::accumulate(probs.begin(), probs.end(), 0.0);
  }
  for (double& p : probs) p /= mass;
  s.tokens = std::move(order);
  s.probs = std::move(probs);
  return s;
}

DecodeResult sample_decode(const LanguageModel& model, const Context& context, const DecodeParams& params,
                           const SamplerParams& sampler) {
  check_params(params);
  validate_context(model.vocab(), context);
  const Vocabulary& vocab = model.vocab();
  DecodeResult result;
  result.seed_used = params.seed;
  Rng rng(params.seed);
  ScoredHypothesis hyp;
  while (!is_finished(vocab, hyp.seq, params.max_len)) {
    auto raw = model.next_token_logprobs(context, hyp.seq, &result.counters);
    auto proc = process_logits(vocab, hyp.seq, raw, params.heuristics);
    if (!has_support(proc)) throw Error(ErrorKind::kEmptySupport, "empty support after processing");
    const auto support = sampling_support(proc, sampler);
    const double u = rng.uniform_open();
    double cum = 0.0;
    TokenId pick = support.tokens.back();
    for (std::size_t i = 0; i < support.tokens.size(); ++i) {
      cum += support.probs[i];
      if (u < cum) {
        pick = support.tokens[i];
        break;
      }
    }
    hyp.seq.push_back(pick);
    hyp.logprob += raw[static_cast<std::size_t>(pick)];
    hyp.finished = is_finished(vocab, hyp.seq, params.max_len);
    ++result.steps;
    if (params.record_traces) result.step_traces.push_back({result.steps - 1, {hyp}});
  }
  hyp.finished = true;
  result.best = hyp;
  result.candidates = {hyp};
  return result;
}

double conditioned_gumbel(double parent, double max_child, double child) {
  if (child == max_child) return parent;
  return -log_add_exp(-parent, -child + log1mexp(child - max_child));
}

DecodeResult stochastic_beam_decode(const LanguageModel& model, const Context& context, const DecodeParams& params,
                                    const ExpansionObserver& observer) {
  check_params(params);
  validate_context(model.vocab(), context);
  const Vocabulary& vocab = model.vocab();
  const auto width = static_cast<std::size_t>(params.num_beams);
  struct Item {
    ScoredHypothesis hyp;
    double perturbed = 0.0;
  };
  auto item_less = [](const Item& a, const Item& b) {
    if (a.perturbed != b.perturbed) return a.perturbed > b.perturbed;
    return token_order_less(a.hyp.seq, b.hyp.seq);
  };

  DecodeResult result;
  result.seed_used = params.seed;
  Rng rng(params.seed);
  std::vector<Item> beam{Item{}};
  auto any_live = [&] { return std::any_of(beam.begin(), beam.end(), [](const Item& i) { return !i.hyp.finished; }); };

  while (any_live()) {
    ++result.steps;
    std::vector<Item> next;
    for (auto& item : beam) {
      if (item.hyp.finished) {
        next.push_back(std::move(item));
        continue;
      }
      auto raw = model.next_token_logprobs(context, item.hyp.seq, &result.counters);
      auto proc = process_logits(vocab, item.hyp.seq, raw, params.heuristics);
      std::vector<TokenId> tokens;
      std::vector<double> gumbels;
      for (std::size_t t = 0; t < proc.size(); ++t) {
        if (proc[t] == kNegInf) continue;
        const double phi = item.hyp.logprob + raw[t];
        tokens.push_back(static_cast<TokenId>(t));
        gumbels.push_back(phi - std::log(-std::log(rng.uniform_open())));
      }
      if (tokens.empty()) continue;
      const double z = *std::max_element(gumbels.begin(), gumbels.end());
      std::vector<double> conditioned(tokens.size());
      for (std::size_t i = 0; i < tokens.size(); ++i) conditioned[i] = conditioned_gumbel(item.perturbed, z, gumbels[i]);
      if (observer) observer(item.perturbed, conditioned);
      for (std::size_t i = 0; i < tokens.size(); ++i) {
        Item child{item.hyp, conditioned[i]};
        child.hyp.seq.push_back(tokens[i]);
        child.hyp.logprob += raw[static_cast<std::size_t>(tokens[i])];
        child.hyp.finished = is_finished(vocab, child.hyp.seq, params.max_len);
        next.push_back(std::move(child));
      }
    }
    if (next.empty()) throw Error(ErrorKind::kEmptySupport, "empty support after processing");
    std::sort(next.begin(), next.end(), item_less);
    if (next.size() > width) next.resize(width);
    if (params.record_traces) {
      StepTrace trace{result.steps - 1, {}};
      for (const auto& i : next) trace.selected.push_back(i.hyp);
      result.step_traces.push_back(std::move(trace));
    }
    beam = std::move(next);
  }
  for (auto& item : beam) result.candidates.push_back(std::move(item.hyp));
  sort_by_logprob(result.candidates);
  result.best = pick_best(result.candidates, params.length_normalize_final);
  return result;
}

}  // namespace decalign
