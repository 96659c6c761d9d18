#include "decalign/guided.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>

namespace decalign {

namespace {

struct Scored {
  ScoredHypothesis hyp;
  double score = 0.0;
};

bool scored_less(const Scored& a, const Scored& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.hyp.logprob != b.hyp.logprob) return a.hyp.logprob > b.hyp.logprob;
  return token_order_less(a.hyp.seq, b.hyp.seq);
}

std::vector<TokenId> likely_tokens(std::span<const double> logits, std::size_t k) {
  std::vector<TokenId> ids;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (logits[i] != kNegInf) ids.push_back(static_cast<TokenId>(i));
  }
  auto cmp = [&](TokenId a, TokenId b) {
    const double la = logits[static_cast<std::size_t>(a)], lb = logits[static_cast<std::size_t>(b)];
    return la != lb ? la > lb : a < b;
  };
  std::sort(ids.begin(), ids.end(), cmp);
  if (ids.size() > k) ids.resize(k);
  return ids;
}

}  // namespace

double vgbs_score(double alpha, double logprob, int length, double value) {
  return alpha / static_cast<double>(length) * logprob + (1.0 - alpha) * value;
}

DecodeResult vgbs_decode(const LanguageModel& model, const ValueModel& vm, const Context& context, const VgbsParams& params) {
  const DecodeParams& base = params.base;
  if (base.max_len < 1 || base.num_beams < 1) throw Error(ErrorKind::kInvalidArgument, "max_len and num_beams must be >= 1");
  if (params.top_tokens < base.num_beams) throw Error(ErrorKind::kInvalidArgument, "VGBS needs K >= B");
  if (!(params.alpha >= 0.0 && params.alpha <= 1.0)) throw Error(ErrorKind::kInvalidArgument, "alpha must be in [0, 1]");
  validate_processors(base.heuristics, base.max_len);
  validate_context(model.vocab(), context);
  const Vocabulary& vocab = model.vocab();
  const auto width = static_cast<std::size_t>(base.num_beams);

  DecodeResult result;
  result.seed_used = base.seed;
  std::vector<ScoredHypothesis> live{ScoredHypothesis{}};
  std::vector<Scored> completed;

  for (int step = 0; step < base.max_len && !live.empty(); ++step) {
    ++result.steps;
    std::vector<Scored> candidates;
    for (const auto& beam : live) {
      auto raw = model.next_token_logprobs(context, beam.seq, &result.counters);
      auto proc = process_logits(vocab, beam.seq, raw, base.heuristics);
      for (TokenId t : likely_tokens(proc, static_cast<std::size_t>(params.top_tokens))) {
        Scored c{{beam.seq, beam.logprob + raw[static_cast<std::size_t>(t)], false}, 0.0};
        c.hyp.seq.push_back(t);
        c.hyp.finished = is_finished(vocab, c.hyp.seq, base.max_len);
        const double v = value_estimate(vm, context, c.hyp.seq, &result.counters);
        c.score = vgbs_score(params.alpha, c.hyp.logprob, static_cast<int>(c.hyp.seq.size()), v);
        candidates.push_back(std::move(c));
      }
    }
    if (candidates.empty()) {
      if (!completed.empty()) break;
      throw Error(ErrorKind::kEmptySupport, "empty support after processing");
    }
    std::sort(candidates.begin(), candidates.end(), scored_less);
    if (candidates.size() > width) candidates.resize(width);
    if (base.record_traces) {
      StepTrace trace{step, {}};
      for (const auto& c : candidates) trace.selected.push_back(c.hyp);
      result.step_traces.push_back(std::move(trace));
    }
    live.clear();
    for (auto& c : candidates) {
      if (c.hyp.finished) completed.push_back(std::move(c));
      else live.push_back(std::move(c.hyp));
    }
    std::sort(completed.begin(), completed.end(), scored_less);
    if (completed.size() > width) completed.resize(width);
  }
  if (completed.empty()) throw Error(ErrorKind::kEmptySupport, "VGBS produced no complete hypothesis");
  result.best = completed.front().hyp;
  for (auto& c : completed) result.candidates.push_back(std::move(c.hyp));
  sort_by_logprob(result.candidates);
  return result;
}

// ---------------------------------------------------------------------------
// MCTS

namespace {

struct Node {
  Sequence seq;
  double logprob = 0.0;
  double prior = 0.0;
  int visits = 0;
  double total = 0.0;
  bool expanded = false;
  bool terminal = false;
  std::vector<std::unique_ptr<Node>> children;

  double q() const { return visits > 0 ? total / visits : 0.0; }
  TokenId token() const { return seq.back(); }
};

class TreeSearch {
 public:
  TreeSearch(const LanguageModel& model, const ValueModel& vm, const Context& context, const MctsParams& params,
             CallCounters& counters)
      : model_(model), vm_(vm), context_(context), params_(params), counters_(counters) {}

  void simulate(Node& root) {
    std::vector<Node*> path{&root};
    Node* node = &root;
    while (node->expanded && !node->terminal) {
      node = select_child(*node);
      path.push_back(node);
    }
    if (!node->terminal && !node->expanded) expand(*node);
    const double value = std::clamp(evaluate(*node), 0.0, 1.0);
    for (Node* n : path) {
      ++n->visits;
      n->total += value;
    }
  }

 private:
  Node* select_child(Node& parent) const {
    const double sqrt_n = std::sqrt(static_cast<double>(parent.visits));
    Node* best = nullptr;
    double best_score = -std::numeric_limits<double>::infinity();
    // Children are stored by prior (desc) then token id, so the first maximum wins ties.
    // Unvisited children are scored optimistically at the top of the value range.
    for (auto& child : parent.children) {
      const double q = child->visits > 0 ? child->q() : 1.0;
      const double u = q + params_.c_puct * child->prior * sqrt_n / (1.0 + child->visits);
      if (u > best_score) {
        best_score = u;
        best = child.get();
      }
    }
    return best;
  }

  void expand(Node& node) {
    const Vocabulary& vocab = model_.vocab();
    auto raw = model_.next_token_logprobs(context_, node.seq, &counters_);
    auto proc = process_logits(vocab, node.seq, raw, params_.base.heuristics);
    node.expanded = true;
    auto tokens = likely_tokens(proc, static_cast<std::size_t>(params_.top_m));
    if (tokens.empty()) {
      node.terminal = true;  // dead end: nothing admissible follows
      return;
    }
    std::vector<double> logits;
    for (TokenId t : tokens) logits.push_back(proc[static_cast<std::size_t>(t)]);
    const auto priors = validate_distribution(logits);
    for (std::size_t i = 0; i < tokens.size(); ++i) {
      auto child = std::make_unique<Node>();
      child->seq = node.seq;
      child->seq.push_back(tokens[i]);
      child->logprob = node.logprob + raw[static_cast<std::size_t>(tokens[i])];
      child->prior = std::exp(priors[i]);
      child->terminal = is_finished(vocab, child->seq, params_.base.max_len);
      node.children.push_back(std::move(child));
    }
  }

  double evaluate(const Node& node) {
    if (params_.leaf_eval == LeafEval::kValue || node.terminal) return value_estimate(vm_, context_, node.seq, &counters_);
    const Vocabulary& vocab = model_.vocab();
    Sequence seq = node.seq;
    while (!is_finished(vocab, seq, params_.base.max_len)) {
      auto raw = model_.next_token_logprobs(context_, seq, &counters_);
      auto proc = process_logits(vocab, seq, raw, params_.base.heuristics);
      auto top = likely_tokens(proc, 1);
      if (top.empty()) break;
      seq.push_back(top.front());
    }
    return value_estimate(vm_, context_, seq, &counters_);
  }

  const LanguageModel& model_;
  const ValueModel& vm_;
  const Context& context_;
  const MctsParams& params_;
  CallCounters& counters_;
};

void collect_stats(const Node& node, std::vector<MctsNodeStats>& out) {
  MctsNodeStats s;
  s.visits = node.visits;
  s.q = node.q();
  s.expanded = node.expanded;
  s.terminal = node.terminal;
  s.children = node.children.size();
  for (const auto& c : node.children) s.child_visit_sum += c->visits;
  out.push_back(s);
  for (const auto& c : node.children) collect_stats(*c, out);
}

}  // namespace

DecodeResult mcts_decode(const LanguageModel& model, const ValueModel& vm, const Context& context, const MctsParams& params,
                         const MctsObserver& observer) {
  if (params.base.max_len < 1) throw Error(ErrorKind::kInvalidArgument, "max_len must be >= 1");
  if (params.simulations < 1) throw Error(ErrorKind::kInvalidArgument, "MCTS needs at least one simulation");
  if (params.top_m < 1) throw Error(ErrorKind::kInvalidArgument, "top_m must be >= 1");
  if (!(params.c_puct > 0.0)) throw Error(ErrorKind::kInvalidArgument, "c_puct must be > 0");
  validate_processors(params.base.heuristics, params.base.max_len);
  validate_context(model.vocab(), context);

  DecodeResult result;
  result.seed_used = params.base.seed;
  TreeSearch search(model, vm, context, params, result.counters);
  auto root = std::make_unique<Node>();

  while (!root->terminal) {
    for (int s = 0; s < params.simulations; ++s) {
      search.simulate(*root);
      if (observer) {
        std::vector<MctsNodeStats> stats;
        collect_stats(*root, stats);
        observer(stats);
      }
    }
    if (root->children.empty()) {
      if (root->seq.empty()) throw Error(ErrorKind::kEmptySupport, "empty support after processing");
      break;  // dead end below a nonempty prefix: emit what we have
    }
    std::size_t pick = 0;
    for (std::size_t i = 1; i < root->children.size(); ++i) {
      const Node& c = *root->children[i];
      const Node& b = *root->children[pick];
      if (c.visits != b.visits) {
        if (c.visits > b.visits) pick = i;
      } else if (c.q() != b.q()) {
        if (c.q() > b.q()) pick = i;
      } else if (c.token() < b.token()) {
        pick = i;
      }
    }
    std::unique_ptr<Node> next = std::move(root->children[pick]);
    root = std::move(next);
    ++result.steps;
    if (params.base.record_traces) result.step_traces.push_back({result.steps - 1, {{root->seq, root->logprob, root->terminal}}});
  }
  result.best = ScoredHypothesis{root->seq, root->logprob, true};
  result.candidates = {result.best};
  return result;
}

GridSearchResult hyperparam_search(std::span<const double> grid, const std::function<double(double)>& objective) {
  if (grid.empty()) throw Error(ErrorKind::kInvalidArgument, "hyperparameter grid is empty");
  GridSearchResult r;
  bool first = true;
  for (double p : grid) {
    const double value = objective(p);
    r.objectives.push_back(value);
    if (first || value > r.best_objective || (value == r.best_objective && p < r.best)) {
      r.best = p;
      r.best_objective = value;
      first = false;
    }
  }
  return r;
}

}  // namespace decalign
