#pragma once

#include <functional>
#include <span>
#include <vector>

#include "decalign/decoders.hpp"
#include "decalign/value.hpp"

namespace decalign {

inline constexpr double kDefaultAlphaGrid[] = {0.01, 0.25, 0.5, 0.75, 0.99};
inline constexpr double kDefaultCpuctGrid[] = {0.25, 1.25, 3.0};

struct VgbsParams {
  DecodeParams base;  // num_beams is B
  /// Tokens pre-selected by likelihood per beam before value scoring (K).
  int top_tokens = 10;
  /// Likelihood weight in s = (alpha / i) * logp + (1 - alpha) * v.
  double alpha = 0.5;
};

/// Value-guided beam search. `i` is the generated length including the
/// candidate token. Finished hypotheses keep the score they finished with.
DecodeResult vgbs_decode(const LanguageModel& model, const ValueModel& vm, const Context& context, const VgbsParams& params);

double vgbs_score(double alpha, double logprob, int length, double value);

enum class LeafEval { kValue, kRolloutGreedy };

struct MctsParams {
  DecodeParams base;
  int simulations = 50;
  double c_puct = 1.25;
  /// Children per node: the top_m tokens by likelihood, priors renormalized over them.
  int top_m = 20;
  LeafEval leaf_eval = LeafEval::kValue;
};

/// Per-node snapshot handed to an MctsObserver.
struct MctsNodeStats {
  int visits = 0;
  int child_visit_sum = 0;
  double q = 0.0;
  bool expanded = false;
  bool terminal = false;
  std::size_t children = 0;
};

/// Called after every simulation with the current root's subtree.
using MctsObserver = std::function<void(std::span<const MctsNodeStats> nodes)>;

/// PUCT tree search; commits to the most visited root child after S
/// simulations per emitted token and keeps that child's subtree.
DecodeResult mcts_decode(const LanguageModel& model, const ValueModel& vm, const Context& context, const MctsParams& params,
                         const MctsObserver& observer = {});

struct GridSearchResult {
  double best = 0.0;
  double best_objective = 0.0;
  std::vector<double> objectives;  // aligned with the grid
};

/// Evaluates every grid point and returns the argmax; ties go to the smaller value.
GridSearchResult hyperparam_search(std::span<const double> grid, const std::function<double(double)>& objective);

}  // namespace decalign
