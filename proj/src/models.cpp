#include "decalign/models.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include <json.hpp>

namespace decalign {

namespace {

std::string format_ids(std::span<const TokenId> ids) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < ids.size(); ++i) os << (i ? "," : "") << ids[i];
  os << ']';
  return os.str();
}

std::vector<double> checked_log_row(const Vocabulary& vocab, const std::vector<double>& probs, const std::string& where) {
  if (probs.size() != vocab.size()) {
    throw Error(ErrorKind::kLoad, where + ": row has " + std::to_string(probs.size()) + " entries, expected " + std::to_string(vocab.size()));
  }
  double sum = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw Error(ErrorKind::kLoad, where + ": probabilities must be finite and nonnegative");
    sum += p;
  }
  if (std::abs(sum - 1.0) > 1e-6) {
    std::ostringstream os;
    os << where << ": row sums to " << std::setprecision(6) << sum;
    throw Error(ErrorKind::kLoad, os.str());
  }
  std::vector<double> logs(probs.size());
  for (std::size_t i = 0; i < probs.size(); ++i) logs[i] = probs[i] > 0.0 ? std::log(probs[i]) : kNegInf;
  // Re-normalize away the tolerated rounding slack.
  return validate_distribution(logs);
}

}  // namespace

std::vector<double> LanguageModel::next_token_logprobs(const Context& context, std::span<const TokenId> prefix,
                                                       CallCounters* counters) const {
  if (ends_with_eos(vocab_, prefix)) throw Error(ErrorKind::kClosedHypothesis, "closed hypothesis: prefix already ends with EOS");
  validate_sequence(vocab_, prefix);
  if (counters) ++counters->lm_calls;
  return compute_logprobs(context, prefix);
}

// ---------------------------------------------------------------------------
// TabularLM

TabularLM::TabularLM(Vocabulary vocab, const std::vector<TabularRow>& rows, std::optional<std::vector<double>> default_row)
    : LanguageModel(std::move(vocab)) {
  const Vocabulary& v = this->vocab();
  for (const auto& row : rows) {
    const std::string where = "row for prefix " + format_ids(row.prefix);
    for (TokenId id : row.prefix) {
      if (id == v.eos_id()) throw Error(ErrorKind::kLoad, where + ": prefix contains EOS and can never be queried");
      if (!v.contains(id)) throw Error(ErrorKind::kLoad, where + ": token id out of range");
    }
    for (TokenId id : row.context) {
      if (!v.contains(id)) throw Error(ErrorKind::kLoad, where + ": context token id out of range");
    }
    auto [it, inserted] = table_.emplace(Key{row.context, row.prefix}, checked_log_row(v, row.probs, where));
    if (!inserted) throw Error(ErrorKind::kLoad, where + ": duplicate row");
  }
  if (default_row) default_ = checked_log_row(v, *default_row, "default row");
  if (!default_) {
    for (const auto& [key, _] : table_) {
      if (key.second.empty()) continue;
      Key parent{key.first, Sequence(key.second.begin(), key.second.end() - 1)};
      if (!table_.contains(parent)) {
        throw Error(ErrorKind::kLoad, "unreachable prefix " + format_ids(key.second) + ": parent prefix has no row and no default row is set");
      }
    }
  }
}

std::vector<double> TabularLM::compute_logprobs(const Context& context, std::span<const TokenId> prefix) const {
  auto it = table_.find(Key{context.ids, Sequence(prefix.begin(), prefix.end())});
  if (it != table_.end()) return it->second;
  if (default_) return *default_;
  throw Error(ErrorKind::kInvalidSequence, "no table row for prefix " + format_ids(prefix) + " and no default row");
}

std::vector<TabularRow> TabularLM::rows() const {
  std::vector<TabularRow> out;
  out.reserve(table_.size());
  for (const auto& [key, logs] : table_) {
    TabularRow row{key.first, key.second, {}};
    for (double l : logs) row.probs.push_back(std::exp(l));
    out.push_back(std::move(row));
  }
  return out;
}

std::optional<std::vector<double>> TabularLM::default_row() const {
  if (!default_) return std::nullopt;
  std::vector<double> probs;
  for (double l : *default_) probs.push_back(std::exp(l));
  return probs;
}

TabularLM tabular_lm_load(std::string_view document) {
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(document);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kLoad, std::string("malformed table document: ") + e.what());
  }
  try {
    auto tokens = doc.at("vocab").get<std::vector<std::string>>();
    Vocabulary vocab(std::move(tokens), doc.at("eos").get<std::string>());
    auto encode = [&](const nlohmann::json& arr) {
      Sequence ids;
      for (const auto& t : arr) {
        auto s = t.get<std::string>();
        try {
          ids.push_back(vocab.id_of(s));
        } catch (const Error&) {
          throw Error(ErrorKind::kLoad, "unknown token '" + s + "' in table document");
        }
      }
      return ids;
    };
    std::vector<TabularRow> rows;
    for (const auto& r : doc.at("rows")) {
      TabularRow row;
      row.prefix = encode(r.at("prefix"));
      if (r.contains("context")) row.context = encode(r.at("context"));
      row.probs = r.at("p").get<std::vector<double>>();
      rows.push_back(std::move(row));
    }
    std::optional<std::vector<double>> def;
    if (doc.contains("default") && !doc.at("default").is_null()) def = doc.at("default").get<std::vector<double>>();
    return TabularLM(std::move(vocab), rows, std::move(def));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorKind::kLoad, std::string("malformed table document: ") + e.what());
  } catch (const Error& e) {
    if (e.kind() == ErrorKind::kLoad) throw;
    throw Error(ErrorKind::kLoad, e.what());
  }
}

TabularLM tabular_lm_load_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kLoad, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return tabular_lm_load(ss.str());
}

std::string tabular_lm_dump(const TabularLM& model) {
  const Vocabulary& v = model.vocab();
  auto names = [&](std::span<const TokenId> ids) {
    std::vector<std::string> out;
    for (TokenId id : ids) out.push_back(v.token(id));
    return out;
  };
  nlohmann::json doc;
  doc["vocab"] = v.tokens();
  doc["eos"] = v.token(v.eos_id());
  doc["rows"] = nlohmann::json::array();
  for (const auto& row : model.rows()) {
    nlohmann::json r{{"prefix", names(row.prefix)}, {"p", row.probs}};
    if (!row.context.empty()) r["context"] = names(row.context);
    doc["rows"].push_back(std::move(r));
  }
  if (auto def = model.default_row()) doc["default"] = *def;
  return doc.dump();
}

// ---------------------------------------------------------------------------
// NgramLM

NgramLM::NgramLM(Vocabulary vocab, int order, double smoothing, std::map<std::vector<TokenId>, std::vector<double>> counts)
    : LanguageModel(std::move(vocab)), order_(order), smoothing_(smoothing), counts_(std::move(counts)) {
  if (order_ < 1) throw Error(ErrorKind::kInvalidArgument, "n-gram order must be >= 1");
  if (!(smoothing_ > 0.0)) throw Error(ErrorKind::kInvalidArgument, "additive smoothing must be > 0");
  for (const auto& [history, row] : counts_) {
    if (history.size() != static_cast<std::size_t>(order_ - 1) || row.size() != this->vocab().size()) {
      throw Error(ErrorKind::kInvalidArgument, "n-gram count table has the wrong shape");
    }
  }
}

std::vector<TokenId> NgramLM::history_for(const Context& context, std::span<const TokenId> prefix) const {
  const std::size_t h = static_cast<std::size_t>(order_ - 1);
  std::vector<TokenId> full(h, kBos);
  full.insert(full.end(), context.ids.begin(), context.ids.end());
  full.insert(full.end(), prefix.begin(), prefix.end());
  return std::vector<TokenId>(full.end() - static_cast<std::ptrdiff_t>(h), full.end());
}

double NgramLM::probability(std::span<const TokenId> history, TokenId token) const {
  const double vsize = static_cast<double>(vocab().size());
  auto it = counts_.find(std::vector<TokenId>(history.begin(), history.end()));
  if (it == counts_.end()) return 1.0 / vsize;
  double total = 0.0;
  for (double c : it->second) total += c;
  return (it->second[static_cast<std::size_t>(token)] + smoothing_) / (total + smoothing_ * vsize);
}

std::vector<double> NgramLM::compute_logprobs(const Context& context, std::span<const TokenId> prefix) const {
  const auto history = history_for(context, prefix);
  const std::size_t n = vocab().size();
  std::vector<double> out(n);
  auto it = counts_.find(history);
  if (it == counts_.end()) {
    std::fill(out.begin(), out.end(), -std::log(static_cast<double>(n)));
    return out;
  }
  double total = 0.0;
  for (double c : it->second) total += c;
  const double denom = std::log(total + smoothing_ * static_cast<double>(n));
  for (std::size_t t = 0; t < n; ++t) out[t] = std::log(it->second[t] + smoothing_) - denom;
  return out;
}

NgramLM ngram_train(const std::vector<std::vector<std::string>>& corpus, int order, double smoothing,
                    std::optional<Vocabulary> vocab, std::string_view eos) {
  if (order < 1) throw Error(ErrorKind::kInvalidArgument, "n-gram order must be >= 1");
  if (!vocab) {
    std::vector<std::string> tokens;
    std::map<std::string, bool, std::less<>> seen;
    for (const auto& line : corpus) {
      for (const auto& t : line) {
        if (t != eos && seen.emplace(t, true).second) tokens.push_back(t);
      }
    }
    tokens.emplace_back(eos);
    vocab = Vocabulary(std::move(tokens), eos);
  }
  const std::size_t h = static_cast<std::size_t>(order - 1);
  std::map<std::vector<TokenId>, std::vector<double>> counts;
  for (const auto& line : corpus) {
    std::vector<TokenId> ids(h, NgramLM::kBos);
    for (const auto& t : line) {
      TokenId id = vocab->id_of(t);
      if (id == vocab->eos_id()) throw Error(ErrorKind::kLoad, "EOS token inside a corpus line");
      ids.push_back(id);
    }
    ids.push_back(vocab->eos_id());
    for (std::size_t i = h; i < ids.size(); ++i) {
      std::vector<TokenId> history(ids.begin() + static_cast<std::ptrdiff_t>(i - h), ids.begin() + static_cast<std::ptrdiff_t>(i));
      auto& row = counts[history];
      if (row.empty()) row.assign(vocab->size(), 0.0);
      row[static_cast<std::size_t>(ids[i])] += 1.0;
    }
  }
  return NgramLM(std::move(*vocab), order, smoothing, std::move(counts));
}

std::vector<std::vector<std::string>> read_corpus_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kLoad, "cannot open " + path.string());
  std::vector<std::vector<std::string>> corpus;
  std::string line;
  while (std::getline(in, line)) {
    std::istringstream ls(line);
    std::vector<std::string> toks;
    std::string t;
    while (ls >> t) toks.push_back(t);
    if (!toks.empty()) corpus.push_back(std::move(toks));
  }
  return corpus;
}

// ---------------------------------------------------------------------------

double sequence_logprob(const LanguageModel& model, const Context& context, std::span<const TokenId> seq, CallCounters* counters) {
  validate_sequence(model.vocab(), seq);
  double total = 0.0;
  for (std::size_t i = 0; i < seq.size(); ++i) {
    auto lp = model.next_token_logprobs(context, seq.first(i), counters);
    total += lp[static_cast<std::size_t>(seq[i])];
  }
  return total;
}

std::vector<ScoredSequence> enumerate_sequences(const LanguageModel& model, const Context& context, int max_len, std::uint64_t cap) {
  if (max_len < 1) throw Error(ErrorKind::kInvalidArgument, "max_len must be >= 1");
  const std::uint64_t v = model.vocab().size();
  std::uint64_t space = 1;
  for (int i = 0; i < max_len; ++i) {
    if (space > cap / v + 1) {
      space = cap + 1;
      break;
    }
    space *= v;
  }
  if (space > cap) {
    throw Error(ErrorKind::kEnumerationCap,
                "enumeration refused: |V|^max_len exceeds the cap of " + std::to_string(cap) + " sequences");
  }
  const TokenId eos = model.vocab().eos_id();
  std::vector<ScoredSequence> out;
  Sequence prefix;
  std::function<void(double)> visit = [&](double lp) {
    auto next = model.next_token_logprobs(context, prefix);
    for (std::size_t t = 0; t < next.size(); ++t) {
      if (next[t] == kNegInf) continue;
      const double child = lp + next[t];
      prefix.push_back(static_cast<TokenId>(t));
      if (static_cast<TokenId>(t) == eos || static_cast<int>(prefix.size()) == max_len) {
        out.push_back({prefix, child});
      } else {
        visit(child);
      }
      prefix.pop_back();
    }
  };
  visit(0.0);
  return out;
}

}  // namespace decalign
