#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>

#include "decalign/analysis.hpp"

namespace decalign {

using nlohmann::json;

namespace {

json number(double v) {
  if (std::isfinite(v)) return v;
  return v < 0 ? "-Infinity" : (v > 0 ? "Infinity" : "NaN");
}

double read_number(const json& j) {
  if (j.is_number()) return j.get<double>();
  const auto s = j.get<std::string>();
  if (s == "-Infinity") return -std::numeric_limits<double>::infinity();
  if (s == "Infinity") return std::numeric_limits<double>::infinity();
  if (s == "NaN") return std::nan("");
  throw Error(ErrorKind::kLoad, "not a number: " + s);
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

std::string record_to_json_line(const RunRecord& r) {
  json j;
  j["id"] = r.id;
  j["decoder"] = r.decoder;
  j["params_digest"] = r.params_digest;
  j["seed"] = r.seed;
  j["output_ids"] = r.output;
  j["logprob"] = number(r.logprob);
  j["target_logprob"] = r.target_logprob ? number(*r.target_logprob) : json(nullptr);
  j["normalized_logprob"] = r.normalized_logprob ? number(*r.normalized_logprob) : json(nullptr);
  j["utility"] = r.utility;
  json cands = json::array();
  for (const auto& c : r.candidates) cands.push_back({{"logprob", number(c.logprob)}, {"utility", c.utility}});
  j["candidates"] = std::move(cands);
  j["lm_calls"] = r.counters.lm_calls;
  j["value_calls"] = r.counters.value_calls;
  if (r.error) j["error"] = *r.error;
  return j.dump();
}

RunRecord record_from_json_line(std::string_view line) {
  try {
    const json j = json::parse(line);
    RunRecord r;
    r.id = j.at("id").get<std::string>();
    r.decoder = j.at("decoder").get<std::string>();
    r.params_digest = j.value("params_digest", "");
    r.seed = j.at("seed").get<std::uint64_t>();
    r.output = j.at("output_ids").get<Sequence>();
    r.logprob = read_number(j.at("logprob"));
    if (!j.at("target_logprob").is_null()) r.target_logprob = read_number(j.at("target_logprob"));
    if (!j.at("normalized_logprob").is_null()) r.normalized_logprob = read_number(j.at("normalized_logprob"));
    r.utility = j.at("utility").get<double>();
    for (const auto& c : j.at("candidates")) r.candidates.push_back({read_number(c.at("logprob")), c.at("utility").get<double>()});
    r.counters.lm_calls = j.at("lm_calls").get<std::uint64_t>();
    r.counters.value_calls = j.at("value_calls").get<std::uint64_t>();
    if (j.contains("error")) r.error = j.at("error").get<std::string>();
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kLoad, std::string("bad results record: ") + e.what());
  }
}

std::vector<RunRecord> read_results_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kLoad, "cannot open results file " + path.string());
  std::vector<RunRecord> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json_line(line));
    } catch (const Error& e) {
      throw Error(ErrorKind::kLoad, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void write_results_file(const std::filesystem::path& path, std::span<const RunRecord> records) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kLoad, "cannot write " + path.string());
  for (const auto& r : records) out << record_to_json_line(r) << '\n';
  if (!out) throw Error(ErrorKind::kLoad, "write failed for " + path.string());
}

SummaryRow summarize(std::span<const RunRecord> records, std::size_t top_c, int bootstrap_resamples, std::uint64_t seed) {
  std::vector<RunRecord> ok;
  for (const auto& r : records) {
    if (!r.error) ok.push_back(r);
  }
  std::sort(ok.begin(), ok.end(), [](const RunRecord& a, const RunRecord& b) { return a.id < b.id; });
  SummaryRow row;
  row.n = ok.size();
  if (!records.empty()) {
    row.decoder = records.front().decoder;
    row.params_digest = records.front().params_digest;
  }
  if (ok.empty()) return row;
  std::vector<double> util, lp;
  for (const auto& r : ok) {
    util.push_back(r.utility);
    lp.push_back(r.logprob);
  }
  row.utility = bootstrap_mean_ci(util, bootstrap_resamples, seed);
  try {
    row.pearson = pearson(lp, util);
  } catch (const Error&) {
    // too few points or no variance: left empty
  }
  const auto align = candidate_alignment(ok, top_c);
  row.tau_excluded = align.excluded;
  if (align.excluded < ok.size()) row.mean_tau = align.mean_tau;
  return row;
}

std::string summary_csv_header() {
  return "decoder,params_digest,n,mean_utility,ci_low,ci_high,pearson_r,pearson_p,mean_tau,tau_excluded";
}

std::string summary_csv_line(const SummaryRow& r) {
  std::ostringstream os;
  os << r.decoder << ',' << r.params_digest << ',' << r.n << ',' << fmt(r.utility.mean) << ',' << fmt(r.utility.low) << ','
     << fmt(r.utility.high) << ',';
  if (r.pearson) os << fmt(r.pearson->r) << ',' << fmt(r.pearson->p_value);
  else os << ',';
  os << ',';
  if (r.mean_tau) os << fmt(*r.mean_tau);
  os << ',' << r.tau_excluded;
  return os.str();
}

void write_summary_csv(const std::filesystem::path& path, std::span<const SummaryRow> rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kLoad, "cannot write " + path.string());
  out << summary_csv_header() << '\n';
  for (const auto& r : rows) out << summary_csv_line(r) << '\n';
}

void write_hexbin_csv(const std::filesystem::path& path, const HexGrid& grid) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorKind::kLoad, "cannot write " + path.string());
  out << "cx,cy,count,mean\n";
  for (const auto& c : grid.cells) out << fmt(c.cx) << ',' << fmt(c.cy) << ',' << c.count << ',' << fmt(c.mean) << '\n';
}

}  // namespace decalign
