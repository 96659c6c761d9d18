#include <arpa/inet.h>
#include <netdb.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <iterator>
#include <ostream>

#include <httplib.h>
#include <json.hpp>

#include "decalign/cli.hpp"
#include "decalign/remote.hpp"

namespace decalign {

using nlohmann::json;

namespace {

ExperimentConfig load_with_overrides(const std::filesystem::path& path, const DecodeOptions& options) {
  ExperimentConfig cfg = load_config_file(path);
  if (options.seed) cfg.seed = *options.seed;
  if (options.out) cfg.output_dir = *options.out;
  return cfg;
}

// Maps exceptions to exit codes.
template <class F>
int guarded(std::ostream& err, F&& body) {
  try {
    return body();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
}

void ensure_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw Error(ErrorKind::kLoad, "cannot create output directory " + dir.string() + ": " + ec.message());
}

std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(6) << v;
  return os.str();
}

}  // namespace

namespace {

// Records from an interrupted run. Complete lines must parse; an unterminated
// last line is a torn write and is dropped.
std::vector<RunRecord> read_partial_results(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kLoad, "cannot open results file " + path.string());
  const std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  std::vector<RunRecord> out;
  std::size_t start = 0, lineno = 0;
  while (start < text.size()) {
    const auto nl = text.find('\n', start);
    ++lineno;
    if (nl == std::string::npos) break;
    const std::string line = text.substr(start, nl - start);
    start = nl + 1;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(record_from_json_line(line));
    } catch (const Error& e) {
      throw Error(ErrorKind::kLoad, path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace

int cmd_decode(const std::filesystem::path& config, const DecodeOptions& options, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = load_with_overrides(config, options);
    const Experiment ex = build_experiment(cfg);
    ensure_dir(cfg.output_dir);
    const auto partial_path = cfg.output_dir / "results.jsonl.partial";
    const auto results_path = cfg.output_dir / "results.jsonl";

    std::vector<RunRecord> previous;
    RunOptions run;
    run.seed = cfg.seed;
    run.jobs = options.jobs;
    run.params_digest = params_digest(cfg);
    if (options.resume && std::filesystem::exists(partial_path)) {
      for (auto& r : read_partial_results(partial_path)) {
        if (r.error || r.decoder != decoder_name(ex.decoder.kind) || r.params_digest != run.params_digest) continue;
        run.skip.insert(r.id);
        previous.push_back(std::move(r));
      }
    }
    std::ofstream partial(partial_path, std::ios::binary | std::ios::trunc);
    if (!partial) throw Error(ErrorKind::kLoad, "cannot write " + partial_path.string());
    for (const auto& r : previous) partial << record_to_json_line(r) << '\n';
    partial.flush();
    run.on_record = [&partial](const RunRecord& r) {
      partial << record_to_json_line(r) << '\n';
      partial.flush();
    };

    ValueFactory factory;
    if (cfg.value) factory = build_value_factory(*cfg.value, ex.model->vocab(), ex.utility, ex.dataset.examples);
    auto records = run_experiment(*ex.model, ex.decoder, ex.dataset, *ex.utility, cfg.value ? &factory : nullptr, run);
    partial.close();

    records.insert(records.end(), std::make_move_iterator(previous.begin()), std::make_move_iterator(previous.end()));
    std::sort(records.begin(), records.end(), [](const RunRecord& a, const RunRecord& b) { return a.id < b.id; });
    write_results_file(results_path, records);
    const SummaryRow summary = summarize(records, cfg.analysis.top_c, cfg.analysis.bootstrap, cfg.seed);
    write_summary_csv(cfg.output_dir / "summary.csv", std::span(&summary, 1));

    const auto failed = std::count_if(records.begin(), records.end(), [](const RunRecord& r) { return r.error.has_value(); });
    out << "decoded " << records.size() << " examples with " << decoder_name(ex.decoder.kind) << "; mean utility "
        << fmt(summary.utility.mean) << "\n";
    out << "results: " << results_path.string() << "\n";
    if (failed > 0) {
      err << "error: " << failed << " example(s) failed; see the error fields in " << results_path.string() << '\n';
      return 1;
    }
    std::filesystem::remove(partial_path);
    return 0;
  });
}

int cmd_sweep(const std::filesystem::path& config, const DecodeOptions& options, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = load_with_overrides(config, options);
    if (!cfg.sweep) throw ConfigError("sweep", "missing required field");
    const SweepConfig& sw = *cfg.sweep;
    const Experiment ex = build_experiment(cfg);

    Dataset dev, test;
    if (sw.dev_dataset) {
      try {
        dev = load_dataset_jsonl(*sw.dev_dataset, ex.model->vocab());
      } catch (const Error& e) {
        throw ConfigError("sweep.dev_dataset", e.what());
      }
      test = ex.dataset;
    } else {
      if (ex.dataset.examples.size() <= sw.dev_size) throw ConfigError("sweep.dev_size", "leaves no test examples");
      const auto cut = ex.dataset.examples.begin() + static_cast<std::ptrdiff_t>(sw.dev_size);
      dev.examples.assign(ex.dataset.examples.begin(), cut);
      test.examples.assign(cut, ex.dataset.examples.end());
    }
    std::vector<Example> pool = dev.examples;
    pool.insert(pool.end(), test.examples.begin(), test.examples.end());

    SweepSpec spec;
    spec.quality_grid = sw.grid;
    spec.decoders = sw.decoders;
    spec.alpha_grid = sw.alpha_grid;
    spec.cpuct_grid = sw.cpuct_grid;
    spec.bootstrap_resamples = cfg.analysis.bootstrap;
    spec.seed = cfg.seed;
    spec.jobs = options.jobs;
    const auto vocab = ex.model->vocab();
    auto values = [&](double q) {
      ValueConfig v = *cfg.value;
      if (sw.quality == SweepConfig::Quality::kLambda) {
        v.kind = ValueConfig::Kind::kInterpolated;
        v.lambda = q;
      } else {
        v.kind = ValueConfig::Kind::kDegraded;
        v.eta = q;
      }
      return build_value_factory(v, vocab, ex.utility, pool);
    };
    const auto rows = sweep_value_quality(*ex.model, ex.decoder, dev, test, *ex.utility, values, spec);

    ensure_dir(cfg.output_dir);
    const auto path = cfg.output_dir / "sweep.csv";
    std::ofstream csv(path, std::ios::binary | std::ios::trunc);
    if (!csv) throw Error(ErrorKind::kLoad, "cannot write " + path.string());
    const std::string header = "decoder,quality,selected,n,mean_utility,ci_low,ci_high";
    csv << header << '\n';
    out << header << '\n';
    for (const auto& r : rows) {
      std::ostringstream line;
      line << std::setprecision(17) << r.decoder << ',' << r.quality << ',';
      if (r.selected) line << *r.selected;
      line << ',' << r.n << ',' << r.utility.mean << ',' << r.utility.low << ',' << r.utility.high;
      csv << line.str() << '\n';
      out << line.str() << '\n';
    }
    return 0;
  });
}

int cmd_oracle(const std::filesystem::path& config, const DecodeOptions& options, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    const ExperimentConfig cfg = load_with_overrides(config, options);
    const Experiment ex = build_experiment(cfg);
    const Vocabulary& vocab = ex.model->vocab();
    ensure_dir(cfg.output_dir);
    const auto path = cfg.output_dir / "oracle.jsonl";
    std::ofstream file(path, std::ios::binary | std::ios::trunc);
    if (!file) throw Error(ErrorKind::kLoad, "cannot write " + path.string());
    for (const auto& e : ex.dataset.examples) {
      const auto res = brute_force_oracle(*ex.model, *ex.utility, e.reference, e.context, cfg.decoder.params.max_len);
      out << "example " << e.id << '\n';
      out << "argmax_likelihood = \"" << vocab.decode(res.argmax_likelihood) << "\"\n";
      out << "argmax_utility = \"" << vocab.decode(res.argmax_utility) << "\"\n";
      json table = json::array();
      for (const auto& row : res.table) {
        table.push_back({{"seq", vocab.decode(row.seq)}, {"logprob", row.logprob}, {"utility", row.utility}});
      }
      file << json{{"id", e.id},
                   {"argmax_likelihood", vocab.decode(res.argmax_likelihood)},
                   {"argmax_utility", vocab.decode(res.argmax_utility)},
                   {"table", table}}
                  .dump()
           << '\n';
    }
    return 0;
  });
}

int cmd_analyze(const AnalyzeOptions& options, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    if (options.results.empty()) throw ConfigError("results", "no results files given");
    for (const auto& p : options.results) {
      if (!std::filesystem::exists(p)) throw ConfigError("results", "file not found: " + p.string());
    }
    std::vector<SummaryRow> rows;
    std::vector<HexPoint> outputs, taus;
    for (const auto& p : options.results) {
      const auto records = read_results_file(p);
      const SummaryRow row = summarize(records, options.top_c, options.bootstrap, options.seed);
      rows.push_back(row);
      out << p.string() << ": decoder=" << row.decoder << " n=" << row.n << " mean_utility=" << fmt(row.utility.mean) << " ci=["
          << fmt(row.utility.low) << ", " << fmt(row.utility.high) << "]\n";
      if (row.pearson) out << "pearson_r = " << fmt(row.pearson->r) << " (p = " << fmt(row.pearson->p_value) << ")\n";
      else out << "pearson_r = undefined\n";
      if (row.mean_tau) out << "mean_tau = " << fmt(*row.mean_tau) << " (excluded " << row.tau_excluded << ")\n";
      else out << "mean_tau = undefined (excluded " << row.tau_excluded << ")\n";

      std::vector<RunRecord> ok;
      for (const auto& r : records) {
        if (!r.error) ok.push_back(r);
      }
      const auto align = candidate_alignment(ok, options.top_c);
      for (std::size_t i = 0; i < ok.size(); ++i) {
        const double x = ok[i].normalized_logprob.value_or(ok[i].logprob);
        if (!std::isfinite(x)) continue;
        outputs.push_back({x, ok[i].utility, ok[i].utility});
        if (align.per_example[i]) taus.push_back({x, ok[i].utility, *align.per_example[i]});
      }
    }
    if (options.out) {
      ensure_dir(*options.out);
      write_summary_csv(*options.out / "summary.csv", rows);
      if (!outputs.empty()) write_hexbin_csv(*options.out / "hexbin_outputs.csv", hexbin(outputs, options.nx));
      if (!taus.empty()) write_hexbin_csv(*options.out / "hexbin_tau.csv", hexbin(taus, options.nx));
    }
    return 0;
  });
}

// ---------------------------------------------------------------------------
// Protocol conformance

namespace {

class ProbeClient {
 public:
  virtual ~ProbeClient() = default;
  /// Sends one body; returns (status, body). Stream mode reports status 200 unless the body is an error.
  virtual std::pair<int, std::string> send(const std::string& body) = 0;
  /// Sends all bodies before reading any reply.
  virtual std::vector<std::string> pipeline(const std::vector<std::string>& bodies) = 0;
  virtual std::optional<std::string> vocab() = 0;
};

class HttpProbe final : public ProbeClient {
 public:
  HttpProbe(const Endpoint& ep, std::chrono::milliseconds timeout) : client_(ep.host, ep.port) {
    client_.set_connection_timeout(timeout);
    client_.set_read_timeout(timeout);
    client_.set_keep_alive(true);
  }
  std::pair<int, std::string> send(const std::string& body) override {
    auto res = client_.Post("/logprobs", body, "application/json");
    if (!res) throw Error(ErrorKind::kTransport, "no response from server");
    return {res->status, res->body};
  }
  std::vector<std::string> pipeline(const std::vector<std::string>& bodies) override {
    std::vector<std::string> out;
    for (const auto& b : bodies) out.push_back(send(b).second);
    return out;
  }
  std::optional<std::string> vocab() override {
    auto res = client_.Get("/vocab");
    if (!res || res->status != 200) throw Error(ErrorKind::kTransport, "GET /vocab failed");
    return res->body;
  }

 private:
  httplib::Client client_;
};

class StreamProbe final : public ProbeClient {
 public:
  StreamProbe(const Endpoint& ep, std::chrono::milliseconds timeout) : timeout_(timeout) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (getaddrinfo(ep.host.c_str(), std::to_string(ep.port).c_str(), &hints, &res) != 0) {
      throw Error(ErrorKind::kTransport, "cannot resolve " + ep.host);
    }
    for (addrinfo* p = res; p; p = p->ai_next) {
      fd_ = ::socket(p->ai_family, p->ai_socktype, p->ai_protocol);
      if (fd_ < 0) continue;
      if (::connect(fd_, p->ai_addr, p->ai_addrlen) == 0) break;
      ::close(fd_);
      fd_ = -1;
    }
    freeaddrinfo(res);
    if (fd_ < 0) throw Error(ErrorKind::kTransport, "cannot connect to " + ep.to_string());
  }
  ~StreamProbe() override {
    if (fd_ >= 0) ::close(fd_);
  }
  std::pair<int, std::string> send(const std::string& body) override {
    write_all(body + "\n");
    std::string line = read_line();
    const bool is_error = json::accept(line) && json::parse(line).contains("error");
    return {is_error ? 400 : 200, line};
  }
  std::vector<std::string> pipeline(const std::vector<std::string>& bodies) override {
    std::string all;
    for (const auto& b : bodies) all += b + "\n";
    write_all(all);
    std::vector<std::string> out;
    for (std::size_t i = 0; i < bodies.size(); ++i) out.push_back(read_line());
    return out;
  }
  std::optional<std::string> vocab() override { return std::nullopt; }

 private:
  void write_all(const std::string& data) {
    std::size_t off = 0;
    while (off < data.size()) {
      const ssize_t n = ::send(fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL);
      if (n <= 0) throw Error(ErrorKind::kTransport, "write failed");
      off += static_cast<std::size_t>(n);
    }
  }
  std::string read_line() {
    for (;;) {
      const auto nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        return line;
      }
      pollfd pfd{fd_, POLLIN, 0};
      if (::poll(&pfd, 1, static_cast<int>(timeout_.count())) <= 0) throw Error(ErrorKind::kTransport, "read timed out");
      char buf[4096];
      const ssize_t n = ::recv(fd_, buf, sizeof buf, 0);
      if (n <= 0) throw Error(ErrorKind::kTransport, "connection closed");
      buffer_.append(buf, static_cast<std::size_t>(n));
    }
  }

  int fd_ = -1;
  std::chrono::milliseconds timeout_;
  std::string buffer_;
};

// Empty string when the response is a well-formed normalized row of length n.
std::string check_row(const std::string& body, std::size_t n, std::vector<double>* row) {
  std::vector<double> lp;
  try {
    lp = decode_logprobs_response(body, "probe");
  } catch (const std::exception& e) {
    return e.what();
  }
  if (lp.size() != n) return "expected " + std::to_string(n) + " logprobs, got " + std::to_string(lp.size());
  double mass = 0.0;
  for (double v : lp) {
    if (std::isnan(v) || v > 0.0) return "invalid log-probability";
    mass += std::exp(v);
  }
  if (std::abs(mass - 1.0) > 1e-6) return "probabilities sum to " + fmt(mass);
  if (row) *row = std::move(lp);
  return {};
}

bool rows_close(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (std::isinf(a[i]) || std::isinf(b[i])) {
      if (a[i] != b[i]) return false;
    } else if (std::abs(a[i] - b[i]) > 1e-6) {
      return false;
    }
  }
  return true;
}

}  // namespace

std::vector<ProtocheckRule> protocheck(const std::string& endpoint, std::optional<std::size_t> vocab_size,
                                       std::chrono::milliseconds timeout) {
  const Endpoint ep = Endpoint::parse(endpoint);
  std::unique_ptr<ProbeClient> client;
  if (ep.transport == Transport::kHttp) client = std::make_unique<HttpProbe>(ep, timeout);
  else client = std::make_unique<StreamProbe>(ep, timeout);

  std::vector<ProtocheckRule> rules;
  std::optional<std::string> vocab_doc;
  std::string vocab_problem;
  try {
    vocab_doc = client->vocab();
  } catch (const Error& e) {
    if (!vocab_size) throw;
    vocab_problem = e.what();
  }
  std::size_t n = vocab_size.value_or(0);
  TokenId eos = -1;
  if (vocab_doc) {
    const json v = json::parse(*vocab_doc);
    n = v.at("tokens").size();
    eos = v.at("eos").get<TokenId>();
  }
  if (n == 0) throw ConfigError("vocab_size", "stream endpoints need the vocabulary size");

  // Probe one-token prefixes over the first few non-EOS tokens.
  std::vector<std::string> probes{encode_logprobs_request(Context{}, {})};
  for (TokenId t = 0; t < static_cast<TokenId>(n) && probes.size() < 5; ++t) {
    if (t == eos) continue;
    Sequence prefix{t};
    probes.push_back(encode_logprobs_request(Context{}, prefix));
  }

  ProtocheckRule norm{"normalization", true, ""};
  std::vector<std::vector<double>> first;
  std::vector<std::string> answered;
  for (std::size_t i = 0; i < probes.size(); ++i) {
    std::vector<double> row;
    const auto [status, body] = client->send(probes[i]);
    // Without a vocabulary document EOS is unknown; a one-token probe refused
    // with a proper error body is taken to be the closed EOS prefix.
    if (i > 0 && eos < 0 && status != 200 && json::accept(body) && json::parse(body).contains("error")) continue;
    std::string problem = status == 200 ? check_row(body, n, &row) : "http status " + std::to_string(status);
    if (!problem.empty() && norm.passed) {
      norm.passed = false;
      norm.detail = problem;
    }
    first.push_back(std::move(row));
    answered.push_back(probes[i]);
  }
  probes = std::move(answered);
  rules.push_back(norm);

  ProtocheckRule det{"determinism", true, ""};
  for (std::size_t i = 0; i < probes.size() && det.passed; ++i) {
    std::vector<double> row;
    const std::string problem = check_row(client->send(probes[i]).second, n, &row);
    if (!problem.empty() || !rows_close(row, first[i])) {
      det.passed = false;
      det.detail = "repeated request " + std::to_string(i) + " gave a different response";
    }
  }
  rules.push_back(det);

  ProtocheckRule order{"ordering", true, ""};
  std::vector<std::string> reversed(probes.rbegin(), probes.rend());
  const auto replies = client->pipeline(reversed);
  for (std::size_t i = 0; i < replies.size() && order.passed; ++i) {
    std::vector<double> row;
    const std::size_t src = probes.size() - 1 - i;
    if (!check_row(replies[i], n, &row).empty() || !rows_close(row, first[src])) {
      order.passed = false;
      order.detail = "response " + std::to_string(i) + " does not answer request " + std::to_string(i);
    }
  }
  rules.push_back(order);

  ProtocheckRule malformed{"malformed_request_recovery", true, ""};
  const auto [bad_status, bad_body] = client->send("not-json");
  const bool has_error = json::accept(bad_body) && json::parse(bad_body).contains("error");
  if (bad_status != 400 || !has_error) {
    malformed.passed = false;
    malformed.detail = "expected an error body with status 400, got status " + std::to_string(bad_status);
  } else {
    std::vector<double> row;
    if (!check_row(client->send(probes[0]).second, n, &row).empty() || !rows_close(row, first[0])) {
      malformed.passed = false;
      malformed.detail = "valid request failed after a malformed one";
    }
  }
  rules.push_back(malformed);

  ProtocheckRule stable{"vocab_stability", true, ""};
  if (vocab_doc) {
    if (client->vocab() != vocab_doc) {
      stable.passed = false;
      stable.detail = "/vocab changed between requests";
    }
  } else if (!vocab_problem.empty()) {
    stable.passed = false;
    stable.detail = vocab_problem;
  } else {
    stable.detail = "not applicable to stream transport";
  }
  rules.push_back(stable);
  return rules;
}

int cmd_protocheck(const std::string& endpoint, std::optional<std::size_t> vocab_size, std::ostream& out, std::ostream& err) {
  return guarded(err, [&] {
    try {
      Endpoint::parse(endpoint);
    } catch (const Error& e) {
      throw ConfigError("endpoint", e.what());
    }
    const auto rules = protocheck(endpoint, vocab_size);
    bool all = true;
    for (const auto& r : rules) {
      out << (r.passed ? "PASS " : "FAIL ") << r.name;
      if (!r.detail.empty()) out << " (" << r.detail << ")";
      out << '\n';
      all = all && r.passed;
    }
    return all ? 0 : 1;
  });
}

}  // namespace decalign
