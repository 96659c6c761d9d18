#include "decalign/remote.hpp"

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cmath>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <json.hpp>

namespace decalign {

namespace {

using nlohmann::json;

std::uint64_t fnv1a(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool write_all(int fd, std::string_view data) {
  while (!data.empty()) {
    ssize_t n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
    if (n <= 0) return false;
    data.remove_prefix(static_cast<std::size_t>(n));
  }
  return true;
}

// Reads until '\n'; leftover bytes stay in `buffer`. Returns nullopt on EOF/timeout.
std::optional<std::string> read_line(int fd, std::string& buffer, int timeout_ms) {
  for (;;) {
    auto pos = buffer.find('\n');
    if (pos != std::string::npos) {
      std::string line = buffer.substr(0, pos);
      buffer.erase(0, pos + 1);
      return line;
    }
    if (timeout_ms >= 0) {
      pollfd pfd{fd, POLLIN, 0};
      int r = ::poll(&pfd, 1, timeout_ms);
      if (r <= 0) return std::nullopt;
    }
    char chunk[4096];
    ssize_t n = ::recv(fd, chunk, sizeof(chunk), 0);
    if (n <= 0) return std::nullopt;
    buffer.append(chunk, static_cast<std::size_t>(n));
  }
}

int connect_tcp(const std::string& host, int port) {
  addrinfo hints{};
  hints.ai_family = AF_UNSPEC;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (::getaddrinfo(host.c_str(), std::to_string(port).c_str(), &hints, &res) != 0) return -1;
  int fd = -1;
  for (addrinfo* p = res; p; p = p->ai_next) {
    fd = ::socket(p->ai_family, p->ai_socktype, p->ai_protocol);
    if (fd < 0) continue;
    if (::connect(fd, p->ai_addr, p->ai_addrlen) == 0) break;
    ::close(fd);
    fd = -1;
  }
  ::freeaddrinfo(res);
  if (fd >= 0) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  return fd;
}

}  // namespace

Endpoint Endpoint::parse(std::string_view text) {
  Endpoint ep;
  std::string_view rest;
  if (text.starts_with("http://")) {
    ep.transport = Transport::kHttp;
    rest = text.substr(7);
  } else if (text.starts_with("tcp://")) {
    ep.transport = Transport::kStream;
    rest = text.substr(6);
  } else {
    throw Error(ErrorKind::kInvalidArgument, "endpoint must start with http:// or tcp://: " + std::string(text));
  }
  if (!rest.empty() && rest.back() == '/') rest.remove_suffix(1);
  auto colon = rest.rfind(':');
  if (colon == std::string_view::npos || colon == 0) throw Error(ErrorKind::kInvalidArgument, "endpoint needs host:port: " + std::string(text));
  ep.host = std::string(rest.substr(0, colon));
  try {
    ep.port = std::stoi(std::string(rest.substr(colon + 1)));
  } catch (const std::exception&) {
    throw Error(ErrorKind::kInvalidArgument, "bad port in endpoint: " + std::string(text));
  }
  if (ep.port <= 0 || ep.port > 65535) throw Error(ErrorKind::kInvalidArgument, "bad port in endpoint: " + std::string(text));
  return ep;
}

std::string Endpoint::to_string() const {
  return (transport == Transport::kHttp ? "http://" : "tcp://") + host + ":" + std::to_string(port);
}

std::string encode_logprobs_request(const Context& context, std::span<const TokenId> prefix) {
  json j{{"v", kProtocolVersion}, {"context", context.ids}, {"prefix", std::vector<TokenId>(prefix.begin(), prefix.end())}};
  return j.dump();
}

std::string encode_logprobs_response(std::span<const double> logprobs) {
  json arr = json::array();
  for (double l : logprobs) {
    // JSON has no -inf; zero-probability tokens are sent as null.
    if (std::isfinite(l)) arr.push_back(l);
    else arr.push_back(nullptr);
  }
  return json{{"v", kProtocolVersion}, {"logprobs", std::move(arr)}}.dump();
}

std::string encode_error_response(std::string_view message) {
  return json{{"v", kProtocolVersion}, {"error", std::string(message)}}.dump();
}

std::vector<double> decode_logprobs_response(std::string_view body, const std::string& endpoint) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception& e) {
    throw TransportError(std::string("malformed response: ") + e.what(), endpoint, 1, true);
  }
  if (!j.is_object() || j.value("v", 0) != kProtocolVersion) {
    throw TransportError("response missing protocol version 1", endpoint, 1, false);
  }
  if (j.contains("error")) throw TransportError("server error: " + j["error"].dump(), endpoint, 1, false);
  if (!j.contains("logprobs") || !j["logprobs"].is_array()) throw TransportError("response has no logprobs", endpoint, 1, false);
  std::vector<double> out;
  for (const auto& x : j["logprobs"]) {
    if (x.is_null()) out.push_back(kNegInf);
    else if (x.is_number()) out.push_back(x.get<double>());
    else throw TransportError("non-numeric logprob in response", endpoint, 1, false);
  }
  return out;
}

// ---------------------------------------------------------------------------
// RemoteLM

RemoteLM::RemoteLM(Endpoint endpoint, Vocabulary vocab, RemoteOptions options)
    : LanguageModel(std::move(vocab)), endpoint_(std::move(endpoint)), options_(std::move(options)) {
  if (!options_.cache_dir) {
    if (const char* env = std::getenv("DECODE_ALIGN_CACHE"); env && *env) options_.cache_dir = std::filesystem::path(env);
  }
  if (options_.cache_dir) std::filesystem::create_directories(*options_.cache_dir);
}

RemoteLM::~RemoteLM() { close_stream(); }

void RemoteLM::close_stream() const {
  if (stream_fd_ >= 0) {
    ::close(stream_fd_);
    stream_fd_ = -1;
  }
  stream_buffer_.clear();
}

std::string RemoteLM::round_trip_stream(const std::string& body) const {
  if (stream_fd_ < 0) {
    stream_fd_ = connect_tcp(endpoint_.host, endpoint_.port);
    if (stream_fd_ < 0) throw std::runtime_error("connect failed");
  }
  if (!write_all(stream_fd_, body + "\n")) {
    close_stream();
    throw std::runtime_error("write failed");
  }
  auto line = read_line(stream_fd_, stream_buffer_, static_cast<int>(options_.timeout.count()));
  if (!line) {
    close_stream();
    throw std::runtime_error("no response before timeout");
  }
  return *line;
}

std::string RemoteLM::round_trip(const std::string& body) const {
  if (endpoint_.transport == Transport::kStream) return round_trip_stream(body);
  httplib::Client client(endpoint_.host, endpoint_.port);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(options_.timeout);
  const auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(options_.timeout - secs);
  client.set_connection_timeout(secs.count(), usecs.count());
  client.set_read_timeout(secs.count(), usecs.count());
  auto res = client.Post("/logprobs", body, "application/json");
  if (!res) throw std::runtime_error("http request failed: " + httplib::to_string(res.error()));
  if (res->status != 200 && res->status != 400) throw std::runtime_error("http status " + std::to_string(res->status));
  return res->body;
}

std::optional<std::vector<double>> RemoteLM::cache_lookup(const std::string& request) const {
  if (!options_.cache_dir) return std::nullopt;
  const std::string key = endpoint_.to_string() + "\n" + request;
  std::ostringstream name;
  name << std::hex << fnv1a(key) << ".json";
  std::ifstream in(*options_.cache_dir / name.str());
  if (!in) return std::nullopt;
  try {
    json j = json::parse(in);
    if (j.at("key").get<std::string>() != key) return std::nullopt;
    return decode_logprobs_response(j.at("response").get<std::string>(), endpoint_.to_string());
  } catch (const std::exception&) {
    return std::nullopt;
  }
}

void RemoteLM::cache_store(const std::string& request, std::span<const double> logprobs) const {
  if (!options_.cache_dir) return;
  const std::string key = endpoint_.to_string() + "\n" + request;
  std::ostringstream name;
  name << std::hex << fnv1a(key) << ".json";
  const auto path = *options_.cache_dir / name.str();
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp);
    out << json{{"key", key}, {"response", encode_logprobs_response(logprobs)}}.dump();
  }
  std::filesystem::rename(tmp, path);
}

std::vector<double> RemoteLM::compute_logprobs(const Context& context, std::span<const TokenId> prefix) const {
  const std::string request = encode_logprobs_request(context, prefix);
  std::lock_guard lock(mutex_);
  if (auto cached = cache_lookup(request)) return *cached;

  std::string last_error;
  const int attempts = options_.max_retries + 1;
  for (int attempt = 1; attempt <= attempts; ++attempt) {
    std::string body;
    try {
      body = round_trip(request);
    } catch (const std::runtime_error& e) {
      last_error = e.what();
      continue;
    }
    std::vector<double> lp;
    try {
      lp = decode_logprobs_response(body, endpoint_.to_string());
    } catch (const TransportError& e) {
      if (!e.retryable()) throw TransportError(e.what(), endpoint_.to_string(), attempt, false);
      last_error = e.what();
      continue;
    }
    if (lp.size() != vocab().size()) {
      throw TransportError("response has " + std::to_string(lp.size()) + " logprobs, expected " + std::to_string(vocab().size()),
                           endpoint_.to_string(), attempt, false);
    }
    double mass = 0.0;
    for (double l : lp) mass += std::exp(l);
    if (!(std::abs(mass - 1.0) <= 1e-6)) {
      throw TransportError("response logprobs exp-sum to " + std::to_string(mass), endpoint_.to_string(), attempt, false);
    }
    auto normalized = validate_distribution(lp);
    cache_store(request, normalized);
    return normalized;
  }
  throw TransportError("remote call failed after " + std::to_string(attempts) + " attempts: " + last_error, endpoint_.to_string(),
                       attempts, true);
}

Vocabulary fetch_remote_vocab(const Endpoint& endpoint, std::chrono::milliseconds timeout) {
  if (endpoint.transport != Transport::kHttp) {
    throw Error(ErrorKind::kInvalidArgument, "vocabulary discovery needs an http:// endpoint");
  }
  httplib::Client client(endpoint.host, endpoint.port);
  const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
  client.set_connection_timeout(secs.count(), 0);
  client.set_read_timeout(secs.count(), 0);
  auto res = client.Get("/vocab");
  if (!res || res->status != 200) throw TransportError("GET /vocab failed", endpoint.to_string(), 1, true);
  try {
    json j = json::parse(res->body);
    return Vocabulary(j.at("tokens").get<std::vector<std::string>>(), j.at("eos").get<TokenId>());
  } catch (const json::exception& e) {
    throw TransportError(std::string("malformed /vocab response: ") + e.what(), endpoint.to_string(), 1, false);
  }
}

std::unique_ptr<RemoteLM> remote_connect(const std::string& endpoint, std::optional<Vocabulary> vocab, RemoteOptions options) {
  Endpoint ep = Endpoint::parse(endpoint);
  if (!vocab) {
    if (ep.transport != Transport::kHttp) throw Error(ErrorKind::kInvalidArgument, "stream endpoints need an explicit vocabulary");
    vocab = fetch_remote_vocab(ep, options.timeout);
  }
  return std::make_unique<RemoteLM>(std::move(ep), std::move(*vocab), std::move(options));
}

// ---------------------------------------------------------------------------
// ProtocolServer

struct ProtocolServer::Impl {
  const LanguageModel& model;
  httplib::Server http;
  int listen_fd = -1;
  std::atomic<bool> stopping{false};
  std::thread thread;
  std::mutex conn_mutex;
  std::vector<std::thread> connections;
  std::vector<int> connection_fds;

  explicit Impl(const LanguageModel& m) : model(m) {}
};

std::pair<int, std::string> ProtocolServer::handle(const LanguageModel& model, std::string_view body) {
  json j;
  try {
    j = json::parse(body);
  } catch (const json::exception&) {
    return {400, encode_error_response("malformed request: not JSON")};
  }
  try {
    if (!j.is_object() || j.value("v", 0) != kProtocolVersion) return {400, encode_error_response("unsupported protocol version")};
    Context ctx{j.at("context").get<std::vector<TokenId>>()};
    auto prefix = j.at("prefix").get<std::vector<TokenId>>();
    validate_context(model.vocab(), ctx);
    auto lp = model.next_token_logprobs(ctx, prefix);
    return {200, encode_logprobs_response(lp)};
  } catch (const json::exception& e) {
    return {400, encode_error_response(std::string("malformed request: ") + e.what())};
  } catch (const std::exception& e) {
    return {400, encode_error_response(e.what())};
  }
}

ProtocolServer::ProtocolServer(const LanguageModel& model, Transport transport, int port)
    : impl_(std::make_unique<Impl>(model)), transport_(transport) {
  if (transport_ == Transport::kHttp) {
    impl_->http.Post("/logprobs", [this](const httplib::Request& req, httplib::Response& res) {
      auto [status, body] = handle(impl_->model, req.body);
      res.status = status;
      res.set_content(body, "application/json");
    });
    impl_->http.Get("/vocab", [this](const httplib::Request&, httplib::Response& res) {
      const auto& v = impl_->model.vocab();
      res.set_content(json{{"v", kProtocolVersion}, {"tokens", v.tokens()}, {"eos", v.eos_id()}}.dump(), "application/json");
    });
    port_ = port == 0 ? impl_->http.bind_to_any_port("127.0.0.1") : (impl_->http.bind_to_port("127.0.0.1", port) ? port : -1);
    if (port_ <= 0) throw Error(ErrorKind::kTransport, "cannot bind http server");
    impl_->thread = std::thread([this] { impl_->http.listen_after_bind(); });
    impl_->http.wait_until_ready();
    return;
  }

  int fd = ::socket(AF_INET, SOCK_STREAM, 0);
  int one = 1;
  ::setsockopt(fd, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
  addr.sin_port = htons(static_cast<std::uint16_t>(port));
  if (::bind(fd, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0 || ::listen(fd, 16) != 0) {
    ::close(fd);
    throw Error(ErrorKind::kTransport, "cannot bind stream server");
  }
  socklen_t len = sizeof(addr);
  ::getsockname(fd, reinterpret_cast<sockaddr*>(&addr), &len);
  port_ = ntohs(addr.sin_port);
  impl_->listen_fd = fd;
  impl_->thread = std::thread([impl = impl_.get()] {
    for (;;) {
      int conn = ::accept(impl->listen_fd, nullptr, nullptr);
      if (conn < 0) {
        if (impl->stopping) return;
        continue;
      }
      std::lock_guard lock(impl->conn_mutex);
      impl->connection_fds.push_back(conn);
      impl->connections.emplace_back([impl, conn] {
        std::string buffer;
        // Strictly sequential per connection: responses leave in request order.
        while (auto line = read_line(conn, buffer, -1)) {
          auto [status, body] = handle(impl->model, *line);
          if (!write_all(conn, body + "\n")) break;
        }
      });
    }
  });
}

ProtocolServer::~ProtocolServer() { stop(); }

std::string ProtocolServer::endpoint() const {
  return (transport_ == Transport::kHttp ? "http://127.0.0.1:" : "tcp://127.0.0.1:") + std::to_string(port_);
}

void ProtocolServer::stop() {
  if (!impl_ || impl_->stopping.exchange(true)) return;
  if (transport_ == Transport::kHttp) {
    impl_->http.stop();
  } else {
    ::shutdown(impl_->listen_fd, SHUT_RDWR);
    ::close(impl_->listen_fd);
  }
  if (impl_->thread.joinable()) impl_->thread.join();
  std::lock_guard lock(impl_->conn_mutex);
  for (int fd : impl_->connection_fds) ::shutdown(fd, SHUT_RDWR);
  for (auto& t : impl_->connections) t.join();
  for (int fd : impl_->connection_fds) ::close(fd);
}

}  // namespace decalign
