#pragma once

#include <chrono>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

#include "decalign/models.hpp"

namespace decalign {

inline constexpr int kProtocolVersion = 1;

/// Transport failure after exhausting retries.
class TransportError : public Error {
 public:
  TransportError(const std::string& what, std::string endpoint, int attempts, bool retryable)
      : Error(ErrorKind::kTransport, what), endpoint_(std::move(endpoint)), attempts_(attempts), retryable_(retryable) {}

  const std::string& endpoint() const noexcept { return endpoint_; }
  int attempts() const noexcept { return attempts_; }
  /// False when the server answered with a protocol-level error body.
  bool retryable() const noexcept { return retryable_; }

 private:
  std::string endpoint_;
  int attempts_;
  bool retryable_;
};

enum class Transport { kHttp, kStream };

struct Endpoint {
  Transport transport = Transport::kHttp;
  std::string host;
  int port = 0;

  /// Accepts "http://host:port" and "tcp://host:port".
  static Endpoint parse(std::string_view text);
  std::string to_string() const;
};

// Wire format helpers (newline-free JSON bodies).
std::string encode_logprobs_request(const Context& context, std::span<const TokenId> prefix);
std::string encode_logprobs_response(std::span<const double> logprobs);
std::string encode_error_response(std::string_view message);
/// Returns the logprob vector or throws TransportError(retryable=false) on an error body.
std::vector<double> decode_logprobs_response(std::string_view body, const std::string& endpoint);

struct RemoteOptions {
  std::chrono::milliseconds timeout{5000};
  int max_retries = 2;
  /// Directory for memoized responses; defaults to $DECODE_ALIGN_CACHE.
  std::optional<std::filesystem::path> cache_dir;
};

/// Client for a model served over the newline-delimited JSON protocol, either
/// as an HTTP POST /logprobs endpoint or a raw byte stream. Calls are
/// serialized over one connection.
class RemoteLM final : public LanguageModel {
 public:
  RemoteLM(Endpoint endpoint, Vocabulary vocab, RemoteOptions options = {});
  ~RemoteLM() override;

  const Endpoint& endpoint() const noexcept { return endpoint_; }
  int protocol_version() const noexcept { return kProtocolVersion; }

 protected:
  std::vector<double> compute_logprobs(const Context& context, std::span<const TokenId> prefix) const override;

 private:
  std::string round_trip(const std::string& body) const;
  std::string round_trip_stream(const std::string& body) const;
  void close_stream() const;
  std::optional<std::vector<double>> cache_lookup(const std::string& request) const;
  void cache_store(const std::string& request, std::span<const double> logprobs) const;

  Endpoint endpoint_;
  RemoteOptions options_;
  mutable std::mutex mutex_;
  mutable int stream_fd_ = -1;
  mutable std::string stream_buffer_;
};

/// Fetches GET /vocab ({"v":1,"tokens":[...],"eos":id}) from an HTTP endpoint.
Vocabulary fetch_remote_vocab(const Endpoint& endpoint, std::chrono::milliseconds timeout = std::chrono::milliseconds{5000});

/// Connects to an endpoint; HTTP endpoints provide their own vocabulary.
std::unique_ptr<RemoteLM> remote_connect(const std::string& endpoint, std::optional<Vocabulary> vocab = std::nullopt,
                                         RemoteOptions options = {});

/// Serves a LanguageModel over the wire protocol on 127.0.0.1, in-process.
/// Used as a mock backend in tests and for exposing toy models.
class ProtocolServer {
 public:
  ProtocolServer(const LanguageModel& model, Transport transport, int port = 0);
  ~ProtocolServer();
  ProtocolServer(const ProtocolServer&) = delete;
  ProtocolServer& operator=(const ProtocolServer&) = delete;

  int port() const noexcept { return port_; }
  std::string endpoint() const;
  void stop();

  /// Processes one request body; returns (http status, response body).
  static std::pair<int, std::string> handle(const LanguageModel& model, std::string_view body);

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
  Transport transport_;
  int port_ = 0;
};

}  // namespace decalign
