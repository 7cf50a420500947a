#pragma once

#include <chrono>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <sys/types.h>
#include <vector>

#include "coedg/dip.hpp"
#include "coedg/json_io.hpp"
#include "coedg/metrics.hpp"

namespace coedg {

inline constexpr const char* kProtocolVersion = "coedg/1";

// ---------------------------------------------------------------------------
// Wire messages. One JSON object per line; envelope keys in fixed order,
// payload keys sorted.

struct Request {
  std::int64_t id = 0;
  std::string op;
  json payload = json::object();
};

struct Response {
  std::int64_t id = 0;
  bool ok = true;
  json payload = json::object();
  std::string error;  // set iff !ok
};

std::string serialize(const Request& r);
std::string serialize(const Response& r);
Request parse_request(const std::string& line);
Response parse_response(const std::string& line);

// Error codes carried in Response::error.
inline constexpr const char* kErrUnsupported = "unsupported";
inline constexpr const char* kErrVersionMismatch = "version mismatch";
inline constexpr const char* kErrMalformed = "malformed request";
inline constexpr const char* kErrNotReady = "not ready";
inline constexpr const char* kErrBadPayload = "bad payload";

// ---------------------------------------------------------------------------
// Protocol trace: every request/response line exchanged by any handle, folded
// into one SHA-256 digest. Optionally keeps the lines for golden corpora.

class ProtocolTrace {
 public:
  ProtocolTrace();
  ~ProtocolTrace();
  ProtocolTrace(const ProtocolTrace&) = delete;
  ProtocolTrace& operator=(const ProtocolTrace&) = delete;

  void record(const std::string& handle, const std::string& request, const std::string& response);
  std::string digest() const;
  /// Continues the hash chain of an earlier, interrupted run.
  void chain(const std::string& previous_digest);
  std::size_t exchanges() const { return exchanges_; }

  void keep_lines(bool keep) { keep_ = keep; }
  const std::vector<std::string>& lines() const { return lines_; }

  // Every (handle, op) pair that was sent, in order.
  struct Entry {
    std::string handle;
    std::string op;
  };
  const std::vector<Entry>& entries() const { return entries_; }

 private:
  struct Ctx;
  std::unique_ptr<Ctx> ctx_;
  std::size_t exchanges_ = 0;
  bool keep_ = false;
  std::vector<std::string> lines_;
  std::vector<Entry> entries_;
};

// ---------------------------------------------------------------------------
// Transports.

class Transport {
 public:
  virtual ~Transport() = default;
  /// Sends one line and returns the reply line. Throws Error(kTransport) or
  /// Error(kTimeout).
  virtual std::string roundtrip(const std::string& line, std::chrono::milliseconds deadline) = 0;
  virtual void close() = 0;
};

// Server side of the protocol: consumes request lines, produces response lines.
class LineHandler {
 public:
  virtual ~LineHandler() = default;
  virtual std::string handle_line(const std::string& line) = 0;
  virtual bool finished() const = 0;  // true after a successful shutdown
};

class InProcessTransport : public Transport {
 public:
  explicit InProcessTransport(std::unique_ptr<LineHandler> handler) : handler_(std::move(handler)) {}
  std::string roundtrip(const std::string& line, std::chrono::milliseconds deadline) override;
  void close() override { handler_.reset(); }

 private:
  std::unique_ptr<LineHandler> handler_;
};

class ChildProcessTransport : public Transport {
 public:
  /// Launches argv[0] with argv; stdin/stdout become the protocol pipes.
  explicit ChildProcessTransport(const std::vector<std::string>& argv);
  ~ChildProcessTransport() override;
  std::string roundtrip(const std::string& line, std::chrono::milliseconds deadline) override;
  void close() override;
  pid_t pid() const { return pid_; }

 private:
  void kill_child();

  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
};

/// Splits a command line on whitespace; single and double quotes group.
std::vector<std::string> split_command_line(const std::string& command);

// ---------------------------------------------------------------------------
// Engine-side adapter handle.

enum class AdapterRole { kDetector, kGenerator };
enum class TransportKind { kInProcess, kChildProcess };
enum class AdapterState { kUninitialized, kReady, kClosed };

std::string_view to_string(AdapterRole r);
AdapterRole role_from_string(std::string_view s);

struct Timeouts {
  std::chrono::milliseconds handshake{10'000};
  std::chrono::milliseconds request{60'000};
};

struct InitParams {
  std::uint64_t seed = 0;
  std::vector<std::string> categories;  // without background
  int embedding_dim = 16;
  json sim = json::object();            // simulator knobs and ground truth
  std::optional<json> restore;          // adapter state to resume from
};

struct GenerateResult {
  std::vector<double> category_probs;  // index i -> category i + 1
  Tokens report;
  std::vector<double> token_probs;     // aligned with the reference, if sent
};

struct TrainReport {
  double loss = 0.0;
  int samples_seen = 0;
};

class AdapterHandle {
 public:
  AdapterHandle(AdapterRole role, TransportKind kind, std::unique_ptr<Transport> transport,
                std::string name, ProtocolTrace* trace = nullptr, Timeouts timeouts = {});
  AdapterHandle(AdapterHandle&&) noexcept;
  AdapterHandle& operator=(AdapterHandle&&) noexcept;
  ~AdapterHandle();

  /// Handshake. Throws Error(kProtocol, "version mismatch") if the peer speaks
  /// another protocol version.
  void init(const InitParams& params);

  std::vector<Detection> detect(const std::string& sample_id);
  GenerateResult generate(const DipInput& input, const Tokens* reference = nullptr);
  std::vector<double> embed(const std::string& sample_id);
  TrainReport train_epoch(const json& payload);
  void reinit(std::uint64_t seed);
  void shutdown();

  /// Generic request; returns the response payload or throws.
  json call(const std::string& op, const json& payload);

  AdapterRole role() const { return role_; }
  TransportKind transport_kind() const { return kind_; }
  AdapterState state() const { return state_; }
  const std::string& name() const { return name_; }
  void rename(std::string name) { name_ = std::move(name); }
  void set_trace(ProtocolTrace* trace) { trace_ = trace; }

  // Last values reported by the adapter (simulated adapters report both).
  std::optional<double> skill() const { return skill_; }
  const std::string& state_digest() const { return state_digest_; }
  const json& adapter_state() const { return adapter_state_; }
  int embedding_dim() const { return embedding_dim_; }

 private:
  json exchange(const std::string& op, const json& payload, std::chrono::milliseconds deadline);
  void absorb_state(const json& payload);
  void require(AdapterRole role, const char* op) const;

  AdapterRole role_;
  TransportKind kind_;
  std::unique_ptr<Transport> transport_;
  std::string name_;
  ProtocolTrace* trace_;
  Timeouts timeouts_;
  AdapterState state_ = AdapterState::kUninitialized;
  std::int64_t next_id_ = 1;
  std::optional<double> skill_;
  std::string state_digest_;
  json adapter_state_;
  int embedding_dim_ = 0;
};

/// Starts an external adapter process and performs the init handshake.
AdapterHandle spawn_external(const std::string& command_line, AdapterRole role,
                             const InitParams& params, std::string name,
                             ProtocolTrace* trace = nullptr, Timeouts timeouts = {});

/// Built-in simulated adapter wired in-process, already initialized.
AdapterHandle make_simulated(AdapterRole role, const InitParams& params, std::string name,
                             ProtocolTrace* trace = nullptr);

// ---------------------------------------------------------------------------
// Simulated adapters (server side).

/// Handles one connection: waits for init, then serves the role it was given.
std::unique_ptr<LineHandler> make_simulated_server();

struct ServeOptions {
  // Fault injection for tests: stall this op forever, or answer init with
  // another protocol version.
  std::string stall_op;
  std::string fake_version;
};

/// Serves the simulated adapter over the given streams until shutdown or EOF.
/// Returns the process exit code.
int serve_stdio(std::istream& in, std::ostream& out, const ServeOptions& options = {});

}  // namespace coedg
