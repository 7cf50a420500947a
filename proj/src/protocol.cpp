#include "coedg/protocol.hpp"

#include <fcntl.h>
#include <openssl/evp.h>
#include <poll.h>
#include <signal.h>
#include <spawn.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>
#include <iostream>
#include <thread>

#include "coedg/error.hpp"
#include "coedg/simulator.hpp"

extern char** environ;

namespace coedg {

// ---------------------------------------------------------------------------
// Messages

std::string serialize(const Request& r) {
  return "{\"id\":" + std::to_string(r.id) + ",\"op\":" + json(r.op).dump() +
         ",\"payload\":" + r.payload.dump() + "}";
}

std::string serialize(const Response& r) {
  std::string out = "{\"id\":" + std::to_string(r.id) + ",\"ok\":" + (r.ok ? "true" : "false");
  if (r.ok) {
    out += ",\"payload\":" + r.payload.dump();
  } else {
    out += ",\"error\":" + json(r.error).dump();
  }
  return out + "}";
}

Request parse_request(const std::string& line) {
  try {
    const json j = json::parse(line);
    Request r;
    r.id = j.at("id").get<std::int64_t>();
    r.op = j.at("op").get<std::string>();
    r.payload = j.value("payload", json::object());
    if (!r.payload.is_object()) throw Error(ErrorKind::kParse, "payload must be an object");
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kParse, std::string("malformed request: ") + e.what());
  }
}

Response parse_response(const std::string& line) {
  try {
    const json j = json::parse(line);
    Response r;
    r.id = j.at("id").get<std::int64_t>();
    r.ok = j.at("ok").get<bool>();
    if (r.ok) {
      r.payload = j.value("payload", json::object());
    } else {
      r.error = j.value("error", std::string("unknown error"));
    }
    return r;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kProtocol, std::string("malformed response: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Trace

struct ProtocolTrace::Ctx {
  EVP_MD_CTX* md = EVP_MD_CTX_new();
  ~Ctx() { EVP_MD_CTX_free(md); }
};

ProtocolTrace::ProtocolTrace() : ctx_(std::make_unique<Ctx>()) {
  EVP_DigestInit_ex(ctx_->md, EVP_sha256(), nullptr);
}

ProtocolTrace::~ProtocolTrace() = default;

void ProtocolTrace::record(const std::string& handle, const std::string& request,
                           const std::string& response) {
  const std::string chunk = handle + "\t" + request + "\n" + handle + "\t" + response + "\n";
  EVP_DigestUpdate(ctx_->md, chunk.data(), chunk.size());
  ++exchanges_;
  if (keep_) {
    lines_.push_back(request);
    lines_.push_back(response);
  }
  try {
    entries_.push_back({handle, json::parse(request).at("op").get<std::string>()});
  } catch (const json::exception&) {
    entries_.push_back({handle, "?"});
  }
}

void ProtocolTrace::chain(const std::string& previous_digest) {
  const std::string chunk = "resume\t" + previous_digest + "\n";
  EVP_DigestUpdate(ctx_->md, chunk.data(), chunk.size());
}

std::string ProtocolTrace::digest() const {
  EVP_MD_CTX* copy = EVP_MD_CTX_new();
  EVP_MD_CTX_copy_ex(copy, ctx_->md);
  unsigned char out[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(copy, out, &len);
  EVP_MD_CTX_free(copy);
  static const char* kHex = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex += kHex[out[i] >> 4];
    hex += kHex[out[i] & 0xF];
  }
  return hex;
}

// ---------------------------------------------------------------------------
// Transports

std::string InProcessTransport::roundtrip(const std::string& line, std::chrono::milliseconds) {
  if (!handler_) throw Error(ErrorKind::kTransport, "transport closed");
  return handler_->handle_line(line);
}

std::vector<std::string> split_command_line(const std::string& command) {
  std::vector<std::string> out;
  std::string cur;
  bool have = false;
  char quote = 0;
  for (const char c : command) {
    if (quote) {
      if (c == quote) {
        quote = 0;
      } else {
        cur += c;
      }
    } else if (c == '\'' || c == '"') {
      quote = c;
      have = true;
    } else if (std::isspace(static_cast<unsigned char>(c))) {
      if (have) out.push_back(cur);
      cur.clear();
      have = false;
    } else {
      cur += c;
      have = true;
    }
  }
  if (quote) throw Error(ErrorKind::kConfig, "unterminated quote in command line");
  if (have) out.push_back(cur);
  return out;
}

ChildProcessTransport::ChildProcessTransport(const std::vector<std::string>& argv) {
  if (argv.empty()) throw Error(ErrorKind::kConfig, "empty adapter command line");
  // A dead child must surface as EPIPE, not kill the engine.
  ::signal(SIGPIPE, SIG_IGN);

  int in_pipe[2];
  int out_pipe[2];
  if (::pipe2(in_pipe, O_CLOEXEC) != 0 || ::pipe2(out_pipe, O_CLOEXEC) != 0) {
    throw Error(ErrorKind::kTransport, std::string("pipe: ") + std::strerror(errno));
  }
  posix_spawn_file_actions_t actions;
  posix_spawn_file_actions_init(&actions);
  posix_spawn_file_actions_adddup2(&actions, in_pipe[0], STDIN_FILENO);
  posix_spawn_file_actions_adddup2(&actions, out_pipe[1], STDOUT_FILENO);

  std::vector<char*> args;
  for (const auto& a : argv) args.push_back(const_cast<char*>(a.c_str()));
  args.push_back(nullptr);
  const int rc = posix_spawnp(&pid_, args[0], &actions, nullptr, args.data(), environ);
  posix_spawn_file_actions_destroy(&actions);
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  if (rc != 0) {
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    pid_ = -1;
    throw Error(ErrorKind::kTransport, "cannot start '" + argv[0] + "': " + std::strerror(rc));
  }
  to_child_ = in_pipe[1];
  from_child_ = out_pipe[0];
}

ChildProcessTransport::~ChildProcessTransport() { kill_child(); }

void ChildProcessTransport::kill_child() {
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  to_child_ = from_child_ = -1;
  if (pid_ > 0) {
    ::kill(pid_, SIGKILL);
    ::waitpid(pid_, nullptr, 0);
    pid_ = -1;
  }
}

void ChildProcessTransport::close() {
  if (to_child_ >= 0) ::close(to_child_);
  to_child_ = -1;
  // Give a well-behaved adapter a moment to exit on EOF before killing it.
  if (pid_ > 0) {
    for (int i = 0; i < 50; ++i) {
      if (::waitpid(pid_, nullptr, WNOHANG) == pid_) {
        pid_ = -1;
        break;
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(10));
    }
  }
  kill_child();
}

std::string ChildProcessTransport::roundtrip(const std::string& line, std::chrono::milliseconds deadline) {
  if (to_child_ < 0 || from_child_ < 0) throw Error(ErrorKind::kTransport, "transport closed");
  const std::string msg = line + "\n";
  std::size_t written = 0;
  while (written < msg.size()) {
    const ssize_t n = ::write(to_child_, msg.data() + written, msg.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      const std::string why = std::strerror(errno);
      kill_child();
      throw Error(ErrorKind::kTransport, "adapter write failed: " + why);
    }
    written += static_cast<std::size_t>(n);
  }

  const auto until = std::chrono::steady_clock::now() + deadline;
  for (;;) {
    if (const auto nl = buffer_.find('\n'); nl != std::string::npos) {
      std::string out = buffer_.substr(0, nl);
      buffer_.erase(0, nl + 1);
      return out;
    }
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(until - std::chrono::steady_clock::now());
    if (left.count() <= 0) {
      kill_child();
      throw Error(ErrorKind::kTimeout, "adapter missed its deadline");
    }
    pollfd pfd{from_child_, POLLIN, 0};
    const int pr = ::poll(&pfd, 1, static_cast<int>(std::min<long>(left.count(), 1000)));
    if (pr < 0 && errno != EINTR) {
      kill_child();
      throw Error(ErrorKind::kTransport, "poll failed");
    }
    if (pr <= 0) continue;
    char chunk[65536];
    const ssize_t n = ::read(from_child_, chunk, sizeof chunk);
    if (n < 0 && errno == EINTR) continue;
    if (n <= 0) {
      kill_child();
      throw Error(ErrorKind::kTransport, "adapter closed the connection");
    }
    buffer_.append(chunk, static_cast<std::size_t>(n));
  }
}

// ---------------------------------------------------------------------------
// Handle

std::string_view to_string(AdapterRole r) { return r == AdapterRole::kDetector ? "detector" : "generator"; }

AdapterRole role_from_string(std::string_view s) {
  if (s == "detector") return AdapterRole::kDetector;
  if (s == "generator") return AdapterRole::kGenerator;
  throw Error(ErrorKind::kProtocol, "unknown adapter role '" + std::string(s) + "'");
}

AdapterHandle::AdapterHandle(AdapterRole role, TransportKind kind, std::unique_ptr<Transport> transport,
                             std::string name, ProtocolTrace* trace, Timeouts timeouts)
    : role_(role), kind_(kind), transport_(std::move(transport)), name_(std::move(name)), trace_(trace),
      timeouts_(timeouts) {}

AdapterHandle::AdapterHandle(AdapterHandle&&) noexcept = default;
AdapterHandle& AdapterHandle::operator=(AdapterHandle&&) noexcept = default;

AdapterHandle::~AdapterHandle() {
  if (transport_ && state_ == AdapterState::kReady) {
    try {
      shutdown();
    } catch (...) {
    }
  }
  if (transport_) transport_->close();
}

json AdapterHandle::exchange(const std::string& op, const json& payload, std::chrono::milliseconds deadline) {
  if (state_ == AdapterState::kClosed || !transport_) throw Error(ErrorKind::kTransport, name_ + ": adapter is closed");
  if (state_ == AdapterState::kUninitialized && op != "init") {
    throw Error(ErrorKind::kProtocol, name_ + ": adapter not initialized");
  }
  Request req{next_id_++, op, payload};
  const std::string line = serialize(req);
  std::string reply;
  try {
    reply = transport_->roundtrip(line, deadline);
  } catch (const Error&) {
    state_ = AdapterState::kClosed;
    throw;
  }
  if (trace_ != nullptr) trace_->record(name_, line, reply);
  const Response resp = parse_response(reply);
  if (resp.id != req.id) {
    state_ = AdapterState::kClosed;
    throw Error(ErrorKind::kProtocol, name_ + ": response id " + std::to_string(resp.id) + " does not match request " +
                                          std::to_string(req.id));
  }
  if (!resp.ok) {
    if (resp.error == kErrUnsupported) throw Error(ErrorKind::kUnsupported, name_ + ": " + op + " unsupported");
    if (resp.error == kErrVersionMismatch) throw Error(ErrorKind::kProtocol, kErrVersionMismatch);
    throw Error(ErrorKind::kProtocol, name_ + ": " + op + " failed: " + resp.error);
  }
  return resp.payload;
}

void AdapterHandle::absorb_state(const json& payload) {
  if (payload.contains("skill")) skill_ = payload["skill"].get<double>();
  if (payload.contains("state_digest")) state_digest_ = payload["state_digest"].get<std::string>();
  if (payload.contains("state")) adapter_state_ = payload["state"];
}

void AdapterHandle::require(AdapterRole role, const char* op) const {
  if (role_ != role) {
    throw Error(ErrorKind::kInvalidArgument, name_ + ": " + op + " requires a " + std::string(to_string(role)));
  }
}

json AdapterHandle::call(const std::string& op, const json& payload) {
  return exchange(op, payload, timeouts_.request);
}

void AdapterHandle::init(const InitParams& params) {
  json payload{{"protocol", kProtocolVersion},
               {"role", std::string(to_string(role_))},
               {"seed", params.seed},
               {"categories", params.categories},
               {"embedding_dim", params.embedding_dim},
               {"sim", params.sim}};
  if (params.restore) payload["restore"] = *params.restore;
  json resp;
  try {
    resp = exchange("init", payload, timeouts_.handshake);
  } catch (const Error& e) {
    state_ = AdapterState::kClosed;
    if (transport_) transport_->close();
    throw;
  }
  if (resp.value("protocol", std::string()) != kProtocolVersion) {
    state_ = AdapterState::kClosed;
    transport_->close();
    throw Error(ErrorKind::kProtocol, kErrVersionMismatch);
  }
  if (resp.value("role", std::string()) != to_string(role_)) {
    state_ = AdapterState::kClosed;
    transport_->close();
    throw Error(ErrorKind::kProtocol, name_ + ": adapter answered with the wrong role");
  }
  embedding_dim_ = resp.value("embedding_dim", 0);
  absorb_state(resp);
  state_ = AdapterState::kReady;
}

std::vector<Detection> AdapterHandle::detect(const std::string& sample_id) {
  require(AdapterRole::kDetector, "detect");
  const json resp = call("detect", json{{"sample_id", sample_id}});
  try {
    auto dets = resp.at("detections").get<std::vector<Detection>>();
    for (const auto& d : dets) {
      if (!d.box.valid()) throw Error(ErrorKind::kProtocol, "invalid box");
    }
    return dets;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kProtocol, name_ + ": malformed detect payload: " + e.what());
  } catch (const Error& e) {
    throw Error(ErrorKind::kProtocol, name_ + ": malformed detect payload: " + e.what());
  }
}

GenerateResult AdapterHandle::generate(const DipInput& input, const Tokens* reference) {
  require(AdapterRole::kGenerator, "generate");
  json payload{{"dip_input", input}};
  if (reference != nullptr) payload["reference"] = *reference;
  const json resp = call("generate", payload);
  try {
    GenerateResult out;
    out.category_probs = resp.at("category_probs").get<std::vector<double>>();
    out.report = resp.at("report").get<Tokens>();
    out.token_probs = resp.value("token_probs", std::vector<double>{});
    return out;
  } catch (const json::exception& e) {
    throw Error(ErrorKind::kProtocol, name_ + ": malformed generate payload: " + e.what());
  }
}

std::vector<double> AdapterHandle::embed(const std::string& sample_id) {
  require(AdapterRole::kGenerator, "embed");
  const json resp = call("embed", json{{"sample_id", sample_id}});
  auto v = resp.at("embedding").get<std::vector<double>>();
  if (embedding_dim_ > 0 && static_cast<int>(v.size()) != embedding_dim_) {
    throw Error(ErrorKind::kProtocol, name_ + ": embedding dimension mismatch");
  }
  return v;
}

TrainReport AdapterHandle::train_epoch(const json& payload) {
  const json resp = call("train_epoch", payload);
  absorb_state(resp);
  return {resp.value("loss", 0.0), resp.value("samples_seen", 0)};
}

void AdapterHandle::reinit(std::uint64_t seed) { absorb_state(call("reinit", json{{"seed", seed}})); }

void AdapterHandle::shutdown() {
  if (state_ != AdapterState::kReady) return;
  try {
    exchange("shutdown", json::object(), timeouts_.request);
  } catch (const Error&) {
  }
  state_ = AdapterState::kClosed;
  if (transport_) transport_->close();
}

AdapterHandle spawn_external(const std::string& command_line, AdapterRole role, const InitParams& params,
                             std::string name, ProtocolTrace* trace, Timeouts timeouts) {
  auto transport = std::make_unique<ChildProcessTransport>(split_command_line(command_line));
  AdapterHandle handle(role, TransportKind::kChildProcess, std::move(transport), std::move(name), trace, timeouts);
  handle.init(params);
  return handle;
}

AdapterHandle make_simulated(AdapterRole role, const InitParams& params, std::string name, ProtocolTrace* trace) {
  AdapterHandle handle(role, TransportKind::kInProcess,
                       std::make_unique<InProcessTransport>(make_simulated_server()), std::move(name), trace);
  handle.init(params);
  return handle;
}

// ---------------------------------------------------------------------------
// Simulated adapter server

namespace {

class SimServer : public LineHandler {
 public:
  explicit SimServer(ServeOptions options = {}) : options_(std::move(options)) {}

  std::string handle_line(const std::string& line) override {
    Request req;
    try {
      req = parse_request(line);
    } catch (const Error&) {
      return serialize(Response{peek_id(line), false, {}, kErrMalformed});
    }
    if (!options_.stall_op.empty() && req.op == options_.stall_op) {
      for (;;) std::this_thread::sleep_for(std::chrono::hours(1));
    }
    try {
      return serialize(Response{req.id, true, dispatch(req), {}});
    } catch (const Error& e) {
      std::string code = e.kind() == ErrorKind::kUnsupported ? kErrUnsupported : e.what();
      return serialize(Response{req.id, false, {}, code});
    } catch (const json::exception& e) {
      return serialize(Response{req.id, false, {}, std::string(kErrBadPayload) + ": " + e.what()});
    }
  }

  bool finished() const override { return finished_; }

 private:
  static std::int64_t peek_id(const std::string& line) {
    try {
      return json::parse(line).at("id").get<std::int64_t>();
    } catch (...) {
      return 0;
    }
  }

  json state_payload(const sim::AdapterStateRecord& s) const {
    return json{{"skill", s.skill}, {"state", sim::state_to_json(s)}, {"state_digest", sim::state_digest(s)}};
  }

  const sim::AdapterStateRecord& current_state() const {
    return detector_ ? detector_->state() : generator_->state();
  }

  json dispatch(const Request& req) {
    if (req.op == "shutdown") {
      finished_ = true;
      return json::object();
    }
    if (req.op == "init") return init(req.payload);
    if (!detector_ && !generator_) throw Error(ErrorKind::kProtocol, kErrNotReady);

    if (req.op == "detect") {
      if (!detector_) throw Error(ErrorKind::kUnsupported, kErrUnsupported);
      return json{{"detections", detector_->detect(req.payload.at("sample_id").get<std::string>())}};
    }
    if (req.op == "generate") {
      if (!generator_) throw Error(ErrorKind::kUnsupported, kErrUnsupported);
      const auto input = req.payload.at("dip_input").get<DipInput>();
      const auto gen = generator_->generate(input);
      json out{{"category_probs", gen.category_probs}, {"report", gen.report}};
      if (req.payload.contains("reference")) {
        out["token_probs"] = generator_->token_probs(gen, req.payload["reference"].get<Tokens>());
      }
      return out;
    }
    if (req.op == "embed") {
      if (!generator_) throw Error(ErrorKind::kUnsupported, kErrUnsupported);
      return json{{"embedding", generator_->embed(req.payload.at("sample_id").get<std::string>())}};
    }
    if (req.op == "train_epoch") {
      auto [loss, seen] = detector_ ? detector_->train_epoch(req.payload) : generator_->train_epoch(req.payload);
      json out = state_payload(current_state());
      out["loss"] = loss;
      out["samples_seen"] = seen;
      if (detector_) out["embeddings_seen"] = req.payload.value("embeddings", json::object()).size();
      return out;
    }
    if (req.op == "reinit") {
      const auto seed = req.payload.at("seed").get<std::uint64_t>();
      if (detector_) {
        detector_->reinit(seed);
      } else {
        generator_->reinit(seed);
      }
      return state_payload(current_state());
    }
    throw Error(ErrorKind::kUnsupported, kErrUnsupported);
  }

  json init(const json& p) {
    if (p.value("protocol", std::string()) != kProtocolVersion) {
      throw Error(ErrorKind::kProtocol, kErrVersionMismatch);
    }
    const auto role = role_from_string(p.at("role").get<std::string>());
    const auto seed = p.value("seed", std::uint64_t{0});
    const CategoryTable table(p.at("categories").get<std::vector<std::string>>());
    const int dim = p.value("embedding_dim", 16);
    const json sim_cfg = p.value("sim", json::object());
    auto truth = sim::truth_from_json(sim_cfg.value("ground_truth", json::array()));

    detector_.reset();
    generator_.reset();
    if (role == AdapterRole::kDetector) {
      detector_ = std::make_unique<sim::SimDetector>(seed, table.size(),
                                                     sim_cfg.value("knobs", json::object()).get<sim::DetectorKnobs>(),
                                                     std::move(truth));
      if (p.contains("restore")) detector_->restore(sim::state_from_json(p["restore"]));
    } else {
      generator_ = std::make_unique<sim::SimGenerator>(
          seed, table, dim, sim_cfg.value("knobs", json::object()).get<sim::GeneratorKnobs>(), std::move(truth));
      if (p.contains("restore")) generator_->restore(sim::state_from_json(p["restore"]));
    }
    json out = state_payload(current_state());
    out["protocol"] = options_.fake_version.empty() ? kProtocolVersion : options_.fake_version;
    out["role"] = std::string(to_string(role));
    out["embedding_dim"] = role == AdapterRole::kGenerator ? dim : 0;
    out["capabilities"] = role == AdapterRole::kDetector
                              ? json::array({"detect", "train_epoch", "reinit"})
                              : json::array({"generate", "embed", "train_epoch", "reinit", "teacher_forcing"});
    return out;
  }

  ServeOptions options_;
  std::unique_ptr<sim::SimDetector> detector_;
  std::unique_ptr<sim::SimGenerator> generator_;
  bool finished_ = false;
};

}  // namespace

std::unique_ptr<LineHandler> make_simulated_server() { return std::make_unique<SimServer>(); }

int serve_stdio(std::istream& in, std::ostream& out, const ServeOptions& options) {
  SimServer server(options);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    out << server.handle_line(line) << '\n';
    out.flush();
    if (server.finished()) return 0;
  }
  return 0;
}

}  // namespace coedg
