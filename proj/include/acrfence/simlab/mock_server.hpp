#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include "acrfence/value.hpp"

namespace httplib {
class Server;
}

namespace acrfence::simlab {

/// Thrown by tool handlers to produce a JSON-RPC error response.
struct ToolError {
  int64_t code;
  std::string message;
  Json data = Json();
};

/// Thrown to make the server emit a deliberately malformed response body
/// (the crash-injection mechanism: the scripted agent treats it as fatal).
struct MalformedResponseInjection {};

/// Minimal JSON-RPC tool server over HTTP, used for the simulated bank,
/// cloud and approval services. Requests are serialized over the state;
/// per-tool receipt counters are the scenario ground truth.
class MockToolServer {
public:
  using ToolHandler = std::function<Json(const Json& args)>;

  explicit MockToolServer(std::string server_name);
  ~MockToolServer();

  void register_tool(const std::string& name, const std::string& description,
                     ToolHandler handler);

  void start();
  void stop();

  int port() const { return port_; }
  std::string url() const;

  /// Number of tools/call requests RECEIVED for the tool (counted before the
  /// handler runs, so rejected calls count too).
  int request_count(const std::string& tool_name) const;
  int total_tool_requests() const;
  /// Monotonic receipt timestamp of the most recent request for the tool.
  int64_t last_receipt_mono_ns(const std::string& tool_name) const;
  Json request_counters() const;

private:
  std::string handle_frame(const std::string& body, bool& malformed);

  std::string server_name_;
  std::unique_ptr<httplib::Server> http_;
  std::thread thread_;
  int port_ = 0;

  mutable std::mutex mutex_;
  struct ToolEntry {
    std::string description;
    ToolHandler handler;
    int requests = 0;
    int64_t last_receipt_ns = 0;
  };
  std::map<std::string, ToolEntry> tools_;
  int total_requests_ = 0;
};

}  // namespace acrfence::simlab
