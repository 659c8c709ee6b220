#pragma once

#include <atomic>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include "acrfence/fence.hpp"

namespace httplib {
class Server;
}

namespace acrfence {

struct UpstreamSpec {
  std::string name;
  std::string url;      // http://host:port, or
  std::string command;  // child process speaking newline-delimited frames on stdio
};

struct ProxyConfig {
  std::string listen_transport = "http";  // "http" or "stdio"
  std::string listen_host = "127.0.0.1";
  int listen_port = 0;  // 0 picks an ephemeral port
  std::string control_host = "127.0.0.1";
  int control_port = 0;
  std::filesystem::path journal_path;
  std::filesystem::path policy_path;
  std::vector<UpstreamSpec> upstreams;
  std::map<std::string, std::string> routes;  // tool name -> upstream name
  std::string default_upstream;               // non-call traffic goes here
  std::string stdio_session_id = "stdio";
  FenceConfig fence;
};

ProxyConfig proxy_config_from_json(const Json& doc);
ProxyConfig load_proxy_config(const std::filesystem::path& path,
                              const std::vector<std::string>& overrides = {});

/// A tool server spawned as a child process; frames travel over its
/// stdin/stdout, one exchange at a time.
class StdioUpstream {
public:
  StdioUpstream(std::string name, std::string command);
  ~StdioUpstream();

  StdioUpstream(const StdioUpstream&) = delete;
  StdioUpstream& operator=(const StdioUpstream&) = delete;

  void start();  // throws Error{UpstreamUnreachable} when the child dies at spawn
  void stop();

  /// Writes one frame; awaits one response line unless expect_response is
  /// false. Throws Error{UpstreamFailure} on a dead child or timeout.
  std::string exchange(const std::string& frame, bool expect_response, int timeout_ms);

private:
  std::string name_;
  std::string command_;
  mutable std::mutex mutex_;
  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string read_buffer_;
};

/// Routes frames to upstream tool servers: HTTP endpoints (one message per
/// POST body) or spawned stdio children.
class HttpUpstreamRouter : public UpstreamRouter {
public:
  explicit HttpUpstreamRouter(const std::vector<UpstreamSpec>& upstreams,
                              std::map<std::string, std::string> routes,
                              std::string default_upstream);

  std::string route_for_tool(const std::string& tool_name) const override;
  std::string default_upstream() const override;
  std::string forward(const std::string& upstream_name, const std::string& frame) override;
  void forward_notification(const std::string& upstream_name, const std::string& frame) override;

  /// Startup probe: spawns stdio children and pings every upstream.
  bool reachable(const std::string& upstream_name);
  void shutdown();
  std::vector<std::string> upstream_names() const;

private:
  struct Endpoint {
    std::string host;
    int port = 0;
    std::shared_ptr<StdioUpstream> stdio;  // set for command upstreams
  };
  const Endpoint& endpoint(const std::string& name) const;
  std::string send(const std::string& name, const Endpoint& ep, const std::string& frame,
                   bool expect_response);

  std::map<std::string, Endpoint> endpoints_;
  std::map<std::string, std::string> routes_;
  std::string default_upstream_;
};

/// The long-running interposition proxy: data path plus a separate local
/// control surface (restore signals, fork approvals, log queries).
class ProxyServer {
public:
  explicit ProxyServer(ProxyConfig config);
  ProxyServer(ProxyConfig config, PolicySet policies);
  ~ProxyServer();

  /// Binds both listeners and verifies every upstream is reachable.
  /// Throws Error{BindFailure} / Error{UpstreamUnreachable}; on failure the
  /// proxy refuses to start.
  void start();
  void stop();

  /// Serve loop for the stdio transport: one message per line. Control
  /// surface must already be started. Returns at EOF.
  void run_stdio(std::istream& in, std::ostream& out);

  /// Blocks until SIGINT/SIGTERM. Returns 0 on clean shutdown.
  int run_until_signal();

  int data_port() const { return data_port_; }
  int control_port() const { return control_port_; }

  Fence& fence() { return *fence_; }
  EffectLog& log() { return *log_; }

  /// Handles one control-surface document and returns the response document.
  Json handle_control(const Json& request);

private:
  void setup_handlers();

  ProxyConfig config_;
  std::unique_ptr<EffectLog> log_;
  std::unique_ptr<HttpUpstreamRouter> router_;
  std::unique_ptr<Fence> fence_;
  std::unique_ptr<httplib::Server> data_server_;
  std::unique_ptr<httplib::Server> control_server_;
  std::thread data_thread_;
  std::thread control_thread_;
  int data_port_ = 0;
  int control_port_ = 0;
  std::atomic<bool> started_{false};
};

}  // namespace acrfence
