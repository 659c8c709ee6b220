#include "acrfence/proxy.hpp"

#include <fcntl.h>
#include <poll.h>
#include <sys/wait.h>
#include <unistd.h>

#include <csignal>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>
#include <sstream>

#include "httplib.h"

#include "acrfence/errors.hpp"

namespace acrfence {

namespace {

struct HostPort {
  std::string host;
  int port = 80;
};

HostPort parse_http_url(const std::string& url) {
  std::string rest = url;
  auto scheme_end = rest.find("://");
  if (scheme_end != std::string::npos) rest = rest.substr(scheme_end + 3);
  auto slash = rest.find('/');
  if (slash != std::string::npos) rest = rest.substr(0, slash);
  HostPort hp;
  auto colon = rest.rfind(':');
  if (colon == std::string::npos) {
    hp.host = rest;
  } else {
    hp.host = rest.substr(0, colon);
    hp.port = std::stoi(rest.substr(colon + 1));
  }
  if (hp.host.empty()) throw Error(Errc::ConfigInvalid, "bad upstream url: " + url);
  return hp;
}

void apply_override(Json& doc, const std::string& spec) {
  auto eq = spec.find('=');
  if (eq == std::string::npos) {
    throw Error(Errc::ConfigInvalid, "override must be key=value: " + spec);
  }
  std::string key = spec.substr(0, eq);
  std::string value = spec.substr(eq + 1);
  Json parsed;
  try {
    parsed = parse_strict(value);
  } catch (const Error&) {
    parsed = value;  // unquoted strings are taken literally
  }
  Json* node = &doc;
  auto segments = split_path(key);
  for (size_t i = 0; i + 1 < segments.size(); ++i) node = &(*node)[segments[i]];
  (*node)[segments.back()] = parsed;
}

}  // namespace

ProxyConfig proxy_config_from_json(const Json& doc) {
  if (!doc.is_object()) throw Error(Errc::ConfigInvalid, "config must be an object");
  ProxyConfig cfg;
  if (auto it = doc.find("listen"); it != doc.end() && it->is_object()) {
    cfg.listen_transport = it->value("transport", cfg.listen_transport);
    cfg.listen_host = it->value("host", cfg.listen_host);
    cfg.listen_port = it->value("port", cfg.listen_port);
  }
  if (cfg.listen_transport != "http" && cfg.listen_transport != "stdio") {
    throw Error(Errc::ConfigInvalid, "listen.transport must be 'http' or 'stdio'");
  }
  if (auto it = doc.find("control"); it != doc.end() && it->is_object()) {
    cfg.control_host = it->value("host", cfg.control_host);
    cfg.control_port = it->value("port", cfg.control_port);
  }
  if (auto it = doc.find("journal_path"); it != doc.end() && it->is_string()) {
    cfg.journal_path = it->get<std::string>();
  } else {
    throw Error(Errc::ConfigInvalid, "journal_path is required");
  }
  if (auto it = doc.find("policy_path"); it != doc.end() && it->is_string()) {
    cfg.policy_path = it->get<std::string>();
  }
  if (auto it = doc.find("upstreams"); it != doc.end() && it->is_array()) {
    for (const auto& u : *it) {
      UpstreamSpec spec;
      spec.name = u.value("name", "");
      spec.url = u.value("url", "");
      spec.command = u.value("command", "");
      if (spec.name.empty() || (spec.url.empty() == spec.command.empty())) {
        throw Error(Errc::ConfigInvalid,
                    "upstream entries need a name and exactly one of url/command");
      }
      cfg.upstreams.push_back(std::move(spec));
    }
  }
  if (cfg.upstreams.empty()) throw Error(Errc::ConfigInvalid, "at least one upstream is required");
  if (auto it = doc.find("routes"); it != doc.end() && it->is_object()) {
    for (auto route = it->begin(); route != it->end(); ++route) {
      cfg.routes[route.key()] = route->get<std::string>();
    }
  }
  cfg.default_upstream = doc.value("default_upstream", cfg.upstreams.front().name);
  cfg.stdio_session_id = doc.value("stdio_session_id", cfg.stdio_session_id);
  if (auto it = doc.find("fence"); it != doc.end() && it->is_object()) {
    cfg.fence.proxy_id = it->value("proxy_id", cfg.fence.proxy_id);
    cfg.fence.initial_branch_id = it->value("initial_branch_id", cfg.fence.initial_branch_id);
    cfg.fence.heuristic_restore_detection =
        it->value("heuristic_restore_detection", cfg.fence.heuristic_restore_detection);
    cfg.fence.unsafe_disable_replay =
        it->value("unsafe_disable_replay", cfg.fence.unsafe_disable_replay);
    if (auto an = it->find("analyzer"); an != it->end() && an->is_object()) {
      AnalyzerEndpoint endpoint;
      endpoint.url = an->value("url", "");
      endpoint.timeout_ms = an->value("timeout_ms", endpoint.timeout_ms);
      endpoint.auth_header = an->value("auth_header", "");
      endpoint.auth_env = an->value("auth_env", "");
      if (endpoint.url.empty()) throw Error(Errc::ConfigInvalid, "analyzer.url is required");
      cfg.fence.analyzer = std::move(endpoint);
    }
  }

  // Every route target must name a configured upstream.
  auto has_upstream = [&](const std::string& name) {
    for (const auto& u : cfg.upstreams) {
      if (u.name == name) return true;
    }
    return false;
  };
  for (const auto& [tool, upstream] : cfg.routes) {
    if (!has_upstream(upstream)) {
      throw Error(Errc::ConfigInvalid, "route for '" + tool + "' names unknown upstream '" +
                                           upstream + "'");
    }
  }
  if (!has_upstream(cfg.default_upstream)) {
    throw Error(Errc::ConfigInvalid, "default_upstream names unknown upstream");
  }
  return cfg;
}

ProxyConfig load_proxy_config(const std::filesystem::path& path,
                              const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::ConfigInvalid, "cannot read config file: " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  Json doc;
  try {
    doc = parse_strict(buffer.str());
  } catch (const Error&) {
    throw Error(Errc::ConfigInvalid, "config file is not valid JSON: " + path.string());
  }
  for (const auto& spec : overrides) apply_override(doc, spec);
  return proxy_config_from_json(doc);
}

StdioUpstream::StdioUpstream(std::string name, std::string command)
    : name_(std::move(name)), command_(std::move(command)) {}

StdioUpstream::~StdioUpstream() { stop(); }

void StdioUpstream::start() {
  std::lock_guard<std::mutex> lock(mutex_);
  if (pid_ > 0) return;
  int to_child[2];
  int from_child[2];
  if (pipe(to_child) != 0 || pipe(from_child) != 0) {
    throw Error(Errc::UpstreamUnreachable, "cannot create pipes for '" + name_ + "'");
  }
  pid_t pid = fork();
  if (pid < 0) throw Error(Errc::UpstreamUnreachable, "cannot fork '" + name_ + "'");
  if (pid == 0) {
    dup2(to_child[0], STDIN_FILENO);
    dup2(from_child[1], STDOUT_FILENO);
    ::close(to_child[0]);
    ::close(to_child[1]);
    ::close(from_child[0]);
    ::close(from_child[1]);
    execl("/bin/sh", "sh", "-c", command_.c_str(), (char*)nullptr);
    _exit(127);
  }
  ::close(to_child[0]);
  ::close(from_child[1]);
  pid_ = pid;
  to_child_ = to_child[1];
  from_child_ = from_child[0];
}

void StdioUpstream::stop() {
  std::lock_guard<std::mutex> lock(mutex_);
  if (to_child_ >= 0) ::close(to_child_);
  if (from_child_ >= 0) ::close(from_child_);
  to_child_ = from_child_ = -1;
  if (pid_ > 0) {
    kill(pid_, SIGTERM);
    int status = 0;
    waitpid(pid_, &status, 0);
    pid_ = -1;
  }
}

std::string StdioUpstream::exchange(const std::string& frame, bool expect_response,
                                    int timeout_ms) {
  std::lock_guard<std::mutex> lock(mutex_);
  if (pid_ <= 0 || to_child_ < 0) {
    throw Error(Errc::UpstreamFailure, "stdio upstream '" + name_ + "' is not running");
  }
  std::string out = frame;
  out.push_back('\n');
  size_t written = 0;
  while (written < out.size()) {
    ssize_t n = ::write(to_child_, out.data() + written, out.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(Errc::UpstreamFailure,
                  "stdio upstream '" + name_ + "' write failed: " + std::strerror(errno));
    }
    written += static_cast<size_t>(n);
  }
  if (!expect_response) return "";

  // one response line per request; the exchange is serialized by mutex_
  while (true) {
    auto newline = read_buffer_.find('\n');
    if (newline != std::string::npos) {
      std::string line = read_buffer_.substr(0, newline);
      read_buffer_.erase(0, newline + 1);
      return line;
    }
    struct pollfd pfd {
      from_child_, POLLIN, 0
    };
    int ready = ::poll(&pfd, 1, timeout_ms);
    if (ready <= 0) {
      throw Error(Errc::UpstreamFailure,
                  "stdio upstream '" + name_ + "' did not answer within " +
                      std::to_string(timeout_ms) + "ms");
    }
    char buf[8192];
    ssize_t n = ::read(from_child_, buf, sizeof(buf));
    if (n <= 0) {
      throw Error(Errc::UpstreamFailure, "stdio upstream '" + name_ + "' closed its pipe");
    }
    read_buffer_.append(buf, static_cast<size_t>(n));
  }
}

HttpUpstreamRouter::HttpUpstreamRouter(const std::vector<UpstreamSpec>& upstreams,
                                       std::map<std::string, std::string> routes,
                                       std::string default_upstream)
    : routes_(std::move(routes)), default_upstream_(std::move(default_upstream)) {
  for (const auto& spec : upstreams) {
    Endpoint ep;
    if (!spec.command.empty()) {
      ep.stdio = std::make_shared<StdioUpstream>(spec.name, spec.command);
    } else {
      HostPort hp = parse_http_url(spec.url);
      ep.host = hp.host;
      ep.port = hp.port;
    }
    endpoints_[spec.name] = std::move(ep);
  }
  if (endpoints_.empty()) throw Error(Errc::ConfigInvalid, "router needs at least one upstream");
  if (default_upstream_.empty()) default_upstream_ = endpoints_.begin()->first;
}

const HttpUpstreamRouter::Endpoint& HttpUpstreamRouter::endpoint(const std::string& name) const {
  auto it = endpoints_.find(name);
  if (it == endpoints_.end()) {
    throw Error(Errc::UpstreamFailure, "unknown upstream '" + name + "'");
  }
  return it->second;
}

std::string HttpUpstreamRouter::route_for_tool(const std::string& tool_name) const {
  auto it = routes_.find(tool_name);
  return it == routes_.end() ? default_upstream_ : it->second;
}

std::string HttpUpstreamRouter::default_upstream() const { return default_upstream_; }

std::string HttpUpstreamRouter::send(const std::string& name, const Endpoint& ep,
                                     const std::string& frame, bool expect_response) {
  if (ep.stdio) return ep.stdio->exchange(frame, expect_response, 30000);
  httplib::Client client(ep.host, ep.port);
  client.set_connection_timeout(5, 0);
  client.set_read_timeout(30, 0);
  auto result = client.Post("/message", frame, "application/json");
  if (!result) {
    throw Error(Errc::UpstreamFailure, "upstream '" + name + "' transport error: " +
                                           httplib::to_string(result.error()));
  }
  return result->body;
}

std::string HttpUpstreamRouter::forward(const std::string& upstream_name,
                                        const std::string& frame) {
  return send(upstream_name, endpoint(upstream_name), frame, true);
}

void HttpUpstreamRouter::forward_notification(const std::string& upstream_name,
                                              const std::string& frame) {
  send(upstream_name, endpoint(upstream_name), frame, false);
}

bool HttpUpstreamRouter::reachable(const std::string& upstream_name) {
  const Endpoint& ep = endpoint(upstream_name);
  const std::string ping = R"({"jsonrpc":"2.0","id":0,"method":"ping"})";
  if (ep.stdio) {
    try {
      ep.stdio->start();
      ep.stdio->exchange(ping, true, 5000);
      return true;
    } catch (const Error&) {
      return false;
    }
  }
  httplib::Client client(ep.host, ep.port);
  client.set_connection_timeout(2, 0);
  client.set_read_timeout(5, 0);
  auto result = client.Post("/message", ping, "application/json");
  return static_cast<bool>(result);
}

void HttpUpstreamRouter::shutdown() {
  for (auto& [name, ep] : endpoints_) {
    if (ep.stdio) ep.stdio->stop();
  }
}

std::vector<std::string> HttpUpstreamRouter::upstream_names() const {
  std::vector<std::string> names;
  for (const auto& [name, _] : endpoints_) names.push_back(name);
  return names;
}

namespace {
PolicySet policies_for(const ProxyConfig& cfg) {
  return cfg.policy_path.empty() ? PolicySet{} : PolicySet::from_file(cfg.policy_path);
}
}  // namespace

ProxyServer::ProxyServer(ProxyConfig config) : ProxyServer(config, policies_for(config)) {}

ProxyServer::ProxyServer(ProxyConfig config, PolicySet policies) : config_(std::move(config)) {
  auto parent = config_.journal_path.parent_path();
  if (!parent.empty() && !std::filesystem::exists(parent)) {
    throw Error(Errc::ConfigInvalid, "journal directory does not exist: " + parent.string());
  }
  log_ = std::make_unique<EffectLog>(config_.journal_path);
  router_ = std::make_unique<HttpUpstreamRouter>(config_.upstreams, config_.routes,
                                                 config_.default_upstream);
  fence_ = std::make_unique<Fence>(*log_, std::move(policies), *router_, config_.fence);
  data_server_ = std::make_unique<httplib::Server>();
  control_server_ = std::make_unique<httplib::Server>();
  setup_handlers();
}

ProxyServer::~ProxyServer() { stop(); }

void ProxyServer::setup_handlers() {
  // only SO_REUSEADDR: a second proxy on the same port must fail loudly,
  // not silently share the listener (httplib would default to SO_REUSEPORT)
  auto exclusive_port = [](socket_t sock) {
    int yes = 1;
    ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
  };
  data_server_->set_socket_options(exclusive_port);
  control_server_->set_socket_options(exclusive_port);

  data_server_->Post("/message", [this](const httplib::Request& req, httplib::Response& res) {
    std::string session = req.get_header_value("Mcp-Session-Id");
    if (session.empty()) session = "default";
    std::string reply = fence_->handle_data_frame(session, req.body);
    if (reply.empty()) {
      res.status = 202;
      return;
    }
    res.set_content(reply, "application/json");
  });
  data_server_->Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("ok", "text/plain");
  });

  control_server_->Post("/control", [this](const httplib::Request& req, httplib::Response& res) {
    Json request;
    try {
      request = parse_strict(req.body);
    } catch (const Error& e) {
      res.status = 400;
      res.set_content(canonical_dump(Json{{"ok", false},
                                          {"error", Json{{"code", "MalformedFrame"},
                                                         {"message", e.what()}}}}),
                      "application/json");
      return;
    }
    Json reply = handle_control(request);
    res.set_content(canonical_dump(reply), "application/json");
  });
  control_server_->Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("ok", "text/plain");
  });
}

namespace {

Json control_error(const std::string& code, const std::string& message) {
  return Json{{"ok", false}, {"error", Json{{"code", code}, {"message", message}}}};
}

Json record_to_json(const EffectRecord& rec) {
  Json doc = Json::object();
  doc["record_id"] = rec.record_id;
  doc["session_id"] = rec.session_id;
  doc["branch_id"] = rec.branch_id;
  if (rec.parent_branch_id) doc["parent_branch_id"] = *rec.parent_branch_id;
  doc["seq_index"] = rec.seq_index;
  doc["tool_name"] = rec.tool_name;
  doc["arguments"] = rec.arguments;
  doc["env_context"] = rec.env_context;
  doc["response"] = rec.response;
  doc["outcome"] = outcome_name(rec.outcome);
  doc["consumed_credentials"] = rec.consumed_credentials;
  doc["irreversible"] = rec.irreversible;
  return doc;
}

Json lineage_to_json(const std::vector<BranchEntry>& lineage) {
  Json out = Json::array();
  for (const auto& b : lineage) {
    Json doc = Json::object();
    doc["branch_id"] = b.branch_id;
    doc["forked_from_seq"] = b.forked_from_seq;
    if (b.parent_branch_id) doc["parent_branch_id"] = *b.parent_branch_id;
    doc["from_restore"] = b.from_restore;
    out.push_back(doc);
  }
  return out;
}

}  // namespace

Json ProxyServer::handle_control(const Json& request) {
  if (!request.is_object() || !request.contains("op") || !request["op"].is_string()) {
    return control_error("ConfigInvalid", "control request needs an 'op' string");
  }
  const std::string op = request["op"].get<std::string>();
  try {
    if (op == "register_restore") {
      fence_->register_restore(request.at("session_id").get<std::string>(),
                               request.at("checkpoint_seq").get<uint64_t>());
      return Json{{"ok", true}};
    }
    if (op == "approve_fork") {
      auto lineage = fence_->approve_fork(request.at("session_id").get<std::string>(),
                                          request.at("fork_token").get<std::string>(),
                                          request.at("new_branch_id").get<std::string>());
      return Json{{"ok", true}, {"lineage", lineage_to_json(lineage)}};
    }
    if (op == "query_log") {
      std::string session = request.value("session_id", "");
      std::string branch = request.value("branch_id", "");
      std::string tool = request.value("tool", "");
      Json records = Json::array();
      for (const auto& rec : log_->records()) {
        if (!session.empty() && rec.session_id != session) continue;
        if (!branch.empty() && rec.branch_id != branch) continue;
        if (!tool.empty() && rec.tool_name != tool) continue;
        records.push_back(record_to_json(rec));
      }
      return Json{{"ok", true}, {"records", records}};
    }
    if (op == "session") {
      SessionState s = fence_->session_snapshot(request.at("session_id").get<std::string>());
      Json doc = Json::object();
      doc["session_id"] = s.session_id;
      doc["current_branch_id"] = s.current_branch_id;
      doc["next_seq_index"] = s.next_seq_index;
      doc["lineage"] = lineage_to_json(s.branch_lineage);
      if (s.restore_frontier) doc["restore_frontier"] = *s.restore_frontier;
      doc["pending_fork"] = s.pending_fork.has_value();
      return Json{{"ok", true}, {"session", doc}};
    }
    if (op == "stats") {
      return Json{{"ok", true}, {"stats", fence_->stats()}};
    }
    return control_error("ConfigInvalid", "unknown control op '" + op + "'");
  } catch (const Error& e) {
    return control_error(errc_name(e.code()), e.what());
  } catch (const Json::exception& e) {
    return control_error("ConfigInvalid", e.what());
  }
}

void ProxyServer::start() {
  if (started_) return;

  // Fail closed: refuse to start unless every upstream answers.
  for (const auto& name : router_->upstream_names()) {
    if (!router_->reachable(name)) {
      throw Error(Errc::UpstreamUnreachable, "upstream '" + name + "' is unreachable");
    }
  }

  auto bind = [](httplib::Server& server, const std::string& host, int port) {
    if (port == 0) return server.bind_to_any_port(host);
    if (!server.bind_to_port(host, port)) return -1;
    return port;
  };
  control_port_ = bind(*control_server_, config_.control_host, config_.control_port);
  if (control_port_ <= 0) {
    throw Error(Errc::BindFailure, "cannot bind control listener on " + config_.control_host + ":" +
                                       std::to_string(config_.control_port));
  }
  control_thread_ = std::thread([this] { control_server_->listen_after_bind(); });
  control_server_->wait_until_ready();

  if (config_.listen_transport == "http") {
    data_port_ = bind(*data_server_, config_.listen_host, config_.listen_port);
    if (data_port_ <= 0) {
      control_server_->stop();
      if (control_thread_.joinable()) control_thread_.join();
      throw Error(Errc::BindFailure, "cannot bind data listener on " + config_.listen_host + ":" +
                                         std::to_string(config_.listen_port));
    }
    data_thread_ = std::thread([this] { data_server_->listen_after_bind(); });
    data_server_->wait_until_ready();
  }
  started_ = true;
}

void ProxyServer::stop() {
  if (data_server_) data_server_->stop();
  if (control_server_) control_server_->stop();
  if (data_thread_.joinable()) data_thread_.join();
  if (control_thread_.joinable()) control_thread_.join();
  if (router_) router_->shutdown();  // reaps stdio child upstreams
  started_ = false;
}

void ProxyServer::run_stdio(std::istream& in, std::ostream& out) {
  while (auto frame = read_frame(in)) {
    if (frame->empty()) continue;
    std::string reply = fence_->handle_data_frame(config_.stdio_session_id, *frame);
    if (!reply.empty()) write_frame(out, reply);
  }
}

namespace {
std::atomic<bool> g_interrupted{false};
void on_signal(int) { g_interrupted = true; }
}  // namespace

int ProxyServer::run_until_signal() {
  std::signal(SIGINT, on_signal);
  std::signal(SIGTERM, on_signal);
  while (!g_interrupted && started_) {
    std::this_thread::sleep_for(std::chrono::milliseconds(100));
  }
  stop();
  return 0;
}

}  // namespace acrfence
