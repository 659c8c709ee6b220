#include "acrfence/simlab/mock_server.hpp"

#include "httplib.h"

#include "acrfence/errors.hpp"
#include "acrfence/protocol.hpp"

namespace acrfence::simlab {

MockToolServer::MockToolServer(std::string server_name)
    : server_name_(std::move(server_name)), http_(std::make_unique<httplib::Server>()) {
  http_->Post("/message", [this](const httplib::Request& req, httplib::Response& res) {
    bool malformed = false;
    std::string reply = handle_frame(req.body, malformed);
    if (malformed) {
      // Truncated body: parses as nothing, which the scripted agent treats
      // as a fatal crash.
      res.set_content(R"({"jsonrpc":"2.0","result":)", "application/json");
      return;
    }
    if (reply.empty()) {
      res.status = 202;
      return;
    }
    res.set_content(reply, "application/json");
  });
  http_->Get("/healthz", [](const httplib::Request&, httplib::Response& res) {
    res.set_content("ok", "text/plain");
  });
}

MockToolServer::~MockToolServer() { stop(); }

void MockToolServer::register_tool(const std::string& name, const std::string& description,
                                   ToolHandler handler) {
  std::lock_guard<std::mutex> lock(mutex_);
  tools_[name] = ToolEntry{description, std::move(handler), 0, 0};
}

void MockToolServer::start() {
  port_ = http_->bind_to_any_port("127.0.0.1");
  if (port_ <= 0) throw Error(Errc::BindFailure, "mock server '" + server_name_ + "' cannot bind");
  thread_ = std::thread([this] { http_->listen_after_bind(); });
  http_->wait_until_ready();
}

void MockToolServer::stop() {
  if (http_) http_->stop();
  if (thread_.joinable()) thread_.join();
}

std::string MockToolServer::url() const { return "http://127.0.0.1:" + std::to_string(port_); }

namespace {

std::string envelope_result(const Json& id, const Json& result) {
  Json doc = Json::object();
  doc["jsonrpc"] = "2.0";
  doc["id"] = id;
  doc["result"] = result;
  return canonical_dump(doc);
}

std::string envelope_error(const Json& id, int64_t code, const std::string& message,
                           const Json& data) {
  Json err = Json{{"code", code}, {"message", message}};
  if (!data.is_null()) err["data"] = data;
  Json doc = Json::object();
  doc["jsonrpc"] = "2.0";
  doc["id"] = id;
  doc["error"] = err;
  return canonical_dump(doc);
}

}  // namespace

std::string MockToolServer::handle_frame(const std::string& body, bool& malformed) {
  Json id;
  try {
    Message msg = decode_message(body);
    if (msg.id) id = *msg.id;
    if (msg.kind == MessageKind::Notification) return "";
    if (msg.kind == MessageKind::Response) return "";  // nothing to do with responses

    const std::string& method = *msg.method;
    if (method == "initialize") {
      Json result = Json{{"capabilities", Json::object()},
                         {"protocolVersion", "2025-03-26"},
                         {"serverInfo", Json{{"name", server_name_}, {"version", "1.0"}}}};
      return envelope_result(id, result);
    }
    if (method == "ping") return envelope_result(id, Json::object());
    if (method == "tools/list") {
      Json tools = Json::array();
      std::lock_guard<std::mutex> lock(mutex_);
      for (const auto& [name, entry] : tools_) {
        tools.push_back(Json{{"description", entry.description}, {"name", name}});
      }
      return envelope_result(id, Json{{"tools", tools}});
    }
    if (method == kToolCallMethod) {
      std::string tool;
      Json args = Json::object();
      if (msg.params && msg.params->is_object()) {
        tool = msg.params->value("name", "");
        if (msg.params->contains("arguments")) args = (*msg.params)["arguments"];
      }
      ToolHandler handler;
      {
        std::lock_guard<std::mutex> lock(mutex_);
        auto it = tools_.find(tool);
        if (it == tools_.end()) {
          return envelope_error(id, -32601, "unknown tool: " + tool, Json());
        }
        it->second.requests++;
        it->second.last_receipt_ns = monotonic_ns();
        total_requests_++;
        handler = it->second.handler;
      }
      try {
        Json result = handler(args);
        return envelope_result(id, result);
      } catch (const ToolError& e) {
        return envelope_error(id, e.code, e.message, e.data);
      } catch (const MalformedResponseInjection&) {
        malformed = true;
        return "";
      }
    }
    return envelope_error(id, -32601, "method not supported: " + method, Json());
  } catch (const Error& e) {
    return envelope_error(id, -32700, e.what(), Json());
  }
}

int MockToolServer::request_count(const std::string& tool_name) const {
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = tools_.find(tool_name);
  return it == tools_.end() ? 0 : it->second.requests;
}

int MockToolServer::total_tool_requests() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return total_requests_;
}

int64_t MockToolServer::last_receipt_mono_ns(const std::string& tool_name) const {
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = tools_.find(tool_name);
  return it == tools_.end() ? 0 : it->second.last_receipt_ns;
}

Json MockToolServer::request_counters() const {
  std::lock_guard<std::mutex> lock(mutex_);
  Json out = Json::object();
  for (const auto& [name, entry] : tools_) out[name] = entry.requests;
  return out;
}

}  // namespace acrfence::simlab
