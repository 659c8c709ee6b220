#include "acrfence/protocol.hpp"

#include <istream>
#include <ostream>

#include "acrfence/errors.hpp"

namespace acrfence {

namespace {

bool is_opaque_scalar(const Json& v) {
  return v.is_string() || v.is_number() || v.is_null();
}

ErrorInfo parse_error_info(const Json& e) {
  if (!e.is_object()) throw Error(Errc::ProtocolViolation, "error member must be an object");
  auto code_it = e.find("code");
  auto message_it = e.find("message");
  if (code_it == e.end() || !code_it->is_number_integer()) {
    throw Error(Errc::ProtocolViolation, "error.code must be an integer");
  }
  if (message_it == e.end() || !message_it->is_string()) {
    throw Error(Errc::ProtocolViolation, "error.message must be a string");
  }
  ErrorInfo info;
  info.code = code_it->get<int64_t>();
  info.message = message_it->get<std::string>();
  auto data_it = e.find("data");
  if (data_it != e.end()) info.data = *data_it;
  return info;
}

}  // namespace

Message decode_message(std::string_view bytes) {
  Json doc = parse_strict(bytes);
  if (!doc.is_object()) throw Error(Errc::MalformedFrame, "frame is not an object");

  Message msg;
  bool has_id = false, has_method = false, has_result = false, has_error = false;
  for (auto it = doc.begin(); it != doc.end(); ++it) {
    const std::string& key = it.key();
    if (key == "id") {
      if (!is_opaque_scalar(it.value())) {
        throw Error(Errc::ProtocolViolation, "id must be a scalar");
      }
      msg.id = it.value();
      has_id = true;
    } else if (key == "method") {
      if (!it.value().is_string()) throw Error(Errc::ProtocolViolation, "method must be a string");
      msg.method = it.value().get<std::string>();
      has_method = true;
    } else if (key == "params") {
      if (!it.value().is_structured()) {
        throw Error(Errc::ProtocolViolation, "params must be structured");
      }
      msg.params = it.value();
    } else if (key == "result") {
      msg.result = it.value();
      has_result = true;
    } else if (key == "error") {
      msg.error = parse_error_info(it.value());
      has_error = true;
    } else {
      msg.extra[key] = it.value();
    }
  }

  if (has_method) {
    msg.kind = has_id ? MessageKind::Request : MessageKind::Notification;
    if (has_result || has_error) {
      throw Error(Errc::ProtocolViolation, "request carries result or error");
    }
  } else {
    msg.kind = MessageKind::Response;
    if (!has_id) throw Error(Errc::ProtocolViolation, "response without id");
    if (has_result == has_error) {
      throw Error(Errc::ProtocolViolation, "response must carry exactly one of result/error");
    }
    if (msg.params) throw Error(Errc::ProtocolViolation, "response carries params");
  }
  return msg;
}

std::string encode_message(const Message& msg) {
  Json doc = msg.extra.is_object() ? msg.extra : Json::object();
  if (msg.id) doc["id"] = *msg.id;
  if (msg.method) doc["method"] = *msg.method;
  if (msg.params) doc["params"] = *msg.params;
  if (msg.result) doc["result"] = *msg.result;
  if (msg.error) {
    Json e = Json::object();
    e["code"] = msg.error->code;
    e["message"] = msg.error->message;
    if (msg.error->data) e["data"] = *msg.error->data;
    doc["error"] = e;
  }
  return canonical_dump(doc);
}

std::optional<ToolCall> extract_tool_call(const Message& msg, const std::string& session_id,
                                          const std::string& branch_id, uint64_t& next_seq_index) {
  if (msg.kind != MessageKind::Request || !msg.method || *msg.method != kToolCallMethod) {
    return std::nullopt;
  }
  const Json* name = nullptr;
  if (msg.params && msg.params->is_object()) {
    auto it = msg.params->find("name");
    if (it != msg.params->end()) name = &*it;
  }
  if (!name || !name->is_string() || name->get<std::string>().empty()) {
    throw Error(Errc::MissingToolName, "tools/call params lack a tool name");
  }

  ToolCall call;
  call.session_id = session_id;
  call.branch_id = branch_id;
  call.seq_index = next_seq_index++;
  call.tool_name = name->get<std::string>();
  auto args_it = msg.params->find("arguments");
  call.arguments = (args_it != msg.params->end() && args_it->is_object()) ? *args_it
                                                                          : Json::object();
  call.wire_id = msg.id ? *msg.id : Json();
  return call;
}

std::optional<std::string> read_frame(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) return std::nullopt;
  if (!line.empty() && line.back() == '\r') line.pop_back();
  return line;
}

void write_frame(std::ostream& out, std::string_view frame) {
  out << frame << '\n';
  out.flush();
}

}  // namespace acrfence
