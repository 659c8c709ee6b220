#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>

#include "acrfence/value.hpp"

namespace acrfence {

enum class MessageKind { Request, Response, Notification };

struct ErrorInfo {
  int64_t code = 0;
  std::string message;
  std::optional<Json> data;

  friend bool operator==(const ErrorInfo&, const ErrorInfo&) = default;
};

/// One JSON-RPC message. Unknown top-level fields are kept in `extra` so
/// pass-through traffic re-encodes with everything it arrived with.
struct Message {
  MessageKind kind = MessageKind::Request;
  std::optional<Json> id;  // opaque scalar; absent for notifications
  std::optional<std::string> method;
  std::optional<Json> params;
  std::optional<Json> result;
  std::optional<ErrorInfo> error;
  Json extra = Json::object();

  friend bool operator==(const Message&, const Message&) = default;
};

/// One agent->server tool invocation, extracted from a tools/call request.
struct ToolCall {
  std::string session_id;
  std::string branch_id;
  uint64_t seq_index = 0;  // position within its branch, counting tool calls only
  std::string tool_name;
  Json arguments = Json::object();
  Json wire_id;  // the underlying request id
};

/// Decode one complete frame. Throws Error{MalformedFrame} when the bytes are
/// not a parseable document (duplicate keys included) and
/// Error{ProtocolViolation} when the document breaks message invariants.
Message decode_message(std::string_view bytes);

/// Canonical serialization; decode(encode(m)) is structurally equal to m.
std::string encode_message(const Message& msg);

/// Returns the ToolCall iff msg is a tools/call request; increments
/// next_seq_index on success. Non-call methods return nullopt (pass-through).
/// Throws Error{MissingToolName} when params lack a non-empty tool name.
std::optional<ToolCall> extract_tool_call(const Message& msg, const std::string& session_id,
                                          const std::string& branch_id, uint64_t& next_seq_index);

// stdio transport: one message per UTF-8 line.
std::optional<std::string> read_frame(std::istream& in);
void write_frame(std::ostream& out, std::string_view frame);

constexpr const char* kToolCallMethod = "tools/call";

}  // namespace acrfence
