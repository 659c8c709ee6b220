#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <sstream>

#include "acrfence/protocol.hpp"
#include "testutil.hpp"

using namespace acrfence;
using testutil::Rng;

TEST_CASE("decode request maps fields directly") {
  auto msg = decode_message(
      R"({"jsonrpc":"2.0","id":1,"method":"tools/call","params":{"name":"transfer","arguments":{"amount":500}}})");
  CHECK(msg.kind == MessageKind::Request);
  CHECK(*msg.id == Json(1));
  CHECK(*msg.method == "tools/call");
  CHECK((*msg.params)["name"] == "transfer");
  CHECK((*msg.params)["arguments"]["amount"] == 500);
  CHECK(msg.extra["jsonrpc"] == "2.0");
}

TEST_CASE("decode response maps fields directly") {
  auto msg = decode_message(
      R"({"jsonrpc":"2.0","id":1,"result":{"content":[{"type":"text","text":"ok"}]}})");
  CHECK(msg.kind == MessageKind::Response);
  CHECK(*msg.id == Json(1));
  CHECK((*msg.result)["content"][0]["text"] == "ok");
  CHECK_FALSE(msg.error.has_value());
}

TEST_CASE("response with both result and error is a protocol violation") {
  CHECK_THROWS_WITH_AS(
      decode_message(R"({"jsonrpc":"2.0","id":1,"result":{},"error":{"code":-1,"message":"x"}})"),
      doctest::Contains("exactly one of result/error"), Error);
}

TEST_CASE("decode rejects malformed and invalid shapes") {
  CHECK_THROWS_AS(decode_message("{nope"), Error);
  CHECK_THROWS_AS(decode_message("[1,2,3]"), Error);
  CHECK_THROWS_AS(decode_message(R"({"id":1})"), Error);             // response without result/error
  CHECK_THROWS_AS(decode_message(R"({"method":7,"id":1})"), Error);  // method not a string
  CHECK_THROWS_AS(decode_message(R"({"method":"m","id":1,"params":3})"), Error);
  CHECK_THROWS_AS(decode_message(R"({"method":"m","id":{"a":1}})"), Error);  // structured id
  CHECK_THROWS_AS(decode_message(R"({"id":1,"error":{"code":"x","message":"m"}})"), Error);
  CHECK_THROWS_AS(decode_message(R"({"id":1,"method":"m","result":{}})"), Error);
}

TEST_CASE("duplicate keys are rejected at any depth") {
  CHECK_THROWS_WITH_AS(decode_message(R"({"id":1,"id":2,"method":"m"})"),
                       doctest::Contains("duplicate"), Error);
  CHECK_THROWS_AS(
      decode_message(
          R"({"id":1,"method":"tools/call","params":{"arguments":{"a":1,"a":2},"name":"t"}})"),
      Error);
}

TEST_CASE("notification encodes without an id key") {
  Message msg;
  msg.kind = MessageKind::Notification;
  msg.method = "notifications/progress";
  std::string bytes = encode_message(msg);
  CHECK(bytes.find("\"id\"") == std::string::npos);
  CHECK(bytes.find("\"method\":\"notifications/progress\"") != std::string::npos);
}

TEST_CASE("request encodes id and method") {
  Message msg;
  msg.kind = MessageKind::Request;
  msg.id = 7;
  msg.method = "tools/list";
  std::string bytes = encode_message(msg);
  CHECK(bytes.find("\"id\":7") != std::string::npos);
  CHECK(bytes.find("\"method\":\"tools/list\"") != std::string::npos);
}

TEST_CASE("round-trip over randomized valid messages is structurally equal") {
  Rng rng(42);
  for (int i = 0; i < 1000; ++i) {
    Message msg = testutil::random_message(rng);
    Message back = decode_message(encode_message(msg));
    REQUIRE(back == msg);
  }
}

TEST_CASE("canonical encoding is stable and key-ordered") {
  auto msg = decode_message(R"({"zeta":1,"id":3,"method":"m","alpha":{"b":2,"a":1}})");
  std::string once = encode_message(msg);
  std::string twice = encode_message(decode_message(once));
  CHECK(once == twice);
  CHECK(once.find("\"alpha\"") < once.find("\"id\""));
  CHECK(once.find("{\"a\":1,\"b\":2}") != std::string::npos);
}

TEST_CASE("extract_tool_call consumes the session counter") {
  uint64_t next_seq = 3;
  auto msg = testutil::tool_call_message("transfer", Json{{"amount", 500}}, Json(9));
  auto call = extract_tool_call(msg, "s1", "b0", next_seq);
  REQUIRE(call.has_value());
  CHECK(call->session_id == "s1");
  CHECK(call->branch_id == "b0");
  CHECK(call->seq_index == 3);
  CHECK(call->tool_name == "transfer");
  CHECK(call->arguments["amount"] == 500);
  CHECK(call->wire_id == Json(9));
  CHECK(next_seq == 4);
}

TEST_CASE("non-call methods pass through without touching the counter") {
  uint64_t next_seq = 5;
  Message msg;
  msg.kind = MessageKind::Request;
  msg.id = 1;
  msg.method = "tools/list";
  CHECK_FALSE(extract_tool_call(msg, "s1", "b0", next_seq).has_value());
  CHECK(next_seq == 5);
}

TEST_CASE("tools/call without a tool name is an error") {
  uint64_t next_seq = 0;
  Message empty_params;
  empty_params.kind = MessageKind::Request;
  empty_params.id = 1;
  empty_params.method = "tools/call";
  empty_params.params = Json::object();
  CHECK_THROWS_AS(extract_tool_call(empty_params, "s1", "b0", next_seq), Error);

  auto blank = testutil::tool_call_message("", Json::object(), Json(2));
  CHECK_THROWS_AS(extract_tool_call(blank, "s1", "b0", next_seq), Error);
  CHECK(next_seq == 0);  // failed extraction never consumes a position
}

TEST_CASE("missing arguments default to an empty object") {
  uint64_t next_seq = 0;
  Message msg;
  msg.kind = MessageKind::Request;
  msg.id = 4;
  msg.method = "tools/call";
  msg.params = Json{{"name", "get_balance"}};
  auto call = extract_tool_call(msg, "s1", "b0", next_seq);
  REQUIRE(call.has_value());
  CHECK(call->arguments == Json::object());
}

TEST_CASE("stdio framing round-trips lines") {
  std::stringstream pipe;
  write_frame(pipe, R"({"id":1,"method":"ping"})");
  write_frame(pipe, R"({"id":2,"method":"ping"})");
  auto first = read_frame(pipe);
  auto second = read_frame(pipe);
  auto eof = read_frame(pipe);
  REQUIRE(first.has_value());
  REQUIRE(second.has_value());
  CHECK_FALSE(eof.has_value());
  CHECK(decode_message(*first).id == Json(1));
  CHECK(decode_message(*second).id == Json(2));

  std::stringstream crlf("{\"id\":3,\"method\":\"ping\"}\r\n");
  auto frame = read_frame(crlf);
  REQUIRE(frame.has_value());
  CHECK(decode_message(*frame).id == Json(3));
}

TEST_CASE("leaf paths match the independent oracle") {
  Rng rng(7);
  for (int i = 0; i < 500; ++i) {
    Json tree = testutil::random_tree(rng, 3);
    CHECK(leaf_paths(tree) == testutil::naive_leaf_paths(tree));
  }
}

TEST_CASE("path lookup descends objects and array indices") {
  Json tree = Json{{"items", Json::array({Json{{"amount", 5}}, Json{{"amount", 7}}})}};
  const Json* v = find_at_path(tree, split_path("items.1.amount"));
  REQUIRE(v != nullptr);
  CHECK(*v == 7);
  CHECK(find_at_path(tree, split_path("items.2.amount")) == nullptr);
  CHECK(find_at_path(tree, split_path("items.x")) == nullptr);

  Json copy = tree;
  CHECK(set_at_path(copy, "items.0.amount", Json(9)));
  CHECK(copy["items"][0]["amount"] == 9);
  CHECK_FALSE(set_at_path(copy, "missing.path", Json(1)));
}
