#pragma once

#include <filesystem>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "acrfence/errors.hpp"
#include "acrfence/fence.hpp"
#include "acrfence/protocol.hpp"
#include "acrfence/value.hpp"

namespace testutil {

using acrfence::Json;

class TempDir {
public:
  explicit TempDir(const std::string& tag) {
    auto base = std::filesystem::temp_directory_path();
    for (int i = 0; i < 1000; ++i) {
      auto candidate = base / (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(i));
      std::error_code ec;
      if (std::filesystem::create_directory(candidate, ec)) {
        path_ = candidate;
        return;
      }
    }
    throw std::runtime_error("cannot create temp dir");
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path file(const std::string& name) const { return path_ / name; }

private:
  std::filesystem::path path_;
};

struct Rng {
  std::mt19937_64 engine;
  explicit Rng(uint64_t seed) : engine(seed) {}

  int range(int lo, int hi) {  // inclusive
    return std::uniform_int_distribution<int>(lo, hi)(engine);
  }
  bool coin(double p = 0.5) { return std::uniform_real_distribution<double>(0, 1)(engine) < p; }
  template <typename T>
  const T& pick(const std::vector<T>& pool) {
    return pool[static_cast<size_t>(range(0, static_cast<int>(pool.size()) - 1))];
  }
  std::string word() {
    static const std::vector<std::string> pool = {"alpha", "beta",  "gamma", "delta",
                                                  "kappa", "sigma", "omega", "lambda"};
    return pick(pool) + std::to_string(range(0, 99));
  }
};

inline Json random_scalar(Rng& rng) {
  switch (rng.range(0, 4)) {
    case 0: return Json(rng.word());
    case 1: return Json(rng.range(-100000, 100000));
    case 2: return Json(rng.range(-1000, 1000) * 0.25);
    case 3: return Json(rng.coin());
    default: return Json(nullptr);
  }
}

inline Json random_tree(Rng& rng, int depth) {
  if (depth <= 0 || rng.coin(0.35)) return random_scalar(rng);
  if (rng.coin(0.3)) {
    Json arr = Json::array();
    int n = rng.range(1, 3);
    for (int i = 0; i < n; ++i) arr.push_back(random_tree(rng, depth - 1));
    return arr;
  }
  Json obj = Json::object();
  int n = rng.range(1, 4);
  std::set<std::string> used;
  for (int i = 0; i < n; ++i) {
    std::string key = rng.word();
    if (!used.insert(key).second) continue;
    obj[key] = random_tree(rng, depth - 1);
  }
  return obj;
}

inline acrfence::Message random_message(Rng& rng) {
  using acrfence::Message;
  using acrfence::MessageKind;
  Message msg;
  static const std::vector<std::string> methods = {"tools/call", "tools/list", "initialize",
                                                   "ping", "notifications/progress"};
  switch (rng.range(0, 2)) {
    case 0:
      msg.kind = MessageKind::Request;
      msg.id = rng.coin() ? Json(rng.range(1, 100000)) : Json("req-" + rng.word());
      msg.method = rng.pick(methods);
      if (rng.coin(0.8)) msg.params = rng.coin() ? random_tree(rng, 2) : Json::object();
      if (msg.params && !msg.params->is_structured()) msg.params = Json::object();
      break;
    case 1:
      msg.kind = MessageKind::Notification;
      msg.method = rng.pick(methods);
      if (rng.coin(0.5)) {
        msg.params = random_tree(rng, 2);
        if (!msg.params->is_structured()) msg.params = Json::object();
      }
      break;
    default:
      msg.kind = MessageKind::Response;
      msg.id = rng.coin() ? Json(rng.range(1, 100000)) : Json("req-" + rng.word());
      if (rng.coin()) {
        msg.result = random_tree(rng, 2);
      } else {
        acrfence::ErrorInfo err;
        err.code = rng.range(-33000, -32000);
        err.message = rng.word();
        if (rng.coin()) err.data = random_tree(rng, 1);
        msg.error = err;
      }
      break;
  }
  if (rng.coin(0.6)) msg.extra["jsonrpc"] = "2.0";
  if (rng.coin(0.2)) msg.extra["x_trace"] = rng.word();
  return msg;
}

/// Independent leaf-path oracle: iterative worklist walk (the production
/// implementation is a recursive descent).
inline std::vector<std::string> naive_leaf_paths(const Json& tree) {
  std::vector<std::string> out;
  std::vector<std::pair<std::string, const Json*>> work;
  work.emplace_back("", &tree);
  while (!work.empty()) {
    auto [prefix, node] = work.back();
    work.pop_back();
    if (node->is_object() && !node->empty()) {
      for (auto it = node->begin(); it != node->end(); ++it) {
        work.emplace_back(prefix.empty() ? it.key() : prefix + "." + it.key(), &it.value());
      }
    } else if (node->is_array() && !node->empty()) {
      for (size_t i = 0; i < node->size(); ++i) {
        std::string seg = std::to_string(i);
        work.emplace_back(prefix.empty() ? seg : prefix + "." + seg, &(*node)[i]);
      }
    } else {
      if (!(prefix.empty() && (node->is_object() || node->is_array()))) out.push_back(prefix);
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

/// In-process upstream stub for fence tests.
class StubRouter : public acrfence::UpstreamRouter {
public:
  using Handler = std::function<Json(const std::string& tool, const Json& args)>;

  explicit StubRouter(Handler handler) : handler_(std::move(handler)) {}

  std::string route_for_tool(const std::string&) const override { return "main"; }
  std::string default_upstream() const override { return "main"; }

  std::string forward(const std::string&, const std::string& frame) override {
    forward_count++;
    last_frame = frame;
    if (fail_transport) {
      throw acrfence::Error(acrfence::Errc::UpstreamFailure, "injected transport failure");
    }
    if (!raw_response.empty()) return raw_response;
    acrfence::Message msg = acrfence::decode_message(frame);
    Json id = msg.id ? *msg.id : Json();
    std::string tool;
    Json args = Json::object();
    if (msg.params && msg.params->is_object()) {
      tool = msg.params->value("name", "");
      if (msg.params->contains("arguments")) args = (*msg.params)["arguments"];
    }
    per_tool[tool]++;
    try {
      Json result = handler_(tool, args);
      return acrfence::canonical_dump(
          Json{{"id", id}, {"jsonrpc", "2.0"}, {"result", result}});
    } catch (const std::pair<int64_t, std::string>& err) {
      return acrfence::canonical_dump(
          Json{{"error", Json{{"code", err.first}, {"message", err.second}}},
               {"id", id},
               {"jsonrpc", "2.0"}});
    }
  }

  int forward_count = 0;
  std::map<std::string, int> per_tool;
  std::string last_frame;
  std::string raw_response;  // when set, returned verbatim
  bool fail_transport = false;

private:
  Handler handler_;
};

inline acrfence::Message tool_call_message(const std::string& tool, const Json& args,
                                           Json wire_id) {
  acrfence::Message msg;
  msg.kind = acrfence::MessageKind::Request;
  msg.id = std::move(wire_id);
  msg.method = "tools/call";
  msg.params = Json{{"arguments", args}, {"name", tool}};
  msg.extra["jsonrpc"] = "2.0";
  return msg;
}

}  // namespace testutil
