#include "acrfence/simlab/agent.hpp"

#include <array>

#include "httplib.h"

#include "acrfence/errors.hpp"
#include "acrfence/protocol.hpp"

namespace acrfence::simlab {

namespace {

struct HostPortPath {
  std::string host;
  int port = 80;
  std::string path = "/";
};

HostPortPath parse_url(const std::string& url) {
  std::string rest = url;
  auto scheme_end = rest.find("://");
  if (scheme_end != std::string::npos) rest = rest.substr(scheme_end + 3);
  HostPortPath out;
  auto slash = rest.find('/');
  if (slash != std::string::npos) {
    out.path = rest.substr(slash);
    rest = rest.substr(0, slash);
  }
  auto colon = rest.rfind(':');
  if (colon == std::string::npos) {
    out.host = rest;
  } else {
    out.host = rest.substr(0, colon);
    out.port = std::stoi(rest.substr(colon + 1));
  }
  return out;
}

// Fixed synonym table for free-text re-phrasing.
const std::map<std::string, std::array<const char*, 4>>& synonym_table() {
  static const std::map<std::string, std::array<const char*, 4>> table = {
      {"memo", {"for invoice 7712", "re: invoice 7712", "invoice 7712 payment", "paying invoice 7712"}},
      {"reason", {"per GDPR request", "GDPR erasure request", "user data removal", "right-to-erasure"}},
  };
  return table;
}

}  // namespace

ScriptedAgent::ScriptedAgent(AgentConfig config, AgentEndpoints endpoints)
    : config_(std::move(config)), endpoints_(std::move(endpoints)),
      resynth_rng_(config_.resynth.seed) {}

Json ScriptedAgent::resolve_placeholder(const std::string& text, int generation, bool& fatal) {
  if (text.rfind("{{", 0) != 0 || text.size() < 5 || text.substr(text.size() - 2) != "}}") {
    return Json(text);
  }
  std::string inner = text.substr(2, text.size() - 4);
  if (inner == "uuid") {
    uuid_counter_++;
    char buf[64];
    std::snprintf(buf, sizeof(buf), "u-%04llx-%06llu",
                  static_cast<unsigned long long>(config_.resynth.seed % 0xffff),
                  static_cast<unsigned long long>(uuid_counter_));
    return Json(std::string(buf));
  }
  if (inner.rfind("var:", 0) == 0) {
    // value saved from an earlier step; lives in checkpointed local state
    return Json("__var__:" + inner.substr(4));  // resolved by caller against vars
  }
  if (inner.rfind("jitter:", 0) == 0) {
    std::string key = inner.substr(7);
    auto it = synonym_table().find(key);
    if (it == synonym_table().end()) return Json(key);
    if (generation == 0) return Json(it->second[0]);
    std::uniform_real_distribution<double> coin(0.0, 1.0);
    if (coin(resynth_rng_) < config_.resynth.text_jitter) {
      std::uniform_int_distribution<size_t> pick(1, it->second.size() - 1);
      return Json(it->second[pick(resynth_rng_)]);
    }
    return Json(it->second[0]);
  }
  if (inner.rfind("trial:", 0) == 0) {
    std::string key = inner.substr(6);
    if (config_.trial_vars.is_object() && config_.trial_vars.contains(key)) {
      return config_.trial_vars[key];
    }
    fatal = true;
    return Json();
  }
  return Json(text);
}

Json ScriptedAgent::instantiate_args(const ScenarioStep& step, int generation) {
  bool fatal = false;
  std::function<Json(const Json&)> walk = [&](const Json& node) -> Json {
    if (node.is_string()) return resolve_placeholder(node.get<std::string>(), generation, fatal);
    if (node.is_object()) {
      Json out = Json::object();
      for (auto it = node.begin(); it != node.end(); ++it) out[it.key()] = walk(it.value());
      return out;
    }
    if (node.is_array()) {
      Json out = Json::array();
      for (const auto& v : node) out.push_back(walk(v));
      return out;
    }
    return node;
  };
  Json args = walk(step.args_template);
  if (fatal) throw Error(Errc::ScenarioMalformed, "unresolvable trial placeholder in step");

  if (config_.resynth.intent_mutation && generation > 0) {
    const auto& mutation = *config_.resynth.intent_mutation;
    Json value = mutation.new_value;
    if (value.is_string()) {
      value = resolve_placeholder(value.get<std::string>(), generation, fatal);
      if (fatal) throw Error(Errc::ScenarioMalformed, "unresolvable intent_mutation value");
    }
    set_at_path(args, mutation.path, value);
  }
  return args;
}

std::string ScriptedAgent::post_tool_call(const ScenarioStep& step, int wire_id, const Json& args) {
  std::string url;
  if (endpoints_.fence_data_url) {
    url = *endpoints_.fence_data_url;
  } else {
    auto it = endpoints_.server_urls.find(step.server);
    if (it == endpoints_.server_urls.end()) {
      throw Error(Errc::ScenarioMalformed, "no endpoint for server '" + step.server + "'");
    }
    url = it->second;
  }
  HostPortPath hp = parse_url(url);
  httplib::Client client(hp.host, hp.port);
  client.set_connection_timeout(5, 0);
  client.set_read_timeout(30, 0);
  httplib::Headers headers;
  if (endpoints_.fence_data_url) headers.emplace("Mcp-Session-Id", config_.session_id);

  Json body = Json::object();
  body["jsonrpc"] = "2.0";
  body["id"] = wire_id;
  body["method"] = "tools/call";
  body["params"] = Json{{"arguments", args}, {"name", step.tool}};
  auto result = client.Post("/message", headers, canonical_dump(body), "application/json");
  if (!result) {
    throw Error(Errc::UpstreamFailure, "agent transport failure talking to " + url);
  }
  return result->body;
}

Json ScriptedAgent::control_request(const Json& body) {
  if (!endpoints_.fence_control_url) {
    throw Error(Errc::ScenarioMalformed, "scenario needs a fence control endpoint");
  }
  HostPortPath hp = parse_url(*endpoints_.fence_control_url);
  httplib::Client client(hp.host, hp.port);
  client.set_connection_timeout(5, 0);
  client.set_read_timeout(30, 0);
  auto result = client.Post("/control", canonical_dump(body), "application/json");
  if (!result) throw Error(Errc::UpstreamFailure, "agent cannot reach fence control surface");
  return parse_strict(result->body);
}

AgentResult ScriptedAgent::run() {
  AgentResult out;
  LocalState state;
  std::optional<LocalState> checkpoint;
  int deliberate_done = 0;
  int pass = 1;

  auto do_restore = [&]() -> bool {
    if (!checkpoint) return false;
    state = *checkpoint;
    out.restores++;
    pass++;
    if (endpoints_.fence_data_url && config_.explicit_restore_signal) {
      control_request(Json{{"op", "register_restore"},
                           {"session_id", config_.session_id},
                           {"checkpoint_seq", state.calls_made}});
    }
    return true;
  };

  while (true) {
    if (state.step_index >= config_.steps.size()) {
      if (deliberate_done < config_.deliberate_restores && checkpoint) {
        deliberate_done++;
        if (!do_restore()) break;
        continue;
      }
      out.completed = true;
      break;
    }

    if (static_cast<int>(state.step_index) == config_.checkpoint_index) {
      checkpoint = state;  // local state only; the outside world is not saved
    }

    const ScenarioStep& step = config_.steps[state.step_index];
    int generation = step_generation_[state.step_index]++;
    Json args;
    try {
      args = instantiate_args(step, generation);
    } catch (const Error& e) {
      out.abort_reason = e.what();
      break;
    }

    // Resolve {{var:...}} placeholders against checkpointed local state.
    bool var_missing = false;
    std::function<void(Json&)> fill_vars = [&](Json& node) {
      if (node.is_string()) {
        std::string s = node.get<std::string>();
        if (s.rfind("__var__:", 0) == 0) {
          auto segments = split_path(s.substr(8));
          const Json* v = find_at_path(state.vars, segments);
          if (!v) {
            var_missing = true;
          } else {
            node = *v;
          }
        }
        return;
      }
      if (node.is_object() || node.is_array()) {
        for (auto& child : node) fill_vars(child);
      }
    };
    fill_vars(args);
    if (var_missing) {
      out.abort_reason = "missing saved variable for step " + std::to_string(state.step_index);
      break;
    }

    int wire_id = state.next_wire_id++;
    std::string body;
    try {
      body = post_tool_call(step, wire_id, args);
    } catch (const Error& e) {
      out.abort_reason = e.what();
      break;
    }

    CallRecord record;
    record.tool = step.tool;
    record.branch_hint = "pass-" + std::to_string(pass);
    record.agent_seq = state.calls_made;
    record.wire_id = wire_id;
    record.arguments = args;
    record.response_body = body;

    Json response;
    bool parsed = true;
    try {
      response = parse_strict(body);
      if (!response.is_object() || (!response.contains("result") && !response.contains("error"))) {
        parsed = false;
      }
    } catch (const Error&) {
      parsed = false;
    }

    if (!parsed) {
      // Malformed tool response: fatal for the agent, the framework restores.
      record.disposition = "crash";
      out.transcript.push_back(std::move(record));
      out.crashes++;
      state.calls_made++;  // the call reached the server before the crash
      if (out.crashes > config_.max_crash_restores) {
        out.abort_reason = "crash-restore limit exceeded";
        break;
      }
      if (!do_restore()) {
        out.abort_reason = "crashed with no checkpoint";
        break;
      }
      continue;
    }

    if (response.contains("error")) {
      int64_t code = response["error"].value("code", 0);
      record.disposition = "error:" + std::to_string(code);
      out.transcript.push_back(std::move(record));

      if (code == -32050) {  // blocked: fork required
        out.blocked_fork++;
        if (config_.on_blocked == "fork" && out.forks < 4) {
          std::string token;
          if (response["error"].contains("data") &&
              response["error"]["data"].contains("fork_token")) {
            token = response["error"]["data"]["fork_token"].get<std::string>();
          }
          if (token.empty()) {
            out.abort_reason = "blocked without a fork token";
            break;
          }
          Json reply = control_request(Json{{"op", "approve_fork"},
                                            {"session_id", config_.session_id},
                                            {"fork_token", token},
                                            {"new_branch_id", "fork-" + std::to_string(++out.forks)}});
          if (!reply.value("ok", false)) {
            out.abort_reason = "fork approval failed";
            break;
          }
          continue;  // re-issue the same step on the new branch
        }
        out.abort_reason = "blocked_fork_required";
        break;
      }
      if (code == -32051) {  // blocked: credential reuse
        out.blocked_credential++;
        out.abort_reason = "blocked_credential_reuse";
        break;
      }
      // Genuine tool error (revoked token, insufficient funds, ...): the
      // scripted agent gives up on the trial.
      state.calls_made++;
      out.abort_reason = "tool_error:" + std::to_string(code);
      break;
    }

    record.disposition = "result";
    out.transcript.push_back(record);
    state.calls_made++;
    if (!step.save_as.empty()) state.vars[step.save_as] = response["result"];
    state.step_index++;
  }

  return out;
}

}  // namespace acrfence::simlab
