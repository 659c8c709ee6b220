#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "acrfence/value.hpp"

namespace acrfence::simlab {

/// Parameterized model of LLM re-synthesis: reference ids are always fresh
/// (never repeat, even across restores), free-text fields may be re-phrased,
/// and an optional intent mutation models an attacker redirecting the agent
/// on the post-restore segment.
struct ResynthesisModel {
  bool fresh_reference_ids = true;
  double text_jitter = 0.0;
  struct IntentMutation {
    std::string path;
    Json new_value;
  };
  std::optional<IntentMutation> intent_mutation;
  uint64_t seed = 0;
};

/// One scripted tool call. String values in args_template may be
/// placeholders:
///   {{uuid}}        fresh reference id, unique across the whole trial
///   {{var:X.path}}  value saved from an earlier step's result
///   {{jitter:key}}  free text, re-phrased from a fixed synonym table
///   {{trial:key}}   per-trial parameter
struct ScenarioStep {
  std::string tool;
  std::string server;  // bank | cloud | approval (routing in direct mode)
  Json args_template = Json::object();
  std::string save_as;
};

struct AgentEndpoints {
  std::optional<std::string> fence_data_url;     // when present, all calls go here
  std::optional<std::string> fence_control_url;  // restore signals / fork approvals
  std::map<std::string, std::string> server_urls;  // direct mode routing
};

struct AgentConfig {
  std::string session_id = "s1";
  std::vector<ScenarioStep> steps;
  int checkpoint_index = -1;  // snapshot local state before this step; -1 = none
  ResynthesisModel resynth;
  std::string on_blocked = "abort";  // "abort" | "fork"
  bool explicit_restore_signal = true;
  int deliberate_restores = 0;  // voluntary rewind-and-rerun cycles after completion
  int max_crash_restores = 16;
  Json trial_vars = Json::object();
};

struct CallRecord {
  std::string tool;
  std::string branch_hint;  // "pass-N" label for the transcript
  uint64_t agent_seq = 0;
  int wire_id = 0;
  Json arguments;
  std::string response_body;
  std::string disposition;  // "result" | "error:<code>" | "crash" | "blocked_fork" | ...
};

struct AgentResult {
  bool completed = false;
  std::string abort_reason;
  int crashes = 0;
  int restores = 0;
  int forks = 0;
  int blocked_fork = 0;
  int blocked_credential = 0;
  std::vector<CallRecord> transcript;
};

/// Deterministic scripted executor standing in for an LLM agent. Local state
/// (step position, saved results, call counter, wire-id counter) is snapshot
/// at the checkpoint and restored on crash; the re-synthesis generator lives
/// outside that state, which is what makes regenerated calls differ.
class ScriptedAgent {
public:
  ScriptedAgent(AgentConfig config, AgentEndpoints endpoints);

  AgentResult run();

private:
  struct LocalState {
    size_t step_index = 0;
    Json vars = Json::object();
    uint64_t calls_made = 0;
    int next_wire_id = 1;
  };

  Json instantiate_args(const ScenarioStep& step, int generation);
  Json resolve_placeholder(const std::string& text, int generation, bool& fatal);
  std::string post_tool_call(const ScenarioStep& step, int wire_id, const Json& args);
  Json control_request(const Json& body);

  AgentConfig config_;
  AgentEndpoints endpoints_;
  std::mt19937_64 resynth_rng_;  // NOT part of checkpointed state
  uint64_t uuid_counter_ = 0;    // NOT part of checkpointed state
  std::map<size_t, int> step_generation_;  // NOT part of checkpointed state
};

}  // namespace acrfence::simlab
