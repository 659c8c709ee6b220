#include "acrfence/fence.hpp"

#include <random>

#include "acrfence/errors.hpp"

namespace acrfence {

const char* fence_outcome_name(FenceOutcomeKind kind) {
  switch (kind) {
    case FenceOutcomeKind::Forwarded: return "Forwarded";
    case FenceOutcomeKind::Replayed: return "Replayed";
    case FenceOutcomeKind::BlockedForkRequired: return "BlockedForkRequired";
    case FenceOutcomeKind::BlockedCredentialReuse: return "BlockedCredentialReuse";
  }
  return "Forwarded";
}

std::vector<std::string> SessionState::ancestry() const {
  std::vector<std::string> out;
  const BranchEntry* node = branch(current_branch_id);
  while (node) {
    out.push_back(node->branch_id);
    node = node->parent_branch_id ? branch(*node->parent_branch_id) : nullptr;
  }
  return out;
}

const BranchEntry* SessionState::branch(const std::string& branch_id) const {
  for (const auto& entry : branch_lineage) {
    if (entry.branch_id == branch_id) return &entry;
  }
  return nullptr;
}

std::string make_fork_token() {
  std::random_device rd;
  uint64_t hi = (uint64_t(rd()) << 32) | rd();
  uint64_t lo = (uint64_t(rd()) << 32) | rd();
  char buf[33];
  std::snprintf(buf, sizeof(buf), "%016llx%016llx", static_cast<unsigned long long>(hi),
                static_cast<unsigned long long>(lo));
  return buf;
}

Fence::Fence(EffectLog& log, PolicySet policies, UpstreamRouter& router, FenceConfig config)
    : log_(log), policies_(std::move(policies)), router_(router), config_(std::move(config)) {}

Fence::SessionEntry& Fence::entry(const std::string& session_id) {
  std::lock_guard<std::mutex> lock(sessions_mutex_);
  auto it = sessions_.find(session_id);
  if (it == sessions_.end()) {
    auto entry = std::make_unique<SessionEntry>();
    entry->state.session_id = session_id;
    entry->state.current_branch_id = config_.initial_branch_id;
    entry->state.branch_lineage.push_back(BranchEntry{config_.initial_branch_id, 0, std::nullopt, false});
    it = sessions_.emplace(session_id, std::move(entry)).first;
  }
  return *it->second;
}

const Fence::SessionEntry* Fence::find_entry(const std::string& session_id) const {
  std::lock_guard<std::mutex> lock(sessions_mutex_);
  auto it = sessions_.find(session_id);
  return it == sessions_.end() ? nullptr : it->second.get();
}

void Fence::ensure_session(const std::string& session_id) { entry(session_id); }

void Fence::register_restore(const std::string& session_id, uint64_t checkpoint_seq) {
  const SessionEntry* existing = find_entry(session_id);
  if (!existing) throw Error(Errc::UnknownSession, "no session '" + session_id + "'");
  SessionEntry& session = entry(session_id);
  std::lock_guard<std::mutex> lock(session.mutex);
  register_restore_locked(session, checkpoint_seq);
}

void Fence::register_restore_locked(SessionEntry& session, uint64_t checkpoint_seq) {
  SessionState& s = session.state;
  auto ancestry = s.ancestry();
  auto max_seq = log_.max_journaled_seq(s.session_id, ancestry);
  if (!max_seq) {
    if (checkpoint_seq != 0) {
      throw Error(Errc::FutureCheckpoint, "nothing journaled; checkpoint " +
                                              std::to_string(checkpoint_seq) + " is in the future");
    }
  } else if (checkpoint_seq > *max_seq) {
    throw Error(Errc::FutureCheckpoint,
                "checkpoint " + std::to_string(checkpoint_seq) + " beyond highest journaled seq " +
                    std::to_string(*max_seq));
  }

  std::string restore_branch;
  do {
    restore_branch = s.current_branch_id + ".r" + std::to_string(++s.restore_count);
  } while (s.branch(restore_branch));

  s.branch_lineage.push_back(
      BranchEntry{restore_branch, checkpoint_seq, s.current_branch_id, true});
  s.current_branch_id = restore_branch;
  s.next_seq_index = checkpoint_seq;
  s.restore_frontier = max_seq;  // absent when nothing was journaled
  s.pending_fork.reset();        // a restore supersedes any pending divergence
}

FenceOutcome Fence::handle_call(const std::string& session_id, const Message& msg) {
  if (msg.kind != MessageKind::Request || !msg.method || *msg.method != kToolCallMethod) {
    throw Error(Errc::ProtocolViolation, "handle_call expects a tools/call request");
  }
  SessionEntry& session = entry(session_id);
  std::lock_guard<std::mutex> lock(session.mutex);
  return dispatch_call(session, msg);
}

namespace {

Json error_payload(int64_t code, const std::string& message, Json data) {
  Json err = Json::object();
  err["code"] = code;
  err["message"] = message;
  if (!data.is_null()) err["data"] = std::move(data);
  return Json{{"error", err}};
}

ToolPolicy bare_policy(const std::string& tool_name) {
  ToolPolicy policy;
  policy.tool_name = tool_name;
  return policy;
}

Json prior_record_summary(const EffectRecord& rec, const ToolPolicy& policy) {
  Json intent = Json::object();
  for (const auto& path : policy.intent_fields) {
    if (const Json* value = find_at_path(rec.arguments, split_path(path))) {
      intent[path] = *value;
    }
  }
  Json doc = Json::object();
  doc["record_id"] = rec.record_id;
  doc["tool_name"] = rec.tool_name;
  doc["branch_id"] = rec.branch_id;
  doc["seq_index"] = rec.seq_index;
  doc["outcome"] = outcome_name(rec.outcome);
  doc["intent_fields"] = intent;
  return doc;
}

}  // namespace

FenceOutcome Fence::record_outcome(SessionEntry& session, const ToolCall* call,
                                   FenceOutcome outcome) {
  if (config_.record_outcome_log) {
    OutcomeEvent event;
    event.kind = outcome.kind;
    if (call) {
      event.branch_id = call->branch_id;
      event.seq_index = call->seq_index;
      event.tool_name = call->tool_name;
    }
    event.record_id = outcome.record_id;
    event.response_canonical = canonical_dump(outcome.response);
    session.outcomes.push_back(std::move(event));
  }
  return outcome;
}

FenceOutcome Fence::block_fork_required(SessionEntry& session, const ToolCall& call,
                                        Verdict verdict,
                                        const std::optional<EffectRecord>& prior, bool mint_token,
                                        const std::string& note) {
  SessionState& s = session.state;
  s.next_seq_index = call.seq_index;  // blocked calls do not consume a position

  Json data = Json::object();
  data["verdict"] = verdict.to_json();
  if (prior) {
    auto policy = policies_.find(prior->tool_name);
    data["prior_record"] =
        prior_record_summary(*prior, policy ? *policy : bare_policy(prior->tool_name));
  }
  if (mint_token) {
    std::string token = make_fork_token();
    data["fork_token"] = token;
    s.pending_fork = PendingFork{call, verdict, token};
  } else if (s.pending_fork) {
    data["fork_token"] = s.pending_fork->fork_token;
  }

  FenceOutcome outcome;
  outcome.kind = FenceOutcomeKind::BlockedForkRequired;
  outcome.response = error_payload(-32050, "blocked: explicit fork required before diverging "
                                           "from journaled effects",
                                   std::move(data));
  if (prior) outcome.record_id = prior->record_id;
  outcome.note = note;
  return record_outcome(session, &call, std::move(outcome));
}

FenceOutcome Fence::dispatch_call(SessionEntry& session, const Message& msg) {
  SessionState& s = session.state;

  // Heuristic restore detection: an integer wire id regressing to one this
  // session already used for an earlier tool call signals a silent restore.
  if (config_.heuristic_restore_detection && msg.id && msg.id->is_number_integer()) {
    int64_t wire = msg.id->get<int64_t>();
    if (s.max_int_wire_id && wire <= *s.max_int_wire_id) {
      auto it = s.wire_seq.find(wire);
      if (it != s.wire_seq.end() && it->second < s.next_seq_index) {
        try {
          register_restore_locked(session, it->second);
          session.implicit_restores++;
        } catch (const Error&) {
          // nothing journaled at or before that position; leave state alone
        }
      }
    }
  }

  if (s.pending_fork) {
    ToolCall pending = s.pending_fork->blocked_call;
    Verdict verdict = s.pending_fork->verdict;
    return block_fork_required(session, pending, std::move(verdict), std::nullopt,
                               /*mint_token=*/false,
                               "session has an unresolved fork decision; no calls are forwarded");
  }

  auto call = extract_tool_call(msg, s.session_id, s.current_branch_id, s.next_seq_index);
  // handle_call is only invoked for tools/call, so extraction always yields.
  if (msg.id && msg.id->is_number_integer()) {
    int64_t wire = msg.id->get<int64_t>();
    s.wire_seq[wire] = call->seq_index;
    if (!s.max_int_wire_id || wire > *s.max_int_wire_id) s.max_int_wire_id = wire;
  }
  const uint64_t seq = call->seq_index;
  auto rollback_seq = [&] { s.next_seq_index = seq; };

  auto policy = policies_.find(call->tool_name);
  if (!policy) {
    Verdict verdict;
    verdict.kind = VerdictKind::Divergent;
    verdict.rationale = "no policy configured for tool '" + call->tool_name +
                        "' and default policies are disabled; failing closed";
    // A fork cannot repair a missing policy, so no token is minted.
    FenceOutcome outcome = block_fork_required(session, *call, std::move(verdict), std::nullopt,
                                               /*mint_token=*/false, "PolicyMissing");
    return outcome;
  }

  auto tokens = extract_credential_tokens(call->arguments, *policy);
  for (const auto& token : tokens) {
    if (!log_.is_consumed(token.token)) continue;
    log_.record_reuse_attempt(token.token, *call);
    rollback_seq();
    auto consumption = log_.consumption_of(token.token);
    std::optional<EffectRecord> prior =
        consumption ? log_.record(consumption->consumed_by) : std::nullopt;

    Json data = Json::object();
    data["reused_token_field"] = token.source_field;
    data["token_digest"] = EffectLog::credential_digest(token.token);
    if (consumption) data["consumed_at"] = consumption->consumed_at;
    if (prior) {
      auto prior_policy = policies_.find(prior->tool_name);
      data["consumed_by"] =
          prior_record_summary(*prior, prior_policy ? *prior_policy : bare_policy(prior->tool_name));
    }
    FenceOutcome outcome;
    outcome.kind = FenceOutcomeKind::BlockedCredentialReuse;
    outcome.response = error_payload(
        -32051, "blocked: credential was already consumed and stays consumed across restores",
        std::move(data));
    if (prior) outcome.record_id = prior->record_id;
    return record_outcome(session, &*call, std::move(outcome));
  }

  const std::string upstream = router_.route_for_tool(call->tool_name);

  if (!policy->irreversible) {
    // Reversible tools bypass the journal entirely and pass through verbatim.
    std::string raw = router_.forward(upstream, encode_message(msg));
    FenceOutcome outcome;
    outcome.kind = FenceOutcomeKind::Forwarded;
    outcome.raw_passthrough = raw;
    try {
      Message resp = decode_message(raw);
      outcome.response = resp.error ? error_payload(resp.error->code, resp.error->message,
                                                    resp.error->data.value_or(Json()))
                                    : Json{{"result", resp.result.value_or(Json())}};
    } catch (const Error&) {
      outcome.response = Json();  // upstream bytes pass through even when unparseable
    }
    return record_outcome(session, &*call, std::move(outcome));
  }

  bool on_restore_path = false;
  if (s.restore_frontier) {
    if (seq <= *s.restore_frontier) {
      on_restore_path = true;
    } else {
      s.restore_frontier.reset();  // restore window fully passed
    }
  }

  std::optional<EffectRecord> candidate;
  if (on_restore_path) {
    candidate = log_.find_at_position(s.session_id, s.ancestry(), seq);
    if (candidate && candidate->outcome == Outcome::Unknown) {
      Verdict verdict;
      verdict.kind = VerdictKind::Divergent;
      verdict.candidate = candidate->record_id;
      verdict.rationale = "journaled record " + std::to_string(candidate->record_id) +
                          " has unknown outcome (crash mid-call); cannot replay a response that "
                          "was never recorded";
      return block_fork_required(session, *call, std::move(verdict), candidate,
                                 /*mint_token=*/true, "unknown-outcome candidate");
    }

    Verdict verdict;
    std::string note;
    auto consumed_check = [this](const std::string& t) { return log_.is_consumed(t); };
    if (config_.analyzer && candidate) {
      verdict = analyze_external(*call, *candidate, *policy, *config_.analyzer, consumed_check);
      if (verdict.rationale.rfind("analyzer fallback", 0) == 0) note = "analyzer fallback";
    } else {
      verdict = classify(*call, candidate, *policy, consumed_check);
    }

    switch (verdict.kind) {
      case VerdictKind::ReplayEquivalent:
        if (!config_.unsafe_disable_replay) {
          FenceOutcome outcome;
          outcome.kind = FenceOutcomeKind::Replayed;
          outcome.response = candidate->response;
          outcome.record_id = candidate->record_id;
          outcome.note = "replayed from record " + std::to_string(candidate->record_id) +
                         "; recorded response returned verbatim and may embed stale values";
          return record_outcome(session, &*call, std::move(outcome));
        }
        break;  // negative control: fall through to the forward path
      case VerdictKind::Divergent:
        return block_fork_required(session, *call, std::move(verdict), candidate,
                                   /*mint_token=*/true, note);
      case VerdictKind::FreshCall:
        // A new irreversible step below the restore frontier is divergence.
        return block_fork_required(session, *call, std::move(verdict), std::nullopt,
                                   /*mint_token=*/true,
                                   "fresh irreversible call below the restore frontier");
      case VerdictKind::CredentialReuse:
        // Unreachable: the pre-forward check above already blocked it.
        return block_fork_required(session, *call, std::move(verdict), candidate,
                                   /*mint_token=*/false, "credential reuse");
    }
  }

  // Normal forward path: journal write-ahead, forward, finalize.
  Json env = Json::object();
  env["ts"] = now_iso_timestamp_utc();
  env["ts_mono_ns"] = monotonic_ns();
  env["proxy"] = config_.proxy_id;
  env["upstream"] = upstream;

  std::optional<std::string> parent;
  if (const BranchEntry* branch = s.branch(s.current_branch_id)) parent = branch->parent_branch_id;

  uint64_t record_id = 0;
  try {
    record_id = log_.append_pending(*call, *policy, env, parent);
  } catch (const Error&) {
    rollback_seq();  // nothing persisted, nothing forwarded
    throw;
  }

  std::string raw;
  try {
    raw = router_.forward(upstream, encode_message(msg));
  } catch (const Error& e) {
    throw Error(Errc::UpstreamFailure, "forward failed after journaling record " +
                                           std::to_string(record_id) +
                                           " (outcome stays unknown): " + e.what());
  }

  Json payload;
  Outcome outcome_kind;
  try {
    Message resp = decode_message(raw);
    if (resp.error) {
      payload = error_payload(resp.error->code, resp.error->message,
                              resp.error->data.value_or(Json()));
      outcome_kind = Outcome::Failed;
    } else {
      payload = Json{{"result", resp.result.value_or(Json())}};
      outcome_kind = Outcome::Succeeded;
    }
  } catch (const Error&) {
    throw Error(Errc::UpstreamFailure, "unparseable upstream response after journaling record " +
                                           std::to_string(record_id) + " (outcome stays unknown)");
  }

  log_.finalize(record_id, payload, outcome_kind);
  if (outcome_kind == Outcome::Succeeded && !tokens.empty()) {
    log_.mark_consumed(tokens, record_id);
  }

  FenceOutcome outcome;
  outcome.kind = FenceOutcomeKind::Forwarded;
  outcome.response = payload;
  outcome.record_id = record_id;
  return record_outcome(session, &*call, std::move(outcome));
}

std::vector<BranchEntry> Fence::approve_fork(const std::string& session_id,
                                             const std::string& fork_token,
                                             const std::string& new_branch_id) {
  const SessionEntry* existing = find_entry(session_id);
  if (!existing) throw Error(Errc::UnknownSession, "no session '" + session_id + "'");
  SessionEntry& session = entry(session_id);
  std::lock_guard<std::mutex> lock(session.mutex);
  SessionState& s = session.state;

  if (!s.pending_fork) {
    throw Error(Errc::NoPendingFork, "session '" + session_id + "' has no blocked call awaiting a fork");
  }
  if (s.pending_fork->fork_token != fork_token) {
    throw Error(Errc::TokenMismatch, "fork token does not match the pending blocked call");
  }
  if (new_branch_id.empty() || s.branch(new_branch_id)) {
    throw Error(Errc::BranchIdInUse, "branch id '" + new_branch_id + "' is unavailable");
  }

  uint64_t fork_seq = s.pending_fork->blocked_call.seq_index;
  s.branch_lineage.push_back(BranchEntry{new_branch_id, fork_seq, s.current_branch_id, false});
  s.current_branch_id = new_branch_id;
  s.next_seq_index = fork_seq;
  s.restore_frontier.reset();  // the new branch owns everything from the fork point on
  s.pending_fork.reset();
  return s.branch_lineage;
}

std::string Fence::handle_data_frame(const std::string& session_id, const std::string& frame) {
  Message msg;
  try {
    msg = decode_message(frame);
  } catch (const Error& e) {
    Json err = Json{{"error", Json{{"code", -32700}, {"message", e.what()}}},
                    {"id", nullptr},
                    {"jsonrpc", "2.0"}};
    return canonical_dump(err);
  }

  auto build_response = [&](const Json& payload) {
    Json doc = Json::object();
    doc["jsonrpc"] = "2.0";
    doc["id"] = msg.id ? *msg.id : Json();
    if (payload.is_object() && payload.contains("error")) {
      doc["error"] = payload["error"];
    } else if (payload.is_object() && payload.contains("result")) {
      doc["result"] = payload["result"];
    } else {
      doc["result"] = payload;
    }
    return canonical_dump(doc);
  };

  if (msg.kind == MessageKind::Request && msg.method && *msg.method == kToolCallMethod) {
    ensure_session(session_id);
    try {
      FenceOutcome outcome = handle_call(session_id, msg);
      if (outcome.raw_passthrough) return *outcome.raw_passthrough;
      return build_response(outcome.response);
    } catch (const Error& e) {
      int64_t code = -32000;
      switch (e.code()) {
        case Errc::MissingToolName: code = -32602; break;
        case Errc::StorageFailure: code = -32002; break;
        case Errc::UpstreamFailure: code = -32001; break;
        default: break;
      }
      return build_response(error_payload(code, e.what(), Json()));
    }
  }

  // A tools/call without an id cannot be journaled against a position or
  // answered with a blocked error, so it is dropped rather than letting an
  // irreversible effect slip past the fence.
  if (msg.kind == MessageKind::Notification && msg.method && *msg.method == kToolCallMethod) {
    return "";
  }

  // Everything that is not a tool call is forwarded verbatim (canonicalized).
  std::string upstream = router_.default_upstream();
  try {
    if (msg.kind == MessageKind::Notification) {
      router_.forward_notification(upstream, encode_message(msg));
      return "";
    }
    return router_.forward(upstream, encode_message(msg));
  } catch (const Error& e) {
    if (msg.kind == MessageKind::Notification) return "";
    return build_response(error_payload(-32001, e.what(), Json()));
  }
}

SessionState Fence::session_snapshot(const std::string& session_id) const {
  const SessionEntry* session = find_entry(session_id);
  if (!session) throw Error(Errc::UnknownSession, "no session '" + session_id + "'");
  std::lock_guard<std::mutex> lock(session->mutex);
  return session->state;
}

std::vector<std::string> Fence::session_ids() const {
  std::lock_guard<std::mutex> lock(sessions_mutex_);
  std::vector<std::string> ids;
  for (const auto& [id, _] : sessions_) ids.push_back(id);
  return ids;
}

std::vector<OutcomeEvent> Fence::outcome_log(const std::string& session_id) const {
  const SessionEntry* session = find_entry(session_id);
  if (!session) throw Error(Errc::UnknownSession, "no session '" + session_id + "'");
  std::lock_guard<std::mutex> lock(session->mutex);
  return session->outcomes;
}

Json Fence::stats() const {
  std::vector<std::string> ids = session_ids();
  Json sessions = Json::object();
  for (const auto& id : ids) {
    const SessionEntry* session = find_entry(id);
    if (!session) continue;
    std::lock_guard<std::mutex> lock(session->mutex);
    Json counts = Json::object();
    counts["Forwarded"] = 0;
    counts["Replayed"] = 0;
    counts["BlockedForkRequired"] = 0;
    counts["BlockedCredentialReuse"] = 0;
    for (const auto& event : session->outcomes) {
      auto key = fence_outcome_name(event.kind);
      counts[key] = counts[key].get<int>() + 1;
    }
    Json doc = Json::object();
    doc["outcomes"] = counts;
    doc["implicit_restores"] = session->implicit_restores;
    doc["current_branch"] = session->state.current_branch_id;
    doc["next_seq_index"] = session->state.next_seq_index;
    doc["pending_fork"] = session->state.pending_fork.has_value();
    sessions[id] = doc;
  }
  return Json{{"sessions", sessions}};
}

}  // namespace acrfence
