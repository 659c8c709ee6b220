#pragma once

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "acrfence/classifier.hpp"
#include "acrfence/effectlog.hpp"
#include "acrfence/policy.hpp"
#include "acrfence/protocol.hpp"

namespace acrfence {

struct BranchEntry {
  std::string branch_id;
  uint64_t forked_from_seq = 0;
  std::optional<std::string> parent_branch_id;
  bool from_restore = false;  // minted by register_restore rather than approve_fork
};

struct PendingFork {
  ToolCall blocked_call;
  Verdict verdict;
  std::string fork_token;  // one-time, bound to the blocked call
};

struct SessionState {
  std::string session_id;
  std::string current_branch_id;
  std::vector<BranchEntry> branch_lineage;  // append order; rooted at the initial branch
  uint64_t next_seq_index = 0;
  std::optional<uint64_t> restore_frontier;  // present iff a restore is active and not yet passed
  std::optional<PendingFork> pending_fork;
  uint64_t restore_count = 0;

  // data-path restore heuristic: integer wire ids seen per tool call
  std::map<int64_t, uint64_t> wire_seq;
  std::optional<int64_t> max_int_wire_id;

  /// Branch ids from the current branch back to the root, most-derived first.
  std::vector<std::string> ancestry() const;
  const BranchEntry* branch(const std::string& branch_id) const;
};

enum class FenceOutcomeKind { Forwarded, Replayed, BlockedForkRequired, BlockedCredentialReuse };

const char* fence_outcome_name(FenceOutcomeKind kind);

struct FenceOutcome {
  FenceOutcomeKind kind = FenceOutcomeKind::Forwarded;
  Json response;  // {"result": ...} or {"error": {...}}
  std::optional<uint64_t> record_id;
  std::optional<std::string> raw_passthrough;  // reversible path: upstream bytes verbatim
  std::string note;  // side channel: staleness, fallbacks, implicit-restore warnings
};

/// Routes frames to upstream tool servers. Implementations own transport
/// details; forward() throws Error{UpstreamFailure} on transport failure.
class UpstreamRouter {
public:
  virtual ~UpstreamRouter() = default;
  virtual std::string route_for_tool(const std::string& tool_name) const = 0;
  virtual std::string default_upstream() const = 0;
  virtual std::string forward(const std::string& upstream_name, const std::string& frame) = 0;
  /// Fire-and-forget delivery; no response is awaited.
  virtual void forward_notification(const std::string& upstream_name, const std::string& frame) {
    forward(upstream_name, frame);
  }
};

struct FenceConfig {
  std::string proxy_id = "acrfence";
  std::string initial_branch_id = "b0";
  bool heuristic_restore_detection = true;
  bool record_outcome_log = true;
  // Negative-control switch for the scenario suite: disables replay so the
  // suite can prove its assertions catch a broken fence. Never set in serve.
  bool unsafe_disable_replay = false;
  std::optional<AnalyzerEndpoint> analyzer;
};

struct OutcomeEvent {
  FenceOutcomeKind kind;
  std::string branch_id;
  uint64_t seq_index = 0;
  std::string tool_name;
  std::optional<uint64_t> record_id;
  std::string response_canonical;  // canonical payload bytes, for replay-fidelity checks
};

/// Session-aware enforcement core: forwards agent traffic, journals
/// irreversible calls write-ahead, detects the restore path, and enforces
/// replay / fork / credential-reuse outcomes.
class Fence {
public:
  Fence(EffectLog& log, PolicySet policies, UpstreamRouter& router, FenceConfig config = {});

  void ensure_session(const std::string& session_id);

  /// Marks a restore: resets the session to checkpoint_seq on a fresh
  /// internal branch whose lineage includes everything journaled so far.
  void register_restore(const std::string& session_id, uint64_t checkpoint_seq);

  /// Full enforcement pipeline for one tools/call request.
  FenceOutcome handle_call(const std::string& session_id, const Message& msg);

  /// Resolves a pending divergence block. The blocked call is not
  /// auto-executed; the agent must re-issue it on the new branch.
  std::vector<BranchEntry> approve_fork(const std::string& session_id,
                                        const std::string& fork_token,
                                        const std::string& new_branch_id);

  /// One data-path frame in, one frame out (empty for notifications).
  /// tools/call goes through handle_call; everything else passes through.
  std::string handle_data_frame(const std::string& session_id, const std::string& frame);

  SessionState session_snapshot(const std::string& session_id) const;
  std::vector<std::string> session_ids() const;
  std::vector<OutcomeEvent> outcome_log(const std::string& session_id) const;
  Json stats() const;

  EffectLog& log() { return log_; }
  const PolicySet& policies() const { return policies_; }
  const FenceConfig& config() const { return config_; }

private:
  struct SessionEntry {
    mutable std::mutex mutex;
    SessionState state;
    std::vector<OutcomeEvent> outcomes;
    uint64_t implicit_restores = 0;
  };

  SessionEntry& entry(const std::string& session_id);
  const SessionEntry* find_entry(const std::string& session_id) const;
  void register_restore_locked(SessionEntry& session, uint64_t checkpoint_seq);
  FenceOutcome dispatch_call(SessionEntry& session, const Message& msg);
  FenceOutcome record_outcome(SessionEntry& session, const ToolCall* call, FenceOutcome outcome);
  FenceOutcome block_fork_required(SessionEntry& session, const ToolCall& call, Verdict verdict,
                                   const std::optional<EffectRecord>& prior, bool mint_token,
                                   const std::string& note);

  EffectLog& log_;
  PolicySet policies_;
  UpstreamRouter& router_;
  FenceConfig config_;

  mutable std::mutex sessions_mutex_;
  std::map<std::string, std::unique_ptr<SessionEntry>> sessions_;
};

std::string make_fork_token();

}  // namespace acrfence
