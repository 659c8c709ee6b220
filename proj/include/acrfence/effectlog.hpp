#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "acrfence/policy.hpp"
#include "acrfence/protocol.hpp"
#include "acrfence/value.hpp"

namespace acrfence {

enum class Outcome { Succeeded, Failed, Unknown };

const char* outcome_name(Outcome outcome);
Outcome outcome_from_name(const std::string& name);

/// One journaled irreversible effect. Records are append-only: a pending
/// record (outcome Unknown) is written before the call is forwarded, then
/// finalized with the recorded response. Never mutated after finalize.
struct EffectRecord {
  uint64_t record_id = 0;
  std::string session_id;
  std::string branch_id;
  std::optional<std::string> parent_branch_id;
  uint64_t seq_index = 0;
  std::string tool_name;
  Json arguments = Json::object();
  Json env_context = Json::object();
  Json response;  // null until finalized
  Outcome outcome = Outcome::Unknown;
  std::vector<std::string> consumed_credentials;  // digests, attributed at mark_consumed
  bool irreversible = true;
};

/// Raw credential extracted from call arguments, paired with the argument
/// path it came from. Raw tokens never reach disk; only digests do.
struct CredentialToken {
  std::string token;
  std::string source_field;
};

struct ConsumptionEntry {
  std::string digest;
  std::string source_field;
  uint64_t consumed_by = 0;  // record_id
  std::string consumed_at;
};

/// A blocked attempt to reuse a consumed credential, journaled for audit.
struct ReuseAttempt {
  std::string digest;
  std::string session_id;
  std::string branch_id;
  uint64_t seq_index = 0;
  std::string tool_name;
  std::string attempted_at;
};

/// Append-only line sink behind the journal. The file-backed implementation
/// fsyncs every line; tests substitute fault-injecting or in-memory sinks.
class JournalStorage {
public:
  virtual ~JournalStorage() = default;
  virtual void append_line(const std::string& line) = 0;  // throws Error{StorageFailure}
  virtual std::vector<std::string> read_all() = 0;
};

class FileJournalStorage : public JournalStorage {
public:
  explicit FileJournalStorage(std::filesystem::path path);
  ~FileJournalStorage() override;

  void append_line(const std::string& line) override;
  std::vector<std::string> read_all() override;

private:
  std::filesystem::path path_;
  int fd_ = -1;
};

class MemoryJournalStorage : public JournalStorage {
public:
  void append_line(const std::string& line) override { lines_.push_back(line); }
  std::vector<std::string> read_all() override { return lines_; }

private:
  std::vector<std::string> lines_;
};

/// Durable journal of irreversible tool effects plus the consumed-credential
/// registry. Appends are serialized; queries are safe alongside them.
class EffectLog {
public:
  explicit EffectLog(const std::filesystem::path& journal_path);
  explicit EffectLog(std::unique_ptr<JournalStorage> storage);

  /// Write-ahead: persists a record with outcome Unknown and returns its id.
  /// Must be called before the call is forwarded upstream.
  uint64_t append_pending(const ToolCall& call, const ToolPolicy& policy, const Json& env_context,
                          std::optional<std::string> parent_branch_id = std::nullopt);

  void finalize(uint64_t record_id, const Json& response, Outcome outcome);

  /// Record at the same (seq_index, tool_name) from the nearest branch in
  /// `ancestry` (most-derived first) that has one; nullopt when no ancestor
  /// journaled that position.
  std::optional<EffectRecord> find_candidate(const std::string& session_id,
                                             std::span<const std::string> ancestry,
                                             uint64_t seq_index,
                                             const std::string& tool_name) const;

  /// Like find_candidate but ignores the tool name: the record occupying the
  /// position, if any. The fence uses this so tool-identity mismatches
  /// classify as divergence instead of fresh calls.
  std::optional<EffectRecord> find_at_position(const std::string& session_id,
                                               std::span<const std::string> ancestry,
                                               uint64_t seq_index) const;

  void mark_consumed(const std::vector<CredentialToken>& tokens, uint64_t record_id);
  bool is_consumed(const std::string& token) const;
  std::optional<ConsumptionEntry> consumption_of(const std::string& token) const;

  /// Journals a blocked reuse of a consumed credential (audit trail only).
  void record_reuse_attempt(const std::string& token, const ToolCall& call);

  /// Highest journaled seq_index for the session across `ancestry`.
  std::optional<uint64_t> max_journaled_seq(const std::string& session_id,
                                            std::span<const std::string> ancestry) const;

  std::optional<EffectRecord> record(uint64_t record_id) const;
  std::vector<EffectRecord> records() const;
  std::vector<ConsumptionEntry> consumptions() const;
  std::vector<ReuseAttempt> reuse_attempts() const;
  size_t size() const;

  static std::string credential_digest(const std::string& token);

private:
  void load();
  const EffectRecord* record_locked(uint64_t record_id) const;

  mutable std::mutex mutex_;
  std::unique_ptr<JournalStorage> storage_;
  std::vector<EffectRecord> records_;
  std::map<std::string, size_t> by_identity_;        // "session\0branch\0seq" -> index
  std::map<uint64_t, size_t> by_record_id_;
  std::map<std::string, ConsumptionEntry> consumed_;  // digest -> entry
  std::vector<ReuseAttempt> reuse_attempts_;
  uint64_t next_record_id_ = 1;
};

}  // namespace acrfence
