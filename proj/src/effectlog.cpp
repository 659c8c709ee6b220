#include "acrfence/effectlog.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cerrno>
#include <cstring>

#include "acrfence/errors.hpp"
#include "acrfence/sha256.hpp"

namespace acrfence {

const char* outcome_name(Outcome outcome) {
  switch (outcome) {
    case Outcome::Succeeded: return "succeeded";
    case Outcome::Failed: return "failed";
    case Outcome::Unknown: return "unknown";
  }
  return "unknown";
}

Outcome outcome_from_name(const std::string& name) {
  if (name == "succeeded") return Outcome::Succeeded;
  if (name == "failed") return Outcome::Failed;
  if (name == "unknown") return Outcome::Unknown;
  throw Error(Errc::StorageFailure, "unknown outcome value: " + name);
}

FileJournalStorage::FileJournalStorage(std::filesystem::path path) : path_(std::move(path)) {
  fd_ = ::open(path_.c_str(), O_WRONLY | O_CREAT | O_APPEND, 0644);
  if (fd_ < 0) {
    throw Error(Errc::StorageFailure,
                "cannot open journal " + path_.string() + ": " + std::strerror(errno));
  }
}

FileJournalStorage::~FileJournalStorage() {
  if (fd_ >= 0) ::close(fd_);
}

void FileJournalStorage::append_line(const std::string& line) {
  std::string buf = line;
  buf.push_back('\n');
  size_t written = 0;
  while (written < buf.size()) {
    ssize_t n = ::write(fd_, buf.data() + written, buf.size() - written);
    if (n < 0) {
      if (errno == EINTR) continue;
      throw Error(Errc::StorageFailure, "journal write failed: " + std::string(std::strerror(errno)));
    }
    written += static_cast<size_t>(n);
  }
  if (::fsync(fd_) != 0) {
    throw Error(Errc::StorageFailure, "journal fsync failed: " + std::string(std::strerror(errno)));
  }
}

std::vector<std::string> FileJournalStorage::read_all() {
  std::vector<std::string> lines;
  int fd = ::open(path_.c_str(), O_RDONLY);
  if (fd < 0) return lines;  // fresh journal
  std::string content;
  char buf[8192];
  ssize_t n;
  while ((n = ::read(fd, buf, sizeof(buf))) > 0) content.append(buf, static_cast<size_t>(n));
  ::close(fd);
  size_t start = 0;
  while (start < content.size()) {
    size_t end = content.find('\n', start);
    if (end == std::string::npos) {
      lines.push_back(content.substr(start));  // partial trailing line, handled by loader
      break;
    }
    lines.push_back(content.substr(start, end - start));
    start = end + 1;
  }
  return lines;
}

EffectLog::EffectLog(const std::filesystem::path& journal_path)
    : EffectLog(std::make_unique<FileJournalStorage>(journal_path)) {}

EffectLog::EffectLog(std::unique_ptr<JournalStorage> storage) : storage_(std::move(storage)) {
  load();
}

namespace {

std::string identity_key(const std::string& session_id, const std::string& branch_id,
                         uint64_t seq_index) {
  return session_id + '\0' + branch_id + '\0' + std::to_string(seq_index);
}

Json effect_line(const EffectRecord& rec) {
  Json doc = Json::object();
  doc["type"] = "effect";
  doc["record_id"] = rec.record_id;
  doc["session_id"] = rec.session_id;
  doc["branch_id"] = rec.branch_id;
  if (rec.parent_branch_id) doc["parent_branch_id"] = *rec.parent_branch_id;
  doc["seq_index"] = rec.seq_index;
  doc["tool_name"] = rec.tool_name;
  doc["arguments"] = rec.arguments;
  doc["env_context"] = rec.env_context;
  doc["outcome"] = outcome_name(rec.outcome);
  doc["irreversible"] = rec.irreversible;
  return doc;
}

}  // namespace

void EffectLog::load() {
  auto lines = storage_->read_all();
  for (size_t i = 0; i < lines.size(); ++i) {
    if (lines[i].empty()) continue;
    Json doc;
    try {
      doc = parse_strict(lines[i]);
    } catch (const Error&) {
      if (i + 1 == lines.size()) break;  // torn trailing write from a crash
      throw Error(Errc::StorageFailure, "corrupt journal line " + std::to_string(i + 1));
    }
    const std::string type = doc.value("type", "");
    if (type == "effect") {
      EffectRecord rec;
      rec.record_id = doc.at("record_id").get<uint64_t>();
      rec.session_id = doc.at("session_id").get<std::string>();
      rec.branch_id = doc.at("branch_id").get<std::string>();
      if (doc.contains("parent_branch_id")) {
        rec.parent_branch_id = doc["parent_branch_id"].get<std::string>();
      }
      rec.seq_index = doc.at("seq_index").get<uint64_t>();
      rec.tool_name = doc.at("tool_name").get<std::string>();
      rec.arguments = doc.at("arguments");
      rec.env_context = doc.at("env_context");
      rec.outcome = outcome_from_name(doc.at("outcome").get<std::string>());
      rec.irreversible = doc.at("irreversible").get<bool>();
      std::string key = identity_key(rec.session_id, rec.branch_id, rec.seq_index);
      if (by_identity_.count(key)) {
        throw Error(Errc::StorageFailure, "journal violates identity uniqueness: " + key);
      }
      next_record_id_ = std::max(next_record_id_, rec.record_id + 1);
      by_identity_[key] = records_.size();
      by_record_id_[rec.record_id] = records_.size();
      records_.push_back(std::move(rec));
    } else if (type == "finalize") {
      uint64_t id = doc.at("record_id").get<uint64_t>();
      auto it = by_record_id_.find(id);
      if (it == by_record_id_.end()) {
        throw Error(Errc::StorageFailure, "finalize for unknown record " + std::to_string(id));
      }
      EffectRecord& rec = records_[it->second];
      rec.response = doc.at("response");
      rec.outcome = outcome_from_name(doc.at("outcome").get<std::string>());
    } else if (type == "credential") {
      ConsumptionEntry entry;
      entry.digest = doc.at("digest").get<std::string>();
      entry.source_field = doc.at("source_field").get<std::string>();
      entry.consumed_by = doc.at("consumed_by").get<uint64_t>();
      entry.consumed_at = doc.at("consumed_at").get<std::string>();
      if (auto rec_it = by_record_id_.find(entry.consumed_by); rec_it != by_record_id_.end()) {
        records_[rec_it->second].consumed_credentials.push_back(entry.digest);
      }
      consumed_.emplace(entry.digest, std::move(entry));
    } else if (type == "reuse_attempt") {
      ReuseAttempt attempt;
      attempt.digest = doc.at("digest").get<std::string>();
      attempt.session_id = doc.at("session_id").get<std::string>();
      attempt.branch_id = doc.at("branch_id").get<std::string>();
      attempt.seq_index = doc.at("seq_index").get<uint64_t>();
      attempt.tool_name = doc.at("tool_name").get<std::string>();
      attempt.attempted_at = doc.at("attempted_at").get<std::string>();
      reuse_attempts_.push_back(std::move(attempt));
    } else {
      throw Error(Errc::StorageFailure, "unknown journal line type: " + type);
    }
  }
}

uint64_t EffectLog::append_pending(const ToolCall& call, const ToolPolicy& policy,
                                   const Json& env_context,
                                   std::optional<std::string> parent_branch_id) {
  std::lock_guard<std::mutex> lock(mutex_);
  if (!policy.irreversible) {
    throw Error(Errc::StorageFailure, "refusing to journal a reversible tool: " + call.tool_name);
  }
  std::string key = identity_key(call.session_id, call.branch_id, call.seq_index);
  if (by_identity_.count(key)) {
    throw Error(Errc::DuplicateKey, "record already journaled for (" + call.session_id + ", " +
                                        call.branch_id + ", " + std::to_string(call.seq_index) + ")");
  }

  EffectRecord rec;
  rec.record_id = next_record_id_;
  rec.session_id = call.session_id;
  rec.branch_id = call.branch_id;
  rec.seq_index = call.seq_index;
  rec.tool_name = call.tool_name;
  rec.arguments = redact_credentials(call.arguments, policy);  // raw tokens never reach disk
  rec.env_context = env_context;
  rec.outcome = Outcome::Unknown;
  rec.irreversible = true;
  rec.parent_branch_id = std::move(parent_branch_id);

  storage_->append_line(canonical_dump(effect_line(rec)));  // durable before forwarding

  next_record_id_++;
  by_identity_[key] = records_.size();
  by_record_id_[rec.record_id] = records_.size();
  records_.push_back(std::move(rec));
  return next_record_id_ - 1;
}

void EffectLog::finalize(uint64_t record_id, const Json& response, Outcome outcome) {
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = by_record_id_.find(record_id);
  if (it == by_record_id_.end()) {
    throw Error(Errc::NotFound, "no record " + std::to_string(record_id));
  }
  EffectRecord& rec = records_[it->second];
  if (rec.outcome != Outcome::Unknown) {
    throw Error(Errc::AlreadyFinalized, "record " + std::to_string(record_id) + " already finalized");
  }
  Json doc = Json::object();
  doc["type"] = "finalize";
  doc["record_id"] = record_id;
  doc["response"] = response;
  doc["outcome"] = outcome_name(outcome);
  storage_->append_line(canonical_dump(doc));
  rec.response = response;
  rec.outcome = outcome;
}

std::optional<EffectRecord> EffectLog::find_candidate(const std::string& session_id,
                                                      std::span<const std::string> ancestry,
                                                      uint64_t seq_index,
                                                      const std::string& tool_name) const {
  std::lock_guard<std::mutex> lock(mutex_);
  for (const auto& branch : ancestry) {
    auto it = by_identity_.find(identity_key(session_id, branch, seq_index));
    if (it != by_identity_.end() && records_[it->second].tool_name == tool_name) {
      return records_[it->second];
    }
  }
  return std::nullopt;
}

std::optional<EffectRecord> EffectLog::find_at_position(const std::string& session_id,
                                                        std::span<const std::string> ancestry,
                                                        uint64_t seq_index) const {
  std::lock_guard<std::mutex> lock(mutex_);
  for (const auto& branch : ancestry) {
    auto it = by_identity_.find(identity_key(session_id, branch, seq_index));
    if (it != by_identity_.end()) return records_[it->second];
  }
  return std::nullopt;
}

void EffectLog::mark_consumed(const std::vector<CredentialToken>& tokens, uint64_t record_id) {
  std::lock_guard<std::mutex> lock(mutex_);
  if (!record_locked(record_id)) {
    throw Error(Errc::NotFound, "no record " + std::to_string(record_id));
  }
  for (const auto& token : tokens) {
    if (token.token.empty()) continue;
    std::string digest = credential_digest(token.token);
    auto existing = consumed_.find(digest);
    if (existing != consumed_.end()) continue;  // at most one registry entry per digest

    ConsumptionEntry entry;
    entry.digest = digest;
    entry.source_field = token.source_field;
    entry.consumed_by = record_id;
    entry.consumed_at = now_iso_timestamp_utc();

    Json doc = Json::object();
    doc["type"] = "credential";
    doc["digest"] = entry.digest;
    doc["source_field"] = entry.source_field;
    doc["consumed_by"] = entry.consumed_by;
    doc["consumed_at"] = entry.consumed_at;
    storage_->append_line(canonical_dump(doc));

    auto index_it = by_record_id_.find(record_id);
    records_[index_it->second].consumed_credentials.push_back(digest);
    consumed_.emplace(digest, std::move(entry));
  }
}

bool EffectLog::is_consumed(const std::string& token) const {
  if (token.empty()) return false;
  std::lock_guard<std::mutex> lock(mutex_);
  return consumed_.count(credential_digest(token)) > 0;
}

std::optional<ConsumptionEntry> EffectLog::consumption_of(const std::string& token) const {
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = consumed_.find(credential_digest(token));
  if (it == consumed_.end()) return std::nullopt;
  return it->second;
}

void EffectLog::record_reuse_attempt(const std::string& token, const ToolCall& call) {
  std::lock_guard<std::mutex> lock(mutex_);
  ReuseAttempt attempt;
  attempt.digest = credential_digest(token);
  attempt.session_id = call.session_id;
  attempt.branch_id = call.branch_id;
  attempt.seq_index = call.seq_index;
  attempt.tool_name = call.tool_name;
  attempt.attempted_at = now_iso_timestamp_utc();

  Json doc = Json::object();
  doc["type"] = "reuse_attempt";
  doc["digest"] = attempt.digest;
  doc["session_id"] = attempt.session_id;
  doc["branch_id"] = attempt.branch_id;
  doc["seq_index"] = attempt.seq_index;
  doc["tool_name"] = attempt.tool_name;
  doc["attempted_at"] = attempt.attempted_at;
  storage_->append_line(canonical_dump(doc));
  reuse_attempts_.push_back(std::move(attempt));
}

std::optional<uint64_t> EffectLog::max_journaled_seq(const std::string& session_id,
                                                     std::span<const std::string> ancestry) const {
  std::lock_guard<std::mutex> lock(mutex_);
  std::optional<uint64_t> max_seq;
  for (const auto& rec : records_) {
    if (rec.session_id != session_id) continue;
    for (const auto& branch : ancestry) {
      if (rec.branch_id == branch) {
        if (!max_seq || rec.seq_index > *max_seq) max_seq = rec.seq_index;
        break;
      }
    }
  }
  return max_seq;
}

const EffectRecord* EffectLog::record_locked(uint64_t record_id) const {
  auto it = by_record_id_.find(record_id);
  return it == by_record_id_.end() ? nullptr : &records_[it->second];
}

std::optional<EffectRecord> EffectLog::record(uint64_t record_id) const {
  std::lock_guard<std::mutex> lock(mutex_);
  const EffectRecord* rec = record_locked(record_id);
  if (!rec) return std::nullopt;
  return *rec;
}

std::vector<EffectRecord> EffectLog::records() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return records_;
}

std::vector<ConsumptionEntry> EffectLog::consumptions() const {
  std::lock_guard<std::mutex> lock(mutex_);
  std::vector<ConsumptionEntry> out;
  out.reserve(consumed_.size());
  for (const auto& [digest, entry] : consumed_) out.push_back(entry);
  return out;
}

std::vector<ReuseAttempt> EffectLog::reuse_attempts() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return reuse_attempts_;
}

size_t EffectLog::size() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return records_.size();
}

std::string EffectLog::credential_digest(const std::string& token) { return sha256_hex(token); }

}  // namespace acrfence
