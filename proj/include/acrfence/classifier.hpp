#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "acrfence/effectlog.hpp"
#include "acrfence/policy.hpp"
#include "acrfence/protocol.hpp"
#include "acrfence/value.hpp"

namespace acrfence {

/// Per-leaf evidence for a verdict. The five lists partition the union of
/// both argument trees' leaf paths.
struct FieldDiff {
  struct Changed {
    std::string path;
    Json old_value;
    Json new_value;
  };

  std::vector<std::string> equal_intent;    // present in both, equal, intent-classified
  std::vector<Changed> changed_intent;      // present in both, different, intent-classified
  std::vector<std::string> changed_volatile;  // volatile-classified, equal or not
  std::vector<std::string> added;           // only in the new tree
  std::vector<std::string> removed;         // only in the old tree

  Json to_json() const;
};

enum class VerdictKind { ReplayEquivalent, Divergent, CredentialReuse, FreshCall };

const char* verdict_kind_name(VerdictKind kind);
std::optional<VerdictKind> verdict_kind_from_name(const std::string& name);

struct Verdict {
  VerdictKind kind = VerdictKind::FreshCall;
  std::optional<uint64_t> candidate;  // record_id
  std::optional<FieldDiff> diff;
  std::vector<std::string> reused_tokens;  // source field paths
  std::string rationale;

  Json to_json() const;
};

using ConsumedCheck = std::function<bool(const std::string&)>;

/// How a leaf path classifies under a policy.
enum class FieldClass { Intent, Volatile };
FieldClass classify_field(const std::string& leaf_path, const ToolPolicy& policy);

/// Non-empty string leaves at/below the policy's credential paths.
std::vector<CredentialToken> extract_credential_tokens(const Json& arguments,
                                                       const ToolPolicy& policy);

/// Classify every leaf path of both trees. Scalar comparison is exact for
/// strings/bools; numbers compare by canonical numeric value (500 == 500.0).
FieldDiff diff_arguments(const Json& old_args, const Json& new_args, const ToolPolicy& policy);

/// Deterministic rule engine. Precedence: CredentialReuse, then FreshCall
/// (no candidate), then Divergent (tool mismatch, changed intent, or an
/// added/removed intent-classified field), else ReplayEquivalent.
Verdict classify(const ToolCall& call, const std::optional<EffectRecord>& candidate,
                 const ToolPolicy& policy, const ConsumedCheck& consumed_check);

struct AnalyzerEndpoint {
  std::string url;
  int timeout_ms = 5000;
  std::string auth_header;   // optional header name
  std::string auth_env;      // environment variable holding the header value
};

/// Ask an external analyzer to compare the call against its journaled
/// candidate. Any transport failure or unparseable reply falls back to the
/// rule engine; the fallback is noted in the verdict rationale.
Verdict analyze_external(const ToolCall& call, const EffectRecord& candidate,
                         const ToolPolicy& policy, const AnalyzerEndpoint& endpoint,
                         const ConsumedCheck& consumed_check);

}  // namespace acrfence
