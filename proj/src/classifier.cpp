#include "acrfence/classifier.hpp"

#include <algorithm>
#include <cstdlib>
#include <set>
#include <sstream>

#include "httplib.h"

#include "acrfence/errors.hpp"

namespace acrfence {

const char* verdict_kind_name(VerdictKind kind) {
  switch (kind) {
    case VerdictKind::ReplayEquivalent: return "ReplayEquivalent";
    case VerdictKind::Divergent: return "Divergent";
    case VerdictKind::CredentialReuse: return "CredentialReuse";
    case VerdictKind::FreshCall: return "FreshCall";
  }
  return "FreshCall";
}

std::optional<VerdictKind> verdict_kind_from_name(const std::string& name) {
  if (name == "ReplayEquivalent") return VerdictKind::ReplayEquivalent;
  if (name == "Divergent") return VerdictKind::Divergent;
  if (name == "CredentialReuse") return VerdictKind::CredentialReuse;
  if (name == "FreshCall") return VerdictKind::FreshCall;
  return std::nullopt;
}

Json FieldDiff::to_json() const {
  Json doc = Json::object();
  doc["equal_intent"] = equal_intent;
  Json changed = Json::array();
  for (const auto& c : changed_intent) {
    changed.push_back(Json{{"path", c.path}, {"old", c.old_value}, {"new", c.new_value}});
  }
  doc["changed_intent"] = changed;
  doc["changed_volatile"] = changed_volatile;
  doc["added"] = added;
  doc["removed"] = removed;
  return doc;
}

Json Verdict::to_json() const {
  Json doc = Json::object();
  doc["kind"] = verdict_kind_name(kind);
  if (candidate) doc["candidate"] = *candidate;
  if (diff) doc["diff"] = diff->to_json();
  if (!reused_tokens.empty()) doc["reused_tokens"] = reused_tokens;
  doc["rationale"] = rationale;
  return doc;
}

namespace {

bool any_path_matches(const std::vector<std::string>& policy_paths,
                      const std::vector<std::string>& leaf_segments) {
  return std::any_of(policy_paths.begin(), policy_paths.end(),
                     [&](const std::string& p) { return path_covers(p, leaf_segments); });
}

}  // namespace

FieldClass classify_field(const std::string& leaf_path, const ToolPolicy& policy) {
  auto segments = split_path(leaf_path);
  if (any_path_matches(policy.intent_fields, segments)) return FieldClass::Intent;
  if (any_path_matches(policy.volatile_fields, segments)) return FieldClass::Volatile;
  return policy.unknown_field_treatment == UnknownFieldTreatment::AsVolatile ? FieldClass::Volatile
                                                                             : FieldClass::Intent;
}

std::vector<CredentialToken> extract_credential_tokens(const Json& arguments,
                                                       const ToolPolicy& policy) {
  std::vector<CredentialToken> tokens;
  std::set<std::string> seen;
  for (const auto& leaf : leaf_paths(arguments)) {
    auto segments = split_path(leaf);
    if (!any_path_matches(policy.credential_fields, segments)) continue;
    const Json* value = find_at_path(arguments, segments);
    if (!value || !value->is_string()) continue;
    std::string token = value->get<std::string>();
    if (token.empty()) continue;  // extraction never yields empty tokens
    if (seen.insert(token + '\0' + leaf).second) {
      tokens.push_back(CredentialToken{std::move(token), leaf});
    }
  }
  return tokens;
}

FieldDiff diff_arguments(const Json& old_args_in, const Json& new_args_in,
                         const ToolPolicy& policy) {
  // Journaled arguments carry credentials in digest form; normalize both
  // sides so equal raw tokens compare equal and none leak into the diff.
  Json old_args = redact_credentials(old_args_in, policy);
  Json new_args = redact_credentials(new_args_in, policy);
  auto old_leaves = leaf_paths(old_args);
  auto new_leaves = leaf_paths(new_args);
  std::set<std::string> old_set(old_leaves.begin(), old_leaves.end());
  std::set<std::string> new_set(new_leaves.begin(), new_leaves.end());

  std::set<std::string> all_paths = old_set;
  all_paths.insert(new_set.begin(), new_set.end());

  FieldDiff diff;
  for (const auto& path : all_paths) {
    bool in_old = old_set.count(path) > 0;
    bool in_new = new_set.count(path) > 0;
    if (in_old && !in_new) {
      diff.removed.push_back(path);
      continue;
    }
    if (!in_old && in_new) {
      diff.added.push_back(path);
      continue;
    }
    auto segments = split_path(path);
    const Json* old_value = find_at_path(old_args, segments);
    const Json* new_value = find_at_path(new_args, segments);
    // nlohmann == compares numbers by value across integer/float types
    bool equal = (*old_value == *new_value);
    if (classify_field(path, policy) == FieldClass::Volatile) {
      diff.changed_volatile.push_back(path);
    } else if (equal) {
      diff.equal_intent.push_back(path);
    } else {
      diff.changed_intent.push_back(FieldDiff::Changed{path, *old_value, *new_value});
    }
  }
  return diff;
}

Verdict classify(const ToolCall& call, const std::optional<EffectRecord>& candidate,
                 const ToolPolicy& policy, const ConsumedCheck& consumed_check) {
  if (policy.tool_name != call.tool_name) {
    throw Error(Errc::PolicyMissing, "policy is for tool '" + policy.tool_name +
                                         "', call is for '" + call.tool_name + "'");
  }

  // Consumed credentials win over everything else; the caller must learn of
  // the reuse before any other disposition is considered.
  Verdict verdict;
  for (const auto& token : extract_credential_tokens(call.arguments, policy)) {
    if (consumed_check && consumed_check(token.token)) {
      verdict.reused_tokens.push_back(token.source_field);
    }
  }
  if (!verdict.reused_tokens.empty()) {
    verdict.kind = VerdictKind::CredentialReuse;
    if (candidate) verdict.candidate = candidate->record_id;
    std::ostringstream why;
    why << "credential at " << verdict.reused_tokens.front();
    if (verdict.reused_tokens.size() > 1) {
      why << " (and " << verdict.reused_tokens.size() - 1 << " more)";
    }
    why << " was already consumed";
    verdict.rationale = why.str();
    return verdict;
  }

  if (!candidate) {
    verdict.kind = VerdictKind::FreshCall;
    verdict.rationale = "no journaled record at this position";
    return verdict;
  }

  verdict.candidate = candidate->record_id;
  if (candidate->tool_name != call.tool_name) {
    verdict.kind = VerdictKind::Divergent;
    verdict.rationale = "tool mismatch at journaled position: journaled '" + candidate->tool_name +
                        "', incoming '" + call.tool_name + "'";
    return verdict;
  }

  FieldDiff diff = diff_arguments(candidate->arguments, call.arguments, policy);
  bool intent_changed = !diff.changed_intent.empty();
  std::vector<std::string> structural;
  for (const auto& path : diff.added) {
    if (classify_field(path, policy) == FieldClass::Intent) structural.push_back("+" + path);
  }
  for (const auto& path : diff.removed) {
    if (classify_field(path, policy) == FieldClass::Intent) structural.push_back("-" + path);
  }

  if (intent_changed || !structural.empty()) {
    verdict.kind = VerdictKind::Divergent;
    std::ostringstream why;
    why << "intent diverges from record " << candidate->record_id << ":";
    for (const auto& c : diff.changed_intent) {
      why << " " << c.path << " " << canonical_dump(c.old_value) << "->"
          << canonical_dump(c.new_value);
    }
    for (const auto& s : structural) why << " " << s;
    verdict.rationale = why.str();
  } else {
    verdict.kind = VerdictKind::ReplayEquivalent;
    std::ostringstream why;
    why << "matches record " << candidate->record_id;
    if (!diff.changed_volatile.empty()) {
      why << "; only volatile fields differ (" << diff.changed_volatile.size() << " path";
      if (diff.changed_volatile.size() > 1) why << "s";
      why << ")";
    }
    verdict.rationale = why.str();
  }
  verdict.diff = std::move(diff);
  return verdict;
}

namespace {

struct ParsedUrl {
  std::string base;  // scheme://host:port
  std::string path;
};

ParsedUrl parse_url(const std::string& url) {
  auto scheme_end = url.find("://");
  size_t path_start = url.find('/', scheme_end == std::string::npos ? 0 : scheme_end + 3);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

}  // namespace

Verdict analyze_external(const ToolCall& call, const EffectRecord& candidate,
                         const ToolPolicy& policy, const AnalyzerEndpoint& endpoint,
                         const ConsumedCheck& consumed_check) {
  auto fallback = [&](const std::string& reason) {
    Verdict verdict = classify(call, candidate, policy, consumed_check);
    verdict.rationale = "analyzer fallback (" + reason + "); rule engine: " + verdict.rationale;
    return verdict;
  };

  Json request = Json::object();
  request["tool_name"] = call.tool_name;
  request["journaled_arguments"] = candidate.arguments;
  request["new_arguments"] = call.arguments;
  request["hints"] = Json{{"intent_fields", policy.intent_fields},
                          {"volatile_fields", policy.volatile_fields},
                          {"credential_fields", policy.credential_fields}};

  ParsedUrl url = parse_url(endpoint.url);
  httplib::Client client(url.base);
  client.set_connection_timeout(endpoint.timeout_ms / 1000, (endpoint.timeout_ms % 1000) * 1000);
  client.set_read_timeout(endpoint.timeout_ms / 1000, (endpoint.timeout_ms % 1000) * 1000);
  httplib::Headers headers;
  if (!endpoint.auth_header.empty() && !endpoint.auth_env.empty()) {
    if (const char* value = std::getenv(endpoint.auth_env.c_str())) {
      headers.emplace(endpoint.auth_header, value);
    }
  }

  auto response = client.Post(url.path, headers, canonical_dump(request), "application/json");
  if (!response || response->status != 200) {
    return fallback("unreachable");
  }

  Json doc;
  try {
    doc = parse_strict(response->body);
  } catch (const Error&) {
    return fallback("unparseable response");
  }
  if (!doc.is_object() || !doc.contains("kind") || !doc["kind"].is_string()) {
    return fallback("response missing kind");
  }
  auto kind = verdict_kind_from_name(doc["kind"].get<std::string>());
  // The analyzer answers the replay-vs-divergence question only; credential
  // and fresh-call dispositions are deterministic and never delegated.
  if (!kind || (*kind != VerdictKind::ReplayEquivalent && *kind != VerdictKind::Divergent)) {
    return fallback("response kind not recognized");
  }

  Verdict verdict;
  verdict.kind = *kind;
  verdict.candidate = candidate.record_id;
  verdict.rationale = "analyzer: " + doc.value("rationale", std::string("(no rationale)"));
  return verdict;
}

}  // namespace acrfence
