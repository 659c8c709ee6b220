#include "acrfence/policy.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "acrfence/errors.hpp"
#include "acrfence/sha256.hpp"

namespace acrfence {

namespace {

std::vector<std::string> string_list(const Json& doc, const char* key) {
  std::vector<std::string> out;
  auto it = doc.find(key);
  if (it == doc.end()) return out;
  if (!it->is_array()) throw Error(Errc::ConfigInvalid, std::string(key) + " must be a list");
  for (const auto& v : *it) {
    if (!v.is_string()) throw Error(Errc::ConfigInvalid, std::string(key) + " entries must be strings");
    out.push_back(v.get<std::string>());
  }
  return out;
}

void check_disjoint(const ToolPolicy& p) {
  std::set<std::string> intent(p.intent_fields.begin(), p.intent_fields.end());
  for (const auto& path : p.volatile_fields) {
    if (intent.count(path)) {
      throw Error(Errc::ConfigInvalid,
                  "policy for '" + p.tool_name + "': path '" + path +
                      "' is listed as both intent and volatile");
    }
  }
}

}  // namespace

ToolPolicy tool_policy_from_json(const Json& doc) {
  if (!doc.is_object()) throw Error(Errc::ConfigInvalid, "policy entry must be an object");
  ToolPolicy p;
  if (auto it = doc.find("tool_name"); it != doc.end() && it->is_string()) {
    p.tool_name = it->get<std::string>();
  }
  if (auto it = doc.find("irreversible"); it != doc.end()) {
    if (!it->is_boolean()) throw Error(Errc::ConfigInvalid, "irreversible must be a boolean");
    p.irreversible = it->get<bool>();
  }
  p.intent_fields = string_list(doc, "intent_fields");
  p.volatile_fields = string_list(doc, "volatile_fields");
  p.credential_fields = string_list(doc, "credential_fields");
  if (auto it = doc.find("unknown_field_treatment"); it != doc.end()) {
    std::string mode = it->is_string() ? it->get<std::string>() : "";
    if (mode == "intent") {
      p.unknown_field_treatment = UnknownFieldTreatment::AsIntent;
    } else if (mode == "volatile") {
      p.unknown_field_treatment = UnknownFieldTreatment::AsVolatile;
    } else {
      throw Error(Errc::ConfigInvalid, "unknown_field_treatment must be 'intent' or 'volatile'");
    }
  }
  check_disjoint(p);
  return p;
}

Json tool_policy_to_json(const ToolPolicy& policy) {
  Json doc = Json::object();
  doc["tool_name"] = policy.tool_name;
  doc["irreversible"] = policy.irreversible;
  doc["intent_fields"] = policy.intent_fields;
  doc["volatile_fields"] = policy.volatile_fields;
  doc["credential_fields"] = policy.credential_fields;
  doc["unknown_field_treatment"] =
      policy.unknown_field_treatment == UnknownFieldTreatment::AsIntent ? "intent" : "volatile";
  return doc;
}

PolicySet PolicySet::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::ConfigInvalid, "cannot read policy file: " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  Json doc;
  try {
    doc = parse_strict(buffer.str());
  } catch (const Error&) {
    throw Error(Errc::ConfigInvalid, "policy file is not valid JSON: " + path.string());
  }
  return from_json(doc);
}

PolicySet PolicySet::from_json(const Json& doc) {
  if (!doc.is_object()) throw Error(Errc::ConfigInvalid, "policy document must be an object");
  PolicySet set;
  if (auto it = doc.find("policies"); it != doc.end()) {
    if (!it->is_array()) throw Error(Errc::ConfigInvalid, "policies must be a list");
    for (const auto& entry : *it) {
      ToolPolicy p = tool_policy_from_json(entry);
      if (p.tool_name.empty()) {
        throw Error(Errc::ConfigInvalid, "policy entry missing tool_name");
      }
      set.add(std::move(p));
    }
  }
  if (auto it = doc.find("default_policy"); it != doc.end()) {
    if (it->is_boolean()) {
      set.default_enabled_ = it->get<bool>();
    } else if (it->is_object()) {
      set.default_enabled_ = true;
      set.default_policy_ = tool_policy_from_json(*it);
    } else {
      throw Error(Errc::ConfigInvalid, "default_policy must be a boolean or a policy object");
    }
  }
  return set;
}

void PolicySet::add(ToolPolicy policy) {
  check_disjoint(policy);
  policies_[policy.tool_name] = std::move(policy);
}

std::optional<ToolPolicy> PolicySet::find(const std::string& tool_name) const {
  auto it = policies_.find(tool_name);
  if (it != policies_.end()) return it->second;
  if (!default_enabled_) return std::nullopt;
  ToolPolicy p = default_policy_ ? *default_policy_ : ToolPolicy{};
  p.tool_name = tool_name;
  return p;
}

Json redact_credentials(const Json& arguments, const ToolPolicy& policy) {
  if (policy.credential_fields.empty()) return arguments;
  Json redacted = arguments;
  for (const auto& leaf : leaf_paths(redacted)) {
    auto segments = split_path(leaf);
    bool covered = false;
    for (const auto& path : policy.credential_fields) {
      if (path_covers(path, segments)) {
        covered = true;
        break;
      }
    }
    if (!covered) continue;
    const Json* value = find_at_path(redacted, segments);
    if (!value || !value->is_string()) continue;
    std::string raw = value->get<std::string>();
    if (raw.empty() || raw.rfind("sha256:", 0) == 0) continue;
    set_at_path(redacted, leaf, Json("sha256:" + sha256_hex(raw)));
  }
  return redacted;
}

Json PolicySet::to_json() const {
  Json doc = Json::object();
  Json list = Json::array();
  for (const auto& [name, policy] : policies_) list.push_back(tool_policy_to_json(policy));
  doc["policies"] = list;
  if (default_policy_) {
    doc["default_policy"] = tool_policy_to_json(*default_policy_);
  } else {
    doc["default_policy"] = default_enabled_;
  }
  return doc;
}

}  // namespace acrfence
