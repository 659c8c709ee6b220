#pragma once

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "acrfence/value.hpp"

namespace acrfence {

enum class UnknownFieldTreatment { AsIntent, AsVolatile };

/// Per-tool configuration: which argument paths express intent, which change
/// legitimately across re-synthesis, and which carry credentials.
struct ToolPolicy {
  std::string tool_name;
  bool irreversible = true;
  std::vector<std::string> intent_fields;
  std::vector<std::string> volatile_fields;
  std::vector<std::string> credential_fields;  // may overlap intent_fields
  UnknownFieldTreatment unknown_field_treatment = UnknownFieldTreatment::AsIntent;
};

/// Tool policies loaded from a configuration file. Unlisted tools fall back
/// to a fail-closed default policy (irreversible, everything treated as
/// intent) unless the file sets "default_policy": false.
class PolicySet {
public:
  PolicySet() = default;

  static PolicySet from_file(const std::filesystem::path& path);
  static PolicySet from_json(const Json& doc);

  void add(ToolPolicy policy);
  void set_default_enabled(bool enabled) { default_enabled_ = enabled; }
  bool default_enabled() const { return default_enabled_; }

  /// Exact match, else the default policy (tool_name filled in), else nullopt.
  std::optional<ToolPolicy> find(const std::string& tool_name) const;

  Json to_json() const;

private:
  std::map<std::string, ToolPolicy> policies_;
  bool default_enabled_ = true;
  std::optional<ToolPolicy> default_policy_;  // explicit "default" entry, if any
};

Json tool_policy_to_json(const ToolPolicy& policy);
ToolPolicy tool_policy_from_json(const Json& doc);

/// Replaces string leaves under the policy's credential paths with
/// "sha256:<digest>" so raw tokens never reach the journal. Values already in
/// digest form are left alone, which makes the transform idempotent and lets
/// the differ compare journaled and live arguments coherently.
Json redact_credentials(const Json& arguments, const ToolPolicy& policy);

}  // namespace acrfence
