#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace acrfence {

// All structured value trees in the project are nlohmann JSON values backed by
// std::map, so object keys iterate (and serialize) in lexicographic order.
using Json = nlohmann::json;

/// Canonical serialization: stable lexicographic key order, no insignificant
/// whitespace. Journals, hashes and byte-equality checks all go through this.
std::string canonical_dump(const Json& value);

/// Parse that rejects documents containing duplicate object keys at any
/// depth. Throws Error{MalformedFrame}.
Json parse_strict(std::string_view text);

bool is_scalar(const Json& value);

// Argument paths are dot-separated; list indices are decimal segments
// ("items.0.amount"). Object keys that themselves contain '.' are not
// addressable by policies.
std::vector<std::string> split_path(const std::string& dotted);
std::string join_path(const std::vector<std::string>& segments);

/// Node at `segments`, or nullptr when the path does not exist.
const Json* find_at_path(const Json& root, const std::vector<std::string>& segments);

/// Overwrite the value at an existing path. Returns false when the path is
/// absent (nothing is created).
bool set_at_path(Json& root, const std::string& dotted_path, Json value);

/// Every leaf path of the tree, sorted. Scalars are leaves; empty objects and
/// arrays count as leaves too so they participate in diffs.
std::vector<std::string> leaf_paths(const Json& tree);

/// True when a policy path equals the leaf path or is a segment-wise prefix
/// of it ("payload" covers "payload.note").
bool path_covers(const std::string& policy_path, const std::vector<std::string>& leaf_segments);

std::string iso_timestamp_utc(std::chrono::system_clock::time_point when);
std::string now_iso_timestamp_utc();
int64_t monotonic_ns();

std::string to_hex(const unsigned char* data, size_t len);

}  // namespace acrfence
