#include "acrfence/value.hpp"

#include <algorithm>
#include <ctime>
#include <set>
#include <sstream>

#include "acrfence/errors.hpp"

namespace acrfence {

const char* errc_name(Errc code) {
  switch (code) {
    case Errc::MalformedFrame: return "MalformedFrame";
    case Errc::ProtocolViolation: return "ProtocolViolation";
    case Errc::MissingToolName: return "MissingToolName";
    case Errc::DuplicateKey: return "DuplicateKey";
    case Errc::StorageFailure: return "StorageFailure";
    case Errc::NotFound: return "NotFound";
    case Errc::AlreadyFinalized: return "AlreadyFinalized";
    case Errc::PolicyMissing: return "PolicyMissing";
    case Errc::AnalyzerUnreachable: return "AnalyzerUnreachable";
    case Errc::AnalyzerMalformed: return "AnalyzerMalformed";
    case Errc::UnknownSession: return "UnknownSession";
    case Errc::FutureCheckpoint: return "FutureCheckpoint";
    case Errc::NoPendingFork: return "NoPendingFork";
    case Errc::TokenMismatch: return "TokenMismatch";
    case Errc::BranchIdInUse: return "BranchIdInUse";
    case Errc::UpstreamFailure: return "UpstreamFailure";
    case Errc::BindFailure: return "BindFailure";
    case Errc::UpstreamUnreachable: return "UpstreamUnreachable";
    case Errc::ConfigInvalid: return "ConfigInvalid";
    case Errc::ScenarioMalformed: return "ScenarioMalformed";
  }
  return "UnknownError";
}

std::string canonical_dump(const Json& value) {
  // std::map-backed objects already iterate in lexicographic key order.
  return value.dump();
}

Json parse_strict(std::string_view text) {
  // Track one key set per open object; nlohmann keeps the last duplicate
  // silently, so detection has to happen during the parse event stream.
  std::vector<std::set<std::string>> object_stack;
  bool duplicate = false;
  auto callback = [&](int /*depth*/, Json::parse_event_t event, Json& parsed) {
    switch (event) {
      case Json::parse_event_t::object_start:
        object_stack.emplace_back();
        break;
      case Json::parse_event_t::object_end:
        if (!object_stack.empty()) object_stack.pop_back();
        break;
      case Json::parse_event_t::key:
        if (!object_stack.empty() &&
            !object_stack.back().insert(parsed.get<std::string>()).second) {
          duplicate = true;
        }
        break;
      default:
        break;
    }
    return true;
  };
  Json result = Json::parse(text, callback, /*allow_exceptions=*/false);
  if (result.is_discarded()) {
    throw Error(Errc::MalformedFrame, "not a parseable document");
  }
  if (duplicate) {
    throw Error(Errc::MalformedFrame, "duplicate object key");
  }
  return result;
}

bool is_scalar(const Json& value) {
  return value.is_primitive();  // string, number, boolean, null
}

std::vector<std::string> split_path(const std::string& dotted) {
  std::vector<std::string> segments;
  std::string current;
  for (char c : dotted) {
    if (c == '.') {
      segments.push_back(current);
      current.clear();
    } else {
      current.push_back(c);
    }
  }
  segments.push_back(current);
  return segments;
}

std::string join_path(const std::vector<std::string>& segments) {
  std::string out;
  for (size_t i = 0; i < segments.size(); ++i) {
    if (i) out.push_back('.');
    out += segments[i];
  }
  return out;
}

namespace {

const Json* descend(const Json* node, const std::string& segment) {
  if (node->is_object()) {
    auto it = node->find(segment);
    return it == node->end() ? nullptr : &*it;
  }
  if (node->is_array()) {
    if (segment.empty() ||
        !std::all_of(segment.begin(), segment.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      return nullptr;
    }
    size_t index = std::stoull(segment);
    if (index >= node->size()) return nullptr;
    return &(*node)[index];
  }
  return nullptr;
}

void collect_leaves(const Json& node, std::string prefix, std::vector<std::string>& out) {
  if (node.is_object() && !node.empty()) {
    for (auto it = node.begin(); it != node.end(); ++it) {
      collect_leaves(it.value(), prefix.empty() ? it.key() : prefix + "." + it.key(), out);
    }
    return;
  }
  if (node.is_array() && !node.empty()) {
    for (size_t i = 0; i < node.size(); ++i) {
      std::string seg = std::to_string(i);
      collect_leaves(node[i], prefix.empty() ? seg : prefix + "." + seg, out);
    }
    return;
  }
  out.push_back(prefix);
}

}  // namespace

const Json* find_at_path(const Json& root, const std::vector<std::string>& segments) {
  const Json* node = &root;
  for (const auto& segment : segments) {
    node = descend(node, segment);
    if (!node) return nullptr;
  }
  return node;
}

bool set_at_path(Json& root, const std::string& dotted_path, Json value) {
  auto segments = split_path(dotted_path);
  const Json* target = find_at_path(root, segments);
  if (!target) return false;
  *const_cast<Json*>(target) = std::move(value);
  return true;
}

bool path_covers(const std::string& policy_path, const std::vector<std::string>& leaf_segments) {
  auto policy_segments = split_path(policy_path);
  if (policy_segments.size() > leaf_segments.size()) return false;
  return std::equal(policy_segments.begin(), policy_segments.end(), leaf_segments.begin());
}

std::vector<std::string> leaf_paths(const Json& tree) {
  std::vector<std::string> out;
  if ((tree.is_object() || tree.is_array()) && tree.empty()) return out;
  collect_leaves(tree, "", out);
  std::sort(out.begin(), out.end());
  return out;
}

std::string iso_timestamp_utc(std::chrono::system_clock::time_point when) {
  std::time_t t = std::chrono::system_clock::to_time_t(when);
  std::tm tm_utc{};
  gmtime_r(&t, &tm_utc);
  auto micros = std::chrono::duration_cast<std::chrono::microseconds>(when.time_since_epoch()) %
                std::chrono::seconds(1);
  long frac = static_cast<long>(micros.count());
  if (frac < 0) frac += 1000000;
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%04d-%02d-%02dT%02d:%02d:%02d.%06ldZ", tm_utc.tm_year + 1900,
                tm_utc.tm_mon + 1, tm_utc.tm_mday, tm_utc.tm_hour, tm_utc.tm_min, tm_utc.tm_sec,
                frac % 1000000);
  return buf;
}

std::string now_iso_timestamp_utc() { return iso_timestamp_utc(std::chrono::system_clock::now()); }

int64_t monotonic_ns() {
  return std::chrono::duration_cast<std::chrono::nanoseconds>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::string to_hex(const unsigned char* data, size_t len) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (size_t i = 0; i < len; ++i) {
    out.push_back(digits[data[i] >> 4]);
    out.push_back(digits[data[i] & 0xf]);
  }
  return out;
}

}  // namespace acrfence
