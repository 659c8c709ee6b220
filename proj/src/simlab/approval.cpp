#include "acrfence/simlab/approval.hpp"

#include "acrfence/sha256.hpp"

namespace acrfence::simlab {

namespace {

std::string hex_encode(const std::string& raw) {
  return to_hex(reinterpret_cast<const unsigned char*>(raw.data()), raw.size());
}

std::string hex_decode(const std::string& hex) {
  if (hex.size() % 2 != 0) return "";
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    return -1;
  };
  std::string out;
  out.reserve(hex.size() / 2);
  for (size_t i = 0; i < hex.size(); i += 2) {
    int hi = nibble(hex[i]), lo = nibble(hex[i + 1]);
    if (hi < 0 || lo < 0) return "";
    out.push_back(static_cast<char>((hi << 4) | lo));
  }
  return out;
}

}  // namespace

ApprovalServer::ApprovalServer(ValidationMode mode, uint64_t seed)
    : mode_(mode), nonce_rng_(seed) {
  hmac_secret_ = "approval-secret-" + std::to_string(seed);
  server_.register_tool("grant_token", "issue a single-use authorization token",
                        [this](const Json& args) { return tool_grant_token(args); });
  server_.register_tool("delete_data", "delete a customer's data under an authorization token",
                        [this](const Json& args) { return tool_delete_data(args); });
}

std::string ApprovalServer::make_token(const std::string& action, const std::string& target,
                                       const std::string& approver) {
  char nonce_buf[17];
  std::snprintf(nonce_buf, sizeof(nonce_buf), "%016llx",
                static_cast<unsigned long long>(nonce_rng_()));
  Json payload = Json{{"action", action}, {"approver", approver}, {"nonce", nonce_buf}};
  // The signature binds action/approver/nonce but NOT the target; that is the
  // validation gap stateless mode exposes.
  std::string signature =
      hmac_sha256_hex(hmac_secret_, action + "\n" + approver + "\n" + nonce_buf);
  std::string token = "TOK-" + hex_encode(canonical_dump(payload)) + "." + signature;
  issued_[token] = Json{{"action", action}, {"approver", approver}, {"target", target}};
  return token;
}

Json ApprovalServer::tool_grant_token(const Json& args) {
  std::lock_guard<std::mutex> lock(mutex_);
  std::string action = args.value("action", "");
  std::string target = args.value("target", "");
  std::string approver = args.value("approver", "");
  if (action.empty() || approver.empty()) {
    throw ToolError{-32602, "grant_token needs action and approver"};
  }
  std::string token = make_token(action, target, approver);
  return Json{{"action", action}, {"target", target}, {"token", token}};
}

Json ApprovalServer::tool_delete_data(const Json& args) {
  std::lock_guard<std::mutex> lock(mutex_);
  std::string target = args.value("target", "");
  std::string token = args.value("token", "");
  if (target.empty() || token.empty()) {
    throw ToolError{-32602, "delete_data needs target and token"};
  }

  // Signature check: recover the signed payload and recompute the HMAC.
  bool valid = false;
  if (token.rfind("TOK-", 0) == 0) {
    auto dot = token.rfind('.');
    if (dot != std::string::npos && dot > 4) {
      std::string payload_hex = token.substr(4, dot - 4);
      std::string signature = token.substr(dot + 1);
      std::string payload_raw = hex_decode(payload_hex);
      if (!payload_raw.empty()) {
        try {
          Json payload = parse_strict(payload_raw);
          std::string expected = hmac_sha256_hex(
              hmac_secret_, payload.value("action", "") + "\n" + payload.value("approver", "") +
                                "\n" + payload.value("nonce", ""));
          valid = (expected == signature);
        } catch (...) {
          valid = false;
        }
      }
    }
  }
  if (!valid) throw ToolError{-32010, "invalid token signature"};

  std::string digest = sha256_hex(token);
  if (mode_ == ValidationMode::Stateful && revoked_.count(digest)) {
    throw ToolError{-32011, "token already consumed (revoked)", Json{{"token_digest", digest}}};
  }

  deletions_.push_back(Deletion{target, digest});
  if (mode_ == ValidationMode::Stateful) revoked_.insert(digest);
  return Json{{"status", "deleted"}, {"target", target}};
}

std::vector<ApprovalServer::Deletion> ApprovalServer::deletions() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return deletions_;
}

int ApprovalServer::deletion_count() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return static_cast<int>(deletions_.size());
}

Json ApprovalServer::state_json() const {
  std::lock_guard<std::mutex> lock(mutex_);
  Json dels = Json::array();
  for (const auto& d : deletions_) {
    dels.push_back(Json{{"target", d.target}, {"token_digest", d.token_digest}});
  }
  return Json{{"deletions", dels}, {"issued", static_cast<int>(issued_.size())}};
}

std::string ApprovalServer::grant(const std::string& action, const std::string& target,
                                  const std::string& approver) {
  std::lock_guard<std::mutex> lock(mutex_);
  return make_token(action, target, approver);
}

}  // namespace acrfence::simlab
