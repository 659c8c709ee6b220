#pragma once

#include <mutex>
#include <random>
#include <set>
#include <string>
#include <vector>

#include "acrfence/simlab/mock_server.hpp"

namespace acrfence::simlab {

enum class ValidationMode { Stateless, Stateful };

/// Simulated approval service issuing single-use authorization tokens.
/// Stateless mode checks only the token signature — which deliberately does
/// not cover the target — so a token granted for one target validates for
/// any other. Stateful mode additionally keeps a server-side revocation set.
class ApprovalServer {
public:
  explicit ApprovalServer(ValidationMode mode, uint64_t seed = 1);

  void start() { server_.start(); }
  void stop() { server_.stop(); }
  std::string url() const { return server_.url(); }
  int port() const { return server_.port(); }

  struct Deletion {
    std::string target;
    std::string token_digest;
  };

  std::vector<Deletion> deletions() const;
  int deletion_count() const;
  int request_count(const std::string& tool) const { return server_.request_count(tool); }
  Json request_counters() const { return server_.request_counters(); }
  Json state_json() const;

  /// Issues a token outside the wire path (test convenience).
  std::string grant(const std::string& action, const std::string& target,
                    const std::string& approver);

private:
  Json tool_grant_token(const Json& args);
  Json tool_delete_data(const Json& args);
  std::string make_token(const std::string& action, const std::string& target,
                         const std::string& approver);

  MockToolServer server_{"approval"};
  mutable std::mutex mutex_;
  ValidationMode mode_;
  std::string hmac_secret_;
  std::mt19937_64 nonce_rng_;
  std::map<std::string, Json> issued_;  // token -> {action, target, approver}
  std::set<std::string> revoked_;       // token digests (Stateful only)
  std::vector<Deletion> deletions_;
};

}  // namespace acrfence::simlab
