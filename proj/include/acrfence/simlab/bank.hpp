#pragma once

#include <cstdint>
#include <mutex>
#include <set>
#include <string>
#include <vector>

#include "acrfence/simlab/mock_server.hpp"

namespace acrfence::simlab {

/// Simulated bank: transfer with reference-id duplicate detection, balance
/// queries, and an attacker-controllable receipt-confirmation tool used for
/// crash injection.
class BankServer {
public:
  struct Transaction {
    std::string txn_id;
    std::string reference_id;
    int64_t amount_cents = 0;
    std::string recipient;
    int64_t logical_time = 0;
  };

  explicit BankServer(std::string primary_account = "corp",
                      int64_t initial_balance_cents = 100000000);

  void start() { server_.start(); }
  void stop() { server_.stop(); }
  std::string url() const { return server_.url(); }
  int port() const { return server_.port(); }

  /// Arms crash injection: the next `cycles` confirm_receipt calls return a
  /// malformed response.
  void inject_crash(int cycles);

  int64_t balance(const std::string& account) const;
  std::vector<Transaction> transactions() const;
  int transaction_count() const;
  int request_count(const std::string& tool) const { return server_.request_count(tool); }
  int64_t last_receipt_mono_ns(const std::string& tool) const {
    return server_.last_receipt_mono_ns(tool);
  }
  Json request_counters() const { return server_.request_counters(); }

  /// Full server-visible state, used as scenario ground truth.
  Json state_json() const;

private:
  Json tool_transfer(const Json& args);
  Json tool_get_balance(const Json& args);
  Json tool_confirm_receipt(const Json& args);

  MockToolServer server_{"bank"};
  mutable std::mutex mutex_;
  std::string primary_account_;
  std::map<std::string, int64_t> balances_;
  std::vector<Transaction> transactions_;
  std::set<std::string> seen_references_;
  int crash_remaining_ = 0;
  int64_t logical_clock_ = 0;
};

}  // namespace acrfence::simlab
