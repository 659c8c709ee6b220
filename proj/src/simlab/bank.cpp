#include "acrfence/simlab/bank.hpp"

namespace acrfence::simlab {

BankServer::BankServer(std::string primary_account, int64_t initial_balance_cents)
    : primary_account_(std::move(primary_account)) {
  balances_[primary_account_] = initial_balance_cents;
  server_.register_tool("transfer", "move money to a recipient, dedupe by reference_id",
                        [this](const Json& args) { return tool_transfer(args); });
  server_.register_tool("get_balance", "current balance of an account",
                        [this](const Json& args) { return tool_get_balance(args); });
  server_.register_tool("confirm_receipt", "payee-side receipt confirmation",
                        [this](const Json& args) { return tool_confirm_receipt(args); });
}

void BankServer::inject_crash(int cycles) {
  std::lock_guard<std::mutex> lock(mutex_);
  crash_remaining_ = cycles;
}

Json BankServer::tool_transfer(const Json& args) {
  std::lock_guard<std::mutex> lock(mutex_);
  if (!args.contains("amount") || !args["amount"].is_number()) {
    throw ToolError{-32602, "transfer needs a numeric amount"};
  }
  int64_t amount = args["amount"].get<int64_t>();
  std::string recipient = args.value("recipient", "");
  std::string reference = args.value("reference_id", "");
  if (recipient.empty()) throw ToolError{-32602, "transfer needs a recipient"};
  if (reference.empty()) throw ToolError{-32602, "transfer needs a reference_id"};
  if (amount < 0) throw ToolError{-32602, "negative amount"};

  if (seen_references_.count(reference)) {
    std::string original;
    for (const auto& txn : transactions_) {
      if (txn.reference_id == reference) original = txn.txn_id;
    }
    throw ToolError{-32001, "duplicate reference_id, transfer already processed",
                    Json{{"original_txn", original}, {"reference_id", reference}}};
  }
  auto it = balances_.find(primary_account_);
  if (it == balances_.end()) throw ToolError{-32003, "unknown account " + primary_account_};
  if (it->second < amount) {
    throw ToolError{-32002, "insufficient funds",
                    Json{{"balance_cents", it->second}, {"requested", amount}}};
  }

  it->second -= amount;
  balances_[recipient] += amount;  // recipients are created on first credit
  Transaction txn;
  txn.txn_id = "T" + std::to_string(transactions_.size() + 1);
  txn.reference_id = reference;
  txn.amount_cents = amount;
  txn.recipient = recipient;
  txn.logical_time = ++logical_clock_;
  seen_references_.insert(reference);
  transactions_.push_back(txn);

  return Json{{"amount", amount},
              {"recipient", recipient},
              {"reference_id", reference},
              {"status", "ok"},
              {"txn_id", txn.txn_id}};
}

Json BankServer::tool_get_balance(const Json& args) {
  std::lock_guard<std::mutex> lock(mutex_);
  std::string account = args.value("account", primary_account_);
  auto it = balances_.find(account);
  if (it == balances_.end()) throw ToolError{-32003, "unknown account " + account};
  return Json(it->second);
}

Json BankServer::tool_confirm_receipt(const Json& args) {
  std::lock_guard<std::mutex> lock(mutex_);
  if (crash_remaining_ > 0) {
    crash_remaining_--;
    throw MalformedResponseInjection{};
  }
  std::string txn_id = args.value("txn_id", "");
  for (const auto& txn : transactions_) {
    if (txn.txn_id == txn_id) return Json("receipt confirmed for " + txn_id);
  }
  throw ToolError{-32004, "unknown transaction " + txn_id};
}

int64_t BankServer::balance(const std::string& account) const {
  std::lock_guard<std::mutex> lock(mutex_);
  auto it = balances_.find(account);
  return it == balances_.end() ? 0 : it->second;
}

std::vector<BankServer::Transaction> BankServer::transactions() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return transactions_;
}

int BankServer::transaction_count() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return static_cast<int>(transactions_.size());
}

Json BankServer::state_json() const {
  std::lock_guard<std::mutex> lock(mutex_);
  Json balances = Json::object();
  for (const auto& [account, cents] : balances_) balances[account] = cents;
  Json txns = Json::array();
  for (const auto& txn : transactions_) {
    txns.push_back(Json{{"amount", txn.amount_cents},
                        {"recipient", txn.recipient},
                        {"reference_id", txn.reference_id},
                        {"txn_id", txn.txn_id}});
  }
  return Json{{"balances", balances}, {"transactions", txns}};
}

}  // namespace acrfence::simlab
