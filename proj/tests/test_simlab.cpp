#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "httplib.h"

#include "acrfence/proxy.hpp"
#include "acrfence/simlab/bank.hpp"
#include "acrfence/simlab/cloud.hpp"
#include "acrfence/simlab/scenario.hpp"
#include "testutil.hpp"

using namespace acrfence;
using namespace acrfence::simlab;
using testutil::TempDir;

namespace {

Json call_tool(int port, int id, const std::string& tool, const Json& args) {
  httplib::Client client("127.0.0.1", port);
  Json body = Json{{"id", id},
                   {"jsonrpc", "2.0"},
                   {"method", "tools/call"},
                   {"params", Json{{"arguments", args}, {"name", tool}}}};
  auto res = client.Post("/message", canonical_dump(body), "application/json");
  REQUIRE(res);
  return parse_strict(res->body);
}

}  // namespace

TEST_CASE("bank dedupes identical reference ids but accepts fresh ones") {
  BankServer bank;
  bank.start();
  int port = bank.port();

  Json first = call_tool(port, 1, "transfer",
                         Json{{"amount", 500}, {"recipient", "Bob"}, {"reference_id", "uuid-A"}});
  CHECK(first["result"]["status"] == "ok");

  Json duplicate = call_tool(port, 2, "transfer",
                             Json{{"amount", 500}, {"recipient", "Bob"}, {"reference_id", "uuid-A"}});
  REQUIRE(duplicate.contains("error"));
  CHECK(duplicate["error"]["data"]["original_txn"] == first["result"]["txn_id"]);
  CHECK(bank.transaction_count() == 1);

  // the paper's gap: a fresh uuid makes the duplicate look like a new payment
  Json second = call_tool(port, 3, "transfer",
                          Json{{"amount", 500}, {"recipient", "Bob"}, {"reference_id", "uuid-B"}});
  CHECK(second["result"]["status"] == "ok");
  CHECK(bank.transaction_count() == 2);
  CHECK(bank.balance("Bob") == 1000);

  // zero-amount transfers are accepted no-ops with a receipt
  Json zero = call_tool(port, 4, "transfer",
                        Json{{"amount", 0}, {"recipient", "Bob"}, {"reference_id", "uuid-C"}});
  CHECK(zero["result"]["status"] == "ok");
  CHECK(bank.balance("Bob") == 1000);

  Json broke = call_tool(port, 5, "transfer",
                         Json{{"amount", 999999999999}, {"recipient", "Bob"}, {"reference_id", "uuid-D"}});
  CHECK(broke["error"]["message"] == "insufficient funds");

  Json unknown = call_tool(port, 6, "get_balance", Json{{"account", "ghost"}});
  REQUIRE(unknown.contains("error"));

  bank.stop();
}

TEST_CASE("crash injection makes confirm_receipt unparseable exactly k times") {
  BankServer bank;
  bank.start();
  Json receipt = call_tool(bank.port(), 1, "transfer",
                           Json{{"amount", 1}, {"recipient", "Bob"}, {"reference_id", "r1"}});
  std::string txn = receipt["result"]["txn_id"].get<std::string>();

  bank.inject_crash(2);
  httplib::Client client("127.0.0.1", bank.port());
  for (int i = 0; i < 2; ++i) {
    auto res = client.Post("/message",
                           canonical_dump(Json{{"id", 10 + i},
                                               {"jsonrpc", "2.0"},
                                               {"method", "tools/call"},
                                               {"params", Json{{"arguments", Json{{"txn_id", txn}}},
                                                               {"name", "confirm_receipt"}}}}),
                           "application/json");
    REQUIRE(res);
    CHECK_THROWS(parse_strict(res->body));
  }
  Json fine = call_tool(bank.port(), 20, "confirm_receipt", Json{{"txn_id", txn}});
  CHECK(fine.contains("result"));
  bank.stop();
}

TEST_CASE("stateless approval accepts a granted token for any target") {
  ApprovalServer approval(ValidationMode::Stateless, 7);
  approval.start();

  Json grant = call_tool(approval.port(), 1, "grant_token",
                         Json{{"action", "delete_data"}, {"approver", "manager"}, {"target", "Alice"}});
  std::string token = grant["result"]["token"].get<std::string>();

  Json cross = call_tool(approval.port(), 2, "delete_data",
                         Json{{"target", "Bob"}, {"token", token}});
  CHECK(cross["result"]["status"] == "deleted");  // signature does not bind the target
  CHECK(approval.deletion_count() == 1);
  CHECK(approval.deletions()[0].target == "Bob");

  // and the same token keeps working: nothing server-side marks it used
  Json again = call_tool(approval.port(), 3, "delete_data",
                         Json{{"target", "Carol"}, {"token", token}});
  CHECK(again["result"]["status"] == "deleted");

  Json forged = call_tool(approval.port(), 4, "delete_data",
                          Json{{"target", "Bob"}, {"token", "TOK-deadbeef.bad"}});
  CHECK(forged["error"]["message"] == "invalid token signature");

  approval.stop();
}

TEST_CASE("stateful approval revokes a token on first use") {
  ApprovalServer approval(ValidationMode::Stateful, 7);
  approval.start();

  Json grant = call_tool(approval.port(), 1, "grant_token",
                         Json{{"action", "delete_data"}, {"approver", "manager"}, {"target", "Alice"}});
  std::string token = grant["result"]["token"].get<std::string>();

  Json first = call_tool(approval.port(), 2, "delete_data",
                         Json{{"target", "Alice"}, {"token", token}});
  CHECK(first["result"]["status"] == "deleted");

  Json reuse = call_tool(approval.port(), 3, "delete_data",
                         Json{{"target", "Bob"}, {"token", token}});
  REQUIRE(reuse.contains("error"));
  CHECK(reuse["error"]["message"].get<std::string>().find("revoked") != std::string::npos);
  CHECK(approval.deletion_count() == 1);

  approval.stop();
}

TEST_CASE("cloud server provisions instances") {
  CloudServer cloud;
  cloud.start();
  Json created = call_tool(cloud.port(), 1, "create_server",
                           Json{{"name", "db-1"}, {"region", "eu"}, {"request_id", "r1"}});
  CHECK(created["result"]["server_id"] == "srv-1");
  CHECK(cloud.server_count() == 1);
  cloud.stop();
}

TEST_CASE("action replay: one crash-restore cycle doubles the payment without the fence") {
  TempDir dir("simlab");
  auto report = run_scenario(scenario_action_replay(false, 2, 1, 42), dir.path());
  CHECK(report.passed);
  CHECK(report.trials_with_duplicates == 2);
  CHECK(report.duplicates_observed == 2);
  for (const auto& trial : report.per_trial) {
    CHECK(trial["bank_transactions"] == 2);
    CHECK(trial["crashes"] == 1);
    CHECK(trial["restores"] == 1);
  }
}

TEST_CASE("action replay baseline: no crash injection, no duplicates") {
  TempDir dir("simlab");
  auto report = run_scenario(scenario_action_replay_baseline(2, 43), dir.path());
  CHECK(report.passed);
  CHECK(report.duplicates_observed == 0);
  for (const auto& trial : report.per_trial) CHECK(trial["bank_transactions"] == 1);
}

TEST_CASE("action replay with the fence: retries replay, the bank pays once") {
  TempDir dir("simlab");
  auto report = run_scenario(scenario_action_replay(true, 2, 1, 44), dir.path());
  INFO(canonical_dump(reports_to_json({report})));
  CHECK(report.passed);
  CHECK(report.duplicates_observed == 0);
  for (const auto& trial : report.per_trial) {
    CHECK(trial["bank_transactions"] == 1);
    CHECK(trial["transfer_requests"] == 1);
    CHECK(trial["fence_outcomes"]["Replayed"] >= 1);
    CHECK(trial["replay_fidelity"] == true);
  }
}

TEST_CASE("chaining crash-restore cycles adds one duplicate per cycle") {
  TempDir dir("simlab");
  for (int k : {0, 2, 3}) {
    auto open_report = run_scenario(scenario_action_replay(false, 1, k, 50 + k), dir.path());
    INFO("k=", k, " ", canonical_dump(reports_to_json({open_report})));
    CHECK(open_report.passed);
    CHECK(open_report.per_trial[0]["bank_transactions"] == k + 1);

    auto fenced_report = run_scenario(scenario_action_replay(true, 1, k, 60 + k), dir.path());
    CHECK(fenced_report.passed);
    CHECK(fenced_report.per_trial[0]["bank_transactions"] == 1);
  }
}

TEST_CASE("authority resurrection: stateless reuse succeeds, stateful and fenced do not") {
  TempDir dir("simlab");

  auto open_report =
      run_scenario(scenario_authority_resurrection("stateless", false, 2, 70), dir.path());
  INFO(canonical_dump(reports_to_json({open_report})));
  CHECK(open_report.passed);
  CHECK(open_report.token_reuse_successes == 2);

  auto stateful_report =
      run_scenario(scenario_authority_resurrection("stateful", false, 2, 71), dir.path());
  CHECK(stateful_report.passed);
  CHECK(stateful_report.token_reuse_successes == 0);

  auto fenced_report =
      run_scenario(scenario_authority_resurrection("stateless", true, 2, 72), dir.path());
  INFO(canonical_dump(reports_to_json({fenced_report})));
  CHECK(fenced_report.passed);
  CHECK(fenced_report.token_reuse_successes == 0);
  for (const auto& trial : fenced_report.per_trial) {
    CHECK(trial["delete_requests"] == 1);  // the reuse never reached the approval server
    CHECK(trial["fence_outcomes"]["BlockedCredentialReuse"] == 1);
  }
}

TEST_CASE("divergent redirect forces a fork; after approval both transfers exist") {
  TempDir dir("simlab");
  auto report = run_scenario(scenario_divergent_redirect(true, 80), dir.path());
  INFO(canonical_dump(reports_to_json({report})));
  CHECK(report.passed);
  REQUIRE(report.per_trial.size() == 1);
  CHECK(report.per_trial[0]["bank_transactions"] == 2);
  CHECK(report.per_trial[0]["forks"] == 1);
  CHECK(report.per_trial[0]["fence_outcomes"]["BlockedForkRequired"] >= 1);

  auto abort_report = run_scenario(scenario_divergent_redirect(false, 81), dir.path());
  CHECK(abort_report.passed);
  CHECK(abort_report.per_trial[0]["bank_transactions"] == 1);  // the redirect never executed
}

TEST_CASE("implicit restore detection still prevents the duplicate") {
  TempDir dir("simlab");
  ScenarioSpec spec = scenario_action_replay(true, 1, 1, 90);
  spec.explicit_restore_signal = false;  // exercise the wire-id heuristic
  auto report = run_scenario(spec, dir.path());
  INFO(canonical_dump(reports_to_json({report})));
  CHECK(report.passed);
  CHECK(report.per_trial[0]["bank_transactions"] == 1);
}

TEST_CASE("re-synthesis keeps intent fields and refreshes volatile ones") {
  // run one unfenced crash-restore trial by hand so the bank state is visible
  BankServer bank;
  bank.start();
  bank.inject_crash(1);

  ScenarioSpec spec = scenario_action_replay(false, 1, 1, 91);
  AgentConfig cfg;
  cfg.steps = spec.steps;
  cfg.checkpoint_index = spec.checkpoint_index;
  cfg.resynth = spec.resynth;
  cfg.resynth.seed = 91;
  AgentEndpoints endpoints;
  endpoints.server_urls = {{"bank", bank.url()}};
  ScriptedAgent agent(cfg, endpoints);
  AgentResult result = agent.run();
  REQUIRE(result.completed);

  auto txns = bank.transactions();
  REQUIRE(txns.size() == 2);  // original and regenerated retry both landed
  CHECK(txns[0].amount_cents == txns[1].amount_cents);
  CHECK(txns[0].recipient == txns[1].recipient);
  CHECK(txns[0].reference_id != txns[1].reference_id);  // fresh reference every generation

  bank.stop();
}

TEST_CASE("effective tool calls are contiguous per branch across restores and forks") {
  ScenarioSpec spec = scenario_action_replay(true, 1, 1, 77);
  std::string expected_branch_with_replay = "b0.r1";
  SUBCASE("replay path") {}
  SUBCASE("fork path") {
    spec = scenario_divergent_redirect(true, 78);
    expected_branch_with_replay = "fork-1";  // the fork carries the re-issued call instead
  }

  TempDir dir("simlab");
  BankServer bank;
  bank.start();
  bank.inject_crash(spec.crash_cycles);

  ProxyConfig cfg;
  cfg.journal_path = dir.file("journal.ndjson");
  cfg.upstreams = {UpstreamSpec{"bank", bank.url(), ""}};
  cfg.default_upstream = "bank";
  cfg.routes = {{"transfer", "bank"}, {"get_balance", "bank"}, {"confirm_receipt", "bank"}};
  ProxyServer proxy(std::move(cfg), default_scenario_policies());
  proxy.start();

  AgentConfig agent_cfg;
  agent_cfg.session_id = "s1";
  agent_cfg.steps = spec.steps;
  agent_cfg.checkpoint_index = spec.checkpoint_index;
  agent_cfg.resynth = spec.resynth;
  agent_cfg.resynth.seed = spec.base_seed;
  agent_cfg.on_blocked = spec.on_blocked;
  AgentEndpoints endpoints;
  endpoints.fence_data_url = "http://127.0.0.1:" + std::to_string(proxy.data_port());
  endpoints.fence_control_url = "http://127.0.0.1:" + std::to_string(proxy.control_port());
  ScriptedAgent agent(agent_cfg, endpoints);
  REQUIRE(agent.run().completed);

  // per branch: effective (non-blocked) calls run seq, seq+1, ... with no
  // gaps from the branch's fork point; the root branch starts at 0
  auto session = proxy.fence().session_snapshot("s1");
  std::map<std::string, std::vector<uint64_t>> per_branch;
  for (const auto& event : proxy.fence().outcome_log("s1")) {
    if (event.kind == FenceOutcomeKind::Forwarded || event.kind == FenceOutcomeKind::Replayed) {
      per_branch[event.branch_id].push_back(event.seq_index);
    }
  }
  REQUIRE(per_branch.count("b0") == 1);
  REQUIRE(per_branch.count(expected_branch_with_replay) == 1);
  for (const auto& [branch_id, seqs] : per_branch) {
    const BranchEntry* entry = session.branch(branch_id);
    REQUIRE(entry != nullptr);
    REQUIRE_FALSE(seqs.empty());
    CHECK(seqs.front() == entry->forked_from_seq);
    for (size_t i = 1; i < seqs.size(); ++i) CHECK(seqs[i] == seqs[i - 1] + 1);
  }
  CHECK(per_branch.at("b0").front() == 0);

  proxy.stop();
  bank.stop();
}

TEST_CASE("zero-trial scenarios produce an empty passing report") {
  TempDir dir("simlab");
  ScenarioSpec spec = scenario_action_replay(false, 0, 1, 92);
  spec.expect = Json{{"duplicates_total", 0}};
  auto report = run_scenario(spec, dir.path());
  CHECK(report.passed);
  CHECK(report.trials == 0);
  CHECK(report.per_trial.empty());
}

TEST_CASE("the same seed yields byte-identical reports") {
  TempDir dir_a("simlab");
  TempDir dir_b("simlab");
  ScenarioSpec spec = scenario_action_replay(true, 2, 1, 93);
  auto a = run_scenario(spec, dir_a.path());
  auto b = run_scenario(spec, dir_b.path());
  CHECK(canonical_dump(a.to_json()) == canonical_dump(b.to_json()));
}

TEST_CASE("negative control: a replay-disabled fence flags the scenario row") {
  TempDir dir("simlab");
  ScenarioSpec spec = scenario_action_replay(true, 2, 1, 94);
  spec.unsafe_disable_replay = true;
  auto report = run_scenario(spec, dir.path());
  CHECK_FALSE(report.passed);
  CHECK_FALSE(report.failures.empty());
  CHECK_FALSE(all_passed({report}));
}

TEST_CASE("fence null-interference: identical server effects without crash injection") {
  TempDir dir("simlab");
  ScenarioSpec spec = scenario_action_replay(false, 1, 0, 95);

  // direct
  auto direct = run_scenario(spec, dir.path());
  // fenced
  ScenarioSpec fenced_spec = spec;
  fenced_spec.fence_enabled = true;
  fenced_spec.name = "fenced-variant";
  fenced_spec.expect = Json::object();
  auto fenced = run_scenario(fenced_spec, dir.path());

  CHECK(direct.per_trial[0]["bank_transactions"] == fenced.per_trial[0]["bank_transactions"]);
  CHECK(direct.per_trial[0]["server_request_counters"]["bank"] ==
        fenced.per_trial[0]["server_request_counters"]["bank"]);
}

TEST_CASE("suite configs parse presets and bespoke scenarios") {
  Json doc = Json{{"scenarios",
                   Json::array({Json{{"preset", "action_replay"},
                                     {"fence_enabled", true},
                                     {"trials", 1},
                                     {"base_seed", 7}},
                                Json{{"name", "bespoke"},
                                     {"trials", 0},
                                     {"checkpoint_index", 0},
                                     {"steps", Json::array({Json{{"tool", "get_balance"},
                                                                 {"server", "bank"},
                                                                 {"args", Json{{"account", "corp"}}}}})}}})}};
  auto specs = suite_from_json(doc);
  REQUIRE(specs.size() == 2);
  CHECK(specs[0].fence_enabled);
  CHECK(specs[0].trials == 1);
  CHECK(specs[1].name == "bespoke");
  CHECK(specs[1].trials == 0);

  CHECK_THROWS_AS(suite_from_json(Json{{"scenarios", Json::array({Json{{"preset", "nope"}}})}}),
                  Error);
  CHECK_THROWS_AS(suite_from_json(Json{{"nope", 1}}), Error);
}

TEST_CASE("report table renders one row per scenario with failures flagged") {
  ScenarioReport good;
  good.scenario = "a";
  good.trials = 10;
  good.trials_with_duplicates = 10;
  good.duplicates_observed = 10;
  good.passed = true;
  ScenarioReport bad;
  bad.scenario = "b";
  bad.trials = 2;
  bad.passed = false;
  bad.failures = {"duplicates_total: expected 0, got 2"};

  std::string table = render_report_table(reports_to_json({good, bad}));
  CHECK(table.find("10/10") != std::string::npos);
  CHECK(table.find("ok") != std::string::npos);
  CHECK(table.find("FAIL") != std::string::npos);
  CHECK(table.find("! duplicates_total") != std::string::npos);
}
