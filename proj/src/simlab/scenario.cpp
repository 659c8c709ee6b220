#include "acrfence/simlab/scenario.hpp"

#include <fstream>
#include <set>
#include <sstream>

#include "acrfence/errors.hpp"
#include "acrfence/proxy.hpp"
#include "acrfence/simlab/bank.hpp"
#include "acrfence/simlab/cloud.hpp"

namespace acrfence::simlab {

PolicySet default_scenario_policies() {
  PolicySet set;
  set.add(ToolPolicy{"transfer", true, {"amount", "recipient"}, {"reference_id", "memo"}, {}, UnknownFieldTreatment::AsIntent});
  set.add(ToolPolicy{"get_balance", false, {}, {}, {}, UnknownFieldTreatment::AsIntent});
  set.add(ToolPolicy{"confirm_receipt", false, {}, {}, {}, UnknownFieldTreatment::AsIntent});
  set.add(ToolPolicy{"create_server", true, {"name", "region"}, {"request_id"}, {}, UnknownFieldTreatment::AsIntent});
  set.add(ToolPolicy{"list_servers", false, {}, {}, {}, UnknownFieldTreatment::AsIntent});
  set.add(ToolPolicy{"grant_token", true, {"action", "target", "approver"}, {"reason"}, {}, UnknownFieldTreatment::AsIntent});
  set.add(ToolPolicy{"delete_data", true, {"target"}, {"reason"}, {"token"}, UnknownFieldTreatment::AsIntent});
  return set;
}

Json ScenarioReport::to_json() const {
  Json doc = Json::object();
  doc["scenario"] = scenario;
  doc["trials"] = trials;
  doc["fence_enabled"] = fence_enabled;
  doc["duplicates_observed"] = duplicates_observed;
  doc["trials_with_duplicates"] = trials_with_duplicates;
  doc["token_reuse_successes"] = token_reuse_successes;
  doc["passed"] = passed;
  doc["failures"] = failures;
  doc["per_trial"] = per_trial;
  doc["expect"] = expect;
  return doc;
}

namespace {

std::set<std::string> servers_in(const ScenarioSpec& spec) {
  std::set<std::string> out;
  for (const auto& step : spec.steps) out.insert(step.server);
  return out;
}

std::map<std::string, std::string> default_routes() {
  return {{"transfer", "bank"},       {"get_balance", "bank"}, {"confirm_receipt", "bank"},
          {"create_server", "cloud"}, {"list_servers", "cloud"}, {"grant_token", "approval"},
          {"delete_data", "approval"}};
}

int count_steps_for_tool(const ScenarioSpec& spec, const std::string& tool) {
  int n = 0;
  for (const auto& step : spec.steps) {
    if (step.tool == tool) n++;
  }
  return n;
}

struct ExpectChecker {
  const Json& expect;
  std::vector<std::string>& failures;

  void equals(const char* key, int64_t actual) {
    if (!expect.contains(key)) return;
    int64_t want = expect[key].get<int64_t>();
    if (actual != want) {
      failures.push_back(std::string(key) + ": expected " + std::to_string(want) + ", got " +
                         std::to_string(actual));
    }
  }
  void per_trial_equals(const char* key, const Json& per_trial, const char* field) {
    if (!expect.contains(key)) return;
    int64_t want = expect[key].get<int64_t>();
    for (const auto& trial : per_trial) {
      int64_t actual = trial.value(field, int64_t{-1});
      if (actual != want) {
        failures.push_back(std::string(key) + ": trial " +
                           std::to_string(trial.value("trial", -1)) + " expected " +
                           std::to_string(want) + ", got " + std::to_string(actual));
      }
    }
  }
  void require_true(const char* key, bool actual, const std::string& what) {
    if (!expect.contains(key) || !expect[key].get<bool>()) return;
    if (!actual) failures.push_back(what);
  }
};

}  // namespace

ScenarioReport run_scenario(const ScenarioSpec& spec, const std::filesystem::path& workdir) {
  ScenarioReport report;
  report.scenario = spec.name;
  report.trials = spec.trials;
  report.fence_enabled = spec.fence_enabled;
  report.expect = spec.expect;

  const auto servers = servers_in(spec);
  const int intended_transfers = count_steps_for_tool(spec, "transfer");
  const int intended_deletions = count_steps_for_tool(spec, "delete_data");

  bool all_replays_faithful = true;
  bool all_completed = true;

  for (int trial = 0; trial < spec.trials; ++trial) {
    const uint64_t trial_seed = spec.base_seed * 7919 + static_cast<uint64_t>(trial);

    std::optional<BankServer> bank;
    std::optional<CloudServer> cloud;
    std::optional<ApprovalServer> approval;
    std::vector<UpstreamSpec> upstreams;
    std::map<std::string, std::string> direct_urls;

    if (servers.count("bank")) {
      bank.emplace();
      bank->start();
      if (spec.crash_cycles > 0) bank->inject_crash(spec.crash_cycles);
      upstreams.push_back(UpstreamSpec{"bank", bank->url(), ""});
      direct_urls["bank"] = bank->url();
    }
    if (servers.count("cloud")) {
      cloud.emplace();
      cloud->start();
      upstreams.push_back(UpstreamSpec{"cloud", cloud->url(), ""});
      direct_urls["cloud"] = cloud->url();
    }
    if (servers.count("approval")) {
      approval.emplace(spec.approval_mode == "stateful" ? ValidationMode::Stateful
                                                        : ValidationMode::Stateless,
                       trial_seed);
      approval->start();
      upstreams.push_back(UpstreamSpec{"approval", approval->url(), ""});
      direct_urls["approval"] = approval->url();
    }

    std::optional<ProxyServer> proxy;
    AgentEndpoints endpoints;
    if (spec.fence_enabled) {
      std::filesystem::path trial_dir =
          workdir / ("trial-" + std::to_string(trial));
      std::filesystem::create_directories(trial_dir);
      ProxyConfig cfg;
      cfg.journal_path = trial_dir / "journal.ndjson";
      cfg.upstreams = upstreams;
      cfg.routes = default_routes();
      cfg.default_upstream = upstreams.front().name;
      cfg.fence.unsafe_disable_replay = spec.unsafe_disable_replay;
      proxy.emplace(std::move(cfg), default_scenario_policies());
      proxy->start();
      endpoints.fence_data_url = "http://127.0.0.1:" + std::to_string(proxy->data_port());
      endpoints.fence_control_url = "http://127.0.0.1:" + std::to_string(proxy->control_port());
    } else {
      endpoints.server_urls = direct_urls;
    }

    AgentConfig agent_cfg;
    agent_cfg.session_id = "s-" + spec.name + "-" + std::to_string(trial);
    agent_cfg.steps = spec.steps;
    agent_cfg.checkpoint_index = spec.checkpoint_index;
    agent_cfg.resynth = spec.resynth;
    agent_cfg.resynth.seed = trial_seed;
    agent_cfg.on_blocked = spec.on_blocked;
    agent_cfg.explicit_restore_signal = spec.explicit_restore_signal;
    agent_cfg.deliberate_restores = spec.deliberate_restores;
    if (!spec.per_trial_vars.empty()) {
      agent_cfg.trial_vars = spec.per_trial_vars[trial % spec.per_trial_vars.size()];
    }

    ScriptedAgent agent(agent_cfg, endpoints);
    AgentResult result = agent.run();

    Json trial_doc = Json::object();
    trial_doc["trial"] = trial;
    trial_doc["completed"] = result.completed;
    trial_doc["abort_reason"] = result.abort_reason;
    trial_doc["crashes"] = result.crashes;
    trial_doc["restores"] = result.restores;
    trial_doc["forks"] = result.forks;
    if (!result.completed) all_completed = false;

    int duplicates = 0;
    if (bank) {
      int txns = bank->transaction_count();
      trial_doc["bank_transactions"] = txns;
      trial_doc["transfer_requests"] = bank->request_count("transfer");
      duplicates += std::max(0, txns - intended_transfers);
    }
    int reuse = 0;
    if (approval) {
      int deletions = approval->deletion_count();
      trial_doc["deletions"] = deletions;
      trial_doc["delete_requests"] = approval->request_count("delete_data");
      reuse = std::max(0, deletions - intended_deletions);
    }
    if (cloud) {
      trial_doc["cloud_servers"] = cloud->server_count();
      duplicates += std::max(0, cloud->server_count() - count_steps_for_tool(spec, "create_server"));
    }

    Json counters = Json::object();
    if (bank) counters["bank"] = bank->request_counters();
    if (cloud) counters["cloud"] = cloud->request_counters();
    if (approval) counters["approval"] = approval->request_counters();
    trial_doc["server_request_counters"] = counters;

    if (proxy) {
      Json outcome_counts = Json{{"Forwarded", 0},
                                 {"Replayed", 0},
                                 {"BlockedForkRequired", 0},
                                 {"BlockedCredentialReuse", 0}};
      bool fidelity = true;
      for (const auto& event : proxy->fence().outcome_log(agent_cfg.session_id)) {
        const char* key = fence_outcome_name(event.kind);
        outcome_counts[key] = outcome_counts[key].get<int>() + 1;
        if (event.kind == FenceOutcomeKind::Replayed) {
          auto rec = event.record_id ? proxy->log().record(*event.record_id) : std::nullopt;
          if (!rec || canonical_dump(rec->response) != event.response_canonical) fidelity = false;
        }
      }
      trial_doc["fence_outcomes"] = outcome_counts;
      trial_doc["replay_fidelity"] = fidelity;
      if (!fidelity) all_replays_faithful = false;
    }

    trial_doc["duplicates"] = duplicates;
    trial_doc["token_reuse"] = reuse;
    report.duplicates_observed += duplicates;
    if (duplicates > 0) report.trials_with_duplicates++;
    report.token_reuse_successes += reuse;
    report.per_trial.push_back(trial_doc);

    if (proxy) proxy->stop();
    if (bank) bank->stop();
    if (cloud) cloud->stop();
    if (approval) approval->stop();
  }

  ExpectChecker check{report.expect, report.failures};
  check.equals("duplicates_total", report.duplicates_observed);
  check.equals("trials_with_duplicates", report.trials_with_duplicates);
  check.equals("token_reuse_total", report.token_reuse_successes);
  check.per_trial_equals("per_trial_bank_transactions", report.per_trial, "bank_transactions");
  check.per_trial_equals("per_trial_transfer_requests", report.per_trial, "transfer_requests");
  check.per_trial_equals("per_trial_delete_requests", report.per_trial, "delete_requests");
  check.per_trial_equals("per_trial_duplicates", report.per_trial, "duplicates");
  check.require_true("require_replay_fidelity", all_replays_faithful,
                     "a replayed response did not byte-match its journaled record");
  check.require_true("require_completed", all_completed, "a trial did not run to completion");
  if (report.expect.contains("min_replayed_per_trial")) {
    int64_t want = report.expect["min_replayed_per_trial"].get<int64_t>();
    for (const auto& trial : report.per_trial) {
      int64_t replayed = 0;
      if (trial.contains("fence_outcomes")) {
        replayed = trial["fence_outcomes"].value("Replayed", 0);
      }
      if (replayed < want) {
        report.failures.push_back("min_replayed_per_trial: trial " +
                                  std::to_string(trial.value("trial", -1)) + " replayed " +
                                  std::to_string(replayed) + " < " + std::to_string(want));
      }
    }
  }
  report.passed = report.failures.empty();
  return report;
}

std::vector<ScenarioReport> run_scenario_suite(const std::vector<ScenarioSpec>& specs,
                                               const std::filesystem::path& workdir) {
  std::vector<ScenarioReport> reports;
  for (const auto& spec : specs) {
    std::filesystem::path scenario_dir = workdir / spec.name;
    std::filesystem::create_directories(scenario_dir);
    reports.push_back(run_scenario(spec, scenario_dir));
  }
  return reports;
}

// ---------------------------------------------------------------------------
// Canned scenarios

namespace {

std::vector<ScenarioStep> action_replay_steps() {
  std::vector<ScenarioStep> steps;
  steps.push_back(ScenarioStep{"get_balance", "bank", Json{{"account", "corp"}}, ""});
  steps.push_back(ScenarioStep{
      "transfer", "bank",
      Json{{"amount", 500}, {"recipient", "Bob"}, {"reference_id", "{{uuid}}"}, {"memo", "{{jitter:memo}}"}},
      "tx"});
  steps.push_back(
      ScenarioStep{"confirm_receipt", "bank", Json{{"txn_id", "{{var:tx.txn_id}}"}}, ""});
  return steps;
}

std::vector<ScenarioStep> authority_steps() {
  std::vector<ScenarioStep> steps;
  steps.push_back(ScenarioStep{
      "grant_token", "approval",
      Json{{"action", "delete_data"}, {"approver", "manager"}, {"target", "{{trial:initial_target}}"}},
      "grant"});
  steps.push_back(ScenarioStep{
      "delete_data", "approval",
      Json{{"reason", "{{jitter:reason}}"}, {"target", "{{trial:initial_target}}"}, {"token", "{{var:grant.token}}"}},
      ""});
  return steps;
}

}  // namespace

ScenarioSpec scenario_action_replay(bool fence, int trials, int crash_cycles, uint64_t seed) {
  ScenarioSpec spec;
  spec.name = std::string("action-replay-") + (fence ? "fence" : "open") +
              (crash_cycles != 1 ? "-k" + std::to_string(crash_cycles) : "");
  spec.trials = trials;
  spec.base_seed = seed;
  spec.fence_enabled = fence;
  spec.crash_cycles = crash_cycles;
  spec.checkpoint_index = 1;  // after verification, before the transfer
  spec.steps = action_replay_steps();
  spec.resynth.text_jitter = 0.5;

  if (fence) {
    spec.expect = Json{{"duplicates_total", 0},
                       {"trials_with_duplicates", 0},
                       {"per_trial_bank_transactions", 1},
                       {"per_trial_transfer_requests", 1},
                       {"min_replayed_per_trial", crash_cycles > 0 ? 1 : 0},
                       {"require_replay_fidelity", true},
                       {"require_completed", true}};
  } else {
    spec.expect = Json{{"duplicates_total", crash_cycles * trials},
                       {"trials_with_duplicates", crash_cycles > 0 ? trials : 0},
                       {"per_trial_bank_transactions", crash_cycles + 1},
                       {"require_completed", true}};
  }
  return spec;
}

ScenarioSpec scenario_action_replay_baseline(int trials, uint64_t seed) {
  ScenarioSpec spec = scenario_action_replay(false, trials, 0, seed);
  spec.name = "action-replay-baseline";
  spec.expect = Json{{"duplicates_total", 0},
                     {"trials_with_duplicates", 0},
                     {"per_trial_bank_transactions", 1},
                     {"require_completed", true}};
  return spec;
}

ScenarioSpec scenario_authority_resurrection(const std::string& approval_mode, bool fence,
                                             int trials, uint64_t seed) {
  ScenarioSpec spec;
  spec.name = "authority-resurrection-" + approval_mode + (fence ? "-fence" : "-open");
  spec.trials = trials;
  spec.base_seed = seed;
  spec.fence_enabled = fence;
  spec.checkpoint_index = 1;  // just after approval was granted
  spec.steps = authority_steps();
  spec.approval_mode = approval_mode;
  spec.deliberate_restores = 1;  // the insider rewinds after the run completes
  spec.resynth.text_jitter = 0.5;
  spec.resynth.intent_mutation =
      ResynthesisModel::IntentMutation{"target", Json("{{trial:redirect_target}}")};
  spec.per_trial_vars = {Json{{"initial_target", "Alice"}, {"redirect_target", "Bob"}},
                         Json{{"initial_target", "Carol"}, {"redirect_target", "Mallory"}}};

  if (fence) {
    spec.expect = Json{{"token_reuse_total", 0}, {"per_trial_delete_requests", 1}};
  } else if (approval_mode == "stateless") {
    spec.expect = Json{{"token_reuse_total", trials}};
  } else {
    spec.expect = Json{{"token_reuse_total", 0}};
  }
  return spec;
}

ScenarioSpec scenario_divergent_redirect(bool approve_fork, uint64_t seed) {
  ScenarioSpec spec = scenario_action_replay(true, 1, 1, seed);
  spec.name = approve_fork ? "divergent-redirect-fork" : "divergent-redirect-abort";
  spec.on_blocked = approve_fork ? "fork" : "abort";
  spec.resynth.intent_mutation = ResynthesisModel::IntentMutation{"recipient", Json("Carol")};
  if (approve_fork) {
    // After the fork the re-issued transfer is a fresh journaled effect, so
    // the bank ends with exactly two transfers: Bob once, Carol once.
    spec.expect = Json{{"per_trial_bank_transactions", 2}, {"require_completed", true}};
  } else {
    spec.expect = Json{{"per_trial_bank_transactions", 1}};
  }
  return spec;
}

std::vector<ScenarioSpec> paper_repro_suite() {
  std::vector<ScenarioSpec> suite;
  suite.push_back(scenario_action_replay(false, 10, 1, 101));
  suite.push_back(scenario_action_replay_baseline(10, 102));
  suite.push_back(scenario_action_replay(true, 10, 1, 103));
  suite.push_back(scenario_authority_resurrection("stateless", false, 2, 104));
  suite.push_back(scenario_authority_resurrection("stateless", true, 2, 105));
  suite.push_back(scenario_authority_resurrection("stateful", false, 2, 106));
  return suite;
}

// ---------------------------------------------------------------------------
// Configuration files

namespace {

ScenarioStep step_from_json(const Json& doc) {
  ScenarioStep step;
  step.tool = doc.value("tool", "");
  step.server = doc.value("server", "");
  if (step.tool.empty() || step.server.empty()) {
    throw Error(Errc::ScenarioMalformed, "step needs tool and server");
  }
  if (doc.contains("args")) step.args_template = doc["args"];
  step.save_as = doc.value("save_as", "");
  return step;
}

ScenarioSpec spec_from_json(const Json& doc) {
  ScenarioSpec spec;
  if (doc.contains("preset")) {
    const std::string preset = doc["preset"].get<std::string>();
    uint64_t seed = doc.value("base_seed", uint64_t{1});
    int trials = doc.value("trials", 0);
    if (preset == "action_replay") {
      spec = scenario_action_replay(doc.value("fence_enabled", false),
                                    trials > 0 ? trials : 10, doc.value("crash_cycles", 1), seed);
    } else if (preset == "action_replay_baseline") {
      spec = scenario_action_replay_baseline(trials > 0 ? trials : 10, seed);
    } else if (preset == "authority_resurrection") {
      spec = scenario_authority_resurrection(doc.value("approval_mode", "stateless"),
                                             doc.value("fence_enabled", false),
                                             trials > 0 ? trials : 2, seed);
    } else if (preset == "divergent_redirect") {
      spec = scenario_divergent_redirect(doc.value("approve_fork", true), seed);
    } else {
      throw Error(Errc::ScenarioMalformed, "unknown preset '" + preset + "'");
    }
    if (doc.contains("name")) spec.name = doc["name"].get<std::string>();
    if (doc.contains("unsafe_disable_replay")) {
      spec.unsafe_disable_replay = doc["unsafe_disable_replay"].get<bool>();
    }
    if (doc.contains("explicit_restore_signal")) {
      spec.explicit_restore_signal = doc["explicit_restore_signal"].get<bool>();
    }
    if (doc.contains("expect")) spec.expect = doc["expect"];
    return spec;
  }

  spec.name = doc.value("name", "");
  if (spec.name.empty()) throw Error(Errc::ScenarioMalformed, "scenario needs a name");
  spec.trials = doc.value("trials", 1);
  if (spec.trials < 0) throw Error(Errc::ScenarioMalformed, "trials must be >= 0");
  spec.base_seed = doc.value("base_seed", uint64_t{1});
  spec.fence_enabled = doc.value("fence_enabled", false);
  spec.crash_cycles = doc.value("crash_cycles", 0);
  spec.checkpoint_index = doc.value("checkpoint_index", -1);
  if (auto it = doc.find("steps"); it != doc.end() && it->is_array()) {
    for (const auto& s : *it) spec.steps.push_back(step_from_json(s));
  }
  if (spec.steps.empty()) throw Error(Errc::ScenarioMalformed, "scenario needs steps");
  if (auto it = doc.find("resynthesis"); it != doc.end() && it->is_object()) {
    spec.resynth.text_jitter = it->value("text_jitter", 0.0);
    if (it->contains("intent_mutation")) {
      const Json& m = (*it)["intent_mutation"];
      spec.resynth.intent_mutation =
          ResynthesisModel::IntentMutation{m.value("path", ""), m.value("new_value", Json())};
    }
  }
  spec.approval_mode = doc.value("approval_mode", "stateless");
  spec.on_blocked = doc.value("on_blocked", "abort");
  spec.deliberate_restores = doc.value("deliberate_restores", 0);
  spec.explicit_restore_signal = doc.value("explicit_restore_signal", true);
  spec.unsafe_disable_replay = doc.value("unsafe_disable_replay", false);
  if (auto it = doc.find("per_trial_vars"); it != doc.end() && it->is_array()) {
    for (const auto& v : *it) spec.per_trial_vars.push_back(v);
  }
  if (doc.contains("expect")) spec.expect = doc["expect"];
  return spec;
}

}  // namespace

std::vector<ScenarioSpec> suite_from_json(const Json& doc) {
  if (!doc.is_object() || !doc.contains("scenarios") || !doc["scenarios"].is_array()) {
    throw Error(Errc::ScenarioMalformed, "suite config needs a 'scenarios' list");
  }
  std::vector<ScenarioSpec> specs;
  for (const auto& entry : doc["scenarios"]) specs.push_back(spec_from_json(entry));
  return specs;
}

std::vector<ScenarioSpec> suite_from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(Errc::ScenarioMalformed, "cannot read scenario config: " + path.string());
  std::ostringstream buffer;
  buffer << in.rdbuf();
  Json doc;
  try {
    doc = parse_strict(buffer.str());
  } catch (const Error&) {
    throw Error(Errc::ScenarioMalformed, "scenario config is not valid JSON: " + path.string());
  }
  return suite_from_json(doc);
}

Json reports_to_json(const std::vector<ScenarioReport>& reports) {
  Json list = Json::array();
  for (const auto& report : reports) list.push_back(report.to_json());
  return Json{{"reports", list}};
}

std::string render_report_table(const Json& reports_doc) {
  std::ostringstream out;
  out << "scenario                                  fence  trials  dup_trials  duplicates  "
         "token_reuse  result\n";
  out << "----------------------------------------  -----  ------  ----------  ----------  "
         "-----------  ------\n";
  if (!reports_doc.is_object() || !reports_doc.contains("reports")) return out.str();
  for (const auto& r : reports_doc["reports"]) {
    char line[256];
    std::string dup_trials = std::to_string(r.value("trials_with_duplicates", 0)) + "/" +
                             std::to_string(r.value("trials", 0));
    std::snprintf(line, sizeof(line), "%-40s  %-5s  %6d  %10s  %10d  %11d  %s",
                  r.value("scenario", std::string("?")).c_str(),
                  r.value("fence_enabled", false) ? "on" : "off", r.value("trials", 0),
                  dup_trials.c_str(), r.value("duplicates_observed", 0),
                  r.value("token_reuse_successes", 0),
                  r.value("passed", false) ? "ok" : "FAIL");
    out << line << "\n";
    if (!r.value("passed", false) && r.contains("failures")) {
      for (const auto& failure : r["failures"]) {
        out << "    ! " << failure.get<std::string>() << "\n";
      }
    }
  }
  return out.str();
}

bool all_passed(const std::vector<ScenarioReport>& reports) {
  for (const auto& report : reports) {
    if (!report.passed) return false;
  }
  return true;
}

}  // namespace acrfence::simlab
