#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cstdio>
#include <fstream>
#include <thread>

#include "httplib.h"

#include "acrfence/effectlog.hpp"
#include "acrfence/proxy.hpp"
#include "acrfence/simlab/bank.hpp"
#include "testutil.hpp"

using namespace acrfence;
using testutil::TempDir;

namespace {

struct CommandResult {
  int exit_code = -1;
  std::string output;  // stdout + stderr
};

CommandResult run_cli(const std::string& args) {
  std::string command = std::string(ACRFENCE_BIN) + " " + args + " 2>&1";
  FILE* pipe = popen(command.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CommandResult result;
  char buffer[4096];
  size_t n;
  while ((n = fread(buffer, 1, sizeof(buffer), pipe)) > 0) result.output.append(buffer, n);
  int status = pclose(pipe);
  result.exit_code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return result;
}

void write_file(const std::filesystem::path& path, const std::string& content) {
  std::ofstream out(path);
  out << content;
}

}  // namespace

TEST_CASE("usage errors exit nonzero") {
  CHECK(run_cli("").exit_code != 0);
  CHECK(run_cli("frobnicate").exit_code != 0);
  CHECK(run_cli("scenario").exit_code != 0);          // missing preset
  CHECK(run_cli("log inspect").exit_code != 0);       // missing --journal
  CHECK(run_cli("serve --no-such-flag").exit_code != 0);
}

TEST_CASE("log inspect prints records and the credential cross-reference") {
  TempDir dir("cli");
  auto journal = dir.file("journal.ndjson");
  {
    EffectLog log(journal);
    ToolCall deletion;
    deletion.session_id = "s1";
    deletion.branch_id = "b0";
    deletion.seq_index = 1;
    deletion.tool_name = "delete_data";
    deletion.arguments = Json{{"target", "Alice"}, {"token", "TOK-abc"}};
    ToolPolicy policy;
    policy.tool_name = "delete_data";
    policy.credential_fields = {"token"};
    uint64_t id = log.append_pending(deletion, policy, Json{{"proxy", "t"}});
    log.finalize(id, Json{{"result", Json{{"status", "deleted"}}}}, Outcome::Succeeded);
    log.mark_consumed({CredentialToken{"TOK-abc", "token"}}, id);

    ToolCall transfer = deletion;
    transfer.seq_index = 2;
    transfer.tool_name = "transfer";
    transfer.arguments = Json{{"amount", 5}, {"recipient", "Bob"}};
    ToolPolicy transfer_policy;
    transfer_policy.tool_name = "transfer";
    log.append_pending(transfer, transfer_policy, Json{{"proxy", "t"}});

    ToolCall reuse = deletion;
    reuse.branch_id = "b0.r1";
    log.record_reuse_attempt("TOK-abc", reuse);
  }

  auto all = run_cli("log inspect --journal " + journal.string());
  CHECK(all.exit_code == 0);
  CHECK(all.output.find("\"tool_name\":\"delete_data\"") != std::string::npos);
  CHECK(all.output.find("\"tool_name\":\"transfer\"") != std::string::npos);
  CHECK(all.output.find("consumed_by=record 1") != std::string::npos);
  CHECK(all.output.find("blocked reuse attempt") != std::string::npos);
  CHECK(all.output.find("TOK-abc") == std::string::npos);  // raw tokens never shown

  auto filtered = run_cli("log inspect --journal " + journal.string() + " --tool transfer");
  CHECK(filtered.exit_code == 0);
  CHECK(filtered.output.find("\"tool_name\":\"transfer\"") != std::string::npos);
  CHECK(filtered.output.find("\"tool_name\":\"delete_data\"") == std::string::npos);
}

TEST_CASE("log inspect on a missing or empty journal") {
  auto missing = run_cli("log inspect --journal /nonexistent/journal.ndjson");
  CHECK(missing.exit_code == 2);
  CHECK(missing.output.find("cannot read journal") != std::string::npos);

  TempDir dir("cli");
  auto journal = dir.file("empty.ndjson");
  write_file(journal, "");
  auto empty = run_cli("log inspect --journal " + journal.string());
  CHECK(empty.exit_code == 0);
  CHECK(empty.output.find("# effect records") != std::string::npos);
}

TEST_CASE("scenario rejects unknown presets and unreadable configs") {
  CHECK(run_cli("scenario no-such-preset").exit_code == 2);
  TempDir dir("cli");
  auto bad = dir.file("bad.json");
  write_file(bad, "{nope");
  CHECK(run_cli("scenario " + bad.string()).exit_code == 2);
}

TEST_CASE("scenario with a zero-trial config succeeds with an empty table") {
  TempDir dir("cli");
  auto config = dir.file("suite.json");
  write_file(config, R"({"scenarios":[{"name":"empty","trials":0,"checkpoint_index":0,
    "steps":[{"tool":"get_balance","server":"bank","args":{"account":"corp"}}]}]})");
  auto result = run_cli("scenario " + config.string() + " --workdir " + dir.file("work").string());
  CHECK(result.exit_code == 0);
  CHECK(result.output.find("empty") != std::string::npos);
  CHECK(result.output.find("ok") != std::string::npos);
}

TEST_CASE("scenario flags a deliberately broken fence and exits 1") {
  TempDir dir("cli");
  auto config = dir.file("suite.json");
  write_file(config, R"({"scenarios":[{"preset":"action_replay","fence_enabled":true,
    "trials":1,"base_seed":7,"unsafe_disable_replay":true}]})");
  auto result = run_cli("scenario " + config.string() + " --workdir " + dir.file("work").string());
  CHECK(result.exit_code == 1);
  CHECK(result.output.find("FAIL") != std::string::npos);
  CHECK(result.output.find("duplicates_total") != std::string::npos);
}

TEST_CASE("scenario writes a machine-readable report that the report command renders") {
  TempDir dir("cli");
  auto config = dir.file("suite.json");
  auto report_path = dir.file("report.json");
  write_file(config, R"({"scenarios":[{"preset":"action_replay","trials":1,"base_seed":3}]})");
  auto run = run_cli("scenario " + config.string() + " --report " + report_path.string() +
                     " --workdir " + dir.file("work").string());
  CHECK(run.exit_code == 0);
  REQUIRE(std::filesystem::exists(report_path));

  auto rendered = run_cli("report --in " + report_path.string());
  CHECK(rendered.exit_code == 0);
  CHECK(rendered.output.find("action-replay-open") != std::string::npos);

  CHECK(run_cli("report --in /nonexistent.json").exit_code == 2);
}

TEST_CASE("scenario leaves no state behind without --keep") {
  TempDir dir("cli");
  auto config = dir.file("suite.json");
  write_file(config, R"({"scenarios":[{"preset":"action_replay","trials":1,"base_seed":5}]})");
  auto workdir = dir.file("work");
  auto result = run_cli("scenario " + config.string() + " --workdir " + workdir.string());
  CHECK(result.exit_code == 0);
  CHECK_FALSE(std::filesystem::exists(workdir));

  auto kept = run_cli("scenario " + config.string() + " --workdir " + workdir.string() + " --keep");
  CHECK(kept.exit_code == 0);
  CHECK(std::filesystem::exists(workdir));
}

TEST_CASE("log inspect audits the journals a fenced scenario leaves behind") {
  TempDir dir("cli");
  auto workdir = dir.file("work");

  // fenced action-replay trial: exactly one succeeded transfer in the journal
  auto config_a = dir.file("suite-a.json");
  write_file(config_a, R"({"scenarios":[{"preset":"action_replay","fence_enabled":true,
    "trials":1,"base_seed":11}]})");
  REQUIRE(run_cli("scenario " + config_a.string() + " --workdir " + workdir.string() + " --keep")
              .exit_code == 0);
  auto journal_a = workdir / "action-replay-fence" / "trial-0" / "journal.ndjson";
  REQUIRE(std::filesystem::exists(journal_a));
  auto inspect_a = run_cli("log inspect --journal " + journal_a.string() + " --tool transfer");
  CHECK(inspect_a.exit_code == 0);
  size_t records = 0, pos = 0;
  while ((pos = inspect_a.output.find("\"tool_name\":\"transfer\"", pos)) != std::string::npos) {
    records++;
    pos++;
  }
  CHECK(records == 1);
  CHECK(inspect_a.output.find("\"outcome\":\"succeeded\"") != std::string::npos);

  // fenced authority trial: consumption and the blocked reuse are visible
  auto config_b = dir.file("suite-b.json");
  write_file(config_b, R"({"scenarios":[{"preset":"authority_resurrection","fence_enabled":true,
    "trials":1,"base_seed":12}]})");
  REQUIRE(run_cli("scenario " + config_b.string() + " --workdir " + workdir.string() + " --keep")
              .exit_code == 0);
  auto journal_b =
      workdir / "authority-resurrection-stateless-fence" / "trial-0" / "journal.ndjson";
  REQUIRE(std::filesystem::exists(journal_b));
  auto inspect_b = run_cli("log inspect --journal " + journal_b.string());
  CHECK(inspect_b.exit_code == 0);
  CHECK(inspect_b.output.find("\"target\":\"Alice\"") != std::string::npos);
  CHECK(inspect_b.output.find("consumed_by=record") != std::string::npos);
  CHECK(inspect_b.output.find("blocked reuse attempt") != std::string::npos);
  CHECK(inspect_b.output.find("tool=delete_data") != std::string::npos);
}

TEST_CASE("fork approves a pending divergence over the control surface") {
  TempDir dir("cli");
  simlab::BankServer bank;
  bank.start();
  ProxyConfig cfg;
  cfg.journal_path = dir.file("journal.ndjson");
  cfg.upstreams = {UpstreamSpec{"bank", bank.url(), ""}};
  cfg.default_upstream = "bank";
  cfg.routes = {{"transfer", "bank"}};
  PolicySet policies;
  policies.add(ToolPolicy{"transfer", true, {"amount", "recipient"}, {"reference_id"}, {},
                          UnknownFieldTreatment::AsIntent});
  ProxyServer proxy(std::move(cfg), std::move(policies));
  proxy.start();
  std::string control = "http://127.0.0.1:" + std::to_string(proxy.control_port());

  // no pending fork yet
  proxy.fence().ensure_session("s1");
  auto premature = run_cli("fork --control " + control + " --session s1 --token x --branch b1");
  CHECK(premature.exit_code == 1);
  CHECK(premature.output.find("no blocked call") != std::string::npos);

  // block a divergent retry to mint a token
  httplib::Client agent("127.0.0.1", proxy.data_port());
  httplib::Headers headers{{"Mcp-Session-Id", "s1"}};
  auto send = [&](int id, const std::string& recipient, const std::string& ref) {
    Json body = Json{{"id", id},
                     {"jsonrpc", "2.0"},
                     {"method", "tools/call"},
                     {"params", Json{{"arguments", Json{{"amount", 500},
                                                        {"recipient", recipient},
                                                        {"reference_id", ref}}},
                                     {"name", "transfer"}}}};
    auto res = agent.Post("/message", headers, canonical_dump(body), "application/json");
    REQUIRE(res);
    return parse_strict(res->body);
  };
  send(1, "Bob", "u1");
  proxy.fence().register_restore("s1", 0);
  Json blocked = send(2, "Carol", "u2");
  std::string token = blocked["error"]["data"]["fork_token"].get<std::string>();

  auto wrong = run_cli("fork --control " + control + " --session s1 --token nope --branch b1");
  CHECK(wrong.exit_code == 1);

  auto approved =
      run_cli("fork --control " + control + " --session s1 --token " + token + " --branch b1");
  CHECK(approved.exit_code == 0);
  CHECK(approved.output.find("fork approved") != std::string::npos);
  CHECK(approved.output.find("b1") != std::string::npos);

  // the token is one-time
  auto reused =
      run_cli("fork --control " + control + " --session s1 --token " + token + " --branch b2");
  CHECK(reused.exit_code == 1);

  proxy.stop();
  bank.stop();
}

TEST_CASE("serve exits 2 on config problems, with the offending path in the message") {
  TempDir dir("cli");
  CHECK(run_cli("serve --config /nonexistent-config.json").exit_code == 2);

  auto bad_json = dir.file("bad.json");
  write_file(bad_json, "{nope");
  CHECK(run_cli("serve --config " + bad_json.string()).exit_code == 2);

  auto missing_dir = dir.file("config.json");
  write_file(missing_dir, R"({"journal_path":")" + (dir.path() / "absent" / "j.ndjson").string() +
                              R"(","upstreams":[{"name":"bank","url":"http://127.0.0.1:9"}]})");
  auto result = run_cli("serve --config " + missing_dir.string());
  CHECK(result.exit_code == 2);
  CHECK(result.output.find("absent") != std::string::npos);
}

TEST_CASE("serve exits 3 when an upstream is unreachable at startup") {
  TempDir dir("cli");
  auto config = dir.file("config.json");
  write_file(config, R"({"journal_path":")" + dir.file("j.ndjson").string() +
                         R"(","upstreams":[{"name":"bank","url":"http://127.0.0.1:1"}]})");
  auto result = run_cli("serve --config " + config.string());
  CHECK(result.exit_code == 3);
  CHECK(result.output.find("unreachable") != std::string::npos);
}

TEST_CASE("serve runs until interrupted and shuts down cleanly") {
  TempDir dir("cli");
  simlab::BankServer bank;
  bank.start();
  auto config = dir.file("config.json");
  write_file(config, R"({"journal_path":")" + dir.file("j.ndjson").string() +
                         R"(","upstreams":[{"name":"bank","url":")" + bank.url() + R"("}]})");
  auto stdout_path = dir.file("serve.out");

  pid_t child = fork();
  REQUIRE(child >= 0);
  if (child == 0) {
    FILE* out = fopen(stdout_path.c_str(), "w");
    dup2(fileno(out), STDOUT_FILENO);
    dup2(fileno(out), STDERR_FILENO);
    execl(ACRFENCE_BIN, ACRFENCE_BIN, "serve", "--config", config.c_str(), (char*)nullptr);
    _exit(127);
  }

  // wait for the listening banner, then interrupt
  std::string banner;
  for (int i = 0; i < 100; ++i) {
    std::this_thread::sleep_for(std::chrono::milliseconds(50));
    std::ifstream in(stdout_path);
    banner.assign((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (banner.find("journal:") != std::string::npos) break;
  }
  CHECK(banner.find("acrfence listening") != std::string::npos);
  CHECK(banner.find("upstream bank") != std::string::npos);

  kill(child, SIGINT);
  int status = 0;
  REQUIRE(waitpid(child, &status, 0) == child);
  REQUIRE(WIFEXITED(status));
  CHECK(WEXITSTATUS(status) == 0);

  bank.stop();
}
