#include <unistd.h>

#include <fstream>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "httplib.h"

#include "acrfence/errors.hpp"
#include "acrfence/proxy.hpp"
#include "acrfence/simlab/scenario.hpp"

using namespace acrfence;

namespace {

int cmd_serve(const std::string& config_path, const std::vector<std::string>& overrides) {
  ProxyConfig config;
  try {
    config = load_proxy_config(config_path, overrides);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  }

  try {
    ProxyServer proxy(config);
    proxy.start();
    // in stdio mode stdout carries protocol frames; the banner must not
    bool stdio = config.listen_transport == "stdio";
    std::ostream& banner = stdio ? std::cerr : std::cout;
    banner << "acrfence listening\n";
    banner << "  data:    " << (stdio ? std::string("stdio (newline-delimited frames)")
                                      : "http://" + config.listen_host + ":" +
                                            std::to_string(proxy.data_port()) + "/message")
           << "\n";
    banner << "  control: http://" << config.control_host << ":" << proxy.control_port()
           << "/control\n";
    for (const auto& upstream : config.upstreams) {
      banner << "  upstream " << upstream.name << " -> "
             << (upstream.command.empty() ? upstream.url : "spawn: " + upstream.command) << "\n";
    }
    banner << "  journal: " << config.journal_path.string() << "\n" << std::flush;

    if (stdio) {
      proxy.run_stdio(std::cin, std::cout);
      proxy.stop();
      return 0;
    }
    return proxy.run_until_signal();
  } catch (const Error& e) {
    switch (e.code()) {
      case Errc::BindFailure:
      case Errc::UpstreamUnreachable:
        std::cerr << "startup failure: " << e.what() << "\n";
        return 3;
      default:
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
  }
}

int cmd_scenario(const std::string& preset_or_path, const std::string& report_path,
                 const std::string& workdir_arg, bool keep_artifacts) {
  std::vector<simlab::ScenarioSpec> specs;
  try {
    if (preset_or_path == "paper-repro") {
      specs = simlab::paper_repro_suite();
    } else {
      specs = simlab::suite_from_file(preset_or_path);
    }
  } catch (const Error& e) {
    std::cerr << "scenario config error: " << e.what() << "\n";
    return 2;
  }

  std::filesystem::path workdir = workdir_arg.empty()
                                      ? std::filesystem::path(".acrfence-scenario-" +
                                                              std::to_string(::getpid()))
                                      : std::filesystem::path(workdir_arg);
  std::error_code ec;
  std::filesystem::create_directories(workdir, ec);

  auto reports = simlab::run_scenario_suite(specs, workdir);
  Json doc = simlab::reports_to_json(reports);
  std::cout << simlab::render_report_table(doc);

  if (!report_path.empty()) {
    std::ofstream out(report_path);
    out << canonical_dump(doc) << "\n";
  }
  if (!keep_artifacts) std::filesystem::remove_all(workdir, ec);
  return simlab::all_passed(reports) ? 0 : 1;
}

int cmd_log_inspect(const std::string& journal_path, const std::string& session,
                    const std::string& branch, const std::string& tool) {
  std::ifstream in(journal_path);
  if (!in) {
    std::cerr << "cannot read journal: " << journal_path << "\n";
    return 2;
  }
  auto storage = std::make_unique<MemoryJournalStorage>();
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty()) storage->append_line(line);
  }

  std::unique_ptr<EffectLog> log;
  try {
    log = std::make_unique<EffectLog>(std::move(storage));
  } catch (const Error& e) {
    std::cerr << "journal corrupt: " << e.what() << "\n";
    return 2;
  }

  std::cout << "# effect records\n";
  for (const auto& rec : log->records()) {
    if (!session.empty() && rec.session_id != session) continue;
    if (!branch.empty() && rec.branch_id != branch) continue;
    if (!tool.empty() && rec.tool_name != tool) continue;
    Json doc = Json::object();
    doc["record_id"] = rec.record_id;
    doc["session_id"] = rec.session_id;
    doc["branch_id"] = rec.branch_id;
    if (rec.parent_branch_id) doc["parent_branch_id"] = *rec.parent_branch_id;
    doc["seq_index"] = rec.seq_index;
    doc["tool_name"] = rec.tool_name;
    doc["arguments"] = rec.arguments;
    doc["outcome"] = outcome_name(rec.outcome);
    doc["response"] = rec.response;
    doc["consumed_credentials"] = rec.consumed_credentials;
    std::cout << canonical_dump(doc) << "\n";
  }

  std::cout << "# credential consumption cross-reference\n";
  auto attempts = log->reuse_attempts();
  for (const auto& entry : log->consumptions()) {
    auto rec = log->record(entry.consumed_by);
    std::cout << "digest=" << entry.digest.substr(0, 16) << "... field=" << entry.source_field
              << " consumed_by=record " << entry.consumed_by;
    if (rec) {
      std::cout << " tool=" << rec->tool_name << " at (" << rec->session_id << ","
                << rec->branch_id << "," << rec->seq_index << ")";
    }
    std::cout << "\n";
    for (const auto& attempt : attempts) {
      if (attempt.digest != entry.digest) continue;
      std::cout << "    blocked reuse attempt: tool=" << attempt.tool_name << " at ("
                << attempt.session_id << "," << attempt.branch_id << "," << attempt.seq_index
                << ") " << attempt.attempted_at << "\n";
    }
  }
  return 0;
}

int cmd_fork(const std::string& control_url, const std::string& session, const std::string& token,
             const std::string& branch) {
  std::string rest = control_url;
  auto scheme_end = rest.find("://");
  if (scheme_end != std::string::npos) rest = rest.substr(scheme_end + 3);
  auto slash = rest.find('/');
  if (slash != std::string::npos) rest = rest.substr(0, slash);
  std::string host = rest;
  int port = 80;
  if (auto colon = rest.rfind(':'); colon != std::string::npos) {
    host = rest.substr(0, colon);
    port = std::stoi(rest.substr(colon + 1));
  }

  httplib::Client client(host, port);
  client.set_connection_timeout(5, 0);
  Json body = Json{{"op", "approve_fork"},
                   {"session_id", session},
                   {"fork_token", token},
                   {"new_branch_id", branch}};
  auto result = client.Post("/control", canonical_dump(body), "application/json");
  if (!result) {
    std::cerr << "cannot reach control surface at " << control_url << "\n";
    return 1;
  }
  Json reply;
  try {
    reply = parse_strict(result->body);
  } catch (const Error&) {
    std::cerr << "malformed control response\n";
    return 1;
  }
  if (!reply.value("ok", false)) {
    std::cerr << "fork rejected: " << reply["error"].value("message", std::string("unknown error"))
              << "\n";
    return 1;
  }
  std::cout << "fork approved; lineage:\n";
  for (const auto& entry : reply["lineage"]) {
    std::cout << "  " << entry.value("branch_id", std::string("?")) << " (from seq "
              << entry.value("forked_from_seq", 0);
    if (entry.contains("parent_branch_id")) {
      std::cout << ", parent " << entry["parent_branch_id"].get<std::string>();
    }
    std::cout << ")\n";
  }
  return 0;
}

int cmd_report(const std::string& report_path) {
  std::ifstream in(report_path);
  if (!in) {
    std::cerr << "cannot read report: " << report_path << "\n";
    return 2;
  }
  std::ostringstream buffer;
  buffer << in.rdbuf();
  Json doc;
  try {
    doc = parse_strict(buffer.str());
  } catch (const Error& e) {
    std::cerr << "report is not valid JSON: " << e.what() << "\n";
    return 2;
  }
  std::cout << simlab::render_report_table(doc);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acrfence: tool-boundary proxy enforcing exactly-once semantics for "
               "checkpoint-restored agents"};
  app.require_subcommand(1);

  std::string config_path;
  std::vector<std::string> overrides;
  auto* serve = app.add_subcommand("serve", "run the interposition proxy");
  serve->add_option("--config", config_path, "configuration file")
      ->envname("ACRFENCE_CONFIG")
      ->required();
  serve->add_option("--override", overrides, "config override key.path=value (repeatable)");

  std::string scenario_arg;
  std::string report_out;
  std::string workdir;
  bool keep_artifacts = false;
  auto* scenario = app.add_subcommand("scenario", "run attack scenario suites");
  scenario->add_option("preset", scenario_arg, "'paper-repro' or a suite config file")->required();
  scenario->add_option("--report", report_out, "write the machine-readable report here");
  scenario->add_option("--workdir", workdir, "working directory for journals");
  scenario->add_flag("--keep", keep_artifacts, "keep per-trial artifacts");

  std::string journal_path, filter_session, filter_branch, filter_tool;
  auto* log_cmd = app.add_subcommand("log", "inspect an effect journal");
  auto* inspect = log_cmd->add_subcommand("inspect", "print records and the credential view");
  inspect->add_option("--journal", journal_path, "journal file")->required();
  inspect->add_option("--session", filter_session, "filter by session id");
  inspect->add_option("--branch", filter_branch, "filter by branch id");
  inspect->add_option("--tool", filter_tool, "filter by tool name");
  log_cmd->require_subcommand(1);

  std::string control_url, fork_session, fork_token, fork_branch;
  auto* fork = app.add_subcommand("fork", "approve a pending fork on a running fence");
  fork->add_option("--control", control_url, "control surface url")->required();
  fork->add_option("--session", fork_session, "session id")->required();
  fork->add_option("--token", fork_token, "one-time fork token")->required();
  fork->add_option("--branch", fork_branch, "new branch id")->required();

  std::string report_in;
  auto* report = app.add_subcommand("report", "render a saved scenario report");
  report->add_option("--in", report_in, "report JSON file")->required();

  CLI11_PARSE(app, argc, argv);

  if (serve->parsed()) return cmd_serve(config_path, overrides);
  if (scenario->parsed()) return cmd_scenario(scenario_arg, report_out, workdir, keep_artifacts);
  if (log_cmd->parsed()) {
    return cmd_log_inspect(journal_path, filter_session, filter_branch, filter_tool);
  }
  if (fork->parsed()) return cmd_fork(control_url, fork_session, fork_token, fork_branch);
  if (report->parsed()) return cmd_report(report_in);
  return 1;
}
