#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "acrfence/policy.hpp"
#include "acrfence/simlab/agent.hpp"
#include "acrfence/simlab/approval.hpp"

namespace acrfence::simlab {

/// One scenario configuration: a scripted call sequence, a checkpoint
/// position, a crash/restore schedule, and assertions on server-side state.
struct ScenarioSpec {
  std::string name;
  int trials = 1;
  uint64_t base_seed = 1;
  bool fence_enabled = false;
  int crash_cycles = 0;       // malformed confirm_receipt responses per trial
  int checkpoint_index = -1;  // step the checkpoint is placed before
  std::vector<ScenarioStep> steps;
  ResynthesisModel resynth;
  std::string approval_mode = "stateless";  // "stateless" | "stateful"
  std::string on_blocked = "abort";         // "abort" | "fork"
  int deliberate_restores = 0;
  bool explicit_restore_signal = true;
  bool unsafe_disable_replay = false;  // negative control
  std::vector<Json> per_trial_vars;    // cycled by trial index
  Json expect = Json::object();        // suite assertions (see run_scenario)
};

/// Scenario outcome. All counters derive from server-side state, never from
/// proxy claims.
struct ScenarioReport {
  std::string scenario;
  int trials = 0;
  bool fence_enabled = false;
  int duplicates_observed = 0;       // total extra irreversible effects
  int trials_with_duplicates = 0;
  int token_reuse_successes = 0;     // cross-restore deletions that went through
  bool passed = true;
  std::vector<std::string> failures;
  Json per_trial = Json::array();
  Json expect = Json::object();

  Json to_json() const;
};

/// Policies for the simulated tool set (bank/cloud/approval).
PolicySet default_scenario_policies();

ScenarioReport run_scenario(const ScenarioSpec& spec, const std::filesystem::path& workdir);
std::vector<ScenarioReport> run_scenario_suite(const std::vector<ScenarioSpec>& specs,
                                               const std::filesystem::path& workdir);

/// Built-in reproduction preset: both attack classes with and without the
/// fence, plus the no-checkpoint baseline.
std::vector<ScenarioSpec> paper_repro_suite();

std::vector<ScenarioSpec> suite_from_json(const Json& doc);
std::vector<ScenarioSpec> suite_from_file(const std::filesystem::path& path);

Json reports_to_json(const std::vector<ScenarioReport>& reports);
std::string render_report_table(const Json& reports_doc);
bool all_passed(const std::vector<ScenarioReport>& reports);

// Canned scenario builders (presets and tests share these).
ScenarioSpec scenario_action_replay(bool fence, int trials, int crash_cycles, uint64_t seed);
ScenarioSpec scenario_action_replay_baseline(int trials, uint64_t seed);
ScenarioSpec scenario_authority_resurrection(const std::string& approval_mode, bool fence,
                                             int trials, uint64_t seed);
ScenarioSpec scenario_divergent_redirect(bool approve_fork, uint64_t seed);

}  // namespace acrfence::simlab
