#pragma once

#include <map>
#include <string>
#include <vector>

#include "keygate/config.hpp"
#include "keygate/training.hpp"

namespace keygate {

// ---------------------------------------------------------------------------
// Experiment specification
// ---------------------------------------------------------------------------

enum class AgentKind { Hierarchical, Flat };

const std::string& agent_kind_name(AgentKind k);
AgentKind agent_kind_from_name(const std::string& name);

struct ExperimentSpec {
  std::string name = "experiment";
  AgentKind kind = AgentKind::Hierarchical;
  HLLossWeights hl_weights{1.0, 1.0};
  FlatLossWeights flat_weights{1.0, 1.0, 1.0};
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::vector<TaskId> tasks{kAllTasks.begin(), kAllTasks.end()};
  int updates = 1000;
  int eval_episodes = 20;  // per task, final evaluation

  PolicyConfig policy;       // vocab_size filled from the dataset vocabulary
  TrainConfig train;         // budget fields (updates/tasks/eval) come from above
  VTraceConfig vtrace;
  std::string ll_checkpoint;   // hierarchical only
  std::string data_manifest;   // oracle dataset (shared by flat + hierarchical)
  std::string out_dir = ".";

  // Tasks must be the full set of four; seeds distinct and nonempty.
  void validate() const;

  // Sectioned key-value spec files (same format as run configs).
  static ExperimentSpec load(const std::string& path);
  void save(const std::string& path) const;
  KeyValueFile to_kv() const;
  static ExperimentSpec from_kv(const KeyValueFile& kv);
};

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct TaskEval {
  double success = 0.0;
  double mean_length = 0.0;        // env steps, all episodes
  double mean_instructions = 0.0;  // HL instructions per solved episode
  bool instructions_available = false;  // false when no episode was solved
  int episodes = 0;
};

struct EvalReport {
  std::map<std::string, TaskEval> tasks;  // task name -> eval
  // instruction surface form -> count over recorded episodes
  std::map<std::string, int> instruction_counts;
};

struct ExperimentResult {
  ExperimentSpec spec;
  EvalReport report;                       // mean over seeds
  std::vector<EvalReport> per_seed;
  std::vector<TrainResult> metrics;        // one per seed
  std::vector<std::string> checkpoints;    // saved policy per seed
};

// Trains per spec (one run per seed), evaluates greedily, persists metrics
// and checkpoints under spec.out_dir. Throws when a hierarchical spec's LL
// checkpoint is missing.
ExperimentResult run_experiment(const ExperimentSpec& spec);

// ---------------------------------------------------------------------------
// BC/RL ratio sweep
// ---------------------------------------------------------------------------

// ratio = w_BC : w_RL. 0 -> (0, 1); inf -> (1, 0); otherwise the larger
// weight is 1 and the smaller is 1/ratio (or ratio).
HLLossWeights ratio_to_weights(double ratio);
std::string ratio_label(double ratio);

struct SweepEntry {
  double ratio = 1.0;
  ExperimentResult result;
};

// Runs the hierarchical spec once per ratio (ratio overrides hl_weights).
std::vector<SweepEntry> ablation_sweep(const ExperimentSpec& base,
                                       const std::vector<double>& ratios);

// ---------------------------------------------------------------------------
// Instruction analyses
// ---------------------------------------------------------------------------

struct InstructionAnalysis {
  std::map<std::string, TaskEval> tasks;
  std::map<std::string, int> counts;       // all recorded episodes
  std::map<std::string, int> counts_easy;  // easy-task episodes only
  std::map<std::string, int> counts_hard;
  int min_count = 100;
  // instructions appearing >= min_count times within the group
  int distinct_post_cutoff_easy = 0;
  int distinct_post_cutoff_hard = 0;
  // relative frequency of selected instructions, per group
  double freq(const std::string& instr, bool hard) const;
};

struct AnalyzeOptions {
  int episodes_per_task = 20;
  int min_count = 100;
  double ll_epsilon = 0.0;  // LL execution noise during the recorded episodes
  std::uint64_t seed = 0;
};

InstructionAnalysis analyze_instructions(const HLPolicy& hl, const LLPolicy& ll,
                                         const Vocabulary& vocab,
                                         const AnalyzeOptions& opt);

// ---------------------------------------------------------------------------
// Plot-data export
// ---------------------------------------------------------------------------

// Learning curves: update, seed, then one success column per task.
void emit_learning_curves(const ExperimentResult& result, const std::string& path);
// Sweep table: one row per (ratio, task).
void emit_sweep_table(const std::vector<SweepEntry>& sweep, const std::string& path);
// Instruction analysis: per-task block plus a frequency table.
void emit_instruction_tables(const InstructionAnalysis& analysis,
                             const std::string& means_path,
                             const std::string& freq_path);

}  // namespace keygate
