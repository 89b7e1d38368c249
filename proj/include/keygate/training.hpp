#pragma once

#include <map>
#include <string>
#include <vector>

#include "keygate/agents.hpp"
#include "keygate/oracle.hpp"

namespace keygate {

// ---------------------------------------------------------------------------
// Loss configuration
// ---------------------------------------------------------------------------

struct HLLossWeights {
  double w_bc = 1.0;
  double w_rl = 1.0;
  void validate() const;  // nonnegative, not both zero
};

struct VTraceConfig {
  double gamma = 0.99;
  double rho_bar = 1.0;  // importance-weight clip, >= c_bar
  double c_bar = 1.0;    // trace clip
  double value_weight = 0.5;
  double entropy_weight = 0.01;
  // Advantage = (monte-carlo return - V) and value target = return, instead
  // of the V-trace recursion.
  bool literal_formula = false;
  void validate() const;
};

struct VTraceResult {
  std::vector<double> vs;      // value targets
  std::vector<double> pg_adv;  // policy-gradient advantages
};

// Backward-recursion V-trace over one sequence. `dones[t]` cuts bootstrapping
// and the trace after step t; the bootstrap value is used past the last step
// when it is not terminal.
VTraceResult vtrace_targets(const std::vector<double>& rewards,
                            const std::vector<double>& values,
                            double bootstrap_value,
                            const std::vector<double>& target_logp,
                            const std::vector<double>& behavior_logp,
                            const std::vector<std::uint8_t>& dones,
                            const VTraceConfig& cfg);

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

inline constexpr int kHLPeriod = 8;  // env steps between HL decisions

struct HLDecision {
  Observation obs;
  Instruction g;
  double behavior_logprob = 0.0;
  double value = 0.0;
  double reward = 0.0;  // summed over the LL period
  bool done = false;
};

struct RolloutBatch {
  TaskId task = TaskId::KeyChoice;
  std::uint64_t seed = 0;
  std::vector<HLDecision> decisions;
  double bootstrap_value = 0.0;  // value past the last decision (0 if terminal)
  double episode_reward = 0.0;
  int env_steps = 0;
  std::int64_t param_version = 0;
};

struct HierRolloutOptions {
  int hl_period = kHLPeriod;
  double ll_epsilon = 0.0;  // LL executor noise: uniform action with this prob
  bool sample_hl = true;    // greedy decode when false
  int step_limit = kDefaultStepLimit;
};

// One hierarchical episode: HL decides every hl_period steps, the frozen LL
// acts every step on the latest instruction. Throws std::logic_error unless
// ll's parameters are frozen.
RolloutBatch run_hierarchical_episode(const HLPolicy& hl, const LLPolicy& ll,
                                      TaskId task, std::uint64_t seed, Rng& rng,
                                      const HierRolloutOptions& opt);

struct FlatRolloutStep {
  Observation obs;
  Action action = Action::MoveForward;
  double behavior_logprob = 0.0;
  double value = 0.0;
  double reward = 0.0;
  bool done = false;
};

struct FlatRollout {
  TaskId task = TaskId::KeyChoice;
  std::uint64_t seed = 0;
  std::vector<FlatRolloutStep> steps;
  double bootstrap_value = 0.0;
  double episode_reward = 0.0;
  std::int64_t param_version = 0;
};

FlatRollout run_flat_episode(const FlatPolicy& flat, TaskId task,
                             std::uint64_t seed, Rng& rng, bool sample = true,
                             int step_limit = kDefaultStepLimit);

// ---------------------------------------------------------------------------
// Losses (built on the caller's tape; scalars are 1x1 Vars)
// ---------------------------------------------------------------------------

// -(1/B) sum_n sum_t ln pi(a | o_<=t, g_t) over a K-step window batch.
// `carry_state` is the per-slot recurrent state, reset where the batch flags
// window starts and updated (detached) on return. Throws on an empty batch.
Var ll_bc_loss(Tape& tape, LLPolicy& policy, const Batch& batch,
               Mat& carry_state);

// -(1/B) sum over HL decision steps (t % hl_period == 0) of the
// token-factorized ln pi(g | o_<=t). Requires window % hl_period == 0.
Var hl_bc_loss(Tape& tape, HLPolicy& policy, const Batch& batch,
               Mat& carry_state, int hl_period = kHLPeriod);

struct HLRLStats {
  double policy_loss = 0.0;
  double value_loss = 0.0;
  double mean_entropy = 0.0;
  int decisions = 0;
};

// V-trace actor-critic loss over completed rollouts: advantage-weighted
// log-probs + value regression - entropy bonus. Advantages and value targets
// are constants (no gradient into them).
Var hl_rl_loss(Tape& tape, HLPolicy& policy,
               const std::vector<RolloutBatch>& rollouts, const VTraceConfig& cfg,
               HLRLStats* stats = nullptr);

// w_BC * bc + w_RL * rl.
Var combined_hl_loss(Tape& tape, const HLLossWeights& w, Var bc, Var rl);
double combined_hl_loss(const HLLossWeights& w, double bc, double rl);

struct FlatLossWeights {
  double w_bc = 1.0;
  double w_rl = 1.0;
  double aux_lang_weight = 1.0;
  void validate() const;
};

struct FlatLossStats {
  double bc_loss = 0.0;
  double aux_loss = 0.0;
  double rl_loss = 0.0;
};

// Action BC + auxiliary instruction prediction on the expert batch, plus
// per-env-step V-trace RL on the rollouts. Either part may be disabled by
// passing a null batch / empty rollouts with the matching weight zero.
Var flat_loss(Tape& tape, FlatPolicy& policy, const Batch* expert,
              Mat* bc_carry_state, const std::vector<FlatRollout>& rollouts,
              const FlatLossWeights& weights, const VTraceConfig& cfg,
              FlatLossStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Training loops
// ---------------------------------------------------------------------------

struct TrainConfig {
  int batch_size = 16;
  int window = 40;  // BC window (env steps); must be a multiple of 8 for HL
  double lr = 1e-3;
  int updates = 1000;
  std::uint64_t seed = 0;
  std::vector<TaskId> tasks{kAllTasks.begin(), kAllTasks.end()};

  // RL side
  int rl_episodes_per_update = 8;
  int actors = 1;  // 1 = synchronous determinism mode
  int staleness_bound = 16;  // max learner-actor version lag, in updates
  double ll_epsilon = 0.0;   // LL executor noise during HL rollouts

  // Periodic evaluation / output
  int eval_every = 0;  // 0 = never
  int eval_episodes = 20;
  std::string metrics_path;     // CSV; empty = keep in memory only
  int checkpoint_every = 0;     // 0 = never
  std::string checkpoint_path;  // required when checkpoint_every > 0
};

struct MetricsRow {
  int update = 0;
  double w_bc = 0.0, w_rl = 0.0;
  double bc_loss = 0.0, rl_loss = 0.0, total_loss = 0.0;
  double value_loss = 0.0;
  double instr_entropy = 0.0;
  double rollout_reward = 0.0;  // mean episode reward of the update's rollouts
  int stale_rejected = 0;
  // task name -> success rate from the most recent periodic evaluation
  std::map<std::string, double> task_success;

  static std::string csv_header();
  std::string csv_line() const;
};

struct TrainResult {
  std::vector<MetricsRow> rows;
};

// Supervised LL training on oracle data.
TrainResult train_ll(LLPolicy& policy, const std::vector<Trajectory>& data,
                     const TrainConfig& cfg);

// HL training: interleaves one BC minibatch and one RL rollout batch per
// update into the weighted combined loss. `ll` must be frozen. With
// w.w_rl == 0 no environment actors are launched; with w.w_bc == 0 the BC
// stream is skipped.
TrainResult train_hl(HLPolicy& policy, const LLPolicy& ll,
                     const std::vector<Trajectory>& data,
                     const HLLossWeights& w, const VTraceConfig& vtrace,
                     const TrainConfig& cfg);

// Flat baseline training (action BC + aux language + RL).
TrainResult train_flat(FlatPolicy& policy, const std::vector<Trajectory>& data,
                       const FlatLossWeights& w, const VTraceConfig& vtrace,
                       const TrainConfig& cfg);

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

double eval_hierarchical(HLPolicy& hl, const LLPolicy& ll, TaskId task,
                         int episodes, std::uint64_t seed,
                         const HierRolloutOptions& opt);

double eval_flat(FlatPolicy& flat, TaskId task, int episodes,
                 std::uint64_t seed);

// Oracle Setter + trained LL (closes the loop on the instruction interface).
double eval_setter_ll(const LLPolicy& ll, TaskId task, int episodes,
                      std::uint64_t seed, double ll_epsilon,
                      const Vocabulary& vocab);

// Per-instruction-family achievement: during Setter+LL episodes, an issued
// instruction counts as achieved when the Setter moves on (or the episode
// succeeds) within `patience` env steps.
struct FamilyReport {
  std::map<std::string, int> issued;
  std::map<std::string, int> achieved;
  double rate(const std::string& family) const;
  double min_rate() const;
};

FamilyReport eval_ll_families(const LLPolicy& ll, int episodes,
                              std::uint64_t seed, const Vocabulary& vocab,
                              double ll_epsilon = 0.0, int patience = 40);

}  // namespace keygate
