#include "keygate/training.hpp"

#include <algorithm>
#include <cmath>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <memory>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <thread>

namespace keygate {

// ---------------------------------------------------------------------------
// Configuration validation
// ---------------------------------------------------------------------------

void HLLossWeights::validate() const {
  if (w_bc < 0 || w_rl < 0) throw std::invalid_argument("loss weights must be nonnegative");
  if (w_bc == 0 && w_rl == 0) throw std::invalid_argument("loss weights cannot both be zero");
}

void VTraceConfig::validate() const {
  if (gamma < 0 || gamma > 1) throw std::invalid_argument("gamma must be in [0,1]");
  if (c_bar <= 0) throw std::invalid_argument("c_bar must be positive");
  if (rho_bar < c_bar) throw std::invalid_argument("rho_bar must be >= c_bar");
}

void FlatLossWeights::validate() const {
  if (w_bc < 0 || w_rl < 0 || aux_lang_weight < 0)
    throw std::invalid_argument("loss weights must be nonnegative");
  if (w_bc == 0 && w_rl == 0)
    throw std::invalid_argument("loss weights cannot both be zero");
}

// ---------------------------------------------------------------------------
// V-trace
// ---------------------------------------------------------------------------

VTraceResult vtrace_targets(const std::vector<double>& rewards,
                            const std::vector<double>& values,
                            double bootstrap_value,
                            const std::vector<double>& target_logp,
                            const std::vector<double>& behavior_logp,
                            const std::vector<std::uint8_t>& dones,
                            const VTraceConfig& cfg) {
  cfg.validate();
  const size_t T = rewards.size();
  if (values.size() != T || target_logp.size() != T || behavior_logp.size() != T ||
      dones.size() != T)
    throw std::invalid_argument("vtrace_targets: sequence length mismatch");
  VTraceResult out;
  out.vs.resize(T);
  out.pg_adv.resize(T);
  if (T == 0) return out;

  if (cfg.literal_formula) {
    // Monte-Carlo return as both the value target and the advantage baseline.
    double ret = 0.0;
    for (size_t i = T; i-- > 0;) {
      ret = rewards[i] + cfg.gamma * (dones[i] ? 0.0 : ret);
      out.vs[i] = ret;
      out.pg_adv[i] = ret - values[i];
    }
    return out;
  }

  double next_vs = bootstrap_value;
  for (size_t i = T; i-- > 0;) {
    double v_next = (i + 1 < T) ? values[i + 1] : bootstrap_value;
    double vs_next = next_vs;
    if (dones[i]) {
      v_next = 0.0;
      vs_next = 0.0;
    }
    const double ratio = std::exp(target_logp[i] - behavior_logp[i]);
    const double rho = std::min(cfg.rho_bar, ratio);
    const double c = std::min(cfg.c_bar, ratio);
    const double delta = rho * (rewards[i] + cfg.gamma * v_next - values[i]);
    out.vs[i] = values[i] + delta + cfg.gamma * c * (vs_next - v_next);
    next_vs = out.vs[i];
  }
  for (size_t i = 0; i < T; ++i) {
    double vs_next = (i + 1 < T) ? out.vs[i + 1] : bootstrap_value;
    if (dones[i]) vs_next = 0.0;
    const double rho =
        std::min(cfg.rho_bar, std::exp(target_logp[i] - behavior_logp[i]));
    out.pg_adv[i] = rho * (rewards[i] + cfg.gamma * vs_next - values[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Rollouts
// ---------------------------------------------------------------------------

RolloutBatch run_hierarchical_episode(const HLPolicy& hl, const LLPolicy& ll,
                                      TaskId task, std::uint64_t seed, Rng& rng,
                                      const HierRolloutOptions& opt) {
  if (!ll.params().frozen())
    throw std::logic_error("run_hierarchical_episode requires a frozen LL policy");
  if (opt.hl_period <= 0) throw std::invalid_argument("hl_period must be positive");

  RolloutBatch out;
  out.task = task;
  out.seed = seed;
  WorldState env = reset(task, seed, opt.step_limit);
  Mat hl_state = hl.initial_state(1);
  Mat ll_state = ll.initial_state(1);
  bool done = false;
  int t = 0;
  while (!done) {
    Observation obs = observe(env);
    if (t % opt.hl_period == 0) {
      HLSample s = hl.decide(obs, hl_state, opt.sample_hl ? &rng : nullptr);
      HLDecision d;
      d.obs = obs;
      d.g = s.g;
      d.behavior_logprob = s.logprob;
      d.value = s.value;
      out.decisions.push_back(d);
    }
    Action a = ll.act(obs, out.decisions.back().g, ll_state, nullptr);
    if (opt.ll_epsilon > 0 && rng.bernoulli(opt.ll_epsilon))
      a = kAllActions[rng.uniform_int(kNumActions)];
    StepOutcome res = step(env, a);
    out.decisions.back().reward += res.reward;
    out.episode_reward += res.reward;
    done = res.done;
    ++t;
  }
  out.decisions.back().done = true;
  out.env_steps = t;
  out.bootstrap_value = 0.0;  // episodes always run to termination
  return out;
}

FlatRollout run_flat_episode(const FlatPolicy& flat, TaskId task,
                             std::uint64_t seed, Rng& rng, bool sample,
                             int step_limit) {
  FlatRollout out;
  out.task = task;
  out.seed = seed;
  WorldState env = reset(task, seed, step_limit);
  Mat state = flat.initial_state(1);
  bool done = false;
  while (!done) {
    FlatRolloutStep s;
    s.obs = observe(env);
    s.action = flat.act(s.obs, state, sample ? &rng : nullptr,
                        &s.behavior_logprob, &s.value);
    StepOutcome res = step(env, s.action);
    s.reward = res.reward;
    s.done = res.done;
    done = res.done;
    out.episode_reward += res.reward;
    out.steps.push_back(s);
  }
  out.bootstrap_value = 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

namespace {

Instruction dummy_instruction() {
  Instruction g;
  g.token_ids.fill(std::int16_t(kPadId));
  g.token_ids[0] = std::int16_t(kBosId);
  g.token_ids[1] = std::int16_t(kEosId);
  return g;
}

void check_batch(const Batch& batch) {
  bool any = false;
  for (const auto* s : batch.steps) any = any || s;
  if (batch.batch_size <= 0 || !any)
    throw std::invalid_argument("empty training batch");
}

Var scalar(Tape& tape, double v) { return tape.constant(Mat::Constant(1, 1, v)); }

}  // namespace

Var ll_bc_loss(Tape& tape, LLPolicy& policy, const Batch& batch,
               Mat& carry_state) {
  check_batch(batch);
  const int B = batch.batch_size;
  if (carry_state.rows() != B)
    throw std::invalid_argument("carry state batch mismatch");
  apply_state_reset(carry_state, batch.window_start);
  Var state = tape.constant(carry_state);
  Var total = scalar(tape, 0.0);
  const Instruction dummy = dummy_instruction();
  for (int k = 0; k < batch.window; ++k) {
    std::vector<Observation> obs(static_cast<size_t>(B));
    std::vector<Instruction> instrs(size_t(B), dummy);
    std::vector<int> targets(size_t(B), 0);
    std::vector<double> weights(size_t(B), 0.0);
    for (int b = 0; b < B; ++b) {
      const TrajStep* s = batch.at(k, b);
      if (!s) continue;
      obs[size_t(b)] = s->obs;
      instrs[size_t(b)] = s->instr;
      targets[size_t(b)] = int(s->action);
      weights[size_t(b)] = 1.0;
    }
    Var state_out;
    Var logits = policy.forward(tape, tape.constant(obs_matrix(obs)), instrs,
                                state, &state_out);
    total = tape.add(total, tape.softmax_cross_entropy(logits, targets, weights));
    state = state_out;
  }
  carry_state = tape.detach(state);
  return tape.scale(total, 1.0 / B);
}

Var hl_bc_loss(Tape& tape, HLPolicy& policy, const Batch& batch,
               Mat& carry_state, int hl_period) {
  check_batch(batch);
  if (hl_period <= 0 || batch.window % hl_period != 0)
    throw std::invalid_argument("window must be a multiple of the HL period");
  const int B = batch.batch_size;
  if (carry_state.rows() != B)
    throw std::invalid_argument("carry state batch mismatch");
  apply_state_reset(carry_state, batch.window_start);
  Var state = tape.constant(carry_state);
  Var total = scalar(tape, 0.0);
  const Instruction dummy = dummy_instruction();
  for (int k = 0; k < batch.window; k += hl_period) {
    std::vector<Observation> obs(static_cast<size_t>(B));
    std::vector<Instruction> targets(size_t(B), dummy);
    Mat mask = Mat::Zero(B, 1);
    for (int b = 0; b < B; ++b) {
      const TrajStep* s = batch.at(k, b);
      if (!s) continue;
      if (s->t % hl_period != 0)
        throw std::logic_error("window misaligned with the HL decision cadence");
      obs[size_t(b)] = s->obs;
      targets[size_t(b)] = s->instr;
      mask(b, 0) = 1.0;
    }
    HLScore sc = policy.score(tape, tape.constant(obs_matrix(obs)), targets, state);
    total = tape.add(total, tape.sum(tape.mul(sc.logprob, tape.constant(mask))));
    state = sc.state;
  }
  carry_state = tape.detach(state);
  return tape.scale(total, -1.0 / B);
}

Var hl_rl_loss(Tape& tape, HLPolicy& policy,
               const std::vector<RolloutBatch>& rollouts, const VTraceConfig& cfg,
               HLRLStats* stats) {
  cfg.validate();
  if (rollouts.empty()) throw std::invalid_argument("no rollouts");
  const int B = int(rollouts.size());
  int t_max = 0;
  for (const auto& r : rollouts) {
    if (r.decisions.empty()) throw std::invalid_argument("empty rollout");
    t_max = std::max(t_max, int(r.decisions.size()));
  }

  // Teacher-forced scoring of the emitted instructions under the current
  // parameters, batched across rollouts.
  const Instruction dummy = dummy_instruction();
  Var state = tape.constant(Mat::Zero(B, policy.config().hidden_dim));
  std::vector<HLScore> scores;
  scores.reserve(size_t(t_max));
  for (int t = 0; t < t_max; ++t) {
    std::vector<Observation> obs(static_cast<size_t>(B));
    std::vector<Instruction> targets(size_t(B), dummy);
    for (int b = 0; b < B; ++b) {
      const auto& dec = rollouts[size_t(b)].decisions;
      if (t < int(dec.size())) {
        obs[size_t(b)] = dec[size_t(t)].obs;
        targets[size_t(b)] = dec[size_t(t)].g;
      }
    }
    scores.push_back(
        policy.score(tape, tape.constant(obs_matrix(obs)), targets, state));
    state = scores.back().state;
  }

  // V-trace targets per rollout from detached values and log-probs.
  Mat adv = Mat::Zero(B, t_max), vs = Mat::Zero(B, t_max), mask = Mat::Zero(B, t_max);
  for (int b = 0; b < B; ++b) {
    const auto& dec = rollouts[size_t(b)].decisions;
    const int T = int(dec.size());
    std::vector<double> rewards(static_cast<size_t>(T)), values(static_cast<size_t>(T)), tlp(static_cast<size_t>(T)),
        blp(static_cast<size_t>(T));
    std::vector<std::uint8_t> dones(static_cast<size_t>(T));
    for (int t = 0; t < T; ++t) {
      rewards[size_t(t)] = dec[size_t(t)].reward;
      values[size_t(t)] = tape.value(scores[size_t(t)].value)(b, 0);
      tlp[size_t(t)] = tape.value(scores[size_t(t)].logprob)(b, 0);
      blp[size_t(t)] = dec[size_t(t)].behavior_logprob;
      dones[size_t(t)] = dec[size_t(t)].done;
    }
    VTraceResult vt = vtrace_targets(rewards, values, rollouts[size_t(b)].bootstrap_value,
                                     tlp, blp, dones, cfg);
    for (int t = 0; t < T; ++t) {
      adv(b, t) = vt.pg_adv[size_t(t)];
      vs(b, t) = vt.vs[size_t(t)];
      mask(b, t) = 1.0;
    }
  }

  Var policy_term = scalar(tape, 0.0);
  Var value_term = scalar(tape, 0.0);
  Var entropy_term = scalar(tape, 0.0);
  for (int t = 0; t < t_max; ++t) {
    Var m = tape.constant(mask.col(t));
    policy_term = tape.add(
        policy_term,
        tape.sum(tape.mul(scores[size_t(t)].logprob, tape.constant(adv.col(t)))));
    Var err = tape.sub(scores[size_t(t)].value, tape.constant(vs.col(t)));
    value_term = tape.add(value_term, tape.sum(tape.mul(tape.square(err), m)));
    entropy_term =
        tape.add(entropy_term, tape.sum(tape.mul(scores[size_t(t)].entropy, m)));
  }
  Var loss = tape.scale(
      tape.add(tape.scale(policy_term, -1.0),
               tape.sub(tape.scale(value_term, cfg.value_weight),
                        tape.scale(entropy_term, cfg.entropy_weight))),
      1.0 / B);
  if (stats) {
    const double decisions = mask.sum();
    stats->policy_loss = -tape.value(policy_term)(0, 0) / B;
    stats->value_loss = tape.value(value_term)(0, 0) / B;
    double ent = 0.0;
    for (int t = 0; t < t_max; ++t)
      ent += (tape.value(scores[size_t(t)].entropy).array() * mask.col(t).array()).sum();
    stats->mean_entropy = decisions > 0 ? ent / decisions : 0.0;
    stats->decisions = int(decisions);
  }
  return loss;
}

Var combined_hl_loss(Tape& tape, const HLLossWeights& w, Var bc, Var rl) {
  w.validate();
  return tape.add(tape.scale(bc, w.w_bc), tape.scale(rl, w.w_rl));
}

double combined_hl_loss(const HLLossWeights& w, double bc, double rl) {
  w.validate();
  return w.w_bc * bc + w.w_rl * rl;
}

Var flat_loss(Tape& tape, FlatPolicy& policy, const Batch* expert,
              Mat* bc_carry_state, const std::vector<FlatRollout>& rollouts,
              const FlatLossWeights& weights, const VTraceConfig& cfg,
              FlatLossStats* stats) {
  weights.validate();
  cfg.validate();
  const int vocab = policy.config().vocab_size;
  Var bc_term = scalar(tape, 0.0);
  Var aux_term = scalar(tape, 0.0);

  if (expert) {
    check_batch(*expert);
    const int B = expert->batch_size;
    if (!bc_carry_state || bc_carry_state->rows() != B)
      throw std::invalid_argument("flat_loss: carry state batch mismatch");
    apply_state_reset(*bc_carry_state, expert->window_start);
    Var state = tape.constant(*bc_carry_state);
    for (int k = 0; k < expert->window; ++k) {
      std::vector<Observation> obs(static_cast<size_t>(B));
      std::vector<int> targets(size_t(B), 0);
      std::vector<double> wrow(size_t(B), 0.0);
      std::vector<const TrajStep*> rows(size_t(B), nullptr);
      for (int b = 0; b < B; ++b) {
        const TrajStep* s = expert->at(k, b);
        rows[size_t(b)] = s;
        if (!s) continue;
        obs[size_t(b)] = s->obs;
        targets[size_t(b)] = int(s->action);
        wrow[size_t(b)] = 1.0;
      }
      FlatForward f =
          policy.forward(tape, tape.constant(obs_matrix(obs)), state);
      state = f.state;
      bc_term = tape.add(
          tape.softmax_cross_entropy(f.action_logits, targets, wrow), bc_term);
      // auxiliary instruction prediction, position-wise, PAD-masked
      for (int p = 1; p < kInstructionLen; ++p) {
        std::vector<int> tok(size_t(B), 0);
        std::vector<double> tw(size_t(B), 0.0);
        bool any = false;
        for (int b = 0; b < B; ++b) {
          const TrajStep* s = rows[size_t(b)];
          if (!s || s->instr.token_ids[p] == kPadId) continue;
          tok[size_t(b)] = s->instr.token_ids[p];
          tw[size_t(b)] = 1.0;
          any = true;
        }
        if (!any) continue;
        Var logits = tape.slice_cols(f.aux_logits, (p - 1) * vocab, vocab);
        aux_term = tape.add(aux_term,
                            tape.softmax_cross_entropy(logits, tok, tw));
      }
    }
    *bc_carry_state = tape.detach(state);
    bc_term = tape.scale(bc_term, 1.0 / B);
    aux_term = tape.scale(aux_term, 1.0 / B);
  }

  Var rl_term = scalar(tape, 0.0);
  if (!rollouts.empty()) {
    const int B = int(rollouts.size());
    int t_max = 0;
    for (const auto& r : rollouts) {
      if (r.steps.empty()) throw std::invalid_argument("empty rollout");
      t_max = std::max(t_max, int(r.steps.size()));
    }
    Var state = tape.constant(Mat::Zero(B, policy.config().hidden_dim));
    std::vector<Var> logprobs, vals, ents;
    for (int t = 0; t < t_max; ++t) {
      std::vector<Observation> obs(static_cast<size_t>(B));
      std::vector<int> acts(size_t(B), 0);
      for (int b = 0; b < B; ++b) {
        const auto& st = rollouts[size_t(b)].steps;
        if (t < int(st.size())) {
          obs[size_t(b)] = st[size_t(t)].obs;
          acts[size_t(b)] = int(st[size_t(t)].action);
        }
      }
      FlatForward f = policy.forward(tape, tape.constant(obs_matrix(obs)), state);
      state = f.state;
      logprobs.push_back(tape.gather_logprob(f.action_logits, acts));
      vals.push_back(f.value);
      ents.push_back(tape.entropy(f.action_logits));
    }
    Mat adv = Mat::Zero(B, t_max), vs = Mat::Zero(B, t_max),
        mask = Mat::Zero(B, t_max);
    for (int b = 0; b < B; ++b) {
      const auto& st = rollouts[size_t(b)].steps;
      const int T = int(st.size());
      std::vector<double> rewards(static_cast<size_t>(T)), values(static_cast<size_t>(T)), tlp(static_cast<size_t>(T)),
          blp(static_cast<size_t>(T));
      std::vector<std::uint8_t> dones(static_cast<size_t>(T));
      for (int t = 0; t < T; ++t) {
        rewards[size_t(t)] = st[size_t(t)].reward;
        values[size_t(t)] = tape.value(vals[size_t(t)])(b, 0);
        tlp[size_t(t)] = tape.value(logprobs[size_t(t)])(b, 0);
        blp[size_t(t)] = st[size_t(t)].behavior_logprob;
        dones[size_t(t)] = st[size_t(t)].done;
      }
      VTraceResult vt =
          vtrace_targets(rewards, values, rollouts[size_t(b)].bootstrap_value,
                         tlp, blp, dones, cfg);
      for (int t = 0; t < T; ++t) {
        adv(b, t) = vt.pg_adv[size_t(t)];
        vs(b, t) = vt.vs[size_t(t)];
        mask(b, t) = 1.0;
      }
    }
    Var policy_term = scalar(tape, 0.0), value_term = scalar(tape, 0.0),
        entropy_term = scalar(tape, 0.0);
    for (int t = 0; t < t_max; ++t) {
      Var m = tape.constant(mask.col(t));
      policy_term = tape.add(
          policy_term,
          tape.sum(tape.mul(logprobs[size_t(t)], tape.constant(adv.col(t)))));
      Var err = tape.sub(vals[size_t(t)], tape.constant(vs.col(t)));
      value_term = tape.add(value_term, tape.sum(tape.mul(tape.square(err), m)));
      entropy_term =
          tape.add(entropy_term, tape.sum(tape.mul(ents[size_t(t)], m)));
    }
    rl_term = tape.scale(
        tape.add(tape.scale(policy_term, -1.0),
                 tape.sub(tape.scale(value_term, cfg.value_weight),
                          tape.scale(entropy_term, cfg.entropy_weight))),
        1.0 / B);
  }

  if (stats) {
    stats->bc_loss = tape.value(bc_term)(0, 0);
    stats->aux_loss = tape.value(aux_term)(0, 0);
    stats->rl_loss = tape.value(rl_term)(0, 0);
  }
  return tape.add(tape.scale(bc_term, weights.w_bc),
                  tape.add(tape.scale(aux_term, weights.aux_lang_weight),
                           tape.scale(rl_term, weights.w_rl)));
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

std::string MetricsRow::csv_header() {
  std::ostringstream os;
  os << "update,w_bc,w_rl,bc_loss,rl_loss,total_loss,value_loss,instr_entropy,"
        "rollout_reward,stale_rejected";
  for (TaskId t : kAllTasks) os << ",success_" << task_name(t);
  return os.str();
}

std::string MetricsRow::csv_line() const {
  std::ostringstream os;
  os.precision(17);
  os << update << ',' << w_bc << ',' << w_rl << ',' << bc_loss << ',' << rl_loss
     << ',' << total_loss << ',' << value_loss << ',' << instr_entropy << ','
     << rollout_reward << ',' << stale_rejected;
  for (TaskId t : kAllTasks) {
    auto it = task_success.find(task_name(t));
    os << ',' << (it == task_success.end() ? -1.0 : it->second);
  }
  return os.str();
}

namespace {

class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) {
    if (path.empty()) return;
    out_.open(path);
    if (!out_) throw std::runtime_error("cannot write metrics: " + path);
    out_ << MetricsRow::csv_header() << '\n';
  }
  void write(const MetricsRow& row) {
    if (out_.is_open()) out_ << row.csv_line() << '\n' << std::flush;
  }

 private:
  std::ofstream out_;
};

[[noreturn]] void abort_on_nan(const std::string& who, int update, double loss) {
  std::ofstream dump("train_diagnostic.txt");
  dump << who << ": non-finite loss " << loss << " at update " << update << '\n';
  throw std::runtime_error(who + ": non-finite loss at update " +
                           std::to_string(update) + " (see train_diagnostic.txt)");
}

}  // namespace

// ---------------------------------------------------------------------------
// LL training
// ---------------------------------------------------------------------------

TrainResult train_ll(LLPolicy& policy, const std::vector<Trajectory>& data,
                     const TrainConfig& cfg) {
  BatchIterator it(data, cfg.batch_size, cfg.window, cfg.seed);
  Mat carry = policy.initial_state(cfg.batch_size);
  MetricsWriter writer(cfg.metrics_path);
  TrainResult result;
  for (int u = 0; u < cfg.updates; ++u) {
    Batch batch = it.next();
    Tape tape;
    Var loss = ll_bc_loss(tape, policy, batch, carry);
    const double loss_val = tape.value(loss)(0, 0);
    if (!std::isfinite(loss_val)) abort_on_nan("train_ll", u, loss_val);
    policy.params().zero_grads();
    tape.backward(loss);
    policy.params().adam_step(cfg.lr);
    MetricsRow row;
    row.update = u;
    row.w_bc = 1.0;
    row.bc_loss = loss_val;
    row.total_loss = loss_val;
    if (cfg.checkpoint_every > 0 && (u + 1) % cfg.checkpoint_every == 0)
      policy.save(cfg.checkpoint_path);
    writer.write(row);
    result.rows.push_back(std::move(row));
  }
  if (!cfg.checkpoint_path.empty()) policy.save(cfg.checkpoint_path);
  return result;
}

// ---------------------------------------------------------------------------
// Rollout collection (synchronous and actor-threaded)
// ---------------------------------------------------------------------------

namespace {

struct ActorPool {
  std::mutex m;
  std::condition_variable cv_space, cv_data;
  std::deque<RolloutBatch> queue;
  size_t capacity = 0;
  bool stop = false;
  std::shared_ptr<const HLPolicy> snapshot;
  std::int64_t version = 0;
  std::vector<std::thread> threads;

  ~ActorPool() { shutdown(); }

  void publish(const HLPolicy& policy, std::int64_t version_now) {
    std::lock_guard<std::mutex> lock(m);
    snapshot = std::make_shared<const HLPolicy>(policy);
    version = version_now;
    cv_space.notify_all();
  }

  void start(int n, const LLPolicy* ll, const TrainConfig* cfg,
             const HierRolloutOptions* opt) {
    capacity = size_t(std::max(cfg->rl_episodes_per_update * 2, 8));
    for (int i = 0; i < n; ++i) {
      threads.emplace_back([this, i, ll, cfg, opt]() {
        Rng rng = Rng(cfg->seed).split(0xac700000ULL + std::uint64_t(i));
        std::uint64_t episode = 0;
        while (true) {
          std::shared_ptr<const HLPolicy> snap;
          std::int64_t ver;
          {
            std::unique_lock<std::mutex> lock(m);
            cv_space.wait(lock, [this]() {
              return stop || (snapshot && queue.size() < capacity);
            });
            if (stop) return;
            snap = snapshot;
            ver = version;
          }
          const TaskId task =
              cfg->tasks[size_t(episode % cfg->tasks.size())];
          RolloutBatch r = run_hierarchical_episode(*snap, *ll, task,
                                                    rng.next_u64(), rng, *opt);
          r.param_version = ver;
          ++episode;
          {
            std::lock_guard<std::mutex> lock(m);
            queue.push_back(std::move(r));
            cv_data.notify_all();
          }
        }
      });
    }
  }

  RolloutBatch pop() {
    std::unique_lock<std::mutex> lock(m);
    cv_data.wait(lock, [this]() { return !queue.empty(); });
    RolloutBatch r = std::move(queue.front());
    queue.pop_front();
    cv_space.notify_all();
    return r;
  }

  void shutdown() {
    {
      std::lock_guard<std::mutex> lock(m);
      stop = true;
      cv_space.notify_all();
    }
    for (auto& t : threads)
      if (t.joinable()) t.join();
    threads.clear();
  }
};

std::map<std::string, double> evaluate_hl(HLPolicy& policy, const LLPolicy& ll,
                                          const TrainConfig& cfg, int update) {
  std::map<std::string, double> out;
  HierRolloutOptions opt;
  opt.ll_epsilon = cfg.ll_epsilon;
  opt.sample_hl = false;
  for (TaskId task : cfg.tasks)
    out[task_name(task)] =
        eval_hierarchical(policy, ll, task, cfg.eval_episodes,
                          0x5eed0000ULL + std::uint64_t(update), opt);
  return out;
}

}  // namespace

TrainResult train_hl(HLPolicy& policy, const LLPolicy& ll,
                     const std::vector<Trajectory>& data,
                     const HLLossWeights& w, const VTraceConfig& vtrace,
                     const TrainConfig& cfg) {
  w.validate();
  vtrace.validate();
  if (!ll.params().frozen())
    throw std::logic_error("train_hl requires a frozen LL policy");
  const std::uint64_t ll_checksum = ll.params().checksum();

  std::unique_ptr<BatchIterator> it;
  Mat carry = policy.initial_state(cfg.batch_size);
  if (w.w_bc > 0)
    it = std::make_unique<BatchIterator>(data, cfg.batch_size, cfg.window,
                                         cfg.seed);

  HierRolloutOptions opt;
  opt.ll_epsilon = cfg.ll_epsilon;
  opt.sample_hl = true;

  // w_RL == 0: pure BC, no environment actors at all.
  const bool use_rl = w.w_rl > 0;
  ActorPool pool;
  Rng sync_rng = Rng(cfg.seed).split(0xac7);
  std::uint64_t sync_episode = 0;
  if (use_rl && cfg.actors > 1) pool.start(cfg.actors, &ll, &cfg, &opt);

  MetricsWriter writer(cfg.metrics_path);
  TrainResult result;
  for (int u = 0; u < cfg.updates; ++u) {
    MetricsRow row;
    row.update = u;
    row.w_bc = w.w_bc;
    row.w_rl = w.w_rl;

    std::vector<RolloutBatch> rollouts;
    if (use_rl) {
      if (cfg.actors > 1) {
        pool.publish(policy, u);
        while (int(rollouts.size()) < cfg.rl_episodes_per_update) {
          RolloutBatch r = pool.pop();
          if (u - r.param_version > cfg.staleness_bound) {
            ++row.stale_rejected;
            continue;
          }
          rollouts.push_back(std::move(r));
        }
      } else {
        for (int i = 0; i < cfg.rl_episodes_per_update; ++i) {
          const TaskId task = cfg.tasks[size_t(sync_episode % cfg.tasks.size())];
          RolloutBatch r = run_hierarchical_episode(
              policy, ll, task, sync_rng.next_u64(), sync_rng, opt);
          r.param_version = u;
          ++sync_episode;
          rollouts.push_back(std::move(r));
        }
      }
      for (const auto& r : rollouts) row.rollout_reward += r.episode_reward;
      row.rollout_reward /= double(rollouts.size());
    }

    Tape tape;
    Var bc = scalar(tape, 0.0);
    if (w.w_bc > 0) bc = hl_bc_loss(tape, policy, it->next(), carry);
    Var rl = scalar(tape, 0.0);
    HLRLStats stats;
    if (use_rl) rl = hl_rl_loss(tape, policy, rollouts, vtrace, &stats);
    Var loss = combined_hl_loss(tape, w, bc, rl);
    const double loss_val = tape.value(loss)(0, 0);
    if (!std::isfinite(loss_val)) abort_on_nan("train_hl", u, loss_val);
    policy.params().zero_grads();
    tape.backward(loss);
    policy.params().adam_step(cfg.lr);

    row.bc_loss = tape.value(bc)(0, 0);
    row.rl_loss = tape.value(rl)(0, 0);
    row.total_loss = loss_val;
    row.value_loss = stats.value_loss;
    row.instr_entropy = stats.mean_entropy;
    if (cfg.eval_every > 0 && (u + 1) % cfg.eval_every == 0)
      row.task_success = evaluate_hl(policy, ll, cfg, u);
    if (cfg.checkpoint_every > 0 && (u + 1) % cfg.checkpoint_every == 0)
      policy.save(cfg.checkpoint_path);
    writer.write(row);
    result.rows.push_back(std::move(row));
  }
  pool.shutdown();
  if (!cfg.checkpoint_path.empty()) policy.save(cfg.checkpoint_path);
  if (ll.params().checksum() != ll_checksum)
    throw std::logic_error("frozen LL parameters changed during HL training");
  return result;
}

TrainResult train_flat(FlatPolicy& policy, const std::vector<Trajectory>& data,
                       const FlatLossWeights& w, const VTraceConfig& vtrace,
                       const TrainConfig& cfg) {
  w.validate();
  vtrace.validate();
  std::unique_ptr<BatchIterator> it;
  Mat carry = policy.initial_state(cfg.batch_size);
  if (w.w_bc > 0 || w.aux_lang_weight > 0)
    it = std::make_unique<BatchIterator>(data, cfg.batch_size, cfg.window,
                                         cfg.seed);
  Rng roll_rng = Rng(cfg.seed).split(0xf1a7);
  std::uint64_t episode = 0;
  MetricsWriter writer(cfg.metrics_path);
  TrainResult result;
  for (int u = 0; u < cfg.updates; ++u) {
    std::vector<FlatRollout> rollouts;
    MetricsRow row;
    row.update = u;
    row.w_bc = w.w_bc;
    row.w_rl = w.w_rl;
    if (w.w_rl > 0) {
      for (int i = 0; i < cfg.rl_episodes_per_update; ++i) {
        const TaskId task = cfg.tasks[size_t(episode % cfg.tasks.size())];
        rollouts.push_back(
            run_flat_episode(policy, task, roll_rng.next_u64(), roll_rng));
        rollouts.back().param_version = u;
        ++episode;
        row.rollout_reward += rollouts.back().episode_reward;
      }
      row.rollout_reward /= double(cfg.rl_episodes_per_update);
    }
    Batch batch;
    const Batch* expert = nullptr;
    if (it) {
      batch = it->next();
      expert = &batch;
    }
    Tape tape;
    FlatLossStats stats;
    Var loss = flat_loss(tape, policy, expert, &carry, rollouts, w, vtrace, &stats);
    const double loss_val = tape.value(loss)(0, 0);
    if (!std::isfinite(loss_val)) abort_on_nan("train_flat", u, loss_val);
    policy.params().zero_grads();
    tape.backward(loss);
    policy.params().adam_step(cfg.lr);
    row.bc_loss = stats.bc_loss;
    row.rl_loss = stats.rl_loss;
    row.total_loss = loss_val;
    if (cfg.eval_every > 0 && (u + 1) % cfg.eval_every == 0)
      for (TaskId task : cfg.tasks)
        row.task_success[task_name(task)] =
            eval_flat(policy, task, cfg.eval_episodes,
                      0x5eed0000ULL + std::uint64_t(u));
    if (cfg.checkpoint_every > 0 && (u + 1) % cfg.checkpoint_every == 0)
      policy.save(cfg.checkpoint_path);
    writer.write(row);
    result.rows.push_back(std::move(row));
  }
  if (!cfg.checkpoint_path.empty()) policy.save(cfg.checkpoint_path);
  return result;
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

double eval_hierarchical(HLPolicy& hl, const LLPolicy& ll, TaskId task,
                         int episodes, std::uint64_t seed,
                         const HierRolloutOptions& opt) {
  Rng rng = Rng(seed).split(0xeba1);
  int wins = 0;
  for (int i = 0; i < episodes; ++i) {
    RolloutBatch r =
        run_hierarchical_episode(hl, ll, task, seed * 1000003ULL + std::uint64_t(i), rng, opt);
    if (r.episode_reward > 0) ++wins;
  }
  return double(wins) / episodes;
}

double eval_flat(FlatPolicy& flat, TaskId task, int episodes,
                 std::uint64_t seed) {
  Rng rng = Rng(seed).split(0xeba2);
  int wins = 0;
  for (int i = 0; i < episodes; ++i) {
    FlatRollout r = run_flat_episode(flat, task, seed * 1000003ULL + std::uint64_t(i),
                                     rng, /*sample=*/false);
    if (r.episode_reward > 0) ++wins;
  }
  return double(wins) / episodes;
}

namespace {

// Runs one Setter+LL episode, reporting per-instruction achievement into the
// family report when requested.
double setter_ll_episode(const LLPolicy& ll, TaskId task, std::uint64_t seed,
                         double ll_epsilon, const Vocabulary& vocab, Rng& rng,
                         FamilyReport* families, int patience) {
  WorldState env = reset(task, seed);
  Setter setter(env);
  Mat state = ll.initial_state(1);
  double total = 0.0;
  Instruction active{};
  std::string active_family;
  int active_age = 0;
  bool have_active = false;
  auto family_of = [&vocab](const Instruction& g) {
    const std::string text = detokenize(vocab, g);
    const auto space = text.find(' ');
    std::string head = text.substr(0, space);
    if (head == "pick") return std::string("pick up");
    if (head == "drop") return std::string("drop it");
    if (head == "go") return std::string("go to gate");
    if (head == "put") return std::string("put on sensor");
    if (head == "look") return std::string("look at sensor");
    if (head == "get") return std::string("get the apple");
    return text;
  };
  bool done = false;
  while (!done) {
    Instruction g = setter.instruct(env, vocab);
    if (families) {
      if (!have_active || g != active) {
        // the previous instruction was achieved: the Setter moved on
        if (have_active) ++families->achieved[active_family];
        active = g;
        active_family = family_of(g);
        active_age = 0;
        have_active = true;
        ++families->issued[active_family];
      } else if (++active_age > patience) {
        have_active = false;  // timed out; counted as issued, not achieved
      }
    }
    Observation obs = observe(env);
    Action a = ll.act(obs, g, state, nullptr);
    if (ll_epsilon > 0 && rng.bernoulli(ll_epsilon))
      a = kAllActions[rng.uniform_int(kNumActions)];
    StepOutcome res = step(env, a);
    total += res.reward;
    done = res.done;
  }
  if (families && have_active && total > 0)
    ++families->achieved[active_family];
  return total;
}

}  // namespace

double eval_setter_ll(const LLPolicy& ll, TaskId task, int episodes,
                      std::uint64_t seed, double ll_epsilon,
                      const Vocabulary& vocab) {
  Rng rng = Rng(seed).split(0xeba3);
  int wins = 0;
  for (int i = 0; i < episodes; ++i)
    if (setter_ll_episode(ll, task, seed * 1000003ULL + std::uint64_t(i),
                          ll_epsilon, vocab, rng, nullptr, 0) > 0)
      ++wins;
  return double(wins) / episodes;
}

double FamilyReport::rate(const std::string& family) const {
  auto it = issued.find(family);
  if (it == issued.end() || it->second == 0) return 0.0;
  auto ac = achieved.find(family);
  return (ac == achieved.end() ? 0.0 : double(ac->second)) / it->second;
}

double FamilyReport::min_rate() const {
  double worst = 1.0;
  for (const auto& [family, n] : issued)
    if (n > 0) worst = std::min(worst, rate(family));
  return worst;
}

FamilyReport eval_ll_families(const LLPolicy& ll, int episodes,
                              std::uint64_t seed, const Vocabulary& vocab,
                              double ll_epsilon, int patience) {
  FamilyReport report;
  Rng rng = Rng(seed).split(0xeba4);
  for (int i = 0; i < episodes; ++i) {
    const TaskId task = kAllTasks[size_t(i) % kAllTasks.size()];
    setter_ll_episode(ll, task, seed * 1000003ULL + std::uint64_t(i), ll_epsilon,
                      vocab, rng, &report, patience);
  }
  return report;
}

}  // namespace keygate
