#pragma once

#include <optional>
#include <string>
#include <vector>

#include "keygate/env.hpp"
#include "keygate/lang.hpp"
#include "keygate/tensor.hpp"

namespace keygate {

// ---------------------------------------------------------------------------
// Shared policy configuration
// ---------------------------------------------------------------------------

struct PolicyConfig {
  int obs_dim = kObsDim;
  int vocab_size = 0;  // filled from the Vocabulary
  int embed_dim = 32;
  int hidden_dim = 128;
};

// Token-level decoding never emits PAD or BOS; their logits are pushed to
// -inf-like values in both sampling and scoring so the two paths agree.
inline constexpr double kTokenMaskPenalty = 1e9;

// Zeroes the recurrent-state rows flagged as window/episode starts.
void apply_state_reset(Mat& state, const std::vector<std::uint8_t>& start_flags);

// Flattened observations as network input rows.
Mat obs_row(const Observation& obs);
Mat obs_matrix(const std::vector<Observation>& obs);

// ---------------------------------------------------------------------------
// Low-level instruction follower: pi(a | o_<=t, g_t)
// ---------------------------------------------------------------------------

class LLPolicy {
 public:
  LLPolicy(const PolicyConfig& cfg, std::uint64_t seed);

  // Batched training forward. obs is B x obs_dim, instrs has B entries,
  // state is B x hidden. Returns B x 6 action logits and advances the state.
  // Throws std::invalid_argument on malformed instructions.
  Var forward(Tape& tape, Var obs, const std::vector<Instruction>& instrs,
              Var state, Var* state_out);

  // Single-environment rollout step (gradient-free). Samples when rng is
  // given, argmax otherwise. Advances `state` (1 x hidden) in place.
  Action act(const Observation& obs, const Instruction& g, Mat& state,
             Rng* rng) const;

  Mat initial_state(int batch) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const PolicyConfig& config() const { return cfg_; }

  void save(const std::string& path) const;
  static LLPolicy load(const std::string& path);

 private:
  LLPolicy() = default;
  void register_params(Rng& rng);

  PolicyConfig cfg_;
  ParamStore params_;
  GruParamNames core_;
};

// ---------------------------------------------------------------------------
// High-level instruction emitter with value head: pi(g | o_<=t), V
// ---------------------------------------------------------------------------

// Teacher-forced scoring of given instructions (shared by BC and RL losses).
struct HLScore {
  Var logprob;  // B x 1: sum of token log-probs (positions after BOS, up to EOS)
  Var entropy;  // B x 1: sum of per-position token entropies over the same span
  Var value;    // B x 1
  Var state;    // B x hidden, advanced core state
};

struct HLSample {
  Instruction g;
  double logprob = 0.0;
  double value = 0.0;
};

class HLPolicy {
 public:
  HLPolicy(const PolicyConfig& cfg, std::uint64_t seed);

  // Batched teacher-forced pass: advances the core on obs, scores `targets`
  // token-by-token. Targets must be well formed.
  HLScore score(Tape& tape, Var obs, const std::vector<Instruction>& targets,
                Var state);

  // Advances the core only (decision steps where no loss is taken).
  Var advance(Tape& tape, Var obs, Var state);

  // Rollout-time decision (gradient-free): samples an instruction
  // autoregressively (greedy when rng is null), advancing `state` in place.
  // EOS is forced at the final position if not emitted earlier.
  HLSample decide(const Observation& obs, Mat& state, Rng* rng) const;

  Mat initial_state(int batch) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const PolicyConfig& config() const { return cfg_; }

  void save(const std::string& path) const;
  static HLPolicy load(const std::string& path);

 private:
  HLPolicy() = default;
  void register_params(Rng& rng);
  // Core step shared by score/advance/decide.
  Var core_step(Tape& tape, Var obs, Var state);
  Var token_logits(Tape& tape, Var dec_state);

  PolicyConfig cfg_;
  ParamStore params_;
  GruParamNames core_, dec_;
};

// ---------------------------------------------------------------------------
// Flat baseline: actions every step, value head, auxiliary language head
// ---------------------------------------------------------------------------

struct FlatForward {
  Var action_logits;  // B x 6
  Var value;          // B x 1
  Var aux_logits;     // B x (L-1)*V: position-wise instruction-token logits
  Var state;          // B x hidden
};

class FlatPolicy {
 public:
  FlatPolicy(const PolicyConfig& cfg, std::uint64_t seed);

  FlatForward forward(Tape& tape, Var obs, Var state);

  // Gradient-free rollout step; fills value/logprob if requested.
  Action act(const Observation& obs, Mat& state, Rng* rng,
             double* logprob = nullptr, double* value = nullptr) const;

  Mat initial_state(int batch) const;

  ParamStore& params() { return params_; }
  const ParamStore& params() const { return params_; }
  const PolicyConfig& config() const { return cfg_; }

  void save(const std::string& path) const;
  static FlatPolicy load(const std::string& path);

 private:
  FlatPolicy() = default;
  void register_params(Rng& rng);

  PolicyConfig cfg_;
  ParamStore params_;
  GruParamNames core_;
};

// Policy-kind tags stored in checkpoint headers.
inline constexpr const char* kTagLL = "policy=ll";
inline constexpr const char* kTagHL = "policy=hl";
inline constexpr const char* kTagFlat = "policy=flat";

}  // namespace keygate
