#include "keygate/agents.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

namespace keygate {

namespace {

// Must mirror the tape's softmax computation so sampled log-probs agree with
// teacher-forced scoring.
Eigen::RowVectorXd row_log_softmax(const Eigen::RowVectorXd& logits) {
  const double mx = logits.maxCoeff();
  const double lse = mx + std::log((logits.array() - mx).exp().sum());
  return logits.array() - lse;
}

int sample_row(const Eigen::RowVectorXd& logits, Rng* rng) {
  if (!rng) {
    int best = 0;
    logits.maxCoeff(&best);
    return best;
  }
  const Eigen::RowVectorXd logp = row_log_softmax(logits);
  const double u = rng->uniform();
  double acc = 0.0;
  for (int i = 0; i < logp.size(); ++i) {
    acc += std::exp(logp(i));
    if (u < acc) return i;
  }
  return int(logp.size()) - 1;
}

// PAD/BOS are never decodable tokens; a large negative addend keeps the
// sampling and scoring paths on the identical logit values.
Mat token_mask(int batch, int vocab) {
  Mat m = Mat::Zero(batch, vocab);
  m.col(kPadId).setConstant(-kTokenMaskPenalty);
  m.col(kBosId).setConstant(-kTokenMaskPenalty);
  return m;
}

std::string config_tag(const char* kind, const PolicyConfig& cfg) {
  std::ostringstream os;
  os << kind << " obs=" << cfg.obs_dim << " vocab=" << cfg.vocab_size
     << " embed=" << cfg.embed_dim << " hidden=" << cfg.hidden_dim;
  return os.str();
}

PolicyConfig parse_tag(const std::string& tag, const char* kind) {
  std::istringstream is(tag);
  std::string head;
  is >> head;
  if (head != kind)
    throw std::runtime_error("checkpoint policy kind is '" + head +
                             "', expected '" + std::string(kind) + "'");
  PolicyConfig cfg;
  std::string field;
  while (is >> field) {
    const auto eq = field.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("bad checkpoint tag field: " + field);
    const std::string key = field.substr(0, eq);
    const int value = std::stoi(field.substr(eq + 1));
    if (key == "obs") cfg.obs_dim = value;
    else if (key == "vocab") cfg.vocab_size = value;
    else if (key == "embed") cfg.embed_dim = value;
    else if (key == "hidden") cfg.hidden_dim = value;
    else throw std::runtime_error("unknown checkpoint tag field: " + key);
  }
  if (cfg.vocab_size <= 0) throw std::runtime_error("checkpoint tag lacks vocab size");
  return cfg;
}

void check_config(const PolicyConfig& cfg) {
  if (cfg.obs_dim <= 0 || cfg.vocab_size <= kEosId || cfg.embed_dim <= 0 ||
      cfg.hidden_dim <= 0)
    throw std::invalid_argument("bad policy configuration");
}

Var encode_obs(Tape& t, ParamStore& p, Var obs) {
  return t.relu(t.add_rowvec(t.matmul(obs, t.param(p, "obs/w")),
                             t.param(p, "obs/b")));
}

void check_instructions(const std::vector<Instruction>& instrs) {
  for (const auto& g : instrs)
    if (!g.well_formed())
      throw std::invalid_argument("malformed instruction passed to policy");
}

}  // namespace

void apply_state_reset(Mat& state, const std::vector<std::uint8_t>& start_flags) {
  if (int(start_flags.size()) != state.rows())
    throw std::invalid_argument("apply_state_reset: one flag per state row required");
  for (int i = 0; i < state.rows(); ++i)
    if (start_flags[i]) state.row(i).setZero();
}

Mat obs_row(const Observation& obs) {
  const std::vector<double> flat = obs.flatten();
  return Eigen::Map<const Eigen::RowVectorXd>(flat.data(),
                                              Eigen::Index(flat.size()));
}

Mat obs_matrix(const std::vector<Observation>& obs) {
  Mat m(obs.size(), kObsDim);
  for (size_t i = 0; i < obs.size(); ++i) m.row(Eigen::Index(i)) = obs_row(obs[i]);
  return m;
}

// ---------------------------------------------------------------------------
// LLPolicy
// ---------------------------------------------------------------------------

LLPolicy::LLPolicy(const PolicyConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  check_config(cfg);
  Rng rng(seed);
  register_params(rng);
}

void LLPolicy::register_params(Rng& rng) {
  params_.create("obs/w", cfg_.obs_dim, cfg_.hidden_dim, Init::FanInUniform, rng);
  params_.create("obs/b", 1, cfg_.hidden_dim, Init::Zeros, rng);
  params_.create("instr/embed", cfg_.vocab_size, cfg_.embed_dim,
                 Init::FanInUniform, rng);
  core_ = gru_init(params_, "core", cfg_.hidden_dim + cfg_.embed_dim,
                   cfg_.hidden_dim, rng);
  params_.create("action/w", cfg_.hidden_dim, kNumActions, Init::FanInUniform, rng);
  params_.create("action/b", 1, kNumActions, Init::Zeros, rng);
}

Var LLPolicy::forward(Tape& t, Var obs, const std::vector<Instruction>& instrs,
                      Var state, Var* state_out) {
  check_instructions(instrs);
  const int batch = int(instrs.size());
  std::vector<int> ids;
  std::vector<std::uint8_t> valid;
  ids.reserve(size_t(batch) * kInstructionLen);
  for (const auto& g : instrs)
    for (int i = 0; i < kInstructionLen; ++i) {
      ids.push_back(g.token_ids[i]);
      valid.push_back(g.token_ids[i] != kPadId);
    }
  Var enc = encode_obs(t, params_, obs);
  Var ienc = t.embed_mean(t.param(params_, "instr/embed"), ids, valid, batch,
                          kInstructionLen);
  Var h = gru_step(t, params_, core_, t.concat_cols(enc, ienc), state,
                   cfg_.hidden_dim);
  if (state_out) *state_out = h;
  return t.add_rowvec(t.matmul(h, t.param(params_, "action/w")),
                      t.param(params_, "action/b"));
}

Action LLPolicy::act(const Observation& obs, const Instruction& g, Mat& state,
                     Rng* rng) const {
  Tape t(false);
  auto& self = const_cast<LLPolicy&>(*this);
  Var state_out;
  Var logits = self.forward(t, t.constant(obs_row(obs)), {g},
                            t.constant(state), &state_out);
  state = t.value(state_out);
  return Action(sample_row(t.value(logits).row(0), rng));
}

Mat LLPolicy::initial_state(int batch) const {
  return Mat::Zero(batch, cfg_.hidden_dim);
}

void LLPolicy::save(const std::string& path) const {
  params_.save(path, config_tag(kTagLL, cfg_));
}

LLPolicy LLPolicy::load(const std::string& path) {
  std::string tag;
  ParamStore store = ParamStore::load(path, &tag);
  LLPolicy p;
  p.cfg_ = parse_tag(tag, kTagLL);
  p.params_ = std::move(store);
  p.core_ = {"core/wx", "core/wh", "core/b"};
  return p;
}

// ---------------------------------------------------------------------------
// HLPolicy
// ---------------------------------------------------------------------------

HLPolicy::HLPolicy(const PolicyConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  check_config(cfg);
  Rng rng(seed);
  register_params(rng);
}

void HLPolicy::register_params(Rng& rng) {
  params_.create("obs/w", cfg_.obs_dim, cfg_.hidden_dim, Init::FanInUniform, rng);
  params_.create("obs/b", 1, cfg_.hidden_dim, Init::Zeros, rng);
  core_ = gru_init(params_, "core", cfg_.hidden_dim, cfg_.hidden_dim, rng);
  params_.create("value/w", cfg_.hidden_dim, 1, Init::FanInUniform, rng);
  params_.create("value/b", 1, 1, Init::Zeros, rng);
  params_.create("tok/embed", cfg_.vocab_size, cfg_.embed_dim,
                 Init::FanInUniform, rng);
  dec_ = gru_init(params_, "dec", cfg_.embed_dim, cfg_.hidden_dim, rng);
  params_.create("out/w", cfg_.hidden_dim, cfg_.vocab_size, Init::FanInUniform,
                 rng);
  params_.create("out/b", 1, cfg_.vocab_size, Init::Zeros, rng);
}

Var HLPolicy::core_step(Tape& t, Var obs, Var state) {
  return gru_step(t, params_, core_, encode_obs(t, params_, obs), state,
                  cfg_.hidden_dim);
}

Var HLPolicy::token_logits(Tape& t, Var dec_state) {
  Var logits = t.add_rowvec(t.matmul(dec_state, t.param(params_, "out/w")),
                            t.param(params_, "out/b"));
  return t.add(logits, t.constant(token_mask(int(t.value(logits).rows()),
                                             cfg_.vocab_size)));
}

Var HLPolicy::advance(Tape& t, Var obs, Var state) {
  return core_step(t, obs, state);
}

HLScore HLPolicy::score(Tape& t, Var obs, const std::vector<Instruction>& targets,
                        Var state) {
  check_instructions(targets);
  const int batch = int(targets.size());
  HLScore out;
  out.state = core_step(t, obs, state);
  out.value = t.add_rowvec(t.matmul(out.state, t.param(params_, "value/w")),
                           t.param(params_, "value/b"));
  Var logprob = t.constant(Mat::Zero(batch, 1));
  Var ent = t.constant(Mat::Zero(batch, 1));
  Var embed = t.param(params_, "tok/embed");
  Var d = out.state;
  for (int p = 1; p < kInstructionLen; ++p) {
    std::vector<int> prev(batch), tok(batch);
    Mat mask(batch, 1);
    for (int b = 0; b < batch; ++b) {
      prev[b] = targets[size_t(b)].token_ids[p - 1];
      tok[b] = targets[size_t(b)].token_ids[p];
      mask(b, 0) = tok[b] != kPadId ? 1.0 : 0.0;
    }
    d = gru_step(t, params_, dec_, t.embed_rows(embed, prev), d, cfg_.hidden_dim);
    Var logits = token_logits(t, d);
    Var m = t.constant(mask);
    logprob = t.add(logprob, t.mul(t.gather_logprob(logits, tok), m));
    ent = t.add(ent, t.mul(t.entropy(logits), m));
  }
  out.logprob = logprob;
  out.entropy = ent;
  return out;
}

HLSample HLPolicy::decide(const Observation& obs, Mat& state, Rng* rng) const {
  Tape t(false);
  auto& self = const_cast<HLPolicy&>(*this);
  Var h = self.core_step(t, t.constant(obs_row(obs)), t.constant(state));
  state = t.value(h);
  HLSample out;
  out.value = t.value(t.add_rowvec(t.matmul(h, t.param(self.params_, "value/w")),
                                   t.param(self.params_, "value/b")))(0, 0);
  out.g.token_ids.fill(std::int16_t(kPadId));
  out.g.token_ids[0] = std::int16_t(kBosId);
  Var d = h;
  int prev = kBosId;
  for (int p = 1; p < kInstructionLen; ++p) {
    Var x = t.embed_rows(t.param(self.params_, "tok/embed"), {prev});
    d = gru_step(t, self.params_, self.dec_, x, d, self.cfg_.hidden_dim);
    const Eigen::RowVectorXd logits = t.value(self.token_logits(t, d)).row(0);
    int tok;
    if (p == kInstructionLen - 1)
      tok = kEosId;  // force termination at the last slot
    else
      tok = sample_row(logits, rng);
    out.logprob += row_log_softmax(logits)(tok);
    out.g.token_ids[p] = std::int16_t(tok);
    if (tok == kEosId) break;
    prev = tok;
  }
  return out;
}

Mat HLPolicy::initial_state(int batch) const {
  return Mat::Zero(batch, cfg_.hidden_dim);
}

void HLPolicy::save(const std::string& path) const {
  params_.save(path, config_tag(kTagHL, cfg_));
}

HLPolicy HLPolicy::load(const std::string& path) {
  std::string tag;
  ParamStore store = ParamStore::load(path, &tag);
  HLPolicy p;
  p.cfg_ = parse_tag(tag, kTagHL);
  p.params_ = std::move(store);
  p.core_ = {"core/wx", "core/wh", "core/b"};
  p.dec_ = {"dec/wx", "dec/wh", "dec/b"};
  return p;
}

// ---------------------------------------------------------------------------
// FlatPolicy
// ---------------------------------------------------------------------------

FlatPolicy::FlatPolicy(const PolicyConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  check_config(cfg);
  Rng rng(seed);
  register_params(rng);
}

void FlatPolicy::register_params(Rng& rng) {
  params_.create("obs/w", cfg_.obs_dim, cfg_.hidden_dim, Init::FanInUniform, rng);
  params_.create("obs/b", 1, cfg_.hidden_dim, Init::Zeros, rng);
  core_ = gru_init(params_, "core", cfg_.hidden_dim, cfg_.hidden_dim, rng);
  params_.create("action/w", cfg_.hidden_dim, kNumActions, Init::FanInUniform, rng);
  params_.create("action/b", 1, kNumActions, Init::Zeros, rng);
  params_.create("value/w", cfg_.hidden_dim, 1, Init::FanInUniform, rng);
  params_.create("value/b", 1, 1, Init::Zeros, rng);
  const int aux_out = (kInstructionLen - 1) * cfg_.vocab_size;
  params_.create("aux/w", cfg_.hidden_dim, aux_out, Init::FanInUniform, rng);
  params_.create("aux/b", 1, aux_out, Init::Zeros, rng);
}

FlatForward FlatPolicy::forward(Tape& t, Var obs, Var state) {
  FlatForward out;
  out.state = gru_step(t, params_, core_, encode_obs(t, params_, obs), state,
                       cfg_.hidden_dim);
  out.action_logits = t.add_rowvec(t.matmul(out.state, t.param(params_, "action/w")),
                                   t.param(params_, "action/b"));
  out.value = t.add_rowvec(t.matmul(out.state, t.param(params_, "value/w")),
                           t.param(params_, "value/b"));
  out.aux_logits = t.add_rowvec(t.matmul(out.state, t.param(params_, "aux/w")),
                                t.param(params_, "aux/b"));
  return out;
}

Action FlatPolicy::act(const Observation& obs, Mat& state, Rng* rng,
                       double* logprob, double* value) const {
  Tape t(false);
  auto& self = const_cast<FlatPolicy&>(*this);
  FlatForward f = self.forward(t, t.constant(obs_row(obs)), t.constant(state));
  state = t.value(f.state);
  const Eigen::RowVectorXd logits = t.value(f.action_logits).row(0);
  const int a = sample_row(logits, rng);
  if (logprob) *logprob = row_log_softmax(logits)(a);
  if (value) *value = t.value(f.value)(0, 0);
  return Action(a);
}

Mat FlatPolicy::initial_state(int batch) const {
  return Mat::Zero(batch, cfg_.hidden_dim);
}

void FlatPolicy::save(const std::string& path) const {
  params_.save(path, config_tag(kTagFlat, cfg_));
}

FlatPolicy FlatPolicy::load(const std::string& path) {
  std::string tag;
  ParamStore store = ParamStore::load(path, &tag);
  FlatPolicy p;
  p.cfg_ = parse_tag(tag, kTagFlat);
  p.params_ = std::move(store);
  p.core_ = {"core/wx", "core/wh", "core/b"};
  return p;
}

}  // namespace keygate
