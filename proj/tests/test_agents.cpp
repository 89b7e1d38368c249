#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "doctest.h"
#include "keygate/agents.hpp"

using namespace keygate;

namespace {

Observation random_obs(Rng& rng) {
  Observation o;
  for (auto& c : o.cell_channel)
    c = std::uint8_t(rng.uniform_int(kNumCellChannels));
  o.held_color = int(rng.uniform_int(kNumColors + 1));
  o.reward_prev = rng.bernoulli(0.2) ? 1.0 : 0.0;
  return o;
}

PolicyConfig small_cfg(const Vocabulary& vocab) {
  PolicyConfig cfg;
  cfg.vocab_size = vocab.size();
  cfg.embed_dim = 8;
  cfg.hidden_dim = 16;
  return cfg;
}

Eigen::RowVectorXd softmax(const Eigen::RowVectorXd& logits) {
  Eigen::RowVectorXd e = (logits.array() - logits.maxCoeff()).exp();
  return e / e.sum();
}

}  // namespace

TEST_CASE("ll policy: distribution, determinism, malformed input") {
  Vocabulary vocab;
  LLPolicy ll(small_cfg(vocab), 1);
  Rng rng(3);
  Observation obs = random_obs(rng);
  Instruction g = tokenize(vocab, instr_pick_up(Color{0}));

  Tape t(false);
  Var logits = ll.forward(t, t.constant(obs_row(obs)), {g},
                          t.constant(ll.initial_state(1)), nullptr);
  CHECK(t.value(logits).cols() == kNumActions);
  CHECK(t.value(logits).allFinite());
  CHECK(softmax(t.value(logits).row(0)).sum() == doctest::Approx(1.0).epsilon(1e-9));

  // identical inputs -> identical outputs
  Mat s1 = ll.initial_state(1), s2 = ll.initial_state(1);
  Action a1 = ll.act(obs, g, s1, nullptr);
  Action a2 = ll.act(obs, g, s2, nullptr);
  CHECK(a1 == a2);
  CHECK(s1 == s2);

  Instruction bad;  // all PAD, no BOS
  CHECK_THROWS_AS(ll.act(obs, bad, s1, nullptr), std::invalid_argument);
}

TEST_CASE("ll policy: batched forward equals per-episode evaluation") {
  Vocabulary vocab;
  LLPolicy ll(small_cfg(vocab), 2);
  Rng rng(4);
  const int T = 5;
  std::vector<Observation> ep0, ep1;
  for (int t = 0; t < T; ++t) {
    ep0.push_back(random_obs(rng));
    ep1.push_back(random_obs(rng));
  }
  Instruction g0 = tokenize(vocab, instr_go_to_gate(Side::Left));
  Instruction g1 = tokenize(vocab, instr_drop_it());

  // sequential, one episode at a time
  std::vector<Mat> seq_logits;
  for (const auto* ep : {&ep0, &ep1}) {
    const Instruction& g = ep == &ep0 ? g0 : g1;
    Mat h = ll.initial_state(1);
    for (const auto& o : *ep) {
      Tape t(false);
      Var hn;
      Var lg = ll.forward(t, t.constant(obs_row(o)), {g}, t.constant(h), &hn);
      seq_logits.push_back(t.value(lg));
      h = t.value(hn);
    }
  }
  // batched, both episodes as rows, with a start-flag reset
  Mat h = ll.initial_state(2);
  h.setConstant(0.37);  // stale state from a previous window
  apply_state_reset(h, {1, 1});
  for (int step = 0; step < T; ++step) {
    Tape t(false);
    Var hn;
    Var lg = ll.forward(t, t.constant(obs_matrix({ep0[size_t(step)], ep1[size_t(step)]})),
                        {g0, g1}, t.constant(h), &hn);
    const Mat& L = t.value(lg);
    CHECK((L.row(0) - seq_logits[size_t(step)].row(0)).cwiseAbs().maxCoeff() < 1e-12);
    CHECK((L.row(1) - seq_logits[size_t(T + step)].row(0)).cwiseAbs().maxCoeff() < 1e-12);
    h = t.value(hn);
  }
}

TEST_CASE("hl policy: sampling agrees with scoring") {
  Vocabulary vocab;
  HLPolicy hl(small_cfg(vocab), 5);
  Rng obs_rng(6);
  for (int trial = 0; trial < 50; ++trial) {
    Observation obs = random_obs(obs_rng);
    Rng rng(100 + std::uint64_t(trial));
    Mat h = hl.initial_state(1);
    HLSample s = hl.decide(obs, h, &rng);
    CHECK(s.g.well_formed());
    CHECK(std::isfinite(s.value));

    Tape t(false);
    HLScore sc = hl.score(t, t.constant(obs_row(obs)), {s.g},
                          t.constant(hl.initial_state(1)));
    CHECK(t.value(sc.logprob)(0, 0) == doctest::Approx(s.logprob).epsilon(1e-10));
    CHECK(t.value(sc.value)(0, 0) == doctest::Approx(s.value).epsilon(1e-12));
    CHECK((t.value(sc.state) - h).cwiseAbs().maxCoeff() < 1e-12);
    CHECK(t.value(sc.entropy)(0, 0) >= 0.0);
  }
}

TEST_CASE("hl policy: greedy decode deterministic, mass bound, no PAD/BOS tokens") {
  Vocabulary vocab;
  HLPolicy hl(small_cfg(vocab), 7);
  Rng rng(8);
  Observation obs = random_obs(rng);

  Mat h1 = hl.initial_state(1), h2 = hl.initial_state(1);
  HLSample g1 = hl.decide(obs, h1, nullptr);
  HLSample g2 = hl.decide(obs, h2, nullptr);
  CHECK(g1.g == g2.g);
  CHECK(g1.logprob == g2.logprob);

  // decoded tokens never include PAD or BOS past position 0
  for (int trial = 0; trial < 30; ++trial) {
    Rng r(900 + std::uint64_t(trial));
    Mat h = hl.initial_state(1);
    HLSample s = hl.decide(obs, h, &r);
    for (int p = 1; p < kInstructionLen; ++p) {
      CHECK(s.g.token_ids[p] != kBosId);
      if (p <= s.g.eos_index()) CHECK(s.g.token_ids[p] != kPadId);
    }
  }

  // total probability over the 16 grammar strings is a lower bound on 1
  double mass = 0.0;
  for (const auto& g : enumerate_instructions(vocab)) {
    Tape t(false);
    HLScore sc = hl.score(t, t.constant(obs_row(obs)), {g},
                          t.constant(hl.initial_state(1)));
    mass += std::exp(t.value(sc.logprob)(0, 0));
  }
  CHECK(mass > 0.0);
  CHECK(mass <= 1.0 + 1e-9);
}

TEST_CASE("hl policy: seeded sampling reproducible") {
  Vocabulary vocab;
  HLPolicy hl(small_cfg(vocab), 9);
  Rng obs_rng(10);
  Observation obs = random_obs(obs_rng);
  Rng ra(77), rb(77);
  Mat ha = hl.initial_state(1), hb = hl.initial_state(1);
  CHECK(hl.decide(obs, ha, &ra).g == hl.decide(obs, hb, &rb).g);
}

TEST_CASE("flat policy: heads and aux independence") {
  Vocabulary vocab;
  FlatPolicy flat(small_cfg(vocab), 11);
  Rng rng(12);
  Observation obs = random_obs(rng);

  Tape t(false);
  FlatForward f = flat.forward(t, t.constant(obs_row(obs)),
                               t.constant(flat.initial_state(1)));
  CHECK(t.value(f.action_logits).cols() == kNumActions);
  CHECK(softmax(t.value(f.action_logits).row(0)).sum() ==
        doctest::Approx(1.0).epsilon(1e-9));
  CHECK(t.value(f.value).size() == 1);
  CHECK(t.value(f.aux_logits).cols() == (kInstructionLen - 1) * vocab.size());

  // perturbing only the aux head leaves actions and value untouched
  Mat h = flat.initial_state(1);
  double v1 = 0, lp1 = 0;
  Action a1 = flat.act(obs, h, nullptr, &lp1, &v1);
  flat.params().param(flat.params().index_of("aux/w")).value.setRandom();
  flat.params().param(flat.params().index_of("aux/b")).value.setRandom();
  Mat h2 = flat.initial_state(1);
  double v2 = 0, lp2 = 0;
  Action a2 = flat.act(obs, h2, nullptr, &lp2, &v2);
  CHECK(a1 == a2);
  CHECK(v1 == v2);
  CHECK(lp1 == lp2);
  CHECK(h == h2);
}

TEST_CASE("policy checkpoints preserve kind and parameters") {
  Vocabulary vocab;
  PolicyConfig cfg = small_cfg(vocab);
  LLPolicy ll(cfg, 20);
  HLPolicy hl(cfg, 21);
  FlatPolicy flat(cfg, 22);
  ll.save("ll_test.ckpt");
  hl.save("hl_test.ckpt");
  flat.save("flat_test.ckpt");

  LLPolicy ll2 = LLPolicy::load("ll_test.ckpt");
  CHECK(ll2.params().checksum() == ll.params().checksum());
  CHECK(ll2.config().hidden_dim == cfg.hidden_dim);
  CHECK(ll2.config().vocab_size == vocab.size());

  HLPolicy hl2 = HLPolicy::load("hl_test.ckpt");
  CHECK(hl2.params().checksum() == hl.params().checksum());
  // loaded policy decodes identically
  Rng rng(23);
  Observation obs = random_obs(rng);
  Mat ha = hl.initial_state(1), hb = hl2.initial_state(1);
  CHECK(hl.decide(obs, ha, nullptr).g == hl2.decide(obs, hb, nullptr).g);

  FlatPolicy flat2 = FlatPolicy::load("flat_test.ckpt");
  CHECK(flat2.params().checksum() == flat.params().checksum());

  // kind mismatch rejected
  CHECK_THROWS_AS(LLPolicy::load("hl_test.ckpt"), std::runtime_error);
  CHECK_THROWS_AS(HLPolicy::load("flat_test.ckpt"), std::runtime_error);
  std::remove("ll_test.ckpt");
  std::remove("hl_test.ckpt");
  std::remove("flat_test.ckpt");
}

TEST_CASE("frozen ll still acts but rejects training") {
  Vocabulary vocab;
  LLPolicy ll(small_cfg(vocab), 30);
  ll.params().freeze();
  Rng rng(31);
  Observation obs = random_obs(rng);
  Instruction g = tokenize(vocab, instr_get_apple());
  Mat h = ll.initial_state(1);
  CHECK_NOTHROW(ll.act(obs, g, h, &rng));
  CHECK_THROWS_AS(ll.params().adam_step(1e-3), std::logic_error);
  Tape t;  // recording
  CHECK_THROWS_AS(
      ll.forward(t, t.constant(obs_row(obs)), {g}, t.constant(h), nullptr),
      std::logic_error);
}
