#include "doctest.h"

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "keygate/tensor.hpp"

using namespace keygate;

namespace {

Mat rand_mat(int r, int c, Rng& rng) {
  Mat m(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) m(i, j) = rng.normal();
  return m;
}

// Runs grad_check `trials` times on losses built by `make`, which receives a
// per-trial store/rng and returns the loss builder. Returns the worst relative
// error seen.
double check_op(
    int trials, std::uint64_t seed,
    const std::function<std::function<Var(Tape&)>(ParamStore&, Rng&)>& make) {
  double worst = 0.0;
  for (int t = 0; t < trials; ++t) {
    Rng rng(seed + std::uint64_t(t));
    ParamStore store;
    auto f = make(store, rng);
    auto report = grad_check(f, store);
    CHECK(report.pass);
    worst = std::max(worst, report.worst);
  }
  return worst;
}

}  // namespace

TEST_CASE("grad check: elementwise and reduction ops") {
  const int kTrials = 20;
  // matmul + bias + nonlinearity chain
  check_op(kTrials, 100, [](ParamStore& s, Rng& rng) {
    const int b = 1 + int(rng.uniform_int(4));
    const int in = 1 + int(rng.uniform_int(5));
    const int out = 1 + int(rng.uniform_int(5));
    s.create("w", in, out, Init::FanInUniform, rng);
    s.create("b", 1, out, Init::FanInUniform, rng);
    Mat x = rand_mat(b, in, rng);
    return [&s, x, out](Tape& t) {
      Var h = t.add_rowvec(t.matmul(t.constant(x), t.param(s, "w")),
                           t.param(s, "b"));
      return t.mean(t.tanh_(h));
    };
  });
  check_op(kTrials, 200, [](ParamStore& s, Rng& rng) {
    const int r = 1 + int(rng.uniform_int(4)), c = 1 + int(rng.uniform_int(5));
    s.create("a", r, c, Init::FanInUniform, rng);
    s.create("b", r, c, Init::FanInUniform, rng);
    return [&s](Tape& t) {
      Var a = t.param(s, "a"), b = t.param(s, "b");
      Var y = t.add(t.mul(a, b), t.sub(t.square(a), t.scale(b, 0.7)));
      return t.sum(t.sigmoid(y));
    };
  });
  // relu needs inputs away from the kink for finite differences
  check_op(kTrials, 300, [](ParamStore& s, Rng& rng) {
    const int r = 1 + int(rng.uniform_int(4)), c = 1 + int(rng.uniform_int(5));
    Mat& a = s.create("a", r, c, Init::FanInUniform, rng);
    for (int i = 0; i < a.size(); ++i)
      if (std::abs(a.data()[i]) < 1e-3) a.data()[i] = 0.1;
    return [&s](Tape& t) { return t.mean(t.relu(t.param(s, "a"))); };
  });
  check_op(kTrials, 400, [](ParamStore& s, Rng& rng) {
    const int r = 1 + int(rng.uniform_int(4));
    const int c1 = 1 + int(rng.uniform_int(4)), c2 = 1 + int(rng.uniform_int(4));
    s.create("a", r, c1, Init::FanInUniform, rng);
    s.create("b", r, c2, Init::FanInUniform, rng);
    const int start = int(rng.uniform_int(std::uint64_t(c1)));
    const int n = 1 + int(rng.uniform_int(std::uint64_t(c1 - start)));
    return [&s, start, n](Tape& t) {
      Var cat = t.concat_cols(t.param(s, "a"), t.param(s, "b"));
      return t.sum(t.square(t.slice_cols(cat, start, n)));
    };
  });
}

TEST_CASE("grad check: embeddings") {
  const int kTrials = 20;
  check_op(kTrials, 500, [](ParamStore& s, Rng& rng) {
    const int v = 3 + int(rng.uniform_int(5)), e = 1 + int(rng.uniform_int(4));
    s.create("table", v, e, Init::FanInUniform, rng);
    std::vector<int> ids;
    for (int i = 0; i < 6; ++i) ids.push_back(int(rng.uniform_int(std::uint64_t(v))));
    ids.push_back(ids[0]);  // duplicate index must accumulate
    return [&s, ids](Tape& t) {
      return t.mean(t.square(t.embed_rows(t.param(s, "table"), ids)));
    };
  });
  check_op(kTrials, 600, [](ParamStore& s, Rng& rng) {
    const int v = 4 + int(rng.uniform_int(4)), e = 2 + int(rng.uniform_int(3));
    const int batch = 1 + int(rng.uniform_int(3)), len = 4;
    s.create("table", v, e, Init::FanInUniform, rng);
    std::vector<int> ids;
    std::vector<std::uint8_t> valid;
    for (int i = 0; i < batch * len; ++i) {
      ids.push_back(int(rng.uniform_int(std::uint64_t(v))));
      valid.push_back(std::uint8_t(rng.uniform() < 0.7));
    }
    for (int b = 0; b < batch; ++b) valid[b * len] = 1;  // no empty rows
    return [&s, ids, valid, batch, len](Tape& t) {
      return t.sum(t.square(
          t.embed_mean(t.param(s, "table"), ids, valid, batch, len)));
    };
  });
}

TEST_CASE("grad check: categorical heads") {
  const int kTrials = 20;
  check_op(kTrials, 700, [](ParamStore& s, Rng& rng) {
    const int b = 1 + int(rng.uniform_int(4)), c = 2 + int(rng.uniform_int(5));
    s.create("logits", b, c, Init::FanInUniform, rng);
    std::vector<int> targets;
    std::vector<double> w;
    for (int i = 0; i < b; ++i) {
      targets.push_back(int(rng.uniform_int(std::uint64_t(c))));
      w.push_back(rng.uniform() < 0.3 ? 0.0 : rng.uniform());
    }
    return [&s, targets, w](Tape& t) {
      return t.softmax_cross_entropy(t.param(s, "logits"), targets, w);
    };
  });
  check_op(kTrials, 800, [](ParamStore& s, Rng& rng) {
    const int b = 1 + int(rng.uniform_int(4)), c = 2 + int(rng.uniform_int(5));
    s.create("logits", b, c, Init::FanInUniform, rng);
    std::vector<int> targets;
    for (int i = 0; i < b; ++i)
      targets.push_back(int(rng.uniform_int(std::uint64_t(c))));
    Mat adv = rand_mat(b, 1, rng);
    return [&s, targets, adv](Tape& t) {
      Var lp = t.gather_logprob(t.param(s, "logits"), targets);
      return t.sum(t.mul(lp, t.constant(adv)));
    };
  });
  check_op(kTrials, 900, [](ParamStore& s, Rng& rng) {
    const int b = 1 + int(rng.uniform_int(4)), c = 2 + int(rng.uniform_int(5));
    s.create("logits", b, c, Init::FanInUniform, rng);
    return [&s](Tape& t) { return t.mean(t.entropy(t.param(s, "logits"))); };
  });
}

TEST_CASE("grad check: recurrent cell") {
  const int kTrials = 20;
  check_op(kTrials, 1000, [](ParamStore& s, Rng& rng) {
    const int b = 1 + int(rng.uniform_int(3));
    const int in = 2 + int(rng.uniform_int(3)), hid = 2 + int(rng.uniform_int(3));
    auto names = gru_init(s, "gru", in, hid, rng);
    Mat x0 = rand_mat(b, in, rng), x1 = rand_mat(b, in, rng);
    Mat h0 = rand_mat(b, hid, rng);
    return [&s, names, x0, x1, h0, hid](Tape& t) {
      Var h = gru_step(t, s, names, t.constant(x0), t.constant(h0), hid);
      h = gru_step(t, s, names, t.constant(x1), h, hid);
      return t.mean(t.square(h));
    };
  });
}

TEST_CASE("grad check catches a wrong derivative") {
  Rng rng(42);
  ParamStore s;
  s.create("w", 2, 3, Init::FanInUniform, rng);
  // Forward value disagrees between the recorded pass and the perturbed
  // re-evaluations, so the analytic gradient cannot match.
  auto f = [&s](Tape& t) {
    const double k = t.recording() ? 2.0 : 2.5;
    return t.sum(t.scale(t.param(s, "w"), k));
  };
  auto report = grad_check(f, s);
  CHECK_FALSE(report.pass);
  CHECK(report.worst > 1e-2);
}

TEST_CASE("categorical op values") {
  Tape t(false);
  const int b = 3, c = 6;
  Var logits = t.constant(Mat::Zero(b, c));
  // uniform logits: cross entropy = ln C per unit-weight row, entropy = ln C
  Var ce = t.softmax_cross_entropy(logits, {0, 3, 5}, {1.0, 1.0, 0.5});
  CHECK(t.value(ce)(0, 0) == doctest::Approx(2.5 * std::log(6.0)).epsilon(1e-12));
  Var ent = t.entropy(logits);
  for (int i = 0; i < b; ++i)
    CHECK(t.value(ent)(i, 0) == doctest::Approx(std::log(6.0)).epsilon(1e-12));
  Var lp = t.gather_logprob(logits, {1, 2, 4});
  for (int i = 0; i < b; ++i)
    CHECK(t.value(lp)(i, 0) == doctest::Approx(-std::log(6.0)).epsilon(1e-12));
  // shifted logits must not overflow
  Var big = t.constant(Mat::Constant(1, 4, 1e4));
  CHECK(t.value(t.entropy(big))(0, 0) == doctest::Approx(std::log(4.0)));
}

TEST_CASE("adam matches a hand-computed step") {
  Rng rng(7);
  ParamStore s;
  Mat& w = s.create("w", 1, 2, Init::Zeros, rng);
  w << 1.0, -2.0;
  auto f = [&s](Tape& t) { return t.sum(t.square(t.param(s, "w"))); };
  s.zero_grads();
  {
    Tape t;
    t.backward(f(t));
  }
  Mat g = s.param(0).grad;
  CHECK(g(0, 0) == doctest::Approx(2.0));
  CHECK(g(0, 1) == doctest::Approx(-4.0));

  const double lr = 0.1, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  Mat expect = w;
  for (int i = 0; i < 2; ++i) {
    const double m = (1 - b1) * g(0, i), v = (1 - b2) * g(0, i) * g(0, i);
    const double mh = m / (1 - b1), vh = v / (1 - b2);
    expect(0, i) -= lr * mh / (std::sqrt(vh) + eps);
  }
  s.adam_step(lr, b1, b2, eps);
  CHECK(s.step_count() == 1);
  CHECK(w(0, 0) == doctest::Approx(expect(0, 0)).epsilon(1e-15));
  CHECK(w(0, 1) == doctest::Approx(expect(0, 1)).epsilon(1e-15));
}

TEST_CASE("adam rejects non-finite gradients without touching parameters") {
  Rng rng(7);
  ParamStore s;
  s.create("w", 2, 2, Init::FanInUniform, rng);
  const Mat before = s.param(0).value;
  s.param(0).grad(0, 0) = std::nan("");
  CHECK_THROWS_AS(s.adam_step(0.1), std::runtime_error);
  CHECK(s.param(0).value == before);
  CHECK(s.step_count() == 0);
}

TEST_CASE("frozen stores reject updates and recorded gradients") {
  Rng rng(7);
  ParamStore s;
  s.create("w", 2, 2, Init::FanInUniform, rng);
  s.freeze();
  CHECK_THROWS_AS(s.adam_step(0.1), std::logic_error);
  Tape rec;
  CHECK_THROWS_AS(rec.param(s, "w"), std::logic_error);
  // gradient-free evaluation stays legal
  Tape fwd(false);
  Var w = fwd.param(s, "w");
  CHECK(fwd.value(w) == s.param(0).value);
}

TEST_CASE("tape misuse throws") {
  Rng rng(7);
  ParamStore s;
  s.create("w", 2, 3, Init::FanInUniform, rng);
  Tape t;
  Var w = t.param(s, "w");
  CHECK_THROWS_AS(t.backward(w), std::invalid_argument);  // non-scalar
  Var loss = t.sum(w);
  t.backward(loss);
  CHECK_THROWS_AS(t.backward(loss), std::logic_error);  // second sweep
  Tape off(false);
  CHECK_THROWS_AS(off.backward(off.constant(Mat::Zero(1, 1))), std::logic_error);
  CHECK_THROWS_AS(t.matmul(w, w), std::invalid_argument);  // 2x3 * 2x3
  CHECK_THROWS_AS(t.add(w, t.constant(Mat::Zero(3, 2))), std::invalid_argument);
}

TEST_CASE("checkpoint round trip is bit exact") {
  Rng rng(99);
  ParamStore s;
  s.create("enc/w", 5, 7, Init::Orthogonal, rng);
  s.create("enc/b", 1, 7, Init::FanInUniform, rng);
  auto f = [&s](Tape& t) {
    return t.sum(t.square(t.add_rowvec(t.param(s, "enc/w"), t.param(s, "enc/b"))));
  };
  for (int i = 0; i < 3; ++i) {
    s.zero_grads();
    Tape t;
    t.backward(f(t));
    s.adam_step(1e-3);
  }
  const std::string path = "ckpt_test.bin";
  s.save(path, "low-level v3");
  CHECK(ParamStore::peek_tag(path) == "low-level v3");
  std::string tag;
  ParamStore r = ParamStore::load(path, &tag);
  CHECK(tag == "low-level v3");
  CHECK(r.size() == s.size());
  CHECK(r.step_count() == 3);
  CHECK(r.checksum() == s.checksum());
  for (int p = 0; p < s.size(); ++p) {
    CHECK(r.param(p).name == s.param(p).name);
    CHECK(r.param(p).value == s.param(p).value);
    CHECK(r.param(p).m == s.param(p).m);
    CHECK(r.param(p).v == s.param(p).v);
  }
  // resumed training continues identically
  ParamStore r2 = ParamStore::load(path);
  auto step_once = [&f](ParamStore& ps) {
    ps.zero_grads();
    Tape t;
    auto g = [&ps](Tape& tt) {
      return tt.sum(tt.square(
          tt.add_rowvec(tt.param(ps, "enc/w"), tt.param(ps, "enc/b"))));
    };
    t.backward(g(t));
    ps.adam_step(1e-3);
  };
  step_once(s);
  step_once(r2);
  CHECK(r2.checksum() == s.checksum());
  std::remove(path.c_str());
  CHECK_THROWS_AS(ParamStore::load("no_such_ckpt.bin"), std::runtime_error);
}

TEST_CASE("initializers") {
  Rng rng(5);
  ParamStore s;
  // orthogonal recurrent blocks: each HxH slice has orthonormal columns
  const int h = 6;
  Mat& wh = s.create("wh", h, 3 * h, Init::Orthogonal, rng);
  for (int b = 0; b < 3; ++b) {
    Mat q = wh.middleCols(b * h, h);
    CHECK((q.transpose() * q - Mat::Identity(h, h)).cwiseAbs().maxCoeff() < 1e-12);
  }
  // distinct blocks
  CHECK((wh.middleCols(0, h) - wh.middleCols(h, h)).cwiseAbs().maxCoeff() > 1e-3);
  // fan-in uniform bound
  Mat& w = s.create("w", 25, 4, Init::FanInUniform, rng);
  CHECK(w.cwiseAbs().maxCoeff() <= std::sqrt(1.0 / 25));
  CHECK(w.cwiseAbs().maxCoeff() > 0.0);
  // deterministic given the same stream
  Rng rng2(5);
  ParamStore s2;
  s2.create("wh", h, 3 * h, Init::Orthogonal, rng2);
  s2.create("w", 25, 4, Init::FanInUniform, rng2);
  CHECK(s2.param(0).value == wh);
  CHECK(s2.param(1).value == w);
  // reusing a name returns the same storage; shape mismatch throws
  CHECK(&s.create("w", 25, 4, Init::Zeros, rng) == &w);
  CHECK_THROWS_AS(s.create("w", 3, 3, Init::Zeros, rng), std::invalid_argument);
  CHECK(s.num_scalars() == h * 3 * h + 100);
}

TEST_CASE("gru step reduces to known fixed points") {
  Rng rng(11);
  ParamStore s;
  const int hid = 4;
  auto names = gru_init(s, "gru", 3, hid, rng);
  // force z = 1 (carry gate saturated): h' == h
  s.param(s.index_of("gru/b")).value.middleCols(hid, hid).setConstant(500.0);
  s.param(s.index_of("gru/wx")).value.middleCols(hid, hid).setZero();
  s.param(s.index_of("gru/wh")).value.middleCols(hid, hid).setZero();
  Tape t(false);
  Mat h0 = rand_mat(2, hid, rng);
  Var h1 = gru_step(t, s, names, t.constant(rand_mat(2, 3, rng)),
                    t.constant(h0), hid);
  CHECK((t.value(h1) - h0).cwiseAbs().maxCoeff() < 1e-12);
}
