#include "keygate/tensor.hpp"

#include <Eigen/QR>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace keygate {

// ---------------------------------------------------------------------------
// ParamStore
// ---------------------------------------------------------------------------

namespace {

Mat orthogonal_block(int n, Rng& rng) {
  Mat g(n, n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < n; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<Mat> qr(g);
  Mat q = qr.householderQ() * Mat::Identity(n, n);
  Mat r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < n; ++j)
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  return q;
}

Mat make_init(int rows, int cols, Init init, Rng& rng) {
  switch (init) {
    case Init::Zeros:
      return Mat::Zero(rows, cols);
    case Init::FanInUniform: {
      const double a = std::sqrt(1.0 / rows);
      Mat m(rows, cols);
      for (int i = 0; i < rows; ++i)
        for (int j = 0; j < cols; ++j) m(i, j) = (2.0 * rng.uniform() - 1.0) * a;
      return m;
    }
    case Init::Orthogonal: {
      // Square blocks when cols is a multiple of rows (stacked gate
      // matrices); otherwise one QR of the larger orientation, cropped.
      if (cols % rows == 0) {
        Mat m(rows, cols);
        for (int b = 0; b < cols / rows; ++b)
          m.middleCols(b * rows, rows) = orthogonal_block(rows, rng);
        return m;
      }
      const int n = std::max(rows, cols);
      return orthogonal_block(n, rng).topLeftCorner(rows, cols);
    }
  }
  return Mat::Zero(rows, cols);
}

}  // namespace

Mat& ParamStore::create(const std::string& name, int rows, int cols, Init init,
                        Rng& rng) {
  auto it = index_.find(name);
  if (it != index_.end()) {
    Param& p = params_[it->second];
    if (p.value.rows() != rows || p.value.cols() != cols)
      throw std::invalid_argument("parameter shape mismatch: " + name);
    return p.value;
  }
  Param p;
  p.name = name;
  p.value = make_init(rows, cols, init, rng);
  p.grad = Mat::Zero(rows, cols);
  p.m = Mat::Zero(rows, cols);
  p.v = Mat::Zero(rows, cols);
  params_.push_back(std::move(p));
  index_[name] = int(params_.size()) - 1;
  return params_.back().value;
}

int ParamStore::index_of(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::invalid_argument("unknown parameter: " + name);
  return it->second;
}

void ParamStore::zero_grads() {
  for (auto& p : params_) p.grad.setZero();
}

void ParamStore::adam_step(double lr, double beta1, double beta2, double eps) {
  if (frozen_) throw std::logic_error("adam_step on a frozen parameter store");
  for (const auto& p : params_)
    if (!p.grad.allFinite())
      throw std::runtime_error("non-finite gradient in parameter " + p.name);
  ++step_;
  const double bc1 = 1.0 - std::pow(beta1, double(step_));
  const double bc2 = 1.0 - std::pow(beta2, double(step_));
  for (auto& p : params_) {
    p.m = beta1 * p.m + (1.0 - beta1) * p.grad;
    p.v = beta2 * p.v + (1.0 - beta2) * p.grad.cwiseProduct(p.grad);
    const Mat m_hat = p.m / bc1;
    const Mat v_hat = p.v / bc2;
    p.value -= lr * m_hat.cwiseQuotient(v_hat.cwiseSqrt() + Mat::Constant(v_hat.rows(), v_hat.cols(), eps));
  }
}

std::uint64_t ParamStore::checksum() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&](const void* data, size_t n) {
    const auto* bytes = static_cast<const std::uint8_t*>(data);
    for (size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params_) {
    mix(p.name.data(), p.name.size());
    mix(p.value.data(), sizeof(double) * p.value.size());
  }
  return h;
}

std::int64_t ParamStore::num_scalars() const {
  std::int64_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

namespace {

constexpr char kCkptMagic[8] = {'K', 'G', 'C', 'K', 'P', 'T', '0', '1'};

void write_u32(std::ostream& os, std::uint32_t v) { os.write(reinterpret_cast<char*>(&v), 4); }
void write_i64(std::ostream& os, std::int64_t v) { os.write(reinterpret_cast<char*>(&v), 8); }
void write_string(std::ostream& os, const std::string& s) {
  write_u32(os, std::uint32_t(s.size()));
  os.write(s.data(), std::streamsize(s.size()));
}
void write_mat(std::ostream& os, const Mat& m) {
  write_i64(os, m.rows());
  write_i64(os, m.cols());
  os.write(reinterpret_cast<const char*>(m.data()),
           std::streamsize(sizeof(double) * m.size()));
}
std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}
std::int64_t read_i64(std::istream& is) {
  std::int64_t v;
  is.read(reinterpret_cast<char*>(&v), 8);
  return v;
}
std::string read_string(std::istream& is) {
  std::string s(read_u32(is), '\0');
  is.read(s.data(), std::streamsize(s.size()));
  return s;
}
Mat read_mat(std::istream& is) {
  const std::int64_t rows = read_i64(is);
  const std::int64_t cols = read_i64(is);
  Mat m(rows, cols);
  is.read(reinterpret_cast<char*>(m.data()),
          std::streamsize(sizeof(double) * m.size()));
  return m;
}

}  // namespace

void ParamStore::save(const std::string& path, const std::string& tag) const {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write checkpoint: " + path);
  os.write(kCkptMagic, 8);
  write_string(os, tag);
  write_i64(os, step_);
  write_u32(os, std::uint32_t(params_.size()));
  for (const auto& p : params_) {
    write_string(os, p.name);
    write_mat(os, p.value);
    write_mat(os, p.m);
    write_mat(os, p.v);
  }
  if (!os) throw std::runtime_error("checkpoint write failure: " + path);
}

ParamStore ParamStore::load(const std::string& path, std::string* tag) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("bad checkpoint header: " + path);
  std::string t = read_string(is);
  if (tag) *tag = t;
  ParamStore store;
  store.step_ = read_i64(is);
  const std::uint32_t n = read_u32(is);
  for (std::uint32_t i = 0; i < n; ++i) {
    Param p;
    p.name = read_string(is);
    p.value = read_mat(is);
    p.m = read_mat(is);
    p.v = read_mat(is);
    p.grad = Mat::Zero(p.value.rows(), p.value.cols());
    store.index_[p.name] = int(store.params_.size());
    store.params_.push_back(std::move(p));
  }
  if (!is) throw std::runtime_error("truncated checkpoint: " + path);
  return store;
}

std::string ParamStore::peek_tag(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint: " + path);
  char magic[8];
  is.read(magic, 8);
  if (std::memcmp(magic, kCkptMagic, 8) != 0)
    throw std::runtime_error("bad checkpoint header: " + path);
  return read_string(is);
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

Var Tape::push(Mat value, std::function<void()> backward_fn) {
  Node node;
  node.value = std::move(value);
  if (recording_) {
    node.grad = Mat::Zero(node.value.rows(), node.value.cols());
    node.backward = std::move(backward_fn);
  }
  nodes_.push_back(std::move(node));
  return Var{int(nodes_.size()) - 1};
}

void Tape::check_same_shape(const char* op, Var a, Var b) const {
  const Mat &A = nodes_[a.id].value, &B = nodes_[b.id].value;
  if (A.rows() != B.rows() || A.cols() != B.cols()) {
    std::ostringstream os;
    os << op << ": shape mismatch (" << A.rows() << "x" << A.cols() << " vs "
       << B.rows() << "x" << B.cols() << ")";
    throw std::invalid_argument(os.str());
  }
}

Var Tape::constant(Mat value) { return push(std::move(value), {}); }

Var Tape::param(ParamStore& store, const std::string& name) {
  const int pi = store.index_of(name);
  if (recording_ && store.frozen())
    throw std::logic_error("recording gradients through frozen parameter " + name);
  Var v = push(store.param(pi).value, {});
  if (recording_) {
    ParamStore* sp = &store;
    const int id = v.id;
    nodes_[id].backward = [this, sp, pi, id]() {
      sp->param(pi).grad += nodes_[id].grad;
    };
  }
  return v;
}

Var Tape::matmul(Var a, Var b) {
  const Mat &A = nodes_[a.id].value, &B = nodes_[b.id].value;
  if (A.cols() != B.rows()) {
    std::ostringstream os;
    os << "matmul: inner dimension mismatch (" << A.rows() << "x" << A.cols()
       << " * " << B.rows() << "x" << B.cols() << ")";
    throw std::invalid_argument(os.str());
  }
  Var out = push(A * B, {});
  if (recording_) {
    const int oid = out.id;
    nodes_[oid].backward = [this, a, b, oid]() {
      nodes_[a.id].grad.noalias() += nodes_[oid].grad * nodes_[b.id].value.transpose();
      nodes_[b.id].grad.noalias() += nodes_[a.id].value.transpose() * nodes_[oid].grad;
    };
  }
  return out;
}

Var Tape::add(Var a, Var b) {
  check_same_shape("add", a, b);
  Var out = push(nodes_[a.id].value + nodes_[b.id].value, {});
  if (recording_) {
    const int oid = out.id;
    nodes_[oid].backward = [this, a, b, oid]() {
      nodes_[a.id].grad += nodes_[oid].grad;
      nodes_[b.id].grad += nodes_[oid].grad;
    };
  }
  return out;
}

Var Tape::add_rowvec(Var a, Var bias) {
  const Mat &A = nodes_[a.id].value, &B = nodes_[bias.id].value;
  if (B.rows() != 1 || B.cols() != A.cols())
    throw std::invalid_argument("add_rowvec: bias must be 1x" +
                                std::to_string(A.cols()));
  Var out = push(A.rowwise() + B.row(0), {});
  if (recording_) {
    const int oid = out.id;
    nodes_[oid].backward = [this, a, bias, oid]() {
      nodes_[a.id].grad += nodes_[oid].grad;
      nodes_[bias.id].grad.row(0) += nodes_[oid].grad.colwise().sum();
    };
  }
  return out;
}

Var Tape::sub(Var a, Var b) {
  check_same_shape("sub", a, b);
  Var out = push(nodes_[a.id].value - nodes_[b.id].value, {});
  if (recording_) {
    const int oid = out.id;
    nodes_[oid].backward = [this, a, b, oid]() {
      nodes_[a.id].grad += nodes_[oid].grad;
      nodes_[b.id].grad -= nodes_[oid].grad;
    };
  }
  return out;
}

Var Tape::mul(Var a, Var b) {
  check_same_shape("mul", a, b);
  Var out = push(nodes_[a.id].value.cwiseProduct(nodes_[b.id].value), {});
  if (recording_) {
    const int oid = out.id;
    nodes_[oid].backward = [this, a, b, oid]() {
      nodes_[a.id].grad += nodes_[oid].grad.cwiseProduct(nodes_[b.id].value);
      nodes_[b.id].grad += nodes_[oid].grad.cwiseProduct(nodes_[a.id].value);
    };
  }
  return out;
}

Var Tape::scale(Var a, double s) {
  Var out = push(nodes_[a.id].value * s, {});
  if (recording_) {
    const int oid = out.id;
    nodes_[oid].backward = [this, a, s, oid]() {
      nodes_[a.id].grad += nodes_[oid].grad * s;
    };
  }
  return out;
}

Var Tape::relu(Var a) {
  Var out = push(nodes_[a.id].value.cwiseMax(0.0), {});
  if (recording_) {
    const int oid = out.id;
    nodes_[oid].backward = [this, a, oid]() {
      nodes_[a.id].grad +=
          nodes_[oid].grad.cwiseProduct((nodes_[a.id].value.array() > 0.0).cast<double>().matrix());
    };
  }
  return out;
}

Var Tape::tanh_(Var a) {
  Var out = push(nodes_[a.id].value.array().tanh().matrix(), {});
  if (recording_) {
    const int oid = out.id;
    nodes_[oid].backward = [this, a, oid]() {
      const auto& y = nodes_[oid].value.array();
      nodes_[a.id].grad.array() += nodes_[oid].grad.array() * (1.0 - y * y);
    };
  }
  return out;
}

Var Tape::sigmoid(Var a) {
  Var out = push((1.0 / (1.0 + (-nodes_[a.id].value.array()).exp())).matrix(), {});
  if (recording_) {
    const int oid = out.id;
    nodes_[oid].backward = [this, a, oid]() {
      const auto& y = nodes_[oid].value.array();
      nodes_[a.id].grad.array() += nodes_[oid].grad.array() * y * (1.0 - y);
    };
  }
  return out;
}

Var Tape::square(Var a) {
  Var out = push(nodes_[a.id].value.cwiseProduct(nodes_[a.id].value), {});
  if (recording_) {
    const int oid = out.id;
    nodes_[oid].backward = [this, a, oid]() {
      nodes_[a.id].grad += 2.0 * nodes_[oid].grad.cwiseProduct(nodes_[a.id].value);
    };
  }
  return out;
}

Var Tape::concat_cols(Var a, Var b) {
  const Mat &A = nodes_[a.id].value, &B = nodes_[b.id].value;
  if (A.rows() != B.rows())
    throw std::invalid_argument("concat_cols: row count mismatch");
  Mat out(A.rows(), A.cols() + B.cols());
  out << A, B;
  Var v = push(std::move(out), {});
  if (recording_) {
    const int oid = v.id;
    nodes_[oid].backward = [this, a, b, oid]() {
      const auto& g = nodes_[oid].grad;
      const int ac = int(nodes_[a.id].value.cols());
      nodes_[a.id].grad += g.leftCols(ac);
      nodes_[b.id].grad += g.rightCols(g.cols() - ac);
    };
  }
  return v;
}

Var Tape::slice_cols(Var a, int start, int n) {
  const Mat& A = nodes_[a.id].value;
  if (start < 0 || start + n > A.cols())
    throw std::invalid_argument("slice_cols: out of range");
  Var out = push(A.middleCols(start, n), {});
  if (recording_) {
    const int oid = out.id;
    nodes_[oid].backward = [this, a, start, n, oid]() {
      nodes_[a.id].grad.middleCols(start, n) += nodes_[oid].grad;
    };
  }
  return out;
}

Var Tape::sum(Var a) {
  Var out = push(Mat::Constant(1, 1, nodes_[a.id].value.sum()), {});
  if (recording_) {
    const int oid = out.id;
    nodes_[oid].backward = [this, a, oid]() {
      nodes_[a.id].grad.array() += nodes_[oid].grad(0, 0);
    };
  }
  return out;
}

Var Tape::mean(Var a) {
  const double n = double(nodes_[a.id].value.size());
  Var out = push(Mat::Constant(1, 1, nodes_[a.id].value.sum() / n), {});
  if (recording_) {
    const int oid = out.id;
    nodes_[oid].backward = [this, a, n, oid]() {
      nodes_[a.id].grad.array() += nodes_[oid].grad(0, 0) / n;
    };
  }
  return out;
}

Var Tape::embed_rows(Var table, const std::vector<int>& ids) {
  const Mat& T = nodes_[table.id].value;
  Mat out(ids.size(), T.cols());
  for (size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || ids[i] >= T.rows())
      throw std::invalid_argument("embed_rows: index out of range");
    out.row(int(i)) = T.row(ids[i]);
  }
  Var v = push(std::move(out), {});
  if (recording_) {
    const int oid = v.id;
    nodes_[oid].backward = [this, table, ids, oid]() {
      for (size_t i = 0; i < ids.size(); ++i)
        nodes_[table.id].grad.row(ids[i]) += nodes_[oid].grad.row(int(i));
    };
  }
  return v;
}

Var Tape::embed_mean(Var table, const std::vector<int>& ids,
                     const std::vector<std::uint8_t>& valid, int batch, int len) {
  const Mat& T = nodes_[table.id].value;
  if (int(ids.size()) != batch * len || valid.size() != ids.size())
    throw std::invalid_argument("embed_mean: ids/valid size mismatch");
  Mat out = Mat::Zero(batch, T.cols());
  std::vector<double> counts(batch, 0.0);
  for (int b = 0; b < batch; ++b) {
    for (int i = 0; i < len; ++i)
      if (valid[b * len + i]) {
        out.row(b) += T.row(ids[b * len + i]);
        counts[b] += 1.0;
      }
    if (counts[b] > 0) out.row(b) /= counts[b];
  }
  Var v = push(std::move(out), {});
  if (recording_) {
    const int oid = v.id;
    nodes_[oid].backward = [this, table, ids, valid, counts, batch, len, oid]() {
      for (int b = 0; b < batch; ++b) {
        if (counts[b] == 0) continue;
        for (int i = 0; i < len; ++i)
          if (valid[b * len + i])
            nodes_[table.id].grad.row(ids[b * len + i]) +=
                nodes_[oid].grad.row(b) / counts[b];
      }
    };
  }
  return v;
}

namespace {

// Row-wise log softmax; returns log probabilities.
Mat log_softmax(const Mat& logits) {
  Mat out(logits.rows(), logits.cols());
  for (int i = 0; i < logits.rows(); ++i) {
    const double mx = logits.row(i).maxCoeff();
    const double lse = mx + std::log((logits.row(i).array() - mx).exp().sum());
    out.row(i) = logits.row(i).array() - lse;
  }
  return out;
}

}  // namespace

Var Tape::softmax_cross_entropy(Var logits, const std::vector<int>& targets,
                                const std::vector<double>& row_weights) {
  const Mat& L = nodes_[logits.id].value;
  if (int(targets.size()) != L.rows())
    throw std::invalid_argument("softmax_cross_entropy: one target per row required");
  std::vector<double> w = row_weights;
  if (w.empty()) w.assign(targets.size(), 1.0);
  const Mat logp = log_softmax(L);
  double loss = 0.0;
  for (int i = 0; i < L.rows(); ++i) {
    if (targets[i] < 0 || targets[i] >= L.cols())
      throw std::invalid_argument("softmax_cross_entropy: target out of range");
    loss -= w[i] * logp(i, targets[i]);
  }
  Var out = push(Mat::Constant(1, 1, loss), {});
  if (recording_) {
    const int oid = out.id;
    nodes_[oid].backward = [this, logits, targets, w, logp, oid]() {
      const double g = nodes_[oid].grad(0, 0);
      Mat probs = logp.array().exp().matrix();
      for (int i = 0; i < probs.rows(); ++i) {
        probs(i, targets[i]) -= 1.0;
        nodes_[logits.id].grad.row(i) += g * w[i] * probs.row(i);
      }
    };
  }
  return out;
}

Var Tape::gather_logprob(Var logits, const std::vector<int>& targets) {
  const Mat& L = nodes_[logits.id].value;
  if (int(targets.size()) != L.rows())
    throw std::invalid_argument("gather_logprob: one target per row required");
  const Mat logp = log_softmax(L);
  Mat out(L.rows(), 1);
  for (int i = 0; i < L.rows(); ++i) out(i, 0) = logp(i, targets[i]);
  Var v = push(std::move(out), {});
  if (recording_) {
    const int oid = v.id;
    nodes_[oid].backward = [this, logits, targets, logp, oid]() {
      const Mat probs = logp.array().exp().matrix();
      for (int i = 0; i < probs.rows(); ++i) {
        const double g = nodes_[oid].grad(i, 0);
        nodes_[logits.id].grad.row(i) -= g * probs.row(i);
        nodes_[logits.id].grad(i, targets[i]) += g;
      }
    };
  }
  return v;
}

Var Tape::entropy(Var logits) {
  const Mat& L = nodes_[logits.id].value;
  const Mat logp = log_softmax(L);
  const Mat probs = logp.array().exp().matrix();
  Mat out(L.rows(), 1);
  for (int i = 0; i < L.rows(); ++i)
    out(i, 0) = -(probs.row(i).array() * logp.row(i).array()).sum();
  Var v = push(std::move(out), {});
  if (recording_) {
    const int oid = v.id;
    nodes_[oid].backward = [this, logits, logp, probs, oid]() {
      for (int i = 0; i < probs.rows(); ++i) {
        const double g = nodes_[oid].grad(i, 0);
        const double h = nodes_[oid].value(i, 0);
        // dH/dz_j = -p_j (log p_j + H)
        nodes_[logits.id].grad.row(i) -=
            g * (probs.row(i).array() * (logp.row(i).array() + h)).matrix();
      }
    };
  }
  return v;
}

void Tape::backward(Var loss) {
  if (!recording_) throw std::logic_error("backward on a non-recording tape");
  if (backward_done_) throw std::logic_error("backward called twice without re-forward");
  const Mat& L = nodes_[loss.id].value;
  if (L.rows() != 1 || L.cols() != 1)
    throw std::invalid_argument("backward requires a scalar loss");
  backward_done_ = true;
  nodes_[loss.id].grad(0, 0) = 1.0;
  for (int i = loss.id; i >= 0; --i)
    if (nodes_[i].backward) nodes_[i].backward();
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

GradCheckReport grad_check(const std::function<Var(Tape&)>& f, ParamStore& store,
                           double eps, double tol) {
  if (eps <= 0 || tol <= 0) throw std::invalid_argument("eps and tol must be > 0");
  store.zero_grads();
  std::vector<Mat> analytic;
  {
    Tape tape;
    tape.backward(f(tape));
  }
  for (int p = 0; p < store.size(); ++p) analytic.push_back(store.param(p).grad);

  GradCheckReport report;
  for (int p = 0; p < store.size(); ++p) {
    auto& param = store.param(p);
    GradCheckEntry entry;
    entry.name = param.name;
    for (int i = 0; i < param.value.size(); ++i) {
      const double orig = param.value.data()[i];
      param.value.data()[i] = orig + eps;
      double f_plus;
      {
        Tape tape(false);
        f_plus = tape.value(f(tape))(0, 0);
      }
      param.value.data()[i] = orig - eps;
      double f_minus;
      {
        Tape tape(false);
        f_minus = tape.value(f(tape))(0, 0);
      }
      param.value.data()[i] = orig;
      const double numeric = (f_plus - f_minus) / (2.0 * eps);
      const double a = analytic[p].data()[i];
      const double rel =
          std::abs(a - numeric) / std::max(1e-6, std::abs(a) + std::abs(numeric));
      entry.max_rel_error = std::max(entry.max_rel_error, rel);
    }
    report.worst = std::max(report.worst, entry.max_rel_error);
    if (entry.max_rel_error >= tol) report.pass = false;
    report.entries.push_back(std::move(entry));
  }
  return report;
}

// ---------------------------------------------------------------------------
// GRU cell
// ---------------------------------------------------------------------------

GruParamNames gru_init(ParamStore& store, const std::string& prefix, int in_dim,
                       int hidden, Rng& rng) {
  GruParamNames names{prefix + "/wx", prefix + "/wh", prefix + "/b"};
  store.create(names.wx, in_dim, 3 * hidden, Init::FanInUniform, rng);
  store.create(names.wh, hidden, 3 * hidden, Init::Orthogonal, rng);
  store.create(names.b, 1, 3 * hidden, Init::Zeros, rng);
  return names;
}

Var gru_step(Tape& tape, ParamStore& store, const GruParamNames& names, Var x,
             Var h, int hidden) {
  Var gx = tape.add_rowvec(tape.matmul(x, tape.param(store, names.wx)),
                           tape.param(store, names.b));
  Var gh = tape.matmul(h, tape.param(store, names.wh));
  Var r = tape.sigmoid(tape.add(tape.slice_cols(gx, 0, hidden),
                                tape.slice_cols(gh, 0, hidden)));
  Var z = tape.sigmoid(tape.add(tape.slice_cols(gx, hidden, hidden),
                                tape.slice_cols(gh, hidden, hidden)));
  Var n = tape.tanh_(tape.add(tape.slice_cols(gx, 2 * hidden, hidden),
                              tape.mul(r, tape.slice_cols(gh, 2 * hidden, hidden))));
  // h' = (1 - z) * n + z * h
  return tape.add(n, tape.mul(z, tape.sub(h, n)));
}

}  // namespace keygate
