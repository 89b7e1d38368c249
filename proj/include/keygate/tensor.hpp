#pragma once

#include <Eigen/Dense>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "keygate/rng.hpp"

namespace keygate {

using Mat = Eigen::MatrixXd;

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

enum class Init { Zeros, FanInUniform, Orthogonal };

class ParamStore {
 public:
  struct Param {
    std::string name;
    Mat value;
    Mat grad;
    Mat m, v;  // Adam moments
  };

  // Creates (or returns) a named parameter. Shapes of existing parameters
  // must match.
  Mat& create(const std::string& name, int rows, int cols, Init init, Rng& rng);
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  int index_of(const std::string& name) const;
  Param& param(int index) { return params_[index]; }
  const Param& param(int index) const { return params_[index]; }
  int size() const { return int(params_.size()); }
  std::int64_t step_count() const { return step_; }

  void zero_grads();

  // Standard Adam with bias correction. Throws on NaN/Inf gradients (the
  // step is aborted, parameters untouched) and on frozen stores.
  void adam_step(double lr, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8);

  // Frozen stores reject adam_step and gradient accumulation.
  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  // Versioned binary checkpoint: values, moments, step counter, free-form tag.
  void save(const std::string& path, const std::string& tag = "") const;
  static ParamStore load(const std::string& path, std::string* tag = nullptr);
  static std::string peek_tag(const std::string& path);

  // FNV-1a over raw parameter bytes; used by the frozen-LL contract checks.
  std::uint64_t checksum() const;

  std::int64_t num_scalars() const;

 private:
  std::deque<Param> params_;  // deque: create() never invalidates references
  std::map<std::string, int> index_;
  std::int64_t step_ = 0;
  bool frozen_ = false;
};

// ---------------------------------------------------------------------------
// Reverse-mode tape
// ---------------------------------------------------------------------------

struct Var {
  int id = -1;
};

// A Tape owns one forward computation and its backward sweep. Values are
// rank-<=2 double tensors (scalars are 1x1). Construct with recording off for
// gradient-free rollouts.
class Tape {
 public:
  explicit Tape(bool recording = true) : recording_(recording) {}

  const Mat& value(Var v) const { return nodes_[v.id].value; }
  const Mat& grad(Var v) const { return nodes_[v.id].grad; }

  // Leaves.
  Var constant(Mat value);
  Var param(ParamStore& store, const std::string& name);

  // Forward ops.
  Var matmul(Var a, Var b);
  Var add(Var a, Var b);                 // same shape
  Var add_rowvec(Var a, Var bias);       // bias is 1xN, broadcast over rows
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);                 // elementwise
  Var scale(Var a, double s);
  Var relu(Var a);
  Var tanh_(Var a);
  Var sigmoid(Var a);
  Var square(Var a);
  Var concat_cols(Var a, Var b);
  Var slice_cols(Var a, int start, int n);
  Var sum(Var a);                        // 1x1
  Var mean(Var a);                       // 1x1

  // Embedding lookups. `table` is VxE. Duplicate indices accumulate
  // additively in the backward pass.
  Var embed_rows(Var table, const std::vector<int>& ids);  // NxE
  // Mean of the embeddings of each row's valid ids: ids is B rows of L ids,
  // valid[b*L+i] selects which contribute. BxE.
  Var embed_mean(Var table, const std::vector<int>& ids,
                 const std::vector<std::uint8_t>& valid, int batch, int len);

  // -log softmax(logits)[target] summed over rows with weight per row. 1x1.
  Var softmax_cross_entropy(Var logits, const std::vector<int>& targets,
                            const std::vector<double>& row_weights = {});
  // log softmax(logits)[target] per row. Bx1.
  Var gather_logprob(Var logits, const std::vector<int>& targets);
  // Entropy of softmax(logits) per row. Bx1.
  Var entropy(Var logits);

  // Gradient-free snapshot of a value (used for recurrent-state carry and
  // V-trace targets).
  Mat detach(Var v) const { return nodes_[v.id].value; }

  // Backward from a scalar; accumulates parameter gradients into the bound
  // stores. Throws on non-scalar loss or a second call.
  void backward(Var loss);

  bool recording() const { return recording_; }
  int num_nodes() const { return int(nodes_.size()); }

 private:
  struct Node {
    Mat value;
    Mat grad;
    std::function<void()> backward;  // empty for constants
  };

  Var push(Mat value, std::function<void()> backward_fn);
  void check_same_shape(const char* op, Var a, Var b) const;

  std::vector<Node> nodes_;
  bool recording_;
  bool backward_done_ = false;
};

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckEntry {
  std::string name;
  double max_rel_error = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  bool pass = true;
  double worst = 0.0;
};

// f builds the scalar loss from `store` on a fresh tape. Central finite
// differences with step eps against one analytic backward sweep.
GradCheckReport grad_check(const std::function<Var(Tape&)>& f, ParamStore& store,
                           double eps = 1e-5, double tol = 1e-4);

// ---------------------------------------------------------------------------
// Recurrent cell: update/reset-gated (GRU)
// ---------------------------------------------------------------------------

struct GruParamNames {
  std::string wx, wh, b;  // in x 3H, H x 3H, 1 x 3H; gate order r, z, n
};

// Registers (or reuses) the cell parameters in `store`.
GruParamNames gru_init(ParamStore& store, const std::string& prefix, int in_dim,
                       int hidden, Rng& rng);

// One step: x is BxIn, h is BxH; returns the next BxH state.
Var gru_step(Tape& tape, ParamStore& store, const GruParamNames& names, Var x,
             Var h, int hidden);

}  // namespace keygate
