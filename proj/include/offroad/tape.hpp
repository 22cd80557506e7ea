#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "offroad/common.hpp"

namespace offroad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

class Tape;

// Handle to a node recorded on a Tape.
struct Var {
  std::uint32_t id = 0;
  std::uint32_t tape = 0;  // 0 means "not a node"
  bool valid() const { return tape != 0; }
};

// Reverse-mode recording of matrix-valued operations. Nodes are appended in
// topological order; backward() walks them once, newest first.
//
// A tape built with record=false evaluates values only, which is the
// inference path used by the planner.
class Tape {
 public:
  explicit Tape(bool record = true);

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix value);
  // Differentiable input owned by the tape.
  Var input(Matrix value);
  // Differentiable leaf that references external storage; `value` must
  // outlive the tape.
  Var parameter(const Matrix& value);

  const Matrix& value(Var v) const;
  // Gradient of the last backward() target with respect to v. Zero-filled if
  // nothing flowed into v.
  Matrix grad(Var v) const;
  bool requires_grad(Var v) const;

  void backward(Var loss);

  std::size_t size() const { return nodes_.size(); }
  // Number of backward closures run by the last backward().
  std::size_t last_backward_visits() const { return last_visits_; }

  using BackwardFn =
      std::function<void(Tape&, const Matrix& out_value, const Matrix& out_grad)>;

  // Records a derived node. `fn` is stored only if recording and at least one
  // parent requires a gradient.
  Var push(Matrix value, std::initializer_list<Var> parents, BackwardFn fn);
  Var push(Matrix value, std::span<const Var> parents, BackwardFn fn);

  // Used by backward closures.
  void accumulate(Var v, const Matrix& g);
  template <typename Expr>
  void accumulate_block(Var v, Eigen::Index row, Eigen::Index col, const Expr& g) {
    Node& n = node(v);
    if (!n.requires_grad) return;
    ensure_grad(n);
    n.grad.block(row, col, g.rows(), g.cols()) += g;
  }

 private:
  struct Node {
    Matrix value;
    const Matrix* ref = nullptr;
    Matrix grad;
    bool has_grad = false;
    bool requires_grad = false;
    BackwardFn backward;
  };

  Node& node(Var v);
  const Node& node(Var v) const;
  void ensure_grad(Node& n);

  std::vector<Node> nodes_;
  std::uint32_t tag_;
  bool record_;
  std::size_t last_visits_ = 0;
};

namespace ops {

// x * w + b, with b a 1 x out row (pass an invalid Var to omit it).
Var affine(Tape& t, Var x, Var w, Var b);
Var matmul(Tape& t, Var x, Var w);
Var add(Tape& t, Var a, Var b);
Var mul(Tape& t, Var a, Var b);  // elementwise
Var scale(Tape& t, Var a, double s);
Var tanh(Tape& t, Var x);
Var relu(Tape& t, Var x);
Var sigmoid(Tape& t, Var x);
Var softmax_rows(Tape& t, Var x);
Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps = 1e-5);

// Multi-head scaled dot-product attention over consecutive row segments of
// length seg_len; row i of a segment attends to rows 0..i of the same segment.
Var causal_attention(Tape& t, Var q, Var k, Var v, int seg_len, int heads);
// Attention weights for one segment/head, for inspection.
Matrix attention_weights(const Matrix& q, const Matrix& k, int seg, int seg_len,
                         int head, int heads);

// One LSTM step. x_proj already holds x * W + b (n x 4d); gate order i, f, g, o.
// Returns {h, c}.
std::pair<Var, Var> lstm_cell(Tape& t, Var x_proj, Var h_prev, Var c_prev, Var u);

Var slice_cols(Tape& t, Var x, Eigen::Index col, Eigen::Index count);
Var gather_rows(Tape& t, Var x, std::vector<Eigen::Index> rows);
Var concat_rows(Tape& t, std::span<const Var> parts);

// Mean over rows of -log softmax(logits)[label].
Var cross_entropy(Tape& t, Var logits, std::span<const int> labels);
// Mean over rows of the Gaussian NLL with mean column 0 and log-variance
// column 1; variance = var_min + exp(log-variance).
Var gaussian_nll(Tape& t, Var mean_logvar, std::span<const double> targets, double var_min);

// sum(x .* weights); handy for reducing to a scalar in gradient checks.
Var weighted_sum(Tape& t, Var x, const Matrix& weights);

}  // namespace ops
}  // namespace offroad
