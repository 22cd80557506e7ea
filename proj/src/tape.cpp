#include "offroad/tape.hpp"

#include <atomic>
#include <cmath>

namespace offroad {

namespace {
std::atomic<std::uint32_t> g_next_tag{1};
}

Tape::Tape(bool record) : tag_(g_next_tag.fetch_add(1)), record_(record) {
  if (tag_ == 0) tag_ = g_next_tag.fetch_add(1);
}

Tape::Node& Tape::node(Var v) {
  if (v.tape != tag_ || v.id >= nodes_.size()) throw GraphError("variable does not belong to this tape");
  return nodes_[v.id];
}

const Tape::Node& Tape::node(Var v) const {
  if (v.tape != tag_ || v.id >= nodes_.size()) throw GraphError("variable does not belong to this tape");
  return nodes_[v.id];
}

void Tape::ensure_grad(Node& n) {
  if (!n.has_grad) {
    const Matrix& val = n.ref ? *n.ref : n.value;
    n.grad = Matrix::Zero(val.rows(), val.cols());
    n.has_grad = true;
  }
}

Var Tape::constant(Matrix value) {
  Node n;
  n.value = std::move(value);
  nodes_.push_back(std::move(n));
  return {static_cast<std::uint32_t>(nodes_.size() - 1), tag_};
}

Var Tape::input(Matrix value) {
  Node n;
  n.value = std::move(value);
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return {static_cast<std::uint32_t>(nodes_.size() - 1), tag_};
}

Var Tape::parameter(const Matrix& value) {
  Node n;
  n.ref = &value;
  n.requires_grad = record_;
  nodes_.push_back(std::move(n));
  return {static_cast<std::uint32_t>(nodes_.size() - 1), tag_};
}

const Matrix& Tape::value(Var v) const {
  const Node& n = node(v);
  return n.ref ? *n.ref : n.value;
}

Matrix Tape::grad(Var v) const {
  const Node& n = node(v);
  if (n.has_grad) return n.grad;
  const Matrix& val = n.ref ? *n.ref : n.value;
  return Matrix::Zero(val.rows(), val.cols());
}

bool Tape::requires_grad(Var v) const { return node(v).requires_grad; }

Var Tape::push(Matrix value, std::initializer_list<Var> parents, BackwardFn fn) {
  return push(std::move(value), std::span<const Var>(parents.begin(), parents.size()), std::move(fn));
}

Var Tape::push(Matrix value, std::span<const Var> parents, BackwardFn fn) {
  bool needs = false;
  for (Var p : parents) {
    if (p.valid() && node(p).requires_grad) needs = true;
  }
  Node n;
  n.value = std::move(value);
  if (record_ && needs) {
    n.requires_grad = true;
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return {static_cast<std::uint32_t>(nodes_.size() - 1), tag_};
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = node(v);
  if (!n.requires_grad) return;
  ensure_grad(n);
  n.grad += g;
}

void Tape::backward(Var loss) {
  if (!record_) throw GraphError("backward on a tape that does not record");
  Node& root = node(loss);
  const Matrix& lv = root.ref ? *root.ref : root.value;
  if (lv.rows() != 1 || lv.cols() != 1) throw GraphError("backward target must be a scalar");
  if (!root.requires_grad) throw GraphError("backward target is detached from every differentiable input");
  for (Node& n : nodes_) {
    n.has_grad = false;
    n.grad.resize(0, 0);
  }
  root.grad = Matrix::Ones(1, 1);
  root.has_grad = true;
  last_visits_ = 0;
  for (std::size_t i = loss.id + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (!n.has_grad || !n.backward) continue;
    const Matrix& val = n.ref ? *n.ref : n.value;
    // Copy: the closure may grow other nodes' grads but never this one's.
    n.backward(*this, val, n.grad);
    ++last_visits_;
  }
}

namespace ops {

Var matmul(Tape& t, Var x, Var w) {
  if (t.value(x).cols() != t.value(w).rows()) throw GraphError("matmul: shape mismatch");
  Matrix out = t.value(x) * t.value(w);
  return t.push(std::move(out), {x, w}, [x, w](Tape& tp, const Matrix&, const Matrix& g) {
    if (tp.requires_grad(x)) tp.accumulate(x, g * tp.value(w).transpose());
    if (tp.requires_grad(w)) tp.accumulate(w, tp.value(x).transpose() * g);
  });
}

Var affine(Tape& t, Var x, Var w, Var b) {
  const Matrix& xv = t.value(x);
  const Matrix& wv = t.value(w);
  if (xv.cols() != wv.rows()) throw GraphError("affine: shape mismatch");
  Matrix out = xv * wv;
  if (b.valid()) {
    const Matrix& bv = t.value(b);
    if (bv.rows() != 1 || bv.cols() != out.cols()) throw GraphError("affine: bias shape mismatch");
    out.rowwise() += bv.row(0);
  }
  return t.push(std::move(out), {x, w, b}, [x, w, b](Tape& tp, const Matrix&, const Matrix& g) {
    if (tp.requires_grad(x)) tp.accumulate(x, g * tp.value(w).transpose());
    if (tp.requires_grad(w)) tp.accumulate(w, tp.value(x).transpose() * g);
    if (b.valid() && tp.requires_grad(b)) tp.accumulate(b, g.colwise().sum());
  });
}

Var add(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) throw GraphError("add: shape mismatch");
  return t.push(av + bv, {a, b}, [a, b](Tape& tp, const Matrix&, const Matrix& g) {
    tp.accumulate(a, g);
    tp.accumulate(b, g);
  });
}

Var mul(Tape& t, Var a, Var b) {
  const Matrix& av = t.value(a);
  const Matrix& bv = t.value(b);
  if (av.rows() != bv.rows() || av.cols() != bv.cols()) throw GraphError("mul: shape mismatch");
  return t.push(av.cwiseProduct(bv), {a, b}, [a, b](Tape& tp, const Matrix&, const Matrix& g) {
    if (tp.requires_grad(a)) tp.accumulate(a, g.cwiseProduct(tp.value(b)));
    if (tp.requires_grad(b)) tp.accumulate(b, g.cwiseProduct(tp.value(a)));
  });
}

Var scale(Tape& t, Var a, double s) {
  return t.push(t.value(a) * s, {a}, [a, s](Tape& tp, const Matrix&, const Matrix& g) {
    tp.accumulate(a, g * s);
  });
}

Var tanh(Tape& t, Var x) {
  Matrix out = t.value(x).array().tanh().matrix();
  return t.push(std::move(out), {x}, [x](Tape& tp, const Matrix& y, const Matrix& g) {
    tp.accumulate(x, (g.array() * (1.0 - y.array().square())).matrix());
  });
}

Var relu(Tape& t, Var x) {
  Matrix out = t.value(x).cwiseMax(0.0);
  return t.push(std::move(out), {x}, [x](Tape& tp, const Matrix&, const Matrix& g) {
    tp.accumulate(x, (tp.value(x).array() > 0.0).select(g, 0.0).matrix());
  });
}

Var sigmoid(Tape& t, Var x) {
  Matrix out = (1.0 / (1.0 + (-t.value(x).array()).exp())).matrix();
  return t.push(std::move(out), {x}, [x](Tape& tp, const Matrix& y, const Matrix& g) {
    tp.accumulate(x, (g.array() * y.array() * (1.0 - y.array())).matrix());
  });
}

namespace {
void softmax_inplace(Eigen::Ref<RowVector> row) {
  const double m = row.maxCoeff();
  row = (row.array() - m).exp().matrix();
  row /= row.sum();
}
}  // namespace

Var softmax_rows(Tape& t, Var x) {
  Matrix out = t.value(x);
  for (Eigen::Index r = 0; r < out.rows(); ++r) softmax_inplace(out.row(r));
  return t.push(std::move(out), {x}, [x](Tape& tp, const Matrix& y, const Matrix& g) {
    Matrix dx(y.rows(), y.cols());
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double dot = g.row(r).dot(y.row(r));
      dx.row(r) = (y.row(r).array() * (g.row(r).array() - dot)).matrix();
    }
    tp.accumulate(x, dx);
  });
}

Var layer_norm(Tape& t, Var x, Var gamma, Var beta, double eps) {
  const Matrix& xv = t.value(x);
  const Matrix& gv = t.value(gamma);
  const Matrix& bv = t.value(beta);
  const Eigen::Index n = xv.cols();
  Matrix xhat(xv.rows(), n);
  Eigen::VectorXd inv(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mu = xv.row(r).mean();
    const double var = (xv.row(r).array() - mu).square().mean();
    inv(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (xv.row(r).array() - mu) * inv(r);
  }
  Matrix out = xhat.array().rowwise() * gv.row(0).array();
  out.rowwise() += bv.row(0);
  return t.push(std::move(out), {x, gamma, beta},
                [x, gamma, beta, xhat = std::move(xhat), inv = std::move(inv), n](
                    Tape& tp, const Matrix&, const Matrix& g) {
                  if (tp.requires_grad(gamma)) {
                    tp.accumulate(gamma, g.cwiseProduct(xhat).colwise().sum());
                  }
                  if (tp.requires_grad(beta)) tp.accumulate(beta, g.colwise().sum());
                  if (!tp.requires_grad(x)) return;
                  const Matrix& gv2 = tp.value(gamma);
                  Matrix dx(g.rows(), n);
                  for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    RowVector dxhat = g.row(r).cwiseProduct(gv2.row(0));
                    const double s1 = dxhat.sum();
                    const double s2 = dxhat.dot(xhat.row(r));
                    dx.row(r) = (inv(r) / static_cast<double>(n)) *
                                (static_cast<double>(n) * dxhat.array() - s1 -
                                 xhat.row(r).array() * s2)
                                    .matrix();
                  }
                  tp.accumulate(x, dx);
                });
}

Matrix attention_weights(const Matrix& q, const Matrix& k, int seg, int seg_len, int head,
                         int heads) {
  const Eigen::Index dh = q.cols() / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  const Eigen::Index base = static_cast<Eigen::Index>(seg) * seg_len;
  const Eigen::Index c0 = static_cast<Eigen::Index>(head) * dh;
  Matrix a = Matrix::Zero(seg_len, seg_len);
  for (Eigen::Index i = 0; i < seg_len; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j <= i; ++j) {
      a(i, j) = sc * q.row(base + i).segment(c0, dh).dot(k.row(base + j).segment(c0, dh));
      m = std::max(m, a(i, j));
    }
    double s = 0.0;
    for (Eigen::Index j = 0; j <= i; ++j) {
      a(i, j) = std::exp(a(i, j) - m);
      s += a(i, j);
    }
    for (Eigen::Index j = 0; j <= i; ++j) a(i, j) /= s;
  }
  return a;
}

Var causal_attention(Tape& t, Var q, Var k, Var v, int seg_len, int heads) {
  const Matrix& qv = t.value(q);
  const Matrix& kv = t.value(k);
  const Matrix& vv = t.value(v);
  if (seg_len <= 0 || heads <= 0 || qv.rows() % seg_len != 0 || qv.cols() % heads != 0 ||
      kv.rows() != qv.rows() || vv.rows() != qv.rows() || kv.cols() != qv.cols() ||
      vv.cols() != qv.cols()) {
    throw GraphError("causal_attention: shape mismatch");
  }
  const int segs = static_cast<int>(qv.rows() / seg_len);
  const Eigen::Index dh = qv.cols() / heads;
  std::vector<Matrix> weights;
  weights.reserve(static_cast<std::size_t>(segs * heads));
  Matrix out = Matrix::Zero(qv.rows(), qv.cols());
  for (int s = 0; s < segs; ++s) {
    const Eigen::Index base = static_cast<Eigen::Index>(s) * seg_len;
    for (int h = 0; h < heads; ++h) {
      Matrix a = attention_weights(qv, kv, s, seg_len, h, heads);
      const Eigen::Index c0 = h * dh;
      for (Eigen::Index i = 0; i < seg_len; ++i) {
        auto orow = out.row(base + i).segment(c0, dh);
        for (Eigen::Index j = 0; j <= i; ++j) orow += a(i, j) * vv.row(base + j).segment(c0, dh);
      }
      weights.push_back(std::move(a));
    }
  }
  if (!t.recording()) weights.clear();
  return t.push(
      std::move(out), {q, k, v},
      [q, k, v, seg_len, heads, segs, dh, weights = std::move(weights)](
          Tape& tp, const Matrix&, const Matrix& g) {
        const Matrix& qv2 = tp.value(q);
        const Matrix& kv2 = tp.value(k);
        const Matrix& vv2 = tp.value(v);
        const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
        Matrix dq = Matrix::Zero(qv2.rows(), qv2.cols());
        Matrix dk = Matrix::Zero(qv2.rows(), qv2.cols());
        Matrix dv = Matrix::Zero(qv2.rows(), qv2.cols());
        for (int s = 0; s < segs; ++s) {
          const Eigen::Index base = static_cast<Eigen::Index>(s) * seg_len;
          for (int h = 0; h < heads; ++h) {
            const Matrix& a = weights[static_cast<std::size_t>(s * heads + h)];
            const Eigen::Index c0 = h * dh;
            for (Eigen::Index i = 0; i < seg_len; ++i) {
              const auto gi = g.row(base + i).segment(c0, dh);
              RowVector da(i + 1);
              for (Eigen::Index j = 0; j <= i; ++j) {
                da(j) = gi.dot(vv2.row(base + j).segment(c0, dh));
                dv.row(base + j).segment(c0, dh) += a(i, j) * gi;
              }
              double dot = 0.0;
              for (Eigen::Index j = 0; j <= i; ++j) dot += a(i, j) * da(j);
              for (Eigen::Index j = 0; j <= i; ++j) {
                const double ds = a(i, j) * (da(j) - dot) * sc;
                dq.row(base + i).segment(c0, dh) += ds * kv2.row(base + j).segment(c0, dh);
                dk.row(base + j).segment(c0, dh) += ds * qv2.row(base + i).segment(c0, dh);
              }
            }
          }
        }
        tp.accumulate(q, dq);
        tp.accumulate(k, dk);
        tp.accumulate(v, dv);
      });
}

Var slice_cols(Tape& t, Var x, Eigen::Index col, Eigen::Index count) {
  const Matrix& xv = t.value(x);
  if (col < 0 || count < 0 || col + count > xv.cols()) throw GraphError("slice_cols: out of range");
  Matrix out = xv.middleCols(col, count);
  return t.push(std::move(out), {x}, [x, col](Tape& tp, const Matrix&, const Matrix& g) {
    tp.accumulate_block(x, 0, col, g);
  });
}

Var gather_rows(Tape& t, Var x, std::vector<Eigen::Index> rows) {
  const Matrix& xv = t.value(x);
  Matrix out(static_cast<Eigen::Index>(rows.size()), xv.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= xv.rows()) throw GraphError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(r)) = xv.row(rows[r]);
  }
  return t.push(std::move(out), {x}, [x, rows = std::move(rows)](Tape& tp, const Matrix&, const Matrix& g) {
    for (std::size_t r = 0; r < rows.size(); ++r) {
      tp.accumulate_block(x, rows[r], 0, g.row(static_cast<Eigen::Index>(r)));
    }
  });
}

Var concat_rows(Tape& t, std::span<const Var> parts) {
  if (parts.empty()) throw GraphError("concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = t.value(parts[0]).cols();
  for (Var p : parts) {
    if (t.value(p).cols() != cols) throw GraphError("concat_rows: column mismatch");
    rows += t.value(p).rows();
  }
  Matrix out(rows, cols);
  Eigen::Index r = 0;
  for (Var p : parts) {
    const Matrix& pv = t.value(p);
    out.middleRows(r, pv.rows()) = pv;
    r += pv.rows();
  }
  std::vector<Var> ps(parts.begin(), parts.end());
  return t.push(std::move(out), parts, [ps](Tape& tp, const Matrix&, const Matrix& g) {
    Eigen::Index r2 = 0;
    for (Var p : ps) {
      const Eigen::Index n = tp.value(p).rows();
      if (tp.requires_grad(p)) tp.accumulate(p, g.middleRows(r2, n));
      r2 += n;
    }
  });
}

std::pair<Var, Var> lstm_cell(Tape& t, Var x_proj, Var h_prev, Var c_prev, Var u) {
  const Eigen::Index d = t.value(h_prev).cols();
  Var z = add(t, x_proj, matmul(t, h_prev, u));
  Var i = sigmoid(t, slice_cols(t, z, 0, d));
  Var f = sigmoid(t, slice_cols(t, z, d, d));
  Var g = tanh(t, slice_cols(t, z, 2 * d, d));
  Var o = sigmoid(t, slice_cols(t, z, 3 * d, d));
  Var c = add(t, mul(t, f, c_prev), mul(t, i, g));
  Var h = mul(t, o, tanh(t, c));
  return {h, c};
}

Var cross_entropy(Tape& t, Var logits, std::span<const int> labels) {
  const Matrix& lv = t.value(logits);
  if (static_cast<std::size_t>(lv.rows()) != labels.size() || labels.empty()) {
    throw GraphError("cross_entropy: label count mismatch");
  }
  Matrix probs = lv;
  double total = 0.0;
  for (Eigen::Index r = 0; r < lv.rows(); ++r) {
    const int y = labels[static_cast<std::size_t>(r)];
    if (y < 0 || y >= lv.cols()) throw GraphError("cross_entropy: label out of range");
    const double m = lv.row(r).maxCoeff();
    const double lse = m + std::log((lv.row(r).array() - m).exp().sum());
    total += lse - lv(r, y);
    softmax_inplace(probs.row(r));
  }
  const double n = static_cast<double>(lv.rows());
  Matrix out(1, 1);
  out(0, 0) = total / n;
  std::vector<int> ys(labels.begin(), labels.end());
  return t.push(std::move(out), {logits},
                [logits, probs = std::move(probs), ys = std::move(ys), n](
                    Tape& tp, const Matrix&, const Matrix& g) {
                  Matrix d = probs;
                  for (Eigen::Index r = 0; r < d.rows(); ++r) d(r, ys[static_cast<std::size_t>(r)]) -= 1.0;
                  tp.accumulate(logits, d * (g(0, 0) / n));
                });
}

Var gaussian_nll(Tape& t, Var mean_logvar, std::span<const double> targets, double var_min) {
  const Matrix& pv = t.value(mean_logvar);
  if (pv.cols() != 2 || static_cast<std::size_t>(pv.rows()) != targets.size() || targets.empty()) {
    throw GraphError("gaussian_nll: shape mismatch");
  }
  const double half_log_2pi = 0.5 * std::log(2.0 * kPi);
  double total = 0.0;
  Matrix d(pv.rows(), 2);
  for (Eigen::Index r = 0; r < pv.rows(); ++r) {
    const double mu = pv(r, 0);
    const double e = std::exp(pv(r, 1));
    const double var = var_min + e;
    const double diff = targets[static_cast<std::size_t>(r)] - mu;
    total += half_log_2pi + 0.5 * std::log(var) + diff * diff / (2.0 * var);
    d(r, 0) = -diff / var;
    d(r, 1) = (0.5 / var - diff * diff / (2.0 * var * var)) * e;
  }
  const double n = static_cast<double>(pv.rows());
  Matrix out(1, 1);
  out(0, 0) = total / n;
  return t.push(std::move(out), {mean_logvar},
                [mean_logvar, d = std::move(d), n](Tape& tp, const Matrix&, const Matrix& g) {
                  tp.accumulate(mean_logvar, d * (g(0, 0) / n));
                });
}

Var weighted_sum(Tape& t, Var x, const Matrix& weights) {
  const Matrix& xv = t.value(x);
  if (xv.rows() != weights.rows() || xv.cols() != weights.cols()) {
    throw GraphError("weighted_sum: shape mismatch");
  }
  Matrix out(1, 1);
  out(0, 0) = xv.cwiseProduct(weights).sum();
  return t.push(std::move(out), {x}, [x, weights](Tape& tp, const Matrix&, const Matrix& g) {
    tp.accumulate(x, weights * g(0, 0));
  });
}

}  // namespace ops
}  // namespace offroad
