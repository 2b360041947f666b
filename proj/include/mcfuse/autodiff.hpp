#ifndef MCFUSE_AUTODIFF_HPP_
#define MCFUSE_AUTODIFF_HPP_

// A small reverse-mode tape over dense row-major matrices. Every op records
// its output value and a closure that pushes the output gradient back into
// its inputs. Parameters are leaves whose gradients accumulate into the
// owning Parameter on backward().

#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "mcfuse/core.hpp"
#include "mcfuse/masking.hpp"

namespace mcfuse {

template <typename Scalar>
struct Parameter {
  std::string name;
  Matrix<Scalar> value;
  Matrix<Scalar> grad;

  Eigen::Index size() const { return value.size(); }
  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

struct Var {
  int id = -1;
};

template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using Backward = std::function<void(Tape&, const Mat&)>;

  Var constant(Mat value) { return push(std::move(value), false, nullptr, {}); }

  Var leaf(Parameter<Scalar>& parameter) {
    return push(parameter.value, true, &parameter, {});
  }

  Var record(Mat value, std::initializer_list<Var> inputs, Backward backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || requires_grad(v);
    return push(std::move(value), needs, nullptr, needs ? std::move(backward) : Backward{});
  }

  Var record(Mat value, std::span<const Var> inputs, Backward backward) {
    bool needs = false;
    for (Var v : inputs) needs = needs || requires_grad(v);
    return push(std::move(value), needs, nullptr, needs ? std::move(backward) : Backward{});
  }

  const Mat& value(Var v) const { return values_.at(v.id); }
  bool requires_grad(Var v) const { return requires_.at(v.id); }
  std::size_t size() const { return values_.size(); }

  // Zero-initialized on first touch.
  Mat& grad(Var v) {
    Mat& g = grads_[v.id];
    if (g.size() == 0) g.setZero(values_[v.id].rows(), values_[v.id].cols());
    return g;
  }

  // Seeds d(root)/d(root) = seed for a 1x1 root and walks the tape backwards.
  void backward(Var root, Scalar seed = Scalar(1)) {
    if (values_.at(root.id).size() != 1) throw ShapeError("backward() needs a scalar root");
    grad(root)(0, 0) += seed;
    for (int i = root.id; i >= 0; --i) {
      if (grads_[i].size() == 0 || !requires_[i]) continue;
      if (backward_[i]) backward_[i](*this, grads_[i]);
      if (params_[i] != nullptr) {
        Parameter<Scalar>& p = *params_[i];
        if (p.grad.size() == 0) p.zero_grad();
        p.grad += grads_[i];
      }
    }
  }

 private:
  Var push(Mat value, bool needs, Parameter<Scalar>* param, Backward backward) {
    values_.push_back(std::move(value));
    grads_.emplace_back();
    requires_.push_back(needs);
    params_.push_back(param);
    backward_.push_back(std::move(backward));
    return Var{static_cast<int>(values_.size()) - 1};
  }

  std::vector<Mat> values_;
  std::vector<Mat> grads_;
  std::vector<bool> requires_;
  std::vector<Parameter<Scalar>*> params_;
  std::vector<Backward> backward_;
};

namespace ad {

// Logit assigned to masked attention pairs.
inline constexpr double kMaskedLogit = -1e9;

template <typename Scalar>
Var matmul(Tape<Scalar>& t, Var a, Var b) {
  Matrix<Scalar> out = t.value(a) * t.value(b);
  return t.record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (t.requires_grad(a)) t.grad(a).noalias() += g * t.value(b).transpose();
    if (t.requires_grad(b)) t.grad(b).noalias() += t.value(a).transpose() * g;
  });
}

template <typename Scalar>
Var add(Tape<Scalar>& t, Var a, Var b) {
  if (t.value(a).rows() != t.value(b).rows() || t.value(a).cols() != t.value(b).cols()) {
    throw ShapeError("add: shape mismatch");
  }
  Matrix<Scalar> out = t.value(a) + t.value(b);
  return t.record(std::move(out), {a, b}, [a, b](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (t.requires_grad(a)) t.grad(a) += g;
    if (t.requires_grad(b)) t.grad(b) += g;
  });
}

// x + broadcast(row)
template <typename Scalar>
Var add_row(Tape<Scalar>& t, Var x, Var row) {
  if (t.value(row).rows() != 1 || t.value(row).cols() != t.value(x).cols()) {
    throw ShapeError("add_row: bias shape mismatch");
  }
  Matrix<Scalar> out = t.value(x).rowwise() + t.value(row).row(0);
  return t.record(std::move(out), {x, row}, [x, row](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    if (t.requires_grad(x)) t.grad(x) += g;
    if (t.requires_grad(row)) t.grad(row) += g.colwise().sum();
  });
}

template <typename Scalar>
Var linear(Tape<Scalar>& t, Var x, Var weight, Var bias) {
  return add_row(t, matmul(t, x, weight), bias);
}

template <typename Scalar>
Var scale(Tape<Scalar>& t, Var x, Scalar factor) {
  Matrix<Scalar> out = t.value(x) * factor;
  return t.record(std::move(out), {x}, [x, factor](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.grad(x) += g * factor;
  });
}

template <typename Scalar>
Var relu(Tape<Scalar>& t, Var x) {
  Matrix<Scalar> out = t.value(x).cwiseMax(Scalar(0));
  return t.record(std::move(out), {x}, [x](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    t.grad(x).array() += (t.value(x).array() > Scalar(0)).select(g.array(), Scalar(0));
  });
}

template <typename Scalar>
Scalar gelu(Scalar v) {
  using std::erf;
  using std::sqrt;
  return Scalar(0.5) * v * (Scalar(1) + erf(v / sqrt(Scalar(2))));
}

template <typename Scalar>
Scalar gelu_derivative(Scalar v) {
  using std::erf;
  using std::exp;
  using std::sqrt;
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + erf(v / sqrt(Scalar(2))));
  const Scalar pdf = exp(Scalar(-0.5) * v * v) / sqrt(Scalar(2 * M_PI));
  return cdf + v * pdf;
}

// [n x 2h] -> [n x h]: first half * gelu(second half).
template <typename Scalar>
Var geglu(Tape<Scalar>& t, Var u) {
  const Matrix<Scalar>& in = t.value(u);
  if (in.cols() % 2 != 0) throw ShapeError("geglu: odd input width");
  const Eigen::Index h = in.cols() / 2;
  Matrix<Scalar> gate = in.rightCols(h).unaryExpr([](Scalar v) { return gelu(v); });
  Matrix<Scalar> out = in.leftCols(h).cwiseProduct(gate);
  return t.record(std::move(out), {u}, [u, h, gate](Tape<Scalar>& t, const Matrix<Scalar>& g) {
    const Matrix<Scalar>& in = t.value(u);
    Matrix<Scalar>& du = t.grad(u);
    du.leftCols(h) += g.cwiseProduct(gate);
    du.rightCols(h).array() +=
        g.array() * in.leftCols(h).array() *
        in.rightCols(h).unaryExpr([](Scalar v) { return gelu_derivative(v); }).array();
  });
}

// Row-wise layer normalization with learnable gain/shift rows.
template <typename Scalar>
Var layer_norm(Tape<Scalar>& t, Var x, Var gain, Var shift, Scalar eps = Scalar(1e-5)) {
  const Matrix<Scalar>& in = t.value(x);
  const Eigen::Index n = in.cols();
  Matrix<Scalar> normalized(in.rows(), n);
  Vector<Scalar> inv_std(in.rows());
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    const Scalar mean = in.row(r).mean();
    const Scalar var = (in.row(r).array() - mean).square().sum() / Scalar(n);
    inv_std(r) = Scalar(1) / std::sqrt(var + eps);
    normalized.row(r) = (in.row(r).array() - mean) * inv_std(r);
  }
  Matrix<Scalar> out =
      (normalized.array().rowwise() * t.value(gain).row(0).array()).rowwise() +
      t.value(shift).row(0).array();
  return t.record(
      std::move(out), {x, gain, shift},
      [x, gain, shift, normalized, inv_std](Tape<Scalar>& t, const Matrix<Scalar>& g) {
        if (t.requires_grad(gain)) t.grad(gain) += g.cwiseProduct(normalized).colwise().sum();
        if (t.requires_grad(shift)) t.grad(shift) += g.colwise().sum();
        if (!t.requires_grad(x)) return;
        const Eigen::Index n = g.cols();
        Matrix<Scalar> dnorm = g.array().rowwise() * t.value(gain).row(0).array();
        Matrix<Scalar>& dx = t.grad(x);
        for (Eigen::Index r = 0; r < g.rows(); ++r) {
          const Scalar mean_d = dnorm.row(r).sum() / Scalar(n);
          const Scalar mean_dn = dnorm.row(r).dot(normalized.row(r)) / Scalar(n);
          dx.row(r).array() +=
              inv_std(r) * (dnorm.row(r).array() - mean_d - normalized.row(r).array() * mean_dn);
        }
      });
}

// out.row(i) = x.row(index[i]); index -1 yields a zero row.
template <typename Scalar>
Var gather_rows(Tape<Scalar>& t, Var x, std::vector<int> index) {
  const Matrix<Scalar>& in = t.value(x);
  Matrix<Scalar> out = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(index.size()), in.cols());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= in.rows()) throw ShapeError("gather_rows: index out of range");
    if (index[i] >= 0) out.row(static_cast<Eigen::Index>(i)) = in.row(index[i]);
  }
  return t.record(std::move(out), {x},
                  [x, index = std::move(index)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                    Matrix<Scalar>& dx = t.grad(x);
                    for (std::size_t i = 0; i < index.size(); ++i) {
                      if (index[i] >= 0) dx.row(index[i]) += g.row(static_cast<Eigen::Index>(i));
                    }
                  });
}

template <typename Scalar>
Var concat_rows(Tape<Scalar>& t, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = t.value(parts.front()).cols();
  for (Var v : parts) {
    if (t.value(v).cols() != cols) throw ShapeError("concat_rows: column mismatch");
    rows += t.value(v).rows();
  }
  Matrix<Scalar> out(rows, cols);
  Eigen::Index offset = 0;
  for (Var v : parts) {
    out.middleRows(offset, t.value(v).rows()) = t.value(v);
    offset += t.value(v).rows();
  }
  return t.record(std::move(out), std::span<const Var>(parts),
                  [parts](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                    Eigen::Index offset = 0;
                    for (Var v : parts) {
                      const Eigen::Index n = t.value(v).rows();
                      if (t.requires_grad(v)) t.grad(v) += g.middleRows(offset, n);
                      offset += n;
                    }
                  });
}

// Mean of the listed rows per output row; an empty list yields a zero row.
template <typename Scalar>
Var segment_mean(Tape<Scalar>& t, Var x, std::vector<std::vector<int>> segments) {
  const Matrix<Scalar>& in = t.value(x);
  Matrix<Scalar> out = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(segments.size()), in.cols());
  for (std::size_t s = 0; s < segments.size(); ++s) {
    for (int r : segments[s]) out.row(static_cast<Eigen::Index>(s)) += in.row(r);
    if (!segments[s].empty()) out.row(static_cast<Eigen::Index>(s)) /= Scalar(segments[s].size());
  }
  return t.record(std::move(out), {x},
                  [x, segments = std::move(segments)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                    Matrix<Scalar>& dx = t.grad(x);
                    for (std::size_t s = 0; s < segments.size(); ++s) {
                      if (segments[s].empty()) continue;
                      const Scalar w = Scalar(1) / Scalar(segments[s].size());
                      for (int r : segments[s]) dx.row(r) += w * g.row(static_cast<Eigen::Index>(s));
                    }
                  });
}

// Unit-norm rows; zero rows stay zero and pass no gradient.
template <typename Scalar>
Var l2_normalize_rows(Tape<Scalar>& t, Var x) {
  const Matrix<Scalar>& in = t.value(x);
  Vector<Scalar> norms = in.rowwise().norm();
  Matrix<Scalar> out = Matrix<Scalar>::Zero(in.rows(), in.cols());
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    if (norms(r) > Scalar(0)) out.row(r) = in.row(r) / norms(r);
  }
  Matrix<Scalar> unit = out;
  return t.record(std::move(out), {x},
                  [x, norms, unit](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                    Matrix<Scalar>& dx = t.grad(x);
                    for (Eigen::Index r = 0; r < g.rows(); ++r) {
                      if (norms(r) <= Scalar(0)) continue;
                      const Scalar along = unit.row(r).dot(g.row(r));
                      dx.row(r) += (g.row(r) - along * unit.row(r)) / norms(r);
                    }
                  });
}

// Weighted sum of 1x1 values.
template <typename Scalar>
Var weighted_sum(Tape<Scalar>& t, const std::vector<Var>& terms, std::vector<Scalar> weights) {
  if (terms.size() != weights.size()) throw ShapeError("weighted_sum: size mismatch");
  Matrix<Scalar> out = Matrix<Scalar>::Zero(1, 1);
  for (std::size_t i = 0; i < terms.size(); ++i) out(0, 0) += weights[i] * t.value(terms[i])(0, 0);
  return t.record(std::move(out), std::span<const Var>(terms),
                  [terms, weights = std::move(weights)](Tape<Scalar>& t, const Matrix<Scalar>& g) {
                    for (std::size_t i = 0; i < terms.size(); ++i) {
                      if (t.requires_grad(terms[i])) t.grad(terms[i])(0, 0) += weights[i] * g(0, 0);
                    }
                  });
}

// Row-wise softmax of logits with disallowed entries forced to kMaskedLogit.
template <typename Scalar, typename MaskBlock>
Matrix<Scalar> masked_softmax(Matrix<Scalar> logits, const MaskBlock& allowed) {
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    for (Eigen::Index j = 0; j < logits.cols(); ++j) {
      if (!allowed(i, j)) logits(i, j) = Scalar(kMaskedLogit);
    }
  }
  Vector<Scalar> row_max = logits.rowwise().maxCoeff();
  logits = (logits.colwise() - row_max).array().exp();
  Vector<Scalar> row_sum = logits.rowwise().sum();
  logits.array().colwise() /= row_sum.array();
  return logits;
}

// Multi-head masked self-attention over a batch of equal-length sequences
// stacked row-wise: q, k, v are [batch*seq_len x width]; masks[b] is the
// [seq_len x seq_len] mask for sequence b.
template <typename Scalar>
Var self_attention(Tape<Scalar>& t, Var q, Var k, Var v, int seq_len, int heads,
                   std::vector<std::shared_ptr<const AttentionMask>> masks) {
  const Matrix<Scalar>& qv = t.value(q);
  const Matrix<Scalar>& kv = t.value(k);
  const Matrix<Scalar>& vv = t.value(v);
  const Eigen::Index width = qv.cols();
  if (width % heads != 0) throw ShapeError("self_attention: width not divisible by heads");
  const Eigen::Index batch = static_cast<Eigen::Index>(masks.size());
  if (qv.rows() != batch * seq_len) throw ShapeError("self_attention: row count mismatch");
  const Eigen::Index dh = width / heads;
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));

  auto probs = std::make_shared<std::vector<Matrix<Scalar>>>(batch * heads);
  Matrix<Scalar> out(qv.rows(), width);
  for (Eigen::Index b = 0; b < batch; ++b) {
    const AttentionMask& mask = *masks[b];
    if (mask.rows() != seq_len || mask.cols() != seq_len) {
      throw ShapeError("self_attention: mask size mismatch");
    }
    for (int h = 0; h < heads; ++h) {
      auto qb = qv.block(b * seq_len, h * dh, seq_len, dh);
      auto kb = kv.block(b * seq_len, h * dh, seq_len, dh);
      auto vb = vv.block(b * seq_len, h * dh, seq_len, dh);
      Matrix<Scalar> logits = (qb * kb.transpose()) * scale;
      Matrix<Scalar>& p = (*probs)[b * heads + h];
      p = masked_softmax<Scalar>(std::move(logits), mask);
      out.block(b * seq_len, h * dh, seq_len, dh).noalias() = p * vb;
    }
  }
  return t.record(
      std::move(out), {q, k, v},
      [q, k, v, seq_len, heads, batch, dh, scale, probs](Tape<Scalar>& t,
                                                         const Matrix<Scalar>& g) {
        const Matrix<Scalar>& qv = t.value(q);
        const Matrix<Scalar>& kv = t.value(k);
        const Matrix<Scalar>& vv = t.value(v);
        Matrix<Scalar>& dq = t.grad(q);
        Matrix<Scalar>& dk = t.grad(k);
        Matrix<Scalar>& dv = t.grad(v);
        for (Eigen::Index b = 0; b < batch; ++b) {
          for (int h = 0; h < heads; ++h) {
            const Matrix<Scalar>& p = (*probs)[b * heads + h];
            auto go = g.block(b * seq_len, h * dh, seq_len, dh);
            auto qb = qv.block(b * seq_len, h * dh, seq_len, dh);
            auto kb = kv.block(b * seq_len, h * dh, seq_len, dh);
            auto vb = vv.block(b * seq_len, h * dh, seq_len, dh);
            dv.block(b * seq_len, h * dh, seq_len, dh).noalias() += p.transpose() * go;
            Matrix<Scalar> dp = go * vb.transpose();
            Vector<Scalar> row_dot = (dp.cwiseProduct(p)).rowwise().sum();
            Matrix<Scalar> ds = p.cwiseProduct((dp.colwise() - row_dot));
            dq.block(b * seq_len, h * dh, seq_len, dh).noalias() += (ds * kb) * scale;
            dk.block(b * seq_len, h * dh, seq_len, dh).noalias() += (ds.transpose() * qb) * scale;
          }
        }
      });
}

struct PoolGroup {
  int query = 0;          // row of the query table
  std::vector<int> rows;  // attendable token rows; empty -> zero output
};

// Single-head cross-attention pooling without key/value projections: for
// each group, softmax(query . x_j / sqrt(width)) weights the listed rows.
template <typename Scalar>
Var attention_pool(Tape<Scalar>& t, Var queries, Var x, std::vector<PoolGroup> groups) {
  const Matrix<Scalar>& qv = t.value(queries);
  const Matrix<Scalar>& xv = t.value(x);
  if (qv.cols() != xv.cols()) throw ShapeError("attention_pool: width mismatch");
  const Scalar scale = Scalar(1) / std::sqrt(Scalar(xv.cols()));
  auto weights = std::make_shared<std::vector<Vector<Scalar>>>(groups.size());
  Matrix<Scalar> out = Matrix<Scalar>::Zero(static_cast<Eigen::Index>(groups.size()), xv.cols());
  for (std::size_t i = 0; i < groups.size(); ++i) {
    const PoolGroup& group = groups[i];
    if (group.rows.empty()) continue;
    const Eigen::Index n = static_cast<Eigen::Index>(group.rows.size());
    Vector<Scalar> s(n);
    for (Eigen::Index j = 0; j < n; ++j) s(j) = qv.row(group.query).dot(xv.row(group.rows[j])) * scale;
    s = (s.array() - s.maxCoeff()).exp();
    s /= s.sum();
    for (Eigen::Index j = 0; j < n; ++j) out.row(static_cast<Eigen::Index>(i)) += s(j) * xv.row(group.rows[j]);
    (*weights)[i] = std::move(s);
  }
  return t.record(
      std::move(out), {queries, x},
      [queries, x, groups = std::move(groups), weights, scale](Tape<Scalar>& t,
                                                               const Matrix<Scalar>& g) {
        const Matrix<Scalar>& qv = t.value(queries);
        const Matrix<Scalar>& xv = t.value(x);
        const bool need_q = t.requires_grad(queries);
        const bool need_x = t.requires_grad(x);
        for (std::size_t i = 0; i < groups.size(); ++i) {
          const PoolGroup& group = groups[i];
          if (group.rows.empty()) continue;
          const Vector<Scalar>& p = (*weights)[i];
          const Eigen::Index n = p.size();
          auto gi = g.row(static_cast<Eigen::Index>(i));
          Vector<Scalar> dp(n);
          for (Eigen::Index j = 0; j < n; ++j) dp(j) = gi.dot(xv.row(group.rows[j]));
          const Scalar mean = p.dot(dp);
          Vector<Scalar> ds = p.array() * (dp.array() - mean);
          for (Eigen::Index j = 0; j < n; ++j) {
            const int r = group.rows[j];
            if (need_x) t.grad(x).row(r) += p(j) * gi + ds(j) * scale * qv.row(group.query);
            if (need_q) t.grad(queries).row(group.query) += ds(j) * scale * xv.row(r);
          }
        }
      });
}

}  // namespace ad
}  // namespace mcfuse

#endif  // MCFUSE_AUTODIFF_HPP_
