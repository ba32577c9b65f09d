#include "sklp/autodiff.hpp"

#include "sklp/errors.hpp"

#include <cmath>
#include <limits>
#include <memory>

namespace sklp::ad {

Var Graph::constant(Matrix value, std::string label) {
  Node n;
  n.owned = std::move(value);
  n.label = std::move(label);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Graph::leaf(const Matrix* storage, std::string label, bool track) {
  Node n;
  n.external = storage;
  n.requires_grad = track;
  n.label = std::move(label);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

Var Graph::emit(Matrix value, std::initializer_list<Var> inputs, Backward backward, const char* op) {
  return emit(std::move(value), std::vector<Var>(inputs), std::move(backward), op);
}

Var Graph::emit(Matrix value, const std::vector<Var>& inputs, Backward backward, const char* op) {
  Node n;
  n.owned = std::move(value);
  n.label = op;
  for (Var in : inputs) n.requires_grad = n.requires_grad || nodes_[in.id].requires_grad;
  if (n.requires_grad) n.backward = std::move(backward);
  nodes_.push_back(std::move(n));
  return Var{static_cast<std::int32_t>(nodes_.size() - 1)};
}

const Matrix& Graph::value(Var v) const {
  const Node& n = nodes_[v.id];
  return n.external ? *n.external : n.owned;
}

double Graph::scalar(Var v) const {
  const Matrix& m = value(v);
  if (m.size() != 1) {
    throw ShapeError("expected a scalar node, got " + std::to_string(m.rows()) + "x" +
                     std::to_string(m.cols()));
  }
  return m(0, 0);
}

Matrix& Graph::grad(Var v) {
  Node& n = nodes_[v.id];
  if (!n.has_grad) {
    const Matrix& val = n.external ? *n.external : n.owned;
    n.grad = Matrix::Zero(val.rows(), val.cols());
    n.has_grad = true;
  }
  return n.grad;
}

Matrix Graph::grad_or_zero(Var v) const {
  const Node& n = nodes_[v.id];
  if (n.has_grad) return n.grad;
  const Matrix& val = value(v);
  return Matrix::Zero(val.rows(), val.cols());
}

void Graph::backward(Var scalar) {
  if (value(scalar).size() != 1) throw ShapeError("backward requires a scalar root");
  if (auto bad = first_non_finite()) {
    throw NumericError("non-finite value produced by '" + *bad + "'");
  }
  grad(scalar)(0, 0) += 1.0;
  for (std::int32_t i = scalar.id; i >= 0; --i) {
    Node& n = nodes_[i];
    if (n.requires_grad && n.has_grad && n.backward) n.backward(*this, Var{i});
  }
}

std::optional<std::string> Graph::first_non_finite() const {
  for (const Node& n : nodes_) {
    const Matrix& m = n.external ? *n.external : n.owned;
    if (!m.allFinite()) return n.label;
  }
  return std::nullopt;
}

namespace {

void check_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

}  // namespace

Var matmul(Graph& g, Var a, Var b) {
  const Matrix& av = g.value(a);
  const Matrix& bv = g.value(b);
  if (av.cols() != bv.rows()) {
    throw ShapeError("matmul: inner dimensions " + std::to_string(av.cols()) + " vs " +
                     std::to_string(bv.rows()));
  }
  Matrix out = av * bv;
  return g.emit(std::move(out), {a, b}, [a, b](Graph& g, Var self) {
    const Matrix go = g.grad(self);
    if (g.requires_grad(a)) g.grad(a).noalias() += go * g.value(b).transpose();
    if (g.requires_grad(b)) g.grad(b).noalias() += g.value(a).transpose() * go;
  }, "matmul");
}

Var matmul_nt(Graph& g, Var a, Var b) {
  const Matrix& av = g.value(a);
  const Matrix& bv = g.value(b);
  if (av.cols() != bv.cols()) {
    throw ShapeError("matmul_nt: column counts " + std::to_string(av.cols()) + " vs " +
                     std::to_string(bv.cols()));
  }
  Matrix out = av * bv.transpose();
  return g.emit(std::move(out), {a, b}, [a, b](Graph& g, Var self) {
    const Matrix go = g.grad(self);
    if (g.requires_grad(a)) g.grad(a).noalias() += go * g.value(b);
    if (g.requires_grad(b)) g.grad(b).noalias() += go.transpose() * g.value(a);
  }, "matmul_nt");
}

Var add(Graph& g, Var a, Var b) {
  check_same_shape(g.value(a), g.value(b), "add");
  Matrix out = g.value(a) + g.value(b);
  return g.emit(std::move(out), {a, b}, [a, b](Graph& g, Var self) {
    const Matrix go = g.grad(self);
    if (g.requires_grad(a)) g.grad(a) += go;
    if (g.requires_grad(b)) g.grad(b) += go;
  }, "add");
}

Var add_row(Graph& g, Var a, Var row) {
  const Matrix& av = g.value(a);
  const Matrix& rv = g.value(row);
  if (rv.rows() != 1 || rv.cols() != av.cols()) throw ShapeError("add_row: row shape mismatch");
  Matrix out = av.rowwise() + rv.row(0);
  return g.emit(std::move(out), {a, row}, [a, row](Graph& g, Var self) {
    const Matrix go = g.grad(self);
    if (g.requires_grad(a)) g.grad(a) += go;
    if (g.requires_grad(row)) g.grad(row) += go.colwise().sum();
  }, "add_row");
}

Var scale(Graph& g, Var a, double s) {
  Matrix out = g.value(a) * s;
  return g.emit(std::move(out), {a}, [a, s](Graph& g, Var self) {
    const Matrix go = g.grad(self);
    g.grad(a) += go * s;
  }, "scale");
}

Var gelu(Graph& g, Var a) {
  constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
  constexpr double c = 0.044715;
  const Matrix& x = g.value(a);
  Matrix out(x.rows(), x.cols());
  for (Eigen::Index i = 0; i < x.size(); ++i) {
    const double v = x.data()[i];
    out.data()[i] = 0.5 * v * (1.0 + std::tanh(k * (v + c * v * v * v)));
  }
  return g.emit(std::move(out), {a}, [a](Graph& g, Var self) {
    const Matrix go = g.grad(self);
    const Matrix& x = g.value(a);
    Matrix& ga = g.grad(a);
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double v = x.data()[i];
      const double t = std::tanh(k * (v + c * v * v * v));
      const double d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * k * (1.0 + 3.0 * c * v * v);
      ga.data()[i] += go.data()[i] * d;
    }
  }, "gelu");
}

Var layer_norm(Graph& g, Var x, Var gain, Var bias, double eps) {
  const Matrix& xv = g.value(x);
  const Matrix& gv = g.value(gain);
  const Matrix& bv = g.value(bias);
  const Eigen::Index n = xv.cols();
  if (gv.rows() != 1 || gv.cols() != n || bv.rows() != 1 || bv.cols() != n) {
    throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(n));
  }
  auto normed = std::make_shared<Matrix>(xv.rows(), n);
  auto inv_std = std::make_shared<Vector>(xv.rows());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    const double mean = xv.row(r).mean();
    const double var = (xv.row(r).array() - mean).square().mean();
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)(r) = is;
    normed->row(r) = (xv.row(r).array() - mean) * is;
  }
  Matrix out = (normed->array().rowwise() * gv.row(0).array()).matrix();
  out.rowwise() += bv.row(0);
  return g.emit(std::move(out), {x, gain, bias}, [x, gain, bias, normed, inv_std](Graph& g, Var self) {
    const Matrix go = g.grad(self);
    const Matrix& xh = *normed;
    if (g.requires_grad(gain)) g.grad(gain) += (go.array() * xh.array()).colwise().sum().matrix();
    if (g.requires_grad(bias)) g.grad(bias) += go.colwise().sum();
    if (g.requires_grad(x)) {
      const Matrix dxh = (go.array().rowwise() * g.value(gain).row(0).array()).matrix();
      Matrix& gx = g.grad(x);
      const double n = static_cast<double>(xh.cols());
      for (Eigen::Index r = 0; r < xh.rows(); ++r) {
        const double m1 = dxh.row(r).sum() / n;
        const double m2 = dxh.row(r).dot(xh.row(r)) / n;
        gx.row(r).array() +=
            (*inv_std)(r) * (dxh.row(r).array() - m1 - xh.row(r).array() * m2);
      }
    }
  }, "layer_norm");
}

Var softmax_rows(Graph& g, Var x, std::span<const char> key_valid) {
  const Matrix& xv = g.value(x);
  if (!key_valid.empty() && static_cast<Eigen::Index>(key_valid.size()) != xv.cols()) {
    throw ShapeError("softmax_rows: key mask length mismatch");
  }
  Matrix p(xv.rows(), xv.cols());
  for (Eigen::Index r = 0; r < xv.rows(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index c = 0; c < xv.cols(); ++c) {
      if (key_valid.empty() || key_valid[c]) mx = std::max(mx, xv(r, c));
    }
    double sum = 0.0;
    for (Eigen::Index c = 0; c < xv.cols(); ++c) {
      const double e = (key_valid.empty() || key_valid[c]) ? std::exp(xv(r, c) - mx) : 0.0;
      p(r, c) = e;
      sum += e;
    }
    p.row(r) /= sum;
  }
  return g.emit(std::move(p), {x}, [x](Graph& g, Var self) {
    const Matrix go = g.grad(self);
    const Matrix& pv = g.value(self);
    const Vector dots = (go.array() * pv.array()).rowwise().sum();
    g.grad(x).array() += pv.array() * (go.array().colwise() - dots.array());
  }, "softmax_rows");
}

Var slice_cols(Graph& g, Var a, Eigen::Index begin, Eigen::Index count) {
  const Matrix& av = g.value(a);
  if (begin < 0 || count < 0 || begin + count > av.cols()) throw ShapeError("slice_cols out of range");
  Matrix out = av.middleCols(begin, count);
  return g.emit(std::move(out), {a}, [a, begin, count](Graph& g, Var self) {
    const Matrix go = g.grad(self);
    g.grad(a).middleCols(begin, count) += go;
  }, "slice_cols");
}

Var concat_cols(Graph& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const Eigen::Index rows = g.value(parts[0]).rows();
  Eigen::Index cols = 0;
  for (Var p : parts) {
    if (g.value(p).rows() != rows) throw ShapeError("concat_cols: row count mismatch");
    cols += g.value(p).cols();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleCols(at, g.value(p).cols()) = g.value(p);
    at += g.value(p).cols();
  }
  return g.emit(std::move(out), parts, [parts](Graph& g, Var self) {
    const Matrix go = g.grad(self);
    Eigen::Index at = 0;
    for (Var p : parts) {
      const Eigen::Index c = g.value(p).cols();
      if (g.requires_grad(p)) g.grad(p) += go.middleCols(at, c);
      at += c;
    }
  }, "concat_cols");
}

Var slice_rows(Graph& g, Var a, Eigen::Index begin, Eigen::Index count) {
  const Matrix& av = g.value(a);
  if (begin < 0 || count < 0 || begin + count > av.rows()) throw ShapeError("slice_rows out of range");
  Matrix out = av.middleRows(begin, count);
  return g.emit(std::move(out), {a}, [a, begin, count](Graph& g, Var self) {
    const Matrix go = g.grad(self);
    g.grad(a).middleRows(begin, count) += go;
  }, "slice_rows");
}

Var concat_rows(Graph& g, const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows of nothing");
  const Eigen::Index cols = g.value(parts[0]).cols();
  Eigen::Index rows = 0;
  for (Var p : parts) {
    if (g.value(p).cols() != cols) throw ShapeError("concat_rows: column count mismatch");
    rows += g.value(p).rows();
  }
  Matrix out(rows, cols);
  Eigen::Index at = 0;
  for (Var p : parts) {
    out.middleRows(at, g.value(p).rows()) = g.value(p);
    at += g.value(p).rows();
  }
  return g.emit(std::move(out), parts, [parts](Graph& g, Var self) {
    const Matrix go = g.grad(self);
    Eigen::Index at = 0;
    for (Var p : parts) {
      const Eigen::Index r = g.value(p).rows();
      if (g.requires_grad(p)) g.grad(p) += go.middleRows(at, r);
      at += r;
    }
  }, "concat_rows");
}

Var gather_rows(Graph& g, Var table, std::span<const int> rows) {
  const Matrix& tv = g.value(table);
  Matrix out(static_cast<Eigen::Index>(rows.size()), tv.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= tv.rows()) throw ShapeError("gather_rows: index out of range");
    out.row(static_cast<Eigen::Index>(i)) = tv.row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return g.emit(std::move(out), {table}, [table, idx = std::move(idx)](Graph& g, Var self) {
    const Matrix go = g.grad(self);
    Matrix& gt = g.grad(table);
    for (std::size_t i = 0; i < idx.size(); ++i) gt.row(idx[i]) += go.row(static_cast<Eigen::Index>(i));
  }, "gather_rows");
}

Var mean_rows(Graph& g, Var a) {
  const Matrix& av = g.value(a);
  if (av.rows() == 0) throw ShapeError("mean_rows of an empty matrix");
  Matrix out = av.colwise().mean();
  return g.emit(std::move(out), {a}, [a](Graph& g, Var self) {
    const Matrix go = g.grad(self);
    Matrix& ga = g.grad(a);
    ga.rowwise() += go.row(0) / static_cast<double>(ga.rows());
  }, "mean_rows");
}

Var l2_normalize_rows(Graph& g, Var a) {
  const Matrix& av = g.value(a);
  auto norms = std::make_shared<Vector>(av.rowwise().norm());
  Matrix out = av;
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) /= (*norms)(r);
  return g.emit(std::move(out), {a}, [a, norms](Graph& g, Var self) {
    const Matrix go = g.grad(self);
    const Matrix& y = g.value(self);
    Matrix& ga = g.grad(a);
    for (Eigen::Index r = 0; r < y.rows(); ++r) {
      const double d = y.row(r).dot(go.row(r));
      ga.row(r) += (go.row(r) - d * y.row(r)) / (*norms)(r);
    }
  }, "l2_normalize");
}

Var cross_entropy_rows(Graph& g, Var logits, std::span<const int> targets) {
  const Matrix& z = g.value(logits);
  if (static_cast<Eigen::Index>(targets.size()) != z.rows() || z.rows() == 0) {
    throw ShapeError("cross_entropy_rows: one target per row required");
  }
  auto probs = std::make_shared<Matrix>(z.rows(), z.cols());
  double total = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const int t = targets[static_cast<std::size_t>(r)];
    if (t < 0 || t >= z.cols()) throw ShapeError("cross_entropy_rows: target out of range");
    const double mx = z.row(r).maxCoeff();
    const double lse = mx + std::log((z.row(r).array() - mx).exp().sum());
    probs->row(r) = (z.row(r).array() - lse).exp().matrix();
    total += lse - z(r, t);
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(z.rows());
  std::vector<int> tg(targets.begin(), targets.end());
  return g.emit(std::move(out), {logits}, [logits, probs, tg = std::move(tg)](Graph& g, Var self) {
    const double go = g.grad(self)(0, 0) / static_cast<double>(tg.size());
    Matrix& gz = g.grad(logits);
    gz += *probs * go;
    for (std::size_t r = 0; r < tg.size(); ++r) gz(static_cast<Eigen::Index>(r), tg[r]) -= go;
  }, "cross_entropy");
}

Var bce_with_logits(Graph& g, Var logits, std::span<const double> labels) {
  const Matrix& z = g.value(logits);
  if (z.cols() != 1 || static_cast<std::size_t>(z.rows()) != labels.size() || labels.empty()) {
    throw ShapeError("bce_with_logits: expected an n x 1 logit column with n labels");
  }
  double total = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    const double v = z(r, 0);
    const double y = labels[static_cast<std::size_t>(r)];
    total += std::max(v, 0.0) - y * v + std::log1p(std::exp(-std::abs(v)));
  }
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(z.rows());
  std::vector<double> ys(labels.begin(), labels.end());
  return g.emit(std::move(out), {logits}, [logits, ys = std::move(ys)](Graph& g, Var self) {
    const double go = g.grad(self)(0, 0) / static_cast<double>(ys.size());
    const Matrix& z = g.value(logits);
    Matrix& gz = g.grad(logits);
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      const double s = 1.0 / (1.0 + std::exp(-z(r, 0)));
      gz(r, 0) += go * (s - ys[static_cast<std::size_t>(r)]);
    }
  }, "bce_with_logits");
}

Var weighted_sum(Graph& g, const std::vector<Var>& scalars, const std::vector<double>& weights) {
  if (scalars.size() != weights.size() || scalars.empty()) throw ShapeError("weighted_sum arity");
  Matrix out(1, 1);
  out(0, 0) = 0.0;
  for (std::size_t k = 0; k < scalars.size(); ++k) out(0, 0) += weights[k] * g.scalar(scalars[k]);
  return g.emit(std::move(out), scalars, [scalars, weights](Graph& g, Var self) {
    const double go = g.grad(self)(0, 0);
    for (std::size_t k = 0; k < scalars.size(); ++k) {
      if (g.requires_grad(scalars[k])) g.grad(scalars[k])(0, 0) += go * weights[k];
    }
  }, "weighted_sum");
}

Var half_squared_norm(Graph& g, Var a) {
  Matrix out(1, 1);
  out(0, 0) = 0.5 * g.value(a).squaredNorm();
  return g.emit(std::move(out), {a}, [a](Graph& g, Var self) {
    const double go = g.grad(self)(0, 0);
    g.grad(a) += g.value(a) * go;
  }, "half_squared_norm");
}

}  // namespace sklp::ad
