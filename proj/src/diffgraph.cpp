#include "sra/diffgraph.hpp"

#include <cmath>
#include <sstream>

namespace sra {

namespace {

std::string shape_str(const Matrix& m) {
  std::ostringstream os;
  os << m.rows() << "x" << m.cols();
  return os.str();
}

void require_same_tape(Var a, Var b) {
  if (a.tape() == nullptr || a.tape() != b.tape())
    throw std::logic_error("vars belong to different tapes");
}

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace

// ---------------------------------------------------------------- ParamStore

Param& ParamStore::add(const std::string& name, Matrix init) {
  if (params_.count(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  Param p;
  p.grad = Matrix::Zero(init.rows(), init.cols());
  p.first_moment = Matrix::Zero(init.rows(), init.cols());
  p.second_moment = Matrix::Zero(init.rows(), init.cols());
  p.value = std::move(init);
  return params_.emplace(name, std::move(p)).first->second;
}

Param& ParamStore::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return it->second;
}

void ParamStore::zero_grad() {
  for (auto& [_, p] : params_) {
    p.grad.setZero();
    p.has_grad = false;
  }
}

// ---------------------------------------------------------------------- Tape

const Matrix& Var::value() const { return tape_->value(id_); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.size() != 1) throw ShapeError("scalar(): node is " + shape_str(v));
  return v(0, 0);
}

Var Tape::record(Matrix value, Backprop backprop) {
  if (consumed_) throw std::logic_error("tape already consumed by backward()");
  Node n;
  n.value = std::move(value);
  n.backprop = std::move(backprop);
  nodes_.push_back(std::move(n));
  return Var(this, static_cast<int>(nodes_.size()) - 1);
}

Var Tape::constant(Matrix value) { return record(std::move(value), nullptr); }

Var Tape::param(ParamStore& store, const std::string& name) {
  Param& p = store.at(name);
  Var v = record(p.value, nullptr);
  bindings_.emplace_back(v.id(), &p);
  return v;
}

void Tape::accumulate(Var v, const Matrix& g) {
  Node& n = nodes_[v.id()];
  if (!n.has_grad) {
    n.grad = g;
    n.has_grad = true;
  } else {
    n.grad += g;
  }
}

void Tape::backward(Var root) {
  if (consumed_) throw std::logic_error("backward() called twice on one tape");
  if (root.tape() != this) throw std::logic_error("root belongs to another tape");
  if (nodes_[root.id()].value.size() != 1)
    throw ShapeError("backward(): root must be scalar, got " + shape_str(nodes_[root.id()].value));
  for (auto& n : nodes_) n.has_grad = false;
  accumulate(root, Matrix::Ones(1, 1));
  for (int id = root.id(); id >= 0; --id) {
    Node& n = nodes_[id];
    if (!n.has_grad || !n.backprop) continue;
    // The closure may accumulate into earlier nodes only, so `n.grad` stays put.
    n.backprop(*this, n.grad);
  }
  for (auto& [id, param] : bindings_) {
    const Node& n = nodes_[id];
    if (!n.has_grad) continue;
    param->grad += n.grad;
    param->has_grad = true;
  }
  consumed_ = true;
}

Matrix Tape::grad(Var v) const {
  const Node& n = nodes_[v.id()];
  if (!n.has_grad) return Matrix::Zero(n.value.rows(), n.value.cols());
  return n.grad;
}

// ----------------------------------------------------------------------- ops

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows())
    throw ShapeError("matmul: inner dimensions differ " + shape_str(av) + " * " + shape_str(bv));
  Matrix out = av * bv;
  return a.tape()->record(std::move(out), [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g * b.value().transpose());
    t.accumulate(b, a.value().transpose() * g);
  });
}

Var matmul_nt(Var a, Var b) {
  require_same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.cols())
    throw ShapeError("matmul_nt: inner dimensions differ " + shape_str(av) + " * " + shape_str(bv) + "^T");
  Matrix out = av * bv.transpose();
  return a.tape()->record(std::move(out), [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g * b.value());
    t.accumulate(b, g.transpose() * a.value());
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("add", a.value(), b.value());
  Matrix out = a.value() + b.value();
  return a.tape()->record(std::move(out), [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, g);
  });
}

Var sub(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("sub", a.value(), b.value());
  Matrix out = a.value() - b.value();
  return a.tape()->record(std::move(out), [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g);
    t.accumulate(b, -g);
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("mul", a.value(), b.value());
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape()->record(std::move(out), [a, b](Tape& t, const Matrix& g) {
    t.accumulate(a, g.cwiseProduct(b.value()));
    t.accumulate(b, g.cwiseProduct(a.value()));
  });
}

Var scale(Var a, double s) {
  Matrix out = s * a.value();
  return a.tape()->record(std::move(out), [a, s](Tape& t, const Matrix& g) { t.accumulate(a, s * g); });
}

Var add_scalar(Var a, double s) {
  Matrix out = a.value().array() + s;
  return a.tape()->record(std::move(out), [a](Tape& t, const Matrix& g) { t.accumulate(a, g); });
}

Var add_row(Var x, Var row) {
  require_same_tape(x, row);
  const Matrix& xv = x.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != xv.cols())
    throw ShapeError("add_row: expected 1x" + std::to_string(xv.cols()) + " row, got " + shape_str(rv));
  Matrix out = xv.rowwise() + rv.row(0);
  return x.tape()->record(std::move(out), [x, row](Tape& t, const Matrix& g) {
    t.accumulate(x, g);
    t.accumulate(row, g.colwise().sum());
  });
}

Var affine(Var x, Var weight, Var bias) {
  if (x.cols() != weight.rows())
    throw ShapeError("affine: input " + shape_str(x.value()) + " vs weight " + shape_str(weight.value()));
  return add_row(matmul(x, weight), bias);
}

Var relu(Var x) {
  Matrix out = x.value().cwiseMax(0.0);
  return x.tape()->record(std::move(out), [x](Tape& t, const Matrix& g) {
    t.accumulate(x, (x.value().array() > 0.0).select(g, 0.0));
  });
}

Var tanh(Var x) {
  Matrix out = x.value().array().tanh().matrix();
  const int self = static_cast<int>(x.tape()->size());
  return x.tape()->record(std::move(out), [x, self](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    t.accumulate(x, g.array() * (1.0 - y.array().square()));
  });
}

Var square(Var x) {
  Matrix out = x.value().array().square().matrix();
  return x.tape()->record(std::move(out), [x](Tape& t, const Matrix& g) {
    t.accumulate(x, 2.0 * g.cwiseProduct(x.value()));
  });
}

Var concat_cols(Var a, Var b) {
  require_same_tape(a, b);
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.rows() != bv.rows())
    throw ShapeError("concat_cols: row counts differ " + shape_str(av) + " | " + shape_str(bv));
  Matrix out(av.rows(), av.cols() + bv.cols());
  out << av, bv;
  const Eigen::Index ca = av.cols();
  const Eigen::Index cb = bv.cols();
  return a.tape()->record(std::move(out), [a, b, ca, cb](Tape& t, const Matrix& g) {
    t.accumulate(a, g.leftCols(ca));
    t.accumulate(b, g.rightCols(cb));
  });
}

Var concat_rows(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  Eigen::Index rows = 0;
  const Eigen::Index cols = parts[0].cols();
  for (const Var& p : parts) {
    require_same_tape(parts[0], p);
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  Matrix out(rows, cols);
  std::vector<Var> inputs(parts.begin(), parts.end());
  Eigen::Index r = 0;
  for (const Var& p : inputs) {
    out.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return parts[0].tape()->record(std::move(out), [inputs](Tape& t, const Matrix& g) {
    Eigen::Index r = 0;
    for (const Var& p : inputs) {
      t.accumulate(p, g.middleRows(r, p.rows()));
      r += p.rows();
    }
  });
}

Var slice_rows(Var x, Eigen::Index start, Eigen::Index count) {
  const Matrix& xv = x.value();
  if (start < 0 || count < 0 || start + count > xv.rows())
    throw ShapeError("slice_rows: range [" + std::to_string(start) + ", " + std::to_string(start + count) +
                     ") outside " + shape_str(xv));
  Matrix out = xv.middleRows(start, count);
  const Eigen::Index r = xv.rows(), c = xv.cols();
  return x.tape()->record(std::move(out), [x, start, count, r, c](Tape& t, const Matrix& g) {
    Matrix gx = Matrix::Zero(r, c);
    gx.middleRows(start, count) = g;
    t.accumulate(x, gx);
  });
}

Var sum(Var x) {
  Matrix out(1, 1);
  out(0, 0) = x.value().sum();
  const Eigen::Index r = x.rows(), c = x.cols();
  return x.tape()->record(std::move(out), [x, r, c](Tape& t, const Matrix& g) {
    t.accumulate(x, Matrix::Constant(r, c, g(0, 0)));
  });
}

Var mean(Var x) {
  const double n = static_cast<double>(x.value().size());
  if (n == 0) throw ShapeError("mean of empty matrix");
  return scale(sum(x), 1.0 / n);
}

Var center_cols(Var x) {
  const Matrix& xv = x.value();
  if (xv.rows() == 0) throw ShapeError("center_cols of empty matrix");
  Matrix out = xv.rowwise() - xv.colwise().mean();
  return x.tape()->record(std::move(out), [x](Tape& t, const Matrix& g) {
    Matrix gx = g.rowwise() - g.colwise().mean();
    t.accumulate(x, gx);
  });
}

Var normalize_rows(Var x, double eps) {
  const Matrix& xv = x.value();
  Vector norms = xv.rowwise().norm().cwiseMax(eps);
  Matrix out = norms.cwiseInverse().asDiagonal() * xv;
  const int self = static_cast<int>(x.tape()->size());
  return x.tape()->record(std::move(out), [x, norms, self, eps](Tape& t, const Matrix& g) {
    const Matrix& y = t.value(self);
    Matrix gx(g.rows(), g.cols());
    for (Eigen::Index i = 0; i < g.rows(); ++i) {
      if (x.value().row(i).norm() < eps) {
        gx.row(i) = g.row(i) / eps;
      } else {
        const double proj = g.row(i).dot(y.row(i));
        gx.row(i) = (g.row(i) - proj * y.row(i)) / norms(i);
      }
    }
    t.accumulate(x, gx);
  });
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix shifted = logits.colwise() - logits.rowwise().maxCoeff();
  Matrix e = shifted.array().exp().matrix();
  Vector s = e.rowwise().sum();
  return s.cwiseInverse().asDiagonal() * e;
}

Var softmax(Var logits) {
  Matrix out = softmax_rows(logits.value());
  const int self = static_cast<int>(logits.tape()->size());
  return logits.tape()->record(std::move(out), [logits, self](Tape& t, const Matrix& g) {
    const Matrix& p = t.value(self);
    Vector inner = g.cwiseProduct(p).rowwise().sum();
    Matrix gx = p.cwiseProduct(g.colwise() - inner);
    t.accumulate(logits, gx);
  });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Matrix& lv = logits.value();
  const Eigen::Index b = lv.rows(), c = lv.cols();
  if (static_cast<Eigen::Index>(labels.size()) != b)
    throw ShapeError("softmax_cross_entropy: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(b) + " rows");
  if (b == 0) throw ShapeError("softmax_cross_entropy: empty batch");
  for (int y : labels)
    if (y < 0 || y >= c) throw std::out_of_range("label " + std::to_string(y) + " outside [0, " + std::to_string(c) + ")");

  Vector row_max = lv.rowwise().maxCoeff();
  Matrix shifted = lv.colwise() - row_max;
  Vector lse = shifted.array().exp().rowwise().sum().log().matrix();
  double total = 0.0;
  for (Eigen::Index i = 0; i < b; ++i) total += lse(i) - shifted(i, labels[i]);
  Matrix out(1, 1);
  out(0, 0) = total / static_cast<double>(b);

  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape()->record(std::move(out), [logits, ys = std::move(ys)](Tape& t, const Matrix& g) {
    Matrix p = softmax_rows(logits.value());
    for (std::size_t i = 0; i < ys.size(); ++i) p(static_cast<Eigen::Index>(i), ys[i]) -= 1.0;
    t.accumulate(logits, p * (g(0, 0) / static_cast<double>(ys.size())));
  });
}

Var grad_reverse(Var x, double lambda) {
  if (lambda < 0) throw std::invalid_argument("grad_reverse: lambda must be >= 0");
  Matrix out = x.value();
  return x.tape()->record(std::move(out), [x, lambda](Tape& t, const Matrix& g) {
    t.accumulate(x, -lambda * g);
  });
}

Var detach(Var x) { return x.tape()->constant(x.value()); }

// ---------------------------------------------------------------- optimizers

void adam_step(ParamStore& store, const AdamOptions& opts) {
  bool any = false;
  for (auto& [_, p] : store.items()) {
    if (!p.has_grad) continue;
    any = true;
    ++p.step;
    p.first_moment = opts.beta1 * p.first_moment + (1.0 - opts.beta1) * p.grad;
    p.second_moment = opts.beta2 * p.second_moment + (1.0 - opts.beta2) * p.grad.cwiseAbs2();
    const double c1 = 1.0 - std::pow(opts.beta1, static_cast<double>(p.step));
    const double c2 = 1.0 - std::pow(opts.beta2, static_cast<double>(p.step));
    p.value.array() -= opts.lr * (p.first_moment.array() / c1) /
                       ((p.second_moment.array() / c2).sqrt() + opts.eps);
  }
  if (!any) throw std::logic_error("adam_step: no parameter has a gradient");
}

void sgd_step(ParamStore& store, double lr) {
  bool any = false;
  for (auto& [_, p] : store.items()) {
    if (!p.has_grad) continue;
    any = true;
    ++p.step;
    p.value -= lr * p.grad;
  }
  if (!any) throw std::logic_error("sgd_step: no parameter has a gradient");
}

}  // namespace sra
