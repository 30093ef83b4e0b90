// Minimal tape-based reverse-mode differentiation over dense Eigen matrices.
//
// A Tape records every op of one forward pass in creation order, which is a
// valid topological order, so backward is a single reverse sweep. Parameters
// live in a ParamStore that outlives the tape; leaves bound to parameters
// flush their gradients into the store at the end of backward().

#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace sra {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A trainable matrix plus its gradient slot and Adam moments.
struct Param {
  Matrix value;
  Matrix grad;
  Matrix first_moment;
  Matrix second_moment;
  std::int64_t step = 0;
  bool has_grad = false;
};

class ParamStore {
 public:
  Param& add(const std::string& name, Matrix init);
  Param& at(const std::string& name);
  const Param& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) > 0; }
  void zero_grad();

  std::map<std::string, Param>& items() { return params_; }
  const std::map<std::string, Param>& items() const { return params_; }
  std::size_t size() const { return params_.size(); }

 private:
  std::map<std::string, Param> params_;
};

class Tape;

/// Handle to a node on a tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;
  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const;
  Tape* tape() const { return tape_; }
  int id() const { return id_; }

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  using Backprop = std::function<void(Tape&, const Matrix& upstream)>;

  Var constant(Matrix value);
  Var param(ParamStore& store, const std::string& name);

  /// Records a node. `backprop` receives the node's accumulated gradient.
  Var record(Matrix value, Backprop backprop);

  /// Adds `g` into the gradient slot of `v`.
  void accumulate(Var v, const Matrix& g);

  /// Reverse sweep from a 1x1 root; parameter gradients are added into their
  /// stores (call ParamStore::zero_grad between steps).
  void backward(Var root);

  /// Gradient of any node after backward(); zeros if nothing reached it.
  Matrix grad(Var v) const;

  const Matrix& value(int id) const { return nodes_[id].value; }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix value;
    Matrix grad;
    bool has_grad = false;
    Backprop backprop;
  };
  std::vector<Node> nodes_;
  std::vector<std::pair<int, Param*>> bindings_;
  bool consumed_ = false;
};

// Graph ops. All throw ShapeError on non-conforming inputs.
Var matmul(Var a, Var b);
/// a * b^T
Var matmul_nt(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
/// Elementwise product.
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
/// x + broadcast of a 1 x cols row.
Var add_row(Var x, Var row);
Var affine(Var x, Var weight, Var bias);
Var relu(Var x);
Var tanh(Var x);
Var square(Var x);
Var concat_cols(Var a, Var b);
Var concat_rows(std::span<const Var> parts);
Var slice_rows(Var x, Eigen::Index start, Eigen::Index count);
Var sum(Var x);
Var mean(Var x);
/// Subtracts each column's mean.
Var center_cols(Var x);
/// Scales each row to unit Euclidean norm (rows with norm below eps are
/// divided by eps).
Var normalize_rows(Var x, double eps = 1e-12);
Var softmax(Var logits);
/// Mean over rows of -log softmax(logits)[label].
Var softmax_cross_entropy(Var logits, std::span<const int> labels);
/// Identity forward; backward multiplies the incoming gradient by -lambda.
Var grad_reverse(Var x, double lambda);
/// Copies the value onto the tape as a constant (no gradient flows back).
Var detach(Var x);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

/// Row-wise numerically stable softmax on plain matrices.
Matrix softmax_rows(const Matrix& logits);

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Standard bias-corrected Adam on every parameter holding a gradient.
/// Throws std::logic_error if no parameter has a gradient.
void adam_step(ParamStore& store, const AdamOptions& opts = {});
void sgd_step(ParamStore& store, double lr);

}  // namespace sra
