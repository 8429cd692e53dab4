#include "flg/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

namespace flg {

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (auto e : shape) n *= e;
  return n;
}

namespace {

std::pair<Index, Index> storage_dims(const Shape& shape) {
  switch (shape.size()) {
    case 0: return {1, 1};
    case 1: return {shape[0], 1};
    case 2: return {shape[0], shape[1]};
    default: throw DimensionError("tensor rank > 2 is not supported: " + to_string(shape));
  }
}

Shape vec_shape(Index n) { return {n}; }
Shape mat_shape(Index r, Index c) { return {r, c}; }

bool is_vector(const Var& v) { return v.shape().size() == 1; }
bool is_matrix(const Var& v) { return v.shape().size() == 2; }

[[noreturn]] void shape_error(const char* op, const Var& a, const Var& b) {
  throw DimensionError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                       to_string(b.shape()));
}

bool any_grad(std::initializer_list<Var> vars) {
  return std::any_of(vars.begin(), vars.end(), [](const Var& v) { return v.requires_grad(); });
}

// Rows view: a rank-1 value is treated as a single row.
Eigen::Map<const Matrix> as_rows(const Matrix& m, const Shape& shape) {
  if (shape.size() == 1) return {m.data(), 1, m.size()};
  return {m.data(), m.rows(), m.cols()};
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor(Shape shape, bool requires_grad) : shape_(std::move(shape)) {
  auto [r, c] = storage_dims(shape_);
  value_ = Matrix::Zero(r, c);
  set_requires_grad(requires_grad);
}

Tensor::Tensor(Shape shape, Matrix value, bool requires_grad)
    : shape_(std::move(shape)), value_(std::move(value)) {
  auto [r, c] = storage_dims(shape_);
  if (value_.rows() != r || value_.cols() != c) {
    throw DimensionError("tensor value does not match shape " + to_string(shape_));
  }
  set_requires_grad(requires_grad);
}

Tensor Tensor::vector(const Vector& v, bool requires_grad) {
  return Tensor({v.size()}, Matrix(v), requires_grad);
}

Tensor Tensor::matrix(const Matrix& m, bool requires_grad) {
  return Tensor({m.rows(), m.cols()}, m, requires_grad);
}

void Tensor::set_requires_grad(bool on) {
  requires_grad_ = on;
  if (on) {
    grad_ = Matrix::Zero(value_.rows(), value_.cols());
  } else {
    grad_.resize(0, 0);
  }
}

const Matrix& Tensor::grad() const {
  if (!requires_grad_) throw StateError("tensor does not require grad");
  return grad_;
}

void Tensor::accumulate_grad(const Matrix& g) {
  if (!requires_grad_) return;
  grad_ += g;
}

void Tensor::zero_grad() {
  if (requires_grad_) grad_.setZero();
}

// ---------------------------------------------------------------------------
// Var / Tape

const Matrix& Var::value() const { return tape->value(id); }
const Shape& Var::shape() const { return tape->shape(id); }
bool Var::requires_grad() const { return tape->requires_grad(id); }
double Var::item() const {
  if (value().size() != 1) throw InvalidInputError("item() on non-scalar " + to_string(shape()));
  return value()(0, 0);
}
Eigen::Map<const Vector> Var::vec() const {
  const Matrix& m = value();
  return {m.data(), m.size()};
}

Var Tape::constant(Matrix value, Shape shape) {
  auto [r, c] = storage_dims(shape);
  if (value.rows() != r || value.cols() != c) {
    throw DimensionError("constant value does not match shape " + to_string(shape));
  }
  return record("constant", std::move(value), std::move(shape), false, nullptr);
}

Var Tape::constant(const Vector& v) { return constant(Matrix(v), vec_shape(v.size())); }

Var Tape::leaf(Tensor& t) {
  Var v = record("leaf", Matrix(), t.shape(), t.requires_grad(), nullptr);
  records_.back().external = &t.value();
  records_.back().bound = t.requires_grad() ? &t : nullptr;
  return v;
}

Var Tape::leaf(const Tensor& t) {
  if (t.requires_grad()) throw StateError("leaf: a tensor that requires grad must be bound mutably");
  Var v = record("leaf", Matrix(), t.shape(), false, nullptr);
  records_.back().external = &t.value();
  return v;
}

Var Tape::record(const char* op, Matrix value, Shape shape, bool requires_grad, Pullback pullback) {
  Record rec;
  rec.op = op;
  rec.value = std::move(value);
  rec.shape = std::move(shape);
  rec.requires_grad = requires_grad;
  if (requires_grad) rec.pullback = std::move(pullback);
  records_.push_back(std::move(rec));
  return Var{this, static_cast<int>(records_.size() - 1)};
}

Matrix& Tape::grad(int id) {
  Record& rec = records_[static_cast<std::size_t>(id)];
  const Matrix& v = rec.external ? *rec.external : rec.value;
  if (rec.grad.size() != v.size()) rec.grad = Matrix::Zero(v.rows(), v.cols());
  return rec.grad;
}

void Tape::backward(Var loss) {
  if (loss.tape != this) throw InvalidInputError("backward: loss belongs to a different tape");
  if (loss.value().size() != 1) {
    throw InvalidInputError("backward: loss must be scalar, got " + to_string(loss.shape()));
  }
  backward_order_.clear();
  if (!requires_grad(loss.id)) return;
  grad(loss.id)(0, 0) += 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Record& rec = records_[static_cast<std::size_t>(i)];
    if (!rec.requires_grad || rec.grad.size() == 0) continue;
    backward_order_.push_back(i);
    if (rec.bound) rec.bound->accumulate_grad(rec.grad);
    if (rec.pullback) rec.pullback(*this, i);
  }
}

void Tape::reset() {
  records_.clear();
  backward_order_.clear();
}

// ---------------------------------------------------------------------------
// Primitives

Var affine(Var weight, Var bias, Var x) {
  if (!is_matrix(weight)) throw DimensionError("affine: weight must be a matrix, got " + to_string(weight.shape()));
  if (!is_vector(x) || x.shape()[0] != weight.shape()[1]) shape_error("affine", weight, x);
  if (!is_vector(bias) || bias.shape()[0] != weight.shape()[0]) shape_error("affine", weight, bias);
  Matrix out = weight.value() * x.value() + bias.value();
  return x.tape->record("affine", std::move(out), vec_shape(weight.shape()[0]), any_grad({weight, bias, x}),
                        [weight, bias, x](Tape& t, int self) {
                          const Matrix& g = t.grad(self);
                          t.accumulate(weight.id, g * x.value().transpose());
                          t.accumulate(bias.id, g);
                          t.accumulate(x.id, weight.value().transpose() * g);
                        });
}

Var linear_rows(Var x, Var weight, Var bias) {
  if (!is_matrix(weight)) throw DimensionError("linear: weight must be a matrix, got " + to_string(weight.shape()));
  if (!is_matrix(x) || x.shape()[1] != weight.shape()[1]) shape_error("linear", x, weight);
  if (!is_vector(bias) || bias.shape()[0] != weight.shape()[0]) shape_error("linear", weight, bias);
  Matrix out = x.value() * weight.value().transpose();
  out.rowwise() += bias.value().col(0).transpose();
  const Index rows = x.shape()[0];
  return x.tape->record("linear", std::move(out), mat_shape(rows, weight.shape()[0]), any_grad({x, weight, bias}),
                        [x, weight, bias](Tape& t, int self) {
                          const Matrix& g = t.grad(self);
                          t.accumulate(x.id, g * weight.value());
                          t.accumulate(weight.id, g.transpose() * x.value());
                          t.accumulate(bias.id, g.colwise().sum().transpose());
                        });
}

Var matmul(Var a, Var b) {
  if (!is_matrix(a) || a.shape()[1] != b.shape()[0]) shape_error("matmul", a, b);
  Matrix out = a.value() * b.value();
  Shape shape = is_vector(b) ? vec_shape(a.shape()[0]) : mat_shape(a.shape()[0], b.shape()[1]);
  return a.tape->record("matmul", std::move(out), std::move(shape), any_grad({a, b}), [a, b](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.accumulate(a.id, g * b.value().transpose());
    t.accumulate(b.id, a.value().transpose() * g);
  });
}

Var add(Var a, Var b) {
  if (a.shape() != b.shape()) shape_error("add", a, b);
  Matrix out = a.value() + b.value();
  return a.tape->record("add", std::move(out), a.shape(), any_grad({a, b}), [a, b](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.accumulate(a.id, g);
    t.accumulate(b.id, g);
  });
}

Var scale(Var a, double factor) {
  Matrix out = a.value() * factor;
  return a.tape->record("scale", std::move(out), a.shape(), a.requires_grad(), [a, factor](Tape& t, int self) {
    t.accumulate(a.id, t.grad(self) * factor);
  });
}

Var mul(Var a, Var b) {
  if (a.shape() != b.shape()) shape_error("mul", a, b);
  Matrix out = a.value().cwiseProduct(b.value());
  return a.tape->record("mul", std::move(out), a.shape(), any_grad({a, b}), [a, b](Tape& t, int self) {
    const Matrix& g = t.grad(self);
    t.accumulate(a.id, g.cwiseProduct(b.value()));
    t.accumulate(b.id, g.cwiseProduct(a.value()));
  });
}

Var sum(Var a) {
  Matrix out(1, 1);
  out(0, 0) = a.value().sum();
  return a.tape->record("sum", std::move(out), Shape{}, a.requires_grad(), [a](Tape& t, int self) {
    const double g = t.grad(self)(0, 0);
    t.accumulate(a.id, Matrix::Constant(a.value().rows(), a.value().cols(), g));
  });
}

Var mean(std::span<const Var> items) {
  if (items.empty()) throw InvalidInputError("mean: empty list");
  Matrix out = items[0].value();
  bool rg = items[0].requires_grad();
  for (std::size_t i = 1; i < items.size(); ++i) {
    if (items[i].shape() != items[0].shape()) shape_error("mean", items[0], items[i]);
    out += items[i].value();
    rg = rg || items[i].requires_grad();
  }
  const double inv = 1.0 / static_cast<double>(items.size());
  out *= inv;
  std::vector<Var> inputs(items.begin(), items.end());
  return items[0].tape->record("mean", std::move(out), items[0].shape(), rg,
                               [inputs = std::move(inputs), inv](Tape& t, int self) {
                                 const Matrix g = t.grad(self) * inv;
                                 for (const Var& v : inputs) t.accumulate(v.id, g);
                               });
}

Var gelu(Var x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  Matrix out = x.value().unaryExpr([](double v) { return 0.5 * v * (1.0 + std::erf(v * kInvSqrt2)); });
  return x.tape->record("gelu", std::move(out), x.shape(), x.requires_grad(), [x](Tape& t, int self) {
    constexpr double kInvSqrt2Pi = 0.39894228040143267794;
    Matrix d = x.value().unaryExpr([](double v) {
      return 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
    });
    t.accumulate(x.id, t.grad(self).cwiseProduct(d));
  });
}

Var l2_normalize(Var x, double eps) {
  if (!is_vector(x)) throw DimensionError("l2_normalize: expected vector, got " + to_string(x.shape()));
  const double norm = x.value().norm();
  if (!(norm > eps)) throw InvalidInputError("l2_normalize: degenerate input (norm below epsilon)");
  Matrix out = x.value() / norm;
  return x.tape->record("l2_normalize", out, x.shape(), x.requires_grad(), [x, norm](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    const double proj = y.cwiseProduct(g).sum();
    t.accumulate(x.id, (g - y * proj) / norm);
  });
}

Var softmax(Var x) {
  if (!is_vector(x)) throw DimensionError("softmax: expected vector, got " + to_string(x.shape()));
  if (!x.value().allFinite()) throw NumericError("softmax: non-finite input");
  Matrix out = (x.value().array() - x.value().maxCoeff()).exp().matrix();
  out /= out.sum();
  return x.tape->record("softmax", std::move(out), x.shape(), x.requires_grad(), [x](Tape& t, int self) {
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    const double dot = y.cwiseProduct(g).sum();
    t.accumulate(x.id, y.cwiseProduct((g.array() - dot).matrix()));
  });
}

Var layer_norm(Var x, Var scale_v, Var shift, double eps) {
  const Index width = is_vector(x) ? x.shape()[0] : x.shape()[1];
  if (!is_vector(scale_v) || scale_v.shape()[0] != width) shape_error("layer_norm", x, scale_v);
  if (!is_vector(shift) || shift.shape()[0] != width) shape_error("layer_norm", x, shift);
  const auto rows = as_rows(x.value(), x.shape());
  const auto gamma = scale_v.value().col(0).transpose();
  const auto beta = shift.value().col(0).transpose();
  Matrix xhat(rows.rows(), width);
  Vector inv_std(rows.rows());
  for (Index r = 0; r < rows.rows(); ++r) {
    const double mu = rows.row(r).mean();
    const double var = (rows.row(r).array() - mu).square().mean();
    inv_std(r) = 1.0 / std::sqrt(var + eps);
    xhat.row(r) = (rows.row(r).array() - mu) * inv_std(r);
  }
  Matrix y = xhat.array().rowwise() * gamma.array();
  y.rowwise() += beta;
  if (is_vector(x)) y.resize(width, 1);
  return x.tape->record(
      "layer_norm", std::move(y), x.shape(), any_grad({x, scale_v, shift}),
      [x, scale_v, shift, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape& t, int self) {
        const auto g = as_rows(t.grad(self), x.shape());
        const Index n = xhat.cols();
        t.accumulate(scale_v.id, g.cwiseProduct(xhat).colwise().sum().transpose());
        t.accumulate(shift.id, g.colwise().sum().transpose());
        if (!x.requires_grad()) return;
        Matrix dxhat = g.array().rowwise() * scale_v.value().col(0).transpose().array();
        Matrix dx(xhat.rows(), n);
        for (Index r = 0; r < xhat.rows(); ++r) {
          const double m1 = dxhat.row(r).mean();
          const double m2 = dxhat.row(r).cwiseProduct(xhat.row(r)).mean();
          dx.row(r) = inv_std(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
        }
        if (x.shape().size() == 1) dx.resize(n, 1);
        t.accumulate(x.id, dx);
      });
}

Var cross_entropy(Var probs, int target) {
  if (!is_vector(probs)) throw DimensionError("cross_entropy: expected vector, got " + to_string(probs.shape()));
  if (target < 0 || target >= probs.shape()[0]) {
    throw IndexError("cross_entropy: class index " + std::to_string(target) + " out of range " +
                     to_string(probs.shape()));
  }
  const double p = probs.value()(target, 0);
  Matrix out(1, 1);
  out(0, 0) = -std::log(p);
  return probs.tape->record("cross_entropy", std::move(out), Shape{}, probs.requires_grad(),
                            [probs, target, p](Tape& t, int self) {
                              Matrix d = Matrix::Zero(probs.value().rows(), 1);
                              d(target, 0) = -t.grad(self)(0, 0) / p;
                              t.accumulate(probs.id, d);
                            });
}

Var softmax_cross_entropy(Var logits, int target) {
  if (!is_vector(logits)) {
    throw DimensionError("softmax_cross_entropy: expected vector, got " + to_string(logits.shape()));
  }
  if (target < 0 || target >= logits.shape()[0]) {
    throw IndexError("softmax_cross_entropy: class index " + std::to_string(target) + " out of range " +
                     to_string(logits.shape()));
  }
  if (!logits.value().allFinite()) throw NumericError("softmax_cross_entropy: non-finite logits");
  const auto& z = logits.value();
  const double m = z.maxCoeff();
  const double lse = m + std::log((z.array() - m).exp().sum());
  Matrix out(1, 1);
  out(0, 0) = lse - z(target, 0);
  return logits.tape->record("softmax_cross_entropy", std::move(out), Shape{}, logits.requires_grad(),
                             [logits, target, lse](Tape& t, int self) {
                               Matrix d = (logits.value().array() - lse).exp().matrix();
                               d(target, 0) -= 1.0;
                               t.accumulate(logits.id, d * t.grad(self)(0, 0));
                             });
}

Var sequence_cross_entropy(Var logits, std::span<const int> targets) {
  if (!is_matrix(logits) || logits.shape()[0] != static_cast<Index>(targets.size())) {
    throw DimensionError("sequence_cross_entropy: logits " + to_string(logits.shape()) + " vs " +
                         std::to_string(targets.size()) + " targets");
  }
  const Matrix& z = logits.value();
  if (!z.allFinite()) throw NumericError("sequence_cross_entropy: non-finite logits");
  const Index vocab = z.cols();
  Matrix probs(z.rows(), vocab);
  double total = 0.0;
  int counted = 0;
  for (Index r = 0; r < z.rows(); ++r) {
    const int tgt = targets[static_cast<std::size_t>(r)];
    const double m = z.row(r).maxCoeff();
    probs.row(r) = (z.row(r).array() - m).exp();
    const double s = probs.row(r).sum();
    probs.row(r) /= s;
    if (tgt < 0) continue;
    if (tgt >= vocab) throw IndexError("sequence_cross_entropy: target " + std::to_string(tgt) + " out of range");
    total += m + std::log(s) - z(r, tgt);
    ++counted;
  }
  if (counted == 0) throw InvalidInputError("sequence_cross_entropy: no targets");
  Matrix out(1, 1);
  out(0, 0) = total / counted;
  std::vector<int> tg(targets.begin(), targets.end());
  return logits.tape->record("sequence_cross_entropy", std::move(out), Shape{}, logits.requires_grad(),
                             [logits, tg = std::move(tg), probs = std::move(probs), counted](Tape& t, int self) {
                               const double g = t.grad(self)(0, 0) / counted;
                               Matrix d = probs;
                               for (Index r = 0; r < d.rows(); ++r) {
                                 const int tgt = tg[static_cast<std::size_t>(r)];
                                 if (tgt < 0) {
                                   d.row(r).setZero();
                                 } else {
                                   d(r, tgt) -= 1.0;
                                 }
                               }
                               t.accumulate(logits.id, d * g);
                             });
}

Var resample_linear(Var x, Index n) {
  if (!is_vector(x)) throw DimensionError("resample_linear: expected vector, got " + to_string(x.shape()));
  const Index m = x.shape()[0];
  if (m < 2) throw InvalidInputError("resample_linear: source length must be >= 2, got " + std::to_string(m));
  if (n < 1) throw InvalidInputError("resample_linear: target length must be >= 1");
  std::vector<Index> lo(static_cast<std::size_t>(n));
  std::vector<double> frac(static_cast<std::size_t>(n));
  Matrix out(n, 1);
  const auto src = x.vec();
  for (Index j = 0; j < n; ++j) {
    const double pos = n == 1 ? 0.5 * static_cast<double>(m - 1)
                              : static_cast<double>(j * (m - 1)) / static_cast<double>(n - 1);
    Index i0 = std::min(static_cast<Index>(std::floor(pos)), m - 2);
    const double tt = pos - static_cast<double>(i0);
    lo[static_cast<std::size_t>(j)] = i0;
    frac[static_cast<std::size_t>(j)] = tt;
    out(j, 0) = (1.0 - tt) * src(i0) + tt * src(i0 + 1);
  }
  return x.tape->record("resample_linear", std::move(out), vec_shape(n), x.requires_grad(),
                        [x, m, lo = std::move(lo), frac = std::move(frac)](Tape& t, int self) {
                          const Matrix& g = t.grad(self);
                          Matrix d = Matrix::Zero(m, 1);
                          for (std::size_t j = 0; j < lo.size(); ++j) {
                            d(lo[j], 0) += (1.0 - frac[j]) * g(static_cast<Index>(j), 0);
                            d(lo[j] + 1, 0) += frac[j] * g(static_cast<Index>(j), 0);
                          }
                          t.accumulate(x.id, d);
                        });
}

Var gather_rows(Var table, std::span<const int> rows) {
  if (!is_matrix(table)) throw DimensionError("gather_rows: table must be a matrix");
  const Index n_rows = table.shape()[0];
  Matrix out(static_cast<Index>(rows.size()), table.shape()[1]);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0 || rows[i] >= n_rows) {
      throw IndexError("gather_rows: index " + std::to_string(rows[i]) + " out of range " + to_string(table.shape()));
    }
    out.row(static_cast<Index>(i)) = table.value().row(rows[i]);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return table.tape->record("gather_rows", std::move(out), mat_shape(static_cast<Index>(rows.size()), table.shape()[1]),
                            table.requires_grad(), [table, idx = std::move(idx)](Tape& t, int self) {
                              const Matrix& g = t.grad(self);
                              Matrix& dt = t.grad(table.id);
                              for (std::size_t i = 0; i < idx.size(); ++i) dt.row(idx[i]) += g.row(static_cast<Index>(i));
                            });
}

Var select_row(Var x, Index row) {
  if (!is_matrix(x)) throw DimensionError("select_row: expected matrix");
  if (row < 0 || row >= x.shape()[0]) throw IndexError("select_row: row out of range");
  Matrix out = x.value().row(row).transpose();
  return x.tape->record("select_row", std::move(out), vec_shape(x.shape()[1]), x.requires_grad(),
                        [x, row](Tape& t, int self) { t.grad(x.id).row(row) += t.grad(self).col(0).transpose(); });
}

Var stack_rows(std::span<const Var> vectors) {
  if (vectors.empty()) throw InvalidInputError("stack_rows: empty list");
  const Index width = vectors[0].shape().size() == 1 ? vectors[0].shape()[0] : -1;
  if (width < 0) throw DimensionError("stack_rows: expected vectors");
  Matrix out(static_cast<Index>(vectors.size()), width);
  bool rg = false;
  for (std::size_t i = 0; i < vectors.size(); ++i) {
    if (vectors[i].shape() != vectors[0].shape()) shape_error("stack_rows", vectors[0], vectors[i]);
    out.row(static_cast<Index>(i)) = vectors[i].value().col(0).transpose();
    rg = rg || vectors[i].requires_grad();
  }
  std::vector<Var> inputs(vectors.begin(), vectors.end());
  return vectors[0].tape->record("stack_rows", std::move(out), mat_shape(static_cast<Index>(vectors.size()), width), rg,
                                 [inputs = std::move(inputs)](Tape& t, int self) {
                                   const Matrix& g = t.grad(self);
                                   for (std::size_t i = 0; i < inputs.size(); ++i) {
                                     t.accumulate(inputs[i].id, g.row(static_cast<Index>(i)).transpose());
                                   }
                                 });
}

AttentionResult attention(Var q, Var k, Var v, int n_heads, bool causal, Index q_len, Index k_len) {
  if (!is_matrix(q) || !is_matrix(k) || !is_matrix(v)) throw DimensionError("attention: expected matrices");
  const Index d = q.shape()[1];
  if (k.shape()[1] != d || v.shape()[1] != d) shape_error("attention", q, k);
  if (k.shape()[0] != v.shape()[0]) shape_error("attention", k, v);
  if (k.shape()[0] == 0 || k_len <= 0) throw InvalidInputError("attention: empty key/value list");
  if (n_heads <= 0 || d % n_heads != 0) {
    throw DimensionError("attention: n_heads " + std::to_string(n_heads) + " does not divide width " +
                         std::to_string(d));
  }
  if (q.shape()[0] % q_len != 0 || k.shape()[0] % k_len != 0 || q.shape()[0] / q_len != k.shape()[0] / k_len) {
    throw DimensionError("attention: rows do not split into matching blocks");
  }
  if (causal && q_len != k_len) throw InvalidInputError("attention: causal mask needs q_len == k_len");
  const Index blocks = q.shape()[0] / q_len;
  const Index dh = d / n_heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  std::vector<Matrix> weights(static_cast<std::size_t>(n_heads), Matrix(q.shape()[0], k_len));
  Matrix out(q.shape()[0], d);
  for (Index b = 0; b < blocks; ++b) {
    for (int h = 0; h < n_heads; ++h) {
      const auto qh = q.value().block(b * q_len, h * dh, q_len, dh);
      const auto kh = k.value().block(b * k_len, h * dh, k_len, dh);
      const auto vh = v.value().block(b * k_len, h * dh, k_len, dh);
      Matrix s = (qh * kh.transpose()) * inv_sqrt;
      for (Index i = 0; i < q_len; ++i) {
        const Index visible = causal ? i + 1 : k_len;
        const double m = s.row(i).head(visible).maxCoeff();
        double total = 0.0;
        for (Index j = 0; j < k_len; ++j) {
          const double e = j < visible ? std::exp(s(i, j) - m) : 0.0;
          s(i, j) = e;
          total += e;
        }
        s.row(i) /= total;
      }
      weights[static_cast<std::size_t>(h)].block(b * q_len, 0, q_len, k_len) = s;
      out.block(b * q_len, h * dh, q_len, dh) = s * vh;
    }
  }
  auto probs = std::make_shared<std::vector<Matrix>>(weights);
  Var result = q.tape->record(
      "attention", std::move(out), mat_shape(q.shape()[0], d), any_grad({q, k, v}),
      [q, k, v, n_heads, q_len, k_len, blocks, dh, inv_sqrt, probs](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        Matrix dq = Matrix::Zero(q.value().rows(), q.value().cols());
        Matrix dk = Matrix::Zero(k.value().rows(), k.value().cols());
        Matrix dv = Matrix::Zero(v.value().rows(), v.value().cols());
        for (Index b = 0; b < blocks; ++b) {
          for (int h = 0; h < n_heads; ++h) {
            const auto p = (*probs)[static_cast<std::size_t>(h)].block(b * q_len, 0, q_len, k_len);
            const auto qh = q.value().block(b * q_len, h * dh, q_len, dh);
            const auto kh = k.value().block(b * k_len, h * dh, k_len, dh);
            const auto vh = v.value().block(b * k_len, h * dh, k_len, dh);
            const auto go = g.block(b * q_len, h * dh, q_len, dh);
            Matrix dp = go * vh.transpose();
            dv.block(b * k_len, h * dh, k_len, dh) += p.transpose() * go;
            Vector row_dot = p.cwiseProduct(dp).rowwise().sum();
            Matrix ds = p.array() * (dp.array().colwise() - row_dot.array());
            ds *= inv_sqrt;
            dq.block(b * q_len, h * dh, q_len, dh) += ds * kh;
            dk.block(b * k_len, h * dh, k_len, dh) += ds.transpose() * qh;
          }
        }
        t.accumulate(q.id, dq);
        t.accumulate(k.id, dk);
        t.accumulate(v.id, dv);
      });
  return {result, std::move(weights)};
}

MhaResult multi_head_attention(Var query, std::span<const Var> keys, std::span<const Var> values,
                               const MhaWeights& w, int n_heads) {
  if (keys.empty() || values.empty()) throw InvalidInputError("multi_head_attention: empty key/value list");
  if (keys.size() != values.size()) throw InvalidInputError("multi_head_attention: keys and values differ in length");
  if (!is_vector(query)) throw DimensionError("multi_head_attention: query must be a vector");
  Tape& tape = *query.tape;
  Var q_row = stack_rows(std::span<const Var>(&query, 1));
  Var k_rows = stack_rows(keys);
  Var v_rows = stack_rows(values);
  Var qp = linear_rows(q_row, w.wq, w.bq);
  Var kp = linear_rows(k_rows, w.wk, w.bk);
  Var vp = linear_rows(v_rows, w.wv, w.bv);
  auto att = attention(qp, kp, vp, n_heads, false, 1, static_cast<Index>(keys.size()));
  Var projected = linear_rows(att.out, w.wo, w.bo);
  (void)tape;
  return {select_row(projected, 0), std::move(att.weights)};
}

Var inject_blend(Var hidden, Var z, double alpha, InjectPositions mode) {
  if (!is_matrix(hidden)) throw DimensionError("inject: hidden must be [positions, width]");
  if (!is_vector(z) || z.shape()[0] != hidden.shape()[1]) {
    throw DimensionError("inject: vector " + to_string(z.shape()) + " does not match residual width " +
                         to_string(hidden.shape()) + "; resample first");
  }
  const Index rows = hidden.shape()[0];
  const Index first = mode == InjectPositions::kLast ? rows - 1 : 0;
  Matrix out = hidden.value();
  const auto zr = z.value().col(0).transpose();
  Vector norms = Vector::Zero(rows);
  for (Index r = first; r < rows; ++r) {
    norms(r) = hidden.value().row(r).norm();
    out.row(r) = (1.0 - alpha) * hidden.value().row(r) + alpha * norms(r) * zr;
  }
  return hidden.tape->record("inject", std::move(out), hidden.shape(), any_grad({hidden, z}),
                             [hidden, z, alpha, first, norms = std::move(norms)](Tape& t, int self) {
                               const Matrix& g = t.grad(self);
                               const auto zr = z.value().col(0).transpose();
                               if (hidden.requires_grad()) {
                                 Matrix dh = g;
                                 for (Index r = first; r < g.rows(); ++r) {
                                   dh.row(r) *= (1.0 - alpha);
                                   if (norms(r) > 0.0) {
                                     dh.row(r) += alpha * zr.dot(g.row(r)) / norms(r) * hidden.value().row(r);
                                   }
                                 }
                                 t.accumulate(hidden.id, dh);
                               }
                               if (z.requires_grad()) {
                                 Matrix dz = Matrix::Zero(zr.size(), 1);
                                 for (Index r = first; r < g.rows(); ++r) {
                                   dz.col(0) += alpha * norms(r) * g.row(r).transpose();
                                 }
                                 t.accumulate(z.id, dz);
                               }
                             });
}

}  // namespace flg
