#pragma once

// Dense tensors and a reverse-mode tape. Every gradient in the project is
// produced here; higher modules only compose the primitives below.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

#include "flg/errors.hpp"

namespace flg {

using Index = Eigen::Index;
using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vector = Eigen::VectorXd;
using Shape = std::vector<Index>;

std::string to_string(const Shape& shape);
Index numel(const Shape& shape);

/// Persistent array with an optional gradient accumulator.
///
/// Rank-1 tensors are stored as n x 1, rank-2 as rows x cols, rank-0 as 1 x 1;
/// the storage is row-major so `data()` is the canonical flat layout.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, Matrix value, bool requires_grad = false);

  static Tensor vector(const Vector& v, bool requires_grad = false);
  static Tensor matrix(const Matrix& m, bool requires_grad = false);

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index size() const { return value_.size(); }

  const Matrix& value() const { return value_; }
  /// Mutable access; callers must keep the shape unchanged.
  Matrix& value() { return value_; }
  std::span<const double> data() const { return {value_.data(), static_cast<std::size_t>(value_.size())}; }

  bool requires_grad() const { return requires_grad_; }
  /// Turning the flag off drops any accumulated gradient.
  void set_requires_grad(bool on);

  bool has_grad() const { return requires_grad_; }
  /// Throws StateError if the tensor does not track gradients.
  const Matrix& grad() const;
  void accumulate_grad(const Matrix& g);
  void zero_grad();

 private:
  Shape shape_;
  Matrix value_;
  Matrix grad_;
  bool requires_grad_ = false;
};

class Tape;

/// Handle to a value recorded on a Tape. Cheap to copy; valid until reset().
struct Var {
  Tape* tape = nullptr;
  int id = -1;

  const Matrix& value() const;
  const Shape& shape() const;
  bool requires_grad() const;
  double item() const;
  /// Column view of a rank-1 value.
  Eigen::Map<const Vector> vec() const;
};

class Tape {
 public:
  using Pullback = std::function<void(Tape&, int self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var constant(Matrix value, Shape shape);
  Var constant(const Vector& v);
  /// Leaf bound to a persistent tensor; backward accumulates into it when it
  /// requires grad. The tensor is referenced, not copied: it must outlive the
  /// tape and stay unmodified until backward has run.
  Var leaf(Tensor& t);
  Var leaf(const Tensor& t);

  /// Appends a record. `pullback` runs only when the record requires grad.
  Var record(const char* op, Matrix value, Shape shape, bool requires_grad, Pullback pullback);

  const Matrix& value(int id) const {
    const Record& rec = records_[static_cast<std::size_t>(id)];
    return rec.external ? *rec.external : rec.value;
  }
  const Shape& shape(int id) const { return records_[static_cast<std::size_t>(id)].shape; }
  bool requires_grad(int id) const { return records_[static_cast<std::size_t>(id)].requires_grad; }
  /// Adjoint of a record, zero-initialized on first access.
  Matrix& grad(int id);

  /// Adds `g` to the adjoint of `id` if that record requires grad.
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    if (!requires_grad(id)) return;
    grad(id) += g;
  }

  void backward(Var loss);
  void reset();

  std::size_t size() const { return records_.size(); }
  std::string_view op_name(int id) const { return records_[static_cast<std::size_t>(id)].op; }
  /// Record ids whose pullbacks ran during the last backward, in call order.
  const std::vector<int>& last_backward_order() const { return backward_order_; }

 private:
  struct Record {
    const char* op = "";
    Matrix value;
    const Matrix* external = nullptr;
    Matrix grad;
    Shape shape;
    bool requires_grad = false;
    Tensor* bound = nullptr;
    Pullback pullback;
  };
  std::vector<Record> records_;
  std::vector<int> backward_order_;
};

// ---------------------------------------------------------------------------
// Primitive operations

Var affine(Var weight, Var bias, Var x);
/// Row-wise affine map: X W^T + 1 b^T for X of shape [rows, d_in].
Var linear_rows(Var x, Var weight, Var bias);
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var scale(Var a, double factor);
Var mul(Var a, Var b);
Var sum(Var a);
Var mean(std::span<const Var> items);
Var gelu(Var x);

inline constexpr double kNormalizeEps = 1e-12;
inline constexpr double kLayerNormEps = 1e-5;

Var l2_normalize(Var x, double eps = kNormalizeEps);
Var softmax(Var x);
/// Normalizes a vector, or each row of a matrix, then applies scale and shift.
Var layer_norm(Var x, Var scale, Var shift, double eps = kLayerNormEps);

/// -log probs[target]. Prefer softmax_cross_entropy when logits are at hand.
Var cross_entropy(Var probs, int target);
/// -log softmax(logits)[target], differentiated through the fused log-softmax.
Var softmax_cross_entropy(Var logits, int target);
/// Mean next-token loss over rows of [rows, vocab] logits; target -1 skips a row.
Var sequence_cross_entropy(Var logits, std::span<const int> targets);

/// Linear interpolation of a length-m vector onto n evenly spaced points.
Var resample_linear(Var x, Index n);

Var gather_rows(Var table, std::span<const int> rows);
Var select_row(Var x, Index row);
Var stack_rows(std::span<const Var> vectors);

struct AttentionResult {
  Var out;
  /// One [query rows, key count] matrix per head, each row summing to 1.
  std::vector<Matrix> weights;
};

/// Scaled dot-product attention split into `n_heads` column groups. Rows are
/// grouped into independent sequences of `q_len` queries and `k_len` keys.
/// With `causal`, query i of a block sees keys 0..i (requires q_len == k_len).
AttentionResult attention(Var q, Var k, Var v, int n_heads, bool causal, Index q_len, Index k_len);

struct MhaWeights {
  Var wq, bq, wk, bk, wv, bv, wo, bo;
};

struct MhaResult {
  Var out;
  std::vector<Matrix> weights;  // per head, [1, key count]
};

/// Single-query multi-head cross-attention over a list of key/value vectors.
MhaResult multi_head_attention(Var query, std::span<const Var> keys, std::span<const Var> values,
                               const MhaWeights& w, int n_heads);

enum class InjectPositions { kAll, kLast };

/// Residual-stream blend h' = (1 - alpha) h + alpha * z * ||h||_2, applied to
/// every row of `hidden` (kAll) or only its last row (kLast).
Var inject_blend(Var hidden, Var z, double alpha, InjectPositions mode);

}  // namespace flg
