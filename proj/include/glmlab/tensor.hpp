#pragma once

#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "glmlab/common.hpp"
#include "glmlab/rng.hpp"

namespace glmlab {

// Storage controls how activations are held between ops: wide keeps the
// native 64-bit values, half-emulated rounds every stored value to the
// nearest binary16 value (overflow becomes +-inf, which is the signal).
// Softmax accumulation is always wide regardless of storage.
struct PrecisionPolicy {
  enum class Storage { kWide, kHalfEmulated };

  Storage storage = Storage::kWide;

  // Pre-division factor for attention scores under half-emulated storage:
  // scores are stored as score/prescale and multiplied back inside the wide
  // softmax. 1.0 disables it; no default value beyond that is claimed.
  Real softmax_prescale = 1.0;

  bool half() const { return storage == Storage::kHalfEmulated; }
};

// Rounds one value to the nearest binary16-representable value
// (round-half-to-even). Magnitudes at or above 65520 overflow to +-inf.
Real half_round_value(Real x);

namespace detail {

struct Node {
  std::vector<Index> shape;
  ArrX value;
  ArrX grad;  // lazily allocated by backward
  bool requires_grad = false;
  bool needs_grad = false;  // true if this node or any ancestor requires grad
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  Index size() const { return value.size(); }
  Index last_dim() const { return shape.empty() ? 1 : shape.back(); }
  Index lead_dim() const { return shape.empty() ? 1 : size() / last_dim(); }

  MatMap matrix() { return MatMap(value.data(), lead_dim(), last_dim()); }
  ConstMatMap matrix() const { return ConstMatMap(value.data(), lead_dim(), last_dim()); }

  ArrX& grad_buffer() {
    if (grad.size() != value.size()) grad = ArrX::Zero(value.size());
    return grad;
  }
  MatMap grad_matrix() { return MatMap(grad_buffer().data(), lead_dim(), last_dim()); }
};

using NodePtr = std::shared_ptr<Node>;

}  // namespace detail

// Value-semantic handle onto a node of a single-use differentiation tape.
// Leaf tensors (parameters, inputs) outlive the graphs built on top of them;
// intermediate nodes are freed when the downstream handles go out of scope.
class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(std::vector<Index> shape, bool requires_grad = false);
  static Tensor constant(std::vector<Index> shape, Real fill, bool requires_grad = false);
  static Tensor scalar(Real value);
  static Tensor from_values(std::vector<Index> shape, std::vector<Real> values,
                            bool requires_grad = false);
  static Tensor from_matrix(const Mat& m, bool requires_grad = false);

  bool valid() const { return node_ != nullptr; }
  const std::vector<Index>& shape() const { return node_->shape; }
  Index size() const { return node_->size(); }
  Index rows() const { return node_->lead_dim(); }
  Index cols() const { return node_->last_dim(); }
  bool requires_grad() const { return node_->requires_grad; }

  const ArrX& values() const { return node_->value; }
  ArrX& values() { return node_->value; }
  ConstMatMap matrix() const { return std::as_const(*node_).matrix(); }
  MatMap matrix() { return node_->matrix(); }

  bool has_grad() const { return node_->grad.size() == node_->value.size(); }
  const ArrX& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = ArrX(); }

  Real item() const;
  Real operator()(Index r, Index c) const { return matrix()(r, c); }

  detail::NodePtr node() const { return node_; }
  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

private:
  detail::NodePtr node_;
};

// --- graph construction -----------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, Real factor);
Tensor sum(const Tensor& a);  // scalar result

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, Real s) { return scale(a, s); }
inline Tensor operator*(Real s, const Tensor& a) { return scale(a, s); }

// Row softmax over the last dimension. Accumulation is wide regardless of
// policy; softmax_prescale is multiplied back in before max-subtraction.
// A row whose entries are all -inf has no defined distribution and raises
// PolicyError instead of being silently patched.
Tensor softmax_rows(const Tensor& x, const PrecisionPolicy& policy = {});

// Per-position normalization over the last dimension followed by affine
// gain/bias; eps guards zero variance.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps);

// Exact erf-form GeLU.
Tensor gelu(const Tensor& x);

// Rotary rotation of every row by position m (adjacent-pair blocks,
// theta_i = 10000^(-2(i-1)/d)). Row count may be anything; the last
// dimension d must be even.
Tensor rope_rotate(const Tensor& x, Index m);
// Per-row positions (one per row of the 2-D view).
Tensor rope_rotate(const Tensor& x, std::span<const int> positions);

// Gathers rows of `table` by id; gradients scatter-add back.
Tensor embedding_rows(const Tensor& table, std::span<const int> ids);

Tensor slice_cols(const Tensor& x, Index start, Index count);
Tensor concat_cols(std::span<const Tensor> parts);

// Keeps entries where keep(r, c) is true and replaces the rest with `fill`;
// gradients flow only through kept entries.
Tensor masked_fill(const Tensor& x, const BoolMat& keep, Real fill);

// Identity forward; multiplies the incoming gradient by alpha on the way
// back. This is the embedding-gradient-shrink primitive: with the tensor
// routed through one scale_grad node, the accumulated upstream gradient is
// scaled by exactly alpha, elementwise.
Tensor scale_grad(const Tensor& x, Real alpha);

// Rounds every stored value to binary16 (straight-through gradient).
Tensor half_emulate(const Tensor& x);

// half_emulate under half-emulated storage, identity (no node) in wide mode.
Tensor storage_round(const Tensor& x, const PrecisionPolicy& policy);

// Inverted dropout; rate 0 returns x unchanged and consumes no randomness.
Tensor dropout(const Tensor& x, Real rate, Rng& rng);

// Mean negative log-softmax of each row's target class; rows with target -1
// carry no loss. An empty target set yields loss 0 (callers can detect it
// from the target list).
Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets);

// Reverse-mode sweep from a scalar loss; accumulates into the grad buffer of
// every tensor with requires_grad on the tape. `seed` premultiplies the whole
// sweep (loss scaling hooks in here).
void backward(const Tensor& loss, Real seed = 1.0);

}  // namespace glmlab
