#include "glmlab/tensor.hpp"

#include <cmath>
#include <cstring>
#include <limits>
#include <unordered_set>

namespace glmlab {

namespace {

constexpr const char* kModule = "tensorcore";
constexpr Real kInf = std::numeric_limits<Real>::infinity();

using detail::Node;
using detail::NodePtr;

NodePtr make_node(std::vector<Index> shape, ArrX value) {
  auto node = std::make_shared<Node>();
  if (product(shape) != value.size()) {
    throw DimensionError(kModule, "shape " + shape_string(shape) + " does not match " +
                                      std::to_string(value.size()) + " values");
  }
  node->shape = std::move(shape);
  node->value = std::move(value);
  return node;
}

// Wires parents and the backprop closure; the closure is dropped entirely when
// no ancestor needs gradients so inference graphs stay closure-free.
Tensor attach(NodePtr node, std::vector<NodePtr> parents, std::function<void(Node&)> backprop) {
  bool needs = false;
  for (const auto& p : parents) needs = needs || p->requires_grad || p->needs_grad;
  node->parents = std::move(parents);
  if (needs) {
    node->needs_grad = true;
    node->backprop = std::move(backprop);
  }
  return Tensor(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(kModule, std::string(op) + ": shape mismatch " +
                                      shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  }
}

bool wants_grad(const Node* p) { return p->requires_grad || p->needs_grad; }

}  // namespace

// --- construction ------------------------------------------------------------

Tensor Tensor::zeros(std::vector<Index> shape, bool requires_grad) {
  const Index n = product(shape);
  auto node = make_node(std::move(shape), ArrX::Zero(n));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::constant(std::vector<Index> shape, Real fill, bool requires_grad) {
  const Index n = product(shape);
  auto node = make_node(std::move(shape), ArrX::Constant(n, fill));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(Real value) { return constant({}, value); }

Tensor Tensor::from_values(std::vector<Index> shape, std::vector<Real> values,
                           bool requires_grad) {
  ArrX v(static_cast<Index>(values.size()));
  std::memcpy(v.data(), values.data(), values.size() * sizeof(Real));
  auto node = make_node(std::move(shape), std::move(v));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::from_matrix(const Mat& m, bool requires_grad) {
  ArrX v(m.size());
  MatMap(v.data(), m.rows(), m.cols()) = m;
  auto node = make_node({m.rows(), m.cols()}, std::move(v));
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Real Tensor::item() const {
  if (size() != 1) {
    throw ContractError(kModule, "item() on tensor of size " + std::to_string(size()));
  }
  return node_->value[0];
}

// --- binary16 emulation -------------------------------------------------------

Real half_round_value(Real x) {
  if (std::isnan(x)) return x;
  const Real sign = std::signbit(x) ? -1.0 : 1.0;
  Real a = std::fabs(x);
  if (a == 0.0) return x;  // preserves signed zero
  if (std::isinf(x)) return x;
  // IEEE overflow rule: anything that would round (with unbounded exponent)
  // to >= 2^16 becomes inf; the threshold is 65520 = (2048 - 0.5) * 2^5.
  if (a >= 65520.0) return sign * kInf;
  // Below half the smallest subnormal (2^-25) everything rounds to zero;
  // the tie at exactly 2^-25 also goes to zero (even).
  const Real min_subnormal = 0x1p-24;
  if (a <= 0x1p-25) return sign * 0.0;
  Real quantum;
  if (a < 0x1p-14) {
    quantum = min_subnormal;  // subnormal range: fixed quantum
  } else {
    int exp = 0;
    std::frexp(a, &exp);  // a = f * 2^exp with f in [0.5, 1), so a in [2^(exp-1), 2^exp)
    quantum = std::ldexp(1.0, exp - 11);  // 11-bit significand: quantum 2^(e-10)
  }
  // Division and multiplication by a power of two are exact; nearbyint
  // applies round-to-nearest-even in the default environment.
  return sign * std::nearbyint(a / quantum) * quantum;
}

namespace {

ArrX half_round_array(const ArrX& v) {
  ArrX out(v.size());
  for (Index i = 0; i < v.size(); ++i) out[i] = half_round_value(v[i]);
  return out;
}

}  // namespace

// --- ops ----------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2) {
    throw DimensionError(kModule, "matmul expects rank-2 operands, got " +
                                      shape_string(a.shape()) + " and " + shape_string(b.shape()));
  }
  if (a.cols() != b.rows()) {
    throw DimensionError(kModule, "matmul inner dimensions disagree: " +
                                      shape_string(a.shape()) + " x " + shape_string(b.shape()));
  }
  const Index m = a.rows(), n = b.cols();
  ArrX out(m * n);
  MatMap(out.data(), m, n).noalias() = a.matrix() * b.matrix();
  auto node = make_node({m, n}, std::move(out));
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return attach(std::move(node), {a.node(), b.node()}, [pa, pb, m, n](Node& self) {
    ConstMatMap g(self.grad.data(), m, n);
    if (wants_grad(pa)) pa->grad_matrix().noalias() += g * pb->matrix().transpose();
    if (wants_grad(pb)) pb->grad_matrix().noalias() += pa->matrix().transpose() * g;
  });
}

Tensor transpose(const Tensor& a) {
  if (a.shape().size() != 2) {
    throw DimensionError(kModule, "transpose expects rank 2, got " + shape_string(a.shape()));
  }
  const Index m = a.rows(), n = a.cols();
  ArrX out(m * n);
  MatMap(out.data(), n, m) = a.matrix().transpose();
  auto node = make_node({n, m}, std::move(out));
  Node* pa = a.node().get();
  return attach(std::move(node), {a.node()}, [pa, m, n](Node& self) {
    ConstMatMap g(self.grad.data(), n, m);
    pa->grad_matrix() += g.transpose();
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto node = make_node(a.shape(), a.values() + b.values());
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return attach(std::move(node), {a.node(), b.node()}, [pa, pb](Node& self) {
    if (wants_grad(pa)) pa->grad_buffer() += self.grad;
    if (wants_grad(pb)) pb->grad_buffer() += self.grad;
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  auto node = make_node(a.shape(), a.values() - b.values());
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return attach(std::move(node), {a.node(), b.node()}, [pa, pb](Node& self) {
    if (wants_grad(pa)) pa->grad_buffer() += self.grad;
    if (wants_grad(pb)) pb->grad_buffer() -= self.grad;
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  auto node = make_node(a.shape(), a.values() * b.values());
  Node* pa = a.node().get();
  Node* pb = b.node().get();
  return attach(std::move(node), {a.node(), b.node()}, [pa, pb](Node& self) {
    if (wants_grad(pa)) pa->grad_buffer() += self.grad * pb->value;
    if (wants_grad(pb)) pb->grad_buffer() += self.grad * pa->value;
  });
}

Tensor scale(const Tensor& a, Real factor) {
  auto node = make_node(a.shape(), a.values() * factor);
  Node* pa = a.node().get();
  return attach(std::move(node), {a.node()},
                [pa, factor](Node& self) { pa->grad_buffer() += self.grad * factor; });
}

Tensor sum(const Tensor& a) {
  ArrX out(1);
  out[0] = a.values().sum();
  auto node = make_node({}, std::move(out));
  Node* pa = a.node().get();
  return attach(std::move(node), {a.node()},
                [pa](Node& self) { pa->grad_buffer() += self.grad[0]; });
}

Tensor softmax_rows(const Tensor& x, const PrecisionPolicy& policy) {
  const Index rows = x.rows(), cols = x.cols();
  const Real prescale = policy.softmax_prescale;
  ArrX out(x.size());
  ConstMatMap in(x.values().data(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    // Everything below runs wide: multiply the prescale back in, subtract the
    // row max, exponentiate, normalize.
    Vec row = in.row(r).transpose() * prescale;
    const Real rowmax = row.maxCoeff();
    if (rowmax == -kInf) {
      throw PolicyError(kModule, "softmax row " + std::to_string(r) +
                                     " is entirely -inf; no distribution is defined");
    }
    Real total = 0.0;
    for (Index c = 0; c < cols; ++c) {
      const Real e = std::exp(row[c] - rowmax);
      out[r * cols + c] = e;
      total += e;
    }
    for (Index c = 0; c < cols; ++c) out[r * cols + c] /= total;
  }
  auto node = make_node(x.shape(), std::move(out));
  Node* px = x.node().get();
  return attach(std::move(node), {x.node()}, [px, rows, cols, prescale](Node& self) {
    ConstMatMap y(self.value.data(), rows, cols);
    ConstMatMap g(self.grad.data(), rows, cols);
    MatMap dx(px->grad_buffer().data(), rows, cols);
    for (Index r = 0; r < rows; ++r) {
      const Real dot = g.row(r).cwiseProduct(y.row(r)).sum();
      dx.row(r) += prescale * (y.row(r).cwiseProduct(g.row(r)) - dot * y.row(r));
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, Real eps) {
  const Index rows = x.rows(), cols = x.cols();
  if (gain.size() != cols || bias.size() != cols) {
    throw DimensionError(kModule, "layer_norm gain/bias must match last dimension " +
                                      std::to_string(cols));
  }
  ArrX out(x.size());
  ArrX inv_std(rows);
  ConstMatMap in(x.values().data(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const Real mean = in.row(r).mean();
    const Real var = (in.row(r).array() - mean).square().sum() / static_cast<Real>(cols);
    const Real is = 1.0 / std::sqrt(var + eps);
    inv_std[r] = is;
    for (Index c = 0; c < cols; ++c) {
      const Real xhat = (in(r, c) - mean) * is;
      out[r * cols + c] = xhat * gain.values()[c] + bias.values()[c];
    }
  }
  auto node = make_node(x.shape(), std::move(out));
  Node* px = x.node().get();
  Node* pgain = gain.node().get();
  Node* pbias = bias.node().get();
  return attach(std::move(node), {x.node(), gain.node(), bias.node()},
                [px, pgain, pbias, rows, cols, inv_std](Node& self) {
                  ConstMatMap in(px->value.data(), rows, cols);
                  ConstMatMap g(self.grad.data(), rows, cols);
                  for (Index r = 0; r < rows; ++r) {
                    const Real mean = in.row(r).mean();
                    Vec xhat = (in.row(r).transpose().array() - mean).matrix() * inv_std[r];
                    Vec a(cols);
                    for (Index c = 0; c < cols; ++c) a[c] = g(r, c) * pgain->value[c];
                    const Real mean_a = a.mean();
                    const Real mean_ax = a.cwiseProduct(xhat).mean();
                    if (wants_grad(px)) {
                      MatMap dx(px->grad_buffer().data(), rows, cols);
                      for (Index c = 0; c < cols; ++c) {
                        dx(r, c) += inv_std[r] * (a[c] - mean_a - xhat[c] * mean_ax);
                      }
                    }
                    if (wants_grad(pgain)) {
                      for (Index c = 0; c < cols; ++c) {
                        pgain->grad_buffer()[c] += g(r, c) * xhat[c];
                      }
                    }
                    if (wants_grad(pbias)) {
                      for (Index c = 0; c < cols; ++c) pbias->grad_buffer()[c] += g(r, c);
                    }
                  }
                });
}

namespace {
constexpr Real kInvSqrt2 = 0.7071067811865475244;
constexpr Real kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace

Tensor gelu(const Tensor& x) {
  ArrX out(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    const Real v = x.values()[i];
    out[i] = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  }
  auto node = make_node(x.shape(), std::move(out));
  Node* px = x.node().get();
  return attach(std::move(node), {x.node()}, [px](Node& self) {
    ArrX& dx = px->grad_buffer();
    for (Index i = 0; i < self.value.size(); ++i) {
      const Real v = px->value[i];
      const Real cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
      const Real pdf = kInvSqrt2Pi * std::exp(-0.5 * v * v);
      dx[i] += self.grad[i] * (cdf + v * pdf);
    }
  });
}

namespace {

// theta_i = 10000^(-2(i-1)/d), i in [1, d/2]; adjacent-pair blocks.
std::vector<Real> rope_thetas(Index d) {
  std::vector<Real> thetas(static_cast<size_t>(d / 2));
  for (Index i = 0; i < d / 2; ++i) {
    thetas[static_cast<size_t>(i)] = std::pow(10000.0, -2.0 * static_cast<Real>(i) / static_cast<Real>(d));
  }
  return thetas;
}

Tensor rope_rotate_impl(const Tensor& x, std::vector<int> positions) {
  const Index rows = x.rows(), d = x.cols();
  if (d % 2 != 0) {
    throw ContractError(kModule, "rope_rotate requires an even last dimension, got " +
                                     std::to_string(d));
  }
  if (static_cast<Index>(positions.size()) != rows) {
    throw DimensionError(kModule, "rope_rotate positions must match row count");
  }
  const auto thetas = rope_thetas(d);
  ArrX out(x.size());
  ConstMatMap in(x.values().data(), rows, d);
  for (Index r = 0; r < rows; ++r) {
    const Real m = static_cast<Real>(positions[static_cast<size_t>(r)]);
    for (Index j = 0; j < d / 2; ++j) {
      const Real ang = m * thetas[static_cast<size_t>(j)];
      const Real c = std::cos(ang), s = std::sin(ang);
      const Real a = in(r, 2 * j), b = in(r, 2 * j + 1);
      out[r * d + 2 * j] = c * a - s * b;
      out[r * d + 2 * j + 1] = s * a + c * b;
    }
  }
  auto node = make_node(x.shape(), std::move(out));
  Node* px = x.node().get();
  return attach(std::move(node), {x.node()},
                [px, rows, d, thetas, positions = std::move(positions)](Node& self) {
                  // The rotation is orthogonal; the adjoint rotates by -m.
                  ConstMatMap g(self.grad.data(), rows, d);
                  MatMap dx(px->grad_buffer().data(), rows, d);
                  for (Index r = 0; r < rows; ++r) {
                    const Real m = static_cast<Real>(positions[static_cast<size_t>(r)]);
                    for (Index j = 0; j < d / 2; ++j) {
                      const Real ang = m * thetas[static_cast<size_t>(j)];
                      const Real c = std::cos(ang), s = std::sin(ang);
                      const Real ga = g(r, 2 * j), gb = g(r, 2 * j + 1);
                      dx(r, 2 * j) += c * ga + s * gb;
                      dx(r, 2 * j + 1) += -s * ga + c * gb;
                    }
                  }
                });
}

}  // namespace

Tensor rope_rotate(const Tensor& x, Index m) {
  std::vector<int> positions(static_cast<size_t>(x.rows()), static_cast<int>(m));
  return rope_rotate_impl(x, std::move(positions));
}

Tensor rope_rotate(const Tensor& x, std::span<const int> positions) {
  return rope_rotate_impl(x, std::vector<int>(positions.begin(), positions.end()));
}

Tensor embedding_rows(const Tensor& table, std::span<const int> ids) {
  if (table.shape().size() != 2) {
    throw DimensionError(kModule, "embedding_rows expects a rank-2 table");
  }
  const Index v = table.rows(), d = table.cols();
  const Index n = static_cast<Index>(ids.size());
  for (int id : ids) {
    if (id < 0 || id >= v) {
      throw ContractError(kModule, "token id " + std::to_string(id) +
                                       " outside vocabulary of size " + std::to_string(v));
    }
  }
  ArrX out(n * d);
  ConstMatMap in(table.values().data(), v, d);
  MatMap om(out.data(), n, d);
  std::vector<int> idvec(ids.begin(), ids.end());
  for (Index r = 0; r < n; ++r) om.row(r) = in.row(idvec[static_cast<size_t>(r)]);
  auto node = make_node({n, d}, std::move(out));
  Node* pt = table.node().get();
  return attach(std::move(node), {table.node()}, [pt, n, d, idvec = std::move(idvec)](Node& self) {
    ConstMatMap g(self.grad.data(), n, d);
    MatMap dt(pt->grad_buffer().data(), pt->lead_dim(), d);
    for (Index r = 0; r < n; ++r) dt.row(idvec[static_cast<size_t>(r)]) += g.row(r);
  });
}

Tensor slice_cols(const Tensor& x, Index start, Index count) {
  const Index rows = x.rows(), cols = x.cols();
  if (start < 0 || count < 0 || start + count > cols) {
    throw DimensionError(kModule, "slice_cols [" + std::to_string(start) + ", " +
                                      std::to_string(start + count) + ") outside width " +
                                      std::to_string(cols));
  }
  ArrX out(rows * count);
  MatMap(out.data(), rows, count) = ConstMatMap(x.values().data(), rows, cols)
                                        .block(0, start, rows, count);
  auto node = make_node({rows, count}, std::move(out));
  Node* px = x.node().get();
  return attach(std::move(node), {x.node()}, [px, rows, cols, start, count](Node& self) {
    ConstMatMap g(self.grad.data(), rows, count);
    MatMap(px->grad_buffer().data(), rows, cols).block(0, start, rows, count) += g;
  });
}

Tensor concat_cols(std::span<const Tensor> parts) {
  if (parts.empty()) throw ContractError(kModule, "concat_cols of zero tensors");
  const Index rows = parts[0].rows();
  Index total = 0;
  for (const Tensor& p : parts) {
    if (p.rows() != rows) throw DimensionError(kModule, "concat_cols row mismatch");
    total += p.cols();
  }
  ArrX out(rows * total);
  MatMap om(out.data(), rows, total);
  Index at = 0;
  std::vector<NodePtr> parents;
  std::vector<Index> offsets;
  for (const Tensor& p : parts) {
    om.block(0, at, rows, p.cols()) = p.matrix();
    parents.push_back(p.node());
    offsets.push_back(at);
    at += p.cols();
  }
  auto node = make_node({rows, total}, std::move(out));
  return attach(std::move(node), std::move(parents),
                [rows, total, offsets = std::move(offsets)](Node& self) {
                  ConstMatMap g(self.grad.data(), rows, total);
                  for (size_t i = 0; i < self.parents.size(); ++i) {
                    Node* p = self.parents[i].get();
                    if (!wants_grad(p)) continue;
                    const Index w = p->last_dim();
                    p->grad_matrix() += g.block(0, offsets[i], rows, w);
                  }
                });
}

Tensor masked_fill(const Tensor& x, const BoolMat& keep, Real fill) {
  const Index rows = x.rows(), cols = x.cols();
  if (keep.rows() != rows || keep.cols() != cols) {
    throw DimensionError(kModule, "masked_fill mask shape mismatch");
  }
  ArrX out(x.size());
  for (Index r = 0; r < rows; ++r) {
    for (Index c = 0; c < cols; ++c) {
      out[r * cols + c] = keep(r, c) ? x.values()[r * cols + c] : fill;
    }
  }
  auto node = make_node(x.shape(), std::move(out));
  Node* px = x.node().get();
  BoolMat keep_copy = keep;
  return attach(std::move(node), {x.node()},
                [px, rows, cols, keep = std::move(keep_copy)](Node& self) {
                  ArrX& dx = px->grad_buffer();
                  for (Index r = 0; r < rows; ++r) {
                    for (Index c = 0; c < cols; ++c) {
                      if (keep(r, c)) dx[r * cols + c] += self.grad[r * cols + c];
                    }
                  }
                });
}

Tensor scale_grad(const Tensor& x, Real alpha) {
  if (!(alpha > 0.0) || alpha > 1.0) {
    throw ContractError(kModule,
                        "scale_grad alpha must lie in (0, 1], got " + std::to_string(alpha));
  }
  auto node = make_node(x.shape(), ArrX(x.values()));
  Node* px = x.node().get();
  return attach(std::move(node), {x.node()},
                [px, alpha](Node& self) { px->grad_buffer() += alpha * self.grad; });
}

Tensor half_emulate(const Tensor& x) {
  auto node = make_node(x.shape(), half_round_array(x.values()));
  Node* px = x.node().get();
  // Straight-through: the rounding is treated as identity in the backward pass.
  return attach(std::move(node), {x.node()},
                [px](Node& self) { px->grad_buffer() += self.grad; });
}

Tensor storage_round(const Tensor& x, const PrecisionPolicy& policy) {
  if (!policy.half()) return x;
  return half_emulate(x);
}

Tensor dropout(const Tensor& x, Real rate, Rng& rng) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ContractError(kModule, "dropout rate must lie in [0, 1), got " + std::to_string(rate));
  }
  if (rate == 0.0) return x;
  const Real keep_scale = 1.0 / (1.0 - rate);
  ArrX mask(x.size());
  for (Index i = 0; i < x.size(); ++i) {
    mask[i] = rng.bernoulli(rate) ? 0.0 : keep_scale;
  }
  auto node = make_node(x.shape(), x.values() * mask);
  Node* px = x.node().get();
  return attach(std::move(node), {x.node()}, [px, mask = std::move(mask)](Node& self) {
    px->grad_buffer() += self.grad * mask;
  });
}

Tensor cross_entropy_rows(const Tensor& logits, std::span<const int> targets) {
  const Index rows = logits.rows(), cols = logits.cols();
  if (static_cast<Index>(targets.size()) != rows) {
    throw DimensionError(kModule, "cross_entropy_rows targets must match row count");
  }
  std::vector<int> tvec(targets.begin(), targets.end());
  Index count = 0;
  Real total = 0.0;
  ConstMatMap in(logits.values().data(), rows, cols);
  for (Index r = 0; r < rows; ++r) {
    const int t = tvec[static_cast<size_t>(r)];
    if (t < 0) continue;
    if (t >= cols) {
      throw ContractError(kModule, "target class " + std::to_string(t) + " outside vocabulary");
    }
    const Real rowmax = in.row(r).maxCoeff();
    Real lse = 0.0;
    for (Index c = 0; c < cols; ++c) lse += std::exp(in(r, c) - rowmax);
    total += (std::log(lse) + rowmax) - in(r, t);
    ++count;
  }
  ArrX out(1);
  out[0] = count == 0 ? 0.0 : total / static_cast<Real>(count);
  auto node = make_node({}, std::move(out));
  Node* pl = logits.node().get();
  return attach(std::move(node), {logits.node()},
                [pl, rows, cols, count, tvec = std::move(tvec)](Node& self) {
                  if (count == 0) return;
                  const Real g = self.grad[0] / static_cast<Real>(count);
                  ConstMatMap in(pl->value.data(), rows, cols);
                  MatMap dx(pl->grad_buffer().data(), rows, cols);
                  for (Index r = 0; r < rows; ++r) {
                    const int t = tvec[static_cast<size_t>(r)];
                    if (t < 0) continue;
                    const Real rowmax = in.row(r).maxCoeff();
                    Real lse = 0.0;
                    for (Index c = 0; c < cols; ++c) lse += std::exp(in(r, c) - rowmax);
                    for (Index c = 0; c < cols; ++c) {
                      const Real p = std::exp(in(r, c) - rowmax) / lse;
                      dx(r, c) += g * (p - (c == t ? 1.0 : 0.0));
                    }
                  }
                });
}

// --- backward -----------------------------------------------------------------

void backward(const Tensor& loss, Real seed) {
  if (!loss.valid() || loss.size() != 1) {
    throw ContractError(kModule, "backward requires a scalar loss node");
  }
  // Iterative post-order over the needs-grad subgraph; construction order is
  // deterministic so the sweep (and therefore accumulation order) is too.
  std::vector<Node*> topo;
  std::unordered_set<Node*> visited;
  struct Frame {
    Node* node;
    size_t next_parent;
  };
  std::vector<Frame> stack;
  Node* root = loss.node().get();
  if (root->needs_grad || root->requires_grad) {
    stack.push_back({root, 0});
    visited.insert(root);
  }
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Node* p = f.node->parents[f.next_parent++].get();
      if ((p->needs_grad || p->requires_grad) && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(f.node);
      stack.pop_back();
    }
  }
  root->grad_buffer()[0] += seed;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    Node* n = *it;
    if (n->backprop && n->grad.size() == n->value.size()) n->backprop(*n);
  }
}

}  // namespace glmlab
