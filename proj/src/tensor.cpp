#include "ktrans/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>

namespace ktrans {

namespace {

#ifdef NDEBUG
std::atomic<bool> g_finite_checks{false};
#else
std::atomic<bool> g_finite_checks{true};
#endif

template <typename T>
thread_local GradientTape<T>* g_active_tape = nullptr;

template <typename T>
using NodePtr = std::shared_ptr<detail::TensorNode<T>>;

template <typename T>
void check_finite(const char* op, const std::vector<T>& values) {
  if (!g_finite_checks.load(std::memory_order_relaxed)) return;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      std::ostringstream msg;
      msg << op << ": non-finite value at flat index " << i;
      throw NonFiniteError(msg.str());
    }
  }
}

// Gradient buffer of `node`, allocated on first use; null for constants.
template <typename T>
std::vector<T>* grad_sink(detail::TensorNode<T>* node) {
  if (!node->requires_grad) return nullptr;
  if (node->grad.empty()) node->grad.assign(node->data.size(), T(0));
  return &node->grad;
}

template <typename T>
Tensor<T> emit(const char* op, Shape shape, std::vector<T> data,
               std::vector<NodePtr<T>> inputs,
               std::function<void(const std::vector<T>&, const std::vector<T>&)> rule) {
  check_finite(op, data);
  auto out = std::make_shared<detail::TensorNode<T>>();
  out->shape = std::move(shape);
  out->data = std::move(data);
  auto* tape = GradientTape<T>::active();
  const bool track = tape != nullptr &&
                     std::any_of(inputs.begin(), inputs.end(),
                                 [](const NodePtr<T>& n) { return n->requires_grad; });
  if (track) {
    out->requires_grad = true;
    out->producer = tape;
    auto* raw = out.get();
    tape->record(std::move(inputs), out, [raw, rule = std::move(rule)] {
      if (!raw->grad.empty()) rule(raw->grad, raw->data);
    });
  }
  return Tensor<T>::from_node(std::move(out));
}

template <typename T>
void require_rank2(const char* op, const Tensor<T>& x) {
  if (x.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " +
                         shape_to_string(x.shape()));
  }
}

template <typename T>
void require_same_shape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_to_string(a.shape()) +
                         " vs " + shape_to_string(b.shape()));
  }
}

}  // namespace

std::string shape_to_string(const Shape& shape) {
  std::string out = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(shape[i]);
  }
  return out + ")";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

void set_finite_checks(bool enabled) { g_finite_checks.store(enabled); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

// ---- Tensor ---------------------------------------------------------------

template <typename T>
Tensor<T>::Tensor(Shape shape, std::vector<T> data, bool requires_grad) {
  if (shape.empty()) throw DimensionError("tensor shape must have at least one dimension");
  for (auto d : shape) {
    if (d == 0) throw DimensionError("tensor dimensions must be positive, got " +
                                     shape_to_string(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_to_string(shape));
  }
  node_ = std::make_shared<Node>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <typename T>
Tensor<T> Tensor<T>::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, T(0)), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::full(Shape shape, T value) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<T>(n, value));
}

template <typename T>
Tensor<T> Tensor<T>::scalar(T value, bool requires_grad) {
  return Tensor({1}, {value}, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::matrix(std::initializer_list<std::initializer_list<T>> rows,
                            bool requires_grad) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<T> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw DimensionError("ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data), requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::vector(std::initializer_list<T> values, bool requires_grad) {
  return Tensor({values.size()}, std::vector<T>(values), requires_grad);
}

template <typename T>
std::size_t Tensor<T>::rows() const {
  return rank() == 1 ? 1 : node_->shape[0];
}

template <typename T>
std::size_t Tensor<T>::cols() const {
  return node_->shape.back();
}

template <typename T>
T Tensor<T>::item() const {
  if (numel() != 1) {
    throw DimensionError("item() on non-scalar tensor of shape " + shape_to_string(shape()));
  }
  return node_->data[0];
}

template <typename T>
T Tensor<T>::at(std::size_t r, std::size_t c) const {
  if (rank() != 2 || r >= rows() || c >= cols()) {
    throw std::out_of_range("tensor index out of range");
  }
  return node_->data[r * cols() + c];
}

template <typename T>
Tensor<T> Tensor<T>::clone(bool requires_grad) const {
  return Tensor(node_->shape, node_->data, requires_grad);
}

template <typename T>
Tensor<T> Tensor<T>::from_node(std::shared_ptr<Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

// ---- GradientTape ---------------------------------------------------------

template <typename T>
GradientTape<T>::GradientTape() : previous_(g_active_tape<T>) {
  g_active_tape<T> = this;
}

template <typename T>
GradientTape<T>::~GradientTape() {
  reset();
  if (g_active_tape<T> == this) g_active_tape<T> = previous_;
}

template <typename T>
GradientTape<T>* GradientTape<T>::active() {
  return g_active_tape<T>;
}

template <typename T>
void GradientTape<T>::record(std::vector<std::shared_ptr<Node>> inputs,
                             std::shared_ptr<Node> output,
                             std::function<void()> backward_rule) {
  if (consumed_) throw TapeError("recording onto a tape after backward; reset it first");
  entries_.push_back({std::move(inputs), std::move(output), std::move(backward_rule)});
}

template <typename T>
void GradientTape<T>::backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw DimensionError("backward: loss must be a scalar, got shape " +
                         (loss.defined() ? shape_to_string(loss.shape()) : std::string("()")));
  }
  if (loss.node()->producer != this) {
    throw TapeError("backward: loss was not produced under this tape");
  }
  if (consumed_) throw TapeError("backward: already run on this tape without reset");
  consumed_ = true;
  loss.node()->grad.assign(1, T(1));
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) it->backward_rule();
}

template <typename T>
void GradientTape<T>::reset() {
  for (auto& e : entries_) e.output->producer = nullptr;
  entries_.clear();
  consumed_ = false;
}

// ---- AttentionMask --------------------------------------------------------

AttentionMask AttentionMask::none(std::size_t rows, std::size_t cols) {
  return AttentionMask{rows, cols, std::vector<std::uint8_t>(rows * cols, 0)};
}

AttentionMask AttentionMask::causal(std::size_t n) {
  auto m = none(n, n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = r + 1; c < n; ++c) m.blocked[r * n + c] = 1;
  return m;
}

AttentionMask AttentionMask::key_padding(std::size_t rows, std::size_t cols,
                                         std::size_t valid_keys) {
  auto m = none(rows, cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = valid_keys; c < cols; ++c) m.blocked[r * cols + c] = 1;
  return m;
}

AttentionMask AttentionMask::merged(const AttentionMask& other) const {
  if (rows != other.rows || cols != other.cols) {
    throw DimensionError("mask merge: shape mismatch");
  }
  AttentionMask m = *this;
  for (std::size_t i = 0; i < blocked.size(); ++i) m.blocked[i] |= other.blocked[i];
  return m;
}

// ---- Operations -----------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  require_rank2("matmul", a);
  require_rank2("matmul", b);
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree for " + shape_to_string(a.shape()) +
                         " x " + shape_to_string(b.shape()));
  }
  const auto A = a.data();
  const auto B = b.data();
  std::vector<T> out(m * n, T(0));
  for (std::size_t i = 0; i < m; ++i) {
    T* row = out.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const T av = A[i * k + p];
      const T* brow = B.data() + p * n;
      for (std::size_t j = 0; j < n; ++j) row[j] += av * brow[j];
    }
  }
  auto na = a.node(), nb = b.node();
  return emit<T>("matmul", {m, n}, std::move(out), {na, nb},
                 [pa = na.get(), pb = nb.get(), m, k, n](const std::vector<T>& g, const std::vector<T>&) {
                   if (auto* ga = grad_sink(pa)) {
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         T acc = T(0);
                         for (std::size_t j = 0; j < n; ++j)
                           acc += g[i * n + j] * pb->data[p * n + j];
                         (*ga)[i * k + p] += acc;
                       }
                   }
                   if (auto* gb = grad_sink(pb)) {
                     for (std::size_t i = 0; i < m; ++i)
                       for (std::size_t p = 0; p < k; ++p) {
                         const T av = pa->data[i * k + p];
                         for (std::size_t j = 0; j < n; ++j)
                           (*gb)[p * n + j] += av * g[i * n + j];
                       }
                   }
                 });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  require_rank2("transpose", x);
  const std::size_t r = x.rows(), c = x.cols();
  const auto X = x.data();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[j * r + i] = X[i * c + j];
  auto nx = x.node();
  return emit<T>("transpose", {c, r}, std::move(out), {nx},
                 [px = nx.get(), r, c](const std::vector<T>& g, const std::vector<T>&) {
                   if (auto* gx = grad_sink(px))
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j) (*gx)[i * c + j] += g[j * r + i];
                 });
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("add", a, b);
  const auto A = a.data();
  const auto B = b.data();
  std::vector<T> out(A.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] + B[i];
  auto na = a.node(), nb = b.node();
  return emit<T>("add", a.shape(), std::move(out), {na, nb},
                 [pa = na.get(), pb = nb.get()](const std::vector<T>& g, const std::vector<T>&) {
                   if (auto* ga = grad_sink(pa))
                     for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i];
                   if (auto* gb = grad_sink(pb))
                     for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i];
                 });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require_same_shape("mul", a, b);
  const auto A = a.data();
  const auto B = b.data();
  std::vector<T> out(A.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = A[i] * B[i];
  auto na = a.node(), nb = b.node();
  return emit<T>("mul", a.shape(), std::move(out), {na, nb},
                 [pa = na.get(), pb = nb.get()](const std::vector<T>& g, const std::vector<T>&) {
                   if (auto* ga = grad_sink(pa))
                     for (std::size_t i = 0; i < g.size(); ++i) (*ga)[i] += g[i] * pb->data[i];
                   if (auto* gb = grad_sink(pb))
                     for (std::size_t i = 0; i < g.size(); ++i) (*gb)[i] += g[i] * pa->data[i];
                 });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  const auto X = x.data();
  std::vector<T> out(X.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] * factor;
  auto nx = x.node();
  return emit<T>("scale", x.shape(), std::move(out), {nx},
                 [px = nx.get(), factor](const std::vector<T>& g, const std::vector<T>&) {
                   if (auto* gx = grad_sink(px))
                     for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * factor;
                 });
}

template <typename T>
Tensor<T> add_row_vector(const Tensor<T>& x, const Tensor<T>& b) {
  require_rank2("add_row_vector", x);
  const std::size_t r = x.rows(), c = x.cols();
  if (b.numel() != c) {
    throw DimensionError("add_row_vector: " + shape_to_string(x.shape()) + " + " +
                         shape_to_string(b.shape()));
  }
  const auto X = x.data();
  const auto B = b.data();
  std::vector<T> out(r * c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] = X[i * c + j] + B[j];
  auto nx = x.node(), nb = b.node();
  return emit<T>("add_row_vector", x.shape(), std::move(out), {nx, nb},
                 [px = nx.get(), pb = nb.get(), r, c](const std::vector<T>& g, const std::vector<T>&) {
                   if (auto* gx = grad_sink(px))
                     for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                   if (auto* gb = grad_sink(pb))
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < c; ++j) (*gb)[j] += g[i * c + j];
                 });
}

template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s) {
  if (s.numel() != 1) {
    throw DimensionError("scale_by: factor must be scalar, got " + shape_to_string(s.shape()));
  }
  const T factor = s.data()[0];
  const auto X = x.data();
  std::vector<T> out(X.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = factor * X[i];
  auto nx = x.node(), ns = s.node();
  return emit<T>("scale_by", x.shape(), std::move(out), {nx, ns},
                 [px = nx.get(), ps = ns.get()](const std::vector<T>& g, const std::vector<T>&) {
                   if (auto* gx = grad_sink(px)) {
                     const T f = ps->data[0];
                     for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i] * f;
                   }
                   if (auto* gs = grad_sink(ps)) {
                     T acc = T(0);
                     for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * px->data[i];
                     (*gs)[0] += acc;
                   }
                 });
}

template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::size_t index) {
  if (x.rank() != 1 || index >= x.numel()) {
    throw DimensionError("pick: index " + std::to_string(index) + " outside " +
                         shape_to_string(x.shape()));
  }
  auto nx = x.node();
  return emit<T>("pick", {1}, {x.data()[index]}, {nx},
                 [px = nx.get(), index](const std::vector<T>& g, const std::vector<T>&) {
                   if (auto* gx = grad_sink(px)) (*gx)[index] += g[0];
                 });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  const auto X = x.data();
  std::vector<T> out(X.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = X[i] > T(0) ? X[i] : T(0);
  auto nx = x.node();
  return emit<T>("relu", x.shape(), std::move(out), {nx},
                 [px = nx.get()](const std::vector<T>& g, const std::vector<T>&) {
                   if (auto* gx = grad_sink(px))
                     for (std::size_t i = 0; i < g.size(); ++i)
                       if (px->data[i] > T(0)) (*gx)[i] += g[i];
                 });
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, const AttentionMask* mask) {
  require_rank2("softmax_rows", x);
  const std::size_t r = x.rows(), c = x.cols();
  if (mask && (mask->rows != r || mask->cols != c)) {
    throw DimensionError("softmax_rows: mask shape (" + std::to_string(mask->rows) + "x" +
                         std::to_string(mask->cols) + ") vs logits " +
                         shape_to_string(x.shape()));
  }
  const auto X = x.data();
  std::vector<T> out(r * c, T(0));
  for (std::size_t i = 0; i < r; ++i) {
    T row_max = -std::numeric_limits<T>::infinity();
    for (std::size_t j = 0; j < c; ++j)
      if (!mask || !mask->is_blocked(i, j)) row_max = std::max(row_max, X[i * c + j]);
    if (row_max == -std::numeric_limits<T>::infinity()) {
      throw std::domain_error("softmax_rows: row " + std::to_string(i) + " is fully masked");
    }
    T total = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      if (mask && mask->is_blocked(i, j)) continue;
      const T e = std::exp(X[i * c + j] - row_max);
      out[i * c + j] = e;
      total += e;
    }
    for (std::size_t j = 0; j < c; ++j) out[i * c + j] /= total;
  }
  auto nx = x.node();
  return emit<T>("softmax_rows", x.shape(), std::move(out), {nx},
                 [px = nx.get(), r, c](const std::vector<T>& g, const std::vector<T>& y) {
                   auto* gx = grad_sink(px);
                   if (!gx) return;
                   for (std::size_t i = 0; i < r; ++i) {
                     T dot = T(0);
                     for (std::size_t j = 0; j < c; ++j) dot += g[i * c + j] * y[i * c + j];
                     for (std::size_t j = 0; j < c; ++j)
                       (*gx)[i * c + j] += y[i * c + j] * (g[i * c + j] - dot);
                   }
                 });
}

template <typename T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                          double epsilon) {
  require_rank2("layer_norm_rows", x);
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.numel() != c || shift.numel() != c) {
    throw DimensionError("layer_norm_rows: gain/shift " + shape_to_string(gain.shape()) + "/" +
                         shape_to_string(shift.shape()) + " vs input " +
                         shape_to_string(x.shape()));
  }
  if (!(epsilon > 0.0)) throw std::invalid_argument("layer_norm_rows: epsilon must be positive");
  const auto X = x.data();
  const auto G = gain.data();
  const auto S = shift.data();
  std::vector<T> out(r * c);
  std::vector<T> normalized(r * c);
  std::vector<T> inv_std(r);
  for (std::size_t i = 0; i < r; ++i) {
    T mu = T(0);
    for (std::size_t j = 0; j < c; ++j) mu += X[i * c + j];
    mu /= T(c);
    T var = T(0);
    for (std::size_t j = 0; j < c; ++j) {
      const T d = X[i * c + j] - mu;
      var += d * d;
    }
    var /= T(c);
    inv_std[i] = T(1) / std::sqrt(var + T(epsilon));
    for (std::size_t j = 0; j < c; ++j) {
      const T xh = (X[i * c + j] - mu) * inv_std[i];
      normalized[i * c + j] = xh;
      out[i * c + j] = G[j] * xh + S[j];
    }
  }
  auto nx = x.node(), ng = gain.node(), ns = shift.node();
  return emit<T>(
      "layer_norm_rows", x.shape(), std::move(out), {nx, ng, ns},
      [px = nx.get(), pg = ng.get(), ps = ns.get(), r, c, normalized = std::move(normalized),
       inv_std = std::move(inv_std)](const std::vector<T>& g, const std::vector<T>&) {
        if (auto* gs = grad_sink(ps))
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*gs)[j] += g[i * c + j];
        if (auto* gg = grad_sink(pg))
          for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) (*gg)[j] += g[i * c + j] * normalized[i * c + j];
        if (auto* gx = grad_sink(px)) {
          for (std::size_t i = 0; i < r; ++i) {
            T mean_g = T(0), mean_gx = T(0);
            for (std::size_t j = 0; j < c; ++j) {
              const T gh = g[i * c + j] * pg->data[j];
              mean_g += gh;
              mean_gx += gh * normalized[i * c + j];
            }
            mean_g /= T(c);
            mean_gx /= T(c);
            for (std::size_t j = 0; j < c; ++j) {
              const T gh = g[i * c + j] * pg->data[j];
              (*gx)[i * c + j] +=
                  inv_std[i] * (gh - mean_g - normalized[i * c + j] * mean_gx);
            }
          }
        }
      });
}

template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t r = parts[0].rows();
  std::size_t total = 0;
  std::vector<std::size_t> offsets;
  std::vector<NodePtr<T>> nodes;
  for (const auto& p : parts) {
    require_rank2("concat_cols", p);
    if (p.rows() != r) {
      throw DimensionError("concat_cols: row mismatch " + shape_to_string(parts[0].shape()) +
                           " vs " + shape_to_string(p.shape()));
    }
    offsets.push_back(total);
    total += p.cols();
    nodes.push_back(p.node());
  }
  std::vector<T> out(r * total);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto P = parts[k].data();
    const std::size_t w = parts[k].cols();
    for (std::size_t i = 0; i < r; ++i)
      std::copy_n(P.data() + i * w, w, out.data() + i * total + offsets[k]);
  }
  std::vector<detail::TensorNode<T>*> raw;
  for (auto& n : nodes) raw.push_back(n.get());
  return emit<T>("concat_cols", {r, total}, std::move(out), std::move(nodes),
                 [raw, offsets, r, total](const std::vector<T>& g, const std::vector<T>&) {
                   for (std::size_t k = 0; k < raw.size(); ++k) {
                     auto* gk = grad_sink(raw[k]);
                     if (!gk) continue;
                     const std::size_t w = raw[k]->shape.back();
                     for (std::size_t i = 0; i < r; ++i)
                       for (std::size_t j = 0; j < w; ++j)
                         (*gk)[i * w + j] += g[i * total + offsets[k] + j];
                   }
                 });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids) {
  require_rank2("gather_rows", table);
  if (ids.empty()) throw DimensionError("gather_rows: empty id list");
  const std::size_t v = table.rows(), d = table.cols();
  const auto W = table.data();
  std::vector<T> out(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v) {
      throw std::out_of_range("gather_rows: id " + std::to_string(ids[i]) +
                              " outside table of " + std::to_string(v) + " rows");
    }
    std::copy_n(W.data() + static_cast<std::size_t>(ids[i]) * d, d, out.data() + i * d);
  }
  auto nt = table.node();
  return emit<T>("gather_rows", {ids.size(), d}, std::move(out), {nt},
                 [pt = nt.get(), idv = std::vector<int>(ids.begin(), ids.end()), d](
                     const std::vector<T>& g, const std::vector<T>&) {
                   if (auto* gt = grad_sink(pt))
                     for (std::size_t i = 0; i < idv.size(); ++i)
                       for (std::size_t j = 0; j < d; ++j)
                         (*gt)[static_cast<std::size_t>(idv[i]) * d + j] += g[i * d + j];
                 });
}

template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, std::size_t count) {
  require_rank2("take_rows", x);
  if (count == 0 || count > x.rows()) {
    throw DimensionError("take_rows: " + std::to_string(count) + " rows from " +
                         shape_to_string(x.shape()));
  }
  const std::size_t c = x.cols();
  const auto X = x.data();
  std::vector<T> out(X.begin(), X.begin() + static_cast<std::ptrdiff_t>(count * c));
  auto nx = x.node();
  return emit<T>("take_rows", {count, c}, std::move(out), {nx},
                 [px = nx.get()](const std::vector<T>& g, const std::vector<T>&) {
                   if (auto* gx = grad_sink(px))
                     for (std::size_t i = 0; i < g.size(); ++i) (*gx)[i] += g[i];
                 });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  T total = T(0);
  for (T v : x.data()) total += v;
  auto nx = x.node();
  return emit<T>("sum", {1}, {total}, {nx},
                 [px = nx.get()](const std::vector<T>& g, const std::vector<T>&) {
                   if (auto* gx = grad_sink(px))
                     for (auto& v : *gx) v += g[0];
                 });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(x.numel()));
}

template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, std::span<const int> targets,
                            int ignore_id) {
  require_rank2("cross_entropy_sum", logits);
  const std::size_t m = logits.rows(), v = logits.cols();
  if (targets.size() != m) {
    throw DimensionError("cross_entropy_sum: " + std::to_string(targets.size()) +
                         " targets for logits " + shape_to_string(logits.shape()));
  }
  const auto L = logits.data();
  std::vector<T> probs(m * v, T(0));
  T total = T(0);
  for (std::size_t i = 0; i < m; ++i) {
    if (targets[i] == ignore_id) continue;
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v) {
      throw std::out_of_range("cross_entropy_sum: target id " + std::to_string(targets[i]) +
                              " outside vocabulary of " + std::to_string(v));
    }
    T row_max = L[i * v];
    for (std::size_t j = 1; j < v; ++j) row_max = std::max(row_max, L[i * v + j]);
    T z = T(0);
    for (std::size_t j = 0; j < v; ++j) {
      probs[i * v + j] = std::exp(L[i * v + j] - row_max);
      z += probs[i * v + j];
    }
    for (std::size_t j = 0; j < v; ++j) probs[i * v + j] /= z;
    total += std::log(z) + row_max - L[i * v + static_cast<std::size_t>(targets[i])];
  }
  auto nl = logits.node();
  return emit<T>("cross_entropy_sum", {1}, {total}, {nl},
                 [pl = nl.get(), tv = std::vector<int>(targets.begin(), targets.end()),
                  probs = std::move(probs), v, ignore_id](const std::vector<T>& g,
                                                          const std::vector<T>&) {
                   auto* gl = grad_sink(pl);
                   if (!gl) return;
                   for (std::size_t i = 0; i < tv.size(); ++i) {
                     if (tv[i] == ignore_id) continue;
                     for (std::size_t j = 0; j < v; ++j) (*gl)[i * v + j] += g[0] * probs[i * v + j];
                     (*gl)[i * v + static_cast<std::size_t>(tv[i])] -= g[0];
                   }
                 });
}

double finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         const Tensor<double>& x, double step) {
  std::vector<double> analytic(x.numel(), 0.0);
  {
    GradientTape<double> tape;
    auto leaf = x.clone(true);
    auto loss = f(leaf);
    tape.backward(loss);
    if (leaf.has_grad()) std::copy(leaf.grad().begin(), leaf.grad().end(), analytic.begin());
  }
  double worst = 0.0;
  for (std::size_t i = 0; i < x.numel(); ++i) {
    auto plus = x.clone();
    auto minus = x.clone();
    plus.mutable_data()[i] += step;
    minus.mutable_data()[i] -= step;
    const double numeric = (f(plus).item() - f(minus).item()) / (2.0 * step);
    const double err =
        std::abs(analytic[i] - numeric) / (std::abs(analytic[i]) + std::abs(numeric) + 1e-12);
    worst = std::max(worst, err);
  }
  return worst;
}

#define KTRANS_INSTANTIATE_OPS(T)                                                         \
  template class Tensor<T>;                                                               \
  template class GradientTape<T>;                                                         \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                          \
  template Tensor<T> transpose(const Tensor<T>&);                                         \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> scale(const Tensor<T>&, T);                                          \
  template Tensor<T> add_row_vector(const Tensor<T>&, const Tensor<T>&);                  \
  template Tensor<T> scale_by(const Tensor<T>&, const Tensor<T>&);                        \
  template Tensor<T> pick(const Tensor<T>&, std::size_t);                                 \
  template Tensor<T> relu(const Tensor<T>&);                                              \
  template Tensor<T> softmax_rows(const Tensor<T>&, const AttentionMask*);                \
  template Tensor<T> layer_norm_rows(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, \
                                     double);                                             \
  template Tensor<T> concat_cols(std::span<const Tensor<T>>);                             \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const int>);                 \
  template Tensor<T> take_rows(const Tensor<T>&, std::size_t);                            \
  template Tensor<T> sum(const Tensor<T>&);                                               \
  template Tensor<T> mean(const Tensor<T>&);                                              \
  template Tensor<T> cross_entropy_sum(const Tensor<T>&, std::span<const int>, int);

KTRANS_INSTANTIATE_OPS(float)
KTRANS_INSTANTIATE_OPS(double)

#undef KTRANS_INSTANTIATE_OPS

}  // namespace ktrans
