#pragma once

// Dense row-major tensors with a reverse-mode gradient tape.
//
// A Tensor is a cheap handle onto a shared node. Operations executed while a
// GradientTape is alive on the current thread are recorded onto it whenever
// at least one input requires a gradient; GradientTape::backward replays the
// recorded backward rules in reverse order.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace ktrans {

using Shape = std::vector<std::size_t>;

std::string shape_to_string(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TapeError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// NaN/Inf scanning of every op output. On by default in debug builds.
void set_finite_checks(bool enabled);
bool finite_checks_enabled();

template <typename T>
class GradientTape;

namespace detail {

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  const GradientTape<T>* producer = nullptr;  // null for leaves
};

}  // namespace detail

template <typename T>
class Tensor {
 public:
  using Node = detail::TensorNode<T>;

  Tensor() = default;
  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, T value);
  static Tensor scalar(T value, bool requires_grad = false);
  static Tensor matrix(std::initializer_list<std::initializer_list<T>> rows,
                       bool requires_grad = false);
  static Tensor vector(std::initializer_list<T> values, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const T> data() const { return node_->data; }
  // Direct writes bypass the tape; reserved for initialization and optimizers.
  std::span<T> mutable_data() { return node_->data; }

  T item() const;
  T at(std::size_t i) const { return node_->data.at(i); }
  T at(std::size_t r, std::size_t c) const;

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool value) { node_->requires_grad = value; }
  bool is_leaf() const { return node_->producer == nullptr; }

  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad.clear(); }

  // Deep copy of values; the copy is a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

  std::shared_ptr<Node> node() const { return node_; }
  static Tensor from_node(std::shared_ptr<Node> node);

 private:
  std::shared_ptr<Node> node_;
};

template <typename T>
class GradientTape {
 public:
  using Node = detail::TensorNode<T>;

  // Becomes the active tape of the constructing thread until destroyed.
  GradientTape();
  ~GradientTape();
  GradientTape(const GradientTape&) = delete;
  GradientTape& operator=(const GradientTape&) = delete;

  static GradientTape* active();

  void record(std::vector<std::shared_ptr<Node>> inputs, std::shared_ptr<Node> output,
              std::function<void()> backward_rule);

  // Populates grads of every requires_grad tensor reachable from `loss`.
  void backward(const Tensor<T>& loss);
  void reset();

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

 private:
  struct Entry {
    std::vector<std::shared_ptr<Node>> inputs;
    std::shared_ptr<Node> output;
    std::function<void()> backward_rule;
  };
  std::vector<Entry> entries_;
  bool consumed_ = false;
  GradientTape* previous_ = nullptr;
};

// Boolean matrix of blocked (query, key) positions; blocked logits are -inf.
struct AttentionMask {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint8_t> blocked;

  static AttentionMask none(std::size_t rows, std::size_t cols);
  static AttentionMask causal(std::size_t n);
  // Blocks every key column at or beyond `valid_keys`.
  static AttentionMask key_padding(std::size_t rows, std::size_t cols, std::size_t valid_keys);

  bool is_blocked(std::size_t r, std::size_t c) const { return blocked[r * cols + c] != 0; }
  AttentionMask merged(const AttentionMask& other) const;
};

// ---- Operations -----------------------------------------------------------

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> transpose(const Tensor<T>& x);
template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor);
// x[n, d] + b[d] on every row.
template <typename T>
Tensor<T> add_row_vector(const Tensor<T>& x, const Tensor<T>& b);
// s[1] * x, gradient flows into both.
template <typename T>
Tensor<T> scale_by(const Tensor<T>& x, const Tensor<T>& s);
// Element `index` of a rank-1 tensor as a shape-{1} tensor.
template <typename T>
Tensor<T> pick(const Tensor<T>& x, std::size_t index);
template <typename T>
Tensor<T> relu(const Tensor<T>& x);
template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& x, const AttentionMask* mask = nullptr);
template <typename T>
Tensor<T> layer_norm_rows(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& shift,
                          double epsilon);
template <typename T>
Tensor<T> concat_cols(std::span<const Tensor<T>> parts);
// Gathers rows of `table` (an embedding lookup).
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const int> ids);
// Leading `count` rows of a matrix.
template <typename T>
Tensor<T> take_rows(const Tensor<T>& x, std::size_t count);
template <typename T>
Tensor<T> sum(const Tensor<T>& x);
template <typename T>
Tensor<T> mean(const Tensor<T>& x);
// Sum over rows r with targets[r] != ignore_id of -log softmax(logits[r])[targets[r]].
template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, std::span<const int> targets,
                            int ignore_id);

// Max over elements of |analytic - numeric| / (|analytic| + |numeric| + 1e-12),
// with the numeric gradient from central differences of `f` around `x`.
double finite_diff_check(const std::function<Tensor<double>(const Tensor<double>&)>& f,
                         const Tensor<double>& x, double step = 1e-5);

}  // namespace ktrans
