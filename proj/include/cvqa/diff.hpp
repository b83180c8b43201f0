#pragma once

// Tape-based reverse-mode differentiation over dense double arrays.
//
// A Tape records every operation applied to its Vars together with a backward
// closure. Tape::gradient() replays the closures in reverse order. Node storage
// is a deque, so references returned by Var::value() stay valid while more
// nodes are recorded.

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <initializer_list>
#include <new>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace cvqa::ad {

using Shape = std::vector<std::size_t>;

// 64-byte aligned storage. Vectorized reductions peel a scalar head up to the
// first aligned element, so the summation order (and the last bits of the
// result) would otherwise depend on where malloc placed the buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t kAlign{64};

  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) noexcept {}

  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), kAlign)); }
  void deallocate(T* p, std::size_t n) noexcept { ::operator delete(p, n * sizeof(T), kAlign); }

  template <class U>
  bool operator==(const AlignedAllocator<U>&) const noexcept {
    return true;
  }
};

using Buffer = std::vector<double, AlignedAllocator<double>>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);

class Array {
 public:
  Array() = default;
  explicit Array(Shape shape, double fill = 0.0);
  Array(Shape shape, std::vector<double> values);
  Array(Shape shape, Buffer values);
  Array(Shape shape, std::initializer_list<double> values) : Array(std::move(shape), Buffer(values)) {}

  static Array scalar(double v) { return Array(Shape{}, std::vector<double>{v}); }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const { return data_.size(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  // Value of a single-element array.
  double item() const;
  Array reshaped(Shape shape) const;

  bool operator==(const Array&) const = default;

 private:
  Shape shape_;
  Buffer data_;
};

struct Parameter {
  std::string name;
  Array value;
  bool requires_grad = true;
};

enum class Mode { train, eval };

class Tape;

class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const;
  std::size_t id() const { return id_; }
  const Array& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Input that never receives a gradient.
  Var constant(Array value);
  // Differentiable input (parameters, or points under a gradient check).
  Var leaf(Array value, bool requires_grad = true);

  // Reverse pass from a single-element `output`. Returns d output / d w for
  // every entry of `wrt`, in order. May be called repeatedly.
  std::vector<Array> gradient(Var output, std::span<const Var> wrt);

  std::size_t size() const { return nodes_.size(); }

  // --- used by op implementations ---
  Var record(Array value, std::span<const std::size_t> parents, Backward backward);
  const Array& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  // Accumulator for node `id`, zero-initialized on first touch.
  Array& grad(std::size_t id);
  bool has_grad(std::size_t id) const { return nodes_[id].grad.size() != 0; }

 private:
  struct Node {
    Array value;
    Array grad;
    bool needs_grad = false;
    Backward backward;
  };

  void check_owned(const Var& v, const char* what) const;

  std::deque<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Operations. Every op throws ShapeError naming the offending shapes.

Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
Var shift(Var a, double s);
// Elementwise product with a fixed array of the same shape.
Var mul_const(Var a, const Array& c);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

// (M, K) x (K, N) -> (M, N)
Var matmul(Var a, Var b);
// x: (N, M, ...) plus b: (M), broadcast over axis 0 and trailing axes.
Var add_bias(Var x, Var b);
// x: (N, M, ...) plus q: (N, M), broadcast over trailing axes.
Var add_per_channel(Var x, Var q);

// x: (N, C, H, W), w: (F, C, k, k), b: (F) -> (N, F, OH, OW)
Var conv2d(Var x, Var w, Var b, std::size_t stride = 1, std::size_t padding = 0);
// Non-overlapping window of `size`; trailing rows/columns that do not fill a
// window are dropped.
Var max_pool2d(Var x, std::size_t size);

Var relu(Var x);
// max(x, 0); subgradient at exactly 0 is 0.
inline Var hinge(Var x) { return relu(x); }
Var tanh(Var x);
Var sigmoid(Var x);
// log(max(x, floor)); no gradient flows where the floor is active.
Var log(Var x, double floor = 0.0);
Var softmax(Var x, std::size_t axis);

// table: (V, E); ids index rows -> (ids.size(), E)
Var embedding(Var table, std::span<const int> ids);
Var concat(std::span<const Var> parts, std::size_t axis);
Var reshape(Var x, Shape shape);

Var sum(Var x);
Var mean(Var x);

// Inverted dropout; identity in eval mode or for rate 0.
Var dropout(Var x, double rate, Mode mode, std::mt19937_64& rng);

// features: (N, C, S...), weights: (N, G, S...) with equal spatial size.
// Returns (N, G*C): for each glimpse g the weighted spatial sum of features.
Var spatial_weighted_sum(Var features, Var weights);

// x: (N, K) -> (N): x[n, index[n]]
Var pick(Var x, std::span<const int> index);
// Rows of x along axis 0.
Var gather_rows(Var x, std::span<const std::size_t> rows);
// v: (D) -> (n, D)
Var broadcast_rows(Var v, std::size_t n);
// Per row n: take_a[n] ? a[n] : b[n]. a and b share shape (N, ...).
Var select_rows(std::span<const std::uint8_t> take_a, Var a, Var b);
// Same value, no gradient.
Var detach(Var x);

// ---------------------------------------------------------------------------
// Central finite-difference verification.

struct GradCheckReport {
  double max_rel_error = 0.0;
  bool passed = false;
  std::size_t worst_coordinate = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool non_finite = false;
};

// Returns f(x); when `grad` is non-null it also receives the analytic gradient.
using CheckedFunction = std::function<double(std::span<const double> x, std::vector<double>* grad)>;

GradCheckReport finite_diff_check(const CheckedFunction& f, std::span<const double> point, double eps,
                                  double tolerance);

}  // namespace cvqa::ad
