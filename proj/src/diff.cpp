#include "cvqa/diff.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "cvqa/errors.hpp"

namespace cvqa::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const std::string& why) {
  throw ShapeError(std::string(op) + ": shape " + to_string(a) + " " + why);
}

Tape& same_tape(const char* op, const Var& a, const Var& b) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw UsageError(std::string(op) + ": operands belong to different tapes");
  }
  return a.tape();
}

std::size_t trailing(const Shape& s, std::size_t from) {
  std::size_t n = 1;
  for (std::size_t i = from; i < s.size(); ++i) n *= s[i];
  return n;
}

template <typename Fwd, typename Deriv>
Var unary(Var x, Fwd fwd, Deriv deriv) {
  Tape& t = x.tape();
  const Array& xv = x.value();
  Array out(xv.shape());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const std::size_t pid = x.id();
  const std::size_t parents[] = {pid};
  return t.record(std::move(out), parents, [pid, deriv](Tape& tape, std::size_t self) {
    if (!tape.needs_grad(pid)) return;
    const Array& g = tape.grad(self);
    const Array& xin = tape.value(pid);
    const Array& y = tape.value(self);
    Array& gx = tape.grad(pid);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xin[i], y[i]);
  });
}

}  // namespace

std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? ", " : "") << shape[i];
  os << ')';
  return os.str();
}

Array::Array(Shape shape, double fill) : shape_(std::move(shape)), data_(numel(shape_), fill) {}

Array::Array(Shape shape, std::vector<double> values)
    : Array(std::move(shape), Buffer(values.begin(), values.end())) {}

Array::Array(Shape shape, Buffer values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != numel(shape_)) {
    throw ShapeError("Array: " + std::to_string(data_.size()) + " values do not fill shape " + to_string(shape_));
  }
}

double Array::item() const {
  if (data_.size() != 1) shape_error("item", shape_, "is not a single element");
  return data_[0];
}

Array Array::reshaped(Shape shape) const {
  if (numel(shape) != data_.size()) shape_error("reshape", shape_, shape);
  return Array(std::move(shape), data_);
}

Tape& Var::tape() const {
  if (tape_ == nullptr) throw UsageError("Var: not attached to a tape");
  return *tape_;
}

const Array& Var::value() const { return tape().value(id_); }

// ---------------------------------------------------------------------------

Var Tape::constant(Array value) {
  nodes_.push_back(Node{std::move(value), Array(), false, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::leaf(Array value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), Array(), requires_grad, nullptr});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Array value, std::span<const std::size_t> parents, Backward backward) {
  bool needs = false;
  for (std::size_t p : parents) needs = needs || nodes_[p].needs_grad;
  nodes_.push_back(Node{std::move(value), Array(), needs, needs ? std::move(backward) : Backward{}});
  return Var(this, nodes_.size() - 1);
}

Array& Tape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.size() == 0 && n.value.size() != 0) n.grad = Array(n.value.shape());
  return n.grad;
}

void Tape::check_owned(const Var& v, const char* what) const {
  if (!v.valid() || v.tape_ != this || v.id_ >= nodes_.size()) {
    throw UsageError(std::string("gradient: ") + what + " is not on the recorded graph");
  }
}

std::vector<Array> Tape::gradient(Var output, std::span<const Var> wrt) {
  check_owned(output, "output");
  for (const Var& w : wrt) {
    check_owned(w, "requested value");
    if (!nodes_[w.id_].needs_grad) throw UsageError("gradient: requested value is a constant");
  }
  if (nodes_[output.id_].value.size() != 1) {
    shape_error("gradient", nodes_[output.id_].value.shape(), "is not a scalar output");
  }
  for (Node& n : nodes_) n.grad = Array();

  std::vector<Array> result;
  if (nodes_[output.id_].needs_grad) {
    grad(output.id_)[0] = 1.0;
    for (std::size_t i = output.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.backward && n.grad.size() != 0) n.backward(*this, i);
    }
  }
  result.reserve(wrt.size());
  for (const Var& w : wrt) {
    const Node& n = nodes_[w.id_];
    result.push_back(n.grad.size() != 0 ? n.grad : Array(n.value.shape()));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic

Var add(Var a, Var b) {
  Tape& t = same_tape("add", a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.shape() != bv.shape()) shape_error("add", av.shape(), bv.shape());
  Array out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t parents[] = {ia, ib};
  return t.record(std::move(out), parents, [ia, ib](Tape& tape, std::size_t self) {
    const Array& g = tape.grad(self);
    for (std::size_t p : {ia, ib}) {
      if (!tape.needs_grad(p)) continue;
      Array& gp = tape.grad(p);
      for (std::size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
    }
  });
}

Var sub(Var a, Var b) {
  Tape& t = same_tape("sub", a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.shape() != bv.shape()) shape_error("sub", av.shape(), bv.shape());
  Array out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t parents[] = {ia, ib};
  return t.record(std::move(out), parents, [ia, ib](Tape& tape, std::size_t self) {
    const Array& g = tape.grad(self);
    if (tape.needs_grad(ia)) {
      Array& ga = tape.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (tape.needs_grad(ib)) {
      Array& gb = tape.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& t = same_tape("mul", a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.shape() != bv.shape()) shape_error("mul", av.shape(), bv.shape());
  Array out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t parents[] = {ia, ib};
  return t.record(std::move(out), parents, [ia, ib](Tape& tape, std::size_t self) {
    const Array& g = tape.grad(self);
    const Array& av = tape.value(ia);
    const Array& bv = tape.value(ib);
    if (tape.needs_grad(ia)) {
      Array& ga = tape.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (tape.needs_grad(ib)) {
      Array& gb = tape.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

Var scale(Var a, double s) {
  return unary(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var shift(Var a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var mul_const(Var a, const Array& c) {
  Tape& t = a.tape();
  const Array& av = a.value();
  if (av.shape() != c.shape()) shape_error("mul_const", av.shape(), c.shape());
  Array out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c[i];
  const std::size_t ia = a.id();
  const std::size_t parents[] = {ia};
  return t.record(std::move(out), parents, [ia, c](Tape& tape, std::size_t self) {
    const Array& g = tape.grad(self);
    Array& ga = tape.grad(ia);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * c[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Var matmul(Var a, Var b) {
  Tape& t = same_tape("matmul", a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) shape_error("matmul", av.shape(), bv.shape());
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Array out(Shape{m, n});
  MapMat(out.data(), m, n).noalias() = ConstMapMat(av.data(), m, k) * ConstMapMat(bv.data(), k, n);
  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t parents[] = {ia, ib};
  return t.record(std::move(out), parents, [ia, ib, m, k, n](Tape& tape, std::size_t self) {
    ConstMapMat g(tape.grad(self).data(), m, n);
    if (tape.needs_grad(ia)) {
      MapMat(tape.grad(ia).data(), m, k).noalias() += g * ConstMapMat(tape.value(ib).data(), k, n).transpose();
    }
    if (tape.needs_grad(ib)) {
      MapMat(tape.grad(ib).data(), k, n).noalias() += ConstMapMat(tape.value(ia).data(), m, k).transpose() * g;
    }
  });
}

Var add_bias(Var x, Var b) {
  Tape& t = same_tape("add_bias", x, b);
  const Array& xv = x.value();
  const Array& bv = b.value();
  if (xv.rank() < 2 || bv.rank() != 1 || bv.dim(0) != xv.dim(1)) shape_error("add_bias", xv.shape(), bv.shape());
  const std::size_t n = xv.dim(0), m = xv.dim(1), inner = trailing(xv.shape(), 2);
  Array out = xv;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      double* row = out.data() + (i * m + j) * inner;
      for (std::size_t s = 0; s < inner; ++s) row[s] += bv[j];
    }
  const std::size_t ix = x.id(), ib = b.id();
  const std::size_t parents[] = {ix, ib};
  return t.record(std::move(out), parents, [ix, ib, n, m, inner](Tape& tape, std::size_t self) {
    const Array& g = tape.grad(self);
    if (tape.needs_grad(ix)) {
      Array& gx = tape.grad(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tape.needs_grad(ib)) {
      Array& gb = tape.grad(ib);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
          const double* row = g.data() + (i * m + j) * inner;
          double acc = 0.0;
          for (std::size_t s = 0; s < inner; ++s) acc += row[s];
          gb[j] += acc;
        }
    }
  });
}

Var add_per_channel(Var x, Var q) {
  Tape& t = same_tape("add_per_channel", x, q);
  const Array& xv = x.value();
  const Array& qv = q.value();
  if (xv.rank() < 2 || qv.rank() != 2 || qv.dim(0) != xv.dim(0) || qv.dim(1) != xv.dim(1)) {
    shape_error("add_per_channel", xv.shape(), qv.shape());
  }
  const std::size_t rows = xv.dim(0) * xv.dim(1), inner = trailing(xv.shape(), 2);
  Array out = xv;
  for (std::size_t r = 0; r < rows; ++r) {
    double* p = out.data() + r * inner;
    for (std::size_t s = 0; s < inner; ++s) p[s] += qv[r];
  }
  const std::size_t ix = x.id(), iq = q.id();
  const std::size_t parents[] = {ix, iq};
  return t.record(std::move(out), parents, [ix, iq, rows, inner](Tape& tape, std::size_t self) {
    const Array& g = tape.grad(self);
    if (tape.needs_grad(ix)) {
      Array& gx = tape.grad(ix);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (tape.needs_grad(iq)) {
      Array& gq = tape.grad(iq);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* p = g.data() + r * inner;
        double acc = 0.0;
        for (std::size_t s = 0; s < inner; ++s) acc += p[s];
        gq[r] += acc;
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution and pooling

namespace {

struct ConvGeometry {
  std::size_t channels, height, width, filters, kernel, stride, padding, out_h, out_w;
  std::size_t patch() const { return channels * kernel * kernel; }
  std::size_t out_area() const { return out_h * out_w; }
};

// Output columns [lo, hi) whose input column ox * stride + kx - padding lies
// inside the image.
std::pair<std::size_t, std::size_t> valid_columns(const ConvGeometry& g, std::size_t kx) {
  const long p = static_cast<long>(g.padding), k = static_cast<long>(kx), s = static_cast<long>(g.stride);
  const long w = static_cast<long>(g.width), ow = static_cast<long>(g.out_w);
  long lo = p > k ? (p - k + s - 1) / s : 0;
  long hi = (w - 1 + p - k) >= 0 ? (w - 1 + p - k) / s + 1 : 0;
  lo = std::min(lo, ow);
  hi = std::clamp(hi, lo, ow);
  return {static_cast<std::size_t>(lo), static_cast<std::size_t>(hi)};
}

void im2col(const ConvGeometry& g, const double* image, double* col) {
  const std::size_t area = g.out_area();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        double* dst = col + ((c * g.kernel + ky) * g.kernel + kx) * area;
        const double* src = image + c * g.height * g.width;
        const auto [lo, hi] = valid_columns(g, kx);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          double* drow = dst + oy * g.out_w;
          if (iy < 0 || iy >= static_cast<long>(g.height)) {
            std::fill(drow, drow + g.out_w, 0.0);
            continue;
          }
          std::fill(drow, drow + lo, 0.0);
          std::fill(drow + hi, drow + g.out_w, 0.0);
          const double* srow = src + static_cast<std::size_t>(iy) * g.width + (lo * g.stride + kx - g.padding);
          if (g.stride == 1) {
            std::copy(srow, srow + (hi - lo), drow + lo);
          } else {
            for (std::size_t ox = lo; ox < hi; ++ox) drow[ox] = srow[(ox - lo) * g.stride];
          }
        }
      }
}

void col2im_add(const ConvGeometry& g, const double* col, double* image) {
  const std::size_t area = g.out_area();
  for (std::size_t c = 0; c < g.channels; ++c)
    for (std::size_t ky = 0; ky < g.kernel; ++ky)
      for (std::size_t kx = 0; kx < g.kernel; ++kx) {
        const double* src = col + ((c * g.kernel + ky) * g.kernel + kx) * area;
        double* dst = image + c * g.height * g.width;
        const auto [lo, hi] = valid_columns(g, kx);
        for (std::size_t oy = 0; oy < g.out_h; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
          if (iy < 0 || iy >= static_cast<long>(g.height)) continue;
          double* drow = dst + static_cast<std::size_t>(iy) * g.width + (lo * g.stride + kx - g.padding);
          const double* srow = src + oy * g.out_w;
          for (std::size_t ox = lo; ox < hi; ++ox) drow[(ox - lo) * g.stride] += srow[ox];
        }
      }
}

}  // namespace

Var conv2d(Var x, Var w, Var b, std::size_t stride, std::size_t padding) {
  Tape& t = same_tape("conv2d", x, w);
  same_tape("conv2d", x, b);
  const Array& xv = x.value();
  const Array& wv = w.value();
  const Array& bv = b.value();
  if (xv.rank() != 4 || wv.rank() != 4 || wv.dim(1) != xv.dim(1) || wv.dim(2) != wv.dim(3)) {
    shape_error("conv2d", xv.shape(), wv.shape());
  }
  if (bv.rank() != 1 || bv.dim(0) != wv.dim(0)) shape_error("conv2d", wv.shape(), bv.shape());
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  ConvGeometry g{xv.dim(1), xv.dim(2), xv.dim(3), wv.dim(0), wv.dim(2), stride, padding, 0, 0};
  if (g.height + 2 * padding < g.kernel || g.width + 2 * padding < g.kernel) {
    shape_error("conv2d", xv.shape(), wv.shape());
  }
  g.out_h = (g.height + 2 * padding - g.kernel) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel) / stride + 1;
  const std::size_t batch = xv.dim(0), patch = g.patch(), area = g.out_area();

  Array out(Shape{batch, g.filters, g.out_h, g.out_w});
  // One patch matrix at a time keeps the working set in cache; the backward
  // pass rebuilds it from the input.
  Buffer col(patch * area);
  ConstMapMat wm(wv.data(), g.filters, patch);
  for (std::size_t n = 0; n < batch; ++n) {
    im2col(g, xv.data() + n * g.channels * g.height * g.width, col.data());
    MapMat o(out.data() + n * g.filters * area, g.filters, area);
    o.noalias() = wm * ConstMapMat(col.data(), patch, area);
    for (std::size_t f = 0; f < g.filters; ++f) o.row(static_cast<Eigen::Index>(f)).array() += bv[f];
  }

  const std::size_t ix = x.id(), iw = w.id(), ib = b.id();
  const std::size_t parents[] = {ix, iw, ib};
  return t.record(std::move(out), parents, [ix, iw, ib, g, batch](Tape& tape, std::size_t self) {
    const std::size_t patch = g.patch(), area = g.out_area(), plane = g.channels * g.height * g.width;
    const Array& gy = tape.grad(self);
    const bool want_x = tape.needs_grad(ix), want_w = tape.needs_grad(iw), want_b = tape.needs_grad(ib);
    const double* xin = tape.value(ix).data();
    ConstMapMat wm(tape.value(iw).data(), g.filters, patch);
    Buffer col(want_w ? patch * area : 0);
    Buffer dcol(want_x ? patch * area : 0);
    for (std::size_t n = 0; n < batch; ++n) {
      ConstMapMat go(gy.data() + n * g.filters * area, g.filters, area);
      if (want_w) {
        im2col(g, xin + n * plane, col.data());
        MapMat(tape.grad(iw).data(), g.filters, patch).noalias() +=
            go * ConstMapMat(col.data(), patch, area).transpose();
      }
      if (want_b) {
        Array& gb = tape.grad(ib);
        for (std::size_t f = 0; f < g.filters; ++f) gb[f] += go.row(static_cast<Eigen::Index>(f)).sum();
      }
      if (want_x) {
        MapMat(dcol.data(), patch, area).noalias() = wm.transpose() * go;
        col2im_add(g, dcol.data(), tape.grad(ix).data() + n * plane);
      }
    }
  });
}

Var max_pool2d(Var x, std::size_t size) {
  Tape& t = x.tape();
  const Array& xv = x.value();
  if (xv.rank() != 4 || size == 0 || xv.dim(2) < size || xv.dim(3) < size) {
    shape_error("max_pool2d", xv.shape(), "cannot hold a pooling window of " + std::to_string(size));
  }
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = h / size, ow = w / size;
  Array out(Shape{xv.dim(0), xv.dim(1), oh, ow});
  auto argmax = std::make_shared<std::vector<std::size_t>>(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xv.data() + p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = (oy * size) * w + ox * size;
        for (std::size_t dy = 0; dy < size; ++dy)
          for (std::size_t dx = 0; dx < size; ++dx) {
            const std::size_t idx = (oy * size + dy) * w + ox * size + dx;
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = src[best];
        (*argmax)[o] = p * h * w + best;
      }
  }
  const std::size_t ix = x.id();
  const std::size_t parents[] = {ix};
  return t.record(std::move(out), parents, [ix, argmax](Tape& tape, std::size_t self) {
    const Array& g = tape.grad(self);
    Array& gx = tape.grad(ix);
    for (std::size_t o = 0; o < g.size(); ++o) gx[(*argmax)[o]] += g[o];
  });
}

// ---------------------------------------------------------------------------
// Nonlinearities

Var relu(Var x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Var tanh(Var x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var x) {
  return unary(
      x, [](double v) { return 1.0 / (1.0 + std::exp(-v)); }, [](double, double y) { return y * (1.0 - y); });
}

Var log(Var x, double floor) {
  return unary(
      x, [floor](double v) { return std::log(std::max(v, floor)); },
      [floor](double v, double) { return v > floor ? 1.0 / v : 0.0; });
}

Var softmax(Var x, std::size_t axis) {
  Tape& t = x.tape();
  const Array& xv = x.value();
  if (axis >= xv.rank()) shape_error("softmax", xv.shape(), "has no axis " + std::to_string(axis));
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= xv.dim(i);
  const std::size_t len = xv.dim(axis), inner = trailing(xv.shape(), axis + 1);
  Array out(xv.shape());
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t in = 0; in < inner; ++in) {
      const std::size_t base = o * len * inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (std::size_t k = 0; k < len; ++k) mx = std::max(mx, xv[base + k * inner]);
      double total = 0.0;
      for (std::size_t k = 0; k < len; ++k) {
        const double e = std::exp(xv[base + k * inner] - mx);
        out[base + k * inner] = e;
        total += e;
      }
      for (std::size_t k = 0; k < len; ++k) out[base + k * inner] /= total;
    }
  const std::size_t ix = x.id();
  const std::size_t parents[] = {ix};
  return t.record(std::move(out), parents, [ix, outer, len, inner](Tape& tape, std::size_t self) {
    const Array& g = tape.grad(self);
    const Array& y = tape.value(self);
    Array& gx = tape.grad(ix);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t in = 0; in < inner; ++in) {
        const std::size_t base = o * len * inner + in;
        double dot = 0.0;
        for (std::size_t k = 0; k < len; ++k) dot += g[base + k * inner] * y[base + k * inner];
        for (std::size_t k = 0; k < len; ++k) {
          const std::size_t i = base + k * inner;
          gx[i] += y[i] * (g[i] - dot);
        }
      }
  });
}

// ---------------------------------------------------------------------------
// Indexing and structure

Var embedding(Var table, std::span<const int> ids) {
  Tape& t = table.tape();
  const Array& tv = table.value();
  if (tv.rank() != 2) shape_error("embedding", tv.shape(), "is not a (vocab, dim) table");
  const std::size_t vocab = tv.dim(0), dim = tv.dim(1);
  std::vector<int> idx(ids.begin(), ids.end());
  Array out(Shape{idx.size(), dim});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= vocab) {
      throw UsageError("embedding: id " + std::to_string(idx[i]) + " outside vocabulary of " +
                       std::to_string(vocab));
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(idx[i]) * dim, dim, out.data() + i * dim);
  }
  const std::size_t it = table.id();
  const std::size_t parents[] = {it};
  return t.record(std::move(out), parents, [it, idx = std::move(idx), dim](Tape& tape, std::size_t self) {
    const Array& g = tape.grad(self);
    Array& gt = tape.grad(it);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      double* dst = gt.data() + static_cast<std::size_t>(idx[i]) * dim;
      for (std::size_t d = 0; d < dim; ++d) dst[d] += g[i * dim + d];
    }
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw UsageError("concat: no inputs");
  Tape& t = parts[0].tape();
  const Shape& first = parts[0].shape();
  if (axis >= first.size()) shape_error("concat", first, "has no axis " + std::to_string(axis));
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const Var& p : parts) {
    same_tape("concat", parts[0], p);
    const Shape& s = p.shape();
    if (s.size() != first.size()) shape_error("concat", first, s);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != first[i]) shape_error("concat", first, s);
    out_shape[axis] += s[axis];
  }
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  const std::size_t inner = trailing(first, axis + 1);
  const std::size_t out_row = out_shape[axis] * inner;

  Array out(out_shape);
  std::vector<std::size_t> ids, offsets, widths;
  std::size_t offset = 0;
  for (const Var& p : parts) {
    const std::size_t width = p.shape()[axis] * inner;
    const Array& pv = p.value();
    for (std::size_t o = 0; o < outer; ++o) std::copy_n(pv.data() + o * width, width, out.data() + o * out_row + offset);
    ids.push_back(p.id());
    offsets.push_back(offset);
    widths.push_back(width);
    offset += width;
  }
  return t.record(std::move(out), ids, [ids, offsets, widths, outer, out_row](Tape& tape, std::size_t self) {
    const Array& g = tape.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!tape.needs_grad(ids[k])) continue;
      Array& gp = tape.grad(ids[k]);
      for (std::size_t o = 0; o < outer; ++o)
        for (std::size_t i = 0; i < widths[k]; ++i) gp[o * widths[k] + i] += g[o * out_row + offsets[k] + i];
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tape& t = x.tape();
  Array out = x.value().reshaped(std::move(shape));
  const std::size_t ix = x.id();
  const std::size_t parents[] = {ix};
  return t.record(std::move(out), parents, [ix](Tape& tape, std::size_t self) {
    const Array& g = tape.grad(self);
    Array& gx = tape.grad(ix);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
}

Var sum(Var x) {
  Tape& t = x.tape();
  const Array& xv = x.value();
  double total = 0.0;
  for (double v : xv.values()) total += v;
  const std::size_t ix = x.id();
  const std::size_t parents[] = {ix};
  return t.record(Array::scalar(total), parents, [ix](Tape& tape, std::size_t self) {
    const double g = tape.grad(self)[0];
    for (double& v : tape.grad(ix).values()) v += g;
  });
}

Var mean(Var x) {
  const std::size_t n = x.value().size();
  if (n == 0) shape_error("mean", x.shape(), "is empty");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var dropout(Var x, double rate, Mode mode, std::mt19937_64& rng) {
  if (rate < 0.0 || rate >= 1.0) throw UsageError("dropout: rate must lie in [0, 1)");
  if (mode == Mode::eval || rate == 0.0) return x;
  const Array& xv = x.value();
  Array keep(xv.shape());
  std::bernoulli_distribution bern(1.0 - rate);
  const double inv = 1.0 / (1.0 - rate);
  for (double& k : keep.values()) k = bern(rng) ? inv : 0.0;
  return mul_const(x, keep);
}

Var spatial_weighted_sum(Var features, Var weights) {
  Tape& t = same_tape("spatial_weighted_sum", features, weights);
  const Array& fv = features.value();
  const Array& wv = weights.value();
  if (fv.rank() < 3 || wv.rank() != fv.rank() || fv.dim(0) != wv.dim(0) ||
      trailing(fv.shape(), 2) != trailing(wv.shape(), 2)) {
    shape_error("spatial_weighted_sum", fv.shape(), wv.shape());
  }
  const std::size_t batch = fv.dim(0), channels = fv.dim(1), glimpses = wv.dim(1), area = trailing(fv.shape(), 2);
  Array out(Shape{batch, glimpses * channels});
  for (std::size_t n = 0; n < batch; ++n) {
    ConstMapMat f(fv.data() + n * channels * area, channels, area);
    ConstMapMat a(wv.data() + n * glimpses * area, glimpses, area);
    // out row n laid out as [glimpse][channel]
    MapMat(out.data() + n * glimpses * channels, glimpses, channels).noalias() = a * f.transpose();
  }
  const std::size_t iF = features.id(), iW = weights.id();
  const std::size_t parents[] = {iF, iW};
  return t.record(std::move(out), parents,
                  [iF, iW, batch, channels, glimpses, area](Tape& tape, std::size_t self) {
                    const Array& g = tape.grad(self);
                    for (std::size_t n = 0; n < batch; ++n) {
                      ConstMapMat go(g.data() + n * glimpses * channels, glimpses, channels);
                      if (tape.needs_grad(iF)) {
                        MapMat(tape.grad(iF).data() + n * channels * area, channels, area).noalias() +=
                            go.transpose() * ConstMapMat(tape.value(iW).data() + n * glimpses * area, glimpses, area);
                      }
                      if (tape.needs_grad(iW)) {
                        MapMat(tape.grad(iW).data() + n * glimpses * area, glimpses, area).noalias() +=
                            go * ConstMapMat(tape.value(iF).data() + n * channels * area, channels, area);
                      }
                    }
                  });
}

Var pick(Var x, std::span<const int> index) {
  Tape& t = x.tape();
  const Array& xv = x.value();
  if (xv.rank() != 2 || xv.dim(0) != index.size()) {
    shape_error("pick", xv.shape(), Shape{index.size()});
  }
  const std::size_t rows = xv.dim(0), cols = xv.dim(1);
  std::vector<std::size_t> flat(rows);
  Array out(Shape{rows});
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] < 0 || static_cast<std::size_t>(index[r]) >= cols) {
      throw UsageError("pick: index " + std::to_string(index[r]) + " outside " + std::to_string(cols) + " columns");
    }
    flat[r] = r * cols + static_cast<std::size_t>(index[r]);
    out[r] = xv[flat[r]];
  }
  const std::size_t ix = x.id();
  const std::size_t parents[] = {ix};
  return t.record(std::move(out), parents, [ix, flat = std::move(flat)](Tape& tape, std::size_t self) {
    const Array& g = tape.grad(self);
    Array& gx = tape.grad(ix);
    for (std::size_t r = 0; r < flat.size(); ++r) gx[flat[r]] += g[r];
  });
}

Var gather_rows(Var x, std::span<const std::size_t> rows) {
  Tape& t = x.tape();
  const Array& xv = x.value();
  if (xv.rank() < 1) shape_error("gather_rows", xv.shape(), "has no rows");
  const std::size_t width = trailing(xv.shape(), 1);
  Shape s = xv.shape();
  s[0] = rows.size();
  Array out(s);
  std::vector<std::size_t> idx(rows.begin(), rows.end());
  for (std::size_t r = 0; r < idx.size(); ++r) {
    if (idx[r] >= xv.dim(0)) {
      throw UsageError("gather_rows: row " + std::to_string(idx[r]) + " outside " + std::to_string(xv.dim(0)));
    }
    std::copy_n(xv.data() + idx[r] * width, width, out.data() + r * width);
  }
  const std::size_t ix = x.id();
  const std::size_t parents[] = {ix};
  return t.record(std::move(out), parents, [ix, idx = std::move(idx), width](Tape& tape, std::size_t self) {
    const Array& g = tape.grad(self);
    Array& gx = tape.grad(ix);
    for (std::size_t r = 0; r < idx.size(); ++r)
      for (std::size_t k = 0; k < width; ++k) gx[idx[r] * width + k] += g[r * width + k];
  });
}

Var broadcast_rows(Var v, std::size_t n) {
  Tape& t = v.tape();
  const Array& vv = v.value();
  if (vv.rank() != 1) shape_error("broadcast_rows", vv.shape(), "is not a vector");
  const std::size_t d = vv.dim(0);
  Array out(Shape{n, d});
  for (std::size_t r = 0; r < n; ++r) std::copy_n(vv.data(), d, out.data() + r * d);
  const std::size_t iv = v.id();
  const std::size_t parents[] = {iv};
  return t.record(std::move(out), parents, [iv, n, d](Tape& tape, std::size_t self) {
    const Array& g = tape.grad(self);
    Array& gv = tape.grad(iv);
    for (std::size_t r = 0; r < n; ++r)
      for (std::size_t k = 0; k < d; ++k) gv[k] += g[r * d + k];
  });
}

Var select_rows(std::span<const std::uint8_t> take_a, Var a, Var b) {
  Tape& t = same_tape("select_rows", a, b);
  const Array& av = a.value();
  const Array& bv = b.value();
  if (av.shape() != bv.shape() || av.rank() < 1) shape_error("select_rows", av.shape(), bv.shape());
  if (take_a.size() != av.dim(0)) shape_error("select_rows", av.shape(), Shape{take_a.size()});
  const std::size_t width = trailing(av.shape(), 1);
  std::vector<std::uint8_t> mask(take_a.begin(), take_a.end());
  Array out(av.shape());
  for (std::size_t r = 0; r < mask.size(); ++r) {
    const Array& src = mask[r] ? av : bv;
    std::copy_n(src.data() + r * width, width, out.data() + r * width);
  }
  const std::size_t ia = a.id(), ib = b.id();
  const std::size_t parents[] = {ia, ib};
  return t.record(std::move(out), parents, [ia, ib, mask = std::move(mask), width](Tape& tape, std::size_t self) {
    const Array& g = tape.grad(self);
    for (std::size_t r = 0; r < mask.size(); ++r) {
      const std::size_t target = mask[r] ? ia : ib;
      if (!tape.needs_grad(target)) continue;
      Array& gt = tape.grad(target);
      for (std::size_t k = 0; k < width; ++k) gt[r * width + k] += g[r * width + k];
    }
  });
}

Var detach(Var x) { return x.tape().constant(x.value()); }

// ---------------------------------------------------------------------------

GradCheckReport finite_diff_check(const CheckedFunction& f, std::span<const double> point, double eps,
                                  double tolerance) {
  GradCheckReport report;
  std::vector<double> analytic;
  std::vector<double> x(point.begin(), point.end());
  const double f0 = f(x, &analytic);
  if (analytic.size() != x.size()) throw UsageError("finite_diff_check: gradient size differs from point size");
  if (!std::isfinite(f0)) report.non_finite = true;

  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x[i];
    x[i] = orig + eps;
    const double fp = f(x, nullptr);
    x[i] = orig - eps;
    const double fm = f(x, nullptr);
    x[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
      report.non_finite = true;
      report.worst_coordinate = i;
      report.analytic_at_worst = analytic[i];
      report.numeric_at_worst = numeric;
      report.max_rel_error = std::numeric_limits<double>::infinity();
      continue;
    }
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1e-8});
    const double rel = std::abs(analytic[i] - numeric) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_coordinate = i;
      report.analytic_at_worst = analytic[i];
      report.numeric_at_worst = numeric;
    }
  }
  report.passed = !report.non_finite && report.max_rel_error < tolerance;
  return report;
}

}  // namespace cvqa::ad
