#include <doctest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "cvqa/checkpoint.hpp"
#include "cvqa/diff.hpp"
#include "cvqa/errors.hpp"
#include "test_util.hpp"

using namespace cvqa;
using namespace cvqa::ad;

namespace {

Array random_array(Shape shape, std::mt19937_64& rng, double scale = 1.0) {
  Array a(std::move(shape));
  std::normal_distribution<double> n(0.0, scale);
  for (std::size_t i = 0; i < a.size(); ++i) a[i] = n(rng);
  return a;
}

// Direct 4-loop convolution with zero padding.
Array naive_conv(const Array& x, const Array& w, const Array& b, std::size_t stride, std::size_t pad) {
  const std::size_t n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t f = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Array out(Shape{n, f, oh, ow});
  for (std::size_t s = 0; s < n; ++s)
    for (std::size_t o = 0; o < f; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t xo = 0; xo < ow; ++xo) {
          double acc = b[o];
          for (std::size_t ci = 0; ci < c; ++ci)
            for (std::size_t ky = 0; ky < k; ++ky)
              for (std::size_t kx = 0; kx < k; ++kx) {
                const long iy = static_cast<long>(y * stride + ky) - static_cast<long>(pad);
                const long ix = static_cast<long>(xo * stride + kx) - static_cast<long>(pad);
                if (iy < 0 || ix < 0 || iy >= static_cast<long>(h) || ix >= static_cast<long>(wd)) continue;
                acc += x[((s * c + ci) * h + iy) * wd + ix] * w[((o * c + ci) * k + ky) * k + kx];
              }
          out[((s * f + o) * oh + y) * ow + xo] = acc;
        }
  return out;
}

}  // namespace

TEST_SUITE("diffcore") {
  TEST_CASE("softmax of equal entries is uniform") {
    Tape t;
    for (std::size_t n : {1u, 3u, 7u}) {
      const Var v = softmax(t.constant(Array(Shape{2, n}, 4.2)), 1);
      for (double p : v.value().values()) CHECK(p == doctest::Approx(1.0 / n).epsilon(1e-15));
    }
  }

  TEST_CASE("softmax rows sum to one even for large logits") {
    Tape t;
    std::mt19937_64 rng(1);
    const Var v = softmax(t.constant(random_array({5, 9}, rng, 300.0)), 1);
    for (std::size_t r = 0; r < 5; ++r) {
      double s = 0.0;
      for (std::size_t c = 0; c < 9; ++c) s += v.value()[r * 9 + c];
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }

  TEST_CASE("hinge of a negative value is zero") {
    Tape t;
    const Var x = t.leaf(Array(Shape{1}, std::vector<double>{-0.3}));
    const Var y = hinge(x);
    CHECK(y.value()[0] == 0.0);
    const Var xs[] = {x};
    CHECK(t.gradient(sum(y), xs)[0][0] == 0.0);
  }

  TEST_CASE("identity kernel leaves the image unchanged") {
    Tape t;
    std::mt19937_64 rng(2);
    const Array img = random_array({2, 1, 9, 7}, rng);
    Array k(Shape{1, 1, 3, 3});
    k[4] = 1.0;
    const Var y = conv2d(t.constant(img), t.constant(k), t.constant(Array(Shape{1})), 1, 1);
    CHECK(y.value() == img);
  }

  TEST_CASE("conv2d agrees with a direct loop") {
    Tape t;
    std::mt19937_64 rng(3);
    for (std::size_t stride : {1u, 2u})
      for (std::size_t pad : {0u, 1u, 2u}) {
        const Array x = random_array({2, 3, 11, 10}, rng);
        const Array w = random_array({4, 3, 3, 3}, rng);
        const Array b = random_array({4}, rng);
        const Var y = conv2d(t.constant(x), t.constant(w), t.constant(b), stride, pad);
        const Array ref = naive_conv(x, w, b, stride, pad);
        REQUIRE(y.shape() == ref.shape());
        for (std::size_t i = 0; i < ref.size(); ++i) CHECK(y.value()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
      }
  }

  TEST_CASE("max_pool2d drops incomplete windows") {
    Tape t;
    Array x(Shape{1, 1, 3, 5});
    for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i);
    const Var y = max_pool2d(t.constant(x), 2);
    CHECK(y.shape() == Shape{1, 1, 1, 2});
    CHECK(y.value()[0] == 6.0);
    CHECK(y.value()[1] == 8.0);
  }

  TEST_CASE("gradient of w squared at 3 is 6") {
    Tape t;
    const Var w = t.leaf(Array::scalar(3.0));
    const Var ws[] = {w};
    CHECK(t.gradient(mul(w, w), ws)[0].item() == 6.0);
  }

  TEST_CASE("gradient of a constant output is zero") {
    Tape t;
    const Var w = t.leaf(Array(Shape{3}, 1.5));
    const Var c = t.constant(Array::scalar(2.0));
    const Var ws[] = {w};
    const auto g = t.gradient(c, ws);
    REQUIRE(g[0].size() == 3);
    for (double v : g[0].values()) CHECK(v == 0.0);
  }

  TEST_CASE("gradient requests off the graph are usage errors") {
    Tape t, other;
    const Var w = t.leaf(Array::scalar(1.0));
    const Var foreign = other.leaf(Array::scalar(1.0));
    const Var out = scale(w, 2.0);
    const Var ws[] = {foreign};
    CHECK_THROWS_AS(t.gradient(out, ws), UsageError);
    const Var cs[] = {t.constant(Array::scalar(1.0))};
    CHECK_THROWS_AS(t.gradient(out, cs), UsageError);
  }

  TEST_CASE("shape errors name both shapes") {
    Tape t;
    const Var a = t.constant(Array(Shape{2, 3}));
    const Var b = t.constant(Array(Shape{4, 2}));
    try {
      matmul(a, b);
      FAIL("no shape error");
    } catch (const ShapeError& e) {
      const std::string msg = e.what();
      CHECK(msg.find("2") != std::string::npos);
      CHECK(msg.find("4") != std::string::npos);
    }
    CHECK_THROWS_AS(add(a, b), ShapeError);
  }

  TEST_CASE("detach blocks gradient and keeps the value") {
    Tape t;
    const Var w = t.leaf(Array::scalar(2.0));
    const Var d = detach(mul(w, w));
    CHECK(d.value().item() == 4.0);
    const Var ws[] = {w};
    CHECK(t.gradient(add(mul(d, w), w), ws)[0].item() == doctest::Approx(5.0));
  }

  TEST_CASE("log floor stops the gradient") {
    Tape t;
    const Var x = t.leaf(Array(Shape{2}, std::vector<double>{1e-20, 0.5}));
    const Var y = log(x, 1e-12);
    CHECK(y.value()[0] == doctest::Approx(std::log(1e-12)));
    const Var xs[] = {x};
    const auto g = t.gradient(sum(y), xs);
    CHECK(g[0][0] == 0.0);
    CHECK(g[0][1] == doctest::Approx(2.0));
  }

  TEST_CASE("dropout is the identity in eval mode") {
    Tape t;
    std::mt19937_64 rng(4);
    const Array a = random_array({3, 4}, rng);
    CHECK(dropout(t.constant(a), 0.5, Mode::eval, rng).value() == a);
    CHECK(dropout(t.constant(a), 0.0, Mode::train, rng).value() == a);
  }

  TEST_CASE("finite differences accept a correct quadratic form") {
    std::mt19937_64 rng(5);
    const std::size_t n = 6;
    const Array A = random_array({n, n}, rng);
    const CheckedFunction f = [&](std::span<const double> x, std::vector<double>* g) {
      double v = 0.0;
      if (g) g->assign(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
          v += x[i] * A[i * n + j] * x[j];
          if (g) {
            (*g)[i] += A[i * n + j] * x[j];
            (*g)[j] += A[i * n + j] * x[i];
          }
        }
      return v;
    };
    const Array p = random_array({n}, rng);
    const auto r = finite_diff_check(f, p.values(), 1e-5, 1e-6);
    CHECK(r.passed);
    CHECK(r.max_rel_error < 1e-7);
  }

  TEST_CASE("finite differences reject a doubled gradient") {
    const CheckedFunction f = [](std::span<const double> x, std::vector<double>* g) {
      if (g) *g = {2.0 * 2.0 * x[0], 2.0 * 3.0 * x[1] * x[1]};
      return x[0] * x[0] + x[1] * x[1] * x[1];
    };
    const std::vector<double> p{0.7, -1.3};
    const auto r = finite_diff_check(f, p, 1e-5, 1e-6);
    CHECK_FALSE(r.passed);
    // |2g - g| / max(|2g|, |g|) with the symmetric denominator.
    CHECK(r.max_rel_error == doctest::Approx(0.5).epsilon(1e-6));
  }

  TEST_CASE("hinge away from the kink passes") {
    // gamma - h = 0.5 at the point.
    const CheckedFunction f = [](std::span<const double> x, std::vector<double>* g) {
      const double slack = 1.0 - x[0];
      const double active = slack > 0.0 ? 1.0 : 0.0;
      if (g) *g = {-active * x[1], active * slack};
      return x[1] * std::max(0.0, slack);
    };
    const std::vector<double> p{0.5, 0.8};
    CHECK(finite_diff_check(f, p, 1e-5, 1e-6).passed);
  }

  TEST_CASE("checkpoint round-trips at float32 precision") {
    testing::TempDir dir("ckpt");
    std::mt19937_64 rng(6);
    std::vector<Parameter> params{{"a.w", random_array({3, 4}, rng)}, {"b", random_array({5}, rng)}};
    const nlohmann::json meta = {{"k", "v"}, {"n", 3}};
    const auto path = dir.path() / "x.ckpt";
    save_checkpoint(path, params, meta);
    const Checkpoint c = load_checkpoint(path);
    CHECK(c.meta == meta);
    REQUIRE(c.params.size() == 2);
    for (std::size_t i = 0; i < 2; ++i) {
      CHECK(c.params[i].name == params[i].name);
      REQUIRE(c.params[i].value.shape() == params[i].value.shape());
      for (std::size_t j = 0; j < params[i].value.size(); ++j) {
        CHECK(c.params[i].value[j] == static_cast<double>(static_cast<float>(params[i].value[j])));
      }
    }
    // Saving the loaded values again reproduces the file byte for byte.
    save_checkpoint(dir.path() / "y.ckpt", c.params, c.meta);
    CHECK(testing::slurp(path) == testing::slurp(dir.path() / "y.ckpt"));
  }

  TEST_CASE("corrupt checkpoints raise integrity errors") {
    testing::TempDir dir("ckpt_bad");
    std::vector<Parameter> params{{"w", Array(Shape{16}, 1.0)}};
    const auto path = dir.path() / "x.ckpt";
    save_checkpoint(path, params, nlohmann::json::object());
    const std::string bytes = testing::slurp(path);

    std::ofstream(dir.path() / "trunc.ckpt", std::ios::binary) << bytes.substr(0, bytes.size() - 7);
    CHECK_THROWS_AS(load_checkpoint(dir.path() / "trunc.ckpt"), IntegrityError);
    std::string bad = bytes;
    bad[0] = 'X';
    std::ofstream(dir.path() / "magic.ckpt", std::ios::binary) << bad;
    CHECK_THROWS_AS(load_checkpoint(dir.path() / "magic.ckpt"), IntegrityError);
    std::ofstream(dir.path() / "tiny.ckpt", std::ios::binary) << "CVQ";
    CHECK_THROWS_AS(load_checkpoint(dir.path() / "tiny.ckpt"), IntegrityError);
    CHECK_THROWS_AS(load_checkpoint(dir.path() / "missing.ckpt"), IntegrityError);
  }
}
