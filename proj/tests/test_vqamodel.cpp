#include <doctest.h>

#include <cmath>
#include <random>

#include "cvqa/errors.hpp"
#include "cvqa/model.hpp"

using namespace cvqa;
using namespace cvqa::model;
using synth::Image;
using synth::Region;

namespace {

Image random_image(int side, std::mt19937_64& rng) {
  Image img;
  img.width = img.height = side;
  img.channels = 1;
  img.pixels.resize(static_cast<std::size_t>(side) * side);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (double& p : img.pixels) p = u(rng);
  return img;
}

std::vector<int> tokens_of(std::initializer_list<int> ids, std::size_t len = 8) {
  std::vector<int> t(ids);
  t.resize(len, synth::TokenVocab::kPad);
  return t;
}

ModelConfig small_config() {
  ModelConfig c;
  c.image_size = 32;
  c.conv_stages = {{8, 3, 2}, {16, 3, 2}};
  return c;
}

}  // namespace

TEST_SUITE("vqamodel") {
  TEST_CASE("whole-region mask is the identity") {
    std::mt19937_64 rng(1);
    const Image img = random_image(64, rng);
    CHECK(apply_mask(img, Region::whole(64, 64)) == img);
  }

  TEST_CASE("radius-0 mask keeps at most the center pixel") {
    std::mt19937_64 rng(2);
    const Image img = random_image(64, rng);
    const Image m = apply_mask(img, Region::circle({20, 30}, 0));
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        if (x == 20 && y == 30) CHECK(m.at(0, y, x) == img.at(0, y, x));
        else CHECK(m.at(0, y, x) == 0.0);
      }
  }

  TEST_CASE("circle mask follows pixel distance") {
    std::mt19937_64 rng(3);
    Image img = random_image(64, rng);
    for (double& p : img.pixels) p += 0.1;
    const Image m = apply_mask(img, Region::circle({32, 32}, 10));
    CHECK(m.at(0, 45, 32) == 0.0);
    CHECK(m.at(0, 40, 32) == img.at(0, 40, 32));
  }

  TEST_CASE("default config maps 64x64 input to a (64, 8, 8) feature map") {
    const ModelConfig c;
    CHECK(c.feature_dim() == 64);
    CHECK(c.feature_map_side() == 8);
    VqaModel m(c, 1);
    ad::Tape t;
    const auto b = m.bind(t, false);
    const ad::Var v = m.encode_image(b, t.constant(ad::Array(ad::Shape{2, 1, 64, 64})));
    CHECK(v.shape() == ad::Shape{2, 64, 8, 8});
    for (double x : v.value().values()) CHECK(std::isfinite(x));
    CHECK_THROWS_AS(m.encode_image(b, t.constant(ad::Array(ad::Shape{2, 1, 32, 32}))), ShapeError);
  }

  TEST_CASE("question encoder conventions") {
    VqaModel m(small_config(), 4);
    ad::Tape t;
    const auto b = m.bind(t, false);
    const std::vector<std::vector<int>> rows{tokens_of({2, 3, 4}), tokens_of({2, 3, 4}), tokens_of({2, 5, 6, 7}),
                                             tokens_of({}), tokens_of({2, 3, 999})};
    const ad::Var q = m.encode_question(b, rows);
    const std::size_t Q = m.config().question_dim;
    const auto row = [&](std::size_t r) {
      return std::vector<double>(q.value().data() + r * Q, q.value().data() + (r + 1) * Q);
    };
    CHECK(row(0) == row(1));
    CHECK(row(0) != row(2));
    const auto& init = m.parameter("question.initial").value;
    for (std::size_t i = 0; i < Q; ++i) CHECK(row(3)[i] == doctest::Approx(std::tanh(init[i])).epsilon(1e-15));
    // Out-of-vocabulary ids read as <unk>.
    const ad::Var qu = m.encode_question(b, std::vector<std::vector<int>>{tokens_of({2, 3, synth::TokenVocab::kUnk})});
    for (std::size_t i = 0; i < Q; ++i) CHECK(qu.value()[i] == row(4)[i]);
  }

  TEST_CASE("attention maps are distributions and sized by glimpses") {
    const ModelConfig c;
    VqaModel m(c, 5);
    std::mt19937_64 rng(5);
    const Image img = random_image(64, rng);
    std::vector<Sample> batch{{&img, Region::whole(64, 64), tokens_of({2, 3})},
                              {&img, Region::circle({10, 10}, 9), tokens_of({4, 5})}};
    ad::Tape t;
    const auto out = m.forward(m.bind(t, false), batch, ad::Mode::eval, rng);
    CHECK(out.attention.attended.shape() == ad::Shape{2, 128});
    const auto& maps = out.attention.maps.value();
    REQUIRE(maps.shape() == ad::Shape{2, 2, 64});
    for (std::size_t g = 0; g < 4; ++g) {
      double s = 0.0;
      for (std::size_t k = 0; k < 64; ++k) s += maps[g * 64 + k];
      CHECK(std::abs(s - 1.0) <= 1e-6);
    }
    const auto& p = out.probs.value();
    for (std::size_t r = 0; r < 2; ++r) {
      double s = 0.0;
      for (std::size_t a = 0; a < 5; ++a) {
        CHECK(p[r * 5 + a] > 0.0);
        CHECK(p[r * 5 + a] < 1.0);
        s += p[r * 5 + a];
      }
      CHECK(std::abs(s - 1.0) <= 1e-9);
    }
  }

  TEST_CASE("uniform scores attend to the spatial mean") {
    VqaModel m(small_config(), 6);
    m.parameter("attention.score.weight").value = ad::Array(m.parameter("attention.score.weight").value.shape());
    std::mt19937_64 rng(6);
    ad::Tape t;
    const auto b = m.bind(t, false);
    std::vector<double> pix(2 * 32 * 32);
    for (double& p : pix) p = std::uniform_real_distribution<double>(0, 1)(rng);
    const ad::Var v = m.encode_image(b, t.constant(ad::Array(ad::Shape{2, 1, 32, 32}, pix)));
    const ad::Var q = m.encode_question(b, std::vector<std::vector<int>>{tokens_of({2}), tokens_of({3})});
    const auto att = m.attend(b, v, q, ad::Mode::eval, rng);
    const std::size_t C = v.shape()[1], S = v.shape()[2] * v.shape()[3];
    for (std::size_t n = 0; n < 2; ++n)
      for (std::size_t g = 0; g < 2; ++g)
        for (std::size_t ch = 0; ch < C; ++ch) {
          double mean = 0.0;
          for (std::size_t s = 0; s < S; ++s) mean += v.value()[(n * C + ch) * S + s] / S;
          CHECK(att.attended.value()[n * 2 * C + g * C + ch] == doctest::Approx(mean).epsilon(1e-12));
        }
  }

  TEST_CASE("zero classifier output layer gives uniform answers") {
    VqaModel m(small_config(), 7);
    for (const char* name : {"classifier.out.weight", "classifier.out.bias"}) {
      m.parameter(name).value = ad::Array(m.parameter(name).value.shape());
    }
    std::mt19937_64 rng(7);
    const Image img = random_image(32, rng);
    std::vector<Sample> batch{{&img, Region::whole(32, 32), tokens_of({2, 3})}};
    ad::Tape t;
    const auto out = m.forward(m.bind(t, false), batch, ad::Mode::train, rng);
    for (double p : out.probs.value().values()) CHECK(p == doctest::Approx(0.2).epsilon(1e-15));
  }

  TEST_CASE("eval forward is deterministic and masking invariant") {
    VqaModel m(small_config(), 8);
    std::mt19937_64 rng(8);
    for (int trial = 0; trial < 10; ++trial) {
      Image img = random_image(32, rng);
      const Region region = Region::circle({std::uniform_int_distribution<int>(0, 31)(rng) * 1.0, 16.0},
                                           std::uniform_int_distribution<int>(2, 14)(rng));
      Image other = img;
      for (int y = 0; y < 32; ++y)
        for (int x = 0; x < 32; ++x)
          if (!region.contains({double(x), double(y)})) other.at(0, y, x) = std::uniform_real_distribution<double>(0, 1)(rng);
      std::vector<Sample> a{{&img, region, tokens_of({2, 3, 4})}};
      std::vector<Sample> b{{&other, region, tokens_of({2, 3, 4})}};
      ad::Tape t1, t2, t3;
      const auto o1 = m.forward(m.bind(t1, false), a, ad::Mode::eval, rng);
      const auto o2 = m.forward(m.bind(t2, false), b, ad::Mode::eval, rng);
      const auto o3 = m.forward(m.bind(t3, false), a, ad::Mode::eval, rng);
      CHECK(o1.probs.value() == o2.probs.value());
      CHECK(o1.attention.maps.value() == o2.attention.maps.value());
      CHECK(o1.probs.value() == o3.probs.value());
    }
  }

  TEST_CASE("seeded initialization is reproducible") {
    VqaModel a(ModelConfig::micro(), 11), b(ModelConfig::micro(), 11), c(ModelConfig::micro(), 12);
    for (std::size_t i = 0; i < a.parameters().size(); ++i) CHECK(a.parameters()[i].value == b.parameters()[i].value);
    CHECK(a.parameters().front().value != c.parameters().front().value);
  }

  TEST_CASE("config text round-trip and validation") {
    ModelConfig c = small_config();
    c.vocab_digest = "abc123";
    CHECK(ModelConfig::from_text(c.to_text()) == c);
    CHECK(ModelConfig::from_text(c.to_text()).hash() == c.hash());
    ModelConfig other = c;
    other.glimpses = 3;
    CHECK(other.hash() != c.hash());
    ModelConfig bad = c;
    bad.glimpses = 0;
    CHECK_THROWS_AS(bad.validate(), ConfigError);
  }

  TEST_CASE("load_parameters rejects mismatched tensors") {
    VqaModel m(ModelConfig::micro(), 1);
    auto params = m.parameters();
    params[0].value = ad::Array(ad::Shape{1});
    CHECK_THROWS_AS(m.load_parameters(params), IntegrityError);
    params = m.parameters();
    params.pop_back();
    CHECK_THROWS_AS(m.load_parameters(params), IntegrityError);
  }
}
