#include <doctest.h>

#include <cmath>

#include "ressfl/error.hpp"
#include "ressfl/losses.hpp"
#include "ressfl/network.hpp"
#include "ressfl/optim.hpp"
#include "test_support.hpp"

using namespace ressfl;
using ressfl::testing::check_network_gradients;
using ressfl::testing::random_tensor;

namespace {

// Direct (loop over every tap) convolution, independent of im2col.
Tensor direct_conv(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
                   std::size_t pad) {
  const std::size_t n = x.dim(0), ci = x.dim(1), h = x.dim(2), wd = x.dim(3);
  const std::size_t co = w.dim(0), k = w.dim(2);
  const std::size_t oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  Tensor y({n, co, oh, ow});
  for (std::size_t b0 = 0; b0 < n; ++b0)
    for (std::size_t o = 0; o < co; ++o)
      for (std::size_t i = 0; i < oh; ++i)
        for (std::size_t j = 0; j < ow; ++j) {
          double acc = b[o];
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ki = 0; ki < k; ++ki)
              for (std::size_t kj = 0; kj < k; ++kj) {
                const long yy = static_cast<long>(i * stride + ki) - static_cast<long>(pad);
                const long xx = static_cast<long>(j * stride + kj) - static_cast<long>(pad);
                if (yy < 0 || xx < 0 || yy >= static_cast<long>(h) || xx >= static_cast<long>(wd))
                  continue;
                acc += w[((o * ci + c) * k + ki) * k + kj] * x[((b0 * ci + c) * h + yy) * wd + xx];
              }
          y[((b0 * co + o) * oh + i) * ow + j] = acc;
        }
  return y;
}

}  // namespace

TEST_CASE("tensor invariants") {
  CHECK_THROWS_AS(Tensor({2, 3}, std::vector<double>(5)), ShapeError);
  CHECK_THROWS_AS(Tensor({0, 3}), ShapeError);
  Tensor t({2, 3}, 1.0);
  CHECK_FALSE(t.has_grad());
  CHECK(t.grad().size() == 6);
  CHECK(t.has_grad());
  t[1] = std::nan("");
  CHECK_THROWS_AS(ensure_finite(t, "test"), NumericError);
}

TEST_CASE("relu forward") {
  Layer relu = Layer::relu();
  const Tensor y = relu.forward(Tensor({1, 3}, {-1.0, 0.0, 2.0}));
  CHECK(y.values() == std::vector<double>{0.0, 0.0, 2.0});
}

TEST_CASE("1x1 identity conv reproduces the image") {
  Layer conv = Layer::conv2d({1, 1, 1, 1, 0});
  conv.params()[0][0] = 1.0;
  Rng rng(3);
  const Tensor x = random_tensor({2, 1, 5, 4}, rng);
  CHECK(conv.forward(x) == x);
}

TEST_CASE("3x3 all-ones conv on the identity image") {
  Layer conv = Layer::conv2d({1, 1, 3, 1, 1});
  for (auto& v : conv.params()[0].values()) v = 1.0;
  const Tensor x({1, 1, 3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  const Tensor y = conv.forward(x);
  const Tensor oracle = direct_conv(x, conv.params()[0], conv.params()[1], 1, 1);
  CHECK(oracle[4] == 3.0);
  CHECK(y == oracle);
}

TEST_CASE("conv matches the direct oracle on random hypers") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    const std::size_t k = 1 + rng.index(4), s = 1 + rng.index(2), p = rng.index(k);
    const std::size_t ci = 1 + rng.index(3), co = 1 + rng.index(3);
    Layer conv = Layer::conv2d({ci, co, k, s, p});
    conv.init_kaiming(rng);
    for (auto& v : conv.params()[1].values()) v = rng.uniform(-1, 1);
    const Tensor x = random_tensor({2, ci, k + rng.index(6), k + rng.index(6)}, rng);
    const Tensor y = conv.forward(x);
    const Tensor oracle = direct_conv(x, conv.params()[0], conv.params()[1], s, p);
    REQUIRE(y.shape() == oracle.shape());
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(y[i] == doctest::Approx(oracle[i]).epsilon(1e-12));
  }
}

TEST_CASE("shape mismatch names the layer and both shapes") {
  Layer conv = Layer::conv2d({3, 4, 3, 1, 1});
  try {
    conv.forward(Tensor({1, 2, 5, 5}));
    FAIL("expected ShapeError");
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("Conv2D") != std::string::npos);
    CHECK(msg.find("[1,2,5,5]") != std::string::npos);
    CHECK(msg.find("[N,3,H,W]") != std::string::npos);
  }
}

TEST_CASE("backward without forward is an error") {
  Layer dense = Layer::dense(3, 2);
  CHECK_THROWS_AS(dense.backward(Tensor({1, 2})), StateError);
  Network net({Layer::dense(3, 2), Layer::relu()});
  CHECK_THROWS_AS(net.backward(Tensor({1, 2})), StateError);
}

TEST_CASE("dense gradient of a scalar output is x transpose") {
  Layer dense = Layer::dense(3, 1);
  const Tensor x({1, 3}, {0.5, -2.0, 4.0});
  dense.forward(x);
  dense.backward(Tensor({1, 1}, 1.0));
  const auto g = dense.params()[0].grad();
  CHECK(std::vector<double>(g.begin(), g.end()) == x.values());
}

TEST_CASE("finite-difference gradients for every layer kind") {
  Rng rng(2024);
  int checked = 0;
  auto run = [&](Network net, const Shape& in) {
    net.init_kaiming(rng);
    for (auto& p : net.parameters())
      for (auto& v : p.tensor->values()) v += rng.uniform(-0.3, 0.3);
    const auto r = check_network_gradients(net, random_tensor(in, rng), rng);
    CHECK(r.input_error < 1e-4);
    CHECK(r.worst_param_error < 1e-4);
    ++checked;
  };
  for (int t = 0; t < 4; ++t) {
    const std::size_t fi = 2 + rng.index(5), fo = 1 + rng.index(4);
    run(Network({Layer::dense(fi, fo)}), {1 + rng.index(3), fi});
  }
  for (int t = 0; t < 4; ++t) {
    const std::size_t k = 1 + rng.index(3), s = 1 + rng.index(2), p = rng.index(k);
    const std::size_t ci = 1 + rng.index(3);
    run(Network({Layer::conv2d({ci, 1 + rng.index(3), k, s, p})}),
        {1 + rng.index(2), ci, k + 1 + rng.index(4), k + 1 + rng.index(4)});
  }
  for (int t = 0; t < 4; ++t) {
    const std::size_t k = 2 + rng.index(3), s = 1 + rng.index(2);
    const std::size_t p = rng.index(std::min<std::size_t>(k, 2));
    const std::size_t ci = 1 + rng.index(3);
    run(Network({Layer::conv_transpose2d({ci, 1 + rng.index(3), k, s, p})}),
        {1 + rng.index(2), ci, 2 + rng.index(3), 2 + rng.index(3)});
  }
  for (int t = 0; t < 3; ++t) {
    const std::size_t c = 1 + rng.index(3);
    run(Network({Layer::residual(c)}), {1 + rng.index(2), c, 3 + rng.index(3), 3 + rng.index(3)});
  }
  for (int t = 0; t < 2; ++t) {
    run(Network({Layer::conv2d({1, 2, 3, 1, 1}), Layer::sigmoid()}), {2, 1, 4, 3 + rng.index(3)});
    run(Network({Layer::conv2d({1, 2, 3, 1, 1}), Layer::relu()}), {2, 1, 4, 3 + rng.index(3)});
    run(Network({Layer::conv2d({2, 2, 3, 1, 1}), Layer::maxpool2x2()}),
        {1, 2, 4 + 2 * rng.index(2), 5});
    run(Network({Layer::conv2d({1, 2, 3, 1, 0}), Layer::flatten(), Layer::dense(8, 3)}),
        {2, 1, 4, 4});
  }
  run(Network({Layer::conv2d({1, 4, 3, 1, 1}), Layer::relu(), Layer::maxpool2x2(),
               Layer::residual(4), Layer::conv_transpose2d({4, 1, 4, 2, 1}), Layer::sigmoid()}),
      {2, 1, 6, 6});
  CHECK(checked >= 20);
}

TEST_CASE("transposed conv is the input adjoint of conv") {
  Rng rng(5);
  for (int t = 0; t < 8; ++t) {
    const std::size_t k = 2 + rng.index(3), s = 1 + rng.index(2), p = rng.index(std::min<std::size_t>(k, 2));
    const std::size_t ci = 1 + rng.index(3), co = 1 + rng.index(3);
    Layer conv = Layer::conv2d({ci, co, k, s, p});
    conv.init_kaiming(rng);
    Layer convt = Layer::conv_transpose2d({co, ci, k, s, p});
    convt.params()[0] = Tensor(conv.params()[0].shape(), conv.params()[0].values());
    // choose an image size that the transposed conv maps back to exactly
    const std::size_t hin = 2 + rng.index(3), win = 2 + rng.index(3);
    const Shape img = convt.output_shape({1, co, hin, win});
    conv.forward(Tensor(img));
    REQUIRE(conv.output_shape(img) == Shape({1, co, hin, win}));
    const Tensor g = random_tensor({1, co, hin, win}, rng);
    const Tensor back = conv.backward(g);
    const Tensor fwd = convt.forward(g);
    REQUIRE(back.shape() == fwd.shape());
    for (std::size_t i = 0; i < fwd.size(); ++i) CHECK(fwd[i] == doctest::Approx(back[i]).epsilon(1e-12));
  }
}

TEST_CASE("output shape is a pure function of input shape and hyper") {
  Rng rng(17);
  for (int t = 0; t < 50; ++t) {
    const std::size_t k = 1 + rng.index(4), s = 1 + rng.index(3), p = rng.index(k);
    const std::size_t ci = 1 + rng.index(3), co = 1 + rng.index(3);
    const Shape in{1 + rng.index(2), ci, k + rng.index(7), k + rng.index(7)};
    Layer conv = Layer::conv2d({ci, co, k, s, p});
    const Shape declared = conv.output_shape(in);
    CHECK(conv.forward(Tensor(in)).shape() == declared);
    CHECK(conv.output_shape(in) == declared);
    Layer convt = Layer::conv_transpose2d({ci, co, k + 1, s, std::min(p, k / 2)});
    CHECK(convt.forward(Tensor(in)).shape() == convt.output_shape(in));
  }
}

TEST_CASE("loss gradients match finite differences") {
  Rng rng(8);
  Tensor logits = random_tensor({4, 5}, rng, -2, 2);
  const std::vector<int> labels{0, 3, 4, 1};
  auto ce = softmax_cross_entropy(logits, labels);
  auto num = ressfl::testing::numeric_gradient(
      [&] { return softmax_cross_entropy(logits, labels).value; }, logits.values());
  CHECK(ressfl::testing::relative_error(ce.grad.values(), num) < 1e-6);

  Tensor pred = random_tensor({2, 1, 3, 3}, rng);
  const Tensor target = random_tensor({2, 1, 3, 3}, rng);
  auto ml = mse_loss(pred, target);
  num = ressfl::testing::numeric_gradient([&] { return mse_loss(pred, target).value; },
                                          pred.values());
  CHECK(ressfl::testing::relative_error(ml.grad.values(), num) < 1e-6);
  CHECK_THROWS_AS(softmax_cross_entropy(logits, std::vector<int>{0, 1, 9, 2}), ConfigError);
}

TEST_CASE("sgd step arithmetic") {
  Tensor w({1}, 1.0);
  w.grad()[0] = 1.0;
  std::vector<ParamRef> params{{&w, false}};
  Optimizer plain = Optimizer::sgd(0.1);
  plain.step(params);
  CHECK(w[0] == doctest::Approx(0.9));

  w.grad()[0] = 0.0;
  Optimizer again = Optimizer::sgd(0.1);
  again.step(params);
  CHECK(w[0] == doctest::Approx(0.9));

  Tensor m({1}, 0.0);
  std::vector<ParamRef> mp{{&m, false}};
  Optimizer mom = Optimizer::sgd(0.1, 0.9);
  m.grad()[0] = 1.0;
  mom.step(mp);
  CHECK(m[0] == doctest::Approx(-0.1));
  mom.step(mp);
  CHECK(m[0] == doctest::Approx(-0.29));
  CHECK(mom.state().step_count == 2);
}

TEST_CASE("adam step arithmetic and determinism") {
  Tensor w({1}, 0.0);
  std::vector<ParamRef> params{{&w, false}};
  Optimizer zero = Optimizer::adam(0.001);
  w.zero_grad();
  zero.step(params);
  CHECK(w[0] == 0.0);

  Optimizer adam = Optimizer::adam(0.001);
  w.grad()[0] = 1.0;
  adam.step(params);
  CHECK(w[0] == doctest::Approx(-0.001).epsilon(1e-6));

  auto run = [] {
    Rng rng(42);
    Tensor p = random_tensor({3, 3}, rng);
    std::vector<ParamRef> ps{{&p, false}};
    Optimizer o = Optimizer::adam(0.001);
    for (int i = 0; i < 5; ++i) {
      for (auto& g : p.grad()) g = rng.uniform(-1, 1);
      o.step(ps);
    }
    return p.values();
  };
  CHECK(run() == run());
}

TEST_CASE("optimizer errors") {
  CHECK_THROWS_AS(Optimizer::sgd(0.0), ConfigError);
  CHECK_THROWS_AS(Optimizer::adam(-1.0), ConfigError);
  Tensor a({2}), b({3});
  a.zero_grad();
  b.zero_grad();
  Optimizer o = Optimizer::sgd(0.1);
  std::vector<ParamRef> first{{&a, false}};
  o.step(first);
  std::vector<ParamRef> second{{&b, false}};
  CHECK_THROWS_AS(o.step(second), ShapeError);
  OptimizerState adam_state;
  adam_state.kind = OptimizerKind::kAdam;
  CHECK_THROWS_AS(sgd_step(adam_state, first), StateError);
}

TEST_CASE("frozen layer keeps its gradient but not its update") {
  Network net({Layer::dense(3, 2), Layer::relu(), Layer::dense(2, 1)});
  Rng rng(9);
  net.init_kaiming(rng);
  net.layer(0).set_frozen(true);
  const auto before = net.snapshot();
  net.zero_grad();
  net.forward(random_tensor({4, 3}, rng));
  net.backward(Tensor({4, 1}, 1.0));
  double gsum = 0;
  for (double g : net.layer(0).params()[0].grad()) gsum += std::abs(g);
  CHECK(gsum > 0.0);
  Optimizer o = Optimizer::sgd(0.1);
  o.step(net.parameters());
  const auto after = net.snapshot();
  CHECK(after[0] == before[0]);
  CHECK(after[1] == before[1]);
  CHECK_FALSE(after[2] == before[2]);
}

TEST_CASE("step decay schedule") {
  CHECK(step_decay(0.05, 0, 10) == doctest::Approx(0.05));
  CHECK(step_decay(0.05, 4, 10) == doctest::Approx(0.05));
  CHECK(step_decay(0.05, 5, 10) == doctest::Approx(0.01));
  CHECK(step_decay(0.05, 8, 10) == doctest::Approx(0.002));
}
