#include <doctest.h>

#include <cmath>

#include "ressfl/metrics.hpp"
#include "test_support.hpp"

using namespace ressfl;
using ressfl::testing::random_tensor;

TEST_CASE("ssim of an image with itself is one") {
  Rng rng(1);
  for (int t = 0; t < 10; ++t) {
    const Tensor x = random_tensor({2, 1 + rng.index(3), 7 + rng.index(10), 7 + rng.index(10)}, rng, 0, 1);
    CHECK(ssim(x, x) == doctest::Approx(1.0).epsilon(1e-12));
  }
  const Tensor small = random_tensor({1, 1, 4, 5}, rng, 0, 1);
  CHECK(ssim(small, small) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("constant images follow the closed form") {
  // sigma = 0: SSIM = (2 mu_x mu_y + C1) / (mu_x^2 + mu_y^2 + C1), C1 = 0.01^2.
  const double c1 = 1e-4;
  const double expect = (2 * 0.2 * 0.8 + c1) / (0.04 + 0.64 + c1);
  CHECK(expect == doctest::Approx(0.4707).epsilon(1e-3));
  CHECK(ssim(Tensor({1, 1, 8, 8}, 0.2), Tensor({1, 1, 8, 8}, 0.8)) == doctest::Approx(expect).epsilon(1e-12));
  CHECK(ssim(Tensor({1, 1, 3, 3}, 0.2), Tensor({1, 1, 3, 3}, 0.8)) == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("mse and psnr") {
  Rng rng(2);
  const Tensor x = random_tensor({3, 1, 8, 8}, rng, 0, 1), y = random_tensor({3, 1, 8, 8}, rng, 0, 1);
  double acc = 0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += (x[i] - y[i]) * (x[i] - y[i]);
  const double m = acc / static_cast<double>(x.size());
  CHECK(mse(x, y) == doctest::Approx(m).epsilon(1e-14));
  CHECK(psnr(x, y) == 10.0 * std::log10(1.0 / mse(x, y)));
  CHECK(psnr_from_mse(0.01) == 10.0 * std::log10(1.0 / 0.01));
  CHECK(psnr(x, x) == kPsnrCapDb);
  const MetricResult r = image_metrics(x, y);
  CHECK(r.mse == mse(x, y));
  CHECK(r.ssim == ssim(x, y));
}

TEST_CASE("ssim gradient matches finite differences") {
  Rng rng(3);
  Tensor x = random_tensor({2, 1, 9, 8}, rng, 0.1, 0.9);
  const Tensor y = random_tensor({2, 1, 9, 8}, rng, 0.1, 0.9);
  const SsimWithGrad g = ssim_with_grad(x, y);
  CHECK(g.value == doctest::Approx(ssim(x, y)).epsilon(1e-14));
  const auto num = testing::numeric_gradient([&] { return ssim(x, y); }, x.values());
  CHECK(testing::relative_error(g.grad.values(), num) < 1e-6);
}

TEST_CASE("accuracy ties go to the lower class") {
  Tensor out({3, 3}, 0.0);
  out.values() = {1, 1, 0, 0, 2, 2, 5, 0, 0};
  const std::vector<int> labels = {0, 1, 2};
  CHECK(accuracy(out, labels) == doctest::Approx(200.0 / 3.0));
}
