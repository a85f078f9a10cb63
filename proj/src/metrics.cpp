#include "ressfl/metrics.hpp"

#include <cmath>

#include "ressfl/error.hpp"

namespace ressfl {

namespace {

constexpr double kC1 = 0.01 * 0.01;
constexpr double kC2 = 0.03 * 0.03;

struct PlaneLayout {
  std::size_t planes, h, w;
};

PlaneLayout layout_of(const Tensor& t) {
  if (t.rank() < 2) throw ShapeError("ssim: need at least 2 spatial dims, got " + shape_str(t.shape()));
  const std::size_t h = t.dim(t.rank() - 2);
  const std::size_t w = t.dim(t.rank() - 1);
  return {t.size() / (h * w), h, w};
}

// Mean SSIM of one plane; adds d(mean)/dx * scale into gx when non-null.
double plane_ssim(const double* x, const double* y, std::size_t h, std::size_t w, double* gx,
                  double scale) {
  const bool global = h < kSsimWindow || w < kSsimWindow;
  const std::size_t wh = global ? h : kSsimWindow;
  const std::size_t ww = global ? w : kSsimWindow;
  const std::size_t ny = h - wh + 1, nx = w - ww + 1;
  const double inv_n = 1.0 / static_cast<double>(wh * ww);
  const double inv_windows = 1.0 / static_cast<double>(ny * nx);
  double total = 0.0;
  for (std::size_t oy = 0; oy < ny; ++oy) {
    for (std::size_t ox = 0; ox < nx; ++ox) {
      double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
      for (std::size_t i = 0; i < wh; ++i) {
        const double* xr = x + (oy + i) * w + ox;
        const double* yr = y + (oy + i) * w + ox;
        for (std::size_t j = 0; j < ww; ++j) {
          sx += xr[j];
          sy += yr[j];
          sxx += xr[j] * xr[j];
          syy += yr[j] * yr[j];
          sxy += xr[j] * yr[j];
        }
      }
      const double mx = sx * inv_n, my = sy * inv_n;
      const double vx = sxx * inv_n - mx * mx;
      const double vy = syy * inv_n - my * my;
      const double cxy = sxy * inv_n - mx * my;
      const double a1 = 2 * mx * my + kC1, a2 = 2 * cxy + kC2;
      const double b1 = mx * mx + my * my + kC1, b2 = vx + vy + kC2;
      const double s = (a1 * a2) / (b1 * b2);
      total += s;
      if (gx) {
        // partials w.r.t. (mean x, E[x^2], E[xy]) holding the others fixed
        const double bb = b1 * b2;
        const double d_mx = (2 * my * a2 + a1 * (-2 * my)) / bb - s * (2 * mx / b1 - 2 * mx / b2);
        const double d_exx = -s / b2;
        const double d_exy = 2 * a1 / bb;
        const double k = scale * inv_windows * inv_n;
        for (std::size_t i = 0; i < wh; ++i) {
          const std::size_t row = (oy + i) * w + ox;
          for (std::size_t j = 0; j < ww; ++j) {
            gx[row + j] += k * (d_mx + 2 * x[row + j] * d_exx + y[row + j] * d_exy);
          }
        }
      }
    }
  }
  return total * inv_windows;
}

double ssim_impl(const Tensor& x, const Tensor& y, Tensor* grad) {
  require_same_shape(x, y, "ssim");
  const PlaneLayout lay = layout_of(x);
  const double inv_planes = 1.0 / static_cast<double>(lay.planes);
  double total = 0.0;
  for (std::size_t p = 0; p < lay.planes; ++p) {
    const std::size_t off = p * lay.h * lay.w;
    total += plane_ssim(x.data().data() + off, y.data().data() + off, lay.h, lay.w,
                        grad ? grad->data().data() + off : nullptr, inv_planes);
  }
  const double v = total * inv_planes;
  if (!std::isfinite(v)) throw NumericError("ssim is not finite");
  return v;
}

}  // namespace

double mse(const Tensor& x, const Tensor& y) {
  require_same_shape(x, y, "mse");
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    acc += d * d;
  }
  return acc / static_cast<double>(x.size());
}

double ssim(const Tensor& x, const Tensor& y) { return ssim_impl(x, y, nullptr); }

SsimWithGrad ssim_with_grad(const Tensor& x, const Tensor& y) {
  SsimWithGrad r{0.0, Tensor(x.shape())};
  r.value = ssim_impl(x, y, &r.grad);
  return r;
}

double psnr_from_mse(double mse_value) {
  if (mse_value < kPsnrMseFloor) return kPsnrCapDb;
  return 10.0 * std::log10(1.0 / mse_value);
}

double psnr(const Tensor& x, const Tensor& y) { return psnr_from_mse(mse(x, y)); }

MetricResult image_metrics(const Tensor& reconstruction, const Tensor& truth) {
  MetricResult r;
  r.mse = mse(reconstruction, truth);
  r.ssim = ssim(reconstruction, truth);
  r.psnr = psnr_from_mse(r.mse);
  return r;
}

double accuracy(const Tensor& outputs, std::span<const int> labels) {
  if (outputs.rank() != 2 || outputs.dim(0) != labels.size()) {
    throw ShapeError("accuracy: outputs " + shape_str(outputs.shape()) + " vs " +
                     std::to_string(labels.size()) + " labels");
  }
  const std::size_t n = outputs.dim(0), k = outputs.dim(1);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j)
      if (outputs[i * k + j] > outputs[i * k + best]) best = j;
    correct += static_cast<int>(best) == labels[i] ? 1 : 0;
  }
  return 100.0 * static_cast<double>(correct) / static_cast<double>(n);
}

}  // namespace ressfl
