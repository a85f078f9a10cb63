#pragma once

#include <span>

#include "ressfl/tensor.hpp"

namespace ressfl {

inline constexpr double kPsnrCapDb = 100.0;
inline constexpr double kPsnrMseFloor = 1e-10;
inline constexpr std::size_t kSsimWindow = 7;

struct MetricResult {
  double mse = 0.0;
  double ssim = 0.0;
  double psnr = 0.0;
};

/// Mean squared difference over all elements.
double mse(const Tensor& x, const Tensor& y);

/// Mean local SSIM, dynamic range 1, uniform 7x7 window (valid positions),
/// averaged per channel then over the batch. Planes smaller than the window
/// use one global window. The trailing two dims are spatial.
double ssim(const Tensor& x, const Tensor& y);

struct SsimWithGrad {
  double value = 0.0;
  Tensor grad;  // d ssim / d x
};
SsimWithGrad ssim_with_grad(const Tensor& x, const Tensor& y);

double psnr_from_mse(double mse_value);
double psnr(const Tensor& x, const Tensor& y);

MetricResult image_metrics(const Tensor& reconstruction, const Tensor& truth);

/// Argmax accuracy in percent; ties go to the lower class index.
double accuracy(const Tensor& outputs, std::span<const int> labels);

}  // namespace ressfl
