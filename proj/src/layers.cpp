#include "ressfl/layers.hpp"

// Always route products through the packed GEMM kernels: the small-size
// lazy product and vectorised reductions peel by runtime address, so their
// rounding would depend on where the allocator put the buffers.
#define EIGEN_GEMM_TO_COEFFBASED_THRESHOLD 0
#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ressfl/error.hpp"

namespace ressfl {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

struct Geometry {
  std::size_t n, c, h, w;     // image side
  std::size_t k, s, p;        // kernel
  std::size_t oh, ow;         // conv output side

  std::size_t patch() const { return c * k * k; }
  std::size_t cols() const { return n * oh * ow; }
};

std::size_t conv_out(std::size_t in, std::size_t k, std::size_t s, std::size_t p) {
  return (in + 2 * p - k) / s + 1;
}

// Image [n, c, h, w] -> column matrix [c*k*k, n*oh*ow].
void im2col(const double* x, const Geometry& g, double* col) {
  const std::size_t hw = g.oh * g.ow;
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        double* row = col + ((c * g.k + ki) * g.k + kj) * ncols;
        for (std::size_t n = 0; n < g.n; ++n) {
          const double* img = x + (n * g.c + c) * g.h * g.w;
          double* dst = row + n * hw;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const long iy = static_cast<long>(oy * g.s + ki) - static_cast<long>(g.p);
            if (iy < 0 || iy >= static_cast<long>(g.h)) {
              std::fill(dst + oy * g.ow, dst + (oy + 1) * g.ow, 0.0);
              continue;
            }
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long ix = static_cast<long>(ox * g.s + kj) - static_cast<long>(g.p);
              dst[oy * g.ow + ox] = (ix < 0 || ix >= static_cast<long>(g.w))
                                        ? 0.0
                                        : img[iy * g.w + ix];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: accumulates columns back into a zeroed image buffer.
void col2im(const double* col, const Geometry& g, double* x) {
  const std::size_t hw = g.oh * g.ow;
  const std::size_t ncols = g.cols();
  for (std::size_t c = 0; c < g.c; ++c) {
    for (std::size_t ki = 0; ki < g.k; ++ki) {
      for (std::size_t kj = 0; kj < g.k; ++kj) {
        const double* row = col + ((c * g.k + ki) * g.k + kj) * ncols;
        for (std::size_t n = 0; n < g.n; ++n) {
          double* img = x + (n * g.c + c) * g.h * g.w;
          const double* src = row + n * hw;
          for (std::size_t oy = 0; oy < g.oh; ++oy) {
            const long iy = static_cast<long>(oy * g.s + ki) - static_cast<long>(g.p);
            if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
            for (std::size_t ox = 0; ox < g.ow; ++ox) {
              const long ix = static_cast<long>(ox * g.s + kj) - static_cast<long>(g.p);
              if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
              img[iy * g.w + ix] += src[oy * g.ow + ox];
            }
          }
        }
      }
    }
  }
}

// [n, c, hw] <-> [c, n*hw]
void nchw_to_cm(const double* x, std::size_t n, std::size_t c, std::size_t hw, double* out) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      std::copy_n(x + (i * c + j) * hw, hw, out + j * n * hw + i * hw);
}

void cm_to_nchw(const double* m, std::size_t n, std::size_t c, std::size_t hw, double* out) {
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j)
      std::copy_n(m + j * n * hw + i * hw, hw, out + (i * c + j) * hw);
}

Geometry conv_geometry(const Shape& in, const ConvHyper& hp) {
  Geometry g{in[0], in[1], in[2], in[3], hp.kernel, hp.stride, hp.padding, 0, 0};
  g.oh = conv_out(g.h, g.k, g.s, g.p);
  g.ow = conv_out(g.w, g.k, g.s, g.p);
  return g;
}

Tensor conv_forward(const Tensor& x, const Tensor& weight, const Tensor& bias,
                    const ConvHyper& hp, std::vector<double>* keep_cols) {
  const Geometry g = conv_geometry(x.shape(), hp);
  std::vector<double> cols(g.patch() * g.cols());
  im2col(x.data().data(), g, cols.data());
  const std::size_t co = hp.out_channels;
  RowMat out = CMapMat(weight.data().data(), co, g.patch()) *
               CMapMat(cols.data(), g.patch(), g.cols());
  Tensor y({g.n, co, g.oh, g.ow});
  cm_to_nchw(out.data(), g.n, co, g.oh * g.ow, y.data().data());
  const std::size_t hw = g.oh * g.ow;
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = 0; j < co; ++j) {
      double* dst = y.data().data() + (i * co + j) * hw;
      for (std::size_t q = 0; q < hw; ++q) dst[q] += bias[j];
    }
  if (keep_cols) *keep_cols = std::move(cols);
  return y;
}

Tensor conv_backward(const Tensor& grad_out, const Shape& in_shape, Tensor& weight,
                     Tensor& bias, const ConvHyper& hp, const std::vector<double>& cols) {
  const Geometry g = conv_geometry(in_shape, hp);
  const std::size_t co = hp.out_channels;
  const std::size_t hw = g.oh * g.ow;
  std::vector<double> gm(co * g.cols());
  nchw_to_cm(grad_out.data().data(), g.n, co, hw, gm.data());
  CMapMat gmat(gm.data(), co, g.cols());
  CMapMat cmat(cols.data(), g.patch(), g.cols());
  MapMat(weight.grad().data(), co, g.patch()).noalias() += gmat * cmat.transpose();
  auto db = bias.grad();
  for (std::size_t j = 0; j < co; ++j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < g.cols(); ++k) acc += gm[j * g.cols() + k];
    db[j] += acc;
  }
  RowMat dcols = CMapMat(weight.data().data(), co, g.patch()).transpose() * gmat;
  Tensor dx(in_shape);
  col2im(dcols.data(), g, dx.data().data());
  return dx;
}

// The conv whose input is the transposed conv's output.
Geometry convt_geometry(const Shape& in, const ConvHyper& hp) {
  const std::size_t oh = (in[2] - 1) * hp.stride + hp.kernel - 2 * hp.padding;
  const std::size_t ow = (in[3] - 1) * hp.stride + hp.kernel - 2 * hp.padding;
  return Geometry{in[0], hp.out_channels, oh, ow, hp.kernel, hp.stride, hp.padding, in[2], in[3]};
}

Tensor convt_forward(const Tensor& x, const Tensor& weight, const Tensor& bias,
                     const ConvHyper& hp, std::vector<double>* keep_xm) {
  const Geometry g = convt_geometry(x.shape(), hp);
  const std::size_t ci = hp.in_channels;
  std::vector<double> xm(ci * g.cols());
  nchw_to_cm(x.data().data(), g.n, ci, g.oh * g.ow, xm.data());
  RowMat cols = CMapMat(weight.data().data(), ci, g.patch()).transpose() *
                CMapMat(xm.data(), ci, g.cols());
  Tensor y({g.n, g.c, g.h, g.w});
  col2im(cols.data(), g, y.data().data());
  const std::size_t hw = g.h * g.w;
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = 0; j < g.c; ++j) {
      double* dst = y.data().data() + (i * g.c + j) * hw;
      for (std::size_t q = 0; q < hw; ++q) dst[q] += bias[j];
    }
  if (keep_xm) *keep_xm = std::move(xm);
  return y;
}

Tensor convt_backward(const Tensor& grad_out, const Shape& in_shape, Tensor& weight,
                      Tensor& bias, const ConvHyper& hp, const std::vector<double>& xm) {
  const Geometry g = convt_geometry(in_shape, hp);
  const std::size_t ci = hp.in_channels;
  std::vector<double> gcols(g.patch() * g.cols());
  im2col(grad_out.data().data(), g, gcols.data());
  CMapMat gc(gcols.data(), g.patch(), g.cols());
  CMapMat xmat(xm.data(), ci, g.cols());
  MapMat(weight.grad().data(), ci, g.patch()).noalias() += xmat * gc.transpose();
  auto db = bias.grad();
  const std::size_t hw = g.h * g.w;
  for (std::size_t i = 0; i < g.n; ++i)
    for (std::size_t j = 0; j < g.c; ++j) {
      const double* src = grad_out.data().data() + (i * g.c + j) * hw;
      double acc = 0.0;
      for (std::size_t q = 0; q < hw; ++q) acc += src[q];
      db[j] += acc;
    }
  RowMat dxm = CMapMat(weight.data().data(), ci, g.patch()) * gc;
  Tensor dx(in_shape);
  cm_to_nchw(dxm.data(), g.n, ci, g.oh * g.ow, dx.data().data());
  return dx;
}

double stable_sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

Tensor make_param(Shape shape) {
  Tensor t(std::move(shape));
  t.zero_grad();
  return t;
}

[[noreturn]] void shape_fail(const Layer& layer, const Shape& got, const std::string& want) {
  throw ShapeError(layer.describe() + ": input shape " + shape_str(got) + " incompatible, expected " +
                   want);
}

}  // namespace

std::string to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::kDense: return "Dense";
    case LayerKind::kConv2D: return "Conv2D";
    case LayerKind::kConvTranspose2D: return "ConvTranspose2D";
    case LayerKind::kReLU: return "ReLU";
    case LayerKind::kSigmoid: return "Sigmoid";
    case LayerKind::kMaxPool2x2: return "MaxPool2x2";
    case LayerKind::kFlatten: return "Flatten";
    case LayerKind::kResidual: return "Residual";
  }
  return "?";
}

Layer Layer::dense(std::size_t in_features, std::size_t out_features) {
  if (in_features == 0 || out_features == 0) throw ConfigError("Dense: features must be positive");
  Layer l(LayerKind::kDense);
  l.hyper_.in_channels = in_features;
  l.hyper_.out_channels = out_features;
  l.params_.push_back(make_param({out_features, in_features}));
  l.params_.push_back(make_param({out_features}));
  return l;
}

Layer Layer::conv2d(const ConvHyper& hyper) {
  if (hyper.kernel < 1 || hyper.stride < 1 || hyper.in_channels < 1 || hyper.out_channels < 1) {
    throw ConfigError("Conv2D: kernel, stride and channels must be >= 1");
  }
  Layer l(LayerKind::kConv2D);
  l.hyper_ = hyper;
  l.params_.push_back(
      make_param({hyper.out_channels, hyper.in_channels, hyper.kernel, hyper.kernel}));
  l.params_.push_back(make_param({hyper.out_channels}));
  return l;
}

Layer Layer::conv_transpose2d(const ConvHyper& hyper) {
  if (hyper.kernel < 1 || hyper.stride < 1 || hyper.in_channels < 1 || hyper.out_channels < 1) {
    throw ConfigError("ConvTranspose2D: kernel, stride and channels must be >= 1");
  }
  if (2 * hyper.padding >= hyper.kernel + hyper.stride) {
    throw ConfigError("ConvTranspose2D: padding too large for kernel/stride");
  }
  Layer l(LayerKind::kConvTranspose2D);
  l.hyper_ = hyper;
  l.params_.push_back(
      make_param({hyper.in_channels, hyper.out_channels, hyper.kernel, hyper.kernel}));
  l.params_.push_back(make_param({hyper.out_channels}));
  return l;
}

Layer Layer::relu() { return Layer(LayerKind::kReLU); }
Layer Layer::sigmoid() { return Layer(LayerKind::kSigmoid); }
Layer Layer::maxpool2x2() { return Layer(LayerKind::kMaxPool2x2); }
Layer Layer::flatten() { return Layer(LayerKind::kFlatten); }

Layer Layer::residual(std::size_t channels) {
  if (channels < 1) throw ConfigError("Residual: channels must be >= 1");
  Layer l(LayerKind::kResidual);
  l.hyper_ = ConvHyper{channels, channels, 3, 1, 1};
  for (int i = 0; i < 2; ++i) {
    l.params_.push_back(make_param({channels, channels, 3, 3}));
    l.params_.push_back(make_param({channels}));
  }
  return l;
}

std::string Layer::describe() const {
  std::ostringstream os;
  os << to_string(kind_);
  switch (kind_) {
    case LayerKind::kDense:
      os << '(' << hyper_.in_channels << "->" << hyper_.out_channels << ')';
      break;
    case LayerKind::kConv2D:
    case LayerKind::kConvTranspose2D:
      os << '(' << hyper_.in_channels << "->" << hyper_.out_channels << ",k" << hyper_.kernel
         << ",s" << hyper_.stride << ",p" << hyper_.padding << ')';
      break;
    case LayerKind::kResidual:
      os << '(' << hyper_.in_channels << ')';
      break;
    default:
      break;
  }
  return os.str();
}

std::vector<std::string> Layer::param_names() const {
  switch (kind_) {
    case LayerKind::kDense:
    case LayerKind::kConv2D:
    case LayerKind::kConvTranspose2D:
      return {"weight", "bias"};
    case LayerKind::kResidual:
      return {"conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias"};
    default:
      return {};
  }
}

void Layer::check_input(const Shape& in) const {
  switch (kind_) {
    case LayerKind::kDense:
      if (in.size() != 2 || in[1] != hyper_.in_channels)
        shape_fail(*this, in, "[N," + std::to_string(hyper_.in_channels) + "]");
      break;
    case LayerKind::kConv2D:
    case LayerKind::kResidual:
      if (in.size() != 4 || in[1] != hyper_.in_channels ||
          in[2] + 2 * hyper_.padding < hyper_.kernel ||
          in[3] + 2 * hyper_.padding < hyper_.kernel)
        shape_fail(*this, in,
                   "[N," + std::to_string(hyper_.in_channels) + ",H,W] with H,W+2p >= k");
      break;
    case LayerKind::kConvTranspose2D:
      if (in.size() != 4 || in[1] != hyper_.in_channels)
        shape_fail(*this, in, "[N," + std::to_string(hyper_.in_channels) + ",H,W]");
      break;
    case LayerKind::kMaxPool2x2:
      if (in.size() != 4 || in[2] < 2 || in[3] < 2) shape_fail(*this, in, "[N,C,H>=2,W>=2]");
      break;
    case LayerKind::kFlatten:
      if (in.size() < 2) shape_fail(*this, in, "rank >= 2");
      break;
    case LayerKind::kReLU:
    case LayerKind::kSigmoid:
      if (in.empty()) shape_fail(*this, in, "non-scalar");
      break;
  }
}

Shape Layer::output_shape(const Shape& in) const {
  check_input(in);
  switch (kind_) {
    case LayerKind::kDense:
      return {in[0], hyper_.out_channels};
    case LayerKind::kConv2D:
      return {in[0], hyper_.out_channels, conv_out(in[2], hyper_.kernel, hyper_.stride, hyper_.padding),
              conv_out(in[3], hyper_.kernel, hyper_.stride, hyper_.padding)};
    case LayerKind::kConvTranspose2D: {
      const Geometry g = convt_geometry(in, hyper_);
      return {in[0], hyper_.out_channels, g.h, g.w};
    }
    case LayerKind::kMaxPool2x2:
      return {in[0], in[1], in[2] / 2, in[3] / 2};
    case LayerKind::kFlatten:
      return {in[0], shape_numel(in) / in[0]};
    case LayerKind::kReLU:
    case LayerKind::kSigmoid:
    case LayerKind::kResidual:
      return in;
  }
  return in;
}

Tensor Layer::forward(const Tensor& input) {
  Cache cache;
  Tensor out = run(input, &cache);
  cache_ = std::move(cache);
  cached_ = true;
  return out;
}

Tensor Layer::infer(const Tensor& input) const { return run(input, nullptr); }

void Layer::clear_cache() {
  cache_ = Cache{};
  cached_ = false;
}

Tensor Layer::run(const Tensor& input, Cache* cache) const {
  const Shape& in = input.shape();
  check_input(in);
  if (cache) cache->in_shape = in;
  switch (kind_) {
    case LayerKind::kDense: {
      const std::size_t n = in[0];
      const std::size_t fi = hyper_.in_channels;
      const std::size_t fo = hyper_.out_channels;
      Tensor y({n, fo});
      MapMat(y.data().data(), n, fo).noalias() =
          CMapMat(input.data().data(), n, fi) * CMapMat(params_[0].data().data(), fo, fi).transpose();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < fo; ++j) y[i * fo + j] += params_[1][j];
      if (cache) cache->slots = {input.values()};
      return y;
    }
    case LayerKind::kConv2D: {
      std::vector<double> cols;
      Tensor y = conv_forward(input, params_[0], params_[1], hyper_, cache ? &cols : nullptr);
      if (cache) cache->slots = {std::move(cols)};
      return y;
    }
    case LayerKind::kConvTranspose2D: {
      std::vector<double> xm;
      Tensor y = convt_forward(input, params_[0], params_[1], hyper_, cache ? &xm : nullptr);
      if (cache) cache->slots = {std::move(xm)};
      return y;
    }
    case LayerKind::kReLU: {
      Tensor y(in);
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = input[i] > 0.0 ? input[i] : 0.0;
      if (cache) cache->slots = {y.values()};
      return y;
    }
    case LayerKind::kSigmoid: {
      Tensor y(in);
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = stable_sigmoid(input[i]);
      if (cache) cache->slots = {y.values()};
      return y;
    }
    case LayerKind::kMaxPool2x2: {
      const std::size_t n = in[0], c = in[1], h = in[2], w = in[3];
      const std::size_t oh = h / 2, ow = w / 2;
      Tensor y({n, c, oh, ow});
      std::vector<std::size_t> arg(y.size());
      std::size_t o = 0;
      for (std::size_t p = 0; p < n * c; ++p) {
        const double* img = input.data().data() + p * h * w;
        for (std::size_t i = 0; i < oh; ++i)
          for (std::size_t j = 0; j < ow; ++j, ++o) {
            std::size_t best = (2 * i) * w + 2 * j;
            for (std::size_t di = 0; di < 2; ++di)
              for (std::size_t dj = 0; dj < 2; ++dj) {
                const std::size_t idx = (2 * i + di) * w + 2 * j + dj;
                if (img[idx] > img[best]) best = idx;
              }
            y[o] = img[best];
            arg[o] = p * h * w + best;
          }
      }
      if (cache) cache->argmax = std::move(arg);
      return y;
    }
    case LayerKind::kFlatten:
      return input.reshaped(output_shape(in));
    case LayerKind::kResidual: {
      std::vector<double> cols1, cols2;
      Tensor h1 = conv_forward(input, params_[0], params_[1], hyper_, cache ? &cols1 : nullptr);
      for (auto& v : h1.values()) v = v > 0.0 ? v : 0.0;
      Tensor z = conv_forward(h1, params_[2], params_[3], hyper_, cache ? &cols2 : nullptr);
      for (std::size_t i = 0; i < z.size(); ++i) {
        const double s = z[i] + input[i];
        z[i] = s > 0.0 ? s : 0.0;
      }
      if (cache) cache->slots = {std::move(cols1), std::move(h1.values()), std::move(cols2), z.values()};
      return z;
    }
  }
  return input;
}

Tensor Layer::backward(const Tensor& grad_output) {
  if (!cached_) {
    throw StateError(describe() + ": backward called without a preceding forward");
  }
  const Shape expected = output_shape(cache_.in_shape);
  if (grad_output.shape() != expected) {
    throw ShapeError(describe() + ": output gradient shape " + shape_str(grad_output.shape()) +
                     " does not match output shape " + shape_str(expected));
  }
  const Shape& in = cache_.in_shape;
  Tensor dx;
  switch (kind_) {
    case LayerKind::kDense: {
      const std::size_t n = in[0], fi = hyper_.in_channels, fo = hyper_.out_channels;
      CMapMat g(grad_output.data().data(), n, fo);
      CMapMat x(cache_.slots[0].data(), n, fi);
      MapMat(params_[0].grad().data(), fo, fi).noalias() += g.transpose() * x;
      auto db = params_[1].grad();
      const double* gp = grad_output.data().data();
      for (std::size_t j = 0; j < fo; ++j) {
        double acc = 0.0;
        for (std::size_t r = 0; r < n; ++r) acc += gp[r * fo + j];
        db[j] += acc;
      }
      dx = Tensor(in);
      MapMat(dx.data().data(), n, fi).noalias() = g * CMapMat(params_[0].data().data(), fo, fi);
      break;
    }
    case LayerKind::kConv2D:
      dx = conv_backward(grad_output, in, params_[0], params_[1], hyper_, cache_.slots[0]);
      break;
    case LayerKind::kConvTranspose2D:
      dx = convt_backward(grad_output, in, params_[0], params_[1], hyper_, cache_.slots[0]);
      break;
    case LayerKind::kReLU: {
      dx = Tensor(in);
      const auto& y = cache_.slots[0];
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = y[i] > 0.0 ? grad_output[i] : 0.0;
      break;
    }
    case LayerKind::kSigmoid: {
      dx = Tensor(in);
      const auto& y = cache_.slots[0];
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = grad_output[i] * y[i] * (1.0 - y[i]);
      break;
    }
    case LayerKind::kMaxPool2x2: {
      dx = Tensor(in);
      for (std::size_t o = 0; o < grad_output.size(); ++o) dx[cache_.argmax[o]] += grad_output[o];
      break;
    }
    case LayerKind::kFlatten:
      dx = grad_output.reshaped(in);
      break;
    case LayerKind::kResidual: {
      const auto& out = cache_.slots[3];
      Tensor gz(in);
      for (std::size_t i = 0; i < gz.size(); ++i) gz[i] = out[i] > 0.0 ? grad_output[i] : 0.0;
      Tensor gh = conv_backward(gz, in, params_[2], params_[3], hyper_, cache_.slots[2]);
      const auto& h1 = cache_.slots[1];
      for (std::size_t i = 0; i < gh.size(); ++i)
        if (!(h1[i] > 0.0)) gh[i] = 0.0;
      dx = conv_backward(gh, in, params_[0], params_[1], hyper_, cache_.slots[0]);
      for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += gz[i];
      break;
    }
  }
  clear_cache();
  return dx;
}

void Layer::init_kaiming(Rng& rng) {
  if (params_.empty()) return;
  auto fill = [&](Tensor& w, std::size_t fan_in) {
    const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
    for (auto& v : w.values()) v = rng.uniform(-bound, bound);
  };
  const std::size_t kk = hyper_.kernel * hyper_.kernel;
  switch (kind_) {
    case LayerKind::kDense:
      fill(params_[0], hyper_.in_channels);
      break;
    case LayerKind::kConv2D:
    case LayerKind::kConvTranspose2D:
      fill(params_[0], hyper_.in_channels * kk);
      break;
    case LayerKind::kResidual:
      fill(params_[0], hyper_.in_channels * kk);
      std::fill(params_[2].values().begin(), params_[2].values().end(), 0.0);
      std::fill(params_[3].values().begin(), params_[3].values().end(), 0.0);
      break;
    default:
      break;
  }
  std::fill(params_[1].values().begin(), params_[1].values().end(), 0.0);
}

std::uint64_t Layer::flops(const Shape& in) const {
  const Shape out = output_shape(in);
  const std::uint64_t kk = hyper_.kernel * hyper_.kernel;
  switch (kind_) {
    case LayerKind::kDense:
      return 2ULL * in[0] * hyper_.in_channels * hyper_.out_channels;
    case LayerKind::kConv2D:
      return 2ULL * kk * hyper_.in_channels * hyper_.out_channels * out[0] * out[2] * out[3];
    case LayerKind::kConvTranspose2D:
      return 2ULL * kk * hyper_.in_channels * hyper_.out_channels * in[0] * in[2] * in[3];
    case LayerKind::kResidual:
      // two convs, inner relu, skip add, outer relu
      return 2 * (2ULL * kk * hyper_.in_channels * hyper_.out_channels * in[0] * in[2] * in[3]) +
             3ULL * shape_numel(in);
    case LayerKind::kReLU:
    case LayerKind::kSigmoid:
    case LayerKind::kMaxPool2x2:
      return shape_numel(in);
    case LayerKind::kFlatten:
      return 0;
  }
  return 0;
}

}  // namespace ressfl
