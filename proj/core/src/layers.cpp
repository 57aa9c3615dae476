#include "cseg/layers.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>

#include "cseg/errors.hpp"

namespace cseg {
namespace {

// All kernels work on three spatial axes; 2D tensors get a trailing unit axis.
using Ext3 = std::array<std::size_t, 3>;

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using MapMat = Eigen::Map<RowMat<T>>;
template <typename T>
using ConstMapMat = Eigen::Map<const RowMat<T>>;

std::size_t prod(const Ext3& e) { return e[0] * e[1] * e[2]; }

void require_feature_map(const Shape& s, const char* what) {
  if (s.size() != 4 && s.size() != 5)
    throw ShapeError(std::string(what) + ": expected [b,c,S...] with 2 or 3 spatial axes, got " + shape_str(s));
}

Ext3 spatial_of(const Shape& s) {
  Ext3 e{1, 1, 1};
  for (std::size_t i = 2; i < s.size(); ++i) e[i - 2] = s[i];
  return e;
}

Ext3 expand(std::span<const std::size_t> v, std::size_t rank, std::size_t fill_missing, const char* name) {
  Ext3 e{fill_missing, fill_missing, fill_missing};
  if (v.size() == 1) {
    for (std::size_t i = 0; i < rank; ++i) e[i] = v[0];
  } else if (v.size() == rank) {
    for (std::size_t i = 0; i < rank; ++i) e[i] = v[i];
  } else {
    throw ShapeError(std::string(name) + ": expected 1 or " + std::to_string(rank) + " entries, got " +
                     std::to_string(v.size()));
  }
  return e;
}

Shape make_shape(std::size_t b, std::size_t c, const Ext3& e, std::size_t rank) {
  Shape s{b, c};
  for (std::size_t i = 0; i < rank; ++i) s.push_back(e[i]);
  return s;
}

// Gathers kernel-sized neighbourhoods into columns. `img` has `channels` planes
// of extent `img_ext`; the column matrix is (channels*prod(k)) x prod(pos_ext)
// and row (c, k0, k1, k2) holds img[c, p*stride + k - pad] for each position p.
template <typename T>
void im2col(const T* img, std::size_t channels, const Ext3& img_ext, const Ext3& k, const Ext3& stride,
            const Ext3& pad, const Ext3& pos_ext, T* col) {
  const std::size_t npos = prod(pos_ext);
  const std::size_t plane = prod(img_ext);
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    const T* src = img + c * plane;
    for (std::size_t a = 0; a < k[0]; ++a)
      for (std::size_t b = 0; b < k[1]; ++b)
        for (std::size_t d = 0; d < k[2]; ++d, ++row) {
          T* dst = col + row * npos;
          for (std::size_t o0 = 0; o0 < pos_ext[0]; ++o0) {
            const long i0 = static_cast<long>(o0 * stride[0] + a) - static_cast<long>(pad[0]);
            for (std::size_t o1 = 0; o1 < pos_ext[1]; ++o1) {
              const long i1 = static_cast<long>(o1 * stride[1] + b) - static_cast<long>(pad[1]);
              T* out = dst + (o0 * pos_ext[1] + o1) * pos_ext[2];
              if (i0 < 0 || i1 < 0 || i0 >= static_cast<long>(img_ext[0]) || i1 >= static_cast<long>(img_ext[1])) {
                std::fill(out, out + pos_ext[2], T(0));
                continue;
              }
              const T* line = src + (static_cast<std::size_t>(i0) * img_ext[1] + static_cast<std::size_t>(i1)) * img_ext[2];
              for (std::size_t o2 = 0; o2 < pos_ext[2]; ++o2) {
                const long i2 = static_cast<long>(o2 * stride[2] + d) - static_cast<long>(pad[2]);
                out[o2] = (i2 < 0 || i2 >= static_cast<long>(img_ext[2])) ? T(0) : line[i2];
              }
            }
          }
        }
  }
}

// Adjoint of im2col: scatters (accumulates) columns back into the image.
template <typename T>
void col2im(const T* col, std::size_t channels, const Ext3& img_ext, const Ext3& k, const Ext3& stride,
            const Ext3& pad, const Ext3& pos_ext, T* img) {
  const std::size_t npos = prod(pos_ext);
  const std::size_t plane = prod(img_ext);
  std::size_t row = 0;
  for (std::size_t c = 0; c < channels; ++c) {
    T* dst = img + c * plane;
    for (std::size_t a = 0; a < k[0]; ++a)
      for (std::size_t b = 0; b < k[1]; ++b)
        for (std::size_t d = 0; d < k[2]; ++d, ++row) {
          const T* src = col + row * npos;
          for (std::size_t o0 = 0; o0 < pos_ext[0]; ++o0) {
            const long i0 = static_cast<long>(o0 * stride[0] + a) - static_cast<long>(pad[0]);
            if (i0 < 0 || i0 >= static_cast<long>(img_ext[0])) continue;
            for (std::size_t o1 = 0; o1 < pos_ext[1]; ++o1) {
              const long i1 = static_cast<long>(o1 * stride[1] + b) - static_cast<long>(pad[1]);
              if (i1 < 0 || i1 >= static_cast<long>(img_ext[1])) continue;
              const T* in = src + (o0 * pos_ext[1] + o1) * pos_ext[2];
              T* line = dst + (static_cast<std::size_t>(i0) * img_ext[1] + static_cast<std::size_t>(i1)) * img_ext[2];
              for (std::size_t o2 = 0; o2 < pos_ext[2]; ++o2) {
                const long i2 = static_cast<long>(o2 * stride[2] + d) - static_cast<long>(pad[2]);
                if (i2 >= 0 && i2 < static_cast<long>(img_ext[2])) line[i2] += in[o2];
              }
            }
          }
        }
  }
}

struct ConvGeometry {
  std::size_t rank, batch, c_in, c_out;
  Ext3 in, k, stride, pad, out;
  bool pointwise() const {
    return prod(k) == 1 && stride == Ext3{1, 1, 1} && pad == Ext3{0, 0, 0};
  }
};

template <typename T>
ConvGeometry conv_geometry(const Tensor<T>& input, const Tensor<T>& kernel, std::span<const std::size_t> stride,
                           std::span<const std::size_t> padding) {
  require_feature_map(input.shape(), "conv_forward input");
  ConvGeometry g{};
  g.rank = input.spatial_rank();
  if (kernel.rank() != input.rank())
    throw ShapeError("conv_forward: kernel " + shape_str(kernel.shape()) + " rank does not match input " +
                     shape_str(input.shape()));
  if (kernel.dim(1) != input.channels())
    throw ShapeError("conv_forward: kernel c_in " + std::to_string(kernel.dim(1)) + " does not match input channels " +
                     std::to_string(input.channels()) + " (input " + shape_str(input.shape()) + ", kernel " +
                     shape_str(kernel.shape()) + ")");
  g.batch = input.batch();
  g.c_in = input.channels();
  g.c_out = kernel.dim(0);
  g.in = spatial_of(input.shape());
  g.k = spatial_of(kernel.shape());
  g.stride = expand(stride, g.rank, 1, "stride");
  g.pad = expand(padding, g.rank, 0, "padding");
  for (std::size_t i = 0; i < g.rank; ++i) {
    if (g.k[i] % 2 == 0) throw ShapeError("conv_forward: kernel extents must be odd, got " + shape_str(kernel.shape()));
    if (g.stride[i] == 0) throw ShapeError("conv_forward: stride must be >= 1");
    if (g.in[i] + 2 * g.pad[i] < g.k[i])
      throw ShapeError("conv_forward: kernel " + shape_str(kernel.shape()) + " exceeds padded input " +
                       shape_str(input.shape()));
    g.out[i] = (g.in[i] + 2 * g.pad[i] - g.k[i]) / g.stride[i] + 1;
  }
  for (std::size_t i = g.rank; i < 3; ++i) g.out[i] = 1;
  return g;
}

template <typename T>
void check_bias(const Tensor<T>& bias, std::size_t c_out, const char* op) {
  if (bias.size() != c_out)
    throw ShapeError(std::string(op) + ": bias has " + std::to_string(bias.size()) + " entries, expected " +
                     std::to_string(c_out));
}

}  // namespace

// ---------------------------------------------------------------------------
// convolution

template <typename T>
Tensor<T> conv_forward(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                       std::span<const std::size_t> stride, std::span<const std::size_t> padding,
                       ConvContext<T>* ctx) {
  const ConvGeometry g = conv_geometry(input, kernel, stride, padding);
  check_bias(bias, g.c_out, "conv_forward");

  const std::size_t ck = g.c_in * prod(g.k);
  const std::size_t n_in = prod(g.in);
  const std::size_t n_out = prod(g.out);
  Tensor<T> out(make_shape(g.batch, g.c_out, g.out, g.rank));
  ConstMapMat<T> w(kernel.data(), g.c_out, ck);
  std::vector<T> col;
  if (!g.pointwise()) col.resize(ck * n_out);

  for (std::size_t b = 0; b < g.batch; ++b) {
    const T* x = input.data() + b * g.c_in * n_in;
    const T* cols = x;
    if (!g.pointwise()) {
      im2col(x, g.c_in, g.in, g.k, g.stride, g.pad, g.out, col.data());
      cols = col.data();
    }
    MapMat<T> y(out.data() + b * g.c_out * n_out, g.c_out, n_out);
    y.noalias() = w * ConstMapMat<T>(cols, ck, n_out);
    for (std::size_t co = 0; co < g.c_out; ++co) y.row(co).array() += bias[co];
  }

  if (ctx) {
    ctx->input = input;
    ctx->kernel = kernel;
    ctx->stride.assign(g.stride.begin(), g.stride.begin() + g.rank);
    ctx->padding.assign(g.pad.begin(), g.pad.begin() + g.rank);
    ctx->valid = true;
  }
  return out;
}

template <typename T>
LayerGrad<T> conv_backward(const ConvContext<T>& ctx, const Tensor<T>& out_grad) {
  if (!ctx.valid) throw std::logic_error("conv_backward: missing forward context");
  const ConvGeometry g = conv_geometry(ctx.input, ctx.kernel, ctx.stride, ctx.padding);
  const Shape expected = make_shape(g.batch, g.c_out, g.out, g.rank);
  if (out_grad.shape() != expected)
    throw ShapeError("conv_backward: out_grad " + shape_str(out_grad.shape()) + " does not match forward output " +
                     shape_str(expected));

  const std::size_t ck = g.c_in * prod(g.k);
  const std::size_t n_in = prod(g.in);
  const std::size_t n_out = prod(g.out);

  LayerGrad<T> grad;
  grad.input_grad = Tensor<T>(ctx.input.shape());
  Tensor<T> dw(ctx.kernel.shape());
  Tensor<T> db(Shape{g.c_out});
  ConstMapMat<T> w(ctx.kernel.data(), g.c_out, ck);
  MapMat<T> dw_m(dw.data(), g.c_out, ck);
  std::vector<T> col(g.pointwise() ? 0 : ck * n_out);
  RowMat<T> dcol(ck, n_out);

  for (std::size_t b = 0; b < g.batch; ++b) {
    const T* x = ctx.input.data() + b * g.c_in * n_in;
    const T* cols = x;
    if (!g.pointwise()) {
      im2col(x, g.c_in, g.in, g.k, g.stride, g.pad, g.out, col.data());
      cols = col.data();
    }
    ConstMapMat<T> dy(out_grad.data() + b * g.c_out * n_out, g.c_out, n_out);
    dw_m.noalias() += dy * ConstMapMat<T>(cols, ck, n_out).transpose();
    // Plain loop: Eigen's vectorised sum peels by address, so its order (and
    // rounding) would depend on where the buffer happens to be allocated.
    for (std::size_t co = 0; co < g.c_out; ++co) {
      const T* row = out_grad.data() + (b * g.c_out + co) * n_out;
      T acc = 0;
      for (std::size_t i = 0; i < n_out; ++i) acc += row[i];
      db[co] += acc;
    }

    T* dx = grad.input_grad.data() + b * g.c_in * n_in;
    if (g.pointwise()) {
      MapMat<T>(dx, g.c_in, n_in).noalias() = w.transpose() * dy;
    } else {
      dcol.noalias() = w.transpose() * dy;
      col2im(dcol.data(), g.c_in, g.in, g.k, g.stride, g.pad, g.out, dx);
    }
  }
  grad.param_grads.emplace("weight", std::move(dw));
  grad.param_grads.emplace("bias", std::move(db));
  return grad;
}

// ---------------------------------------------------------------------------
// transposed convolution

namespace {
template <typename T>
ConvGeometry transposed_geometry(const Tensor<T>& input, const Tensor<T>& kernel,
                                 std::span<const std::size_t> stride) {
  require_feature_map(input.shape(), "upsample_transposed_conv input");
  if (kernel.rank() != input.rank() || kernel.dim(0) != input.channels())
    throw ShapeError("upsample_transposed_conv: kernel " + shape_str(kernel.shape()) +
                     " must be [c_in,c_out,K...] matching input " + shape_str(input.shape()));
  ConvGeometry g{};
  g.rank = input.spatial_rank();
  g.batch = input.batch();
  g.c_in = input.channels();
  g.c_out = kernel.dim(1);
  g.in = spatial_of(input.shape());
  g.k = spatial_of(kernel.shape());
  g.stride = expand(stride, g.rank, 1, "stride");
  g.pad = {0, 0, 0};
  for (std::size_t i = 0; i < 3; ++i) {
    if (g.stride[i] == 0) throw ShapeError("upsample_transposed_conv: stride must be >= 1");
    g.out[i] = (g.in[i] - 1) * g.stride[i] + g.k[i];
  }
  return g;
}
}  // namespace

template <typename T>
Tensor<T> upsample_transposed_conv(const Tensor<T>& input, const Tensor<T>& kernel, const Tensor<T>& bias,
                                   std::span<const std::size_t> stride, TransposedConvContext<T>* ctx) {
  const ConvGeometry g = transposed_geometry(input, kernel, stride);
  check_bias(bias, g.c_out, "upsample_transposed_conv");
  const std::size_t ck = g.c_out * prod(g.k);
  const std::size_t n_in = prod(g.in);
  const std::size_t n_out = prod(g.out);

  Tensor<T> out(make_shape(g.batch, g.c_out, g.out, g.rank));
  ConstMapMat<T> w(kernel.data(), g.c_in, ck);
  RowMat<T> col(ck, n_in);
  for (std::size_t b = 0; b < g.batch; ++b) {
    col.noalias() = w.transpose() * ConstMapMat<T>(input.data() + b * g.c_in * n_in, g.c_in, n_in);
    T* y = out.data() + b * g.c_out * n_out;
    col2im(col.data(), g.c_out, g.out, g.k, g.stride, g.pad, g.in, y);
    for (std::size_t co = 0; co < g.c_out; ++co) {
      T* plane = y + co * n_out;
      for (std::size_t i = 0; i < n_out; ++i) plane[i] += bias[co];
    }
  }
  if (ctx) {
    ctx->input = input;
    ctx->kernel = kernel;
    ctx->stride.assign(g.stride.begin(), g.stride.begin() + g.rank);
    ctx->valid = true;
  }
  return out;
}

template <typename T>
LayerGrad<T> upsample_transposed_conv_backward(const TransposedConvContext<T>& ctx, const Tensor<T>& out_grad) {
  if (!ctx.valid) throw std::logic_error("upsample_transposed_conv_backward: missing forward context");
  const ConvGeometry g = transposed_geometry(ctx.input, ctx.kernel, ctx.stride);
  const Shape expected = make_shape(g.batch, g.c_out, g.out, g.rank);
  if (out_grad.shape() != expected)
    throw ShapeError("upsample_transposed_conv_backward: out_grad " + shape_str(out_grad.shape()) +
                     " does not match forward output " + shape_str(expected));
  const std::size_t ck = g.c_out * prod(g.k);
  const std::size_t n_in = prod(g.in);
  const std::size_t n_out = prod(g.out);

  LayerGrad<T> grad;
  grad.input_grad = Tensor<T>(ctx.input.shape());
  Tensor<T> dw(ctx.kernel.shape());
  Tensor<T> db(Shape{g.c_out});
  ConstMapMat<T> w(ctx.kernel.data(), g.c_in, ck);
  MapMat<T> dw_m(dw.data(), g.c_in, ck);
  RowMat<T> dcol(ck, n_in);
  for (std::size_t b = 0; b < g.batch; ++b) {
    const T* dy = out_grad.data() + b * g.c_out * n_out;
    im2col(dy, g.c_out, g.out, g.k, g.stride, g.pad, g.in, dcol.data());
    ConstMapMat<T> x(ctx.input.data() + b * g.c_in * n_in, g.c_in, n_in);
    MapMat<T>(grad.input_grad.data() + b * g.c_in * n_in, g.c_in, n_in).noalias() = w * dcol;
    dw_m.noalias() += x * dcol.transpose();
    for (std::size_t co = 0; co < g.c_out; ++co) {
      const T* plane = dy + co * n_out;
      T s = 0;
      for (std::size_t i = 0; i < n_out; ++i) s += plane[i];
      db[co] += s;
    }
  }
  grad.param_grads.emplace("weight", std::move(dw));
  grad.param_grads.emplace("bias", std::move(db));
  return grad;
}

// ---------------------------------------------------------------------------
// max pooling

template <typename T>
Tensor<T> maxpool(const Tensor<T>& input, std::span<const std::size_t> window, std::span<const std::size_t> stride,
                  MaxPoolContext* ctx) {
  require_feature_map(input.shape(), "maxpool input");
  const std::size_t rank = input.spatial_rank();
  const Ext3 in = spatial_of(input.shape());
  const Ext3 w = expand(window, rank, 1, "window");
  const Ext3 s = expand(stride, rank, 1, "stride");
  Ext3 out{1, 1, 1};
  for (std::size_t i = 0; i < rank; ++i) {
    if (w[i] == 0 || s[i] == 0) throw ShapeError("maxpool: window and stride must be >= 1");
    if (w[i] > in[i])
      throw ShapeError("maxpool: window " + std::to_string(w[i]) + " larger than spatial extent " +
                       std::to_string(in[i]) + " of input " + shape_str(input.shape()));
    out[i] = (in[i] - w[i]) / s[i] + 1;
  }
  const std::size_t planes = input.batch() * input.channels();
  const std::size_t n_in = prod(in);
  const std::size_t n_out = prod(out);
  Tensor<T> result(make_shape(input.batch(), input.channels(), out, rank));
  std::vector<std::size_t> argmax(result.size());

  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = input.data() + p * n_in;
    for (std::size_t o0 = 0; o0 < out[0]; ++o0)
      for (std::size_t o1 = 0; o1 < out[1]; ++o1)
        for (std::size_t o2 = 0; o2 < out[2]; ++o2) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_idx = std::numeric_limits<std::size_t>::max();
          for (std::size_t a = 0; a < w[0]; ++a)
            for (std::size_t b = 0; b < w[1]; ++b)
              for (std::size_t d = 0; d < w[2]; ++d) {
                const std::size_t idx = ((o0 * s[0] + a) * in[1] + (o1 * s[1] + b)) * in[2] + (o2 * s[2] + d);
                if (best_idx == std::numeric_limits<std::size_t>::max() || src[idx] > best) {
                  best = src[idx];
                  best_idx = idx;
                }
              }
          const std::size_t oi = p * n_out + (o0 * out[1] + o1) * out[2] + o2;
          result[oi] = best;
          argmax[oi] = p * n_in + best_idx;
        }
  }
  if (ctx) {
    ctx->input_shape = input.shape();
    ctx->argmax = std::move(argmax);
  }
  return result;
}

template <typename T>
Tensor<T> maxpool_backward(const MaxPoolContext& ctx, const Tensor<T>& out_grad) {
  if (ctx.input_shape.empty()) throw std::logic_error("maxpool_backward: missing forward context");
  if (out_grad.size() != ctx.argmax.size())
    throw ShapeError("maxpool_backward: out_grad " + shape_str(out_grad.shape()) + " does not match forward output");
  Tensor<T> grad(ctx.input_shape);
  for (std::size_t i = 0; i < ctx.argmax.size(); ++i) grad[ctx.argmax[i]] += out_grad[i];
  return grad;
}

// ---------------------------------------------------------------------------
// channel concatenation

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.empty()) return b;
  if (b.empty()) return a;
  if (a.rank() != b.rank() || a.rank() < 2 || a.batch() != b.batch())
    throw ShapeError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  for (std::size_t i = 2; i < a.rank(); ++i)
    if (a.dim(i) != b.dim(i))
      throw ShapeError("concat_channels: spatial mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Shape s = a.shape();
  s[1] = a.channels() + b.channels();
  Tensor<T> out(s);
  const std::size_t na = a.channels() * a.spatial_size();
  const std::size_t nb = b.channels() * b.spatial_size();
  T* dst = out.data();
  for (std::size_t n = 0; n < a.batch(); ++n) {
    dst = std::copy_n(a.data() + n * na, na, dst);
    dst = std::copy_n(b.data() + n * nb, nb, dst);
  }
  return out;
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> concat_channels_backward(const Tensor<T>& out_grad, std::size_t a_channels) {
  if (out_grad.rank() < 2 || a_channels > out_grad.channels())
    throw ShapeError("concat_channels_backward: cannot split " + shape_str(out_grad.shape()));
  const std::size_t b_channels = out_grad.channels() - a_channels;
  const std::size_t sp = out_grad.spatial_size();
  Tensor<T> ga, gb;
  Shape sa = out_grad.shape(), sb = out_grad.shape();
  sa[1] = a_channels;
  sb[1] = b_channels;
  if (a_channels) ga = Tensor<T>(sa);
  if (b_channels) gb = Tensor<T>(sb);
  const T* src = out_grad.data();
  for (std::size_t n = 0; n < out_grad.batch(); ++n) {
    if (a_channels) std::copy_n(src, a_channels * sp, ga.data() + n * a_channels * sp);
    src += a_channels * sp;
    if (b_channels) std::copy_n(src, b_channels * sp, gb.data() + n * b_channels * sp);
    src += b_channels * sp;
  }
  return {std::move(ga), std::move(gb)};
}

// ---------------------------------------------------------------------------
// instance normalisation

template <typename T>
Tensor<T> instance_norm(const Tensor<T>& input, const Tensor<T>& gain, const Tensor<T>& offset, double epsilon,
                        InstanceNormContext<T>* ctx) {
  require_feature_map(input.shape(), "instance_norm input");
  if (!(epsilon > 0)) throw std::invalid_argument("instance_norm: epsilon must be > 0");
  const std::size_t c = input.channels();
  if (gain.size() != c || offset.size() != c)
    throw ShapeError("instance_norm: gain/offset must have " + std::to_string(c) + " entries");
  const std::size_t n = input.spatial_size();
  Tensor<T> out(input.shape());
  Tensor<T> normalized;
  if (ctx) normalized = Tensor<T>(input.shape());
  std::vector<double> inv_stds(input.batch() * c);

  for (std::size_t p = 0; p < input.batch() * c; ++p) {
    const T* x = input.data() + p * n;
    double mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += x[i];
    mean /= static_cast<double>(n);
    double var = 0;
    for (std::size_t i = 0; i < n; ++i) {
      const double d = x[i] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    const double inv_std = 1.0 / std::sqrt(var + epsilon);
    inv_stds[p] = inv_std;
    const double g = gain[p % c];
    const double o = offset[p % c];
    T* y = out.data() + p * n;
    for (std::size_t i = 0; i < n; ++i) {
      const double xhat = (x[i] - mean) * inv_std;
      if (ctx) normalized[p * n + i] = static_cast<T>(xhat);
      y[i] = static_cast<T>(xhat * g + o);
    }
  }
  if (ctx) {
    ctx->normalized = std::move(normalized);
    ctx->inv_std = std::move(inv_stds);
    ctx->gain = gain;
    ctx->valid = true;
  }
  return out;
}

template <typename T>
LayerGrad<T> instance_norm_backward(const InstanceNormContext<T>& ctx, const Tensor<T>& out_grad) {
  if (!ctx.valid) throw std::logic_error("instance_norm_backward: missing forward context");
  if (out_grad.shape() != ctx.normalized.shape())
    throw ShapeError("instance_norm_backward: out_grad " + shape_str(out_grad.shape()) + " does not match input " +
                     shape_str(ctx.normalized.shape()));
  const std::size_t c = out_grad.channels();
  const std::size_t n = out_grad.spatial_size();
  LayerGrad<T> grad;
  grad.input_grad = Tensor<T>(out_grad.shape());
  Tensor<T> dgain(Shape{c}), doffset(Shape{c});
  std::vector<double> acc_gain(c, 0.0), acc_offset(c, 0.0);

  for (std::size_t p = 0; p < out_grad.batch() * c; ++p) {
    const std::size_t ch = p % c;
    const T* dy = out_grad.data() + p * n;
    const T* xhat = ctx.normalized.data() + p * n;
    double sum_dy = 0, sum_dy_xhat = 0;
    for (std::size_t i = 0; i < n; ++i) {
      sum_dy += dy[i];
      sum_dy_xhat += static_cast<double>(dy[i]) * xhat[i];
    }
    acc_gain[ch] += sum_dy_xhat;
    acc_offset[ch] += sum_dy;
    const double g = ctx.gain[ch];
    const double scale = g * ctx.inv_std[p] / static_cast<double>(n);
    T* dx = grad.input_grad.data() + p * n;
    for (std::size_t i = 0; i < n; ++i)
      dx[i] = static_cast<T>(scale * (static_cast<double>(n) * dy[i] - sum_dy - xhat[i] * sum_dy_xhat));
  }
  for (std::size_t ch = 0; ch < c; ++ch) {
    dgain[ch] = static_cast<T>(acc_gain[ch]);
    doffset[ch] = static_cast<T>(acc_offset[ch]);
  }
  grad.param_grads.emplace("gain", std::move(dgain));
  grad.param_grads.emplace("offset", std::move(doffset));
  return grad;
}

// ---------------------------------------------------------------------------
// activations

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& input, T slope) {
  if (!(slope >= T(0) && slope < T(1))) throw std::invalid_argument("leaky_relu: slope must lie in [0,1)");
  Tensor<T> out(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) out[i] = input[i] > T(0) ? input[i] : slope * input[i];
  return out;
}

template <typename T>
Tensor<T> leaky_relu_backward(const Tensor<T>& input, T slope, const Tensor<T>& out_grad) {
  if (input.shape() != out_grad.shape())
    throw ShapeError("leaky_relu_backward: shape mismatch " + shape_str(input.shape()) + " vs " +
                     shape_str(out_grad.shape()));
  Tensor<T> grad(input.shape());
  for (std::size_t i = 0; i < input.size(); ++i) grad[i] = input[i] > T(0) ? out_grad[i] : slope * out_grad[i];
  return grad;
}

template <typename T>
Tensor<T> softmax_channels(const Tensor<T>& logits) {
  if (logits.rank() < 2) throw ShapeError("softmax_channels: expected [b,c,...], got " + shape_str(logits.shape()));
  const std::size_t c = logits.channels();
  const std::size_t n = logits.spatial_size();
  Tensor<T> out(logits.shape());
  for (std::size_t b = 0; b < logits.batch(); ++b) {
    const T* z = logits.data() + b * c * n;
    T* p = out.data() + b * c * n;
    for (std::size_t i = 0; i < n; ++i) {
      T m = z[i];
      for (std::size_t k = 1; k < c; ++k) m = std::max(m, z[k * n + i]);
      T sum = 0;
      for (std::size_t k = 0; k < c; ++k) {
        const T e = std::exp(z[k * n + i] - m);
        p[k * n + i] = e;
        sum += e;
      }
      const T inv = T(1) / sum;
      for (std::size_t k = 0; k < c; ++k) p[k * n + i] *= inv;
    }
  }
  return out;
}

template <typename T>
Tensor<T> softmax_channels_backward(const Tensor<T>& probs, const Tensor<T>& out_grad) {
  if (probs.shape() != out_grad.shape())
    throw ShapeError("softmax_channels_backward: shape mismatch " + shape_str(probs.shape()) + " vs " +
                     shape_str(out_grad.shape()));
  const std::size_t c = probs.channels();
  const std::size_t n = probs.spatial_size();
  Tensor<T> grad(probs.shape());
  for (std::size_t b = 0; b < probs.batch(); ++b) {
    const T* p = probs.data() + b * c * n;
    const T* g = out_grad.data() + b * c * n;
    T* dz = grad.data() + b * c * n;
    for (std::size_t i = 0; i < n; ++i) {
      T dot = 0;
      for (std::size_t k = 0; k < c; ++k) dot += p[k * n + i] * g[k * n + i];
      for (std::size_t k = 0; k < c; ++k) dz[k * n + i] = p[k * n + i] * (g[k * n + i] - dot);
    }
  }
  return grad;
}

// ---------------------------------------------------------------------------
// spatial padding

namespace {
template <typename T>
void copy_box(const Tensor<T>& src, Tensor<T>& dst, const Ext3& offset, bool src_is_larger) {
  // Copies the overlap of the smaller tensor, placed at `offset` in the larger.
  const Ext3 se = spatial_of(src.shape());
  const Ext3 de = spatial_of(dst.shape());
  const Ext3& small = src_is_larger ? de : se;
  const std::size_t planes = src.batch() * src.channels();
  for (std::size_t p = 0; p < planes; ++p)
    for (std::size_t i0 = 0; i0 < small[0]; ++i0)
      for (std::size_t i1 = 0; i1 < small[1]; ++i1) {
        const std::size_t big_line = ((i0 + offset[0]) * (src_is_larger ? se : de)[1] + (i1 + offset[1])) *
                                         (src_is_larger ? se : de)[2] + offset[2];
        const std::size_t small_line = (i0 * small[1] + i1) * small[2];
        if (src_is_larger)
          std::copy_n(src.data() + p * prod(se) + big_line, small[2], dst.data() + p * prod(de) + small_line);
        else
          std::copy_n(src.data() + p * prod(se) + small_line, small[2], dst.data() + p * prod(de) + big_line);
      }
}
}  // namespace

template <typename T>
Tensor<T> pad_spatial(const Tensor<T>& input, std::span<const std::size_t> before, std::span<const std::size_t> after) {
  require_feature_map(input.shape(), "pad_spatial input");
  const std::size_t rank = input.spatial_rank();
  const Ext3 lo = expand(before, rank, 0, "pad before");
  const Ext3 hi = expand(after, rank, 0, "pad after");
  Ext3 e = spatial_of(input.shape());
  for (std::size_t i = 0; i < rank; ++i) e[i] += lo[i] + hi[i];
  Tensor<T> out(make_shape(input.batch(), input.channels(), e, rank));
  copy_box(input, out, lo, false);
  return out;
}

template <typename T>
Tensor<T> crop_spatial(const Tensor<T>& input, std::span<const std::size_t> before,
                       std::span<const std::size_t> after) {
  require_feature_map(input.shape(), "crop_spatial input");
  const std::size_t rank = input.spatial_rank();
  const Ext3 lo = expand(before, rank, 0, "crop before");
  const Ext3 hi = expand(after, rank, 0, "crop after");
  Ext3 e = spatial_of(input.shape());
  for (std::size_t i = 0; i < rank; ++i) {
    if (lo[i] + hi[i] >= e[i]) throw ShapeError("crop_spatial: crop removes the whole axis of " + shape_str(input.shape()));
    e[i] -= lo[i] + hi[i];
  }
  Tensor<T> out(make_shape(input.batch(), input.channels(), e, rank));
  copy_box(input, out, lo, true);
  return out;
}

#define CSEG_INSTANTIATE_LAYERS(T)                                                                               \
  template Tensor<T> conv_forward(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,                         \
                                  std::span<const std::size_t>, std::span<const std::size_t>, ConvContext<T>*); \
  template LayerGrad<T> conv_backward(const ConvContext<T>&, const Tensor<T>&);                                 \
  template Tensor<T> upsample_transposed_conv(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&,             \
                                              std::span<const std::size_t>, TransposedConvContext<T>*);         \
  template LayerGrad<T> upsample_transposed_conv_backward(const TransposedConvContext<T>&, const Tensor<T>&);   \
  template Tensor<T> maxpool(const Tensor<T>&, std::span<const std::size_t>, std::span<const std::size_t>,      \
                             MaxPoolContext*);                                                                  \
  template Tensor<T> maxpool_backward(const MaxPoolContext&, const Tensor<T>&);                                 \
  template Tensor<T> concat_channels(const Tensor<T>&, const Tensor<T>&);                                       \
  template std::pair<Tensor<T>, Tensor<T>> concat_channels_backward(const Tensor<T>&, std::size_t);             \
  template Tensor<T> instance_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, double,                \
                                   InstanceNormContext<T>*);                                                    \
  template LayerGrad<T> instance_norm_backward(const InstanceNormContext<T>&, const Tensor<T>&);                \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                                           \
  template Tensor<T> leaky_relu_backward(const Tensor<T>&, T, const Tensor<T>&);                                \
  template Tensor<T> softmax_channels(const Tensor<T>&);                                                        \
  template Tensor<T> softmax_channels_backward(const Tensor<T>&, const Tensor<T>&);                             \
  template Tensor<T> pad_spatial(const Tensor<T>&, std::span<const std::size_t>, std::span<const std::size_t>); \
  template Tensor<T> crop_spatial(const Tensor<T>&, std::span<const std::size_t>, std::span<const std::size_t>);

CSEG_INSTANTIATE_LAYERS(float)
CSEG_INSTANTIATE_LAYERS(double)

#undef CSEG_INSTANTIATE_LAYERS

}  // namespace cseg
