#ifndef SINODN_NN_LAYERS_HPP
#define SINODN_NN_LAYERS_HPP

// Forward/backward kernels for the blind-spot network. Feature maps are
// (channels x height*width) row-major matrices.

#include <cstddef>
#include <vector>

#include <Eigen/Dense>

namespace sinodn::nn {

template <class S>
using Matrix = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class S>
struct FeatureMap {
  Matrix<S> data; // channels x (height * width)
  std::size_t height = 0;
  std::size_t width = 0;

  std::size_t channels() const { return std::size_t(data.rows()); }
};

/// Unfolds k x k neighbourhoods (zero padded, "same" output size) into
/// columns: row (ci * k + ky) * k + kx, column y * w + x.
template <class S>
Matrix<S> im2col(const FeatureMap<S>& in, std::size_t k) {
  const std::size_t h = in.height, w = in.width, cin = in.channels();
  if (k == 1)
    return in.data;
  const long pad = long(k / 2);
  Matrix<S> col = Matrix<S>::Zero(long(cin * k * k), long(h * w));
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        S* dst = col.row(long((ci * k + ky) * k + kx)).data();
        const S* src = in.data.row(long(ci)).data();
        const long dy = long(ky) - pad, dx = long(kx) - pad;
        for (long y = 0; y < long(h); ++y) {
          const long sy = y + dy;
          if (sy < 0 || sy >= long(h))
            continue;
          const long x_lo = std::max(0L, -dx), x_hi = std::min(long(w), long(w) - dx);
          for (long x = x_lo; x < x_hi; ++x)
            dst[y * long(w) + x] = src[sy * long(w) + x + dx];
        }
      }
  return col;
}

/// Adjoint of im2col.
template <class S>
FeatureMap<S> col2im(const Matrix<S>& col, std::size_t cin, std::size_t h, std::size_t w, std::size_t k) {
  FeatureMap<S> out{Matrix<S>::Zero(long(cin), long(h * w)), h, w};
  if (k == 1) {
    out.data = col;
    return out;
  }
  const long pad = long(k / 2);
  for (std::size_t ci = 0; ci < cin; ++ci)
    for (std::size_t ky = 0; ky < k; ++ky)
      for (std::size_t kx = 0; kx < k; ++kx) {
        const S* src = col.row(long((ci * k + ky) * k + kx)).data();
        S* dst = out.data.row(long(ci)).data();
        const long dy = long(ky) - pad, dx = long(kx) - pad;
        for (long y = 0; y < long(h); ++y) {
          const long sy = y + dy;
          if (sy < 0 || sy >= long(h))
            continue;
          const long x_lo = std::max(0L, -dx), x_hi = std::min(long(w), long(w) - dx);
          for (long x = x_lo; x < x_hi; ++x)
            dst[sy * long(w) + x + dx] += src[y * long(w) + x];
        }
      }
  return out;
}

/// 2x2 max pooling, stride 2. `argmax` receives the winning input offset
/// (0..3, first maximum in raster order) for each output element.
template <class S>
FeatureMap<S> max_pool(const FeatureMap<S>& in, std::vector<unsigned char>* argmax) {
  const std::size_t h = in.height / 2, w = in.width / 2, c = in.channels();
  FeatureMap<S> out{Matrix<S>(long(c), long(h * w)), h, w};
  if (argmax)
    argmax->resize(c * h * w);
  for (std::size_t ch = 0; ch < c; ++ch) {
    const S* src = in.data.row(long(ch)).data();
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t base = 2 * y * in.width + 2 * x;
        const std::size_t offs[4] = {base, base + 1, base + in.width, base + in.width + 1};
        unsigned char best = 0;
        for (unsigned char i = 1; i < 4; ++i)
          if (src[offs[i]] > src[offs[best]])
            best = i;
        out.data(long(ch), long(y * w + x)) = src[offs[best]];
        if (argmax)
          (*argmax)[(ch * h + y) * w + x] = best;
      }
  }
  return out;
}

template <class S>
FeatureMap<S> max_pool_backward(const FeatureMap<S>& grad, const std::vector<unsigned char>& argmax,
                                std::size_t in_h, std::size_t in_w) {
  FeatureMap<S> out{Matrix<S>::Zero(grad.data.rows(), long(in_h * in_w)), in_h, in_w};
  const std::size_t h = grad.height, w = grad.width;
  for (std::size_t ch = 0; ch < grad.channels(); ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        const unsigned char a = argmax[(ch * h + y) * w + x];
        const std::size_t idx = (2 * y + a / 2) * in_w + 2 * x + a % 2;
        out.data(long(ch), long(idx)) += grad.data(long(ch), long(y * w + x));
      }
  return out;
}

inline constexpr double kBlurTaps[3] = {0.25, 0.5, 0.25}; // [1, 2, 1] / 4 per axis

/// Anti-aliased downsampling: [1,2,1]^T[1,2,1]/16 blur (zero padded), then
/// every second sample.
template <class S>
FeatureMap<S> blur_pool(const FeatureMap<S>& in) {
  const std::size_t h = in.height / 2, w = in.width / 2, c = in.channels();
  FeatureMap<S> out{Matrix<S>::Zero(long(c), long(h * w)), h, w};
  for (std::size_t ch = 0; ch < c; ++ch) {
    const S* src = in.data.row(long(ch)).data();
    S* dst = out.data.row(long(ch)).data();
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x) {
        S acc = 0;
        for (int a = -1; a <= 1; ++a) {
          const long sy = long(2 * y) + a;
          if (sy < 0 || sy >= long(in.height))
            continue;
          for (int b = -1; b <= 1; ++b) {
            const long sx = long(2 * x) + b;
            if (sx < 0 || sx >= long(in.width))
              continue;
            acc += S(kBlurTaps[a + 1] * kBlurTaps[b + 1]) * src[sy * long(in.width) + sx];
          }
        }
        dst[y * w + x] = acc;
      }
  }
  return out;
}

template <class S>
FeatureMap<S> blur_pool_backward(const FeatureMap<S>& grad, std::size_t in_h, std::size_t in_w) {
  FeatureMap<S> out{Matrix<S>::Zero(grad.data.rows(), long(in_h * in_w)), in_h, in_w};
  for (std::size_t ch = 0; ch < grad.channels(); ++ch) {
    const S* g = grad.data.row(long(ch)).data();
    S* dst = out.data.row(long(ch)).data();
    for (std::size_t y = 0; y < grad.height; ++y)
      for (std::size_t x = 0; x < grad.width; ++x)
        for (int a = -1; a <= 1; ++a) {
          const long sy = long(2 * y) + a;
          if (sy < 0 || sy >= long(in_h))
            continue;
          for (int b = -1; b <= 1; ++b) {
            const long sx = long(2 * x) + b;
            if (sx < 0 || sx >= long(in_w))
              continue;
            dst[sy * long(in_w) + sx] += S(kBlurTaps[a + 1] * kBlurTaps[b + 1]) * g[y * grad.width + x];
          }
        }
  }
  return out;
}

/// Nearest-neighbour 2x upsampling.
template <class S>
FeatureMap<S> upsample(const FeatureMap<S>& in) {
  const std::size_t h = in.height * 2, w = in.width * 2;
  FeatureMap<S> out{Matrix<S>(in.data.rows(), long(h * w)), h, w};
  for (long ch = 0; ch < in.data.rows(); ++ch)
    for (std::size_t y = 0; y < h; ++y)
      for (std::size_t x = 0; x < w; ++x)
        out.data(ch, long(y * w + x)) = in.data(ch, long((y / 2) * in.width + x / 2));
  return out;
}

template <class S>
FeatureMap<S> upsample_backward(const FeatureMap<S>& grad) {
  const std::size_t h = grad.height / 2, w = grad.width / 2;
  FeatureMap<S> out{Matrix<S>::Zero(grad.data.rows(), long(h * w)), h, w};
  for (long ch = 0; ch < grad.data.rows(); ++ch)
    for (std::size_t y = 0; y < grad.height; ++y)
      for (std::size_t x = 0; x < grad.width; ++x)
        out.data(ch, long((y / 2) * w + x / 2)) += grad.data(ch, long(y * grad.width + x));
  return out;
}

template <class S>
FeatureMap<S> concat_channels(const FeatureMap<S>& a, const FeatureMap<S>& b) {
  FeatureMap<S> out{Matrix<S>(a.data.rows() + b.data.rows(), a.data.cols()), a.height, a.width};
  out.data.topRows(a.data.rows()) = a.data;
  out.data.bottomRows(b.data.rows()) = b.data;
  return out;
}

} // namespace sinodn::nn

#endif
