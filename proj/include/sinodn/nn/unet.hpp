#ifndef SINODN_NN_UNET_HPP
#define SINODN_NN_UNET_HPP

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "sinodn/error.hpp"
#include "sinodn/nn/layers.hpp"

namespace sinodn::nn {

enum class Variant { n2v, n2v2 };

inline std::string to_string(Variant v) { return v == Variant::n2v ? "n2v" : "n2v2"; }

inline Variant parse_variant(const std::string& s) {
  if (s == "n2v")
    return Variant::n2v;
  if (s == "n2v2")
    return Variant::n2v2;
  throw ConfigError("unknown blind-spot variant '" + s + "' (expected n2v or n2v2)");
}

/// Encoder-decoder shape. Level l has base_channels * 2^l channels; the
/// bottleneck sits at level `depth`.
///   n2v:  max-pool downsampling, skip connections at every level.
///   n2v2: blur-pool downsampling, no skip connection at level 0.
struct Architecture {
  Variant variant = Variant::n2v;
  std::size_t depth = 2;
  std::size_t base_channels = 16;

  std::size_t channels(std::size_t level) const { return base_channels << level; }
  bool has_skip(std::size_t level) const { return !(variant == Variant::n2v2 && level == 0); }
  std::size_t skip_count() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < depth; ++l)
      n += has_skip(l);
    return n;
  }

  void validate() const {
    detail::require(depth >= 1, "architecture: depth must be >= 1");
    detail::require(base_channels >= 1, "architecture: base_channels must be >= 1");
  }
};

struct ConvShape {
  std::string name;
  std::size_t in = 0, out = 0, kernel = 3;
  bool relu = true;
};

/// Convolutions in execution order: two per encoder level, two in the
/// bottleneck, two per decoder level (deepest first), then a 1x1 head.
inline std::vector<ConvShape> conv_layout(const Architecture& a) {
  std::vector<ConvShape> v;
  for (std::size_t l = 0; l < a.depth; ++l) {
    const std::string p = "enc" + std::to_string(l);
    v.push_back({p + ".conv0", l == 0 ? 1 : a.channels(l - 1), a.channels(l)});
    v.push_back({p + ".conv1", a.channels(l), a.channels(l)});
  }
  v.push_back({"bottleneck.conv0", a.channels(a.depth - 1), a.channels(a.depth)});
  v.push_back({"bottleneck.conv1", a.channels(a.depth), a.channels(a.depth)});
  for (std::size_t l = a.depth; l-- > 0;) {
    const std::string p = "dec" + std::to_string(l);
    v.push_back({p + ".conv0", a.channels(l + 1) + (a.has_skip(l) ? a.channels(l) : 0), a.channels(l)});
    v.push_back({p + ".conv1", a.channels(l), a.channels(l)});
  }
  v.push_back({"head", a.channels(0), 1, 1, false});
  return v;
}

/// Activations kept by a training forward pass for the backward pass.
template <class S>
struct Tape {
  struct Conv {
    Matrix<S> col;
    FeatureMap<S> out; // post-activation
    std::size_t in_channels = 0;
  };
  std::vector<Conv> convs;
  std::vector<std::vector<unsigned char>> argmax; // per encoder level (max pool)
  std::vector<std::pair<std::size_t, std::size_t>> level_dims;
};

/// Parameter list: weight (out x in*k*k) then bias (out x 1) per convolution.
template <class S>
using ParamList = std::vector<Matrix<S>>;

template <class S>
class UNet {
public:
  UNet() = default;

  /// He-normal weights from `seed`, zero biases. Values are drawn in double,
  /// so float and double networks built from one seed agree to rounding.
  UNet(const Architecture& arch, std::uint64_t seed) : arch_(arch), layout_(conv_layout(arch)) {
    arch.validate();
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (const auto& c : layout_) {
      const std::size_t fan_in = c.in * c.kernel * c.kernel;
      const double std = std::sqrt(2.0 / double(fan_in));
      Matrix<S> w(long(c.out), long(fan_in));
      for (long i = 0; i < w.size(); ++i)
        w.data()[i] = S(std * normal(rng));
      params_.push_back(std::move(w));
      params_.push_back(Matrix<S>::Zero(long(c.out), 1));
    }
  }

  const Architecture& architecture() const { return arch_; }
  const std::vector<ConvShape>& layout() const { return layout_; }
  ParamList<S>& params() { return params_; }
  const ParamList<S>& params() const { return params_; }

  std::vector<std::string> param_names() const {
    std::vector<std::string> names;
    for (const auto& c : layout_) {
      names.push_back(c.name + ".weight");
      names.push_back(c.name + ".bias");
    }
    return names;
  }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& p : params_)
      n += std::size_t(p.size());
    return n;
  }

  ParamList<S> zero_like() const {
    ParamList<S> g;
    for (const auto& p : params_)
      g.push_back(Matrix<S>::Zero(p.rows(), p.cols()));
    return g;
  }

  /// Single-channel input of size divisible by 2^depth. Records activations
  /// in `tape` when given.
  FeatureMap<S> forward(const FeatureMap<S>& input, Tape<S>* tape = nullptr) const {
    const std::size_t factor = std::size_t{1} << arch_.depth;
    detail::require(input.channels() == 1, "unet: expected a single-channel input");
    detail::require(input.height % factor == 0 && input.width % factor == 0,
                    "unet: input size must be divisible by 2^depth");
    if (tape) {
      tape->convs.assign(layout_.size(), {});
      tape->argmax.assign(arch_.depth, {});
      tape->level_dims.assign(arch_.depth + 1, {});
    }
    std::size_t idx = 0;
    std::vector<FeatureMap<S>> skips(arch_.depth);
    FeatureMap<S> h = input;
    for (std::size_t l = 0; l < arch_.depth; ++l) {
      if (tape)
        tape->level_dims[l] = {h.height, h.width};
      h = conv(idx++, h, tape);
      h = conv(idx++, h, tape);
      if (arch_.has_skip(l))
        skips[l] = h;
      h = arch_.variant == Variant::n2v ? max_pool(h, tape ? &tape->argmax[l] : nullptr) : blur_pool(h);
    }
    if (tape)
      tape->level_dims[arch_.depth] = {h.height, h.width};
    h = conv(idx++, h, tape);
    h = conv(idx++, h, tape);
    for (std::size_t l = arch_.depth; l-- > 0;) {
      h = upsample(h);
      if (arch_.has_skip(l))
        h = concat_channels(h, skips[l]);
      h = conv(idx++, h, tape);
      h = conv(idx++, h, tape);
    }
    return conv(idx, h, tape);
  }

  /// Accumulates d(loss)/d(params) into `grads` given d(loss)/d(output).
  void backward(const Tape<S>& tape, const FeatureMap<S>& grad_out, ParamList<S>& grads) const {
    std::size_t idx = layout_.size() - 1;
    FeatureMap<S> g = conv_backward(idx, tape, grad_out, grads);
    std::vector<FeatureMap<S>> skip_grads(arch_.depth);
    for (std::size_t l = 0; l < arch_.depth; ++l) {
      g = conv_backward(--idx, tape, g, grads);
      g = conv_backward(--idx, tape, g, grads);
      if (arch_.has_skip(l)) {
        const long up_ch = long(arch_.channels(l + 1));
        skip_grads[l] = {g.data.bottomRows(g.data.rows() - up_ch), g.height, g.width};
        g.data = Matrix<S>(g.data.topRows(up_ch));
      }
      g = upsample_backward(g);
    }
    g = conv_backward(--idx, tape, g, grads);
    g = conv_backward(--idx, tape, g, grads);
    for (std::size_t l = arch_.depth; l-- > 0;) {
      const auto [h, w] = tape.level_dims[l];
      g = arch_.variant == Variant::n2v ? max_pool_backward(g, tape.argmax[l], h, w) : blur_pool_backward(g, h, w);
      if (arch_.has_skip(l))
        g.data += skip_grads[l].data;
      g = conv_backward(--idx, tape, g, grads);
      g = conv_backward(--idx, tape, g, grads);
    }
  }

private:
  FeatureMap<S> conv(std::size_t i, const FeatureMap<S>& in, Tape<S>* tape) const {
    const ConvShape& shape = layout_[i];
    Matrix<S> col = im2col(in, shape.kernel);
    FeatureMap<S> out{params_[2 * i] * col, in.height, in.width};
    out.data.colwise() += params_[2 * i + 1].col(0);
    if (shape.relu)
      out.data = out.data.cwiseMax(S(0));
    if (tape) {
      tape->convs[i].col = std::move(col);
      tape->convs[i].out = out;
      tape->convs[i].in_channels = in.channels();
    }
    return out;
  }

  FeatureMap<S> conv_backward(std::size_t i, const Tape<S>& tape, FeatureMap<S> g, ParamList<S>& grads) const {
    const ConvShape& shape = layout_[i];
    const auto& rec = tape.convs[i];
    if (shape.relu)
      g.data = g.data.cwiseProduct((rec.out.data.array() > S(0)).template cast<S>().matrix());
    grads[2 * i].noalias() += g.data * rec.col.transpose();
    grads[2 * i + 1].col(0) += g.data.rowwise().sum();
    const Matrix<S> dcol = params_[2 * i].transpose() * g.data;
    return col2im(dcol, rec.in_channels, g.height, g.width, shape.kernel);
  }

  Architecture arch_;
  std::vector<ConvShape> layout_;
  ParamList<S> params_;
};

/// Adam with fixed learning rate and default moment decay.
template <class S>
class Adam {
public:
  explicit Adam(const ParamList<S>& like, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    for (const auto& p : like) {
      m_.push_back(Matrix<S>::Zero(p.rows(), p.cols()));
      v_.push_back(Matrix<S>::Zero(p.rows(), p.cols()));
    }
  }

  void step(ParamList<S>& params, const ParamList<S>& grads) {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, double(t_)), c2 = 1.0 - std::pow(b2_, double(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i] = S(b1_) * m_[i] + S(1.0 - b1_) * grads[i];
      v_[i] = S(b2_) * v_[i] + S(1.0 - b2_) * grads[i].cwiseProduct(grads[i]);
      auto mhat = m_[i].array() / S(c1);
      auto vhat = v_[i].array() / S(c2);
      params[i].array() -= S(lr_) * mhat / (vhat.sqrt() + S(eps_));
    }
  }

private:
  double lr_, b1_, b2_, eps_;
  long t_ = 0;
  ParamList<S> m_, v_;
};

} // namespace sinodn::nn

#endif
