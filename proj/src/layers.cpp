#include "mmfal/layers.hpp"

#include "mmfal/types.hpp"

#include <cmath>
#include <limits>

namespace mmfal {

namespace {

using RowMatrix = Tensor::RowMajorMatrix;

template <typename T>
const T& state_as(const SavedState& s) {
  return static_cast<const T&>(s);
}

struct ConvState : SavedState {
  RowMatrix cols;  // im2col of the input, or the input itself for 1×1 convs
  Shape input;
};

struct TensorState : SavedState {
  Tensor tensor;
};

struct IndexState : SavedState {
  std::vector<std::size_t> argmax;
  Shape input;
};

struct SequenceState : SavedState {
  std::vector<Saved> steps;
};

struct BottleneckState : SavedState {
  Saved main;
  Saved shortcut;
  Tensor output;
};

}  // namespace

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool bias)
    : in_(in_channels),
      out_(out_channels),
      kernel_(kernel),
      stride_(stride),
      padding_(padding),
      has_bias_(bias),
      weight_(Shape{out_channels, in_channels * kernel * kernel, 1}),
      bias_(Shape{out_channels, 1, 1}, bias) {
  if (in_channels <= 0 || out_channels <= 0 || kernel <= 0 || stride <= 0 || padding < 0) {
    throw ConfigError("invalid Conv2d geometry");
  }
}

Shape Conv2d::output_shape(const Shape& in) const {
  if (in.c != in_) {
    throw ConfigError("Conv2d expects " + std::to_string(in_) + " input channels, got " + to_string(in));
  }
  const int h = (in.h + 2 * padding_ - kernel_) / stride_ + 1;
  const int w = (in.w + 2 * padding_ - kernel_) / stride_ + 1;
  if (h <= 0 || w <= 0) throw ConfigError("Conv2d input " + to_string(in) + " too small");
  return {out_, h, w};
}

Tensor Conv2d::forward(const Tensor& x, Saved* saved) const {
  const Shape os = output_shape(x.shape());
  Tensor y(os);
  auto out = y.as_matrix();
  Eigen::Map<const RowMatrix> w(weight_.value.data(), out_, in_ * kernel_ * kernel_);

  if (pointwise()) {
    out.noalias() = w * x.as_matrix();
    if (saved) {
      auto st = std::make_unique<ConvState>();
      st->cols = x.as_matrix();
      st->input = x.shape();
      *saved = std::move(st);
    }
  } else {
    RowMatrix cols(in_ * kernel_ * kernel_, os.plane());
    const int H = x.height(), W = x.width();
    for (int c = 0; c < in_; ++c) {
      for (int ky = 0; ky < kernel_; ++ky) {
        for (int kx = 0; kx < kernel_; ++kx) {
          double* row = cols.row((c * kernel_ + ky) * kernel_ + kx).data();
          for (int oy = 0; oy < os.h; ++oy) {
            const int iy = oy * stride_ - padding_ + ky;
            const bool row_ok = iy >= 0 && iy < H;
            for (int ox = 0; ox < os.w; ++ox) {
              const int ix = ox * stride_ - padding_ + kx;
              row[oy * os.w + ox] = (row_ok && ix >= 0 && ix < W) ? x.at(c, iy, ix) : 0.0;
            }
          }
        }
      }
    }
    out.noalias() = w * cols;
    if (saved) {
      auto st = std::make_unique<ConvState>();
      st->cols = std::move(cols);
      st->input = x.shape();
      *saved = std::move(st);
    }
  }
  if (has_bias_) {
    for (int o = 0; o < out_; ++o) out.row(o).array() += bias_.value[static_cast<std::size_t>(o)];
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& grad_out, const SavedState& saved) {
  const auto& st = state_as<ConvState>(saved);
  const auto g = grad_out.as_matrix();
  Eigen::Map<const RowMatrix> w(weight_.value.data(), out_, in_ * kernel_ * kernel_);
  if (weight_.trainable) {
    Eigen::Map<RowMatrix> gw(weight_.grad.data(), out_, in_ * kernel_ * kernel_);
    gw.noalias() += g * st.cols.transpose();
  }
  if (has_bias_ && bias_.trainable) {
    for (int o = 0; o < out_; ++o) bias_.grad[static_cast<std::size_t>(o)] += g.row(o).sum();
  }

  Tensor gx(st.input);
  if (pointwise()) {
    gx.as_matrix().noalias() = w.transpose() * g;
    return gx;
  }
  const RowMatrix gcols = w.transpose() * g;
  const int oh = grad_out.height(), ow = grad_out.width();
  const int H = st.input.h, W = st.input.w;
  for (int c = 0; c < in_; ++c) {
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        const double* row = gcols.row((c * kernel_ + ky) * kernel_ + kx).data();
        for (int oy = 0; oy < oh; ++oy) {
          const int iy = oy * stride_ - padding_ + ky;
          if (iy < 0 || iy >= H) continue;
          for (int ox = 0; ox < ow; ++ox) {
            const int ix = ox * stride_ - padding_ + kx;
            if (ix >= 0 && ix < W) gx.at(c, iy, ix) += row[oy * ow + ox];
          }
        }
      }
    }
  }
  return gx;
}

void Conv2d::parameters(const std::string& prefix, NamedParameters& out) {
  out.emplace_back(prefix + "weight", &weight_);
  if (has_bias_) out.emplace_back(prefix + "bias", &bias_);
}

void Conv2d::initialize(Rng& rng) {
  const double fan_out = static_cast<double>(out_) * kernel_ * kernel_;
  const double std = std::sqrt(2.0 / fan_out);
  for (auto& v : weight_.value.storage()) v = std * standard_normal(rng);
  bias_.value.fill(0.0);
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

Tensor ReLU::forward(const Tensor& x, Saved* saved) const {
  Tensor y = x;
  for (auto& v : y.storage()) v = v > 0.0 ? v : 0.0;
  if (saved) {
    auto st = std::make_unique<TensorState>();
    st->tensor = y;
    *saved = std::move(st);
  }
  return y;
}

Tensor ReLU::backward(const Tensor& grad_out, const SavedState& saved) {
  const auto& y = state_as<TensorState>(saved).tensor;
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(y[i] > 0.0)) g[i] = 0.0;
  }
  return g;
}

// ---------------------------------------------------------------------------
// MaxPool2d
// ---------------------------------------------------------------------------

Shape MaxPool2d::output_shape(const Shape& in) const {
  const int h = (in.h + 2 * padding_ - kernel_) / stride_ + 1;
  const int w = (in.w + 2 * padding_ - kernel_) / stride_ + 1;
  if (h <= 0 || w <= 0) throw ConfigError("MaxPool2d input " + to_string(in) + " too small");
  return {in.c, h, w};
}

Tensor MaxPool2d::forward(const Tensor& x, Saved* saved) const {
  const Shape os = output_shape(x.shape());
  Tensor y(os);
  std::vector<std::size_t> argmax(saved ? os.size() : 0);
  const int H = x.height(), W = x.width();
  std::size_t o = 0;
  for (int c = 0; c < os.c; ++c) {
    for (int oy = 0; oy < os.h; ++oy) {
      for (int ox = 0; ox < os.w; ++ox, ++o) {
        double best = -std::numeric_limits<double>::infinity();
        std::size_t best_at = 0;
        for (int ky = 0; ky < kernel_; ++ky) {
          const int iy = oy * stride_ - padding_ + ky;
          if (iy < 0 || iy >= H) continue;
          for (int kx = 0; kx < kernel_; ++kx) {
            const int ix = ox * stride_ - padding_ + kx;
            if (ix < 0 || ix >= W) continue;
            const std::size_t at = (static_cast<std::size_t>(c) * H + iy) * W + ix;
            if (x[at] > best) {
              best = x[at];
              best_at = at;
            }
          }
        }
        y[o] = best;
        if (saved) argmax[o] = best_at;
      }
    }
  }
  if (saved) {
    auto st = std::make_unique<IndexState>();
    st->argmax = std::move(argmax);
    st->input = x.shape();
    *saved = std::move(st);
  }
  return y;
}

Tensor MaxPool2d::backward(const Tensor& grad_out, const SavedState& saved) {
  const auto& st = state_as<IndexState>(saved);
  Tensor gx(st.input);
  for (std::size_t o = 0; o < grad_out.size(); ++o) gx[st.argmax[o]] += grad_out[o];
  return gx;
}

// ---------------------------------------------------------------------------
// FrozenBatchNorm
// ---------------------------------------------------------------------------

FrozenBatchNorm::FrozenBatchNorm(int channels)
    : scale_(Shape{channels, 1, 1}, false), shift_(Shape{channels, 1, 1}, false) {
  scale_.value.fill(1.0);
}

Tensor FrozenBatchNorm::forward(const Tensor& x, Saved* saved) const {
  if (x.channels() != scale_.value.channels()) throw ConfigError("FrozenBatchNorm channel mismatch");
  Tensor y = x;
  auto m = y.as_matrix();
  for (int c = 0; c < x.channels(); ++c) {
    m.row(c) = m.row(c).array() * scale_.value[static_cast<std::size_t>(c)] + shift_.value[static_cast<std::size_t>(c)];
  }
  if (saved) *saved = std::make_unique<SavedState>();
  return y;
}

Tensor FrozenBatchNorm::backward(const Tensor& grad_out, const SavedState& /*saved*/) {
  Tensor g = grad_out;
  auto m = g.as_matrix();
  for (int c = 0; c < g.channels(); ++c) m.row(c) *= scale_.value[static_cast<std::size_t>(c)];
  return g;
}

void FrozenBatchNorm::parameters(const std::string& prefix, NamedParameters& out) {
  out.emplace_back(prefix + "scale", &scale_);
  out.emplace_back(prefix + "shift", &shift_);
}

// ---------------------------------------------------------------------------
// Linear
// ---------------------------------------------------------------------------

Linear::Linear(int in_features, int out_features)
    : in_(in_features),
      out_(out_features),
      weight_(Shape{out_features, in_features, 1}),
      bias_(Shape{out_features, 1, 1}) {
  if (in_features <= 0 || out_features <= 0) throw ConfigError("invalid Linear geometry");
}

Shape Linear::output_shape(const Shape& in) const {
  if (static_cast<int>(in.size()) != in_) {
    throw ConfigError("Linear expects " + std::to_string(in_) + " features, got " + to_string(in));
  }
  return {out_, 1, 1};
}

Tensor Linear::forward(const Tensor& x, Saved* saved) const {
  const Shape os = output_shape(x.shape());
  Eigen::Map<const RowMatrix> w(weight_.value.data(), out_, in_);
  Eigen::Map<const Eigen::VectorXd> v(x.data(), in_);
  Eigen::Map<const Eigen::VectorXd> b(bias_.value.data(), out_);
  Tensor y(os);
  Eigen::Map<Eigen::VectorXd>(y.data(), out_).noalias() = w * v + b;
  if (saved) {
    auto st = std::make_unique<TensorState>();
    st->tensor = x;
    *saved = std::move(st);
  }
  return y;
}

Tensor Linear::backward(const Tensor& grad_out, const SavedState& saved) {
  const auto& x = state_as<TensorState>(saved).tensor;
  Eigen::Map<const RowMatrix> w(weight_.value.data(), out_, in_);
  Eigen::Map<const Eigen::VectorXd> g(grad_out.data(), out_);
  Eigen::Map<const Eigen::VectorXd> v(x.data(), in_);
  if (weight_.trainable) {
    Eigen::Map<RowMatrix>(weight_.grad.data(), out_, in_).noalias() += g * v.transpose();
  }
  if (bias_.trainable) Eigen::Map<Eigen::VectorXd>(bias_.grad.data(), out_) += g;
  Tensor gx(x.shape());
  Eigen::Map<Eigen::VectorXd>(gx.data(), in_).noalias() = w.transpose() * g;
  return gx;
}

void Linear::parameters(const std::string& prefix, NamedParameters& out) {
  out.emplace_back(prefix + "weight", &weight_);
  out.emplace_back(prefix + "bias", &bias_);
}

void Linear::initialize(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
  for (auto& v : weight_.value.storage()) v = bound * (2.0 * uniform_real(rng) - 1.0);
  for (auto& v : bias_.value.storage()) v = bound * (2.0 * uniform_real(rng) - 1.0);
}

// ---------------------------------------------------------------------------
// Sequential
// ---------------------------------------------------------------------------

Tensor Sequential::forward(const Tensor& x, Saved* saved) const {
  std::unique_ptr<SequenceState> st;
  if (saved) {
    st = std::make_unique<SequenceState>();
    st->steps.resize(layers_.size());
  }
  Tensor h = x;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    h = layers_[i].second->forward(h, st ? &st->steps[i] : nullptr);
  }
  if (saved) *saved = std::move(st);
  return h;
}

Tensor Sequential::backward(const Tensor& grad_out, const SavedState& saved) {
  const auto& st = state_as<SequenceState>(saved);
  Tensor g = grad_out;
  for (std::size_t i = layers_.size(); i-- > 0;) g = layers_[i].second->backward(g, *st.steps[i]);
  return g;
}

Shape Sequential::output_shape(const Shape& in) const {
  Shape s = in;
  for (const auto& [name, layer] : layers_) s = layer->output_shape(s);
  return s;
}

void Sequential::parameters(const std::string& prefix, NamedParameters& out) {
  for (auto& [name, layer] : layers_) layer->parameters(prefix + name + ".", out);
}

void Sequential::initialize(Rng& rng) {
  for (auto& [name, layer] : layers_) layer->initialize(rng);
}

// ---------------------------------------------------------------------------
// Bottleneck
// ---------------------------------------------------------------------------

Bottleneck::Bottleneck(int in_channels, int width, int stride) {
  const int out_channels = width * kExpansion;
  main_.emplace<Conv2d>("conv1", in_channels, width, 1, 1, 0, false);
  main_.emplace<FrozenBatchNorm>("bn1", width);
  main_.emplace<ReLU>("relu1");
  main_.emplace<Conv2d>("conv2", width, width, 3, stride, 1, false);
  main_.emplace<FrozenBatchNorm>("bn2", width);
  main_.emplace<ReLU>("relu2");
  main_.emplace<Conv2d>("conv3", width, out_channels, 1, 1, 0, false);
  main_.emplace<FrozenBatchNorm>("bn3", out_channels);
  if (stride != 1 || in_channels != out_channels) {
    shortcut_.emplace<Conv2d>("0", in_channels, out_channels, 1, stride, 0, false);
    shortcut_.emplace<FrozenBatchNorm>("1", out_channels);
  }
}

Shape Bottleneck::output_shape(const Shape& in) const { return main_.output_shape(in); }

Tensor Bottleneck::forward(const Tensor& x, Saved* saved) const {
  std::unique_ptr<BottleneckState> st;
  if (saved) st = std::make_unique<BottleneckState>();
  Tensor y = main_.forward(x, st ? &st->main : nullptr);
  if (shortcut_.empty()) {
    y += x;
  } else {
    y += shortcut_.forward(x, st ? &st->shortcut : nullptr);
  }
  for (auto& v : y.storage()) v = v > 0.0 ? v : 0.0;
  if (saved) {
    st->output = y;
    *saved = std::move(st);
  }
  return y;
}

Tensor Bottleneck::backward(const Tensor& grad_out, const SavedState& saved) {
  const auto& st = state_as<BottleneckState>(saved);
  Tensor g = grad_out;
  for (std::size_t i = 0; i < g.size(); ++i) {
    if (!(st.output[i] > 0.0)) g[i] = 0.0;
  }
  Tensor gx = main_.backward(g, *st.main);
  if (shortcut_.empty()) {
    gx += g;
  } else {
    gx += shortcut_.backward(g, *st.shortcut);
  }
  return gx;
}

void Bottleneck::parameters(const std::string& prefix, NamedParameters& out) {
  main_.parameters(prefix, out);
  shortcut_.parameters(prefix + "downsample.", out);
}

void Bottleneck::initialize(Rng& rng) {
  main_.initialize(rng);
  shortcut_.initialize(rng);
}

void zero_grads(const NamedParameters& params) {
  for (const auto& [name, p] : params) p->zero_grad();
}

}  // namespace mmfal
