#include "mmfal/attention.hpp"

#include "mmfal/types.hpp"

#include <cmath>

namespace mmfal {

namespace {

struct PoolState : SavedState {
  Shape input;
};

struct SeState : SavedState {
  Tensor input;
  Tensor hidden;     // ReLU(W0·avg + b0)
  Tensor attention;  // σ(W1·hidden + b1)
  Saved squeeze;
  Saved excite;
};

double sigmoid(double u) {
  return u >= 0.0 ? 1.0 / (1.0 + std::exp(-u)) : std::exp(u) / (1.0 + std::exp(u));
}

int checked_hidden(int channels, int ratio) {
  if (ratio <= 0 || channels <= 0 || channels % ratio != 0) {
    throw ConfigError("SE block: channel count " + std::to_string(channels) + " not divisible by ratio " +
                      std::to_string(ratio));
  }
  return channels / ratio;
}

}  // namespace

Tensor channel_mean(const Tensor& features) {
  Tensor out(Shape{features.channels(), 1, 1});
  const auto m = features.as_matrix();
  const double n = static_cast<double>(features.shape().plane());
  for (int c = 0; c < features.channels(); ++c) out[static_cast<std::size_t>(c)] = m.row(c).sum() / n;
  return out;
}

Tensor GlobalAvgPool::forward(const Tensor& x, Saved* saved) const {
  if (saved) {
    auto st = std::make_unique<PoolState>();
    st->input = x.shape();
    *saved = std::move(st);
  }
  return channel_mean(x);
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out, const SavedState& saved) {
  const Shape in = static_cast<const PoolState&>(saved).input;
  Tensor g(in);
  auto m = g.as_matrix();
  const double n = static_cast<double>(in.plane());
  for (int c = 0; c < in.c; ++c) m.row(c).setConstant(grad_out[static_cast<std::size_t>(c)] / n);
  return g;
}

SqueezeExcite::SqueezeExcite(int channels, int ratio, bool residual)
    : channels_(channels),
      ratio_(ratio),
      residual_(residual),
      squeeze_(channels, checked_hidden(channels, ratio)),
      excite_(checked_hidden(channels, ratio), channels) {}

Shape SqueezeExcite::output_shape(const Shape& in) const {
  if (in.c != channels_) {
    throw ConfigError("SE block expects " + std::to_string(channels_) + " channels, got " + to_string(in));
  }
  return in;
}

Tensor SqueezeExcite::attention(const Tensor& features) const {
  output_shape(features.shape());
  Tensor z = squeeze_.forward(channel_mean(features), nullptr);
  for (auto& v : z.storage()) v = v > 0.0 ? v : 0.0;
  Tensor u = excite_.forward(z, nullptr);
  for (auto& v : u.storage()) v = sigmoid(v);
  return u;
}

Tensor SqueezeExcite::forward(const Tensor& x, Saved* saved) const {
  output_shape(x.shape());
  std::unique_ptr<SeState> st;
  if (saved) st = std::make_unique<SeState>();

  Tensor hidden = squeeze_.forward(channel_mean(x), st ? &st->squeeze : nullptr);
  for (auto& v : hidden.storage()) v = v > 0.0 ? v : 0.0;
  Tensor gate = excite_.forward(hidden, st ? &st->excite : nullptr);
  for (auto& v : gate.storage()) v = sigmoid(v);

  Tensor y = x;
  auto m = y.as_matrix();
  for (int c = 0; c < channels_; ++c) {
    const double a = gate[static_cast<std::size_t>(c)];
    m.row(c) *= residual_ ? 1.0 + a : a;
  }
  if (saved) {
    st->input = x;
    st->hidden = std::move(hidden);
    st->attention = std::move(gate);
    *saved = std::move(st);
  }
  return y;
}

Tensor SqueezeExcite::backward(const Tensor& grad_out, const SavedState& saved) {
  const auto& st = static_cast<const SeState&>(saved);
  const auto g = grad_out.as_matrix();
  const auto f = st.input.as_matrix();

  // Direct path through the gating multiply.
  Tensor gx = grad_out;
  auto gm = gx.as_matrix();
  Tensor g_gate(Shape{channels_, 1, 1});
  for (int c = 0; c < channels_; ++c) {
    const double a = st.attention[static_cast<std::size_t>(c)];
    gm.row(c) *= residual_ ? 1.0 + a : a;
    g_gate[static_cast<std::size_t>(c)] = g.row(c).dot(f.row(c));
  }
  // σ′ = a(1 − a)
  for (int c = 0; c < channels_; ++c) {
    const double a = st.attention[static_cast<std::size_t>(c)];
    g_gate[static_cast<std::size_t>(c)] *= a * (1.0 - a);
  }
  Tensor g_hidden = excite_.backward(g_gate, *st.excite);
  for (std::size_t i = 0; i < g_hidden.size(); ++i) {
    if (!(st.hidden[i] > 0.0)) g_hidden[i] = 0.0;
  }
  Tensor g_avg = squeeze_.backward(g_hidden, *st.squeeze);
  const double n = static_cast<double>(st.input.shape().plane());
  for (int c = 0; c < channels_; ++c) gm.row(c).array() += g_avg[static_cast<std::size_t>(c)] / n;
  return gx;
}

void SqueezeExcite::parameters(const std::string& prefix, NamedParameters& out) {
  squeeze_.parameters(prefix + "fc0.", out);
  excite_.parameters(prefix + "fc1.", out);
}

void SqueezeExcite::initialize(Rng& rng) {
  squeeze_.initialize(rng);
  excite_.initialize(rng);
}

}  // namespace mmfal
