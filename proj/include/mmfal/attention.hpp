#pragma once

#include "mmfal/layers.hpp"

namespace mmfal {

/// Spatial mean of each channel: c×h×w → c×1×1.
Tensor channel_mean(const Tensor& features);

/// Global average pooling as a layer; output is the stream embedding.
class GlobalAvgPool final : public Layer {
 public:
  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& grad_out, const SavedState& saved) override;
  Shape output_shape(const Shape& in) const override { return {in.c, 1, 1}; }
};

/// Squeeze-excitation channel attention:
///   M_c(F) = σ(W1·ReLU(W0·avg(F) + b0) + b1),   M_o(F) = M_c(F) ⊗ F.
/// W0 maps c′ → c′/r, W1 maps c′/r → c′. With `residual` the output is
/// F + M_c(F) ⊗ F instead.
class SqueezeExcite final : public Layer {
 public:
  SqueezeExcite(int channels, int ratio, bool residual = false);

  /// The attention map M_c(F), c′×1×1, every entry in (0, 1).
  Tensor attention(const Tensor& features) const;

  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& grad_out, const SavedState& saved) override;
  Shape output_shape(const Shape& in) const override;
  void parameters(const std::string& prefix, NamedParameters& out) override;
  void initialize(Rng& rng) override;

  int channels() const { return channels_; }
  int hidden() const { return channels_ / ratio_; }
  bool residual() const { return residual_; }
  Linear& squeeze() { return squeeze_; }
  Linear& excite() { return excite_; }

 private:
  int channels_;
  int ratio_;
  bool residual_;
  Linear squeeze_;  // W0, b0
  Linear excite_;   // W1, b1
};

}  // namespace mmfal
