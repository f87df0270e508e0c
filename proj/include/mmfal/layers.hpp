#pragma once

#include "mmfal/random.hpp"
#include "mmfal/tensor.hpp"

#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace mmfal {

struct Parameter {
  Tensor value;
  Tensor grad;
  bool trainable = true;

  Parameter() = default;
  explicit Parameter(Shape shape, bool trainable_ = true) : value(shape), grad(shape), trainable(trainable_) {}
  void zero_grad() { grad.fill(0.0); }
};

using NamedParameters = std::vector<std::pair<std::string, Parameter*>>;

/// Opaque per-call activation record written by forward and consumed by
/// backward. Layers never keep activations themselves, so a const forward is
/// safe to call concurrently.
struct SavedState {
  virtual ~SavedState() = default;
};
using Saved = std::unique_ptr<SavedState>;

class Layer {
 public:
  virtual ~Layer() = default;

  /// Pass `saved` to record what backward needs; nullptr for inference.
  virtual Tensor forward(const Tensor& x, Saved* saved) const = 0;
  /// Accumulates parameter gradients and returns the input gradient.
  virtual Tensor backward(const Tensor& grad_out, const SavedState& saved) = 0;
  virtual Shape output_shape(const Shape& in) const = 0;
  virtual void parameters(const std::string& /*prefix*/, NamedParameters& /*out*/) {}
  virtual void initialize(Rng& /*rng*/) {}
};

class Conv2d final : public Layer {
 public:
  Conv2d(int in_channels, int out_channels, int kernel, int stride = 1, int padding = 0, bool bias = true);

  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& grad_out, const SavedState& saved) override;
  Shape output_shape(const Shape& in) const override;
  void parameters(const std::string& prefix, NamedParameters& out) override;
  /// He-normal weights, zero bias.
  void initialize(Rng& rng) override;

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  bool has_bias() const { return has_bias_; }

 private:
  bool pointwise() const { return kernel_ == 1 && stride_ == 1 && padding_ == 0; }

  int in_, out_, kernel_, stride_, padding_;
  bool has_bias_;
  Parameter weight_;  // out × (in·k·k) × 1
  Parameter bias_;    // out × 1 × 1
};

class ReLU final : public Layer {
 public:
  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& grad_out, const SavedState& saved) override;
  Shape output_shape(const Shape& in) const override { return in; }
};

class MaxPool2d final : public Layer {
 public:
  MaxPool2d(int kernel, int stride, int padding) : kernel_(kernel), stride_(stride), padding_(padding) {}
  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& grad_out, const SavedState& saved) override;
  Shape output_shape(const Shape& in) const override;

 private:
  int kernel_, stride_, padding_;
};

/// Batch norm folded into a fixed per-channel affine map
/// y = x·scale + shift. Parameters are not trained.
class FrozenBatchNorm final : public Layer {
 public:
  explicit FrozenBatchNorm(int channels);
  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& grad_out, const SavedState& saved) override;
  Shape output_shape(const Shape& in) const override { return in; }
  void parameters(const std::string& prefix, NamedParameters& out) override;

 private:
  Parameter scale_;
  Parameter shift_;
};

/// Fully connected layer on c×1×1 vectors.
class Linear final : public Layer {
 public:
  Linear(int in_features, int out_features);
  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& grad_out, const SavedState& saved) override;
  Shape output_shape(const Shape& in) const override;
  void parameters(const std::string& prefix, NamedParameters& out) override;
  /// Uniform(±1/sqrt(in)) for weights and bias.
  void initialize(Rng& rng) override;

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  const Parameter& bias() const { return bias_; }

 private:
  int in_, out_;
  Parameter weight_;  // out × in × 1
  Parameter bias_;
};

class Sequential final : public Layer {
 public:
  Sequential() = default;

  template <typename L, typename... Args>
  L& emplace(std::string name, Args&&... args) {
    auto layer = std::make_unique<L>(std::forward<Args>(args)...);
    L& ref = *layer;
    layers_.emplace_back(std::move(name), std::move(layer));
    return ref;
  }
  void add(std::string name, std::unique_ptr<Layer> layer) { layers_.emplace_back(std::move(name), std::move(layer)); }

  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& grad_out, const SavedState& saved) override;
  Shape output_shape(const Shape& in) const override;
  void parameters(const std::string& prefix, NamedParameters& out) override;
  void initialize(Rng& rng) override;

  std::size_t size() const { return layers_.size(); }
  bool empty() const { return layers_.empty(); }

 private:
  std::vector<std::pair<std::string, std::unique_ptr<Layer>>> layers_;
};

/// ResNet bottleneck: 1×1 → 3×3 (strided) → 1×1 with a projection shortcut
/// when the shape changes.
class Bottleneck final : public Layer {
 public:
  static constexpr int kExpansion = 4;
  Bottleneck(int in_channels, int width, int stride);

  Tensor forward(const Tensor& x, Saved* saved) const override;
  Tensor backward(const Tensor& grad_out, const SavedState& saved) override;
  Shape output_shape(const Shape& in) const override;
  void parameters(const std::string& prefix, NamedParameters& out) override;
  void initialize(Rng& rng) override;

 private:
  Sequential main_;
  Sequential shortcut_;  // empty means identity
};

/// Zeroes every gradient in `params`.
void zero_grads(const NamedParameters& params);

}  // namespace mmfal
