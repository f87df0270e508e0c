#pragma once

#include "mmfal/layers.hpp"

#include <memory>
#include <string>

namespace mmfal {

/// Feature extractor of one stream: 3×h×w image → c′×(h/s)×(w/s) map.
class Backbone {
 public:
  Backbone(std::string id, int out_channels, int stride, std::unique_ptr<Sequential> body)
      : id_(std::move(id)), out_channels_(out_channels), stride_(stride), body_(std::move(body)) {}

  const std::string& id() const { return id_; }
  int out_channels() const { return out_channels_; }
  int stride() const { return stride_; }

  /// Throws ConfigError unless the input is 3-channel with sides divisible
  /// by the stride.
  Shape output_shape(const Shape& input) const;
  Tensor forward(const Tensor& image, Saved* saved) const;
  Tensor backward(const Tensor& grad_out, const SavedState& saved) { return body_->backward(grad_out, saved); }
  void parameters(const std::string& prefix, NamedParameters& out) { body_->parameters(prefix, out); }
  void initialize(Rng& rng) { body_->initialize(rng); }

 private:
  std::string id_;
  int out_channels_;
  int stride_;
  std::unique_ptr<Sequential> body_;
};

/// Known ids:
///   "resnet50"  torchvision-layout ResNet-50 trunk with frozen batch norm,
///               c′ = 2048, s = 32;
///   "tiny"      three stride-2 3×3 conv+ReLU blocks 3→8→16→32, s = 8;
///   "linear"    one bias-free s×s conv with stride s = 8, c′ = 32, for tests.
/// Weights start randomly initialized; load pretrained ones with
/// load_parameters from checkpoint.hpp.
std::unique_ptr<Backbone> make_backbone(const std::string& id);

}  // namespace mmfal
