#include "mmfal/backbone.hpp"

#include "mmfal/types.hpp"

namespace mmfal {

Shape Backbone::output_shape(const Shape& input) const {
  if (input.c != 3) throw ConfigError("backbone '" + id_ + "' expects a 3-channel image, got " + to_string(input));
  if (input.h % stride_ != 0 || input.w % stride_ != 0) {
    throw ConfigError("backbone '" + id_ + "' needs input sides divisible by " + std::to_string(stride_) + ", got " +
                      to_string(input));
  }
  return {out_channels_, input.h / stride_, input.w / stride_};
}

Tensor Backbone::forward(const Tensor& image, Saved* saved) const {
  output_shape(image.shape());
  return body_->forward(image, saved);
}

namespace {

std::unique_ptr<Backbone> resnet50() {
  auto body = std::make_unique<Sequential>();
  body->emplace<Conv2d>("conv1", 3, 64, 7, 2, 3, false);
  body->emplace<FrozenBatchNorm>("bn1", 64);
  body->emplace<ReLU>("relu");
  body->emplace<MaxPool2d>("maxpool", 3, 2, 1);

  constexpr int kBlocks[4] = {3, 4, 6, 3};
  constexpr int kWidths[4] = {64, 128, 256, 512};
  int in = 64;
  for (int stage = 0; stage < 4; ++stage) {
    auto layer = std::make_unique<Sequential>();
    for (int b = 0; b < kBlocks[stage]; ++b) {
      const int stride = (b == 0 && stage > 0) ? 2 : 1;
      layer->emplace<Bottleneck>(std::to_string(b), in, kWidths[stage], stride);
      in = kWidths[stage] * Bottleneck::kExpansion;
    }
    body->add("layer" + std::to_string(stage + 1), std::move(layer));
  }
  return std::make_unique<Backbone>("resnet50", 2048, 32, std::move(body));
}

std::unique_ptr<Backbone> tiny() {
  auto body = std::make_unique<Sequential>();
  constexpr int kChannels[4] = {3, 8, 16, 32};
  for (int b = 0; b < 3; ++b) {
    body->emplace<Conv2d>("conv" + std::to_string(b + 1), kChannels[b], kChannels[b + 1], 3, 2, 1, true);
    body->emplace<ReLU>("relu" + std::to_string(b + 1));
  }
  return std::make_unique<Backbone>("tiny", 32, 8, std::move(body));
}

std::unique_ptr<Backbone> linear() {
  auto body = std::make_unique<Sequential>();
  body->emplace<Conv2d>("proj", 3, 32, 8, 8, 0, false);
  return std::make_unique<Backbone>("linear", 32, 8, std::move(body));
}

}  // namespace

std::unique_ptr<Backbone> make_backbone(const std::string& id) {
  if (id == "resnet50") return resnet50();
  if (id == "tiny") return tiny();
  if (id == "linear") return linear();
  throw ConfigError("unknown backbone '" + id + "'");
}

}  // namespace mmfal
