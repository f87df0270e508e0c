#pragma once

#include "mmfal/attention.hpp"
#include "mmfal/backbone.hpp"
#include "mmfal/dataset.hpp"
#include "mmfal/image.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mmfal {

/// Probability vector over F0..F4.
struct PredictionState {
  std::array<double, kNumStages> p{};

  /// Most probable stage; exact ties go to the lower stage.
  FibrosisStage argmax() const;
  double sum() const;
  double operator[](std::size_t i) const { return p[i]; }
  double& operator[](std::size_t i) { return p[i]; }
};

/// Numerically stable softmax of five logits.
PredictionState softmax(std::span<const double> logits);

struct ModelConfig {
  std::string backbone = "resnet50";
  /// Optional tensor archive with pretrained backbone weights, loaded into
  /// every stream.
  std::string backbone_weights;
  int reduced_channels = 256;
  int se_ratio = 16;
  /// Output F + M_c ⊗ F instead of M_c ⊗ F.
  bool se_residual = false;
  /// Dropout on the fused vector before the classifier.
  double dropout = 0.5;
  bool freeze_backbone = false;
  std::vector<ModalityKind> modalities{ModalityKind::LSTE};
  std::uint64_t init_seed = 0;

  static constexpr int kNumClasses = static_cast<int>(kNumStages);
  /// Throws ConfigError.
  void validate() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

/// Multi-stream fusion classifier. Each modality gets its own stream:
/// backbone → 1×1 reduction → SE attention → GAP. Stream embeddings are
/// concatenated in modality order and fed to a linear layer + softmax.
///
/// Const members are safe for concurrent callers; training members are not.
class FusionNet {
 public:
  /// Randomly initialized from config.init_seed; backbone_weights, if set,
  /// are loaded unless `load_pretrained` is false.
  explicit FusionNet(ModelConfig config, bool load_pretrained = true);

  const ModelConfig& config() const { return config_; }
  std::size_t num_streams() const { return streams_.size(); }
  int embedding_size() const { return config_.reduced_channels; }
  int fused_size() const { return config_.reduced_channels * static_cast<int>(streams_.size()); }

  Backbone& backbone(std::size_t stream) { return *streams_.at(stream).backbone; }
  const Backbone& backbone(std::size_t stream) const { return *streams_.at(stream).backbone; }
  Conv2d& reducer(std::size_t stream) { return streams_.at(stream).reduce; }
  SqueezeExcite& attention(std::size_t stream) { return streams_.at(stream).se; }
  const SqueezeExcite& attention(std::size_t stream) const { return streams_.at(stream).se; }
  Linear& classifier() { return classifier_; }

  // Inference building blocks.
  Tensor extract_features(std::size_t stream, const Tensor& image) const;
  Tensor reduce_channels(std::size_t stream, const Tensor& features) const;
  Tensor attend(std::size_t stream, const Tensor& reduced) const;
  static Tensor global_pool(const Tensor& features) { return channel_mean(features); }
  /// Backbone features → stream embedding (reduce, attend, pool).
  Tensor embed(std::size_t stream, const Tensor& features) const;
  /// Concatenation in the given order. Throws ArgumentError when empty.
  static Tensor fuse(std::span<const Tensor> embeddings);
  /// Applies dropout when `dropout_rng` is given, then the linear layer.
  Tensor logits(const Tensor& fused, Rng* dropout_rng = nullptr) const;
  PredictionState classify(const Tensor& fused, Rng* dropout_rng = nullptr) const;

  /// Per-stream backbone features → fused vector.
  Tensor fused_from_features(std::span<const Tensor> features) const;
  /// Deterministic forward on one preprocessed image per stream.
  PredictionState forward(std::span<const Tensor> images) const;

  /// Runs a training forward/backward pass for one example and adds its
  /// gradients to the parameters. `inputs` are images, or backbone feature
  /// maps when `inputs_are_features` (only valid with a frozen backbone).
  /// Returns the cross-entropy loss.
  double accumulate_gradients(std::span<const Tensor> inputs, bool inputs_are_features, FibrosisStage label,
                              Rng& dropout_rng);

  /// All parameters with stable names, e.g. "stream0.se.fc0.weight".
  NamedParameters parameters();
  /// Parameters the optimizer should update (honours freeze_backbone).
  NamedParameters trainable_parameters();

 private:
  struct Stream {
    std::unique_ptr<Backbone> backbone;
    Conv2d reduce;
    SqueezeExcite se;
  };

  ModelConfig config_;
  std::vector<Stream> streams_;
  Linear classifier_;
};

/// Checks the sample's modality order against the model and runs a
/// deterministic forward.
PredictionState forward(const FusionNet& model, const MultiModalSample& sample, const ImageStore& images);

/// Mean of `n_mc` dropout-active predictions. Dropout sits only on the fused
/// vector, so the streams run once and the classifier head is sampled n_mc
/// times; this is the same distribution as n_mc full stochastic passes.
PredictionState predict_mc(const FusionNet& model, std::span<const Tensor> images, int n_mc, Rng& rng);
PredictionState predict_mc_from_fused(const FusionNet& model, const Tensor& fused, int n_mc, Rng& rng);

}  // namespace mmfal
