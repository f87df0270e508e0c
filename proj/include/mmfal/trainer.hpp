#pragma once

#include "mmfal/fusion_net.hpp"
#include "mmfal/optimizer.hpp"

#include <json.hpp>

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace mmfal {

struct TrainConfig {
  double learning_rate = 1e-4;
  /// Epochs per fine-tuning round (per AL iteration, or the whole
  /// supervised run).
  int epochs = 5;
  int batch_size = 16;
  /// Seeds minibatch shuffling and training-time dropout.
  std::uint64_t seed = 0;

  void validate() const;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct LabeledExample {
  const MultiModalSample* sample = nullptr;
  FibrosisStage label = FibrosisStage::F0;
};

/// Cross-entropy training and batched inference for one FusionNet. With a
/// frozen backbone, backbone features are computed once per image and reused.
class Trainer {
 public:
  Trainer(FusionNet& model, const ImageStore& images, TrainConfig config);

  /// Runs `epochs` passes of shuffled minibatch Adam over `examples`.
  /// Returns the mean loss of the last epoch.
  double train(const std::vector<LabeledExample>& examples, int epochs);
  double train(const std::vector<LabeledExample>& examples) { return train(examples, config_.epochs); }

  /// Deterministic fused vectors, one per tuple.
  std::vector<Tensor> fused_vectors(const std::vector<MultiModalSample>& tuples) const;
  std::vector<Tensor> fused_vectors(const std::vector<const MultiModalSample*>& tuples) const;
  std::vector<PredictionState> predict(const std::vector<MultiModalSample>& tuples) const;

  FusionNet& model() { return model_; }
  const FusionNet& model() const { return model_; }
  Adam& optimizer() { return optimizer_; }
  const TrainConfig& config() const { return config_; }

  /// Textual mt19937_64 state, for checkpoints.
  std::string rng_state() const;
  void restore_rng_state(const std::string& state);

 private:
  const Tensor& stream_input(std::size_t stream, const ImageSample& sample) const;

  FusionNet& model_;
  const ImageStore& images_;
  TrainConfig config_;
  Adam optimizer_;
  Rng rng_;
  mutable std::unordered_map<std::string, Tensor> feature_cache_;
};

}  // namespace mmfal
