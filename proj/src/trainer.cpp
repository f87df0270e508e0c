#include "mmfal/trainer.hpp"

#include <numeric>
#include <sstream>

namespace mmfal {

using json = nlohmann::json;

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (epochs < 1) throw ConfigError("epochs must be at least 1");
  if (batch_size < 1) throw ConfigError("batch_size must be at least 1");
}

void to_json(json& j, const TrainConfig& c) {
  j = json{{"learning_rate", c.learning_rate},
           {"epochs", c.epochs},
           {"batch_size", c.batch_size},
           {"seed", c.seed},
           {"loss", "cross_entropy"},
           {"optimizer", "adam"}};
}

void from_json(const json& j, TrainConfig& c) {
  c = TrainConfig{};
  if (!j.is_object()) throw SchemaError("train config must be an object");
  try {
    c.learning_rate = j.value("learning_rate", c.learning_rate);
    c.epochs = j.value("epochs", c.epochs);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.seed = j.value("seed", c.seed);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("train config: ") + e.what());
  }
}

Trainer::Trainer(FusionNet& model, const ImageStore& images, TrainConfig config)
    : model_(model),
      images_(images),
      config_(config),
      optimizer_(AdamConfig{config.learning_rate}),
      rng_(config.seed) {
  config_.validate();
}

const Tensor& Trainer::stream_input(std::size_t stream, const ImageSample& sample) const {
  const Tensor& image = images_.get(sample);
  if (!model_.config().freeze_backbone) return image;
  auto it = feature_cache_.find(sample.sample_id);
  if (it == feature_cache_.end()) {
    it = feature_cache_.emplace(sample.sample_id, model_.extract_features(stream, image)).first;
  }
  return it->second;
}

double Trainer::train(const std::vector<LabeledExample>& examples, int epochs) {
  if (examples.empty()) return 0.0;
  const auto& modalities = model_.config().modalities;
  for (const auto& e : examples) {
    if (e.sample->modalities() != modalities) throw ConfigError("training tuple modality order mismatches the model");
  }
  const bool features = model_.config().freeze_backbone;
  const NamedParameters params = model_.trainable_parameters();
  std::vector<std::size_t> order(examples.size());
  std::vector<Tensor> inputs(modalities.size());

  double epoch_loss = 0.0;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_in_place(order, rng_);
    epoch_loss = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(config_.batch_size)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(config_.batch_size));
      zero_grads(params);
      for (std::size_t k = start; k < end; ++k) {
        const auto& ex = examples[order[k]];
        for (std::size_t s = 0; s < modalities.size(); ++s) inputs[s] = stream_input(s, ex.sample->parts[s].second);
        epoch_loss += model_.accumulate_gradients(inputs, features, ex.label, rng_);
      }
      optimizer_.step(params, 1.0 / static_cast<double>(end - start));
    }
    epoch_loss /= static_cast<double>(examples.size());
  }
  return epoch_loss;
}

std::vector<Tensor> Trainer::fused_vectors(const std::vector<const MultiModalSample*>& tuples) const {
  const auto& modalities = model_.config().modalities;
  std::vector<Tensor> out;
  out.reserve(tuples.size());
  std::vector<Tensor> features(modalities.size());
  for (const auto* t : tuples) {
    if (t->modalities() != modalities) throw ConfigError("tuple modality order mismatches the model");
    for (std::size_t s = 0; s < modalities.size(); ++s) {
      const Tensor& in = stream_input(s, t->parts[s].second);
      features[s] = model_.config().freeze_backbone ? in : model_.extract_features(s, in);
    }
    out.push_back(model_.fused_from_features(features));
  }
  return out;
}

std::vector<Tensor> Trainer::fused_vectors(const std::vector<MultiModalSample>& tuples) const {
  std::vector<const MultiModalSample*> ptrs;
  ptrs.reserve(tuples.size());
  for (const auto& t : tuples) ptrs.push_back(&t);
  return fused_vectors(ptrs);
}

std::vector<PredictionState> Trainer::predict(const std::vector<MultiModalSample>& tuples) const {
  std::vector<PredictionState> out;
  out.reserve(tuples.size());
  for (const auto& f : fused_vectors(tuples)) out.push_back(model_.classify(f));
  return out;
}

std::string Trainer::rng_state() const {
  std::ostringstream os;
  os << rng_;
  return os.str();
}

void Trainer::restore_rng_state(const std::string& state) {
  std::istringstream is(state);
  is >> rng_;
  if (!is) throw DecodeError("invalid RNG state");
}

}  // namespace mmfal
