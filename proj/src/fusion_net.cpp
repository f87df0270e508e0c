#include "mmfal/fusion_net.hpp"

#include "mmfal/checkpoint.hpp"

#include <algorithm>
#include <cmath>

namespace mmfal {

using json = nlohmann::json;

FibrosisStage PredictionState::argmax() const {
  std::size_t best = 0;
  for (std::size_t i = 1; i < kNumStages; ++i) {
    if (p[i] > p[best]) best = i;
  }
  return stage_from_ordinal(static_cast<int>(best));
}

double PredictionState::sum() const {
  double s = 0.0;
  for (double v : p) s += v;
  return s;
}

PredictionState softmax(std::span<const double> logits) {
  if (logits.size() != kNumStages) throw ArgumentError("softmax expects five logits");
  const double m = *std::max_element(logits.begin(), logits.end());
  PredictionState out;
  double total = 0.0;
  for (std::size_t i = 0; i < kNumStages; ++i) {
    out.p[i] = std::exp(logits[i] - m);
    total += out.p[i];
  }
  for (auto& v : out.p) v /= total;
  return out;
}

void ModelConfig::validate() const {
  if (backbone != "resnet50" && backbone != "tiny" && backbone != "linear") {
    throw ConfigError("unknown backbone '" + backbone + "'");
  }
  if (reduced_channels <= 0) throw ConfigError("reduced_channels must be positive");
  if (se_ratio <= 0 || reduced_channels % se_ratio != 0) {
    throw ConfigError("reduced_channels (" + std::to_string(reduced_channels) + ") must be divisible by se_ratio (" +
                      std::to_string(se_ratio) + ")");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("dropout must lie in [0, 1)");
  if (modalities.empty()) throw ConfigError("model needs at least one modality");
  for (std::size_t i = 0; i < modalities.size(); ++i) {
    for (std::size_t j = i + 1; j < modalities.size(); ++j) {
      if (modalities[i] == modalities[j]) throw ConfigError("model modalities must be distinct");
    }
  }
}

void to_json(json& j, const ModelConfig& c) {
  json mods = json::array();
  for (auto m : c.modalities) mods.push_back(std::string(to_string(m)));
  j = json{{"backbone", c.backbone},
           {"backbone_weights", c.backbone_weights},
           {"reduced_channels", c.reduced_channels},
           {"se_ratio", c.se_ratio},
           {"se_residual", c.se_residual},
           {"dropout", c.dropout},
           {"freeze_backbone", c.freeze_backbone},
           {"num_classes", ModelConfig::kNumClasses},
           {"modalities", mods},
           {"init_seed", c.init_seed}};
}

void from_json(const json& j, ModelConfig& c) {
  c = ModelConfig{};
  if (!j.is_object()) throw SchemaError("model config must be an object");
  try {
    c.backbone = j.value("backbone", c.backbone);
    c.backbone_weights = j.value("backbone_weights", c.backbone_weights);
    c.reduced_channels = j.value("reduced_channels", c.reduced_channels);
    c.se_ratio = j.value("se_ratio", c.se_ratio);
    c.se_residual = j.value("se_residual", c.se_residual);
    c.dropout = j.value("dropout", c.dropout);
    c.freeze_backbone = j.value("freeze_backbone", c.freeze_backbone);
    c.init_seed = j.value("init_seed", c.init_seed);
    if (j.contains("num_classes") && j.at("num_classes").get<int>() != ModelConfig::kNumClasses) {
      throw ConfigError("num_classes is fixed at 5");
    }
    if (j.contains("modalities")) {
      c.modalities.clear();
      for (const auto& m : j.at("modalities")) c.modalities.push_back(parse_modality(m.get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("model config: ") + e.what());
  }
}

namespace {

ModelConfig validated(ModelConfig c) {
  c.validate();
  return c;
}

}  // namespace

FusionNet::FusionNet(ModelConfig config, bool load_pretrained)
    : config_(validated(std::move(config))),
      classifier_(config_.reduced_channels * static_cast<int>(config_.modalities.size()), ModelConfig::kNumClasses) {
  Rng rng(config_.init_seed);
  streams_.reserve(config_.modalities.size());
  for (std::size_t i = 0; i < config_.modalities.size(); ++i) {
    auto backbone = make_backbone(config_.backbone);
    backbone->initialize(rng);
    const int width = backbone->out_channels();
    Stream s{std::move(backbone), Conv2d(width, config_.reduced_channels, 1, 1, 0, true),
             SqueezeExcite(config_.reduced_channels, config_.se_ratio, config_.se_residual)};
    s.reduce.initialize(rng);
    s.se.initialize(rng);
    streams_.push_back(std::move(s));
  }
  classifier_.initialize(rng);
  if (load_pretrained && !config_.backbone_weights.empty()) {
    for (auto& s : streams_) load_backbone_weights(*s.backbone, config_.backbone_weights);
  }
}

Tensor FusionNet::extract_features(std::size_t stream, const Tensor& image) const {
  return streams_.at(stream).backbone->forward(image, nullptr);
}

Tensor FusionNet::reduce_channels(std::size_t stream, const Tensor& features) const {
  return streams_.at(stream).reduce.forward(features, nullptr);
}

Tensor FusionNet::attend(std::size_t stream, const Tensor& reduced) const {
  return streams_.at(stream).se.forward(reduced, nullptr);
}

Tensor FusionNet::embed(std::size_t stream, const Tensor& features) const {
  return global_pool(attend(stream, reduce_channels(stream, features)));
}

Tensor FusionNet::fuse(std::span<const Tensor> embeddings) {
  if (embeddings.empty()) throw ArgumentError("fuse needs at least one embedding");
  std::vector<double> all;
  for (const auto& e : embeddings) all.insert(all.end(), e.values().begin(), e.values().end());
  return Tensor::vector(all);
}

namespace {

/// Inverted dropout: kept entries are scaled by 1/(1 − p).
Tensor dropout_mask(std::size_t n, double p, Rng& rng) {
  Tensor mask(Shape{static_cast<int>(n), 1, 1}, 1.0);
  if (p <= 0.0) return mask;
  const double keep_scale = 1.0 / (1.0 - p);
  for (auto& m : mask.storage()) m = uniform_real(rng) < p ? 0.0 : keep_scale;
  return mask;
}

}  // namespace

Tensor FusionNet::logits(const Tensor& fused, Rng* dropout_rng) const {
  if (!fused.all_finite()) throw ArgumentError("fused vector has non-finite entries");
  if (dropout_rng && config_.dropout > 0.0) {
    Tensor dropped = fused;
    const Tensor mask = dropout_mask(fused.size(), config_.dropout, *dropout_rng);
    for (std::size_t i = 0; i < dropped.size(); ++i) dropped[i] *= mask[i];
    return classifier_.forward(dropped, nullptr);
  }
  return classifier_.forward(fused, nullptr);
}

PredictionState FusionNet::classify(const Tensor& fused, Rng* dropout_rng) const {
  return softmax(logits(fused, dropout_rng).values());
}

Tensor FusionNet::fused_from_features(std::span<const Tensor> features) const {
  if (features.size() != streams_.size()) {
    throw ConfigError("model has " + std::to_string(streams_.size()) + " streams, got " +
                      std::to_string(features.size()) + " inputs");
  }
  std::vector<Tensor> embeddings;
  embeddings.reserve(features.size());
  for (std::size_t i = 0; i < features.size(); ++i) embeddings.push_back(embed(i, features[i]));
  return fuse(embeddings);
}

PredictionState FusionNet::forward(std::span<const Tensor> images) const {
  if (images.size() != streams_.size()) {
    throw ConfigError("model has " + std::to_string(streams_.size()) + " streams, got " +
                      std::to_string(images.size()) + " images");
  }
  std::vector<Tensor> features;
  features.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) features.push_back(extract_features(i, images[i]));
  return classify(fused_from_features(features));
}

double FusionNet::accumulate_gradients(std::span<const Tensor> inputs, bool inputs_are_features, FibrosisStage label,
                                       Rng& dropout_rng) {
  if (inputs.size() != streams_.size()) throw ConfigError("stream count mismatch in training pass");
  if (inputs_are_features && !config_.freeze_backbone) {
    throw ConfigError("cached backbone features are only valid with a frozen backbone");
  }
  const std::size_t n = streams_.size();
  const bool train_backbone = !config_.freeze_backbone;

  struct StreamTape {
    Saved backbone, reduce, se, pool;
  };
  std::vector<StreamTape> tape(n);
  GlobalAvgPool gap;
  std::vector<Tensor> embeddings;
  embeddings.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = streams_[i];
    Tensor features = inputs_are_features ? inputs[i]
                                          : s.backbone->forward(inputs[i], train_backbone ? &tape[i].backbone : nullptr);
    Tensor reduced = s.reduce.forward(features, &tape[i].reduce);
    Tensor attended = s.se.forward(reduced, &tape[i].se);
    embeddings.push_back(gap.forward(attended, &tape[i].pool));
  }
  Tensor fused = fuse(embeddings);
  const Tensor mask = dropout_mask(fused.size(), config_.dropout, dropout_rng);
  for (std::size_t i = 0; i < fused.size(); ++i) fused[i] *= mask[i];

  Saved classifier_tape;
  const Tensor z = classifier_.forward(fused, &classifier_tape);
  const PredictionState p = softmax(z.values());
  const auto y = static_cast<std::size_t>(ordinal(label));
  const double loss = -std::log(std::max(p.p[y], 1e-300));

  Tensor g_logits(Shape{ModelConfig::kNumClasses, 1, 1});
  for (std::size_t k = 0; k < kNumStages; ++k) g_logits[k] = p.p[k] - (k == y ? 1.0 : 0.0);
  Tensor g_fused = classifier_.backward(g_logits, *classifier_tape);
  for (std::size_t i = 0; i < g_fused.size(); ++i) g_fused[i] *= mask[i];

  const int d = config_.reduced_channels;
  for (std::size_t i = 0; i < n; ++i) {
    auto& s = streams_[i];
    Tensor g_embed(Shape{d, 1, 1});
    std::copy_n(g_fused.data() + static_cast<std::ptrdiff_t>(i) * d, d, g_embed.data());
    Tensor g = gap.backward(g_embed, *tape[i].pool);
    g = s.se.backward(g, *tape[i].se);
    g = s.reduce.backward(g, *tape[i].reduce);
    if (train_backbone && !inputs_are_features) s.backbone->backward(g, *tape[i].backbone);
  }
  return loss;
}

NamedParameters FusionNet::parameters() {
  NamedParameters out;
  for (std::size_t i = 0; i < streams_.size(); ++i) {
    const std::string prefix = "stream" + std::to_string(i) + ".";
    streams_[i].backbone->parameters(prefix + "backbone.", out);
    streams_[i].reduce.parameters(prefix + "reduce.", out);
    streams_[i].se.parameters(prefix + "se.", out);
  }
  classifier_.parameters("classifier.", out);
  return out;
}

NamedParameters FusionNet::trainable_parameters() {
  NamedParameters out;
  for (auto& [name, p] : parameters()) {
    if (!p->trainable) continue;
    if (config_.freeze_backbone && name.find(".backbone.") != std::string::npos) continue;
    out.emplace_back(name, p);
  }
  return out;
}

PredictionState forward(const FusionNet& model, const MultiModalSample& sample, const ImageStore& images) {
  if (sample.modalities() != model.config().modalities) {
    throw ConfigError("sample modality order does not match the model configuration");
  }
  std::vector<Tensor> inputs;
  inputs.reserve(sample.parts.size());
  for (const auto& [m, s] : sample.parts) inputs.push_back(images.get(s));
  return model.forward(inputs);
}

PredictionState predict_mc_from_fused(const FusionNet& model, const Tensor& fused, int n_mc, Rng& rng) {
  if (n_mc < 1) throw ArgumentError("n_mc must be at least 1");
  if (model.config().dropout <= 0.0) return model.classify(fused);
  PredictionState mean;
  for (int k = 0; k < n_mc; ++k) {
    const PredictionState s = model.classify(fused, &rng);
    for (std::size_t i = 0; i < kNumStages; ++i) mean.p[i] += s.p[i];
  }
  for (auto& v : mean.p) v /= n_mc;
  return mean;
}

PredictionState predict_mc(const FusionNet& model, std::span<const Tensor> images, int n_mc, Rng& rng) {
  if (n_mc < 1) throw ArgumentError("n_mc must be at least 1");
  std::vector<Tensor> features;
  features.reserve(images.size());
  for (std::size_t i = 0; i < images.size(); ++i) features.push_back(model.extract_features(i, images[i]));
  return predict_mc_from_fused(model, model.fused_from_features(features), n_mc, rng);
}

}  // namespace mmfal
