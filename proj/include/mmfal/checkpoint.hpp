#pragma once

#include "mmfal/backbone.hpp"
#include "mmfal/fusion_net.hpp"
#include "mmfal/image.hpp"
#include "mmfal/optimizer.hpp"

#include <json.hpp>

#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace mmfal {

/// Self-describing tensor file:
///
///   8 bytes   magic "MMFALTA1"
///   8 bytes   header length N (little-endian uint64)
///   N bytes   UTF-8 JSON header {"meta": {...}, "tensors": [{"name", "shape": [c,h,w]}...]}
///   payload   each tensor's values as little-endian float64, in header order
///
/// Values are copied bit for bit, so a save/load round trip is exact.
struct TensorArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
TensorArchive read_archive(const std::filesystem::path& path);

/// Copies archive tensors into matching parameters. With `strict`, every
/// parameter must be present; shapes must always agree.
void load_parameters(const NamedParameters& params, const TensorArchive& archive, const std::string& prefix = "",
                     bool strict = true);

/// Loads backbone weights written without the "streamN.backbone." prefix
/// (e.g. by tools/export_resnet50_weights.py).
void load_backbone_weights(Backbone& backbone, const std::filesystem::path& path);

/// Weights, ModelConfig and normalization constants, plus optimizer moments
/// when given.
void save_checkpoint(const std::filesystem::path& path, FusionNet& model, const Normalization& norm,
                     const Adam* optimizer = nullptr, nlohmann::json extra = nlohmann::json::object());

struct LoadedCheckpoint {
  std::unique_ptr<FusionNet> model;
  Normalization normalization;
  /// Present when the checkpoint stored optimizer state.
  std::unique_ptr<Adam> optimizer;
  nlohmann::json extra;
};

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace mmfal
