#pragma once

#include "mmfal/dataset.hpp"

#include <json.hpp>

#include <array>
#include <cstdint>
#include <filesystem>
#include <vector>

namespace mmfal {

/// How one modality renders a stage. `code` maps each stage to a signal
/// level; codes are deliberately non-injective so a single modality cannot
/// separate every stage.
struct ModalitySignal {
  ModalityKind kind = ModalityKind::LSTE;
  int images_min = 3;
  int images_max = 5;
  std::array<int, kNumStages> code{0, 0, 1, 1, 2};
  double contrast = 1.0;
  /// Multiplier on SyntheticSpec::pixel_noise for this modality.
  double noise_scale = 1.0;
};

struct SyntheticSpec {
  std::array<int, kNumStages> stage_patient_counts{41, 51, 31, 27, 18};
  std::vector<ModalitySignal> modalities = default_modalities();
  /// Side of the square region the network sees.
  int image_size = 32;
  /// LSTE/SSTE files carry a border of this width around their roi.
  int roi_margin = 6;
  /// Per-pixel Gaussian noise (std, intensity units in [0, 1]).
  double pixel_noise = 0.08;
  /// Per-patient Gaussian offset on the signal level, shared by all of that
  /// patient's images.
  double patient_jitter = 0.3;
  /// Fraction of images rendered with another stage's signal.
  double corrupt_fraction = 0.05;

  static std::vector<ModalitySignal> default_modalities();
  /// Zero pixel noise, jitter and corruption.
  SyntheticSpec noiseless() const;
};

void to_json(nlohmann::json& j, const SyntheticSpec& spec);
void from_json(const nlohmann::json& j, SyntheticSpec& spec);

/// Renders the dataset as PNG files plus `manifest.jsonl` under `out_dir`,
/// then loads it back through load_manifest. Same spec and seed give
/// byte-identical files.
DatasetIndex generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed, const std::filesystem::path& out_dir);

}  // namespace mmfal
