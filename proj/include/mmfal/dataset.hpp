#pragma once

#include "mmfal/types.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

namespace mmfal {

struct RoiBox {
  int x = 0;
  int y = 0;
  int width = 0;
  int height = 0;

  bool valid() const { return width > 0 && height > 0 && x >= 0 && y >= 0; }
  bool fits(int image_width, int image_height) const {
    return valid() && x + width <= image_width && y + height <= image_height;
  }
  friend bool operator==(const RoiBox&, const RoiBox&) = default;
};

struct ImageSample {
  std::string sample_id;
  std::string patient_id;
  ModalityKind modality = ModalityKind::LSTE;
  std::filesystem::path source_path;
  std::optional<RoiBox> roi;
};

struct PatientRecord {
  std::string patient_id;
  FibrosisStage stage = FibrosisStage::F0;
  std::map<ModalityKind, std::vector<ImageSample>> samples;

  std::size_t count(ModalityKind m) const;
  bool has_all(const std::vector<ModalityKind>& modalities) const;
};

/// Catalog of patients and their images. Immutable once built; the
/// per-modality counts are recomputed on every mutation so they can't drift.
class DatasetIndex {
 public:
  DatasetIndex() = default;

  /// Adds a sample to its patient (creating it). Throws UniquenessError on a
  /// repeated sample_id and SchemaError if the stage disagrees with earlier
  /// records of the same patient.
  void add(ImageSample sample, FibrosisStage stage);

  const std::vector<PatientRecord>& patients() const { return patients_; }
  const std::map<ModalityKind, std::size_t>& modality_counts() const { return modality_counts_; }
  std::size_t num_samples() const { return sample_lookup_.size(); }

  const PatientRecord& patient(const std::string& patient_id) const;
  bool has_patient(const std::string& patient_id) const { return patient_lookup_.contains(patient_id); }
  const ImageSample& sample(const std::string& sample_id) const;
  bool has_sample(const std::string& sample_id) const { return sample_lookup_.contains(sample_id); }

  std::array<std::size_t, kNumStages> stage_patient_counts() const;
  /// Patients lacking at least one of `required`. They stay in the index;
  /// build_tuples skips them.
  std::vector<std::string> incomplete_patients(const std::vector<ModalityKind>& required) const;
  std::vector<std::string> patient_ids() const;

 private:
  std::vector<PatientRecord> patients_;
  std::unordered_map<std::string, std::size_t> patient_lookup_;
  std::unordered_map<std::string, std::pair<std::size_t, ModalityKind>> sample_lookup_;
  std::map<ModalityKind, std::size_t> modality_counts_;
};

/// n-tuple of images of one patient, one per requested modality, in the
/// experiment's fixed modality order.
struct MultiModalSample {
  std::string patient_id;
  std::vector<std::pair<ModalityKind, ImageSample>> parts;
  FibrosisStage stage = FibrosisStage::F0;

  std::vector<ModalityKind> modalities() const;
  /// Stable textual id, e.g. "P001|LSTE:P001_LSTE_0|LUS:P001_LUS_3".
  std::string key() const;
};

/// Reads a JSON Lines manifest. Relative image paths resolve against the
/// manifest's directory.
DatasetIndex load_manifest(const std::filesystem::path& path);

/// Writes `index` as JSON Lines, one record per image, patients in index
/// order. Paths are written relative to `relative_to` when possible.
void write_manifest(const DatasetIndex& index, const std::filesystem::path& path,
                    const std::filesystem::path& relative_to = {});

/// Throws ArgumentError unless the list is non-empty and distinct.
void check_modalities(const std::vector<ModalityKind>& modalities);

struct PatientSplit {
  std::vector<std::string> train;
  std::vector<std::string> test;
};

/// Per stage, floor(count × train_fraction) patients go to train and the rest
/// to test. Deterministic given seed.
PatientSplit stratified_patient_split(const DatasetIndex& index, double train_fraction, std::uint64_t seed);

/// Cartesian product of each listed patient's images across `modalities`.
/// Patients missing a modality contribute nothing.
std::vector<MultiModalSample> build_tuples(const DatasetIndex& index, const std::vector<ModalityKind>& modalities,
                                           const std::vector<std::string>& patient_ids);

/// Σ_p Π_m count(p, m) without materializing the tuples.
std::size_t count_tuples(const DatasetIndex& index, const std::vector<ModalityKind>& modalities,
                         const std::vector<std::string>& patient_ids);

}  // namespace mmfal
