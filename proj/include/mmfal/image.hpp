#pragma once

#include "mmfal/dataset.hpp"
#include "mmfal/tensor.hpp"

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace mmfal {

/// A preprocessed 3×h×w network input.
using ImageTensor = Tensor;

/// Per-channel (v − mean) / std applied after scaling pixels to [0, 1].
struct Normalization {
  std::array<double, 3> mean{0.485, 0.456, 0.406};
  std::array<double, 3> std{0.229, 0.224, 0.225};

  static Normalization identity() { return {{0.0, 0.0, 0.0}, {1.0, 1.0, 1.0}}; }
  friend bool operator==(const Normalization&, const Normalization&) = default;
};

struct TargetSize {
  int height = 224;
  int width = 224;
};

/// Interpolation used by every resize; recorded in run reports.
inline constexpr const char* kResizeInterpolation = "bilinear";

/// Decoded 8- or 16-bit image, RGB order, values scaled to [0, 1].
struct RawImage {
  int height = 0;
  int width = 0;
  int channels = 0;  // 1 or 3
  std::vector<double> pixels;  // interleaved, row-major
};

RawImage read_image(const std::filesystem::path& path);

/// Loads `sample`, crops its roi if present, resizes the crop bilinearly to
/// `target`, replicates grayscale into three channels and normalizes.
ImageTensor preprocess(const ImageSample& sample, TargetSize target, const Normalization& norm = {});

ImageTensor preprocess(const RawImage& image, const std::optional<RoiBox>& roi, TargetSize target,
                       const Normalization& norm = {});

/// Re-applies resize and normalization to an already preprocessed tensor.
ImageTensor preprocess(const ImageTensor& image, TargetSize target, const Normalization& norm = {});

/// Writes 8-bit pixels (1 or 3 channels, RGB order) losslessly as PNG.
void write_png(const std::filesystem::path& path, int height, int width, int channels,
               const std::vector<std::uint8_t>& pixels);

/// Version string of the image codec library.
std::string codec_version();

/// Thread-safe memo of preprocessed tensors keyed by sample_id.
class ImageStore {
 public:
  ImageStore(TargetSize target, Normalization norm) : target_(target), norm_(norm) {}

  const ImageTensor& get(const ImageSample& sample) const;
  TargetSize target() const { return target_; }
  const Normalization& normalization() const { return norm_; }
  std::size_t cached() const;

 private:
  TargetSize target_;
  Normalization norm_;
  mutable std::mutex mutex_;
  mutable std::unordered_map<std::string, std::unique_ptr<ImageTensor>> cache_;
};

}  // namespace mmfal
