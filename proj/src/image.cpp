#include "mmfal/image.hpp"

#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

namespace mmfal {

RawImage read_image(const std::filesystem::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw DecodeError("cannot decode image " + path.string());

  double scale;
  switch (m.depth()) {
    case CV_8U: scale = 1.0 / 255.0; break;
    case CV_16U: scale = 1.0 / 65535.0; break;
    default: throw DecodeError("unsupported pixel depth in " + path.string());
  }
  switch (m.channels()) {
    case 1: break;
    case 3: cv::cvtColor(m, m, cv::COLOR_BGR2RGB); break;
    case 4: cv::cvtColor(m, m, cv::COLOR_BGRA2RGB); break;
    default: throw DecodeError("unsupported channel count in " + path.string());
  }
  cv::Mat f;
  m.convertTo(f, CV_64F, scale);

  RawImage out{f.rows, f.cols, f.channels(), {}};
  out.pixels.resize(static_cast<std::size_t>(f.rows) * f.cols * f.channels());
  for (int y = 0; y < f.rows; ++y) {
    const double* row = f.ptr<double>(y);
    std::copy(row, row + static_cast<std::ptrdiff_t>(f.cols) * f.channels(),
              out.pixels.begin() + static_cast<std::ptrdiff_t>(y) * f.cols * f.channels());
  }
  return out;
}

namespace {

ImageTensor finish(const cv::Mat& source, TargetSize target, const Normalization& norm) {
  if (target.height <= 0 || target.width <= 0) throw ArgumentError("target size must be positive");
  cv::Mat resized;
  if (source.rows == target.height && source.cols == target.width) {
    resized = source;
  } else {
    cv::resize(source, resized, cv::Size(target.width, target.height), 0, 0, cv::INTER_LINEAR);
  }

  ImageTensor out(Shape{3, target.height, target.width});
  const int src_channels = resized.channels();
  for (int y = 0; y < target.height; ++y) {
    const double* row = resized.ptr<double>(y);
    for (int x = 0; x < target.width; ++x) {
      for (int c = 0; c < 3; ++c) {
        // Grayscale is replicated into all three channels.
        const double v = row[x * src_channels + (src_channels == 1 ? 0 : c)];
        out.at(c, y, x) = (v - norm.mean[static_cast<std::size_t>(c)]) / norm.std[static_cast<std::size_t>(c)];
      }
    }
  }
  return out;
}

}  // namespace

ImageTensor preprocess(const RawImage& image, const std::optional<RoiBox>& roi, TargetSize target,
                       const Normalization& norm) {
  if (image.channels != 1 && image.channels != 3) throw DecodeError("image must have 1 or 3 channels");
  cv::Mat m(image.height, image.width, CV_64FC(image.channels), const_cast<double*>(image.pixels.data()));
  if (roi) {
    if (!roi->fits(image.width, image.height)) {
      throw BoundsError("roi [" + std::to_string(roi->x) + "," + std::to_string(roi->y) + "," +
                        std::to_string(roi->width) + "," + std::to_string(roi->height) + "] outside " +
                        std::to_string(image.width) + "x" + std::to_string(image.height) + " image");
    }
    m = m(cv::Rect(roi->x, roi->y, roi->width, roi->height));
  }
  return finish(m, target, norm);
}

ImageTensor preprocess(const ImageSample& sample, TargetSize target, const Normalization& norm) {
  return preprocess(read_image(sample.source_path), sample.roi, target, norm);
}

ImageTensor preprocess(const ImageTensor& image, TargetSize target, const Normalization& norm) {
  if (image.channels() != 3) throw ArgumentError("expected a 3-channel tensor");
  cv::Mat m(image.height(), image.width(), CV_64FC3);
  for (int y = 0; y < image.height(); ++y) {
    double* row = m.ptr<double>(y);
    for (int x = 0; x < image.width(); ++x) {
      for (int c = 0; c < 3; ++c) row[x * 3 + c] = image.at(c, y, x);
    }
  }
  return finish(m, target, norm);
}

void write_png(const std::filesystem::path& path, int height, int width, int channels,
               const std::vector<std::uint8_t>& pixels) {
  if (channels != 1 && channels != 3) throw ArgumentError("write_png supports 1 or 3 channels");
  if (pixels.size() != static_cast<std::size_t>(height) * width * channels) {
    throw ArgumentError("write_png: pixel buffer size mismatch");
  }
  cv::Mat m(height, width, channels == 1 ? CV_8UC1 : CV_8UC3, const_cast<std::uint8_t*>(pixels.data()));
  cv::Mat bgr;
  if (channels == 3) {
    cv::cvtColor(m, bgr, cv::COLOR_RGB2BGR);
  } else {
    bgr = m;
  }
  // Fixed compression level keeps the encoded bytes reproducible.
  if (!cv::imwrite(path.string(), bgr, {cv::IMWRITE_PNG_COMPRESSION, 6})) {
    throw IoError("cannot write " + path.string());
  }
}

const ImageTensor& ImageStore::get(const ImageSample& sample) const {
  {
    std::lock_guard lock(mutex_);
    auto it = cache_.find(sample.sample_id);
    if (it != cache_.end()) return *it->second;
  }
  auto tensor = std::make_unique<ImageTensor>(preprocess(sample, target_, norm_));
  std::lock_guard lock(mutex_);
  auto [it, inserted] = cache_.try_emplace(sample.sample_id, std::move(tensor));
  return *it->second;
}

std::size_t ImageStore::cached() const {
  std::lock_guard lock(mutex_);
  return cache_.size();
}

std::string codec_version() { return "OpenCV " CV_VERSION; }

}  // namespace mmfal
