#pragma once

// Shared helpers for the unit and acceptance tests.

#include "mmfal/dataset.hpp"
#include "mmfal/random.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

namespace mmfal::testing {

class TempDir {
 public:
  explicit TempDir(const std::string& tag = "t") {
    static std::atomic<int> counter{0};
    path_ = std::filesystem::temp_directory_path() /
            ("mmfal_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out << text;
}

/// Image-less index: patient i gets counts[i][m] samples of modality
/// `mods[m]` (paths are placeholders, never read).
inline DatasetIndex make_index(const std::vector<ModalityKind>& mods, const std::vector<std::vector<int>>& counts,
                               const std::vector<FibrosisStage>& stages) {
  DatasetIndex index;
  for (std::size_t p = 0; p < counts.size(); ++p) {
    char pid[16];
    std::snprintf(pid, sizeof pid, "P%03zu", p + 1);
    for (std::size_t m = 0; m < mods.size(); ++m) {
      for (int k = 0; k < counts[p][m]; ++k) {
        ImageSample s;
        s.patient_id = pid;
        s.modality = mods[m];
        s.sample_id = std::string(pid) + "_" + std::string(to_string(mods[m])) + "_" + std::to_string(k);
        s.source_path = "/nonexistent/" + s.sample_id + ".png";
        if (mods[m] == ModalityKind::LSTE || mods[m] == ModalityKind::SSTE) s.roi = RoiBox{0, 0, 8, 8};
        index.add(s, stages[p]);
      }
    }
  }
  return index;
}

/// Index with `per_stage[s]` patients of stage s and a single sample each.
inline DatasetIndex stage_count_index(const std::array<int, kNumStages>& per_stage) {
  std::vector<std::vector<int>> counts;
  std::vector<FibrosisStage> stages;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    for (int k = 0; k < per_stage[s]; ++k) {
      counts.push_back({1});
      stages.push_back(stage_from_ordinal(static_cast<int>(s)));
    }
  }
  return make_index({ModalityKind::LUS}, counts, stages);
}

/// Relative error with a floor on the denominator.
inline double relative_error(double a, double b, double floor = 1e-6) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

}  // namespace mmfal::testing
