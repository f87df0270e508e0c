#include "mmfal/synthetic.hpp"

#include "mmfal/image.hpp"
#include "mmfal/random.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace mmfal {

using json = nlohmann::json;

std::vector<ModalitySignal> SyntheticSpec::default_modalities() {
  // (LSTE, LSTQ), (LSTE, SSTE) and (LSTE, LUS) each identify all five
  // stages; no single modality does.
  return {
      {ModalityKind::LSTE, 5, 5, {0, 0, 1, 1, 2}, 1.0, 1.0},
      {ModalityKind::SSTE, 3, 5, {0, 1, 1, 2, 2}, 0.8, 1.0},
      {ModalityKind::LSTQ, 3, 5, {0, 1, 0, 1, 2}, 1.0, 1.0},
      {ModalityKind::LUS, 7, 7, {0, 1, 2, 1, 2}, 0.5, 1.5},
  };
}

SyntheticSpec SyntheticSpec::noiseless() const {
  SyntheticSpec s = *this;
  s.pixel_noise = 0.0;
  s.patient_jitter = 0.0;
  s.corrupt_fraction = 0.0;
  return s;
}

void to_json(json& j, const SyntheticSpec& spec) {
  json mods = json::array();
  for (const auto& m : spec.modalities) {
    mods.push_back({{"modality", std::string(to_string(m.kind))},
                    {"images_min", m.images_min},
                    {"images_max", m.images_max},
                    {"code", m.code},
                    {"contrast", m.contrast},
                    {"noise_scale", m.noise_scale}});
  }
  j = json{{"stage_patient_counts", spec.stage_patient_counts},
           {"modalities", mods},
           {"image_size", spec.image_size},
           {"roi_margin", spec.roi_margin},
           {"pixel_noise", spec.pixel_noise},
           {"patient_jitter", spec.patient_jitter},
           {"corrupt_fraction", spec.corrupt_fraction}};
}

void from_json(const json& j, SyntheticSpec& spec) {
  spec = SyntheticSpec{};
  if (!j.is_object()) throw SchemaError("synthetic spec must be an object");
  try {
    if (j.contains("stage_patient_counts")) spec.stage_patient_counts = j.at("stage_patient_counts");
    if (j.contains("image_size")) spec.image_size = j.at("image_size");
    if (j.contains("roi_margin")) spec.roi_margin = j.at("roi_margin");
    if (j.contains("pixel_noise")) spec.pixel_noise = j.at("pixel_noise");
    if (j.contains("patient_jitter")) spec.patient_jitter = j.at("patient_jitter");
    if (j.contains("corrupt_fraction")) spec.corrupt_fraction = j.at("corrupt_fraction");
    if (j.contains("modalities")) {
      spec.modalities.clear();
      for (const auto& m : j.at("modalities")) {
        ModalitySignal s;
        s.kind = parse_modality(m.at("modality").get<std::string>());
        s.images_min = m.value("images_min", s.images_min);
        s.images_max = m.value("images_max", s.images_max);
        if (m.contains("code")) s.code = m.at("code");
        s.contrast = m.value("contrast", s.contrast);
        s.noise_scale = m.value("noise_scale", s.noise_scale);
        spec.modalities.push_back(s);
      }
    }
  } catch (const json::exception& e) {
    throw SchemaError(std::string("synthetic spec: ") + e.what());
  }
}

namespace {

void validate(const SyntheticSpec& spec) {
  for (int c : spec.stage_patient_counts) {
    if (c <= 0) throw ConfigError("synthetic spec: per-stage patient counts must be positive");
  }
  if (spec.modalities.empty()) throw ConfigError("synthetic spec: no modalities");
  for (std::size_t i = 0; i < spec.modalities.size(); ++i) {
    const auto& m = spec.modalities[i];
    if (m.images_min <= 0 || m.images_max < m.images_min) {
      throw ConfigError("synthetic spec: image counts for " + std::string(to_string(m.kind)) +
                          " must satisfy 0 < min <= max");
    }
    for (std::size_t j = i + 1; j < spec.modalities.size(); ++j) {
      if (spec.modalities[j].kind == m.kind) throw ConfigError("synthetic spec: duplicate modality");
    }
  }
  if (spec.image_size <= 0 || spec.roi_margin < 0) throw ConfigError("synthetic spec: bad image geometry");
  if (spec.pixel_noise < 0 || spec.patient_jitter < 0 || spec.corrupt_fraction < 0 || spec.corrupt_fraction > 1) {
    throw ConfigError("synthetic spec: noise parameters out of range");
  }
}

bool carries_roi(ModalityKind m) { return m == ModalityKind::LSTE || m == ModalityKind::SSTE; }

/// Modality-specific stripe texture in [-1, 1].
double texture(ModalityKind m, int x, int y) {
  constexpr double kTau = 6.283185307179586;
  switch (m) {
    case ModalityKind::LSTE: return std::sin(kTau * y / 6.0);
    case ModalityKind::SSTE: return std::sin(kTau * (x + y) / 8.0);
    case ModalityKind::LSTQ: return std::sin(kTau * x / 6.0);
    case ModalityKind::LUS: return std::sin(kTau * x / 5.0) * std::sin(kTau * y / 5.0);
  }
  return 0.0;
}

std::uint8_t quantize(double v) { return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

}  // namespace

DatasetIndex generate_synthetic(const SyntheticSpec& spec, std::uint64_t seed, const std::filesystem::path& out_dir) {
  validate(spec);
  const auto image_dir = out_dir / "images";
  std::filesystem::create_directories(image_dir);

  Rng rng(seed);
  std::vector<FibrosisStage> stages;
  for (std::size_t s = 0; s < kNumStages; ++s) {
    stages.insert(stages.end(), static_cast<std::size_t>(spec.stage_patient_counts[s]), stage_from_ordinal(static_cast<int>(s)));
  }
  shuffle_in_place(stages, rng);

  DatasetIndex index;
  const int side = spec.image_size;
  for (std::size_t p = 0; p < stages.size(); ++p) {
    char pid[16];
    std::snprintf(pid, sizeof pid, "P%03zu", p + 1);
    const FibrosisStage stage = stages[p];

    for (const auto& mod : spec.modalities) {
      const int n_images = mod.images_min + static_cast<int>(uniform_index(rng, static_cast<std::size_t>(mod.images_max - mod.images_min + 1)));
      const double jitter = spec.patient_jitter * standard_normal(rng);
      const bool with_roi = carries_roi(mod.kind);
      const int margin = with_roi ? spec.roi_margin : 0;
      const int full = side + 2 * margin;
      const int channels = mod.kind == ModalityKind::LUS ? 1 : 3;

      for (int k = 0; k < n_images; ++k) {
        int code = mod.code[static_cast<std::size_t>(ordinal(stage))];
        if (spec.corrupt_fraction > 0 && uniform_real(rng) < spec.corrupt_fraction) {
          int other = static_cast<int>(uniform_index(rng, kNumStages - 1));
          if (other >= ordinal(stage)) ++other;
          code = mod.code[static_cast<std::size_t>(other)];
        }
        const double level = (code + jitter) * mod.contrast;
        const double base = 0.3 + 0.18 * level;
        const double amplitude = 0.05 + 0.05 * level;

        RoiBox roi{0, 0, side, side};
        if (with_roi) {
          roi.x = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(2 * margin + 1)));
          roi.y = static_cast<int>(uniform_index(rng, static_cast<std::size_t>(2 * margin + 1)));
        }

        std::vector<std::uint8_t> pixels(static_cast<std::size_t>(full) * full * channels);
        const double sigma = spec.pixel_noise * mod.noise_scale;
        for (int y = 0; y < full; ++y) {
          for (int x = 0; x < full; ++x) {
            const bool inside = x >= roi.x && x < roi.x + side && y >= roi.y && y < roi.y + side;
            double v = inside ? base + amplitude * texture(mod.kind, x - roi.x, y - roi.y) : 0.05;
            if (sigma > 0) v += sigma * standard_normal(rng);
            const std::size_t at = (static_cast<std::size_t>(y) * full + x) * channels;
            if (channels == 1) {
              pixels[at] = quantize(v);
            } else {
              // Elastography-style colour map: stiff → red, soft → blue.
              pixels[at] = quantize(v);
              pixels[at + 1] = quantize(0.5 * v + 0.25);
              pixels[at + 2] = quantize(1.0 - v);
            }
          }
        }

        const std::string sid = std::string(pid) + "_" + std::string(to_string(mod.kind)) + "_" + std::to_string(k);
        const auto file = image_dir / (sid + ".png");
        write_png(file, full, full, channels, pixels);
        index.add(ImageSample{sid, pid, mod.kind, file, with_roi ? std::optional<RoiBox>(roi) : std::nullopt}, stage);
      }
    }
  }

  const auto manifest = out_dir / "manifest.jsonl";
  write_manifest(index, manifest, out_dir);
  return load_manifest(manifest);
}

}  // namespace mmfal
