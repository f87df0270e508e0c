#include "mmfal/dataset.hpp"

#include "mmfal/random.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>

namespace mmfal {

using json = nlohmann::json;

std::size_t PatientRecord::count(ModalityKind m) const {
  auto it = samples.find(m);
  return it == samples.end() ? 0 : it->second.size();
}

bool PatientRecord::has_all(const std::vector<ModalityKind>& modalities) const {
  return std::all_of(modalities.begin(), modalities.end(), [&](ModalityKind m) { return count(m) > 0; });
}

void DatasetIndex::add(ImageSample sample, FibrosisStage stage) {
  if (sample.patient_id.empty()) throw SchemaError("sample '" + sample.sample_id + "' has an empty patient_id");
  if (sample.sample_id.empty()) throw SchemaError("empty sample_id");
  if (sample_lookup_.contains(sample.sample_id)) {
    throw UniquenessError("duplicate sample_id '" + sample.sample_id + "'");
  }
  auto [it, inserted] = patient_lookup_.try_emplace(sample.patient_id, patients_.size());
  if (inserted) {
    patients_.push_back(PatientRecord{sample.patient_id, stage, {}});
  } else if (patients_[it->second].stage != stage) {
    throw SchemaError("patient '" + sample.patient_id + "' has conflicting stages " +
                      std::string(to_string(patients_[it->second].stage)) + " and " + std::string(to_string(stage)));
  }
  auto& record = patients_[it->second];
  const auto modality = sample.modality;
  auto& bucket = record.samples[modality];
  sample_lookup_.emplace(sample.sample_id, std::make_pair(it->second, modality));
  bucket.push_back(std::move(sample));
  ++modality_counts_[modality];
}

const PatientRecord& DatasetIndex::patient(const std::string& patient_id) const {
  auto it = patient_lookup_.find(patient_id);
  if (it == patient_lookup_.end()) throw ArgumentError("unknown patient '" + patient_id + "'");
  return patients_[it->second];
}

const ImageSample& DatasetIndex::sample(const std::string& sample_id) const {
  auto it = sample_lookup_.find(sample_id);
  if (it == sample_lookup_.end()) throw ArgumentError("unknown sample '" + sample_id + "'");
  const auto& [patient_index, modality] = it->second;
  for (const auto& s : patients_[patient_index].samples.at(modality)) {
    if (s.sample_id == sample_id) return s;
  }
  throw ArgumentError("unknown sample '" + sample_id + "'");
}

std::array<std::size_t, kNumStages> DatasetIndex::stage_patient_counts() const {
  std::array<std::size_t, kNumStages> counts{};
  for (const auto& p : patients_) ++counts[static_cast<std::size_t>(ordinal(p.stage))];
  return counts;
}

std::vector<std::string> DatasetIndex::incomplete_patients(const std::vector<ModalityKind>& required) const {
  std::vector<std::string> out;
  for (const auto& p : patients_) {
    if (!p.has_all(required)) out.push_back(p.patient_id);
  }
  return out;
}

std::vector<std::string> DatasetIndex::patient_ids() const {
  std::vector<std::string> out;
  out.reserve(patients_.size());
  for (const auto& p : patients_) out.push_back(p.patient_id);
  return out;
}

std::vector<ModalityKind> MultiModalSample::modalities() const {
  std::vector<ModalityKind> out;
  out.reserve(parts.size());
  for (const auto& [m, s] : parts) out.push_back(m);
  return out;
}

std::string MultiModalSample::key() const {
  std::string k = patient_id;
  for (const auto& [m, s] : parts) {
    k += '|';
    k += to_string(m);
    k += ':';
    k += s.sample_id;
  }
  return k;
}

namespace {

std::string require_string(const json& record, const char* field, std::size_t line) {
  auto it = record.find(field);
  if (it == record.end() || !it->is_string()) {
    throw SchemaError("manifest line " + std::to_string(line) + ": field '" + field + "' missing or not a string");
  }
  return it->get<std::string>();
}

std::optional<RoiBox> parse_roi(const json& record, std::size_t line) {
  auto it = record.find("roi");
  if (it == record.end() || it->is_null()) return std::nullopt;
  if (!it->is_array() || it->size() != 4 ||
      !std::all_of(it->begin(), it->end(), [](const json& v) { return v.is_number_integer(); })) {
    throw SchemaError("manifest line " + std::to_string(line) + ": roi must be [x,y,w,h] integers or null");
  }
  RoiBox box{(*it)[0].get<int>(), (*it)[1].get<int>(), (*it)[2].get<int>(), (*it)[3].get<int>()};
  if (!box.valid()) {
    throw SchemaError("manifest line " + std::to_string(line) + ": roi needs x,y >= 0 and positive width/height");
  }
  return box;
}

bool roi_required(ModalityKind m) { return m == ModalityKind::LSTE || m == ModalityKind::SSTE; }

}  // namespace

DatasetIndex load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open manifest " + path.string());
  const auto base = path.parent_path();

  DatasetIndex index;
  std::string text;
  std::size_t line = 0;
  while (std::getline(in, text)) {
    ++line;
    if (std::all_of(text.begin(), text.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    json record;
    try {
      record = json::parse(text);
    } catch (const json::parse_error& e) {
      throw SchemaError("manifest line " + std::to_string(line) + ": invalid JSON (" + e.what() + ")");
    }
    if (!record.is_object()) throw SchemaError("manifest line " + std::to_string(line) + ": record is not an object");

    ImageSample sample;
    sample.sample_id = require_string(record, "sample_id", line);
    sample.patient_id = require_string(record, "patient_id", line);
    try {
      sample.modality = parse_modality(require_string(record, "modality", line));
    } catch (const ParseError& e) {
      throw ParseError("manifest line " + std::to_string(line) + ": " + e.what());
    }
    FibrosisStage stage;
    try {
      stage = parse_stage(require_string(record, "stage", line));
    } catch (const ParseError& e) {
      throw ParseError("manifest line " + std::to_string(line) + ": " + e.what());
    }
    std::filesystem::path p = require_string(record, "path", line);
    sample.source_path = p.is_absolute() ? p : base / p;
    sample.roi = parse_roi(record, line);
    if (roi_required(sample.modality) && !sample.roi) {
      throw SchemaError("manifest line " + std::to_string(line) + ": " + std::string(to_string(sample.modality)) +
                        " records require an roi box");
    }
    try {
      index.add(std::move(sample), stage);
    } catch (const UniquenessError& e) {
      throw UniquenessError("manifest line " + std::to_string(line) + ": " + e.what());
    } catch (const SchemaError& e) {
      throw SchemaError("manifest line " + std::to_string(line) + ": " + e.what());
    }
  }
  return index;
}

void write_manifest(const DatasetIndex& index, const std::filesystem::path& path,
                    const std::filesystem::path& relative_to) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write manifest " + path.string());
  for (const auto& patient : index.patients()) {
    for (const auto& [modality, samples] : patient.samples) {
      for (const auto& s : samples) {
        std::string p = s.source_path.string();
        if (!relative_to.empty()) p = s.source_path.lexically_relative(relative_to).generic_string();
        json record = {{"sample_id", s.sample_id},
                       {"patient_id", s.patient_id},
                       {"modality", std::string(to_string(modality))},
                       {"stage", std::string(to_string(patient.stage))},
                       {"path", p},
                       {"roi", s.roi ? json::array({s.roi->x, s.roi->y, s.roi->width, s.roi->height}) : json(nullptr)}};
        out << record.dump() << '\n';
      }
    }
  }
}

PatientSplit stratified_patient_split(const DatasetIndex& index, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) {
    throw ArgumentError("train_fraction must lie in (0, 1), got " + std::to_string(train_fraction));
  }
  std::array<std::vector<std::string>, kNumStages> by_stage;
  for (const auto& p : index.patients()) by_stage[static_cast<std::size_t>(ordinal(p.stage))].push_back(p.patient_id);

  Rng rng(seed);
  PatientSplit split;
  for (auto& ids : by_stage) {
    std::sort(ids.begin(), ids.end());
    shuffle_in_place(ids, rng);
    // The epsilon absorbs representation error such as 10 × 0.7 = 6.9999….
    const auto n_train = static_cast<std::size_t>(std::floor(static_cast<double>(ids.size()) * train_fraction + 1e-9));
    split.train.insert(split.train.end(), ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.test.insert(split.test.end(), ids.begin() + static_cast<std::ptrdiff_t>(n_train), ids.end());
  }
  std::sort(split.train.begin(), split.train.end());
  std::sort(split.test.begin(), split.test.end());
  return split;
}

void check_modalities(const std::vector<ModalityKind>& modalities) {
  if (modalities.empty()) throw ArgumentError("at least one modality is required");
  for (std::size_t i = 0; i < modalities.size(); ++i) {
    for (std::size_t j = i + 1; j < modalities.size(); ++j) {
      if (modalities[i] == modalities[j]) throw ArgumentError("modalities must be distinct");
    }
  }
}

std::vector<MultiModalSample> build_tuples(const DatasetIndex& index, const std::vector<ModalityKind>& modalities,
                                           const std::vector<std::string>& patient_ids) {
  check_modalities(modalities);
  std::vector<MultiModalSample> tuples;
  for (const auto& id : patient_ids) {
    const auto& patient = index.patient(id);
    if (!patient.has_all(modalities)) continue;

    // Odometer over the per-modality image lists; first modality is the
    // slowest-varying digit.
    std::vector<const std::vector<ImageSample>*> lists;
    for (auto m : modalities) lists.push_back(&patient.samples.at(m));
    std::vector<std::size_t> digit(modalities.size(), 0);
    bool more = true;
    while (more) {
      MultiModalSample t{patient.patient_id, {}, patient.stage};
      t.parts.reserve(modalities.size());
      for (std::size_t k = 0; k < modalities.size(); ++k) t.parts.emplace_back(modalities[k], (*lists[k])[digit[k]]);
      tuples.push_back(std::move(t));

      more = false;
      for (std::size_t k = modalities.size(); k-- > 0;) {
        if (++digit[k] < lists[k]->size()) {
          more = true;
          break;
        }
        digit[k] = 0;
      }
    }
  }
  return tuples;
}

std::size_t count_tuples(const DatasetIndex& index, const std::vector<ModalityKind>& modalities,
                         const std::vector<std::string>& patient_ids) {
  check_modalities(modalities);
  std::size_t total = 0;
  for (const auto& id : patient_ids) {
    const auto& patient = index.patient(id);
    std::size_t product = 1;
    for (auto m : modalities) product *= patient.count(m);
    total += product;
  }
  return total;
}

}  // namespace mmfal
