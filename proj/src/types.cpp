#include "mmfal/types.hpp"

namespace mmfal {

std::string_view to_string(ModalityKind m) {
  switch (m) {
    case ModalityKind::LSTE: return "LSTE";
    case ModalityKind::SSTE: return "SSTE";
    case ModalityKind::LSTQ: return "LSTQ";
    case ModalityKind::LUS: return "LUS";
  }
  return "?";
}

ModalityKind parse_modality(std::string_view token) {
  for (auto m : kAllModalities) {
    if (to_string(m) == token) return m;
  }
  throw ParseError("unknown modality token '" + std::string(token) + "'");
}

FibrosisStage stage_from_ordinal(int index) {
  if (index < 0 || index >= static_cast<int>(kNumStages)) {
    throw ArgumentError("stage ordinal out of range: " + std::to_string(index));
  }
  return static_cast<FibrosisStage>(index);
}

std::string_view to_string(FibrosisStage s) {
  static constexpr std::array<std::string_view, kNumStages> names = {"F0", "F1", "F2", "F3", "F4"};
  return names[static_cast<std::size_t>(ordinal(s))];
}

FibrosisStage parse_stage(std::string_view token) {
  if (token.size() == 2 && token[0] == 'F' && token[1] >= '0' && token[1] <= '4') {
    return static_cast<FibrosisStage>(token[1] - '0');
  }
  throw ParseError("unknown fibrosis stage '" + std::string(token) + "'");
}

}  // namespace mmfal
