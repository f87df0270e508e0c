#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>

namespace mmfal {

// ---------------------------------------------------------------------------
// Error types. Everything thrown by the library derives from mmfal::Error so
// callers can catch one type at the boundary (CLI, HTTP handlers).
// ---------------------------------------------------------------------------
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed manifest/config record. The message names the line or field.
class SchemaError : public Error {
 public:
  using Error::Error;
};
class ParseError : public Error {
 public:
  using Error::Error;
};
class UniquenessError : public Error {
 public:
  using Error::Error;
};
class ArgumentError : public Error {
 public:
  using Error::Error;
};
class ConfigError : public Error {
 public:
  using Error::Error;
};
class DecodeError : public Error {
 public:
  using Error::Error;
};
class BoundsError : public Error {
 public:
  using Error::Error;
};
/// Raised by query strategies when the unlabeled pool is empty.
class PoolExhausted : public Error {
 public:
  using Error::Error;
};
/// Metric is undefined for the given input (e.g. AUC with a single class).
class UndefinedMetric : public Error {
 public:
  using Error::Error;
};
/// Live oracle did not answer in time. The pool is left unchanged; retry.
class OracleTimeout : public Error {
 public:
  using Error::Error;
};
class IoError : public Error {
 public:
  using Error::Error;
};

enum class ModalityKind { LSTE, SSTE, LSTQ, LUS };

inline constexpr std::array<ModalityKind, 4> kAllModalities = {
    ModalityKind::LSTE, ModalityKind::SSTE, ModalityKind::LSTQ, ModalityKind::LUS};

std::string_view to_string(ModalityKind m);
/// Throws ParseError for anything but the four exact tokens.
ModalityKind parse_modality(std::string_view token);

enum class FibrosisStage { F0 = 0, F1 = 1, F2 = 2, F3 = 3, F4 = 4 };

inline constexpr std::size_t kNumStages = 5;

constexpr int ordinal(FibrosisStage s) { return static_cast<int>(s); }
FibrosisStage stage_from_ordinal(int index);
std::string_view to_string(FibrosisStage s);
FibrosisStage parse_stage(std::string_view token);

}  // namespace mmfal
