#include "cona/error.hpp"

namespace cona {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::ZeroRow: return "ZeroRow";
    case ErrorKind::BadTemperature: return "BadTemperature";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::NotNormalized: return "NotNormalized";
    case ErrorKind::MeaninglessCombination: return "MeaninglessCombination";
    case ErrorKind::UnknownRecipe: return "UnknownRecipe";
    case ErrorKind::BadParts: return "BadParts";
    case ErrorKind::IncompatibleShapes: return "IncompatibleShapes";
    case ErrorKind::StepOutOfRange: return "StepOutOfRange";
    case ErrorKind::DuplicateId: return "DuplicateId";
    case ErrorKind::EmptyIndex: return "EmptyIndex";
    case ErrorKind::UnknownGroundTruthId: return "UnknownGroundTruthId";
    case ErrorKind::BadConfig: return "BadConfig";
    case ErrorKind::BadFlag: return "BadFlag";
    case ErrorKind::IoError: return "IoError";
    case ErrorKind::FormatError: return "FormatError";
  }
  return "Unknown";
}

}  // namespace cona
