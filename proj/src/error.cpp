#include "ecdlm/error.h"

namespace ecdlm {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kInvalidConfig: return "invalid-config";
    case ErrorKind::kInvalidInput: return "invalid-input";
    case ErrorKind::kNotApplicable: return "not-applicable";
    case ErrorKind::kInconsistentAssignment: return "inconsistent-assignment";
    case ErrorKind::kUndefinedLoss: return "undefined-loss";
    case ErrorKind::kTrainingDiverged: return "training-diverged";
    case ErrorKind::kGradientCheckFailed: return "gradient-check-failed";
    case ErrorKind::kParseError: return "parse-error";
  }
  return "unknown";
}

}  // namespace ecdlm
