#include "artaug/error.hpp"

namespace artaug {

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::kOk: return "ok";
    case ErrorCode::kUsage: return "usage";
    case ErrorCode::kShape: return "shape";
    case ErrorCode::kContract: return "contract";
    case ErrorCode::kNumerical: return "numerical";
    case ErrorCode::kFormat: return "format";
    case ErrorCode::kIo: return "io";
    case ErrorCode::kTransition: return "transition";
    case ErrorCode::kDegenerateRegion: return "degenerate_region";
    case ErrorCode::kCriticUnavailable: return "critic_unavailable";
    case ErrorCode::kParse: return "parse";
    case ErrorCode::kIterationStarved: return "iteration_starved";
    case ErrorCode::kIntegrity: return "integrity";
    case ErrorCode::kFatal: return "fatal";
    case ErrorCode::kLocked: return "locked";
    case ErrorCode::kInternal: return "internal";
  }
  return "unknown";
}

}  // namespace artaug
