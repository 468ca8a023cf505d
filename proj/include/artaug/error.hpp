#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace artaug {

/// Status codes shared by the C++ exceptions and the C API.
enum class ErrorCode : int {
  kOk = 0,
  kUsage = 1,
  kShape = 2,
  kContract = 3,
  kNumerical = 4,
  kFormat = 5,
  kIo = 6,
  kTransition = 7,
  kDegenerateRegion = 8,
  kCriticUnavailable = 9,
  kParse = 10,
  kIterationStarved = 11,
  kIntegrity = 12,
  kFatal = 13,
  kLocked = 14,
  kInternal = 15,
};

const char* error_code_name(ErrorCode code);

class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

#define ARTAUG_DEFINE_ERROR(Name, Code)                                  \
  class Name : public Error {                                            \
   public:                                                               \
    explicit Name(const std::string& what) : Error(Code, what) {}        \
  };

ARTAUG_DEFINE_ERROR(ShapeError, ErrorCode::kShape)
ARTAUG_DEFINE_ERROR(ContractError, ErrorCode::kContract)
ARTAUG_DEFINE_ERROR(NumericalError, ErrorCode::kNumerical)
ARTAUG_DEFINE_ERROR(IoError, ErrorCode::kIo)
ARTAUG_DEFINE_ERROR(TransitionError, ErrorCode::kTransition)
ARTAUG_DEFINE_ERROR(DegenerateRegion, ErrorCode::kDegenerateRegion)
ARTAUG_DEFINE_ERROR(CriticUnavailable, ErrorCode::kCriticUnavailable)
ARTAUG_DEFINE_ERROR(ParseError, ErrorCode::kParse)
ARTAUG_DEFINE_ERROR(IterationStarved, ErrorCode::kIterationStarved)
ARTAUG_DEFINE_ERROR(IntegrityError, ErrorCode::kIntegrity)
ARTAUG_DEFINE_ERROR(FatalError, ErrorCode::kFatal)
ARTAUG_DEFINE_ERROR(LockedError, ErrorCode::kLocked)

#undef ARTAUG_DEFINE_ERROR

/// Malformed file content. `offset` is a byte offset for binary files and a
/// 1-based line number for line-oriented files.
class FormatError : public Error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : Error(ErrorCode::kFormat, what + " (at " + std::to_string(offset) + ")"), offset_(offset) {}
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

}  // namespace artaug
