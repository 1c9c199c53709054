#pragma once

#include <stdexcept>
#include <string>

namespace mlrecall {

// Every failure raised by the toolkit derives from Error so callers can catch
// the whole family; the concrete type names the contract that was violated.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

#define MLRECALL_DEFINE_ERROR(Name)            \
  class Name : public Error {                  \
  public:                                      \
    using Error::Error;                        \
  }

MLRECALL_DEFINE_ERROR(LoadError);
MLRECALL_DEFINE_ERROR(CapabilityError);
MLRECALL_DEFINE_ERROR(DimensionError);
MLRECALL_DEFINE_ERROR(ShapeError);
MLRECALL_DEFINE_ERROR(PreconditionError);
MLRECALL_DEFINE_ERROR(ContextLengthError);
MLRECALL_DEFINE_ERROR(MissingCaptureError);
MLRECALL_DEFINE_ERROR(IndexError);
MLRECALL_DEFINE_ERROR(ValidationError);
MLRECALL_DEFINE_ERROR(KeyError);
MLRECALL_DEFINE_ERROR(DomainError);
MLRECALL_DEFINE_ERROR(SpecError);
MLRECALL_DEFINE_ERROR(InsufficientDataError);
MLRECALL_DEFINE_ERROR(DegenerateGapError);
MLRECALL_DEFINE_ERROR(NoCounterpartError);
MLRECALL_DEFINE_ERROR(PositionResolutionError);
MLRECALL_DEFINE_ERROR(ComparabilityError);
MLRECALL_DEFINE_ERROR(FingerprintMismatchError);
MLRECALL_DEFINE_ERROR(JudgeUnavailableError);
MLRECALL_DEFINE_ERROR(PairingError);
MLRECALL_DEFINE_ERROR(FormatError);

#undef MLRECALL_DEFINE_ERROR

} // namespace mlrecall
