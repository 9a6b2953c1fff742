#pragma once

#include <stdexcept>
#include <string>

namespace ddon {

/**
 * @brief Base class of every error raised by the library.
 *
 * `code()` is a stable machine-readable identifier (used verbatim by the CLI
 * when it reports failures), `what()` carries the human detail.
 */
class Error : public std::runtime_error {
 public:
  Error(std::string code, const std::string& detail)
      : std::runtime_error(detail), code_(std::move(code)) {}

  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

#define DDON_DEFINE_ERROR(Name)                                  \
  class Name : public Error {                                    \
   public:                                                       \
    explicit Name(const std::string& detail) : Error(#Name, detail) {} \
  };

// geometry
DDON_DEFINE_ERROR(OrderingError)
DDON_DEFINE_ERROR(RangeError)
DDON_DEFINE_ERROR(NonPositiveError)
DDON_DEFINE_ERROR(GeometryError)
DDON_DEFINE_ERROR(PreconditionError)

// grid
DDON_DEFINE_ERROR(OutOfDomainError)

// oracle solver
DDON_DEFINE_ERROR(SingularSystemError)
DDON_DEFINE_ERROR(ConvergenceError)
DDON_DEFINE_ERROR(GridMismatchError)
DDON_DEFINE_ERROR(PortError)

// gp
DDON_DEFINE_ERROR(FactorizationError)

// neural operator
DDON_DEFINE_ERROR(ShapeError)
DDON_DEFINE_ERROR(ZeroNormError)
DDON_DEFINE_ERROR(DivergenceError)
DDON_DEFINE_ERROR(FormatError)
DDON_DEFINE_ERROR(VersionError)

// ddm engine
DDON_DEFINE_ERROR(NotOverlappingError)
DDON_DEFINE_ERROR(OverlapError)
DDON_DEFINE_ERROR(SolverError)
DDON_DEFINE_ERROR(DerivativeUnavailableError)

// pipelines
DDON_DEFINE_ERROR(AlignmentError)
DDON_DEFINE_ERROR(DomainError)
DDON_DEFINE_ERROR(ZeroFluxError)
DDON_DEFINE_ERROR(ZeroTrueValueError)

// cli
DDON_DEFINE_ERROR(ConfigError)
DDON_DEFINE_ERROR(CheckpointNotFoundError)
DDON_DEFINE_ERROR(IoError)

#undef DDON_DEFINE_ERROR

}  // namespace ddon
