#pragma once

#include <stdexcept>
#include <string>

namespace facediff {

// Every error raised by the library derives from Error. The kind string is
// stable and machine-parsable; the CLI maps it to an exit code.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}

  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define FACEDIFF_DEFINE_ERROR(Name, kind_str)                                 \
  class Name : public Error {                                                 \
   public:                                                                    \
    explicit Name(const std::string& message) : Error(kind_str, message) {}   \
  };

FACEDIFF_DEFINE_ERROR(ConfigError, "config")
FACEDIFF_DEFINE_ERROR(DimensionError, "dimension")
FACEDIFF_DEFINE_ERROR(StepRangeError, "step_range")
FACEDIFF_DEFINE_ERROR(SingularityError, "singularity")
FACEDIFF_DEFINE_ERROR(ContractError, "contract")
FACEDIFF_DEFINE_ERROR(NormalizationError, "normalization")
FACEDIFF_DEFINE_ERROR(LookupError, "lookup")
FACEDIFF_DEFINE_ERROR(EnrollmentError, "enrollment")
FACEDIFF_DEFINE_ERROR(DataError, "data")
FACEDIFF_DEFINE_ERROR(ParseError, "parse")
FACEDIFF_DEFINE_ERROR(InputError, "input")
FACEDIFF_DEFINE_ERROR(SplitError, "split")
FACEDIFF_DEFINE_ERROR(NumericFault, "numeric")
FACEDIFF_DEFINE_ERROR(IoError, "io")

#undef FACEDIFF_DEFINE_ERROR

}  // namespace facediff
