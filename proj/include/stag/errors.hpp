#pragma once

#include <stdexcept>
#include <string>

namespace stag {

/// Base of every error raised by the library. `kind()` names the failure
/// class so the CLI can map it to an exit code and a message.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what)
      : std::runtime_error(kind + ": " + what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

#define STAG_DEFINE_ERROR(Name)                                            \
  class Name : public Error {                                              \
   public:                                                                 \
    explicit Name(const std::string& what) : Error(#Name, what) {}         \
  };

STAG_DEFINE_ERROR(InvalidLength)
STAG_DEFINE_ERROR(EmptyInput)
STAG_DEFINE_ERROR(InvalidReduction)
STAG_DEFINE_ERROR(InvalidInterval)
STAG_DEFINE_ERROR(VideoTooShort)
STAG_DEFINE_ERROR(InvalidConfig)
STAG_DEFINE_ERROR(ModelFormatError)
STAG_DEFINE_ERROR(FeatureFormatError)
STAG_DEFINE_ERROR(ManifestError)
STAG_DEFINE_ERROR(InvalidSpec)
STAG_DEFINE_ERROR(NumericalError)
STAG_DEFINE_ERROR(DegenerateLabels)
STAG_DEFINE_ERROR(IncompleteEvaluation)

#undef STAG_DEFINE_ERROR

}  // namespace stag
