#pragma once

#include <stdexcept>
#include <string>

namespace psup {

/// Base class of every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define PSUP_DEFINE_ERROR(Name)          \
  class Name : public Error {            \
   public:                               \
    using Error::Error;                  \
  };

PSUP_DEFINE_ERROR(FormatError)
PSUP_DEFINE_ERROR(SampleRateError)
PSUP_DEFINE_ERROR(ChannelCountError)
PSUP_DEFINE_ERROR(LengthError)
PSUP_DEFINE_ERROR(ShapeError)
PSUP_DEFINE_ERROR(ConfigError)
PSUP_DEFINE_ERROR(TokenRangeError)
PSUP_DEFINE_ERROR(DataError)
PSUP_DEFINE_ERROR(MaskError)
PSUP_DEFINE_ERROR(ModelError)

#undef PSUP_DEFINE_ERROR

}  // namespace psup
