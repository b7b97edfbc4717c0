#pragma once

#include <stdexcept>
#include <string>

namespace dsmooth {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define DSMOOTH_DEFINE_ERROR(Name)          \
  class Name : public Error {               \
   public:                                  \
    using Error::Error;                     \
  };

DSMOOTH_DEFINE_ERROR(DomainError)      // argument outside a function's mathematical domain
DSMOOTH_DEFINE_ERROR(ArgumentError)    // invalid caller-supplied argument
DSMOOTH_DEFINE_ERROR(ShapeError)       // tensor extents do not line up
DSMOOTH_DEFINE_ERROR(StateError)       // operation called in the wrong order
DSMOOTH_DEFINE_ERROR(IOError)
DSMOOTH_DEFINE_ERROR(FormatError)      // malformed file or payload
DSMOOTH_DEFINE_ERROR(RangeError)       // pixel outside [0,1]
DSMOOTH_DEFINE_ERROR(RemoteError)      // transport or protocol failure talking to an endpoint
DSMOOTH_DEFINE_ERROR(MappingError)     // remote label absent from the label map
DSMOOTH_DEFINE_ERROR(ConfigError)
DSMOOTH_DEFINE_ERROR(DataError)
DSMOOTH_DEFINE_ERROR(CheckpointError)
DSMOOTH_DEFINE_ERROR(BindError)

#undef DSMOOTH_DEFINE_ERROR

}  // namespace dsmooth
