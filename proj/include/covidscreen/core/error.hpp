#pragma once

#include <stdexcept>
#include <string>

namespace covidscreen {

// Base of every error raised by the toolkit. Each subclass corresponds to one
// named failure mode so callers (CLI, HTTP service) can map it to an exit or
// status code without parsing messages.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

#define COVIDSCREEN_DEFINE_ERROR(Name)       \
  class Name : public Error {                \
   public:                                   \
    using Error::Error;                      \
  }

COVIDSCREEN_DEFINE_ERROR(ShapeMismatch);
COVIDSCREEN_DEFINE_ERROR(MissingFile);
COVIDSCREEN_DEFINE_ERROR(ManifestParseError);
COVIDSCREEN_DEFINE_ERROR(DuplicateId);
COVIDSCREEN_DEFINE_ERROR(UnknownLabel);
COVIDSCREEN_DEFINE_ERROR(UndecodableImage);
COVIDSCREEN_DEFINE_ERROR(InvalidArgument);
COVIDSCREEN_DEFINE_ERROR(InsufficientRecords);
COVIDSCREEN_DEFINE_ERROR(CorruptCheckpoint);
COVIDSCREEN_DEFINE_ERROR(VersionMismatch);
COVIDSCREEN_DEFINE_ERROR(MissingAuxCheckpoint);
COVIDSCREEN_DEFINE_ERROR(EmptySplit);
COVIDSCREEN_DEFINE_ERROR(SingleClassInput);
COVIDSCREEN_DEFINE_ERROR(EmptySubgroup);
COVIDSCREEN_DEFINE_ERROR(InvalidClass);
COVIDSCREEN_DEFINE_ERROR(LabelMappingError);
COVIDSCREEN_DEFINE_ERROR(DivergenceDetected);
COVIDSCREEN_DEFINE_ERROR(UnsupportedModality);

#undef COVIDSCREEN_DEFINE_ERROR

}  // namespace covidscreen
