#pragma once

#include <stdexcept>
#include <string>

namespace shapecomp {

// Base of every error the library reports. Callers that only care about
// "something went wrong in shapecomp" catch this.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define SHAPECOMP_DEFINE_ERROR(Name)                 \
    class Name : public Error {                      \
    public:                                          \
        explicit Name(const std::string& what)       \
            : Error(std::string(#Name ": ") + what) {} \
    }

SHAPECOMP_DEFINE_ERROR(InvalidArgument);
SHAPECOMP_DEFINE_ERROR(SpecMismatch);
SHAPECOMP_DEFINE_ERROR(FormatError);
SHAPECOMP_DEFINE_ERROR(SamplingExhausted);
SHAPECOMP_DEFINE_ERROR(ParseError);
SHAPECOMP_DEFINE_ERROR(UnsupportedFormat);
SHAPECOMP_DEFINE_ERROR(NonWatertight);
SHAPECOMP_DEFINE_ERROR(DoesNotFit);
SHAPECOMP_DEFINE_ERROR(DegenerateShape);
SHAPECOMP_DEFINE_ERROR(EmptyTarget);
SHAPECOMP_DEFINE_ERROR(NonPositiveSigma);
SHAPECOMP_DEFINE_ERROR(EmptyGrid);
SHAPECOMP_DEFINE_ERROR(EmptySurface);
SHAPECOMP_DEFINE_ERROR(ConfigMismatch);
SHAPECOMP_DEFINE_ERROR(ModeArgumentMismatch);
SHAPECOMP_DEFINE_ERROR(NonFiniteLoss);

#undef SHAPECOMP_DEFINE_ERROR

}  // namespace shapecomp
