#pragma once

#include <stdexcept>
#include <string>

namespace msense {

// Every failure raised by the library derives from Error so callers can
// catch the whole family; the concrete type names the failure class.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define MSENSE_DEFINE_ERROR(Name)                 \
    class Name : public Error {                   \
    public:                                       \
        using Error::Error;                       \
    }

MSENSE_DEFINE_ERROR(DimensionError);
MSENSE_DEFINE_ERROR(SequenceTooShortError);
MSENSE_DEFINE_ERROR(ParameterError);
MSENSE_DEFINE_ERROR(LabelError);
MSENSE_DEFINE_ERROR(TapeError);
MSENSE_DEFINE_ERROR(OptimizerError);
MSENSE_DEFINE_ERROR(DataError);
MSENSE_DEFINE_ERROR(ConsistencyError);
MSENSE_DEFINE_ERROR(AlignmentError);
MSENSE_DEFINE_ERROR(RangeError);
MSENSE_DEFINE_ERROR(NoInformationError);
MSENSE_DEFINE_ERROR(DegenerateReferenceError);
MSENSE_DEFINE_ERROR(TrainingDivergedError);
MSENSE_DEFINE_ERROR(ConfigError);
MSENSE_DEFINE_ERROR(RunFailedError);

#undef MSENSE_DEFINE_ERROR

}  // namespace msense
