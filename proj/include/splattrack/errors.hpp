#pragma once

#include <stdexcept>
#include <string>

namespace splattrack {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

#define SPLATTRACK_DEFINE_ERROR(Name)                              \
  struct Name : Error {                                            \
    explicit Name(const std::string& msg = #Name) : Error(msg) {}  \
  }

SPLATTRACK_DEFINE_ERROR(DegenerateConfiguration);
SPLATTRACK_DEFINE_ERROR(InsufficientInliers);
SPLATTRACK_DEFINE_ERROR(UnsupportedLevel);
SPLATTRACK_DEFINE_ERROR(MatchingFailed);
SPLATTRACK_DEFINE_ERROR(EmptyObservation);
SPLATTRACK_DEFINE_ERROR(EmptyField);
SPLATTRACK_DEFINE_ERROR(EmptyMask);
SPLATTRACK_DEFINE_ERROR(StaleTape);
SPLATTRACK_DEFINE_ERROR(TooFewSamples);
SPLATTRACK_DEFINE_ERROR(DivergenceDetected);
SPLATTRACK_DEFINE_ERROR(NoValidPoints);
SPLATTRACK_DEFINE_ERROR(InvalidGraph);
SPLATTRACK_DEFINE_ERROR(SingularNormalEquations);
SPLATTRACK_DEFINE_ERROR(NoVisibleFrames);
SPLATTRACK_DEFINE_ERROR(TrackingLost);
SPLATTRACK_DEFINE_ERROR(EmptyTrajectory);
SPLATTRACK_DEFINE_ERROR(EmptyFusion);
SPLATTRACK_DEFINE_ERROR(IoError);

#undef SPLATTRACK_DEFINE_ERROR

}  // namespace splattrack
