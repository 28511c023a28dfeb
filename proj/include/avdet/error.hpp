#pragma once

#include <stdexcept>
#include <string>

namespace avd {

// Error taxonomy shared by every module. The CLI maps these onto exit codes:
// usage/config problems -> 1, data/format/metric problems -> 2.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct DimensionError : Error { using Error::Error; };  // shape mismatch
struct NumericError   : Error { using Error::Error; };  // NaN/Inf where finite required
struct LabelError     : Error { using Error::Error; };  // class index out of range
struct UsageError     : Error { using Error::Error; };  // API misuse (double backward, ...)
struct FormatError    : Error { using Error::Error; };  // corrupt or mismatched file
struct ConfigError    : Error { using Error::Error; };  // invalid or incompatible config
struct TrainingError  : Error { using Error::Error; };  // optimizer contract violation
struct MetricError    : Error { using Error::Error; };  // metric undefined on this input
struct InputError     : Error { using Error::Error; };  // bad raw input (short waveform, ...)

}  // namespace avd
