#pragma once

#include <stdexcept>
#include <string>

namespace sliceprof {

/// Base class for all errors raised by this library.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Tensor/patch/volume extents do not line up.
struct shape_error : error {
  using error::error;
};

/// An argument violates a precondition (bad phase, bad slope, ...).
struct value_error : error {
  using error::error;
};

/// File is not in a supported format (bad magic, unsupported variant).
struct format_error : error {
  using error::error;
};

/// File is in a recognized format but its contents are damaged.
struct data_error : error {
  using error::error;
};

/// A configuration value is unusable (support too small, K too short).
struct config_error : error {
  using error::error;
};

/// A quantity cannot be measured from the given data.
struct measurement_error : error {
  using error::error;
};

/// Underlying I/O failed.
struct io_error : error {
  using error::error;
};

/// Training produced a non-finite loss and was aborted.
struct numeric_error : error {
  using error::error;
};

}  // namespace sliceprof
