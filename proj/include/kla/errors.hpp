#pragma once

#include <stdexcept>
#include <string>

namespace kla {

// Base class for every library error. Catching kla::error is enough to
// distinguish our failures from anything thrown by the standard library.
struct error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Dimension mismatch between operands (e.g. matmul 2x3 * 4x5).
struct shape_error : error {
  using error::error;
};

// Scalar argument outside its documented range (gates outside [0,1], negative
// epsilon, nonpositive step counts, ...).
struct range_error : error {
  using error::error;
};

// A matrix that must carry structure (unit lower-triangular solve input)
// does not have it.
struct structural_error : error {
  using error::error;
};

// A quantity that must be invertible / nonzero is numerically zero.
struct singular_error : error {
  using error::error;
};

// Invalid combination of options, or a malformed config / file.
struct config_error : error {
  using error::error;
};

// NaN or Inf encountered where values are required to be finite.
struct numeric_error : error {
  using error::error;
};

}  // namespace kla
