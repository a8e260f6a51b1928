// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace w4a4 {

/// Base class for all library errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Dimension mismatch between operands.
class ShapeError : public Error {
public:
    using Error::Error;
};

/// Scalar argument outside its admissible domain (alpha <= 0, bad config, ...).
class DomainError : public Error {
public:
    using Error::Error;
};

/// Requested rank outside [0, min(rows, cols)].
class RankError : public Error {
public:
    using Error::Error;
};

/// Timestep outside the binning range.
class RangeError : public Error {
public:
    using Error::Error;
};

/// Matrix expected to be symmetric positive definite is not.
class DefinitenessError : public Error {
public:
    using Error::Error;
};

/// Iterative algorithm hit its sweep cap before converging.
class ConvergenceError : public Error {
public:
    using Error::Error;
};

/// A (layer, expert, bin) triple required by calibration has no records.
class CoverageError : public Error {
public:
    using Error::Error;
};

/// Calibration data missing or insufficient for quantization.
class CalibrationError : public Error {
public:
    using Error::Error;
};

/// Clipping policy queried with a key it does not hold.
class PolicyError : public Error {
public:
    using Error::Error;
};

/// Serialized artifact has an unknown or incompatible format version.
class FormatError : public Error {
public:
    using Error::Error;
};

/// Serialized artifact is truncated or fails its checksum.
class IntegrityError : public Error {
public:
    using Error::Error;
};

} // namespace w4a4
