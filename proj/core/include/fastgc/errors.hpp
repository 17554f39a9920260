#pragma once

#include <stdexcept>
#include <string>

namespace fastgc {

/// Base class for all errors thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Tensor extents do not conform (messages name the offending shapes).
struct ShapeError : Error {
    using Error::Error;
};

/// An API precondition was violated (empty batch, unknown node id, ...).
struct ContractError : Error {
    using Error::Error;
};

/// A numeric parameter is outside its mathematical domain.
struct DomainError : Error {
    using Error::Error;
};

/// A binary input file is malformed; `offset` is the byte position of the defect.
struct FormatError : Error {
    FormatError(const std::string& msg, std::size_t offset)
        : Error(msg + " (at byte offset " + std::to_string(offset) + ")"), offset(offset) {}
    std::size_t offset;
};

/// A model contains a layer the requested operation cannot handle.
struct CapabilityError : Error {
    using Error::Error;
};

/// Noise calibration could not meet the privacy target within the search bounds.
struct CalibrationError : Error {
    using Error::Error;
};

}  // namespace fastgc
