#ifndef TRISR_ERRORS_HPP
#define TRISR_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace trisr {

// Base for all recoverable engine errors. CLI maps subclasses to exit codes.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Data / format errors (CLI exit code 2).
struct FormatError : Error      { using Error::Error; };
struct UnsupportedDtype : Error { using Error::Error; };
struct TruncatedFile : Error    { using Error::Error; };
struct IoError : Error          { using Error::Error; };
struct DegenerateRange : Error  { using Error::Error; };
struct OddDimension : Error     { using Error::Error; };
struct GridMismatch : Error     { using Error::Error; };
struct EmptyDataset : Error     { using Error::Error; };

// Shape / contract violations.
struct ShapeError : Error       { using Error::Error; };
struct MissingGradient : Error  { using Error::Error; };

// Numeric failure during training (CLI exit code 3).
struct NonFiniteLoss : Error    { using Error::Error; };

} // namespace trisr

#endif
