#pragma once

#include <stdexcept>
#include <string>

namespace srcflow {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Raised when a forward pass produces a non-finite value.
class NumericalError : public Error {
public:
    using Error::Error;
};

enum class FormatErrc {
    bad_magic,
    version_unsupported,
    checksum_mismatch,
    truncated_file,
    malformed,
    io_failure,
};

const char* to_string(FormatErrc code) noexcept;

/// File-format and filesystem failures; `code()` distinguishes the cases.
class FormatError : public Error {
public:
    FormatError(FormatErrc code, const std::string& detail)
        : Error(std::string(to_string(code)) + (detail.empty() ? "" : ": " + detail)), code_(code) {}

    FormatErrc code() const noexcept { return code_; }

private:
    FormatErrc code_;
};

}  // namespace srcflow
