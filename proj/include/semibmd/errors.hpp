#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace semibmd {

enum class ErrorKind {
    InvalidArgument,
    DegenerateKnots,
    OutOfSupport,
    NoDerivative,
    UnsupportedOrder,
    InnerOptFailed,
    FitFailed,
    BmdNotEstimable,
    BmdlNotEstimable,
    DegenerateSlope,
    NoTrueBmd,
    DataError,
    ConfigError,
};

std::string_view to_string(ErrorKind kind);

// Single exception type for the library; callers dispatch on kind().
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

}  // namespace semibmd
