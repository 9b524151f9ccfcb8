#include "semibmd/errors.hpp"

namespace semibmd {

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::InvalidArgument: return "InvalidArgument";
        case ErrorKind::DegenerateKnots: return "DegenerateKnots";
        case ErrorKind::OutOfSupport: return "OutOfSupport";
        case ErrorKind::NoDerivative: return "NoDerivative";
        case ErrorKind::UnsupportedOrder: return "UnsupportedOrder";
        case ErrorKind::InnerOptFailed: return "InnerOptFailed";
        case ErrorKind::FitFailed: return "FitFailed";
        case ErrorKind::BmdNotEstimable: return "BmdNotEstimable";
        case ErrorKind::BmdlNotEstimable: return "BmdlNotEstimable";
        case ErrorKind::DegenerateSlope: return "DegenerateSlope";
        case ErrorKind::NoTrueBmd: return "NoTrueBmd";
        case ErrorKind::DataError: return "DataError";
        case ErrorKind::ConfigError: return "ConfigError";
    }
    return "Unknown";
}

}  // namespace semibmd
