#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace driftar {

// Each category maps to a distinct CLI exit code.
enum class ErrorKind : int {
    dimension   = 10,
    numeric     = 11,
    domain      = 12,
    config      = 13,
    format      = 14,
    state       = 15,
    capacity    = 16,
    measurement = 17,
    io          = 18,
};

inline std::string_view error_kind_name(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::dimension: return "dimension";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::domain: return "domain";
        case ErrorKind::config: return "config";
        case ErrorKind::format: return "format";
        case ErrorKind::state: return "state";
        case ErrorKind::capacity: return "capacity";
        case ErrorKind::measurement: return "measurement";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(std::string(error_kind_name(kind)) + " error: " + message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

#define DRIFTAR_DEFINE_ERROR(Name, Kind)                                   \
    class Name : public Error {                                            \
    public:                                                                \
        explicit Name(const std::string& message) : Error(Kind, message) {} \
    };

DRIFTAR_DEFINE_ERROR(DimensionError, ErrorKind::dimension)
DRIFTAR_DEFINE_ERROR(NumericError, ErrorKind::numeric)
DRIFTAR_DEFINE_ERROR(DomainError, ErrorKind::domain)
DRIFTAR_DEFINE_ERROR(ConfigError, ErrorKind::config)
DRIFTAR_DEFINE_ERROR(FormatError, ErrorKind::format)
DRIFTAR_DEFINE_ERROR(StateError, ErrorKind::state)
DRIFTAR_DEFINE_ERROR(CapacityError, ErrorKind::capacity)
DRIFTAR_DEFINE_ERROR(MeasurementError, ErrorKind::measurement)
DRIFTAR_DEFINE_ERROR(IoError, ErrorKind::io)

#undef DRIFTAR_DEFINE_ERROR

}  // namespace driftar
