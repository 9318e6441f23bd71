#pragma once

#include <stdexcept>
#include <string>

namespace psid {

/// Coarse error taxonomy. The kind maps onto the C API status codes and
/// the CLI exit codes, so every throw site picks the category deliberately.
enum class ErrorKind {
    Config,     ///< bad input data, schema violation, unknown path/name
    Numeric,    ///< non-convergence, singular matrix, non-finite state
    Study,      ///< study-level failure (too many failed trials, no feasible channel)
    Io,         ///< file system problems
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what_arg)
        : std::runtime_error(what_arg), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

inline Error config_error(const std::string& msg) { return Error(ErrorKind::Config, msg); }
inline Error numeric_error(const std::string& msg) { return Error(ErrorKind::Numeric, msg); }
inline Error study_error(const std::string& msg) { return Error(ErrorKind::Study, msg); }
inline Error io_error(const std::string& msg) { return Error(ErrorKind::Io, msg); }

} // namespace psid
