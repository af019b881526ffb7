#pragma once

#include <stdexcept>
#include <string>

namespace qdrift {

// Process exit codes used by the command-line harness.
enum class ExitCode : int {
    Success = 0,
    ConfigError = 2,
    IoError = 3,
    NumericalError = 4,
};

// Invalid or inconsistent experiment configuration.
class ConfigError : public std::invalid_argument {
public:
    explicit ConfigError(const std::string& what) : std::invalid_argument(what) {}
};

// File could not be read, written or parsed.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& what) : std::runtime_error(what) {}
};

// A computation produced or received non-finite values, or hit a
// degenerate configuration (zero step in log-SNR, etc.).
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace qdrift
