#pragma once

#include <stdexcept>
#include <string>

namespace polarsynth {

// Invalid physical/mathematical input (bad wavelength, out-of-range widths, ...).
class DomainError : public std::runtime_error {
public:
    explicit DomainError(const std::string& msg) : std::runtime_error(msg) {}
};

// A configuration that cannot be honored (sampling violation, region too large,
// schema violation, ...). CLI maps this to exit code 2.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Missing or corrupt artifact on disk. CLI maps this to exit code 3.
class IoError : public std::runtime_error {
public:
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Runtime numerical failure (NaN loss, divergence). CLI maps this to exit code 4.
class NumericalError : public std::runtime_error {
public:
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace polarsynth
