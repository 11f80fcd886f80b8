#pragma once

#include <stdexcept>
#include <string>

namespace fedbe {

// Bad configuration: invalid model spec, malformed config file, unknown method.
// The CLI maps this to exit code 1.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Bad data fed to an otherwise well-configured operation (token out of range,
// label out of range, empty dataset, degenerate step size).
class InputError : public std::runtime_error {
public:
    explicit InputError(const std::string& msg) : std::runtime_error(msg) {}
};

// Failure at run time: unwritable output directory, pretraining budget
// exhausted. The CLI maps this to exit code 2.
class RunError : public std::runtime_error {
public:
    explicit RunError(const std::string& msg) : std::runtime_error(msg) {}
};

} // namespace fedbe
