// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <stdexcept>
#include <string>

namespace unisd {

enum class ErrorKind {
    config,
    window,
    distribution,
    dimension,
    parameter,
    numeric,
    degenerate_weight,
    corruption,
    pairing,
    io,
};

const char* to_string(ErrorKind kind);

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what)
        : std::runtime_error(std::string(to_string(kind)) + " error: " + what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorKind::config, what) {}
};

class WindowError : public Error {
public:
    explicit WindowError(const std::string& what) : Error(ErrorKind::window, what) {}
};

/// Raised when a loss or gradient becomes non-finite. `step` is -1 outside a training loop.
class NumericError : public Error {
public:
    NumericError(const std::string& what, long step = -1) : Error(ErrorKind::numeric, what), step_(step) {}
    long step() const noexcept { return step_; }

private:
    long step_;
};

}  // namespace unisd
