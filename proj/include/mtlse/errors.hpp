#pragma once

#include <stdexcept>
#include <string>

namespace mtlse {

// Error categories map to CLI exit codes: config 2, data 3, numeric 4.
// API misuse (shape mismatch, bad axis, label out of range) throws
// std::invalid_argument directly.

struct config_error : std::runtime_error {
    explicit config_error(const std::string& what) : std::runtime_error(what) {}
};

struct data_error : std::runtime_error {
    explicit data_error(const std::string& what) : std::runtime_error(what) {}
};

struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace mtlse
