// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

namespace avlink {

using Real = double;
using Matrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<Real, 1, Eigen::Dynamic>;
using Index = Eigen::Index;

enum class Modality { audio, video };

inline const char* to_string(Modality m) { return m == Modality::audio ? "audio" : "video"; }
Modality modality_from_string(const std::string& s);

// Every error carries the module it originated from so the CLI can report provenance.
class Error : public std::runtime_error {
public:
    Error(std::string module, const std::string& message)
        : std::runtime_error("[" + module + "] " + message), module_(std::move(module)) {}
    const std::string& module() const { return module_; }

private:
    std::string module_;
};

// Precondition or shape contract broken by the caller.
class ContractError : public Error {
public:
    using Error::Error;
};

// NaN/Inf detected in a forward pass, sampler state or gradient.
class NumericError : public Error {
public:
    using Error::Error;
};

// Malformed, truncated or mismatched file.
class FormatError : public Error {
public:
    using Error::Error;
};

// Invalid or inconsistent configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

inline void require(bool cond, const char* module, const std::string& message) {
    if (!cond) throw ContractError(module, message);
}

std::string shape_str(const Matrix& m);

// Runs fn(i) for i in [0, n) on up to `threads` workers; exceptions are rethrown in index order.
void parallel_for(int n, int threads, const std::function<void(int)>& fn);

}  // namespace avlink
