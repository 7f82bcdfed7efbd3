#pragma once

#include <stdexcept>
#include <string>

namespace fixnoise {

/// Base of every error the library throws. `exit_code()` follows the CLI
/// contract: 2 usage, 3 numeric failure, 4 I/O or format.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 2; }
};

class DimensionError : public Error {
public:
    using Error::Error;
};

class ContractError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class UsageError : public Error {
public:
    using Error::Error;
};

class DegenerateInputError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 3; }
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what, std::string snapshot = {})
        : Error(what), snapshot_path_(std::move(snapshot)) {}
    int exit_code() const noexcept override { return 3; }
    const std::string& snapshot_path() const noexcept { return snapshot_path_; }

private:
    std::string snapshot_path_;
};

class IoError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

class FormatError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

class CorruptionError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

}  // namespace fixnoise
