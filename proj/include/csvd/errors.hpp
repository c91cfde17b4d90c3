#pragma once

#include <stdexcept>
#include <string>

namespace csvd {

// Numeric values double as CLI exit codes.
enum class ErrorKind : int {
    usage = 2,
    data = 3,
    numeric = 4,
    corrupt = 5,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorKind::numeric, what) {}
};

class CorruptFileError : public Error {
public:
    explicit CorruptFileError(const std::string& what) : Error(ErrorKind::corrupt, what) {}
};

} // namespace csvd
