#pragma once

#include <stdexcept>
#include <string>

namespace otrank {

/// Bad input data or arguments. The CLI maps this to exit status 1.
class ValidationError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Corrupt or truncated files, I/O failures.
class FormatError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values or other numerical breakdowns during scoring/training.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace otrank
