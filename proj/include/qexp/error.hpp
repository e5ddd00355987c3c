#pragma once

#include <stdexcept>
#include <string>

namespace qexp {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// File could not be read or written.
class IoError : public Error {
public:
    using Error::Error;
};

// Input parsed but violated its format or a data invariant.
class FormatError : public Error {
public:
    using Error::Error;
};

class InvalidArgument : public Error {
public:
    using Error::Error;
};

// Optimization diverged (non-finite loss).
class TrainingError : public Error {
public:
    using Error::Error;
};

} // namespace qexp
