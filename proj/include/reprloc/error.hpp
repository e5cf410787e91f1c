#pragma once

#include <stdexcept>
#include <string>

namespace reprloc {

// Base of everything the library throws on bad input or bad data.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Malformed files, violated invariants, missing ground truth: the caller's
// data is wrong. The CLI maps these to exit code 2.
class DataError : public Error {
public:
    using Error::Error;
};

class FormatError : public DataError {
public:
    using DataError::DataError;
};

class InvariantError : public DataError {
public:
    using DataError::DataError;
};

class DimensionError : public DataError {
public:
    using DataError::DataError;
};

class DegenerateDatasetError : public DataError {
public:
    using DataError::DataError;
};

class IoError : public DataError {
public:
    using DataError::DataError;
};

// Bad flags or arguments. The CLI maps these to exit code 1.
class UsageError : public Error {
public:
    using Error::Error;
};

}  // namespace reprloc
