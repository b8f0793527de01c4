#pragma once

#include <stdexcept>
#include <string>

namespace qmm {

// Exit-code contract shared with the CLI:
//   2 usage/config, 3 I/O, 4 data validation, 5 training failure.
class Error : public std::runtime_error {
public:
    Error(const std::string& what, int exit_code)
        : std::runtime_error(what), exit_code_(exit_code) {}
    int exit_code() const noexcept { return exit_code_; }

private:
    int exit_code_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what, 2) {}
};

// Invalid arguments to a library operation (bad sigma, mismatched lengths, ...).
class ParameterError : public Error {
public:
    explicit ParameterError(const std::string& what) : Error(what, 2) {}
};

class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(what, 3) {}
};

// File exists but its content is not what the format promises.
class FormatError : public Error {
public:
    explicit FormatError(const std::string& what) : Error(what, 4) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(what, 4) {}
};

// Point annotation outside its image, duplicate ids, ...
class AnnotationError : public DataError {
public:
    explicit AnnotationError(const std::string& what) : DataError(what) {}
};

class DimensionError : public Error {
public:
    explicit DimensionError(const std::string& what) : Error(what, 4) {}
};

class TrainError : public Error {
public:
    explicit TrainError(const std::string& what) : Error(what, 5) {}
};

} // namespace qmm
