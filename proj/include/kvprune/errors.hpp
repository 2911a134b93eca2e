#pragma once

#include <stdexcept>
#include <string>

namespace kvprune {

// Every error carries the process exit code the CLI reports for it.
class Error : public std::runtime_error {
public:
    Error(const std::string & what, int exit_code) : std::runtime_error(what), exit_code_(exit_code) {}
    int exit_code() const noexcept { return exit_code_; }

private:
    int exit_code_;
};

class ConfigError : public Error {
public:
    explicit ConfigError(const std::string & what) : Error("config error: " + what, 2) {}
};

// Malformed JSON artifacts, masks that do not fit a checkpoint, missing table roles.
class SchemaError : public Error {
public:
    explicit SchemaError(const std::string & what) : Error("schema error: " + what, 2) {}
};

// Unreadable or unwritable paths. Reported with the config exit code since the path came from config.
class IoError : public Error {
public:
    explicit IoError(const std::string & what) : Error("I/O error: " + what, 2) {}
};

class TrainingError : public Error {
public:
    explicit TrainingError(const std::string & what) : Error("training error: " + what, 3) {}
};

class DataError : public Error {
public:
    explicit DataError(const std::string & what) : Error("data error: " + what, 4) {}
};

class DimensionError : public Error {
public:
    explicit DimensionError(const std::string & what) : Error("dimension error: " + what, 4) {}
};

class IndexError : public Error {
public:
    explicit IndexError(const std::string & what) : Error("index error: " + what, 4) {}
};

class VerificationError : public Error {
public:
    explicit VerificationError(const std::string & what) : Error("verification failed: " + what, 5) {}
};

} // namespace kvprune
