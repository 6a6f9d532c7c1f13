#pragma once

#include <stdexcept>
#include <string>

namespace slmeval {

/// Base class for all harness errors.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Invalid or incomplete configuration (bad config file, missing
/// placeholder, unusable CLI arguments). CLI exit code 2.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Non-retryable protocol failure from a backend (malformed body,
/// 4xx response, unusable payload). CLI exit code 4.
class BackendError : public Error {
public:
    using Error::Error;
};

/// Retryable backend failure (connection refused, 5xx). The retry
/// wrapper consumes these; callers see them only after retries are
/// exhausted.
class TransientError : public BackendError {
public:
    using BackendError::BackendError;
};

/// Request exceeded the configured timeout.
class TimeoutError : public BackendError {
public:
    using BackendError::BackendError;
};

/// The backend does not support the requested capability
/// (e.g. teacher-forced logprob scoring). Never retried.
class CapabilityError : public Error {
public:
    using Error::Error;
};

/// An external pipeline stage command exited nonzero. Carries the
/// path of the captured log. CLI exit code 3.
class StageFailedError : public Error {
public:
    StageFailedError(const std::string& what, std::string log_path)
        : Error(what), log_path_(std::move(log_path)) {}
    const std::string& log_path() const { return log_path_; }

private:
    std::string log_path_;
};

}  // namespace slmeval
