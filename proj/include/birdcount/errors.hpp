#pragma once

#include <stdexcept>
#include <string>

namespace birdcount {

/// Process exit codes used by the command-line front end.
enum class ExitCode : int {
    ok = 0,
    usage = 1,
    data = 2,
    backend = 3,
    invariant = 4,
};

/// Base of every error raised by the library. Carries the exit code the CLI
/// reports when the error escapes to the top level.
class Error : public std::runtime_error {
public:
    Error(ExitCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
    ExitCode code() const noexcept { return code_; }

private:
    ExitCode code_;
};

class UsageError : public Error {
public:
    explicit UsageError(const std::string& what) : Error(ExitCode::usage, what) {}
};

/// Malformed input files, schema violations, checksum mismatches.
class DataError : public Error {
public:
    explicit DataError(const std::string& what) : Error(ExitCode::data, what) {}
};

class BackendError : public Error {
public:
    explicit BackendError(const std::string& what) : Error(ExitCode::backend, what) {}
};

/// The backend did not answer within its timeout. Callers may retry.
class BackendTimeout : public BackendError {
public:
    explicit BackendTimeout(const std::string& what) : BackendError(what) {}
};

/// The backend answered with something that does not satisfy the wire contract.
class ProtocolError : public BackendError {
public:
    explicit ProtocolError(const std::string& what) : BackendError(what) {}
};

class InvariantError : public Error {
public:
    explicit InvariantError(const std::string& what) : Error(ExitCode::invariant, what) {}
};

}  // namespace birdcount
