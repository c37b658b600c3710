#pragma once

#include <stdexcept>
#include <string>

namespace shapelab {

// Invalid configuration: bad env geometry, impossible placement, malformed
// experiment files.
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// A caller broke an interface precondition (wrong action length, stepping a
// finished episode, missing control branch).
class ContractViolation : public std::logic_error {
public:
    explicit ContractViolation(const std::string& what) : std::logic_error(what) {}
};

// Persistent artifact failed its integrity check (corrupt or truncated
// checkpoint, fingerprint mismatch).
class IntegrityError : public std::runtime_error {
public:
    explicit IntegrityError(const std::string& what) : std::runtime_error(what) {}
};

// Provider unreachable, timed out, or replayed transcript diverged.
class TransportError : public std::runtime_error {
public:
    explicit TransportError(const std::string& what) : std::runtime_error(what) {}
};

// The critic failed to produce a parseable diagnosis within the re-prompt
// budget. Callers fall back to the heuristic rules.
class DiagnosisError : public std::runtime_error {
public:
    explicit DiagnosisError(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace shapelab
