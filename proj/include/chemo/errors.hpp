#pragma once

#include <stdexcept>
#include <string>

namespace chemo {

/// Base for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Caller violated a documented precondition (bad sizes, bad config values).
class InvalidArgument : public Error {
public:
    using Error::Error;
};

/// A numerical procedure failed: non-convergence, instability, ill-conditioning.
/// `stage` names the pipeline stage or routine that raised it.
class NumericalFailure : public Error {
public:
    NumericalFailure(std::string stage, const std::string& what)
        : Error(stage + ": " + what), stage_(std::move(stage)) {}

    const std::string& stage() const noexcept { return stage_; }

private:
    std::string stage_;
};

/// Time step exceeds the advective CFL bound.
class CflViolation : public NumericalFailure {
public:
    explicit CflViolation(const std::string& what) : NumericalFailure("cfl", what) {}
};

}  // namespace chemo
