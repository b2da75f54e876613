#pragma once

#include <stdexcept>
#include <string>

namespace hrtse {

// Error taxonomy. Everything user-facing funnels through these so the CLI
// can map them onto exit codes (config vs runtime).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad values at API boundaries: non-finite gains, too-short waves, empty refs.
struct ValueError : Error {
    using Error::Error;
};

// Tensor/config shape disagreements (checkpoint vs model, matmul dims, ...).
struct ShapeError : Error {
    using Error::Error;
};

// Invalid or inconsistent configuration.
struct ConfigError : Error {
    using Error::Error;
};

// File and serialization failures.
struct IoError : Error {
    using Error::Error;
};

}  // namespace hrtse
