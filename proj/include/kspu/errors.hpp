#pragma once

#include <stdexcept>
#include <string>

namespace kspu {

// Error hierarchy shared by all modules. Everything derives from KspuError
// so callers can catch the library as a whole or a specific condition.
struct KspuError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Landmark configuration collapses to a point (zero norm after centering).
struct DegenerateConfiguration : KspuError {
    using KspuError::KspuError;
};

// Vector/matrix dimensions do not match the operation's contract.
struct DimensionMismatch : KspuError {
    using KspuError::KspuError;
};

// Scalar parameter outside its admissible range (e.g. vMF concentration).
struct OutOfRange : KspuError {
    using KspuError::KspuError;
};

// Rejection sampler exceeded its iteration cap.
struct SamplerStall : KspuError {
    using KspuError::KspuError;
};

// Tensor shapes incompatible for the requested op.
struct ShapeMismatch : KspuError {
    using KspuError::KspuError;
};

// Optimizer step requested for a parameter that has no gradient buffer.
struct MissingGradient : KspuError {
    using KspuError::KspuError;
};

// Invalid user-supplied configuration value.
struct InvalidConfig : KspuError {
    using KspuError::KspuError;
};

// File read/write/parse failure; message carries the file path.
struct IoError : KspuError {
    using KspuError::KspuError;
};

// Checkpoint magic/version/dtype incompatible with the running code.
struct CheckpointMismatch : KspuError {
    using KspuError::KspuError;
};

}  // namespace kspu
