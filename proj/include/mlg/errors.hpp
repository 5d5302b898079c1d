#pragma once

#include <stdexcept>
#include <string>

namespace mlg {

// Base class for everything this library throws on contract violations.
// Subclasses are named after the failure they report so call sites can
// catch specific conditions (the CLI maps them onto exit codes).
struct MlgError : std::runtime_error {
    explicit MlgError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeMismatch : MlgError {
    using MlgError::MlgError;
};
struct InvalidDisparity : MlgError {
    using MlgError::MlgError;
};
struct MaskInconsistency : MlgError {
    using MlgError::MlgError;
};
struct RecordMismatch : MlgError {
    using MlgError::MlgError;
};
struct ImageTooSmall : MlgError {
    using MlgError::MlgError;
};
struct BadTapLayer : MlgError {
    using MlgError::MlgError;
};
struct InconsistentTokenDims : MlgError {
    using MlgError::MlgError;
};
struct ScaleMismatch : MlgError {
    using MlgError::MlgError;
};
struct GroupMismatch : MlgError {
    using MlgError::MlgError;
};
struct EmptyMask : MlgError {
    using MlgError::MlgError;
};
struct NonFinite : MlgError {
    using MlgError::MlgError;
};
struct MissingMask : MlgError {
    using MlgError::MlgError;
};
struct BadHeader : MlgError {
    using MlgError::MlgError;
};
struct TruncatedFile : MlgError {
    using MlgError::MlgError;
};
struct BadBitDepth : MlgError {
    using MlgError::MlgError;
};
struct CropTooLarge : MlgError {
    using MlgError::MlgError;
};
struct StepOutOfRange : MlgError {
    using MlgError::MlgError;
};
struct NonFiniteLoss : MlgError {
    using MlgError::MlgError;
};
struct UnknownFlag : MlgError {
    using MlgError::MlgError;
};
struct CheckpointVersionMismatch : MlgError {
    using MlgError::MlgError;
};
struct IoError : MlgError {
    using MlgError::MlgError;
};
struct ConfigError : MlgError {
    using MlgError::MlgError;
};

}  // namespace mlg
