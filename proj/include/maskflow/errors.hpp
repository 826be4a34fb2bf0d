#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace maskflow {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct DimensionError : Error {
    using Error::Error;
};

struct ArgumentError : Error {
    using Error::Error;
};

struct FormatError : Error {
    using Error::Error;
};

struct ContractError : Error {
    using Error::Error;
};

struct InvalidSceneError : Error {
    using Error::Error;
};

struct GuidanceSpecError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

// Raised when a checkpoint's stage tag does not fit the requested stage.
struct StageContractError : Error {
    using Error::Error;
};

// A parameter outside the trainable group was (or would have been) modified.
struct StageIsolationFault : Error {
    using Error::Error;
};

struct NumericalFault : Error {
    NumericalFault(const std::string& what, std::size_t step)
        : Error(what + " at step " + std::to_string(step)), step(step) {}
    std::size_t step;
};

}  // namespace maskflow
