// SPDX-License-Identifier: Apache-2.0
// Copyright 2026 The rvqcomm Authors

#pragma once

#include <stdexcept>
#include <string>

namespace rvqcomm {

/// Error classes. The numeric values double as CLI exit codes.
enum class ErrorKind : int {
    kConfig = 2,
    kIo = 3,
    kProtocol = 4,
    kDesync = 5,
    kState = 6,
    kNumeric = 7,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

/// Invalid dimensions, parameters or flags.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(ErrorKind::kConfig, what) {}
};

/// File could not be read/written, or its content is malformed.
class IoError : public Error {
public:
    explicit IoError(const std::string& what) : Error(ErrorKind::kIo, what) {}
};

/// Bad magic/version or otherwise undecodable wire bytes.
class ProtocolError : public Error {
public:
    explicit ProtocolError(const std::string& what) : Error(ErrorKind::kProtocol, what) {}
};

/// Byte length does not match the length implied by the header.
class TruncationError : public ProtocolError {
public:
    explicit TruncationError(const std::string& what) : ProtocolError(what) {}
};

/// Index out of codebook range, or an index map inconsistent with the codebooks.
class CorruptPayloadError : public ProtocolError {
public:
    explicit CorruptPayloadError(const std::string& what) : ProtocolError(what) {}
};

/// Payload was produced against different codebooks than the local ones.
class DesyncError : public Error {
public:
    explicit DesyncError(const std::string& what) : Error(ErrorKind::kDesync, what) {}
};

/// Operation not allowed in the object's current state (e.g. mutating a frozen model).
class StateError : public Error {
public:
    explicit StateError(const std::string& what) : Error(ErrorKind::kState, what) {}
};

/// Non-finite values during training.
class NumericError : public Error {
public:
    explicit NumericError(const std::string& what) : Error(ErrorKind::kNumeric, what) {}
};

}  // namespace rvqcomm
