// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <Eigen/Dense>

#include <stdexcept>
#include <string>

namespace mgrec {

/// Dense linear-algebra aliases used throughout the library.
template <typename ScalarT>
struct Dense {
    using Scalar = ScalarT;
    using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
    using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;
    using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;
};

// Core math runs in double; embedding tables are stored in float (see formats).
using Scalar = double;
using Matrix = Dense<double>::Matrix;
using Vector = Dense<double>::Vector;
using RowVector = Dense<double>::RowVector;
using MatrixF = Dense<float>::Matrix;
using VectorF = Dense<float>::Vector;

/// Base class for all errors raised by the library.
class Error : public std::runtime_error {
public:
    explicit Error(const std::string& what) : std::runtime_error(what) {}
};

/// Malformed or inconsistent input data (bad record, dimension mismatch, ...).
class FormatError : public Error {
public:
    explicit FormatError(const std::string& what) : Error(what) {}
};

/// Invalid configuration values.
class ConfigError : public Error {
public:
    explicit ConfigError(const std::string& what) : Error(what) {}
};

/// Checkpoint cannot be read back (truncation, checksum failure).
class CorruptFileError : public FormatError {
public:
    explicit CorruptFileError(const std::string& what) : FormatError(what) {}
};

/// Checkpoint was written by an incompatible format version.
class VersionMismatchError : public FormatError {
public:
    explicit VersionMismatchError(const std::string& what) : FormatError(what) {}
};

}  // namespace mgrec
