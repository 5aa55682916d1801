// Copyright (C) 2026 the mgrec authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>

#include "mgrec/types.hpp"

namespace mgrec {

// Small elementwise kernels shared by the quantizer VAE and the transformer.
// All activations are smooth so finite-difference gradient checks stay clean.

inline double gelu_scalar(double x) {
    const double c = 0.7978845608028654;  // sqrt(2/pi)
    const double u = c * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

inline double gelu_grad_scalar(double x) {
    const double c = 0.7978845608028654;
    const double u = c * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    const double du = c * (1.0 + 3.0 * 0.044715 * x * x);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
}

template <typename Derived>
auto gelu(const Eigen::MatrixBase<Derived>& x) {
    return x.unaryExpr([](typename Derived::Scalar v) {
        return static_cast<typename Derived::Scalar>(gelu_scalar(static_cast<double>(v)));
    });
}

template <typename Derived>
auto gelu_grad(const Eigen::MatrixBase<Derived>& x) {
    return x.unaryExpr([](typename Derived::Scalar v) {
        return static_cast<typename Derived::Scalar>(gelu_grad_scalar(static_cast<double>(v)));
    });
}

/// Numerically stable row-wise softmax, in place.
inline void softmax_rows(Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) {
        const double mx = m.row(r).maxCoeff();
        m.row(r) = (m.row(r).array() - mx).exp();
        m.row(r) /= m.row(r).sum();
    }
}

/// log(softmax(v)) for a single logit vector.
inline Vector log_softmax(const Vector& v) {
    const double mx = v.maxCoeff();
    const double lse = mx + std::log((v.array() - mx).exp().sum());
    return v.array() - lse;
}

/// Squared Euclidean distances between every row of a and every row of b.
inline Matrix pairwise_sq_dist(const Matrix& a, const Matrix& b) {
    Matrix d = -2.0 * (a * b.transpose());
    const Vector an = a.rowwise().squaredNorm();
    const Vector bn = b.rowwise().squaredNorm();
    d.colwise() += an;
    d.rowwise() += bn.transpose();
    return d.cwiseMax(0.0);
}

/// Index of the smallest entry in a row, first index on ties.
inline int argmin_row(const Matrix& d, Eigen::Index row) {
    int best = 0;
    double best_v = d(row, 0);
    for (Eigen::Index c = 1; c < d.cols(); ++c) {
        if (d(row, c) < best_v) {
            best_v = d(row, c);
            best = static_cast<int>(c);
        }
    }
    return best;
}

}  // namespace mgrec
