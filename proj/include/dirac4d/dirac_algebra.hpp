#pragma once

#include <algorithm>
#include <array>
#include <cmath>

#include <Eigen/Eigenvalues>

#include "types.hpp"

namespace dirac4d {

struct DiracMatrixSet {
    Mat4 beta;
    std::array<Mat4, 4> alpha; // alpha[0] is alpha_1
    double m = 1.0;

    // generator with alpha_0 := beta
    const Mat4& gen(int j) const { return j == 0 ? beta : alpha[static_cast<std::size_t>(j - 1)]; }
};

namespace detail {

inline DiracMatrixSet build_dirac_set() {
    DiracMatrixSet d;
    d.beta.setZero();
    d.beta.diagonal() << 1.0, 1.0, -1.0, -1.0;

    Eigen::Matrix2cd s1, s2, s3, id2;
    s1 << 0.0, 1.0, 1.0, 0.0;
    s2 << 0.0, -iu, iu, 0.0;
    s3 << 1.0, 0.0, 0.0, -1.0;
    id2.setIdentity();
    const Eigen::Matrix2cd sig[3] = {s1, s2, s3};
    for (int j = 0; j < 3; ++j) {
        Mat4 a = Mat4::Zero();
        a.block<2, 2>(0, 2) = sig[j];
        a.block<2, 2>(2, 0) = sig[j];
        d.alpha[static_cast<std::size_t>(j)] = a;
    }
    Mat4 a4 = Mat4::Zero();
    a4.block<2, 2>(0, 2) = iu * id2;
    a4.block<2, 2>(2, 0) = -iu * id2;
    d.alpha[3] = a4;
    return d;
}

inline const DiracMatrixSet& dirac_set() {
    static const DiracMatrixSet d = build_dirac_set();
    return d;
}

} // namespace detail

inline DiracMatrixSet standard_dirac_matrices(double m = 1.0) {
    require(m > 0.0 && std::isfinite(m), ErrorKind::invalid_mass, "mass must be positive");
    DiracMatrixSet d = detail::dirac_set();
    d.m = m;
    return d;
}

inline Mat4 upper_projection() {
    Mat4 p = Mat4::Zero();
    p(0, 0) = p(1, 1) = 1.0;
    return p;
}

inline Mat4 lower_projection() {
    Mat4 p = Mat4::Zero();
    p(2, 2) = p(3, 3) = 1.0;
    return p;
}

// alpha . v  (v real 4-vector)
inline Mat4 alpha_dot(const Point& v) {
    const auto& d = detail::dirac_set();
    Mat4 a = Mat4::Zero();
    for (int j = 0; j < 4; ++j) a += v[j] * d.alpha[static_cast<std::size_t>(j)];
    return a;
}

// sigma(xi) = alpha.xi + m beta
inline Mat4 dirac_symbol(const Point& xi, double m) {
    return alpha_dot(xi) + m * detail::dirac_set().beta;
}

struct PointFactorization {
    Mat4 V;
    Mat4 v;
    Mat4 vstar;
    Mat4 U;
    Eigen::Vector4d eigenvalues; // in the order of the rows of v
};

namespace detail {

// make the first non-negligible component real positive
inline void fix_phase(Eigen::Ref<Vec4> col) {
    for (int k = 0; k < 4; ++k) {
        const double a = std::abs(col[k]);
        if (a > 1e-12) {
            col *= std::conj(col[k]) / a;
            return;
        }
    }
}

} // namespace detail

inline PointFactorization factorize_potential(const Mat4& Vx, const Tolerances& tol = {}) {
    const double nrm = Vx.norm();
    require((Vx - Vx.adjoint()).norm() <= tol.hermitian * std::max(nrm, 1e-300) || nrm == 0.0,
            ErrorKind::symmetry, "potential matrix is not Hermitian");
    PointFactorization f;
    f.V = Vx;
    Mat4 B; // rows are eigenvector adjoints
    Eigen::Vector4d lam;
    Mat4 off = Vx;
    off.diagonal().setZero();
    if (off.norm() == 0.0) {
        // diagonal input keeps its own ordering, which makes v exact
        B.setIdentity();
        lam = Vx.diagonal().real();
    } else {
        Eigen::SelfAdjointEigenSolver<Mat4> es(0.5 * (Vx + Vx.adjoint()));
        Mat4 Q = es.eigenvectors();
        for (int k = 0; k < 4; ++k) detail::fix_phase(Q.col(k));
        B = Q.adjoint();
        lam = es.eigenvalues();
    }
    f.eigenvalues = lam;
    f.U.setZero();
    f.v.setZero();
    for (int k = 0; k < 4; ++k) {
        f.U(k, k) = lam[k] < 0.0 ? -1.0 : 1.0; // sign(0) := +1
        f.v.row(k) = std::sqrt(std::abs(lam[k])) * B.row(k);
    }
    f.vstar = f.v.adjoint();
    return f;
}

struct KMatrix {
    Mat4 matrix;
    std::array<double, 4> eigenvalues; // lambda_1 = lambda_2 >= lambda_3 = lambda_4
};

// Hermitian [[uc I, W],[W^*, lc I]] with the (eta, kappa) parametrisation of xi
inline Mat4 k_block(const Point& xi, double uc, double lc) {
    const cd eta(xi[1], xi[0]);
    const cd kap(xi[2], xi[3]);
    Mat4 b = Mat4::Zero();
    b(0, 0) = b(1, 1) = uc;
    b(2, 2) = b(3, 3) = lc;
    b(0, 2) = kap;
    b(0, 3) = std::conj(eta);
    b(1, 2) = eta;
    b(1, 3) = -std::conj(kap);
    b.block<2, 2>(2, 0) = b.block<2, 2>(0, 2).adjoint();
    return b;
}

inline KMatrix k_matrix(double omega, const Point& xi, double m) {
    require(m > 0.0, ErrorKind::invalid_mass, "mass must be positive");
    require(omega > 0.0 && omega < m, ErrorKind::domain, "omega must lie in (0, m)");
    const double x2 = xi.squaredNorm();
    require(x2 > 0.0, ErrorKind::singular_frequency, "xi = 0");
    // (m - sqrt(m^2 - w^2)) / w^2 without cancellation
    const double tau = x2 / (m + std::sqrt(m * m - omega * omega));
    const double den = x2 * (omega * omega + x2);
    KMatrix k;
    k.matrix = k_block(xi, 2.0 * m + tau, tau) / den;
    const double s = std::sqrt(m * m + x2);
    k.eigenvalues = {(m + tau + s) / den, (m + tau + s) / den, (m + tau - s) / den, (m + tau - s) / den};
    return k;
}

// omega -> 0 limit
inline Mat4 k_matrix_zero(const Point& xi, double m) {
    const double x2 = xi.squaredNorm();
    require(x2 > 0.0, ErrorKind::singular_frequency, "xi = 0");
    const double tau = x2 / (2.0 * m);
    return k_block(xi, 2.0 * m + tau, tau) / (x2 * x2);
}

} // namespace dirac4d
