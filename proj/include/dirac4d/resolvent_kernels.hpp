#pragma once

#include <cmath>
#include <vector>

#include <Eigen/SVD>

#include "bessel.hpp"
#include "dirac_algebra.hpp"
#include "types.hpp"

namespace dirac4d {

// ---------------------------------------------------------------- scalar kernels

inline double G0(double r) { return kernel_sign / (4.0 * pi * pi * r * r); }
inline double G0_prime(double r) { return -kernel_sign / (2.0 * pi * pi * r * r * r); }
inline double G1(double r) { return -kernel_sign * std::log(r) / (8.0 * pi * pi); }
inline double G1_prime(double r) { return -kernel_sign / (8.0 * pi * pi * r); }

inline double spectral_lambda(double z, double m) { return std::sqrt(z * z + m * m); }
// lambda - m without cancellation
inline double lambda_minus_m(double z, double m) { return z * z / (spectral_lambda(z, m) + m); }

struct ScalarPair {
    cd value;
    cd deriv; // d/dr
};

namespace detail {

inline void check_zr(double z, double r) {
    require(z > 0.0 && std::isfinite(z), ErrorKind::domain, "z must be positive");
    require(r > 0.0, ErrorKind::singularity, "kernel evaluated on the diagonal r = 0");
}

inline cd conj_if(cd v, Branch b) { return b == Branch::plus ? v : std::conj(v); }

} // namespace detail

// R0 - G0 and its r-derivative, free of the 1/r^2 cancellation
inline ScalarPair schrodinger_delta(double z, double r, Branch b) {
    detail::check_zr(z, r);
    const double u = z * r;
    const bessel::Values bv = bessel::eval(u);
    const cd pre = kernel_sign * iu * z / (8.0 * pi * r);
    ScalarPair p;
    p.value = detail::conj_if(pre * cd(bv.j1, bv.y1r), b);
    p.deriv = detail::conj_if(-pre * z * cd(bv.j2, bv.y2r - 1.0 / pi), b);
    return p;
}

inline ScalarPair schrodinger_pair(double z, double r, Branch b) {
    ScalarPair p = schrodinger_delta(z, r, b);
    p.value += G0(r);
    p.deriv += G0_prime(r);
    return p;
}

inline cd schrodinger_kernel(double z, double r, Branch b) { return schrodinger_pair(z, r, b).value; }

// ---------------------------------------------------------------- coefficients

struct ExpansionCoefficients {
    double a1 = 0.5;
    cd b1{0.0, 0.0};
    double a2 = 1.0;
    cd b2{0.0, 0.0};
    double c2 = 0.0;
    double c3 = 0.0;
    // diagnostics
    double residual_rms = 0.0;
    double condition = 0.0;
    double zmin = 0.0, zmax = 0.0;
    int samples = 0;

    cd g1(double z, Branch b) const {
        return z * z * (a1 * std::log(z) + detail::conj_if(b1, b));
    }
    // g1 / z^2, safe for arbitrarily small z
    cd g1_scaled(double z, Branch b) const { return a1 * std::log(z) + detail::conj_if(b1, b); }
    cd g2(double z, Branch b) const {
        return z * z * z * z * (a2 * std::log(z) + detail::conj_if(b2, b));
    }
};

inline double g_scalar_kernels(int j, double r, const ExpansionCoefficients& c = {}) {
    switch (j) {
    case 0:
        require(r > 0.0, ErrorKind::singularity, "G0 at r = 0");
        return G0(r);
    case 1:
        require(r > 0.0, ErrorKind::singularity, "G1 at r = 0");
        return G1(r);
    case 2: return c.c2 * r * r;
    case 3: return r > 0.0 ? c.c3 * r * r * std::log(r) : 0.0;
    default: throw Error(ErrorKind::domain, "kernel index must be 0..3");
    }
}

// Least squares of (R0 - G0 - z^2 G1) / z^2 on
//   {ln z, 1, z^2 r^2 ln z, z^2 r^2, z^2 r^2 ln r, z^4 r^4 ln z, z^4 r^4, z^4 r^4 ln r}
inline ExpansionCoefficients fit_expansion_coefficients(double m, double zmin, double zmax,
                                                        const std::vector<double>& r_samples,
                                                        int nz = 24) {
    require(m > 0.0, ErrorKind::invalid_mass, "mass must be positive");
    require(zmin > 0.0 && zmax > zmin && zmax <= 1e-2 * (1.0 + 1e-12), ErrorKind::domain,
            "z range must lie in (0, 1e-2]");
    require(r_samples.size() >= 3, ErrorKind::domain, "need at least three r samples");
    const int rows = nz * static_cast<int>(r_samples.size());
    MatX A(rows, 8);
    VecX y(rows);
    int k = 0;
    for (int i = 0; i < nz; ++i) {
        const double z = zmin * std::pow(zmax / zmin, nz > 1 ? double(i) / (nz - 1) : 0.0);
        const double lz = std::log(z);
        for (double r : r_samples) {
            const double w2 = z * z * r * r, lr = std::log(r);
            A.row(k) << lz, 1.0, w2 * lz, w2, w2 * lr, w2 * w2 * lz, w2 * w2, w2 * w2 * lr;
            y[k] = (schrodinger_delta(z, r, Branch::plus).value - z * z * G1(r)) / (z * z);
            ++k;
        }
    }
    Eigen::VectorXd scale(8);
    for (int c = 0; c < 8; ++c) {
        scale[c] = A.col(c).norm();
        A.col(c) /= scale[c];
    }
    Eigen::JacobiSVD<MatX> svd(A, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const auto& sv = svd.singularValues();
    ExpansionCoefficients out;
    out.condition = sv[0] / sv[sv.size() - 1];
    out.zmin = zmin;
    out.zmax = zmax;
    out.samples = rows;
    require(out.condition < 1e12, ErrorKind::conditioning,
            "expansion fit ill-conditioned, cond = " + std::to_string(out.condition));
    VecX coef = svd.solve(y);
    out.residual_rms = (A * coef - y).norm() / std::sqrt(double(rows));
    for (int c = 0; c < 8; ++c) coef[c] /= scale[c];

    // Dirac normalisation: g1 G1_D = 2m z^2 (alpha ln z + beta) I_uc with G1_D = m/(2 pi^2) I_uc
    out.a1 = 4.0 * pi * pi * coef[0].real();
    out.b1 = 4.0 * pi * pi * coef[1];
    out.c3 = coef[4].real();
    out.c2 = out.c3;
    out.a2 = coef[2].real() / out.c2;
    out.b2 = coef[3] / out.c2;
    require(out.a1 != 0.0 && out.b1.imag() != 0.0, ErrorKind::invariant,
            "fitted a1 or Im b1 vanished");
    return out;
}

inline const ExpansionCoefficients& default_coefficients() {
    static const ExpansionCoefficients c = fit_expansion_coefficients(1.0, 1e-5, 1e-2, {0.5, 1.0, 2.0, 3.0});
    return c;
}

// ---------------------------------------------------------------- Dirac kernels
//
// Every Dirac kernel used here has the radial form
//   K(x, y) = A(r) (-i alpha.(x-y)/r) + B(r) I_uc + C(r) I_lc.

struct RadialParts {
    cd A{0.0, 0.0}, B{0.0, 0.0}, C{0.0, 0.0};
};

inline Mat4 radial_matrix(const RadialParts& p, const Point& d) {
    const double r = d.norm();
    Mat4 k = (-iu * p.A / r) * alpha_dot(d);
    k(0, 0) += p.B;
    k(1, 1) += p.B;
    k(2, 2) += p.C;
    k(3, 3) += p.C;
    return k;
}

enum class KernelKind {
    resolvent,       // R0(z)
    resolvent_delta, // R0(z) - G0_D
    threshold0,
    threshold1,
    threshold2,
    threshold3,
};

// Diagonal value of a discretised kernel at a node of weight w:
//   gsub * (g0_uc I_uc + g0_lc I_lc) + ball_uc I_uc + ball_lc I_lc,
// where gsub is the node's singular-part value for the scalar G0.
struct DiagonalParts {
    cd g0_uc{0.0, 0.0}, g0_lc{0.0, 0.0};
    cd ball_uc{0.0, 0.0}, ball_lc{0.0, 0.0};
};

struct KernelSpec {
    KernelKind kind = KernelKind::threshold0;
    double m = 1.0;
    double z = 0.0;
    Branch branch = Branch::plus;
    ExpansionCoefficients coef{};

    static KernelSpec threshold(int j, double m, const ExpansionCoefficients& c = default_coefficients()) {
        KernelSpec s;
        s.kind = j == 0 ? KernelKind::threshold0
               : j == 1 ? KernelKind::threshold1
               : j == 2 ? KernelKind::threshold2
                        : KernelKind::threshold3;
        s.m = m;
        s.coef = c;
        return s;
    }
    static KernelSpec resolvent(double z, Branch b, double m, bool delta = false) {
        KernelSpec s;
        s.kind = delta ? KernelKind::resolvent_delta : KernelKind::resolvent;
        s.z = z;
        s.branch = b;
        s.m = m;
        return s;
    }

    RadialParts parts(double r) const {
        RadialParts p;
        switch (kind) {
        case KernelKind::resolvent: {
            const ScalarPair s = schrodinger_pair(z, r, branch);
            const double lam = spectral_lambda(z, m);
            p.A = s.deriv;
            p.B = (m + lam) * s.value;
            p.C = lambda_minus_m(z, m) * s.value;
            break;
        }
        case KernelKind::resolvent_delta: {
            const ScalarPair s = schrodinger_delta(z, r, branch);
            const double lam = spectral_lambda(z, m), lm = lambda_minus_m(z, m);
            p.A = s.deriv;
            p.B = (m + lam) * s.value + lm * G0(r);
            p.C = lm * (G0(r) + s.value);
            break;
        }
        case KernelKind::threshold0:
            p.A = G0_prime(r);
            p.B = 2.0 * m * G0(r);
            break;
        case KernelKind::threshold1: p.B = m / (2.0 * pi * pi); break;
        case KernelKind::threshold2:
            p.A = G1_prime(r);
            p.B = 2.0 * m * G1(r) + G0(r) / (2.0 * m);
            p.C = G0(r) / (2.0 * m);
            break;
        case KernelKind::threshold3:
            p.A = 2.0 * coef.c2 * r;
            p.B = 2.0 * m * coef.c2 * r * r;
            break;
        }
        return p;
    }

    // kernels whose alpha part carries the full -i alpha.(x-y) / (2 pi^2 r^4) singularity
    bool alpha_singular() const { return kind == KernelKind::threshold0 || kind == KernelKind::resolvent; }

    // h is the radius of the ball with the node's volume
    DiagonalParts diagonal(double h) const {
        DiagonalParts d;
        switch (kind) {
        case KernelKind::resolvent:
        case KernelKind::resolvent_delta: {
            const double lam = spectral_lambda(z, m), lm = lambda_minus_m(z, m);
            const bessel::Values bv = bessel::eval(z * h);
            const cd avg = detail::conj_if(kernel_sign * cd(-bv.y2r, bv.j2) / (2.0 * pi * h * h), branch);
            if (kind == KernelKind::resolvent) {
                d.g0_uc = m + lam;
                d.g0_lc = lm;
            } else {
                d.g0_uc = lm;
                d.g0_lc = lm;
            }
            d.ball_uc = (m + lam) * avg;
            d.ball_lc = lm * avg;
            break;
        }
        case KernelKind::threshold0: d.g0_uc = 2.0 * m; break;
        case KernelKind::threshold1: d.ball_uc = m / (2.0 * pi * pi); break;
        case KernelKind::threshold2:
            d.g0_uc = d.g0_lc = 1.0 / (2.0 * m);
            d.ball_uc = 2.0 * m * (-kernel_sign / (8.0 * pi * pi)) * (std::log(h) - 0.25);
            break;
        case KernelKind::threshold3: d.ball_uc = 2.0 * m * coef.c2 * (2.0 / 3.0) * h * h; break;
        }
        return d;
    }

    Mat4 matrix(const Point& x, const Point& y) const {
        const Point d = x - y;
        const double r = d.norm();
        require(r > 0.0, ErrorKind::singularity, "kernel evaluated at coincident points");
        return radial_matrix(parts(r), d);
    }
};

inline Mat4 g_dirac_kernels(int j, const Point& x, const Point& y, double m,
                            const ExpansionCoefficients& c = default_coefficients()) {
    require(m > 0.0, ErrorKind::invalid_mass, "mass must be positive");
    require(j >= 0 && j <= 3, ErrorKind::domain, "kernel index must be 0..3");
    if (j == 1) return (m / (2.0 * pi * pi)) * upper_projection();
    return KernelSpec::threshold(j, m, c).matrix(x, y);
}

inline Mat4 dirac_kernel(double z, const Point& x, const Point& y, double m, Branch b) {
    require(m > 0.0, ErrorKind::invalid_mass, "mass must be positive");
    return KernelSpec::resolvent(z, b, m).matrix(x, y);
}

// R0(z) - G0_D
inline Mat4 dirac_kernel_delta(double z, const Point& x, const Point& y, double m, Branch b) {
    return KernelSpec::resolvent(z, b, m, true).matrix(x, y);
}

// quintic smoothstep bump: 1 on [0, 1/2], 0 on [1, inf)
inline double smooth_cutoff(double s) {
    if (s <= 0.5) return 1.0;
    if (s >= 1.0) return 0.0;
    const double x = 2.0 * (s - 0.5);
    return 1.0 - x * x * x * (10.0 + x * (-15.0 + 6.0 * x));
}

struct LowHigh {
    double low, high;
};

inline LowHigh split_low_high(double z, double r) {
    const double c = smooth_cutoff(z * r);
    return {c, 1.0 - c};
}

// E_k = R0 - (G0_D + g1 G1_D + z^2 G2_D + g2 G3_D) truncated after order k
inline Mat4 expansion_error(double z, const Point& x, const Point& y, double m, int k, Branch b,
                            const ExpansionCoefficients& c = default_coefficients()) {
    require(k >= 0 && k <= 2, ErrorKind::domain, "expansion order must be 0, 1 or 2");
    Mat4 e = dirac_kernel_delta(z, x, y, m, b);
    if (k >= 1) {
        e -= c.g1(z, b) * g_dirac_kernels(1, x, y, m, c);
        e -= (z * z) * g_dirac_kernels(2, x, y, m, c);
    }
    if (k >= 2) e -= c.g2(z, b) * g_dirac_kernels(3, x, y, m, c);
    return e;
}

} // namespace dirac4d
