#pragma once

#include <cmath>

#include <gsl/gsl_sf_bessel.h>

#include "types.hpp"

namespace dirac4d::bessel {

// J1, J2 and the log-regular parts of Y1, Y2:
//   y1r = Y1 + 2/(pi u),  y2r = Y2 + 4/(pi u^2) + 1/pi
struct Values {
    double j1, y1r, j2, y2r;
    double y1(double u) const { return y1r - 2.0 / (pi * u); }
    double y2(double u) const { return y2r - 4.0 / (pi * u * u) - 1.0 / pi; }
};

inline constexpr double series_switch = 8.0;

inline Values series(double u) {
    using ld = long double;
    const ld h = static_cast<ld>(u) / 2;
    const ld q = -h * h;
    const ld gam = static_cast<ld>(euler_gamma);
    // t1 = q^k / (k! (k+1)!),  t2 = q^k / (k! (k+2)!)
    ld t1 = 1, t2 = 0.5L;
    ld psi1 = -gam;          // psi(k+1)
    ld psi2 = 1 - gam;       // psi(k+2)
    ld psi3 = 1.5L - gam;    // psi(k+3)
    ld sj1 = 0, sj2 = 0, sy1 = 0, sy2 = 0;
    for (int k = 0; k < 80; ++k) {
        sj1 += t1;
        sj2 += t2;
        sy1 += (psi1 + psi2) * t1;
        sy2 += (psi1 + psi3) * t2;
        const ld kk = static_cast<ld>(k) + 1;
        if (std::fabs(t1) < 1e-24L * std::fabs(sj1) && std::fabs(t2) < 1e-24L * std::fabs(sj2) && k > 2) break;
        t1 *= q / (kk * (kk + 1));
        t2 *= q / (kk * (kk + 2));
        psi1 += 1 / kk;
        psi2 += 1 / (kk + 1);
        psi3 += 1 / (kk + 2);
    }
    const ld lpi = 3.141592653589793238462643383279502884L;
    const ld lg = std::log(h);
    const ld j1 = h * sj1;
    const ld j2 = h * h * sj2;
    Values v;
    v.j1 = static_cast<double>(j1);
    v.j2 = static_cast<double>(j2);
    v.y1r = static_cast<double>((2 / lpi) * lg * j1 - h * sy1 / lpi);
    v.y2r = static_cast<double>((2 / lpi) * lg * j2 - h * h * sy2 / lpi);
    return v;
}

inline Values eval(double u) {
    require(u > 0.0 && std::isfinite(u), ErrorKind::domain, "Bessel argument must be positive");
    if (u <= series_switch) return series(u);
    const double j0 = gsl_sf_bessel_J0(u);
    const double j1 = gsl_sf_bessel_J1(u);
    const double y0 = gsl_sf_bessel_Y0(u);
    const double y1 = gsl_sf_bessel_Y1(u);
    Values v;
    v.j1 = j1;
    v.j2 = 2.0 * j1 / u - j0;
    v.y1r = y1 + 2.0 / (pi * u);
    v.y2r = (2.0 * y1 / u - y0) + 4.0 / (pi * u * u) + 1.0 / pi;
    return v;
}

} // namespace dirac4d::bessel
