#pragma once

#include <cmath>
#include <vector>

#include "dirac_algebra.hpp"
#include "grid.hpp"
#include "types.hpp"

namespace dirac4d {

enum class Profile { inverse_power, gaussian };

inline const char* to_string(Profile p) { return p == Profile::inverse_power ? "inverse-power" : "gaussian"; }

// V(x) = amplitude * profile(|x - center|) * direction
struct PotentialSpec {
    Profile profile = Profile::inverse_power;
    double delta = 6.0;
    double amplitude = 0.0;
    Mat4 direction = Mat4::Identity();
    Point center = Point::Zero();

    double profile_at(const Point& x) const {
        const double r2 = (x - center).squaredNorm();
        if (profile == Profile::gaussian) return std::exp(-r2);
        return std::pow(1.0 + r2, -0.5 * delta);
    }
    Mat4 at(const Point& x) const { return amplitude * profile_at(x) * direction; }

    PotentialSpec with_amplitude(double c) const {
        PotentialSpec s = *this;
        s.amplitude = c;
        return s;
    }
};

// rank-one upper-component family c <x>^-delta e11
inline PotentialSpec upper_channel_potential(double c, double delta = 6.0) {
    PotentialSpec s;
    s.delta = delta;
    s.amplitude = c;
    s.direction = Mat4::Zero();
    s.direction(0, 0) = 1.0;
    return s;
}

inline PotentialSpec scalar_potential(double c, double delta = 6.0) {
    PotentialSpec s;
    s.delta = delta;
    s.amplitude = c;
    return s;
}

inline std::vector<PointFactorization> sample_potential(const PotentialSpec& spec, const QuadratureGrid& grid,
                                                        const Tolerances& tol = {}) {
    require((spec.direction - spec.direction.adjoint()).norm() <= tol.hermitian * (1.0 + spec.direction.norm()),
            ErrorKind::symmetry, "potential direction is not Hermitian");
    std::vector<PointFactorization> out;
    out.reserve(grid.size());
    for (const Point& x : grid.nodes) out.push_back(factorize_potential(spec.at(x), tol));
    return out;
}

} // namespace dirac4d
