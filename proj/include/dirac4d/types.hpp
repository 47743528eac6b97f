#pragma once

#include <complex>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace dirac4d {

using cd = std::complex<double>;
using Mat4 = Eigen::Matrix<cd, 4, 4>;
using Vec4 = Eigen::Matrix<cd, 4, 1>;
using Point = Eigen::Vector4d;
using MatX = Eigen::MatrixXcd;
using VecX = Eigen::VectorXcd;
using RowBlock = Eigen::Matrix<cd, Eigen::Dynamic, 4, Eigen::RowMajor, 4, 4>; // at most 4 rows, no heap

inline constexpr double pi = 3.141592653589793238462643383279502884;
inline constexpr double euler_gamma = 0.577215664901532860606512090082402431;
inline constexpr cd iu{0.0, 1.0};

// Overall sign of every resolvent kernel. Fixed by the threshold kernel
// G0 = -1/(4 pi^2 r^2); the kernels are then (lambda - D_m)^{-1} and the
// perturbed objects belong to H = D_m + kernel_sign * V.
inline constexpr double kernel_sign = -1.0;

enum class Branch { plus, minus };

inline double branch_sign(Branch b) { return b == Branch::plus ? 1.0 : -1.0; }

enum class ErrorKind {
    invalid_mass,
    symmetry,
    singular_frequency,
    domain,
    singularity,
    conditioning,
    classification,
    resolution,
    invariant,
    parse,
};

inline const char* to_string(ErrorKind k) {
    switch (k) {
    case ErrorKind::invalid_mass: return "invalid-mass";
    case ErrorKind::symmetry: return "symmetry";
    case ErrorKind::singular_frequency: return "singular-frequency";
    case ErrorKind::domain: return "domain";
    case ErrorKind::singularity: return "singularity";
    case ErrorKind::conditioning: return "conditioning";
    case ErrorKind::classification: return "classification";
    case ErrorKind::resolution: return "resolution";
    case ErrorKind::invariant: return "invariant-violation";
    case ErrorKind::parse: return "parse";
    }
    return "unknown";
}

class Error : public std::runtime_error {
public:
    Error(ErrorKind k, const std::string& what)
        : std::runtime_error(std::string(to_string(k)) + ": " + what), kind_(k) {}
    ErrorKind kind() const { return kind_; }

private:
    ErrorKind kind_;
};

inline void require(bool ok, ErrorKind k, const std::string& what) {
    if (!ok) throw Error(k, what);
}

// numerical policy shared by the modules
struct Tolerances {
    double hermitian = 1e-10;     // relative, for V(x) and T0
    double null_rel = 1e-6;       // singular value / largest singular value
    double null_gap = 1e2;        // kept_min / discarded_max
    double cond_max = 1e12;
};

} // namespace dirac4d
