#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "threshold_spectral.hpp"

namespace dirac4d {

// ---------------------------------------------------------------- windows

enum class WindowKind { low, dyadic };

// low: chi(z / z1) with the quintic smoothstep, 1 below z1/2 and 0 above z1.
// dyadic j: chi(z / 2^(j+1)) - chi(z / 2^j), supported in [2^(j-1), 2^(j+1)].
// z_min is where integration starts near threshold; rho sets the geometric node spacing there.
struct EnergyWindow {
    WindowKind kind = WindowKind::low;
    double z1 = 0.5;
    int j = 0;
    double z_min = 1e-3;
    double rho = 0.85;

    static EnergyWindow low(double z1, double z_min = 1e-3) {
        require(z1 > 0.0 && z_min > 0.0 && z_min < 0.5 * z1, ErrorKind::domain, "low window needs 0 < z_min < z1/2");
        EnergyWindow w;
        w.z1 = z1;
        w.z_min = z_min;
        return w;
    }
    static EnergyWindow dyadic(int j) {
        require(j >= -10 && j <= 12, ErrorKind::domain, "dyadic index out of range");
        EnergyWindow w;
        w.kind = WindowKind::dyadic;
        w.j = j;
        return w;
    }

    double lo() const { return kind == WindowKind::low ? z_min : std::ldexp(1.0, j - 1); }
    double hi() const { return kind == WindowKind::low ? z1 : std::ldexp(1.0, j + 1); }
    double weight(double z) const {
        if (kind == WindowKind::low) return smooth_cutoff(z / z1);
        const double s = std::ldexp(z, -j);
        return smooth_cutoff(0.5 * s) - smooth_cutoff(s);
    }
    // points where the smoothstep pieces join
    std::vector<double> kinks() const {
        if (kind == WindowKind::low) return {0.5 * z1};
        return {std::ldexp(1.0, j)};
    }
    std::string label() const {
        return kind == WindowKind::low ? "low(z1=" + std::to_string(z1) + ")" : "dyadic(j=" + std::to_string(j) + ")";
    }
};

enum class Variant { free, born, tail, full_low, Ft, residual };

inline const char* to_string(Variant v) {
    switch (v) {
    case Variant::free: return "free";
    case Variant::born: return "born";
    case Variant::tail: return "tail";
    case Variant::full_low: return "full-low";
    case Variant::Ft: return "F_t";
    case Variant::residual: return "residual";
    }
    return "unknown";
}

struct PropagatorSample {
    double t = 0.0;
    Point x, y;
    Mat4 kernel;
    EnergyWindow window;
    Variant variant = Variant::free;
    int born_order = 0;
    double r() const { return (x - y).norm(); }
};

// ---------------------------------------------------------------- quadrature helpers

namespace detail {

struct GLRule {
    std::vector<double> x, w;
};

inline const GLRule& gl_rule(int n) {
    static thread_local std::vector<GLRule> cache(65);
    require(n >= 1 && n <= 64, ErrorKind::domain, "Gauss rule order out of range");
    GLRule& r = cache[static_cast<std::size_t>(n)];
    if (r.x.empty()) gauss_legendre(n, r.x, r.w);
    return r;
}

inline std::vector<double> barycentric_weights(const std::vector<double>& x) {
    std::vector<double> w(x.size(), 1.0);
    for (std::size_t i = 0; i < x.size(); ++i)
        for (std::size_t k = 0; k < x.size(); ++k)
            if (k != i) w[i] /= (x[i] - x[k]);
    return w;
}

// Lagrange basis values at s
inline void lagrange_at(const std::vector<double>& x, const std::vector<double>& bw, double s, std::vector<double>& out) {
    out.assign(x.size(), 0.0);
    for (std::size_t i = 0; i < x.size(); ++i)
        if (s == x[i]) {
            out[i] = 1.0;
            return;
        }
    double den = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = bw[i] / (s - x[i]);
        den += out[i];
    }
    for (double& v : out) v /= den;
}

inline cd stone_phase(double t, double z, double m) { return std::exp(-iu * (t * spectral_lambda(z, m))); }

} // namespace detail

// ---------------------------------------------------------------- oscillatory integrals

// int e^{-it sqrt(z^2+m^2)} chi(z) a(z) dz over the window, a given as a callable. r is the
// effective radius of the amplitude's own oscillation e^{+-izr}. Panels are at most
// pi / (t z/lambda + r) long, split at the window kinks, geometric towards threshold, and refined to
// width |t|^-1/2 around the stationary point z0 = m r / sqrt(t^2 - r^2).
template <class F>
auto oscillatory_integral(F&& amp, double t, double r, const EnergyWindow& w, double m, int order = 16) {
    using T = std::decay_t<decltype(amp(1.0))>;
    require(m > 0.0, ErrorKind::invalid_mass, "mass must be positive");
    require(r >= 0.0, ErrorKind::domain, "effective radius must be >= 0");
    const double lo = w.lo(), hi = w.hi();
    std::vector<double> br{lo, hi};
    for (double k : w.kinks()) br.push_back(k);
    if (w.kind == WindowKind::low)
        for (double z = 0.5 * w.z1; z > lo; z *= 0.5) br.push_back(z);
    const double at = std::abs(t);
    if (r < at) {
        const double z0 = m * r / std::sqrt(at * at - r * r), h = 1.0 / std::sqrt(at);
        for (double z : {z0 - h, z0, z0 + h}) br.push_back(z);
    }
    br.erase(std::remove_if(br.begin(), br.end(), [&](double z) { return z < lo || z > hi; }), br.end());
    std::sort(br.begin(), br.end());
    br.erase(std::unique(br.begin(), br.end()), br.end());
    const auto& gl = detail::gl_rule(order);
    T acc = T(amp(0.5 * (lo + hi)) * 0.0);
    for (std::size_t p = 0; p + 1 < br.size(); ++p) {
        const double a = br[p], b = br[p + 1];
        const double rate = at * b / spectral_lambda(b, m) + r;
        const int n = std::max(1, static_cast<int>(std::ceil((b - a) * rate / pi)));
        const double len = (b - a) / n;
        for (int s = 0; s < n; ++s) {
            const double c = a + (s + 0.5) * len;
            for (std::size_t i = 0; i < gl.x.size(); ++i) {
                const double z = c + 0.5 * len * gl.x[i];
                const double wz = w.weight(z);
                if (wz == 0.0) continue;
                acc += T((0.5 * len * gl.w[i] * wz * detail::stone_phase(t, z, m)) * amp(z));
            }
        }
    }
    return acc;
}

// Composite Gauss grid for sampled amplitudes: geometric panels (Gauss in log z) near threshold
// with node ratio ~rho, then uniform panels short enough for `points_per_oscillation` at r_eff.
struct ZGrid {
    struct Panel {
        double a = 0.0, b = 0.0;
        bool log = false;
    };
    std::vector<Panel> panels;
    int order = 12;
    std::vector<double> ref, bary; // reference nodes on [-1, 1] and their barycentric weights
    std::vector<double> nodes;     // z values, panel-major
    double r_eff = 0.0;

    int size() const { return static_cast<int>(nodes.size()); }
    double map(const Panel& p, double s) const {
        if (!p.log) return 0.5 * (p.a + p.b) + 0.5 * (p.b - p.a) * s;
        const double la = std::log(p.a), lb = std::log(p.b);
        return std::exp(0.5 * (la + lb) + 0.5 * (lb - la) * s);
    }
    // minimum points per oscillation of e^{i z r} over the panels
    double points_per_oscillation(double r) const {
        double worst = std::numeric_limits<double>::infinity();
        for (const Panel& p : panels) worst = std::min(worst, order * 2.0 * pi / ((p.b - p.a) * std::max(r, 1e-300)));
        return worst;
    }
};

inline ZGrid make_z_grid(const EnergyWindow& w, double r_eff, int order = 12, double points_per_oscillation = 24.0) {
    require(order >= 4 && order <= 32, ErrorKind::domain, "panel order must be 4..32");
    require(points_per_oscillation >= 8.0, ErrorKind::domain, "need >= 8 points per oscillation");
    ZGrid g;
    g.order = order;
    g.r_eff = r_eff;
    g.ref = detail::gl_rule(order).x;
    g.bary = detail::barycentric_weights(g.ref);
    const double lmax = order * 2.0 * pi / (points_per_oscillation * std::max(r_eff, 1e-3));
    const double lo = w.lo(), hi = w.hi();
    std::vector<double> br{lo, hi};
    for (double k : w.kinks()) br.push_back(k);
    std::sort(br.begin(), br.end());
    double zg = lo;
    if (w.kind == WindowKind::low) {
        const double ratio = std::pow(w.rho, order);
        zg = std::min(br[1], lmax / (1.0 - ratio));
        std::vector<double> geo;
        for (double z = zg; z > lo * (1.0 + 1e-12); z *= ratio) geo.push_back(z);
        geo.push_back(lo);
        std::reverse(geo.begin(), geo.end());
        for (std::size_t i = 0; i + 1 < geo.size(); ++i) g.panels.push_back({geo[i], geo[i + 1], true});
    }
    std::vector<double> ub{zg};
    for (double b : br)
        if (b > zg) ub.push_back(b);
    for (std::size_t i = 0; i + 1 < ub.size(); ++i) {
        const int n = std::max(1, static_cast<int>(std::ceil((ub[i + 1] - ub[i]) / lmax)));
        const double len = (ub[i + 1] - ub[i]) / n;
        for (int k = 0; k < n; ++k) g.panels.push_back({ub[i] + k * len, ub[i] + (k + 1) * len, false});
    }
    for (const auto& p : g.panels)
        for (double s : g.ref) g.nodes.push_back(g.map(p, s));
    return g;
}

// Same integral for an amplitude sampled on a ZGrid: per panel the samples are interpolated
// (barycentric Lagrange in the panel variable) onto sub-panels that resolve e^{-it lambda}.
// Refuses amplitudes whose declared oscillation e^{izr} gets fewer than 8 points.
template <class T>
T oscillatory_integral(const ZGrid& g, const std::vector<T>& a, double t, double r, const EnergyWindow& w, double m) {
    require(static_cast<int>(a.size()) == g.size(), ErrorKind::domain, "samples do not match the z grid");
    require(m > 0.0, ErrorKind::invalid_mass, "mass must be positive");
    const double ppo = g.points_per_oscillation(r);
    if (ppo < 8.0) {
        const double need = std::ceil(g.size() * 8.0 / ppo);
        throw Error(ErrorKind::resolution, "amplitude under-resolved: " + std::to_string(ppo) +
                                               " points per oscillation, need a z grid of >= " +
                                               std::to_string(static_cast<long>(need)) + " nodes");
    }
    const auto& gl = detail::gl_rule(16);
    const int q = g.order;
    T acc = T(a[0] * 0.0);
    std::vector<cd> coef(static_cast<std::size_t>(q));
    std::vector<double> ell;
    const double at = std::abs(t);
    for (std::size_t p = 0; p < g.panels.size(); ++p) {
        const auto& P = g.panels[p];
        // phase change of t lambda over the panel
        const double dphi = at * (spectral_lambda(P.b, m) - spectral_lambda(P.a, m));
        const int n = std::max(1, static_cast<int>(std::ceil(dphi / (0.5 * pi))));
        std::fill(coef.begin(), coef.end(), cd(0.0));
        const double hs = 2.0 / n;
        for (int s = 0; s < n; ++s) {
            const double c = -1.0 + (s + 0.5) * hs;
            for (std::size_t i = 0; i < gl.x.size(); ++i) {
                const double sv = c + 0.5 * hs * gl.x[i];
                const double z = g.map(P, sv);
                const double wz = w.weight(z);
                if (wz == 0.0) continue;
                const double jac = P.log ? 0.5 * (std::log(P.b) - std::log(P.a)) * z : 0.5 * (P.b - P.a);
                const cd f = (0.5 * hs * gl.w[i] * jac * wz) * detail::stone_phase(t, z, m);
                detail::lagrange_at(g.ref, g.bary, sv, ell);
                for (int k = 0; k < q; ++k) coef[static_cast<std::size_t>(k)] += f * ell[static_cast<std::size_t>(k)];
            }
        }
        for (int k = 0; k < q; ++k) acc += T(coef[static_cast<std::size_t>(k)] * a[p * static_cast<std::size_t>(q) + static_cast<std::size_t>(k)]);
    }
    return acc;
}

// ---------------------------------------------------------------- free kernels

// R0+(z) - R0-(z) at separation d = x - y; smooth, no Y functions. At d = 0 the radial limit.
inline Mat4 free_jump(double z, const Point& d, double m) {
    require(z > 0.0, ErrorKind::domain, "z must be positive");
    const double r = d.norm(), lam = spectral_lambda(z, m), lm = lambda_minus_m(z, m);
    double j1u, j2u; // J1(u)/u, J2(u)/u
    const double u = z * r;
    if (u == 0.0) {
        j1u = 0.5;
        j2u = 0.0;
    } else {
        const bessel::Values bv = bessel::eval(u);
        j1u = bv.j1 / u;
        j2u = bv.j2 / u;
    }
    // value: s i z^2 J1(u)/u / (4 pi); d/dr: -s i z^3 J2(u)/u / (4 pi)
    const cd val = kernel_sign * iu * z * z * j1u / (4.0 * pi);
    RadialParts p;
    p.A = -kernel_sign * iu * z * z * z * j2u / (4.0 * pi);
    p.B = (m + lam) * val;
    p.C = lm * val;
    if (r == 0.0) {
        Mat4 k = Mat4::Zero();
        k(0, 0) = k(1, 1) = p.B;
        k(2, 2) = k(3, 3) = p.C;
        return k;
    }
    return radial_matrix(p, d);
}

// Stone integrand without the window: (i / 2 pi) (z / lambda) [R0+ - R0-](z)
inline Mat4 free_amplitude(double z, const Point& d, double m) {
    return (iu / (2.0 * pi)) * (z / spectral_lambda(z, m)) * free_jump(z, d, m);
}

// e^{-itD_m} chi(D_m) P_(m, inf) kernel from Stone's formula
inline Mat4 free_kernel(double t, const Point& x, const Point& y, double m, const EnergyWindow& w) {
    require(m > 0.0, ErrorKind::invalid_mass, "mass must be positive");
    const Point d = x - y;
    return oscillatory_integral([&](double z) { return free_amplitude(z, d, m); }, t, d.norm(), w, m);
}

// The same kernel from the Fourier side: (2 pi)^-4 int e^{i xi.d} e^{-it<xi>} chi(|xi|) P+(xi) dxi,
// P+ = (1 + (alpha.xi + beta m)/<xi>)/2, radial transforms with J1 and J2 (GSL).
inline Mat4 fourier_side_oracle(double t, const Point& d, double m, const EnergyWindow& w) {
    require(m > 0.0, ErrorKind::invalid_mass, "mass must be positive");
    const double r = d.norm();
    require(r > 0.0, ErrorKind::singularity, "Fourier oracle needs x != y");
    struct Parts {
        cd i, b, a;
        Parts operator*(cd s) const { return {i * s, b * s, a * s}; }
        Parts& operator+=(const Parts& o) {
            i += o.i;
            b += o.b;
            a += o.a;
            return *this;
        }
    };
    // the integrator carries e^{-it<rho>} chi(rho); rho plays the role of z
    auto f = [&](double rho) {
        const double l = spectral_lambda(rho, m);
        const double j1 = gsl_sf_bessel_J1(rho * r), j2 = gsl_sf_bessel_Jn(2, rho * r);
        return Parts{cd(0.5 * j1 * rho * rho), cd(0.5 * (m / l) * j1 * rho * rho), cd(0.5 / l * j2 * rho * rho * rho)};
    };
    // same panels as the Stone side, but a three-component amplitude
    const auto& gl = detail::gl_rule(16);
    const double lo = w.lo(), hi = w.hi(), at = std::abs(t);
    std::vector<double> br{lo, hi};
    for (double k : w.kinks()) br.push_back(k);
    if (w.kind == WindowKind::low)
        for (double z = 0.5 * w.z1; z > lo; z *= 0.5) br.push_back(z);
    std::sort(br.begin(), br.end());
    br.erase(std::unique(br.begin(), br.end()), br.end());
    Parts acc{0.0, 0.0, 0.0};
    for (std::size_t p = 0; p + 1 < br.size(); ++p) {
        const double a = br[p], b = br[p + 1];
        const double rate = at * b / spectral_lambda(b, m) + r;
        const int n = std::max(1, static_cast<int>(std::ceil(2.0 * (b - a) * rate / pi)));
        const double len = (b - a) / n;
        for (int s = 0; s < n; ++s) {
            const double c = a + (s + 0.5) * len;
            for (std::size_t i = 0; i < gl.x.size(); ++i) {
                const double z = c + 0.5 * len * gl.x[i];
                const double wz = w.weight(z);
                if (wz == 0.0) continue;
                acc += f(z) * ((0.5 * len * gl.w[i] * wz) * detail::stone_phase(t, z, m));
            }
        }
    }
    RadialParts rp;
    const double c = 1.0 / (4.0 * pi * pi * r);
    rp.B = c * (acc.i + acc.b);
    rp.C = c * (acc.i - acc.b);
    rp.A = -c * acc.a;
    return radial_matrix(rp, d);
}

// ---------------------------------------------------------------- sample pairs

struct SamplePair {
    Point x, y;
    double r = 0.0;
};

// count pairs, |x - y| log-spaced in [r_lo, r_hi], x uniform in the ball of radius `spread`
inline std::vector<SamplePair> sample_pairs(int count = 40, std::uint64_t seed = 1, double r_lo = 0.1,
                                            double r_hi = 50.0, double spread = 1.0) {
    require(count >= 1 && r_lo > 0.0 && r_hi >= r_lo, ErrorKind::domain, "bad sample-pair spec");
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> nd;
    std::uniform_real_distribution<double> ud;
    auto unit = [&] {
        Point p;
        for (int k = 0; k < 4; ++k) p[k] = nd(gen);
        return Point(p / p.norm());
    };
    std::vector<SamplePair> out;
    for (int i = 0; i < count; ++i) {
        const double r = count == 1 ? r_lo : r_lo * std::pow(r_hi / r_lo, double(i) / (count - 1));
        SamplePair s;
        s.x = spread * std::pow(ud(gen), 0.25) * unit();
        s.y = s.x + r * unit();
        s.r = r;
        out.push_back(s);
    }
    return out;
}

inline double max_abs_entry(const Mat4& k) { return k.cwiseAbs().maxCoeff(); }

// ---------------------------------------------------------------- perturbed amplitudes

enum class Inverter { direct, regular_expansion, jensen_nenciu };

inline const char* to_string(Inverter v) {
    switch (v) {
    case Inverter::direct: return "direct";
    case Inverter::regular_expansion: return "regular-expansion";
    case Inverter::jensen_nenciu: return "jensen-nenciu";
    }
    return "unknown";
}

struct PerturbedOptions {
    Inverter inverter = Inverter::direct;
    int born_max = 0;   // Born orders 1..born_max kept separately; 6 completes the symmetric M = 3 tail
    bool full = true;   // jump of R_V through M^-1
    bool ft = false;    // F_t amplitude, needs jensen_nenciu and a threshold of kind first or third
    int order = 12;
    double points_per_oscillation = 24.0;
};

// Stone amplitudes (i / 2 pi)(z / lambda)[X+ - X-](z) on one z grid, per sample pair
struct PerturbedAmplitudes {
    ZGrid zgrid;
    EnergyWindow window;
    std::vector<SamplePair> pairs;
    PerturbedOptions options;
    double m = 1.0;
    std::vector<std::vector<Mat4>> free, full;        // [pair][z]
    std::vector<std::vector<std::vector<Mat4>>> born; // [k-1][pair][z]
    // F_t = left W_t right; W sampled on the grid, left/right are -psi at the sample points
    std::vector<MatX> ft_middle;
    MatX ft_left, ft_right, gamma0;
    double ft_tail = 0.0; // leading-term integral of z (1/g1+ - 1/g1-) below z_min, times i
    std::vector<double> z2_minv_norm; // z^2 ||M+^-1|| per node
    double seconds = 0.0;
};

namespace detail {

// M+^-1 applied to blocks of vectors at one z, for the three inverters
struct PlusSolver {
    Inverter kind = Inverter::direct;
    Eigen::PartialPivLU<MatX> lu;
    // jensen-nenciu
    MatX X, Ya, Binv_p, Binv_m;
    // regular expansion
    const MatX* D0 = nullptr;
    MatX lin; // g1 D0 T1 D0 + z^2 D0 T2 D0

    MatX apply(const MatX& rhs) const {
        switch (kind) {
        case Inverter::direct: return lu.solve(rhs);
        case Inverter::jensen_nenciu: return lu.solve(rhs) + X * (Binv_p * (Ya.adjoint() * rhs));
        case Inverter::regular_expansion: return (*D0) * rhs - lin * rhs;
        }
        return rhs;
    }
};

inline double g1_tail_integral(const ExpansionCoefficients& c, double zmin) {
    // int_0^zmin z (1/g1+ - 1/g1-) dz = -2i Im b1 int du / |a1 u + b1|^2, u = ln z; returns the part
    // multiplying i
    const double a = c.a1, br = c.b1.real(), bi = c.b1.imag();
    const double q = (a * std::log(zmin) + br) / bi;
    const double sg = (a * bi > 0.0) ? 1.0 : -1.0;
    return (-2.0 / a) * (std::atan(q) + 0.5 * pi * sg);
}

} // namespace detail

// Jump amplitudes for the pairs on the window's z grid. Needs the threshold analysis for the
// regular-expansion and Jensen-Nenciu inverters (the latter uses T0 with its null eigenvalues
// set to exact zeros). The minus branch comes from adjoints: dM- = dM+*.
inline PerturbedAmplitudes perturbed_amplitudes(const BSSpace& s, const std::vector<SamplePair>& pairs,
                                                const EnergyWindow& w, const PerturbedOptions& opt = {},
                                                const ThresholdAnalysis* an = nullptr) {
    require(opt.born_max >= 0 && opt.born_max <= 6, ErrorKind::domain, "Born order must be 0..6");
    require(!pairs.empty(), ErrorKind::domain, "no sample pairs");
    const double m = s.m;
    const auto t_start = std::chrono::steady_clock::now();
    if (opt.inverter != Inverter::direct || opt.ft)
        require(an != nullptr && an->space == &s, ErrorKind::domain, "inverter needs the threshold analysis of this space");
    if (opt.inverter == Inverter::regular_expansion)
        require(an->report.regular, ErrorKind::classification, "regular expansion needs a regular threshold");
    if (opt.inverter == Inverter::jensen_nenciu)
        require(an->report.dim_S1 > 0, ErrorKind::classification, "Jensen-Nenciu needs a nonzero S1");
    if (opt.ft) {
        require(opt.inverter == Inverter::jensen_nenciu, ErrorKind::domain, "F_t needs the Jensen-Nenciu inverter");
        require(an->report.kind == ResonanceKind::first || an->report.kind == ResonanceKind::third,
                ErrorKind::classification, "F_t is defined for kinds first and third");
    }
    PerturbedAmplitudes out;
    out.window = w;
    out.pairs = pairs;
    out.options = opt;
    out.m = m;
    std::vector<Point> xs, ys;
    double rx = 0.0;
    for (const auto& p : pairs) {
        xs.push_back(p.x);
        ys.push_back(p.y);
        rx = std::max(rx, p.x.norm() + p.y.norm());
    }
    double R = 0.0;
    for (const auto& b : s.blocks) R = std::max(R, s.grid->nodes[static_cast<std::size_t>(b.node)].norm());
    // path length through the potential plus round trips inside it for M^-1
    const double r_eff = rx + (opt.full ? 4.0 : 2.0) * R;
    out.zgrid = make_z_grid(w, r_eff, opt.order, opt.points_per_oscillation);
    const int nz = out.zgrid.size(), np = static_cast<int>(pairs.size());
    out.free.assign(static_cast<std::size_t>(np), std::vector<Mat4>(static_cast<std::size_t>(nz), Mat4::Zero()));
    if (opt.full) out.full = out.free;
    out.born.assign(static_cast<std::size_t>(opt.born_max), out.free);
    out.z2_minv_norm.assign(static_cast<std::size_t>(nz), 0.0);

    const Eigen::VectorXd u = s.U();
    // dense d x d matrices dominate memory: no copies of T0, and M- enters only as the adjoint of M+
    MatX T0own;
    if (!an) T0own = assemble_Tj(0, s).matrix;
    const MatX& T0 = an ? an->T0 : T0own;
    const auto ker0 = KernelSpec::threshold(0, m);
    const MatX L0 = left_factor(s, ker0, xs), R0 = right_factor(s, ker0, ys);

    // Jensen-Nenciu pieces in the original coordinates
    MatX T0x, Phi, wq, w2;
    if (opt.inverter == Inverter::jensen_nenciu) {
        const auto& s1 = an->s1;
        T0x = s1.frame * s1.lambda.cast<cd>().asDiagonal() * s1.frame.adjoint();
        Phi = s1.S1.basis;
        wq = an->s2.wq;
        w2 = an->s2.w2;
    }
    RegularExpansion rex;
    if (opt.inverter == Inverter::regular_expansion) rex = invert_regular(*an);
    if (opt.ft) {
        out.ft_left = L0 * Phi;
        out.ft_right = Phi.adjoint() * R0;
        // leading 1/g1 coefficient of B^-1: [1; -x21] (Q T1 Q)^-1 [1, -x12] in S1 coordinates
        const MatX T1s = Phi.adjoint() * an->T1 * Phi, T2s = Phi.adjoint() * an->T2 * Phi;
        const MatX qinv = (wq.adjoint() * T1s * wq).inverse();
        MatX G = wq, H = wq.adjoint();
        if (w2.cols() > 0) {
            const MatX D2 = (w2.adjoint() * T2s * w2).inverse();
            G -= w2 * D2 * (w2.adjoint() * T2s * wq);
            H -= (wq.adjoint() * T2s * w2) * D2 * w2.adjoint();
        }
        out.gamma0 = G * qinv * H;
        out.ft_tail = detail::g1_tail_integral(default_coefficients(), w.kind == WindowKind::low ? w.z_min : 1e-300);
        out.ft_middle.assign(static_cast<std::size_t>(nz), MatX::Zero(Phi.cols(), Phi.cols()));
    }

    for (int iz = 0; iz < nz; ++iz) {
        const double z = out.zgrid.nodes[static_cast<std::size_t>(iz)];
        const cd pre = (iu / (2.0 * pi)) * (z / spectral_lambda(z, m));
        for (int p = 0; p < np; ++p)
            out.free[static_cast<std::size_t>(p)][static_cast<std::size_t>(iz)] =
                pre * free_jump(z, pairs[static_cast<std::size_t>(p)].x - pairs[static_cast<std::size_t>(p)].y, m);
        if (s.dim == 0) {
            // no potential: every perturbation vanishes
            if (opt.full)
                for (int p = 0; p < np; ++p) out.full[static_cast<std::size_t>(p)][static_cast<std::size_t>(iz)] = out.free[static_cast<std::size_t>(p)][static_cast<std::size_t>(iz)];
            continue;
        }
        if (!opt.full && opt.born_max == 0) continue;

        const auto kdp = KernelSpec::resolvent(z, Branch::plus, m, true);
        const auto kdm = KernelSpec::resolvent(z, Branch::minus, m, true);
        const MatX Ldp = left_factor(s, kdp, xs), Ldm = left_factor(s, kdm, xs);
        const MatX Rdp = right_factor(s, kdp, ys), Rdm = right_factor(s, kdm, ys);
        const MatX Lp = L0 + Ldp, Lm = L0 + Ldm, Rp = R0 + Rdp, Rm = R0 + Rdm;
        MatX dMp;
        if (opt.full || opt.born_max > 1) dMp = assemble_delta_M(z, Branch::plus, s);
        // Born terms: (-1)^k L (U K)^(k-1) U R with K = v R0 v*
        if (opt.born_max > 0) {
            MatX Zp = u.cast<cd>().asDiagonal() * Rp, Zm = u.cast<cd>().asDiagonal() * Rm;
            for (int k = 1; k <= opt.born_max; ++k) {
                if (k > 1) {
                    // K = T0 - U + dM
                    MatX kp = T0 * Zp + dMp * Zp, km = T0 * Zm + dMp.adjoint() * Zm;
                    kp -= u.cast<cd>().asDiagonal() * Zp;
                    km -= u.cast<cd>().asDiagonal() * Zm;
                    Zp = u.cast<cd>().asDiagonal() * kp;
                    Zm = u.cast<cd>().asDiagonal() * km;
                }
                const double sg = (k % 2 == 0) ? 1.0 : -1.0;
                for (int p = 0; p < np; ++p) {
                    const Mat4 bp = Lp.middleRows(4 * p, 4) * Zp.middleCols(4 * p, 4);
                    const Mat4 bm = Lm.middleRows(4 * p, 4) * Zm.middleCols(4 * p, 4);
                    out.born[static_cast<std::size_t>(k - 1)][static_cast<std::size_t>(p)][static_cast<std::size_t>(iz)] =
                        pre * sg * (bp - bm);
                }
            }
        }
        if (!opt.full) continue;

        detail::PlusSolver S;
        S.kind = opt.inverter;
        MatX Bp, Bm;
        switch (opt.inverter) {
        case Inverter::direct: S.lu.compute(T0 + dMp); break;
        case Inverter::regular_expansion:
            S.D0 = &rex.D0;
            S.lin = rex.coef.g1(z, Branch::plus) * rex.D0T1D0 + (z * z) * rex.D0T2D0;
            break;
        case Inverter::jensen_nenciu: {
            MatX A = T0x + Phi * Phi.adjoint() + dMp;
            S.lu.compute(A);
            S.X = S.lu.solve(Phi);
            S.Ya = S.lu.adjoint().solve(Phi); // (M- + S1)^-1 Phi
            Bp = Phi.adjoint() * dMp * S.X;
            Bm = (dMp * Phi).adjoint() * S.Ya;
            S.Binv_p = feshbach_invert(Bp, wq, w2);
            break;
        }
        }
        // jump of L M^-1 R = dL M+^-1 R+ - L- M+^-1 dM M-^-1 R+ + L- M-^-1 dR
        const MatX Yp = S.apply(Rp);
        const MatX Wm = S.apply(MatX(Lm.adjoint())).adjoint(); // L- M-^-1 = (M+^-1 L-*)*
        const MatX dL = Ldp - Ldm, dR = Rdp - Rdm;
        const MatX dMY = dMp * Yp - dMp.adjoint() * Yp;
        for (int p = 0; p < np; ++p) {
            const auto xr = Eigen::seqN(4 * p, 4);
            const Mat4 jump = dL(xr, Eigen::all) * Yp.middleCols(4 * p, 4) - Wm(xr, Eigen::all) * dMY.middleCols(4 * p, 4) +
                              Wm(xr, Eigen::all) * dR.middleCols(4 * p, 4);
            out.full[static_cast<std::size_t>(p)][static_cast<std::size_t>(iz)] =
                out.free[static_cast<std::size_t>(p)][static_cast<std::size_t>(iz)] - pre * jump;
        }
        {
            // z^2 ||M+^-1||: power iteration on the solver
            VecX v = VecX::Ones(s.dim) / std::sqrt(double(s.dim));
            double nrm = 0.0;
            for (int it = 0; it < 8; ++it) {
                VecX y = S.apply(MatX(v)).col(0);
                nrm = y.norm();
                v = y / nrm;
            }
            out.z2_minv_norm[static_cast<std::size_t>(iz)] = z * z * nrm;
        }
        if (opt.ft) {
            MatX Binv_m = feshbach_invert(Bm, wq, w2);
            MatX W = S.Binv_p - Binv_m;
            if (w2.cols() > 0) {
                // drop the eigenvalue block's own inverse, keep the 1/g1-scaled part
                const MatX a22p = (w2.adjoint() * Bp * w2).inverse(), a22m = (w2.adjoint() * Bm * w2).inverse();
                W -= w2 * (a22p - a22m) * w2.adjoint();
            }
            out.ft_middle[static_cast<std::size_t>(iz)] = -pre * W;
        }
    }
    out.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return out;
}

// ---------------------------------------------------------------- kernels at time t

struct FtOperator {
    double t = 0.0;
    MatX left;   // 4P x d1: -psi at the x points
    MatX middle; // d1 x d1 z-integral
    MatX right;  // d1 x 4P
    int rank = 0;
    Mat4 kernel(int p) const { return left.middleRows(4 * p, 4) * middle * right.middleCols(4 * p, 4); }
    double proxy() const {
        double mx = 0.0;
        for (int p = 0; p < left.rows() / 4; ++p) mx = std::max(mx, max_abs_entry(kernel(p)));
        return mx;
    }
};

inline FtOperator Ft_operator(const PerturbedAmplitudes& a, double t) {
    require(a.options.ft, ErrorKind::classification, "amplitudes carry no F_t part (kind second or regular)");
    FtOperator f;
    f.t = t;
    f.left = a.ft_left;
    f.right = a.ft_right;
    f.middle = oscillatory_integral(a.zgrid, a.ft_middle, t, 0.0, a.window, a.m);
    // below z_min: e^{-itm} (1/m) int z (1/g1+ - 1/g1-) dz Gamma0, times -(i / 2 pi)
    if (a.window.kind == WindowKind::low)
        f.middle += (-(iu / (2.0 * pi)) * std::exp(-iu * (t * a.m)) * (iu * a.ft_tail / a.m)) * a.gamma0;
    Eigen::JacobiSVD<MatX> sv(f.middle);
    const double top = sv.singularValues().size() ? sv.singularValues()[0] : 0.0;
    for (Eigen::Index i = 0; i < sv.singularValues().size(); ++i) f.rank += sv.singularValues()[i] > 1e-10 * top;
    return f;
}

struct KernelSet {
    double t = 0.0;
    std::vector<Mat4> free, full, tail, ft, residual; // per pair
    std::vector<std::vector<Mat4>> born;               // [k-1][pair]
    int ft_rank = 0;
};

// integrates every sampled amplitude at time t; tail = full - free - sum of the Born orders kept
inline KernelSet stone_kernels(const PerturbedAmplitudes& a, double t) {
    KernelSet k;
    k.t = t;
    const int np = static_cast<int>(a.pairs.size());
    k.free.resize(static_cast<std::size_t>(np));
    if (!a.full.empty()) k.full.resize(static_cast<std::size_t>(np));
    k.born.assign(a.born.size(), std::vector<Mat4>(static_cast<std::size_t>(np)));
#pragma omp parallel for schedule(dynamic)
    for (int p = 0; p < np; ++p) {
        const auto pi_ = static_cast<std::size_t>(p);
        const double r = a.zgrid.r_eff;
        k.free[pi_] = oscillatory_integral(a.zgrid, a.free[pi_], t, (a.pairs[pi_].x - a.pairs[pi_].y).norm(), a.window, a.m);
        if (!a.full.empty()) k.full[pi_] = oscillatory_integral(a.zgrid, a.full[pi_], t, r, a.window, a.m);
        for (std::size_t b = 0; b < a.born.size(); ++b)
            k.born[b][pi_] = oscillatory_integral(a.zgrid, a.born[b][pi_], t, r, a.window, a.m);
    }
    if (a.options.ft) {
        const FtOperator f = Ft_operator(a, t);
        k.ft_rank = f.rank;
        const MatX tailF = (-(iu / (2.0 * pi)) * std::exp(-iu * (t * a.m)) * (iu * a.ft_tail / a.m)) * a.gamma0;
        for (int p = 0; p < np; ++p) {
            k.ft.push_back(f.kernel(p));
            // the full kernel shares F_t's leading part below z_min
            k.full[static_cast<std::size_t>(p)] += a.ft_left.middleRows(4 * p, 4) * tailF * a.ft_right.middleCols(4 * p, 4);
            k.residual.push_back(k.full[static_cast<std::size_t>(p)] - k.ft.back());
        }
    } else if (!k.full.empty()) {
        k.residual = k.full;
    }
    if (!a.born.empty() && !k.full.empty())
        for (int p = 0; p < np; ++p) {
            Mat4 tl = k.full[static_cast<std::size_t>(p)] - k.free[static_cast<std::size_t>(p)];
            for (const auto& b : k.born) tl -= b[static_cast<std::size_t>(p)];
            k.tail.push_back(tl);
        }
    return k;
}

inline double sup_entry(const std::vector<Mat4>& ks) {
    double mx = 0.0;
    for (const Mat4& k : ks) mx = std::max(mx, max_abs_entry(k));
    return mx;
}

// single-pair Born and tail kernels on the window's grid
inline Mat4 born_kernel(int k, double t, const Point& x, const Point& y, const BSSpace& s, const EnergyWindow& w) {
    require(k >= 1 && k <= 6, ErrorKind::domain, "Born order must be 1..6");
    PerturbedOptions o;
    o.full = false;
    o.born_max = k;
    const auto a = perturbed_amplitudes(s, {SamplePair{x, y, (x - y).norm()}}, w, o);
    return stone_kernels(a, t).born[static_cast<std::size_t>(k - 1)][0];
}

// symmetric tail -(R0 V)^3 R0 v* M^-1 v R0 (V R0)^3, as full - free - born_1..6
inline Mat4 tail_kernel(double t, const Point& x, const Point& y, const BSSpace& s, const EnergyWindow& w,
                        Inverter inv = Inverter::direct, const ThresholdAnalysis* an = nullptr) {
    PerturbedOptions o;
    o.inverter = inv;
    o.born_max = 6;
    const auto a = perturbed_amplitudes(s, {SamplePair{x, y, (x - y).norm()}}, w, o, an);
    return stone_kernels(a, t).tail[0];
}

// ---------------------------------------------------------------- dyadic high-energy windows

enum class DyadicVariant { free, born1 };

inline double free_dyadic_bound(int j, double t) {
    const double at = std::max(std::abs(t), 1e-300);
    return std::min({std::ldexp(1.0, 4 * j), std::ldexp(1.0, 4 * j) / (at * at), std::pow(2.0, 3.5 * j) / std::pow(at, 1.5)});
}

inline double born1_dyadic_bound(int j, double t) {
    const double at = std::max(std::abs(t), 1e-300);
    return std::min(std::ldexp(1.0, 4 * j), std::pow(2.0, 5.5 * j) / (at * at));
}

inline Mat4 dyadic_kernel(int j, double t, const Point& x, const Point& y, double m, DyadicVariant v,
                          const BSSpace* s = nullptr) {
    const EnergyWindow w = EnergyWindow::dyadic(j);
    if (v == DyadicVariant::free) return free_kernel(t, x, y, m, w);
    require(s != nullptr, ErrorKind::domain, "born-1 dyadic kernel needs a potential");
    return born_kernel(1, t, x, y, *s, w);
}

} // namespace dirac4d
