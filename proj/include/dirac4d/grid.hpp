#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include <Eigen/QR>

#include "types.hpp"

namespace dirac4d {

enum class GridGenerator { tensor_gauss_radial, quasi_random };

inline const char* to_string(GridGenerator g) {
    return g == GridGenerator::tensor_gauss_radial ? "tensor-gauss-radial" : "quasi-random";
}

struct QuadratureGrid {
    std::vector<Point> nodes;
    std::vector<double> weights;
    GridGenerator generator = GridGenerator::tensor_gauss_radial;
    std::uint64_t seed = 0;
    double extent = 0.0;
    double grading = 2.0;
    int radial_count = 0;  // tensor grids only
    int angular_count = 0; // tensor grids only

    std::size_t size() const { return nodes.size(); }
    double ball_volume() const { return 0.5 * pi * pi * std::pow(extent, 4); }
};

namespace detail {

// vertices of the 24-cell (a spherical 5-design)
inline std::vector<Point> s3_design24() {
    std::vector<Point> v;
    for (int j = 0; j < 4; ++j)
        for (double s : {1.0, -1.0}) {
            Point p = Point::Zero();
            p[j] = s;
            v.push_back(p);
        }
    for (int mask = 0; mask < 16; ++mask) {
        Point p;
        for (int j = 0; j < 4; ++j) p[j] = (mask >> j & 1) ? -0.5 : 0.5;
        v.push_back(p);
    }
    return v;
}

// vertices of the 600-cell (a spherical 11-design)
inline std::vector<Point> s3_design120() {
    std::vector<Point> v = s3_design24();
    const double phi = 0.5 * (1.0 + std::sqrt(5.0));
    const std::array<double, 4> base{phi / 2.0, 0.5, 1.0 / (2.0 * phi), 0.0};
    std::array<int, 4> perm{0, 1, 2, 3};
    do {
        int inv = 0;
        for (int a = 0; a < 4; ++a)
            for (int b = a + 1; b < 4; ++b) inv += perm[static_cast<std::size_t>(a)] > perm[static_cast<std::size_t>(b)];
        if (inv % 2) continue;
        for (int mask = 0; mask < 8; ++mask) {
            Point p;
            int bit = 0;
            for (int j = 0; j < 4; ++j) {
                double c = base[static_cast<std::size_t>(perm[static_cast<std::size_t>(j)])];
                if (c != 0.0) c *= (mask >> bit++ & 1) ? -1.0 : 1.0;
                p[j] = c;
            }
            v.push_back(p);
        }
    } while (std::next_permutation(perm.begin(), perm.end()));
    return v;
}

inline void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
    x.assign(static_cast<std::size_t>(n), 0.0);
    w.assign(static_cast<std::size_t>(n), 0.0);
    auto legendre = [n](double t, double& pn, double& dpn) {
        double p0 = 1.0, p1 = t;
        for (int k = 2; k <= n; ++k) {
            const double p2 = ((2.0 * k - 1.0) * t * p1 - (k - 1.0) * p0) / k;
            p0 = p1;
            p1 = p2;
        }
        pn = p1;
        dpn = n * (t * p1 - p0) / (t * t - 1.0);
    };
    for (int i = 0; i < n; ++i) {
        double t = std::cos(pi * (i + 0.75) / (n + 0.5)), pn = 0.0, dpn = 1.0;
        for (int it = 0; it < 100; ++it) {
            legendre(t, pn, dpn);
            const double dt = pn / dpn;
            t -= dt;
            if (std::abs(dt) < 1e-16) break;
        }
        legendre(t, pn, dpn);
        x[static_cast<std::size_t>(i)] = t;
        w[static_cast<std::size_t>(i)] = 2.0 / ((1.0 - t * t) * dpn * dpn);
    }
}

inline Eigen::Matrix4d random_rotation(std::uint64_t seed) {
    std::mt19937_64 g(seed);
    std::normal_distribution<double> n;
    Eigen::Matrix4d a;
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) a(i, j) = n(g);
    Eigen::HouseholderQR<Eigen::Matrix4d> qr(a);
    Eigen::Matrix4d q = qr.householderQ();
    Eigen::Matrix4d r = qr.matrixQR().triangularView<Eigen::Upper>();
    for (int j = 0; j < 4; ++j)
        if (r(j, j) < 0.0) q.col(j) *= -1.0;
    return q;
}

inline double radical_inverse(std::uint64_t i, int base) {
    double f = 1.0, r = 0.0;
    while (i > 0) {
        f /= base;
        r += f * static_cast<double>(i % static_cast<std::uint64_t>(base));
        i /= static_cast<std::uint64_t>(base);
    }
    return r;
}

} // namespace detail

// Tensor grid: composite Gauss-Legendre on radial panels with edges R (k/P)^grading
// times an S^3 design (24 or 120 directions). angular = 0 picks by N; the 24-cell alone
// drifts under radial refinement, the 600-cell needs N >= 1920.
// Quasi-random: shifted Halton points, Hopf coordinates on S^3, radius R u^(grading/4),
// antipodally symmetrised, importance weights.
inline QuadratureGrid build_grid(GridGenerator gen, int N, double R, std::uint64_t seed, double grading = 2.0,
                                 int angular = 0, int panel_order = 4) {
    require(N >= 16, ErrorKind::domain, "grid needs N >= 16");
    require(R > 0.0, ErrorKind::domain, "grid extent must be positive");
    require(grading >= 1.0, ErrorKind::domain, "grading must be >= 1");
    QuadratureGrid g;
    g.generator = gen;
    g.seed = seed;
    g.extent = R;
    g.grading = grading;
    const Eigen::Matrix4d rot = detail::random_rotation(seed);
    if (gen == GridGenerator::tensor_gauss_radial) {
        if (angular == 0) angular = N >= 120 * 16 ? 120 : 24; // keep >= 16 radial nodes
        require(angular == 24 || angular == 120, ErrorKind::domain, "angular design must have 24 or 120 points");
        std::vector<Point> dirs = angular == 120 ? detail::s3_design120() : detail::s3_design24();
        const int q = panel_order;
        const int panels = std::max(1, static_cast<int>(std::lround(double(N) / angular / q)));
        std::vector<double> gx, gw;
        detail::gauss_legendre(q, gx, gw);
        std::vector<double> rr, wr;
        for (int p = 0; p < panels; ++p) {
            const double a = double(p) / panels, b = double(p + 1) / panels;
            for (int k = 0; k < q; ++k) {
                const double t = 0.5 * (a + b) + 0.5 * (b - a) * gx[static_cast<std::size_t>(k)];
                const double dt = 0.5 * (b - a) * gw[static_cast<std::size_t>(k)];
                const double r = R * std::pow(t, grading);
                rr.push_back(r);
                wr.push_back(dt * R * grading * std::pow(t, grading - 1.0) * r * r * r);
            }
        }
        g.radial_count = static_cast<int>(rr.size());
        g.angular_count = angular;
        const double dw = 2.0 * pi * pi / angular;
        for (std::size_t i = 0; i < rr.size(); ++i)
            for (const Point& d : dirs) {
                g.nodes.push_back(rr[i] * (rot * d));
                g.weights.push_back(wr[i] * dw);
            }
    } else {
        std::mt19937_64 eng(seed);
        std::uniform_real_distribution<double> uni;
        const double shift[4] = {uni(eng), uni(eng), uni(eng), uni(eng)};
        const int half = N / 2;
        const double p = grading / 4.0;
        const double w0 = 2.0 * pi * pi / (2 * half);
        for (int i = 0; i < half; ++i) {
            auto h = [&](int b, int k) { return std::fmod(detail::radical_inverse(static_cast<std::uint64_t>(i + 1), b) + shift[k], 1.0); };
            const double u = std::max(h(2, 0), 1e-12);
            const double a = h(3, 1), b1 = h(5, 2), c1 = h(7, 3);
            const double eta = std::asin(std::sqrt(a));
            const double t1 = 2.0 * pi * b1, t2 = 2.0 * pi * c1;
            Point d(std::sin(eta) * std::cos(t1), std::sin(eta) * std::sin(t1), std::cos(eta) * std::cos(t2),
                    std::cos(eta) * std::sin(t2));
            const double r = R * std::pow(u, p);
            const double w = w0 * r * r * r * R * p * std::pow(u, p - 1.0);
            g.nodes.push_back(r * d);
            g.weights.push_back(w);
            g.nodes.push_back(-r * d);
            g.weights.push_back(w);
        }
    }
    return g;
}

} // namespace dirac4d
