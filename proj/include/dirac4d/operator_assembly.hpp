#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "dirac_algebra.hpp"
#include "grid.hpp"
#include "potential.hpp"
#include "resolvent_kernels.hpp"
#include "types.hpp"

namespace dirac4d {

enum class DiagonalRule { subtraction, ball };

// One node of the Birman-Schwinger space: vs = sqrt(w) * (rows of v kept), u = matching signs.
struct BSBlock {
    int node = 0;
    int offset = 0;
    int rank = 0;
    RowBlock vs;
    Eigen::VectorXd u;
};

// Discrete space for v G v*: coordinates are sqrt(w_i) phi(x_i), restricted per node to the
// rows of v with nonzero eigenvalue (reduced) or all four rows.
struct BSSpace {
    const QuadratureGrid* grid = nullptr;
    double m = 1.0;
    DiagonalRule rule = DiagonalRule::subtraction;
    bool reduced = true;
    std::vector<BSBlock> blocks;
    std::vector<double> gsub; // per grid node: diagonal value of the scalar G0
    std::vector<double> hball;
    std::vector<double> F;         // subtraction profile (1 + r^2)^-2 at the nodes
    std::vector<Mat4> alpha_corr;  // exact minus discrete alpha-part integral of F, per node
    int dim = 0;

    Eigen::VectorXd U() const {
        Eigen::VectorXd u(dim);
        for (const auto& b : blocks) u.segment(b.offset, b.rank) = b.u;
        return u;
    }
};

struct DiscreteOperator {
    MatX matrix;
    std::string label;
    double z = 0.0;
    std::optional<Branch> branch;
};

namespace detail {

// Newton-type subtraction with F(r) = (1 + r^2)^-2, whose G0 potential is known in closed form
inline double newton_potential_F(double a, double R) {
    // int_{B_R} F(|y|) / |x - y|^2 dy for |x| = a <= R
    auto inner = [](double b) {
        const double b2 = b * b;
        if (b < 1e-2) return b2 * b2 / 4.0 - b2 * b2 * b2 / 3.0 + 3.0 * b2 * b2 * b2 * b2 / 8.0;
        return 0.5 * (std::log1p(b2) - b2 / (1.0 + b2));
    };
    const double b = std::min(a, R);
    const double in = b > 0.0 ? inner(b) / (a * a) : 0.0;
    const double out = 0.5 / (1.0 + b * b) - 0.5 / (1.0 + R * R);
    return 2.0 * pi * pi * (in + out);
}

// int_{B_R} F(|y|) (x - y) / |x - y|^4 dy = 2 pi^2 (inner(a) / a^4) x  for |x| = a, i.e. minus half
// the gradient of the potential above
inline double alpha_newton_F(double a) {
    if (a < 1e-2) {
        const double a2 = a * a;
        return 2.0 * pi * pi * (0.25 - a2 / 3.0 + 3.0 * a2 * a2 / 8.0);
    }
    const double a2 = a * a;
    return pi * pi * (std::log1p(a2) - a2 / (1.0 + a2)) / (a2 * a2);
}

// node values of the odd alpha kernel are corrected by subtracting F: for every node i
//   C_i = int K_a(x_i, y) F(y) dy - sum_{k != i} K_a(x_i, x_k) F_k w_k,  K_a = -i alpha.(x-y) / (2 pi^2 r^4)
inline std::vector<Mat4> alpha_correction(const QuadratureGrid& g, const std::vector<double>& F) {
    const std::size_t n = g.size();
    std::vector<Mat4> out(n);
#pragma omp parallel for schedule(dynamic, 16)
    for (std::size_t i = 0; i < n; ++i) {
        Point acc = Point::Zero();
        for (std::size_t k = 0; k < n; ++k) {
            if (k == i) continue;
            const Point d = g.nodes[i] - g.nodes[k];
            const double r2 = d.squaredNorm();
            acc += (g.weights[k] * F[k] / (r2 * r2)) * d;
        }
        const Point exact = alpha_newton_F(g.nodes[i].norm()) * g.nodes[i];
        out[i] = (-iu / (2.0 * pi * pi)) * alpha_dot(exact - acc);
    }
    return out;
}

inline std::vector<double> g0_diagonal(const QuadratureGrid& g, DiagonalRule rule, std::vector<double>& h) {
    const std::size_t n = g.size();
    std::vector<double> out(n);
    h.resize(n);
    for (std::size_t i = 0; i < n; ++i) h[i] = std::pow(2.0 * g.weights[i] / (pi * pi), 0.25);
    if (rule == DiagonalRule::ball) {
        for (std::size_t i = 0; i < n; ++i) out[i] = kernel_sign / (2.0 * pi * pi * h[i] * h[i]);
        return out;
    }
    std::vector<double> F(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double r2 = g.nodes[i].squaredNorm();
        F[i] = 1.0 / ((1.0 + r2) * (1.0 + r2));
    }
#pragma omp parallel for schedule(dynamic, 16)
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t k = 0; k < n; ++k) {
            if (k == i) continue;
            s += g.weights[k] * F[k] / (g.nodes[i] - g.nodes[k]).squaredNorm();
        }
        const double full = newton_potential_F(g.nodes[i].norm(), g.extent);
        out[i] = kernel_sign / (4.0 * pi * pi) * (full - s) / (F[i] * g.weights[i]);
    }
    return out;
}

// (-i A / r) alpha.d + diag(B, B, C, C) without forming the alpha matrices
inline void radial_block(const RadialParts& p, const Point& d, double r, Mat4& k) {
    const cd f = -iu * p.A / r;
    const cd w00(d[2], d[3]), w01(d[0], -d[1]), w10(d[0], d[1]), w11(-d[2], d[3]);
    k.setZero();
    k(0, 0) = k(1, 1) = p.B;
    k(2, 2) = k(3, 3) = p.C;
    k(0, 2) = f * w00;
    k(0, 3) = f * w01;
    k(1, 2) = f * w10;
    k(1, 3) = f * w11;
    k(2, 0) = f * std::conj(w00);
    k(2, 1) = f * std::conj(w10);
    k(3, 0) = f * std::conj(w01);
    k(3, 1) = f * std::conj(w11);
}

inline Mat4 diagonal_block(const DiagonalParts& d, double gsub) {
    Mat4 k = Mat4::Zero();
    k(0, 0) = k(1, 1) = gsub * d.g0_uc + d.ball_uc;
    k(2, 2) = k(3, 3) = gsub * d.g0_lc + d.ball_lc;
    return k;
}

} // namespace detail

inline BSSpace make_bs_space(const QuadratureGrid& grid, const std::vector<PointFactorization>& pot, double m,
                             DiagonalRule rule = DiagonalRule::subtraction, bool reduced = true) {
    require(pot.size() == grid.size(), ErrorKind::domain, "potential samples do not match the grid");
    BSSpace s;
    s.grid = &grid;
    s.m = m;
    s.rule = rule;
    s.reduced = reduced;
    s.gsub = detail::g0_diagonal(grid, rule, s.hball);
    s.F.resize(grid.size());
    for (std::size_t i = 0; i < grid.size(); ++i) {
        const double r2 = grid.nodes[i].squaredNorm();
        s.F[i] = 1.0 / ((1.0 + r2) * (1.0 + r2));
    }
    s.alpha_corr = detail::alpha_correction(grid, s.F);
    double lmax = 0.0;
    for (const auto& f : pot) lmax = std::max(lmax, f.eigenvalues.cwiseAbs().maxCoeff());
    int off = 0;
    for (std::size_t i = 0; i < grid.size(); ++i) {
        std::vector<int> rows;
        for (int k = 0; k < 4; ++k)
            if (!reduced || std::abs(pot[i].eigenvalues[k]) > 1e-14 * lmax) rows.push_back(k);
        if (rows.empty()) continue;
        BSBlock b;
        b.node = static_cast<int>(i);
        b.offset = off;
        b.rank = static_cast<int>(rows.size());
        b.vs.resize(b.rank, 4);
        b.u.resize(b.rank);
        const double sw = std::sqrt(grid.weights[i]);
        for (int a = 0; a < b.rank; ++a) {
            b.vs.row(a) = sw * pot[i].v.row(rows[static_cast<std::size_t>(a)]);
            b.u[a] = pot[i].U(rows[static_cast<std::size_t>(a)], rows[static_cast<std::size_t>(a)]).real();
        }
        off += b.rank;
        s.blocks.push_back(std::move(b));
    }
    s.dim = off;
    return s;
}

// [v K v*] with symmetric sqrt-weights, singular diagonal handled per the space's rule
inline MatX assemble_kernel(const BSSpace& s, const KernelSpec& ker) {
    const auto& g = *s.grid;
    MatX out = MatX::Zero(s.dim, s.dim);
    const int nb = static_cast<int>(s.blocks.size());
#pragma omp parallel for schedule(dynamic, 4)
    for (int bi = 0; bi < nb; ++bi) {
        const BSBlock& a = s.blocks[static_cast<std::size_t>(bi)];
        const Point& xi = g.nodes[static_cast<std::size_t>(a.node)];
        Mat4 kik, kki;
        {
            const std::size_t n = static_cast<std::size_t>(a.node);
            const Mat4 d = detail::diagonal_block(ker.diagonal(s.hball[n]), s.gsub[n]);
            out.block(a.offset, a.offset, a.rank, a.rank) = a.vs * d * a.vs.adjoint();
        }
        for (int bk = bi + 1; bk < nb; ++bk) {
            const BSBlock& b = s.blocks[static_cast<std::size_t>(bk)];
            const Point d = xi - g.nodes[static_cast<std::size_t>(b.node)];
            const double r = d.norm();
            const RadialParts p = ker.parts(r);
            detail::radial_block(p, d, r, kik);
            detail::radial_block(p, -d, r, kki);
            out.block(a.offset, b.offset, a.rank, b.rank) = a.vs * kik * b.vs.adjoint();
            out.block(b.offset, a.offset, b.rank, a.rank) = b.vs * kki * a.vs.adjoint();
        }
    }
    return out;
}

inline DiscreteOperator assemble_Tj(int j, const BSSpace& s, const ExpansionCoefficients& c = default_coefficients()) {
    require(j >= 0 && j <= 3, ErrorKind::domain, "T_j index must be 0..3");
    DiscreteOperator op;
    op.matrix = assemble_kernel(s, KernelSpec::threshold(j, s.m, c));
    if (j == 0) op.matrix.diagonal() += s.U().cast<cd>();
    // the kernels are formally self-adjoint; remove rounding asymmetry
    op.matrix = 0.5 * (op.matrix + op.matrix.adjoint()).eval();
    op.label = "T" + std::to_string(j);
    return op;
}

inline DiscreteOperator assemble_M(double z, Branch b, const BSSpace& s) {
    require(z > 0.0, ErrorKind::domain, "M(z) needs z > 0");
    DiscreteOperator op;
    op.matrix = assemble_kernel(s, KernelSpec::resolvent(z, b, s.m));
    op.matrix.diagonal() += s.U().cast<cd>();
    op.label = b == Branch::plus ? "M+" : "M-";
    op.z = z;
    op.branch = b;
    return op;
}

// M(z) - T0 = v (R0(z) - G0_D) v*, computed without cancellation
inline MatX assemble_delta_M(double z, Branch b, const BSSpace& s) {
    return assemble_kernel(s, KernelSpec::resolvent(z, b, s.m, true));
}

namespace detail {

inline void check_off_grid(const BSSpace& s, const std::vector<Point>& pts) {
    for (const Point& x : pts)
        for (const BSBlock& b : s.blocks)
            require((x - s.grid->nodes[static_cast<std::size_t>(b.node)]).squaredNorm() > 0.0, ErrorKind::singularity,
                    "sample point coincides with a grid node");
}

} // namespace detail

// rows: 4 spinor components per point; columns: BS space.  K(x_p, x_k) v*(x_k) sqrt(w_k)
inline MatX left_factor(const BSSpace& s, const KernelSpec& ker, const std::vector<Point>& pts) {
    const auto& g = *s.grid;
    const int np = static_cast<int>(pts.size());
    detail::check_off_grid(s, pts);
    MatX out(4 * np, s.dim);
#pragma omp parallel for schedule(static)
    for (int p = 0; p < np; ++p) {
        Mat4 k;
        for (const BSBlock& b : s.blocks) {
            const Point d = pts[static_cast<std::size_t>(p)] - g.nodes[static_cast<std::size_t>(b.node)];
            const double r = d.norm();
            detail::radial_block(ker.parts(r), d, r, k);
            out.block(4 * p, b.offset, 4, b.rank) = k * b.vs.adjoint();
        }
    }
    return out;
}

// rows: BS space; columns: 4 spinor components per point.  sqrt(w_k) v(x_k) K(x_k, y_p)
inline MatX right_factor(const BSSpace& s, const KernelSpec& ker, const std::vector<Point>& pts) {
    const auto& g = *s.grid;
    const int np = static_cast<int>(pts.size());
    detail::check_off_grid(s, pts);
    MatX out(s.dim, 4 * np);
#pragma omp parallel for schedule(static)
    for (int p = 0; p < np; ++p) {
        Mat4 k;
        for (const BSBlock& b : s.blocks) {
            const Point d = g.nodes[static_cast<std::size_t>(b.node)] - pts[static_cast<std::size_t>(p)];
            const double r = d.norm();
            detail::radial_block(ker.parts(r), d, r, k);
            out.block(b.offset, 4 * p, b.rank, 4) = b.vs * k;
        }
    }
    return out;
}

// values at every grid node of sum_k K(x_i, x_k) v*(x_k) sqrt(w_k) y_k, Nystrom diagonal included;
// rows 4 i .. 4 i + 3 belong to node i. The odd alpha singularity gets the F subtraction, which the
// symmetric matrices cannot carry without losing Hermiticity.
inline MatX apply_kernel_nodes(const BSSpace& s, const KernelSpec& ker, const MatX& y) {
    const auto& g = *s.grid;
    const int n = static_cast<int>(g.size());
    std::vector<MatX> src(s.blocks.size());
    for (std::size_t b = 0; b < s.blocks.size(); ++b)
        src[b] = s.blocks[b].vs.adjoint() * y.middleRows(s.blocks[b].offset, s.blocks[b].rank);
    MatX out = MatX::Zero(4 * n, y.cols());
#pragma omp parallel for schedule(dynamic, 8)
    for (int i = 0; i < n; ++i) {
        Mat4 k;
        for (std::size_t bi = 0; bi < s.blocks.size(); ++bi) {
            const BSBlock& b = s.blocks[bi];
            if (b.node == i) {
                const std::size_t ni = static_cast<std::size_t>(i);
                out.middleRows(4 * i, 4) += detail::diagonal_block(ker.diagonal(s.hball[ni]), s.gsub[ni]) * src[bi];
                // src = w g, the correction acts on g / F
                if (ker.alpha_singular())
                    out.middleRows(4 * i, 4) += s.alpha_corr[ni] * src[bi] / (g.weights[ni] * s.F[ni]);
                continue;
            }
            const Point d = g.nodes[static_cast<std::size_t>(i)] - g.nodes[static_cast<std::size_t>(b.node)];
            const double r = d.norm();
            detail::radial_block(ker.parts(r), d, r, k);
            out.middleRows(4 * i, 4) += k * src[bi];
        }
    }
    return out;
}

// largest singular value, power iteration on A* A
inline double operator_norm(const MatX& a) {
    if (a.size() == 0) return 0.0;
    VecX x = VecX::Ones(a.cols()) / std::sqrt(double(a.cols()));
    double sig = 0.0;
    for (int it = 0; it < 2000; ++it) {
        VecX y = a.adjoint() * (a * x);
        const double nrm = y.norm();
        if (nrm == 0.0) return 0.0;
        const double s_new = std::sqrt(nrm);
        x = y / nrm;
        if (std::abs(s_new - sig) <= 1e-13 * s_new) return s_new;
        sig = s_new;
    }
    return sig;
}

// largest singular value of the entrywise modulus (power iteration on |A|^T |A|)
inline double absolute_bound(const MatX& a) {
    if (a.size() == 0) return 0.0;
    const Eigen::MatrixXd b = a.cwiseAbs();
    Eigen::VectorXd x = Eigen::VectorXd::Ones(b.cols()) / std::sqrt(double(b.cols()));
    double sig = 0.0;
    for (int it = 0; it < 1000; ++it) {
        Eigen::VectorXd y = b.transpose() * (b * x);
        const double nrm = y.norm();
        if (nrm == 0.0) return 0.0;
        const double s_new = std::sqrt(nrm);
        x = y / nrm;
        if (std::abs(s_new - sig) <= 1e-13 * s_new) {
            sig = s_new;
            break;
        }
        sig = s_new;
    }
    return sig;
}

} // namespace dirac4d
