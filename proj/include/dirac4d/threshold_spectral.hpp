#pragma once

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "dirac_algebra.hpp"
#include "operator_assembly.hpp"
#include "potential.hpp"
#include "resolvent_kernels.hpp"
#include "types.hpp"

namespace dirac4d {

enum class ResonanceKind { regular, first, second, third };

inline const char* to_string(ResonanceKind k) {
    switch (k) {
    case ResonanceKind::regular: return "regular";
    case ResonanceKind::first: return "first";
    case ResonanceKind::second: return "second";
    case ResonanceKind::third: return "third";
    }
    return "?";
}

struct ProjectionSubspace {
    MatX basis; // orthonormal columns
    int rank = 0;
    double tol = 0.0; // absolute cut used on |eigenvalue|
    bool reliable = true;

    MatX projector() const { return basis * basis.adjoint(); }
};

namespace detail {

struct NullSplit {
    std::vector<int> null, kept;
    double cut = 0.0;
    bool reliable = true;
};

// |values| <= rel * scale are null; the gap to the rest must be >= gap
inline NullSplit split_null(const Eigen::VectorXd& values, double scale, const Tolerances& tol) {
    NullSplit s;
    s.cut = tol.null_rel * scale;
    double max_null = 0.0, min_kept = std::numeric_limits<double>::infinity();
    for (int i = 0; i < values.size(); ++i) {
        const double a = std::abs(values[i]);
        if (a <= s.cut) {
            s.null.push_back(i);
            max_null = std::max(max_null, a);
        } else {
            s.kept.push_back(i);
            min_kept = std::min(min_kept, a);
        }
    }
    // no null vectors: still flag a kept value hugging the cut
    if (s.null.empty()) s.reliable = min_kept >= tol.null_gap * s.cut || !std::isfinite(min_kept);
    else s.reliable = !std::isfinite(min_kept) || min_kept >= tol.null_gap * std::max(max_null, 1e-300);
    return s;
}

inline MatX select_columns(const MatX& a, const std::vector<int>& idx) {
    MatX out(a.rows(), static_cast<Eigen::Index>(idx.size()));
    for (std::size_t k = 0; k < idx.size(); ++k) out.col(static_cast<Eigen::Index>(k)) = a.col(idx[k]);
    return out;
}

} // namespace detail

// S1 = null space of T0 via the Hermitian eigendecomposition. The returned frame keeps the
// eigenvectors; eigenvalues classified as zero are stored as exact zeros.
struct S1Result {
    ProjectionSubspace S1;
    MatX frame;                  // eigenvectors of T0, unitary
    Eigen::VectorXd eigenvalues; // raw
    Eigen::VectorXd lambda;      // null ones set to 0
    std::vector<int> null_idx;
    MatX D0;                     // (T0 + S1)^-1
    double sigma_max = 0.0;
    double null_residual = 0.0;  // largest |eigenvalue| discarded
    double s1d0_defect = 0.0;    // max(||S1 D0 - S1||, ||D0 S1 - S1||)
};

inline S1Result compute_S1(const MatX& T0, const Tolerances& tol = {}) {
    if (T0.size() == 0) return {}; // no potential, nothing to split
    require((T0 - T0.adjoint()).cwiseAbs().maxCoeff() <= tol.hermitian * std::max(1.0, T0.cwiseAbs().maxCoeff()),
            ErrorKind::symmetry, "T0 is not Hermitian");
    S1Result r;
    Eigen::SelfAdjointEigenSolver<MatX> es(T0);
    r.eigenvalues = es.eigenvalues();
    r.frame = es.eigenvectors();
    r.sigma_max = r.eigenvalues.cwiseAbs().maxCoeff();
    auto split = detail::split_null(r.eigenvalues, r.sigma_max, tol);
    r.null_idx = split.null;
    r.lambda = r.eigenvalues;
    for (int i : split.null) {
        r.null_residual = std::max(r.null_residual, std::abs(r.lambda[i]));
        r.lambda[i] = 0.0;
    }
    r.S1.basis = detail::select_columns(r.frame, split.null);
    r.S1.rank = static_cast<int>(split.null.size());
    r.S1.tol = split.cut;
    r.S1.reliable = split.reliable;
    Eigen::VectorXd dinv(r.lambda.size());
    for (int i = 0; i < dinv.size(); ++i) dinv[i] = r.lambda[i] == 0.0 ? 1.0 : 1.0 / r.lambda[i];
    r.D0 = r.frame * dinv.cast<cd>().asDiagonal() * r.frame.adjoint();
    if (r.S1.rank > 0) {
        const MatX P = r.S1.projector();
        r.s1d0_defect = std::max((P * r.D0 - P).norm(), (r.D0 * P - P).norm());
    }
    return r;
}

// S2 = kernel of S1 T1 S1 on S1 L^2; Q = S1 - S2
struct S2Result {
    ProjectionSubspace S2, Q;
    MatX w2, wq;                  // coefficients in the S1 basis
    Eigen::VectorXd block_eigenvalues;
    double t1_scale = 0.0;
    double t1s2_min_eig = 0.0;    // smallest |eig| of S1 T1 S1 + S2 on S1 L^2
};

inline S2Result compute_S2(const ProjectionSubspace& S1, const MatX& T1, const Tolerances& tol = {}) {
    require(S1.rank > 0, ErrorKind::domain, "S2 needs a nonzero S1");
    S2Result r;
    MatX blk = S1.basis.adjoint() * T1 * S1.basis;
    blk = 0.5 * (blk + blk.adjoint()).eval();
    Eigen::SelfAdjointEigenSolver<MatX> es(blk);
    r.block_eigenvalues = es.eigenvalues();
    // scale by ||T1|| so the cut does not depend on how large S1 T1 S1 happens to be
    Eigen::SelfAdjointEigenSolver<MatX> full(T1, Eigen::EigenvaluesOnly);
    r.t1_scale = full.eigenvalues().cwiseAbs().maxCoeff();
    auto split = detail::split_null(r.block_eigenvalues, r.t1_scale, tol);
    r.w2 = detail::select_columns(es.eigenvectors(), split.null);
    r.wq = detail::select_columns(es.eigenvectors(), split.kept);
    r.S2.basis = S1.basis * r.w2;
    r.S2.rank = static_cast<int>(split.null.size());
    r.S2.tol = split.cut;
    r.S2.reliable = split.reliable && S1.reliable;
    r.Q.basis = S1.basis * r.wq;
    r.Q.rank = static_cast<int>(split.kept.size());
    r.Q.tol = split.cut;
    r.Q.reliable = r.S2.reliable;
    Eigen::VectorXd shifted = r.block_eigenvalues;
    for (int i : split.null) shifted[i] += 1.0;
    r.t1s2_min_eig = shifted.cwiseAbs().minCoeff();
    return r;
}

inline ResonanceKind kind_from_dims(int d1, int d2) {
    if (d1 == 0) return ResonanceKind::regular;
    if (d2 == 0) return ResonanceKind::first;
    if (d2 == d1) return ResonanceKind::second;
    return ResonanceKind::third;
}

struct ThresholdReport {
    bool regular = true;
    ResonanceKind kind = ResonanceKind::regular;
    int dim_S1 = 0, dim_S2 = 0, rank_Q = 0;
    std::vector<double> smallest_singular_values; // of T0, raw
    bool reliable = true;
    double sigma_max = 0.0;
    double null_residual = 0.0;
    double s1d0_defect = 0.0;
    double orthogonality = 0.0; // ||S2 v G1|| / ||v G1||
    double s2t2s2_max_eig = 0.0; // S2 T2 S2 must be definite
    double s2t2s2_min_abs_eig = 0.0;
    bool s2t2s2_definite = true;
};

// T0..T2 on one Birman-Schwinger space with the derived projections
struct ThresholdAnalysis {
    const BSSpace* space = nullptr;
    MatX T0, T1, T2;
    S1Result s1;
    S2Result s2;
    ThresholdReport report;

    int dim() const { return static_cast<int>(T0.rows()); }
    // the S2 block of T2 in S2-basis coordinates and its inverse D2
    MatX s2t2s2() const { return s2.S2.basis.adjoint() * T2 * s2.S2.basis; }
    MatX D2() const { return s2t2s2().inverse(); }
};

// ||S2 v G1||: the G1 kernel is constant, so v G1 acting on anything lies in the span of
// v(x_k) I_uc sqrt(w_k); compare the S2 component with the whole row space
inline double s2_vg1_defect(const BSSpace& s, const MatX& S2basis, const ExpansionCoefficients& c) {
    if (S2basis.cols() == 0) return 0.0;
    std::vector<Point> probe{Point(0.31, -0.17, 0.23, 0.41)};
    for (const Point& x : s.grid->nodes)
        if ((x - probe[0]).norm() == 0.0) probe[0] *= 1.1;
    MatX r = right_factor(s, KernelSpec::threshold(1, s.m, c), probe);
    const double whole = r.norm();
    return whole > 0.0 ? (S2basis.adjoint() * r).norm() / whole : 0.0;
}

inline ThresholdAnalysis analyze_threshold(const BSSpace& s, const Tolerances& tol = {},
                                           const ExpansionCoefficients& c = default_coefficients()) {
    ThresholdAnalysis a;
    a.space = &s;
    a.T0 = assemble_Tj(0, s, c).matrix;
    a.T1 = assemble_Tj(1, s, c).matrix;
    a.T2 = assemble_Tj(2, s, c).matrix;
    a.s1 = compute_S1(a.T0, tol);
    auto& rep = a.report;
    rep.dim_S1 = a.s1.S1.rank;
    rep.sigma_max = a.s1.sigma_max;
    rep.null_residual = a.s1.null_residual;
    rep.s1d0_defect = a.s1.s1d0_defect;
    rep.reliable = a.s1.S1.reliable;
    std::vector<double> sv(static_cast<std::size_t>(a.s1.eigenvalues.size()));
    for (int i = 0; i < a.s1.eigenvalues.size(); ++i) sv[static_cast<std::size_t>(i)] = std::abs(a.s1.eigenvalues[i]);
    std::sort(sv.begin(), sv.end());
    sv.resize(std::min<std::size_t>(sv.size(), 6));
    rep.smallest_singular_values = sv;
    if (rep.dim_S1 > 0) {
        a.s2 = compute_S2(a.s1.S1, a.T1, tol);
        rep.dim_S2 = a.s2.S2.rank;
        rep.rank_Q = a.s2.Q.rank;
        rep.reliable = rep.reliable && a.s2.S2.reliable;
        rep.orthogonality = s2_vg1_defect(s, a.s2.S2.basis, c);
        if (rep.dim_S2 > 0) {
            MatX b = a.s2t2s2();
            Eigen::SelfAdjointEigenSolver<MatX> es(0.5 * (b + b.adjoint()), Eigen::EigenvaluesOnly);
            const auto& ev = es.eigenvalues();
            rep.s2t2s2_max_eig = ev.maxCoeff();
            rep.s2t2s2_min_abs_eig = ev.cwiseAbs().minCoeff();
            rep.s2t2s2_definite = (ev.maxCoeff() < 0.0 || ev.minCoeff() > 0.0) &&
                                  rep.s2t2s2_min_abs_eig > tol.null_rel * ev.cwiseAbs().maxCoeff();
        }
    }
    rep.kind = kind_from_dims(rep.dim_S1, rep.dim_S2);
    rep.regular = rep.kind == ResonanceKind::regular;
    return a;
}

inline ThresholdReport classify_threshold(const BSSpace& s, const Tolerances& tol = {}) {
    return analyze_threshold(s, tol).report;
}

// ---------------------------------------------------------------- wavefunctions

// psi = -G0 v* phi at every grid node (4 rows per node), phi in Birman-Schwinger coordinates
inline MatX resonance_wavefunction(const BSSpace& s, const MatX& phi,
                                   const ExpansionCoefficients& c = default_coefficients()) {
    return -apply_kernel_nodes(s, KernelSpec::threshold(0, s.m, c), phi);
}

// psi at arbitrary points off the grid
inline MatX resonance_wavefunction_at(const BSSpace& s, const MatX& phi, const std::vector<Point>& pts,
                                      const ExpansionCoefficients& c = default_coefficients()) {
    return -left_factor(s, KernelSpec::threshold(0, s.m, c), pts) * phi;
}

struct WeakProbe {
    Point center;
    double width = 1.0;
    Vec4 spinor;
};

inline std::vector<WeakProbe> default_probes(int count, std::uint64_t seed, double spread = 1.5) {
    std::mt19937_64 g(seed);
    std::normal_distribution<double> n;
    std::vector<WeakProbe> out;
    for (int i = 0; i < count; ++i) {
        WeakProbe p;
        p.center = spread * Point(n(g), n(g), n(g), n(g)) / 2.0;
        for (int k = 0; k < 4; ++k) p.spinor[k] = cd(n(g), n(g));
        p.spinor.normalize();
        out.push_back(p);
    }
    return out;
}

// |<psi, (D_m + s V - m) g>| / (||psi||_loc ||g||) by quadrature on the grid, where the
// derivative falls on the Gaussian probe; ||psi||_loc is taken over |x - center| <= 3 width
inline double weak_residual(const QuadratureGrid& grid, const std::vector<PointFactorization>& pot, double m,
                            const VecX& psi, const WeakProbe& p) {
    const auto& d = detail::dirac_set();
    cd acc{0.0, 0.0};
    double npsi = 0.0, ng = 0.0;
    for (std::size_t k = 0; k < grid.size(); ++k) {
        const Point y = grid.nodes[k] - p.center;
        const double w = grid.weights[k];
        const double e = std::exp(-y.squaredNorm() / (2.0 * p.width * p.width));
        const Vec4 g = e * p.spinor;
        // -i alpha.grad g = i alpha.y / width^2 g
        Vec4 dg = (iu / (p.width * p.width)) * (alpha_dot(y) * g) + m * (d.beta * g) - m * g;
        const Mat4 V = pot[k].vstar * pot[k].U * pot[k].v;
        dg += kernel_sign * (V * g);
        const Vec4 pk = psi.segment(static_cast<Eigen::Index>(4 * k), 4);
        acc += w * pk.dot(dg);
        ng += w * g.squaredNorm();
        if (y.norm() <= 3.0 * p.width) npsi += w * pk.squaredNorm();
    }
    const double den = std::sqrt(npsi * ng);
    return den > 0.0 ? std::abs(acc) / den : 0.0;
}

// <T2 phi, phi> against -(1/2m) ||G0 v* phi||^2; returns |lhs / rhs - 1|
struct G2Identity {
    double lhs = 0.0, rhs = 0.0, rel = 0.0;
};

inline G2Identity g2_identity(const ThresholdAnalysis& a, const VecX& phi) {
    G2Identity out;
    out.lhs = phi.dot(a.T2 * phi).real();
    const MatX psi = resonance_wavefunction(*a.space, phi);
    double nrm = 0.0;
    const auto& g = *a.space->grid;
    for (std::size_t k = 0; k < g.size(); ++k) nrm += g.weights[k] * psi.block(static_cast<Eigen::Index>(4 * k), 0, 4, 1).squaredNorm();
    out.rhs = -nrm / (2.0 * a.space->m);
    out.rel = std::abs(out.lhs / out.rhs - 1.0);
    return out;
}

// ---------------------------------------------------------------- inverses

// frame coordinates: columns of the T0 eigenbasis
inline MatX to_frame(const S1Result& s1, const MatX& a) { return s1.frame.adjoint() * a * s1.frame; }
inline MatX from_frame(const S1Result& s1, const MatX& a) { return s1.frame * a * s1.frame.adjoint(); }

// block inverse of a (d1 x d1, S1-basis coordinates) w.r.t. S1 L^2 = Q L^2 + S2 L^2
inline MatX feshbach_invert(const MatX& a, const MatX& wq, const MatX& w2, double cond_max = 1e14) {
    const Eigen::Index q = wq.cols(), d2 = w2.cols();
    require(q + d2 == a.rows() && a.rows() == a.cols(), ErrorKind::domain, "Feshbach blocks do not tile S1");
    MatX P(a.rows(), a.cols());
    P << wq, w2;
    const MatX ab = P.adjoint() * a * P;
    MatX inv(a.rows(), a.cols());
    if (d2 == 0) {
        inv = ab.partialPivLu().inverse();
    } else {
        const MatX a22 = ab.bottomRightCorner(d2, d2);
        Eigen::JacobiSVD<MatX> sv(a22);
        const double cond = sv.singularValues()[0] / sv.singularValues()[d2 - 1];
        require(std::isfinite(cond) && cond < cond_max, ErrorKind::invariant,
                "S2 block of A is singular (cond " + std::to_string(cond) + ")");
        Eigen::PartialPivLU<MatX> lu22(a22);
        if (q == 0) {
            inv = lu22.inverse();
        } else {
            const MatX a11 = ab.topLeftCorner(q, q), a12 = ab.topRightCorner(q, d2), a21 = ab.bottomLeftCorner(d2, q);
            const MatX x21 = lu22.solve(a21);  // a22^-1 a21
            const MatX x12 = a12 * lu22.inverse(); // a12 a22^-1
            const MatX s = (a11 - a12 * x21).partialPivLu().inverse();
            inv.topLeftCorner(q, q) = s;
            inv.topRightCorner(q, d2) = -s * x12;
            inv.bottomLeftCorner(d2, q) = -x21 * s;
            inv.bottomRightCorner(d2, d2) = lu22.inverse() + x21 * s * x12;
        }
    }
    return P * inv * P.adjoint();
}

// A(z) = S1 (g1 T1 + z^2 T2) S1 in S1-basis coordinates
inline MatX a_operator(const ThresholdAnalysis& a, double z, Branch b,
                       const ExpansionCoefficients& c = default_coefficients()) {
    const MatX& S = a.s1.S1.basis;
    return c.g1(z, b) * (S.adjoint() * a.T1 * S) + z * z * (S.adjoint() * a.T2 * S);
}

struct JNResult {
    MatX inverse;        // frame coordinates
    MatX B;              // S1-basis coordinates
    double cond_B = 0.0;
};

// Jensen-Nenciu: M^-1 = (M + S1)^-1 + (M + S1)^-1 S1 B^-1 S1 (M + S1)^-1 with
// B = S1 - S1 (M + S1)^-1 S1 = S1 dM (M + S1)^-1 S1 (since (T0 + S1) S1 = S1 exactly in the frame)
inline JNResult jensen_nenciu_inverse(const ThresholdAnalysis& a, const MatX& dM_frame) {
    require(a.s1.S1.rank > 0, ErrorKind::domain, "Jensen-Nenciu needs a nonzero S1");
    const S1Result& s1 = a.s1;
    const Eigen::Index n = dM_frame.rows(), d1 = static_cast<Eigen::Index>(s1.null_idx.size());
    MatX A = dM_frame;
    for (Eigen::Index i = 0; i < n; ++i) A(i, i) += s1.lambda[i];
    MatX Phi = MatX::Zero(n, d1);
    for (Eigen::Index k = 0; k < d1; ++k) {
        A(s1.null_idx[static_cast<std::size_t>(k)], s1.null_idx[static_cast<std::size_t>(k)]) += 1.0;
        Phi(s1.null_idx[static_cast<std::size_t>(k)], k) = 1.0;
    }
    Eigen::PartialPivLU<MatX> lu(A);
    const MatX X = lu.solve(Phi);
    const MatX Y = lu.adjoint().solve(Phi); // (M + S1)^-* Phi
    JNResult r;
    r.B = Phi.adjoint() * dM_frame * X;
    Eigen::JacobiSVD<MatX> sv(r.B);
    r.cond_B = sv.singularValues()[0] / sv.singularValues()[d1 - 1];
    require(std::isfinite(r.cond_B) && r.cond_B < 1e14, ErrorKind::conditioning,
            "B(z) singular, cond = " + std::to_string(r.cond_B));
    const MatX Binv = feshbach_invert(r.B, a.s2.wq, a.s2.w2);
    r.inverse = lu.inverse() + X * Binv * Y.adjoint();
    return r;
}

// dense inverse of M in the frame: Lambda + dM'
inline MatX frame_direct_inverse(const ThresholdAnalysis& a, const MatX& dM_frame) {
    MatX A = dM_frame;
    for (Eigen::Index i = 0; i < A.rows(); ++i) A(i, i) += a.s1.lambda[i];
    return A.partialPivLu().inverse();
}

// regular threshold: M^-1 = D0 - g1 D0 T1 D0 - z^2 D0 T2 D0 + O(z^4 log^2 z)
struct RegularExpansion {
    MatX D0, D0T1D0, D0T2D0;
    ExpansionCoefficients coef;

    MatX evaluate(double z, Branch b) const { return D0 - coef.g1(z, b) * D0T1D0 - (z * z) * D0T2D0; }
    // M^-1 - evaluate(z) computed as D0 (g1 T1 D0 + z^2 T2 D0 - dM M^-1) without cancellation
    MatX remainder(const ThresholdAnalysis& a, const MatX& dM, double z, Branch b) const {
        MatX M = a.T0 + dM;
        const MatX Minv = M.partialPivLu().inverse();
        return D0 * (coef.g1(z, b) * (a.T1 * D0) + (z * z) * (a.T2 * D0) - dM * Minv);
    }
};

inline RegularExpansion invert_regular(const ThresholdAnalysis& a,
                                       const ExpansionCoefficients& c = default_coefficients()) {
    require(a.report.regular, ErrorKind::classification, "regular expansion needs a regular threshold");
    RegularExpansion r;
    r.D0 = a.s1.D0;
    r.D0T1D0 = r.D0 * a.T1 * r.D0;
    r.D0T2D0 = r.D0 * a.T2 * r.D0;
    r.coef = c;
    return r;
}

// P_m = -(1/2m) G0 V G0 V G0 v* S2 D2 S2 v G0 V G0 V G0 on grid functions; returned through its
// range factor Psi (4N x d2, rows scaled by sqrt(w)) and middle matrix X: P_m = Psi X Psi*
struct Eigenprojection {
    MatX psi;    // sqrt(w) (G0 V G0 V G0 v* S2 basis) at the nodes
    MatX middle; // -(1/2m) D2
    int rank = 0;
    double idempotence = 0.0;    // ||P^2 - P|| / ||P||
    double selfadjointness = 0.0; // ||P - P*|| / ||P||
};

inline Eigenprojection eigenprojection_Pm(const ThresholdAnalysis& a,
                                          const ExpansionCoefficients& c = default_coefficients()) {
    require(a.report.dim_S2 > 0, ErrorKind::classification, "no threshold eigenvalue: S2 = 0");
    const BSSpace& s = *a.space;
    const auto ker = KernelSpec::threshold(0, s.m, c);
    const auto& g = *s.grid;
    // G0 V f = G0 v* (U v f); in BS coordinates U v f at node k is u_k vs_k f(x_k)
    auto vrow = [&](const MatX& f) {
        MatX y(s.dim, f.cols());
        for (const BSBlock& b : s.blocks)
            y.middleRows(b.offset, b.rank) = b.u.cast<cd>().asDiagonal() * (b.vs * f.middleRows(4 * b.node, 4));
        return y;
    };
    MatX f = apply_kernel_nodes(s, ker, a.s2.S2.basis);
    for (int it = 0; it < 2; ++it) f = apply_kernel_nodes(s, ker, vrow(f));
    Eigenprojection p;
    p.psi = f;
    for (std::size_t k = 0; k < g.size(); ++k) p.psi.middleRows(static_cast<Eigen::Index>(4 * k), 4) *= std::sqrt(g.weights[k]);
    p.middle = -a.D2() / (2.0 * s.m);
    // norms through a thin QR of psi: P = Qr (R X R*) Qr*
    Eigen::HouseholderQR<MatX> qr(p.psi);
    const Eigen::Index d2 = p.psi.cols();
    const MatX R = qr.matrixQR().topRows(d2).triangularView<Eigen::Upper>();
    const MatX X = R * p.middle * R.adjoint();
    Eigen::JacobiSVD<MatX> sv(X);
    const double nrm = sv.singularValues()[0];
    p.rank = 0;
    for (Eigen::Index i = 0; i < d2; ++i) p.rank += sv.singularValues()[i] > 1e-8 * nrm;
    p.idempotence = operator_norm(X * X - X) / nrm;
    p.selfadjointness = operator_norm(X - X.adjoint()) / nrm;
    return p;
}

// ---------------------------------------------------------------- coupling scan

struct Crossing {
    double c = 0.0;
    int multiplicity = 1;
    bool bracketed = false; // inertia of T0 changes across [c (1 - 1e-8), c (1 + 1e-8)]
};

struct CouplingScan {
    std::vector<Crossing> crossings;
    std::vector<double> c_samples, sigma_min;
    bool hermitian_pencil = true;
};

namespace detail {

inline int negative_count(const MatX& T) {
    Eigen::SelfAdjointEigenSolver<MatX> es(T, Eigen::EigenvaluesOnly);
    return static_cast<int>((es.eigenvalues().array() < 0.0).count());
}

} // namespace detail

// T0(c) = sign(c) U + |c| F with F = v G0 v* at unit coupling, so T0(c) phi = 0 iff
// U F phi = mu phi with c = -1/mu (both signs of c)
inline CouplingScan coupling_scan(const PotentialSpec& family, const QuadratureGrid& grid, double m, double c_lo,
                                  double c_hi, int samples = 41, DiagonalRule rule = DiagonalRule::subtraction,
                                  bool verify = true) {
    require(c_hi > c_lo, ErrorKind::domain, "empty coupling range");
    const auto pot = sample_potential(family.with_amplitude(1.0), grid);
    const BSSpace s = make_bs_space(grid, pot, m, rule);
    CouplingScan out;
    if (s.dim == 0) return out;
    const Eigen::VectorXd u = s.U();
    MatX F = assemble_Tj(0, s).matrix;
    F.diagonal() -= u.cast<cd>();
    std::vector<double> mus;
    const bool plus = (u.array() == 1.0).all(), minus = (u.array() == -1.0).all();
    out.hermitian_pencil = plus || minus;
    Eigen::VectorXd fev;
    if (out.hermitian_pencil) {
        Eigen::SelfAdjointEigenSolver<MatX> es(F, Eigen::EigenvaluesOnly);
        fev = es.eigenvalues();
        for (int i = 0; i < fev.size(); ++i) mus.push_back(plus ? fev[i] : -fev[i]);
    } else {
        Eigen::ComplexEigenSolver<MatX> es(u.cast<cd>().asDiagonal() * F, false);
        for (int i = 0; i < es.eigenvalues().size(); ++i) {
            const cd mu = es.eigenvalues()[i];
            if (std::abs(mu.imag()) <= 1e-10 * std::abs(mu)) mus.push_back(mu.real());
        }
    }
    std::vector<double> cs;
    for (double mu : mus) {
        if (mu == 0.0) continue;
        const double c = -1.0 / mu;
        if (c >= c_lo && c <= c_hi) cs.push_back(c);
    }
    std::sort(cs.begin(), cs.end());
    for (double c : cs) {
        if (!out.crossings.empty() && std::abs(c - out.crossings.back().c) <= 1e-9 * std::abs(c)) {
            ++out.crossings.back().multiplicity;
            continue;
        }
        out.crossings.push_back({c, 1, false});
    }
    auto t0_at = [&](double c) {
        MatX T = std::abs(c) * F;
        T.diagonal() += (c >= 0.0 ? 1.0 : -1.0) * u.cast<cd>();
        return T;
    };
    if (verify)
        for (auto& x : out.crossings) {
            const int lo = detail::negative_count(t0_at(x.c * (1.0 - 1e-8)));
            const int hi = detail::negative_count(t0_at(x.c * (1.0 + 1e-8)));
            x.bracketed = std::abs(hi - lo) == x.multiplicity;
        }
    for (int i = 0; i < samples; ++i) {
        const double c = c_lo + (c_hi - c_lo) * (samples > 1 ? double(i) / (samples - 1) : 0.0);
        double smin;
        if (out.hermitian_pencil) {
            const double sg = (c >= 0.0 ? 1.0 : -1.0) * (plus ? 1.0 : -1.0);
            smin = (sg + std::abs(c) * fev.array()).abs().minCoeff();
        } else {
            Eigen::SelfAdjointEigenSolver<MatX> es(t0_at(c), Eigen::EigenvaluesOnly);
            smin = es.eigenvalues().cwiseAbs().minCoeff();
        }
        out.c_samples.push_back(c);
        out.sigma_min.push_back(smin);
    }
    return out;
}

// smallest |eigenvalue| of T0 for one potential
inline double sigma_min_T0(const BSSpace& s) {
    Eigen::SelfAdjointEigenSolver<MatX> es(assemble_Tj(0, s).matrix, Eigen::EigenvaluesOnly);
    return es.eigenvalues().cwiseAbs().minCoeff();
}

} // namespace dirac4d
