#include <algorithm>
#include <cmath>
#include <memory>

#include <gsl/gsl_integration.h>
#include <gtest/gtest.h>

#include <dirac4d/stone_propagator.hpp>

#include "slope.hpp"

using namespace dirac4d;

namespace {

constexpr double kR = 15.0;

struct Case {
    QuadratureGrid grid;
    std::vector<PointFactorization> pot;
    BSSpace space;
    ThresholdAnalysis a;
};

std::unique_ptr<Case> make_case(int N, const PotentialSpec& spec) {
    auto c = std::make_unique<Case>();
    c->grid = build_grid(GridGenerator::tensor_gauss_radial, N, kR, 1);
    c->pot = sample_potential(spec, c->grid);
    c->space = make_bs_space(c->grid, c->pot, 1.0);
    c->a = analyze_threshold(c->space);
    return c;
}

const Case& regular_case() {
    static auto c = make_case(96, scalar_potential(1.0));
    return *c;
}

const CouplingScan& scan384() {
    static CouplingScan s = [] {
        auto g = build_grid(GridGenerator::tensor_gauss_radial, 384, kR, 1);
        return coupling_scan(upper_channel_potential(1.0), g, 1.0, -5.0, 30.0, 71);
    }();
    return s;
}

const Case& first_case() {
    static auto c = make_case(384, upper_channel_potential(scan384().crossings.at(0).c));
    return *c;
}

const Case& second_case() {
    static auto c = make_case(384, upper_channel_potential(scan384().crossings.at(1).c));
    return *c;
}

const std::vector<SamplePair>& pairs12() {
    static auto p = sample_pairs(12, 3);
    return p;
}

const PerturbedAmplitudes& regular_amps() {
    static PerturbedAmplitudes a = [] {
        PerturbedOptions o;
        o.born_max = 6;
        return perturbed_amplitudes(regular_case().space, pairs12(), EnergyWindow::low(0.5), o, &regular_case().a);
    }();
    return a;
}

const PerturbedAmplitudes& first_amps() {
    static PerturbedAmplitudes a = [] {
        PerturbedOptions o;
        o.inverter = Inverter::jensen_nenciu;
        o.ft = true;
        return perturbed_amplitudes(first_case().space, pairs12(), EnergyWindow::low(0.5, 1e-8), o, &first_case().a);
    }();
    return a;
}

const PerturbedAmplitudes& second_amps() {
    static PerturbedAmplitudes a = [] {
        PerturbedOptions o;
        o.inverter = Inverter::jensen_nenciu;
        return perturbed_amplitudes(second_case().space, pairs12(), EnergyWindow::low(0.5, 1e-5), o, &second_case().a);
    }();
    return a;
}

std::vector<double> log_times(double lo, double hi, int n) {
    std::vector<double> t;
    for (int i = 0; i < n; ++i) t.push_back(lo * std::pow(hi / lo, double(i) / (n - 1)));
    return t;
}

double rel(const Mat4& a, const Mat4& b) { return max_abs_entry(a - b) / max_abs_entry(b); }

} // namespace

// ---------------------------------------------------------------- integrator

TEST(OscillatoryIntegral, ZeroAmplitudeGivesZero) {
    const auto w = EnergyWindow::low(0.5);
    const cd v = oscillatory_integral([](double) { return cd(0.0); }, 10.0, 1.0, w, 1.0);
    EXPECT_EQ(std::abs(v), 0.0);
}

TEST(OscillatoryIntegral, TimeZeroMatchesAdaptiveReference) {
    for (const EnergyWindow& w : {EnergyWindow::low(0.5, 1e-6), EnergyWindow::dyadic(2)}) {
        const cd v = oscillatory_integral([](double) { return cd(1.0); }, 0.0, 0.0, w, 1.0);
        gsl_integration_workspace* ws = gsl_integration_workspace_alloc(1000);
        gsl_function f;
        f.function = [](double z, void* p) { return static_cast<const EnergyWindow*>(p)->weight(z); };
        f.params = const_cast<EnergyWindow*>(&w);
        double ref = 0.0, err = 0.0;
        gsl_integration_qags(&f, w.lo(), w.hi(), 0.0, 1e-13, 1000, ws, &ref, &err);
        gsl_integration_workspace_free(ws);
        EXPECT_NEAR(v.real(), ref, 1e-10 * ref);
        EXPECT_EQ(v.imag(), 0.0);
    }
}

TEST(OscillatoryIntegral, SampledAgreesWithCallable) {
    const auto w = EnergyWindow::low(0.5, 1e-6);
    const auto pr = sample_pairs(40, 1);
    const auto g = make_z_grid(w, 52.0);
    for (double t : {1.0, 100.0, 1000.0}) {
        double err = 0.0, mx = 0.0;
        for (const auto& p : pr) {
            std::vector<Mat4> s;
            for (double z : g.nodes) s.push_back(free_amplitude(z, p.x - p.y, 1.0));
            const Mat4 a = oscillatory_integral(g, s, t, p.r, w, 1.0), b = free_kernel(t, p.x, p.y, 1.0, w);
            err = std::max(err, max_abs_entry(a - b));
            mx = std::max(mx, max_abs_entry(b));
        }
        EXPECT_LT(err, 1e-8 * mx) << "t=" << t;
    }
}

TEST(OscillatoryIntegral, UnderResolvedSamplesRaiseResolutionError) {
    const auto w = EnergyWindow::low(0.5);
    const auto g = make_z_grid(w, 1.0);
    std::vector<cd> a(static_cast<std::size_t>(g.size()), cd(1.0));
    try {
        oscillatory_integral(g, a, 1.0, 500.0, w, 1.0);
        FAIL() << "expected a resolution error";
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::resolution);
        EXPECT_NE(std::string(e.what()).find("nodes"), std::string::npos);
    }
    EXPECT_NO_THROW(oscillatory_integral(g, a, 1.0, 1.0, w, 1.0));
}

// a(z) = z chi_j(z) chi~(zr) (1+zr)^-1/2 against the combined phases lambda -+ zr/t
TEST(OscillatoryIntegral, StationaryPhaseScaleHasOneConstant) {
    double cmax = 0.0;
    for (int j = 1; j <= 4; ++j)
        for (double r : {1.0, 10.0, 100.0})
            for (double t : {1.0, 10.0, 100.0, 1000.0})
                for (double s : {1.0, -1.0}) {
                    const auto w = EnergyWindow::dyadic(j);
                    auto amp = [&](double z) {
                        const double hi = 1.0 - smooth_cutoff(z * r);
                        return cd(z * hi / std::sqrt(1.0 + z * r)) * std::exp(s * iu * z * r);
                    };
                    const double v = std::abs(oscillatory_integral(amp, t, r, w, 1.0));
                    const double b = std::min({std::ldexp(1.0, 2 * j), std::pow(2.0, 1.5 * j) / std::sqrt(t),
                                               std::ldexp(1.0, 2 * j) / t});
                    cmax = std::max(cmax, v / b);
                }
    EXPECT_GT(cmax, 0.0);
    EXPECT_LT(cmax, 4.0);
}

// ---------------------------------------------------------------- free kernel

TEST(FreeKernel, MatchesFourierSideOracle) {
    const auto w = EnergyWindow::low(0.5, 1e-6);
    const Point dir = Point(0.3, -0.5, 0.7, 0.2).normalized();
    for (double t : {1.0, 10.0, 100.0})
        for (double r : {0.5, 2.0, 10.0}) {
            const Point d = r * dir;
            EXPECT_LT(rel(free_kernel(t, d, Point::Zero(), 1.0, w), fourier_side_oracle(t, d, 1.0, w)), 1e-6)
                << "t=" << t << " r=" << r;
        }
}

TEST(FreeKernel, TimeZeroMatchesOracle) {
    const auto w = EnergyWindow::low(0.5, 1e-6);
    for (double r : {0.1, 1.0, 5.0}) {
        const Point d(r, 0.0, 0.0, 0.0);
        EXPECT_LT(rel(free_kernel(0.0, d, Point::Zero(), 1.0, w), fourier_side_oracle(0.0, d, 1.0, w)), 1e-10);
    }
}

TEST(FreeKernel, TimeReversalAdjoint) {
    const auto w = EnergyWindow::low(0.5);
    for (const auto& p : sample_pairs(10, 5))
        for (double t : {0.7, 13.0, 420.0}) {
            const Mat4 a = free_kernel(t, p.x, p.y, 1.0, w), b = free_kernel(-t, p.y, p.x, 1.0, w).adjoint();
            EXPECT_LT(max_abs_entry(a - b), 1e-8 * std::max(1e-12, max_abs_entry(a)));
        }
}

TEST(FreeKernel, AdditiveOverWindows) {
    // chi(z/4) = chi(z) + chi_0(z) + chi_1(z)
    const auto big = EnergyWindow::low(4.0, 1e-4), small = EnergyWindow::low(1.0, 1e-4);
    // errors measured against the largest t = 0 entry over the pairs
    double scale = 0.0;
    for (const auto& p : sample_pairs(6, 9)) scale = std::max(scale, max_abs_entry(free_kernel(0.0, p.x, p.y, 1.0, big)));
    for (const auto& p : sample_pairs(6, 9)) {
        for (double t : {0.0, 3.0, 30.0}) {
            const Mat4 sum = free_kernel(t, p.x, p.y, 1.0, small) + free_kernel(t, p.x, p.y, 1.0, EnergyWindow::dyadic(0)) +
                             free_kernel(t, p.x, p.y, 1.0, EnergyWindow::dyadic(1));
            EXPECT_LT(max_abs_entry(sum - free_kernel(t, p.x, p.y, 1.0, big)), 1e-12 * scale);
        }
    }
}

TEST(FreeKernel, MassScaling) {
    // K_{km}(t/k, d/k; window k z1) = k^4 K_m(t, d; z1)
    const double k = 2.0;
    for (const auto& p : sample_pairs(6, 11))
        for (double t : {1.0, 20.0}) {
            const Point d = p.x - p.y;
            const Mat4 a = free_kernel(t / k, d / k, Point::Zero(), k, EnergyWindow::low(0.5 * k, 1e-6 * k));
            const Mat4 b = free_kernel(t, d, Point::Zero(), 1.0, EnergyWindow::low(0.5, 1e-6));
            EXPECT_LT(rel(a, std::pow(k, 4) * b), 1e-9);
        }
}

TEST(FreeKernel, LowWindowDecay) {
    const auto w = EnergyWindow::low(0.5);
    const auto pr = sample_pairs(40, 1);
    std::vector<double> ts = log_times(10.0, 1000.0, 13), sup;
    for (double t : ts) {
        double mx = 0.0;
        for (const auto& p : pr) mx = std::max(mx, max_abs_entry(free_kernel(t, p.x, p.y, 1.0, w)));
        sup.push_back(mx);
    }
    EXPECT_NEAR(testing_util::loglog_slope(ts, sup), -2.0, 0.25);
}

TEST(FreeJump, MatchesResolventBoundaryValues) {
    for (double z : {1e-3, 0.2, 3.0})
        for (const auto& p : sample_pairs(5, 2)) {
            const Mat4 rp = dirac_kernel(z, p.x, p.y, 1.0, Branch::plus);
            const Mat4 d = rp - dirac_kernel(z, p.x, p.y, 1.0, Branch::minus);
            // the reference difference carries rounding of order eps |R+|
            EXPECT_LT(max_abs_entry(free_jump(z, p.x - p.y, 1.0) - d), 1e-10 * max_abs_entry(d) + 1e-14 * max_abs_entry(rp));
        }
}

TEST(FreeJump, ScalarPartIsRealBeforePhase) {
    // (1/2 pi i)(R+ - R-) for the Schrodinger part is s z J1(zr) / (8 pi^2 r)
    for (double z : {0.01, 0.3, 2.0})
        for (double r : {0.05, 1.0, 30.0}) {
            const Mat4 j = free_jump(z, Point(0.0, r, 0.0, 0.0), 1.0);
            const cd scal = j(0, 0) / (1.0 + spectral_lambda(z, 1.0)) / (2.0 * pi * iu);
            const double ref = kernel_sign * z * gsl_sf_bessel_J1(z * r) / (8.0 * pi * pi * r);
            EXPECT_LT(std::abs(scal.imag()), 1e-14 * std::abs(ref) + 1e-300);
            EXPECT_NEAR(scal.real(), ref, 1e-12 * std::abs(ref));
        }
}

// ---------------------------------------------------------------- pairs

TEST(SamplePairs, DeterministicAndLogSpaced) {
    const auto a = sample_pairs(40, 7), b = sample_pairs(40, 7);
    ASSERT_EQ(a.size(), 40u);
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].x, b[i].x);
        EXPECT_NEAR((a[i].x - a[i].y).norm(), a[i].r, 1e-12);
        EXPECT_LE(a[i].x.norm(), 1.0);
    }
    EXPECT_NEAR(a.front().r, 0.1, 1e-15);
    EXPECT_NEAR(a.back().r, 50.0, 1e-12);
    EXPECT_NEAR(a[1].r / a[0].r, a[2].r / a[1].r, 1e-12);
}

// ---------------------------------------------------------------- perturbed, regular

TEST(Born, ZeroCouplingVanishes) {
    auto c = make_case(96, scalar_potential(0.0));
    const auto& p = pairs12()[4];
    EXPECT_EQ(max_abs_entry(born_kernel(1, 5.0, p.x, p.y, c->space, EnergyWindow::low(0.5))), 0.0);
}

TEST(Born, FirstOrderIsLinearInCoupling) {
    auto a = make_case(96, scalar_potential(0.1)), b = make_case(96, scalar_potential(0.2));
    const auto w = EnergyWindow::low(0.5);
    for (int i : {0, 5, 11}) {
        const auto& p = pairs12()[static_cast<std::size_t>(i)];
        const Mat4 ka = born_kernel(1, 20.0, p.x, p.y, a->space, w), kb = born_kernel(1, 20.0, p.x, p.y, b->space, w);
        EXPECT_LT(rel(kb, 2.0 * ka), 1e-12);
        EXPECT_LT(max_abs_entry(ka), max_abs_entry(free_kernel(20.0, p.x, p.y, 1.0, w)));
    }
}

TEST(Born, FirstOrderDecay) {
    const auto& a = regular_amps();
    std::vector<double> ts = log_times(10.0, 300.0, 11), sup;
    for (double t : ts) sup.push_back(sup_entry(stone_kernels(a, t).born[0]));
    EXPECT_NEAR(testing_util::loglog_slope(ts, sup), -2.0, 0.3);
}

TEST(Born, SeriesTermsShrinkAtSmallCoupling) {
    const auto k = stone_kernels(regular_amps(), 30.0);
    for (std::size_t j = 1; j < k.born.size(); ++j) EXPECT_LT(sup_entry(k.born[j]), sup_entry(k.born[j - 1]));
    EXPECT_LT(sup_entry(k.tail), sup_entry(k.born[5]));
}

// the tail left over after six Born orders is -L (U K)^3 M^-1 (K U)^3 R, jump taken densely
TEST(Perturbed, DecompositionMatchesSymmetricTail) {
    const auto& c = regular_case();
    const auto& a = regular_amps();
    const BSSpace& s = c.space;
    std::vector<Point> xs, ys;
    for (const auto& p : a.pairs) {
        xs.push_back(p.x);
        ys.push_back(p.y);
    }
    const MatX Ud = s.U().cast<cd>().asDiagonal();
    for (int iz : {0, a.zgrid.size() / 2, a.zgrid.size() - 1}) {
        const double z = a.zgrid.nodes[static_cast<std::size_t>(iz)];
        Mat4 tail_jump[12];
        for (Branch b : {Branch::plus, Branch::minus}) {
            const auto ker = KernelSpec::resolvent(z, b, 1.0);
            const MatX L = left_factor(s, ker, xs), R = right_factor(s, ker, ys);
            const MatX M = assemble_M(z, b, s).matrix;
            const MatX K = M - Ud;
            MatX UK3 = Ud * K;
            UK3 = (UK3 * UK3 * UK3).eval();
            MatX KU3 = K * Ud;
            KU3 = (KU3 * KU3 * KU3).eval();
            const MatX T = -(L * UK3) * M.partialPivLu().solve(KU3 * R);
            for (int p = 0; p < 12; ++p) {
                const Mat4 blk = T.block(4 * p, 4 * p, 4, 4);
                tail_jump[p] = (b == Branch::plus) ? Mat4(blk) : Mat4(tail_jump[p] - blk);
            }
        }
        const cd pre = (iu / (2.0 * pi)) * (z / spectral_lambda(z, 1.0));
        for (int p = 0; p < 12; ++p) {
            const auto pp = static_cast<std::size_t>(p);
            Mat4 rest = a.full[pp][static_cast<std::size_t>(iz)] - a.free[pp][static_cast<std::size_t>(iz)];
            for (const auto& b : a.born) rest -= b[pp][static_cast<std::size_t>(iz)];
            const double scale = max_abs_entry(a.full[pp][static_cast<std::size_t>(iz)]);
            EXPECT_LT(max_abs_entry(rest - pre * tail_jump[p]), 1e-9 * scale) << "z=" << z << " pair " << p;
        }
    }
}

TEST(Perturbed, DirectAndExpansionInvertersAgreeAtSmallZ) {
    const auto& c = regular_case();
    PerturbedOptions o;
    o.inverter = Inverter::regular_expansion;
    const auto b = perturbed_amplitudes(c.space, pairs12(), EnergyWindow::low(0.5), o, &c.a);
    const auto& a = regular_amps();
    int checked = 0;
    for (int iz = 0; iz < a.zgrid.size(); ++iz) {
        if (a.zgrid.nodes[static_cast<std::size_t>(iz)] > 1e-2) continue;
        double err = 0.0, mx = 0.0;
        for (std::size_t p = 0; p < a.pairs.size(); ++p) {
            const Mat4 da = a.full[p][static_cast<std::size_t>(iz)] - a.free[p][static_cast<std::size_t>(iz)];
            const Mat4 db = b.full[p][static_cast<std::size_t>(iz)] - b.free[p][static_cast<std::size_t>(iz)];
            err = std::max(err, max_abs_entry(da - db));
            mx = std::max(mx, max_abs_entry(da));
        }
        EXPECT_LT(err, 1e-6 * mx);
        ++checked;
    }
    EXPECT_GE(checked, 12);
}

TEST(Perturbed, RegularFullLowDecay) {
    const auto& a = regular_amps();
    std::vector<double> ts = log_times(10.0, 300.0, 11), sup;
    for (double t : ts) sup.push_back(sup_entry(stone_kernels(a, t).full));
    EXPECT_NEAR(testing_util::loglog_slope(ts, sup), -2.0, 0.3);
}

TEST(Perturbed, InverterNeedsMatchingThreshold) {
    PerturbedOptions o;
    o.inverter = Inverter::regular_expansion;
    EXPECT_THROW(perturbed_amplitudes(first_case().space, pairs12(), EnergyWindow::low(0.5), o, &first_case().a), Error);
    o.inverter = Inverter::jensen_nenciu;
    EXPECT_THROW(perturbed_amplitudes(regular_case().space, pairs12(), EnergyWindow::low(0.5), o, &regular_case().a), Error);
    o.ft = true;
    try {
        perturbed_amplitudes(second_case().space, pairs12(), EnergyWindow::low(0.5), o, &second_case().a);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.kind(), ErrorKind::classification);
    }
    EXPECT_THROW(Ft_operator(second_amps(), 10.0), Error);
}

// ---------------------------------------------------------------- non-regular

TEST(NonRegular, JensenNenciuMatchesDirectAwayFromThreshold) {
    const auto& c = first_case();
    PerturbedOptions o;
    o.inverter = Inverter::direct;
    const auto w = EnergyWindow::low(0.5, 1e-3);
    const auto d = perturbed_amplitudes(c.space, pairs12(), w, o, &c.a);
    o.inverter = Inverter::jensen_nenciu;
    const auto j = perturbed_amplitudes(c.space, pairs12(), w, o, &c.a);
    for (int iz = 0; iz < d.zgrid.size(); iz += 5) {
        double err = 0.0, mx = 0.0;
        for (std::size_t p = 0; p < d.pairs.size(); ++p) {
            err = std::max(err, max_abs_entry(d.full[p][static_cast<std::size_t>(iz)] - j.full[p][static_cast<std::size_t>(iz)]));
            mx = std::max(mx, max_abs_entry(d.full[p][static_cast<std::size_t>(iz)]));
        }
        EXPECT_LT(err, 1e-6 * mx) << "z=" << d.zgrid.nodes[static_cast<std::size_t>(iz)];
    }
}

TEST(NonRegular, ResonanceFactorIdentity) {
    // (G0 V)^3 G0 v* Phi = -G0 v* Phi on ker T0
    const auto& c = first_case();
    std::vector<Point> xs;
    for (const auto& p : pairs12()) xs.push_back(p.x);
    const MatX L0 = left_factor(c.space, KernelSpec::threshold(0, 1.0), xs);
    const MatX Ud = c.space.U().cast<cd>().asDiagonal();
    const MatX UK = Ud * (c.a.T0 - Ud);
    const MatX Phi = c.a.s1.S1.basis;
    const MatX lhs = L0 * (UK * (UK * (UK * Phi)));
    EXPECT_LT((lhs + L0 * Phi).norm(), 1e-9 * (L0 * Phi).norm());
}

TEST(NonRegular, ThresholdTailClosedForm) {
    const auto c = default_coefficients();
    for (double zmin : {1e-8, 1e-5, 1e-3}) {
        // int_{-inf}^{ln zmin} -2 Im b1 / |a1 u + b1|^2 du, numerically
        gsl_integration_workspace* ws = gsl_integration_workspace_alloc(1000);
        gsl_function f;
        f.function = [](double u, void* p) {
            const auto* e = static_cast<const ExpansionCoefficients*>(p);
            const cd g = e->a1 * u + e->b1;
            return -2.0 * e->b1.imag() / std::norm(g);
        };
        f.params = const_cast<ExpansionCoefficients*>(&c);
        double ref = 0.0, err = 0.0;
        gsl_integration_qagil(&f, std::log(zmin), 0.0, 1e-13, 1000, ws, &ref, &err);
        gsl_integration_workspace_free(ws);
        EXPECT_NEAR(detail::g1_tail_integral(c, zmin), ref, 1e-10 * std::abs(ref));
    }
}

TEST(NonRegular, KindFirstFtRankAndLogBand) {
    const auto& a = first_amps();
    std::vector<double> band;
    for (double t : log_times(10.0, 1e4, 7)) {
        const FtOperator f = Ft_operator(a, t);
        EXPECT_EQ(f.rank, 1);
        EXPECT_LE(f.rank, 2 * first_case().a.report.rank_Q);
        band.push_back(f.proxy() * std::log(t));
    }
    const auto [lo, hi] = std::minmax_element(band.begin(), band.end());
    EXPECT_GT(*lo, 0.0);
    EXPECT_LT(*hi / *lo, 3.0);
}

TEST(NonRegular, KindFirstResidualDecay) {
    const auto& a = first_amps();
    std::vector<double> ts = log_times(10.0, 1e4, 10), sup;
    for (double t : ts) sup.push_back(sup_entry(stone_kernels(a, t).residual));
    EXPECT_NEAR(testing_util::loglog_slope(ts, sup), -1.0, 0.3);
}

TEST(NonRegular, KindSecondDecayWithoutFt) {
    const auto& a = second_amps();
    std::vector<double> ts = log_times(10.0, 1e4, 10), sup;
    for (double t : ts) {
        const auto k = stone_kernels(a, t);
        EXPECT_TRUE(k.ft.empty());
        sup.push_back(sup_entry(k.residual));
    }
    EXPECT_NEAR(testing_util::loglog_slope(ts, sup), -1.0, 0.3);
}

TEST(NonRegular, NearThresholdScaleIsRecorded) {
    // kind second: z^2 ||M^-1|| tends to a constant; kind first: like 1/|a1 log z + b1|
    const auto& s = second_amps();
    EXPECT_NEAR(s.z2_minv_norm[0] / s.z2_minv_norm[12], 1.0, 0.1);
    const auto& f = first_amps();
    const double z0 = f.zgrid.nodes[0], z1 = f.zgrid.nodes[60];
    const auto c = default_coefficients();
    const double expect = std::abs(c.a1 * std::log(z1) + c.b1) / std::abs(c.a1 * std::log(z0) + c.b1);
    EXPECT_NEAR(f.z2_minv_norm[0] / f.z2_minv_norm[60] / expect, 1.0, 0.1);
}

// ---------------------------------------------------------------- dyadic

TEST(Dyadic, FreeBoundRatiosStayBelowOne) {
    for (int j = 1; j <= 3; ++j)
        for (double t : {1.0, 10.0, 100.0}) {
            double mx = 0.0;
            for (const auto& p : sample_pairs(10, 1))
                mx = std::max(mx, max_abs_entry(dyadic_kernel(j, t, p.x, p.y, 1.0, DyadicVariant::free)));
            EXPECT_LT(mx / free_dyadic_bound(j, t), 1.0) << "j=" << j << " t=" << t;
        }
}

TEST(Dyadic, WeightedSumBoundedUniformlyInTime) {
    // |K_j(t)| <= int chi_j (z/lambda) |jump| dz for every t
    const double eps = 0.1;
    const auto pr = sample_pairs(10, 1);
    double bound = 0.0;
    for (int j = 1; j <= 4; ++j) {
        double bj = 0.0;
        for (const auto& p : pr) {
            const Point d = p.x - p.y;
            const cd v = oscillatory_integral([&](double z) { return cd(max_abs_entry(free_amplitude(z, d, 1.0))); }, 0.0,
                                              0.0, EnergyWindow::dyadic(j), 1.0);
            bj = std::max(bj, v.real());
        }
        bound += std::pow(2.0, -(4.0 + eps) * j) * bj;
    }
    for (double t : {0.0, 1.0, 10.0, 100.0}) {
        double s = 0.0;
        for (int j = 1; j <= 4; ++j) {
            double mx = 0.0;
            for (const auto& p : pr) mx = std::max(mx, max_abs_entry(dyadic_kernel(j, t, p.x, p.y, 1.0, DyadicVariant::free)));
            s += std::pow(2.0, -(4.0 + eps) * j) * mx;
        }
        EXPECT_LE(s, bound) << "t=" << t;
    }
}

TEST(Dyadic, BornOneBoundRatios) {
    const auto& c = regular_case();
    for (int j = 1; j <= 2; ++j)
        for (double t : {1.0, 10.0, 100.0}) {
            const auto& p = pairs12()[6];
            const double v = max_abs_entry(dyadic_kernel(j, t, p.x, p.y, 1.0, DyadicVariant::born1, &c.space));
            EXPECT_LT(v / born1_dyadic_bound(j, t), 1.0);
        }
    EXPECT_THROW(dyadic_kernel(1, 1.0, Point::Zero(), Point::Ones(), 1.0, DyadicVariant::born1), Error);
}
