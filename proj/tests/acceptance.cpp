// One PASS/FAIL line per acceptance criterion; every tolerance is fixed here.
#include <chrono>
#include <cstdio>
#include <functional>
#include <iostream>
#include <random>
#include <sstream>

#include <dirac4d/decay_lab.hpp>

using namespace dirac4d;

namespace {

constexpr double kR = 15.0;

struct Outcome {
    bool pass = false;
    std::string detail;
};

int failures = 0;

void criterion(int id, const std::string& name, const std::function<Outcome()>& f) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = f();
    } catch (const std::exception& e) {
        o = {false, std::string("exception: ") + e.what()};
    }
    const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (!o.pass) ++failures;
    std::printf("[%s] %2d %s: %s (%.1f s)\n", o.pass ? "PASS" : "FAIL", id, name.c_str(), o.detail.c_str(), sec);
    std::fflush(stdout);
}

std::string fmt(double v) {
    char b[32];
    std::snprintf(b, sizeof b, "%.3g", v);
    return b;
}

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

CouplingScan scan_on(int N, double lo, double hi, int samples, bool verify) {
    const auto g = build_grid(GridGenerator::tensor_gauss_radial, N, kR, 1);
    return coupling_scan(upper_channel_potential(1.0), g, 1.0, lo, hi, samples, DiagonalRule::subtraction, verify);
}

double sup_at(const std::vector<SamplePair>& pr, const std::function<Mat4(const SamplePair&)>& k) {
    double mx = 0.0;
    for (const auto& p : pr) mx = std::max(mx, max_abs_entry(k(p)));
    return mx;
}


} // namespace

int main() {
    // shared cases: the upper-channel family at 384 nodes (dynamics, inversion) and 1920 (structure)
    const CouplingScan scan384 = scan_on(384, -5.0, 30.0, 71, true);
    std::unique_ptr<Case> first384, second384, third384, regular96;
    std::unique_ptr<Case> first1920, second1920;
    CouplingScan scan1920;

    criterion(1, "algebra exactness", [] {
        const auto t0 = std::chrono::steady_clock::now();
        const DiracMatrixSet ds = standard_dirac_matrices();
        double anti = 0.0, fact = 0.0;
        for (int j = 0; j < 5; ++j)
            for (int k = 0; k < 5; ++k) {
                const Mat4 a = ds.gen(j) * ds.gen(k) + ds.gen(k) * ds.gen(j);
                anti = std::max(anti, (a - (j == k ? 2.0 : 0.0) * Mat4::Identity()).cwiseAbs().maxCoeff());
            }
        std::mt19937_64 g(1);
        std::normal_distribution<double> nd;
        for (int i = 0; i < 100; ++i) {
            const Point xi(nd(g), nd(g), nd(g), nd(g));
            const double lam = 3.0 * nd(g), m = 0.5 + std::abs(nd(g));
            const Mat4 s = dirac_symbol(xi, m);
            const Mat4 lhs = (s - lam * Mat4::Identity()) * (s + lam * Mat4::Identity());
            fact = std::max(fact, (lhs - (xi.squaredNorm() + m * m - lam * lam) * Mat4::Identity()).cwiseAbs().maxCoeff());
        }
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        return Outcome{anti <= 1e-12 && fact <= 1e-12 && sec < 1.0,
                       "25 anticommutators " + fmt(anti) + ", factorization " + fmt(fact) + " (<= 1e-12), " + fmt(sec) + " s < 1 s"};
    });

    criterion(2, "kernel consistency", [] {
        const auto t0 = std::chrono::steady_clock::now();
        const Point x(0.7, -0.2, 1.0, 0.5), y(-0.4, 0.1, 0.2, 0.3);
        const auto zs = log_spaced(1e-4, 1e-2, 9);
        std::vector<double> r0, e0, e1, e2;
        const Mat4 g0 = g_dirac_kernels(0, x, y, 1.0);
        for (double z : zs) {
            r0.push_back((dirac_kernel(z, x, y, 1.0, Branch::plus) - g0).norm());
            e0.push_back(expansion_error(z, x, y, 1.0, 0, Branch::plus).norm());
            e1.push_back(expansion_error(z, x, y, 1.0, 1, Branch::plus).norm());
            e2.push_back(expansion_error(z, x, y, 1.0, 2, Branch::minus).norm());
        }
        const double s0 = fit_decay(zs, r0, FitModel::power).value, se0 = fit_decay(zs, e0, FitModel::power).value;
        const double se1 = fit_decay(zs, e1, FitModel::power).value, se2 = fit_decay(zs, e2, FitModel::power).value;
        const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        const bool ok = std::abs(s0 - 2.0) <= 0.3 && std::abs(se0 - 2.0) <= 0.3 && se1 >= 1.7 && std::abs(se2 - 4.0) <= 0.3 && sec < 10.0;
        return Outcome{ok, "R0 -> G0 slope " + fmt(s0) + " (2 +- 0.3); E0/E1/E2 slopes " + fmt(se0) + "/" + fmt(se1) + "/" +
                               fmt(se2) + " (2 +- 0.3, >= 1.7, 4 +- 0.3)"};
    });

    criterion(3, "K(omega, xi) eigenvalues", [] {
        std::mt19937_64 g(5);
        std::uniform_real_distribution<double> u(0.01, 0.99);
        std::normal_distribution<double> nd;
        double err = 0.0;
        for (int s = 0; s < 50; ++s) {
            const Point xi = 1.5 * Point(nd(g), nd(g), nd(g), nd(g)) / 2.0;
            const auto k = k_matrix(u(g), xi, 1.0);
            Eigen::SelfAdjointEigenSolver<Mat4> es(k.matrix);
            for (int i = 0; i < 4; ++i)
                err = std::max(err, std::abs(es.eigenvalues()[3 - i] - k.eigenvalues[static_cast<std::size_t>(i)]) / k.eigenvalues[0]);
        }
        bool pos = true, mono = true;
        const Point dir = Point(0.4, -0.3, 0.8, 0.1).normalized();
        for (int b = 0; b < 20; ++b) {
            const Point xi = (0.05 + 0.25 * b) * dir;
            std::array<double, 4> prev{};
            for (int a = 0; a < 20; ++a) {
                const double om = 0.025 + 0.95 * a / 19.0;
                const auto k = k_matrix(om, xi, 1.0);
                for (int i = 0; i < 4; ++i) {
                    pos = pos && k.eigenvalues[static_cast<std::size_t>(i)] > 0.0;
                    if (a > 0) mono = mono && k.eigenvalues[static_cast<std::size_t>(i)] <= prev[static_cast<std::size_t>(i)] * (1.0 + 1e-14);
                    prev[static_cast<std::size_t>(i)] = k.eigenvalues[static_cast<std::size_t>(i)];
                }
            }
        }
        return Outcome{err <= 1e-10 && pos && mono, "formula vs dense " + fmt(err) + " (<= 1e-10), positive " +
                                                        (pos ? "yes" : "no") + ", nonincreasing in omega " + (mono ? "yes" : "no")};
    });

    criterion(4, "free propagator", [] {
        const auto w = EnergyWindow::low(0.5, 1e-6);
        const Point dir = Point(0.3, -0.5, 0.7, 0.2).normalized();
        double orc = 0.0;
        for (double t : {1.0, 10.0, 100.0})
            for (double r : {0.5, 2.0, 10.0}) {
                const Mat4 a = free_kernel(t, r * dir, Point::Zero(), 1.0, w), b = fourier_side_oracle(t, r * dir, 1.0, w);
                orc = std::max(orc, max_abs_entry(a - b) / max_abs_entry(b));
            }
        const auto pr = sample_pairs(40, 1);
        const auto ts = log_spaced(10.0, 1000.0, 13);
        std::vector<double> sup;
        const auto wl = EnergyWindow::low(0.5);
        for (double t : ts) sup.push_back(sup_at(pr, [&](const SamplePair& p) { return free_kernel(t, p.x, p.y, 1.0, wl); }));
        const DecayFit f = fit_decay(ts, sup, FitModel::power);
        return Outcome{orc <= 1e-6 && std::abs(f.value + 2.0) <= 0.25,
                       "oracle " + fmt(orc) + " (<= 1e-6); decay " + fmt(f.value) + " +- " + fmt(f.halfwidth) + " R2 " + fmt(f.r2) +
                           " on [10, 1e3] (-2 +- 0.25)"};
    });

    regular96 = make_case(96, scalar_potential(1.0));

    criterion(5, "high-energy dyadic bounds", [&] {
        const auto pr = sample_pairs(40, 1);
        double cf = 0.0, cb = 0.0;
        for (int j = 1; j <= 5; ++j) {
            for (double t : {1.0, 10.0, 100.0})
                cf = std::max(cf, sup_at(pr, [&](const SamplePair& p) { return dyadic_kernel(j, t, p.x, p.y, 1.0, DyadicVariant::free); }) /
                                      free_dyadic_bound(j, t));
            PerturbedOptions o;
            o.full = false;
            o.born_max = 1;
            const std::vector<SamplePair> sub(pr.begin(), pr.begin() + 8);
            const auto amps = perturbed_amplitudes(regular96->space, sub, EnergyWindow::dyadic(j), o);
            for (double t : {1.0, 10.0, 100.0}) cb = std::max(cb, sup_entry(stone_kernels(amps, t).born[0]) / born1_dyadic_bound(j, t));
        }
        // the bounds carry an unspecified constant; the one used here is 1 in kernel units
        return Outcome{cf <= 1.0 && cb <= 1.0, "max free ratio " + fmt(cf) + ", max born-1 ratio " + fmt(cb) +
                                                   " over j 1..5, t {1,10,100} (<= 1)"};
    });

    criterion(6, "regular perturbed case", [] {
        auto c = make_case(960, scalar_potential(1.0));
        if (!c->a.report.regular) return Outcome{false, "threshold not regular"};
        const auto pr = sample_pairs(40, 1);
        const auto w = EnergyWindow::low(0.5);
        PerturbedOptions o;
        const auto d = perturbed_amplitudes(c->space, pr, w, o, &c->a);
        o.inverter = Inverter::regular_expansion;
        const auto e = perturbed_amplitudes(c->space, pr, w, o, &c->a);
        double agree = 0.0;
        for (int iz = 0; iz < d.zgrid.size(); ++iz) {
            if (d.zgrid.nodes[static_cast<std::size_t>(iz)] > 1e-2) continue;
            double err = 0.0, mx = 0.0;
            for (std::size_t p = 0; p < pr.size(); ++p) {
                const Mat4 a = d.full[p][static_cast<std::size_t>(iz)] - d.free[p][static_cast<std::size_t>(iz)];
                const Mat4 b = e.full[p][static_cast<std::size_t>(iz)] - e.free[p][static_cast<std::size_t>(iz)];
                err = std::max(err, max_abs_entry(a - b));
                mx = std::max(mx, max_abs_entry(a));
            }
            agree = std::max(agree, err / mx);
        }
        const auto ts = log_spaced(10.0, 300.0, 11);
        std::vector<double> sup;
        for (double t : ts) sup.push_back(sup_entry(stone_kernels(d, t).full));
        const DecayFit f = fit_decay(ts, sup, FitModel::power);
        return Outcome{std::abs(f.value + 2.0) <= 0.3 && agree <= 1e-6,
                       "N 960 (dim " + std::to_string(c->space.dim) + "), full-low decay " + fmt(f.value) + " +- " + fmt(f.halfwidth) +
                           " on [10, 300] (-2 +- 0.3); direct vs expansion at z <= 1e-2: " + fmt(agree) + " (<= 1e-6)"};
    });

    first384 = make_case(384, upper_channel_potential(scan384.crossings.at(0).c));
    second384 = make_case(384, upper_channel_potential(scan384.crossings.at(1).c));
    {
        PotentialSpec p = upper_channel_potential(1.0);
        p.direction(0, 0) = scan384.crossings.at(0).c;
        p.direction(1, 1) = scan384.crossings.at(1).c;
        third384 = make_case(384, p);
    }

    criterion(7, "inversion validation", [&] {
        double jn = 0.0;
        for (const Case* c : {first384.get(), second384.get(), third384.get()})
            jn = std::max(jn, inversion_validation(c->a)["jn_vs_dense_rel"].get<double>());
        const json reg = inversion_validation(regular96->a);
        const double rs = reg["regular_remainder_slope"], ds = reg["plus_minus_difference_slope"];
        const json f1 = inversion_validation(first384->a);
        const double lo = f1["kind_first_z2_logz_norm_range"][0], hi = f1["kind_first_z2_logz_norm_range"][1];
        const double k2 = inversion_validation(second384->a)["z2_norm_over_D2"];
        const bool ok = jn <= 1e-8 && rs > 2.0 && std::abs(ds - 2.0) <= 0.2 && hi / lo <= 2.0 && std::abs(k2 - 1.0) <= 0.1;
        return Outcome{ok, "JN vs dense " + fmt(jn) + " (<= 1e-8); remainder slope " + fmt(rs) + " (> 2); +- slope " + fmt(ds) +
                               " (2 +- 0.2); kind first z^2|log z| ||M^-1|| in [" + fmt(lo) + ", " + fmt(hi) +
                               "] over 1e-4..1e-2 (ratio <= 2); kind second z^2 ||M^-1|| / ||D2|| " + fmt(k2) + " (1 +- 0.1)"};
    });

    scan1920 = scan_on(1920, 0.0, 25.0, 3, false);
    if (scan1920.crossings.size() >= 2) {
        first1920 = make_case(1920, upper_channel_potential(scan1920.crossings[0].c));
        second1920 = make_case(1920, upper_channel_potential(scan1920.crossings[1].c));
    }

    criterion(8, "classification suite", [&] {
        if (scan1920.crossings.empty()) return Outcome{false, "no crossing found"};
        std::ostringstream os;
        bool ok = true;
        os << scan1920.crossings.size() << " crossings at N 1920;";
        for (const Case* c : {first1920.get(), second1920.get()}) {
            if (!c) continue;
            const auto& r = c->a.report;
            double g2 = 0.0;
            for (Eigen::Index i = 0; i < c->a.s2.S2.basis.cols(); ++i)
                g2 = std::max(g2, g2_identity(c->a, c->a.s2.S2.basis.col(i)).rel);
            ok = ok && r.dim_S1 >= 1 && r.rank_Q <= 2 && r.orthogonality <= 1e-6 && g2 <= 0.05;
            os << " " << to_string(r.kind) << ": dim S1 " << r.dim_S1 << ", rank Q " << r.rank_Q << ", ||S2 v G1|| "
               << fmt(r.orthogonality) << ", G2 identity " << fmt(g2) << ";";
        }
        // grid doubling 1920 -> 3840: the couplings of the two classified cases, where an
        // eigenvalue of T0 crosses zero, must stay put; further crossings are only printed
        const CouplingScan dbl = scan_on(3840, 0.0, 25.0, 3, false);
        double shift = 0.0, other = 0.0;
        bool mult = dbl.crossings.size() >= 2;
        for (std::size_t i = 0; i < std::min(dbl.crossings.size(), scan1920.crossings.size()); ++i) {
            const double d = std::abs(dbl.crossings[i].c - scan1920.crossings[i].c) / scan1920.crossings[i].c;
            if (i < 2) {
                shift = std::max(shift, d);
                mult = mult && dbl.crossings[i].multiplicity == scan1920.crossings[i].multiplicity;
            } else {
                other = std::max(other, d);
            }
        }
        ok = ok && mult && shift <= 0.05;
        os << " classified crossings shift 1920 -> 3840: " << fmt(shift) << " (<= 0.05), multiplicities "
           << (mult ? "kept" : "changed") << "; higher crossings shift " << fmt(other) << " (not checked)";
        return Outcome{ok, os.str()};
    });

    criterion(9, "non-regular dynamics", [&] {
        const auto pr = sample_pairs(40, 1);
        const auto ts = log_spaced(10.0, 1e4, 13);
        PerturbedOptions o;
        o.inverter = Inverter::jensen_nenciu;
        o.ft = true;
        const auto a1 = perturbed_amplitudes(first384->space, pr, EnergyWindow::low(0.5, 1e-8), o, &first384->a);
        std::vector<double> res, band;
        int rank = 0;
        for (double t : ts) {
            const auto k = stone_kernels(a1, t);
            res.push_back(sup_entry(k.residual));
            band.push_back(sup_entry(k.ft) * std::log(t));
            rank = std::max(rank, k.ft_rank);
        }
        const auto [blo, bhi] = std::minmax_element(band.begin(), band.end());
        const DecayFit f1 = fit_decay(ts, res, FitModel::power);
        o.ft = false;
        const auto a2 = perturbed_amplitudes(second384->space, pr, EnergyWindow::low(0.5, 1e-5), o, &second384->a);
        std::vector<double> full2;
        for (double t : ts) full2.push_back(sup_entry(stone_kernels(a2, t).full));
        const DecayFit f2 = fit_decay(ts, full2, FitModel::power);
        const bool ok = *bhi / *blo <= 3.0 && rank <= 4 && std::abs(f1.value + 1.0) <= 0.3 && std::abs(f2.value + 1.0) <= 0.3;
        return Outcome{ok, "kind first: ||F_t|| log t in [" + fmt(*blo) + ", " + fmt(*bhi) + "] (factor <= 3), rank " +
                               std::to_string(rank) + " (<= 4), residual decay " + fmt(f1.value) + " +- " + fmt(f1.halfwidth) +
                               " (-1 +- 0.3); kind second decay " + fmt(f2.value) + " +- " + fmt(f2.halfwidth) +
                               " (-1 +- 0.3), t in [10, 1e4]"};
    });

    criterion(10, "eigenprojection P_m", [&] {
        if (!second1920) return Outcome{false, "no eigenvalue case"};
        const Case& c = *second1920;
        const auto p = eigenprojection_Pm(c.a);
        const MatX psi = resonance_wavefunction(c.space, c.a.s2.S2.basis);
        double weak = 0.0;
        for (const auto& pr : default_probes(10, 7))
            for (Eigen::Index i = 0; i < psi.cols(); ++i) weak = std::max(weak, weak_residual(c.grid, c.pot, 1.0, psi.col(i), pr));
        const bool ok = p.idempotence <= 1e-6 && p.selfadjointness <= 1e-6 && p.rank == c.a.report.dim_S2 && weak <= 5e-2;
        return Outcome{ok, "idempotence " + fmt(p.idempotence) + ", self-adjointness " + fmt(p.selfadjointness) +
                               " (<= 1e-6); rank " + std::to_string(p.rank) + " = dim S2 " + std::to_string(c.a.report.dim_S2) +
                               "; weak residual " + fmt(weak) + " (<= 5e-2)"};
    });

    std::printf("%d of 10 criteria failed\n", failures);
    return failures == 0 ? 0 : 1;
}
