#include <iostream>
#include <random>

#include <CLI11.hpp>
#ifdef _OPENMP
#include <omp.h>
#endif

#include <dirac4d/decay_lab.hpp>

using namespace dirac4d;

namespace {

struct Common {
    std::string config;
    std::string out;
    int threads = 0;
    long long seed = -1;
    bool json_out = false;
};

ExperimentConfig load(const Common& c) {
    ExperimentConfig cfg = c.config.empty() ? ExperimentConfig{} : load_config(c.config);
    if (c.seed >= 0) cfg.grid_seed = cfg.pair_seed = static_cast<std::uint64_t>(c.seed);
    if (!c.out.empty()) cfg.out_dir = c.out;
    return cfg;
}

void emit(const Common& c, const json& j, const std::string& human) {
    if (c.json_out) std::cout << j.dump(2) << "\n";
    else std::cout << human;
}

json validate_kernels(double m) {
    json out;
    const DiracMatrixSet ds = standard_dirac_matrices();
    double anti = 0.0;
    for (int j = 0; j < 5; ++j)
        for (int k = 0; k < 5; ++k) {
            const Mat4 a = ds.gen(j) * ds.gen(k) + ds.gen(k) * ds.gen(j);
            anti = std::max(anti, (a - (j == k ? 2.0 : 0.0) * Mat4::Identity()).cwiseAbs().maxCoeff());
        }
    std::mt19937_64 gen(1);
    std::normal_distribution<double> nd;
    double fact = 0.0;
    for (int i = 0; i < 100; ++i) {
        const Point xi(nd(gen), nd(gen), nd(gen), nd(gen));
        const double lam = 3.0 * nd(gen);
        const Mat4 s = dirac_symbol(xi, m);
        const Mat4 lhs = (s - lam * Mat4::Identity()) * (s + lam * Mat4::Identity());
        fact = std::max(fact, (lhs - (xi.squaredNorm() + m * m - lam * lam) * Mat4::Identity()).cwiseAbs().maxCoeff());
    }
    out["anticommutation_max_residual"] = anti;
    out["symbol_factorization_max_residual"] = fact;

    const Point x(0.2, -0.1, 0.3, 0.05), y(-0.4, 0.5, 0.1, -0.2);
    const auto zs = log_spaced(1e-4, 1e-2, 9);
    for (int k = 0; k <= 2; ++k) {
        std::vector<double> e;
        for (double z : zs) e.push_back(max_abs_entry(expansion_error(z, x, y, m, k, Branch::plus)));
        out["expansion_error_slope"].push_back(fit_decay(zs, e, FitModel::power).value);
    }
    double orc = 0.0;
    const auto w = EnergyWindow::low(0.5, 1e-6);
    const Point dir = Point(0.3, -0.5, 0.7, 0.2).normalized();
    for (double t : {1.0, 10.0, 100.0})
        for (double r : {0.5, 2.0, 10.0}) {
            const Mat4 a = free_kernel(t, r * dir, Point::Zero(), m, w), b = fourier_side_oracle(t, r * dir, m, w);
            orc = std::max(orc, max_abs_entry(a - b) / max_abs_entry(b));
        }
    out["free_kernel_vs_fourier_oracle_rel"] = orc;
    return out;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"dirac4d: threshold analysis and low-energy dispersive decay for 4D Dirac operators"};
    app.require_subcommand(1);
    Common c;
    auto common = [&](CLI::App* s) {
        s->add_option("--config", c.config, "YAML experiment config");
        s->add_option("--out", c.out, "output directory (overrides output.dir)");
        s->add_option("--threads", c.threads, "OpenMP threads (0 = runtime default)");
        s->add_option("--seed", c.seed, "seed for grid and sample pairs");
        s->add_flag("--json", c.json_out, "print JSON to stdout");
    };
    auto* vk = app.add_subcommand("validate-kernels", "algebra and free-kernel consistency checks");
    auto* cl = app.add_subcommand("classify", "threshold classification for the configured potential");
    auto* sc = app.add_subcommand("scan-coupling", "scan the coupling for threshold crossings");
    auto* pr = app.add_subcommand("propagate", "propagator kernels on the sample pairs, written to kernels.csv");
    auto* df = app.add_subcommand("decay-fit", "fit decay laws to an existing kernels.csv");
    auto* rp = app.add_subcommand("report", "full experiment: classify, validate, propagate, fit");
    for (auto* s : {vk, cl, sc, pr, df, rp}) common(s);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }
#ifdef _OPENMP
    if (c.threads > 0) omp_set_num_threads(c.threads);
#endif
    try {
        const ExperimentConfig cfg = load(c);
        if (*vk) {
            const json j = validate_kernels(cfg.mass);
            std::ostringstream h;
            h << "anticommutation residual " << j["anticommutation_max_residual"].get<double>() << "\n"
              << "symbol factorization residual " << j["symbol_factorization_max_residual"].get<double>() << "\n"
              << "expansion error slopes " << j["expansion_error_slope"].dump() << "\n"
              << "free kernel vs Fourier oracle " << j["free_kernel_vs_fourier_oracle_rel"].get<double>() << "\n";
            emit(c, j, h.str());
            return 0;
        }
        if (*sc) {
            const auto grid = build_grid(cfg.generator, cfg.nodes, cfg.radius, cfg.grid_seed);
            const auto s = coupling_scan(cfg.potential(1.0), grid, cfg.mass, cfg.scan_c_min, cfg.scan_c_max, cfg.scan_samples);
            json j;
            std::ostringstream h;
            for (const auto& x : s.crossings) {
                j["crossings"].push_back({{"c", x.c}, {"multiplicity", x.multiplicity}, {"bracketed", x.bracketed}});
                h << "crossing c = " << x.c << " multiplicity " << x.multiplicity << (x.bracketed ? "" : " (unbracketed)") << "\n";
            }
            j["c_samples"] = s.c_samples;
            j["sigma_min"] = s.sigma_min;
            if (s.crossings.empty()) h << "no crossings in [" << cfg.scan_c_min << ", " << cfg.scan_c_max << "]\n";
            emit(c, j, h.str());
            return 0;
        }
        if (*df) {
            const auto tab = read_sup_table(cfg.out_dir + "/kernels.csv");
            json j = json::array();
            std::ostringstream h;
            for (const auto& [v, m] : tab) {
                std::vector<double> t, s;
                for (const auto& [tt, ss] : m) {
                    t.push_back(tt);
                    s.push_back(ss);
                }
                DecayFit f = fit_decay(t, s, v == "F_t" ? FitModel::inverse_log : FitModel::power, cfg.fit_t_min, cfg.fit_t_max);
                f.variant = v;
                j.push_back(to_json(f));
                h << v << ": " << to_string(f.model) << " " << f.value << " +- " << f.halfwidth << " (R^2 " << f.r2 << ", n "
                  << f.n << ")\n";
            }
            emit(c, json{{"decay_fits", j}}, h.str());
            return 0;
        }
        RunOptions o;
        if (*cl) o.inversion = o.propagate = o.fits = o.dyadic = false;
        if (*pr) o.inversion = o.fits = o.dyadic = false;
        const Report rep = run(cfg, o);
        if (*pr || *rp) write_report(rep, cfg.out_dir);
        std::ostringstream h;
        if (rep.doc.contains("threshold_report")) {
            const auto& t = rep.doc["threshold_report"];
            h << "threshold: " << t["kind"].get<std::string>() << " (dim S1 " << t["dim_S1"] << ", dim S2 " << t["dim_S2"]
              << ")\n";
        }
        for (const auto& f : rep.doc["decay_fits"])
            h << f["variant"].get<std::string>() << ": " << f["model"].get<std::string>() << " " << f["value"].get<double>()
              << " +- " << f["halfwidth"].get<double>() << "\n";
        for (const auto& [k, v] : rep.doc["stages"].items())
            if (v.get<std::string>() != "ok") h << "stage " << k << " " << v.get<std::string>() << "\n";
        if (*pr || *rp) h << "wrote " << cfg.out_dir << "/report.json and kernels.csv\n";
        emit(c, rep.doc, h.str());
        return rep.failed ? 2 : 0;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
