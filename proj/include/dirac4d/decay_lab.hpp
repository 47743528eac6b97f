#pragma once

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <gsl/gsl_cdf.h>
#include <gsl/gsl_fit.h>
#include <nlohmann/json.hpp>
#include <openssl/evp.h>
#include <yaml-cpp/yaml.h>

#include "stone_propagator.hpp"

namespace dirac4d {

using json = nlohmann::json;

// ---------------------------------------------------------------- decay fits

enum class FitModel { power, inverse_log };

inline const char* to_string(FitModel m) { return m == FitModel::power ? "power" : "inverse-log"; }

// power: log v = exponent log t + c.  inverse-log: v = coefficient / log t + c.
struct DecayFit {
    FitModel model = FitModel::power;
    std::string variant;
    double value = 0.0;     // exponent or coefficient
    double intercept = 0.0;
    double halfwidth = 0.0; // 95% confidence
    double r2 = 0.0;
    double t_lo = 0.0, t_hi = 0.0;
    int n = 0;
};

inline DecayFit fit_decay(const std::vector<double>& t, const std::vector<double>& v, FitModel model,
                          double t_lo = 0.0, double t_hi = std::numeric_limits<double>::infinity()) {
    require(t.size() == v.size(), ErrorKind::domain, "t and value lists differ in length");
    std::vector<double> x, y;
    for (std::size_t i = 0; i < t.size(); ++i) {
        if (t[i] < t_lo || t[i] > t_hi) continue;
        require(v[i] > 0.0 && std::isfinite(v[i]), ErrorKind::domain, "decay fit needs positive values");
        require(t[i] > (model == FitModel::inverse_log ? 1.0 : 0.0), ErrorKind::domain, "decay fit t out of range");
        x.push_back(model == FitModel::power ? std::log(t[i]) : 1.0 / std::log(t[i]));
        y.push_back(model == FitModel::power ? std::log(v[i]) : v[i]);
    }
    require(x.size() >= 5, ErrorKind::domain, "decay fit needs >= 5 points in range");
    DecayFit f;
    f.model = model;
    f.n = static_cast<int>(x.size());
    double c0, c1, cov00, cov01, cov11, sumsq;
    gsl_fit_linear(x.data(), 1, y.data(), 1, x.size(), &c0, &c1, &cov00, &cov01, &cov11, &sumsq);
    f.value = c1;
    f.intercept = c0;
    f.halfwidth = gsl_cdf_tdist_Pinv(0.975, f.n - 2) * std::sqrt(cov11);
    double my = 0.0, ss = 0.0;
    for (double q : y) my += q;
    my /= y.size();
    for (double q : y) ss += (q - my) * (q - my);
    f.r2 = ss > 0.0 ? 1.0 - sumsq / ss : 1.0;
    f.t_lo = std::numeric_limits<double>::infinity();
    f.t_hi = 0.0;
    for (std::size_t i = 0; i < t.size(); ++i)
        if (t[i] >= t_lo && t[i] <= t_hi) {
            f.t_lo = std::min(f.t_lo, t[i]);
            f.t_hi = std::max(f.t_hi, t[i]);
        }
    return f;
}

inline json to_json(const DecayFit& f) {
    return {{"variant", f.variant}, {"model", to_string(f.model)}, {"value", f.value}, {"intercept", f.intercept},
            {"halfwidth", f.halfwidth}, {"r2", f.r2}, {"t_range", {f.t_lo, f.t_hi}}, {"samples", f.n}};
}

inline std::vector<double> log_spaced(double lo, double hi, int n) {
    require(n >= 1 && lo > 0.0 && hi >= lo, ErrorKind::domain, "bad log-spaced range");
    std::vector<double> out;
    for (int i = 0; i < n; ++i) out.push_back(n == 1 ? lo : lo * std::pow(hi / lo, double(i) / (n - 1)));
    return out;
}

// ---------------------------------------------------------------- config

enum class PotentialFamily { scalar, upper_channel };

struct ExperimentConfig {
    std::string name = "experiment";
    double mass = 1.0;

    PotentialFamily family = PotentialFamily::scalar;
    Profile profile = Profile::inverse_power;
    double decay_exponent = 6.0;
    double coupling = 0.0;
    int coupling_at_crossing = -1; // >= 0: take the coupling from a scan on the same grid
    double scan_c_min = -5.0, scan_c_max = 30.0;
    int scan_samples = 71;
    Point center = Point::Zero();

    GridGenerator generator = GridGenerator::tensor_gauss_radial;
    int nodes = 96;
    double radius = 15.0;
    std::uint64_t grid_seed = 1;

    double z1 = 0.5;
    double z_min = 1e-3;
    std::vector<int> dyadic_j;
    std::vector<double> dyadic_times{1.0, 10.0, 100.0};
    bool dyadic_born = false;
    int dyadic_pairs = 8;

    double t_from = 10.0, t_to = 1000.0;
    int t_count = 13;

    int pair_count = 40;
    double r_min = 0.1, r_max = 50.0, spread = 1.0;
    std::uint64_t pair_seed = 1;

    std::vector<Variant> variants{Variant::free};
    std::string inverter = "auto"; // auto | direct | regular-expansion | jensen-nenciu
    int born_max = 0;

    double fit_t_min = 10.0, fit_t_max = 1000.0;
    bool validate_inversion = true;
    Tolerances tol;

    std::string out_dir = "out";

    PotentialSpec potential(double c) const {
        PotentialSpec p = family == PotentialFamily::scalar ? scalar_potential(c, decay_exponent)
                                                            : upper_channel_potential(c, decay_exponent);
        p.profile = profile;
        p.center = center;
        return p;
    }
    std::vector<double> times() const { return log_spaced(t_from, t_to, t_count); }
    bool wants(Variant v) const { return std::find(variants.begin(), variants.end(), v) != variants.end(); }
};

namespace detail {

inline Variant variant_from(const std::string& s, const std::string& key) {
    for (Variant v : {Variant::free, Variant::born, Variant::tail, Variant::full_low, Variant::Ft, Variant::residual})
        if (s == to_string(v)) return v;
    throw Error(ErrorKind::parse, "unknown variant '" + s + "' at key '" + key + "'");
}

inline Inverter inverter_from(const std::string& s) {
    for (Inverter v : {Inverter::direct, Inverter::regular_expansion, Inverter::jensen_nenciu})
        if (s == to_string(v)) return v;
    throw Error(ErrorKind::parse, "unknown inverter '" + s + "'");
}

class Reader {
public:
    explicit Reader(YAML::Node n, std::string path = "") : n_(std::move(n)), path_(std::move(path)) {
        if (present() && !n_.IsMap()) throw Error(ErrorKind::parse, "key '" + where("") + "' must be a mapping");
    }
    // every key present must be one of `allowed`
    void only(std::initializer_list<const char*> allowed) const {
        if (!present()) return;
        std::set<std::string> ok(allowed.begin(), allowed.end());
        for (const auto& kv : n_) {
            const std::string k = kv.first.as<std::string>();
            if (!ok.count(k)) throw Error(ErrorKind::parse, "unknown config key '" + where(k) + "'");
        }
    }
    template <class T>
    void get(const char* key, T& out) const {
        if (!present() || !n_[key]) return;
        try {
            out = n_[key].as<T>();
        } catch (const YAML::Exception&) {
            throw Error(ErrorKind::parse, "bad value for config key '" + where(key) + "'");
        }
    }
    Reader sub(const char* key) const { return Reader(present() ? n_[key] : YAML::Node(), where(key)); }
    // a default node is Null but still converts to true
    bool present() const { return n_ && n_.IsDefined() && !n_.IsNull(); }
    std::string where(const std::string& k) const { return path_.empty() ? k : (k.empty() ? path_ : path_ + "." + k); }

private:
    YAML::Node n_;
    std::string path_;
};

} // namespace detail

inline ExperimentConfig parse_config(const std::string& text) {
    YAML::Node root;
    try {
        root = YAML::Load(text);
    } catch (const YAML::Exception& e) {
        throw Error(ErrorKind::parse, std::string("YAML syntax: ") + e.what());
    }
    ExperimentConfig c;
    if (!root || root.IsNull()) return c;
    detail::Reader r(root);
    r.only({"name", "mass_inv_length", "potential", "grid", "window", "times", "pairs", "variants", "inverter",
            "born_max", "fit", "tolerances", "output", "validate_inversion"});
    r.get("name", c.name);
    r.get("mass_inv_length", c.mass);
    r.get("inverter", c.inverter);
    r.get("born_max", c.born_max);
    r.get("validate_inversion", c.validate_inversion);
    if (c.inverter != "auto") detail::inverter_from(c.inverter);

    auto p = r.sub("potential");
    p.only({"family", "profile", "decay_exponent", "coupling", "coupling_at_crossing", "scan", "center_length"});
    std::string fam = "scalar", prof = "inverse-power";
    p.get("family", fam);
    p.get("profile", prof);
    if (fam == "scalar") c.family = PotentialFamily::scalar;
    else if (fam == "upper-channel") c.family = PotentialFamily::upper_channel;
    else throw Error(ErrorKind::parse, "bad value for config key 'potential.family'");
    if (prof == "inverse-power") c.profile = Profile::inverse_power;
    else if (prof == "gaussian") c.profile = Profile::gaussian;
    else throw Error(ErrorKind::parse, "bad value for config key 'potential.profile'");
    p.get("decay_exponent", c.decay_exponent);
    p.get("coupling", c.coupling);
    p.get("coupling_at_crossing", c.coupling_at_crossing);
    std::vector<double> ctr{0, 0, 0, 0};
    p.get("center_length", ctr);
    if (ctr.size() != 4) throw Error(ErrorKind::parse, "bad value for config key 'potential.center_length'");
    c.center = Point(ctr[0], ctr[1], ctr[2], ctr[3]);
    auto sc = p.sub("scan");
    sc.only({"c_min", "c_max", "samples"});
    sc.get("c_min", c.scan_c_min);
    sc.get("c_max", c.scan_c_max);
    sc.get("samples", c.scan_samples);

    auto g = r.sub("grid");
    g.only({"generator", "nodes", "radius_length", "seed"});
    std::string gen = "tensor-gauss-radial";
    g.get("generator", gen);
    if (gen == "tensor-gauss-radial") c.generator = GridGenerator::tensor_gauss_radial;
    else if (gen == "quasi-random") c.generator = GridGenerator::quasi_random;
    else throw Error(ErrorKind::parse, "bad value for config key 'grid.generator'");
    g.get("nodes", c.nodes);
    g.get("radius_length", c.radius);
    g.get("seed", c.grid_seed);

    auto w = r.sub("window");
    w.only({"z1_inv_length", "z_min_inv_length", "dyadic_j", "dyadic_times_time", "dyadic_born", "dyadic_pairs"});
    w.get("z1_inv_length", c.z1);
    w.get("z_min_inv_length", c.z_min);
    w.get("dyadic_j", c.dyadic_j);
    w.get("dyadic_times_time", c.dyadic_times);
    w.get("dyadic_born", c.dyadic_born);
    w.get("dyadic_pairs", c.dyadic_pairs);

    auto t = r.sub("times");
    t.only({"from_time", "to_time", "count"});
    t.get("from_time", c.t_from);
    t.get("to_time", c.t_to);
    t.get("count", c.t_count);

    auto pr = r.sub("pairs");
    pr.only({"count", "r_min_length", "r_max_length", "spread_length", "seed"});
    pr.get("count", c.pair_count);
    pr.get("r_min_length", c.r_min);
    pr.get("r_max_length", c.r_max);
    pr.get("spread_length", c.spread);
    pr.get("seed", c.pair_seed);

    std::vector<std::string> vs;
    r.get("variants", vs);
    if (!vs.empty()) {
        c.variants.clear();
        for (const auto& s : vs) c.variants.push_back(detail::variant_from(s, "variants"));
    }

    auto f = r.sub("fit");
    f.only({"t_min_time", "t_max_time"});
    f.get("t_min_time", c.fit_t_min);
    f.get("t_max_time", c.fit_t_max);

    auto tl = r.sub("tolerances");
    tl.only({"hermitian", "null_rel", "null_gap", "cond_max"});
    tl.get("hermitian", c.tol.hermitian);
    tl.get("null_rel", c.tol.null_rel);
    tl.get("null_gap", c.tol.null_gap);
    tl.get("cond_max", c.tol.cond_max);

    auto o = r.sub("output");
    o.only({"dir"});
    o.get("dir", c.out_dir);

    require(c.nodes >= 16 && c.t_count >= 1 && c.pair_count >= 1, ErrorKind::parse, "config sizes out of range");
    require(c.born_max >= 0 && c.born_max <= 6, ErrorKind::parse, "bad value for config key 'born_max'");
    return c;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::parse, "cannot read config file " + path);
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

inline std::string to_yaml(const ExperimentConfig& c) {
    YAML::Emitter e;
    e.SetDoublePrecision(17);
    e << YAML::BeginMap;
    e << YAML::Key << "name" << YAML::Value << c.name;
    e << YAML::Key << "mass_inv_length" << YAML::Value << c.mass;
    e << YAML::Key << "potential" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "family" << YAML::Value << (c.family == PotentialFamily::scalar ? "scalar" : "upper-channel");
    e << YAML::Key << "profile" << YAML::Value << to_string(c.profile);
    e << YAML::Key << "decay_exponent" << YAML::Value << c.decay_exponent;
    e << YAML::Key << "coupling" << YAML::Value << c.coupling;
    e << YAML::Key << "coupling_at_crossing" << YAML::Value << c.coupling_at_crossing;
    e << YAML::Key << "scan" << YAML::Value << YAML::BeginMap << YAML::Key << "c_min" << YAML::Value << c.scan_c_min
      << YAML::Key << "c_max" << YAML::Value << c.scan_c_max << YAML::Key << "samples" << YAML::Value << c.scan_samples
      << YAML::EndMap;
    e << YAML::Key << "center_length" << YAML::Value << YAML::Flow
      << std::vector<double>{c.center[0], c.center[1], c.center[2], c.center[3]};
    e << YAML::EndMap;
    e << YAML::Key << "grid" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "generator" << YAML::Value << to_string(c.generator);
    e << YAML::Key << "nodes" << YAML::Value << c.nodes;
    e << YAML::Key << "radius_length" << YAML::Value << c.radius;
    e << YAML::Key << "seed" << YAML::Value << c.grid_seed;
    e << YAML::EndMap;
    e << YAML::Key << "window" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "z1_inv_length" << YAML::Value << c.z1;
    e << YAML::Key << "z_min_inv_length" << YAML::Value << c.z_min;
    e << YAML::Key << "dyadic_j" << YAML::Value << YAML::Flow << c.dyadic_j;
    e << YAML::Key << "dyadic_times_time" << YAML::Value << YAML::Flow << c.dyadic_times;
    e << YAML::Key << "dyadic_born" << YAML::Value << c.dyadic_born;
    e << YAML::Key << "dyadic_pairs" << YAML::Value << c.dyadic_pairs;
    e << YAML::EndMap;
    e << YAML::Key << "times" << YAML::Value << YAML::BeginMap << YAML::Key << "from_time" << YAML::Value << c.t_from
      << YAML::Key << "to_time" << YAML::Value << c.t_to << YAML::Key << "count" << YAML::Value << c.t_count
      << YAML::EndMap;
    e << YAML::Key << "pairs" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "count" << YAML::Value << c.pair_count;
    e << YAML::Key << "r_min_length" << YAML::Value << c.r_min;
    e << YAML::Key << "r_max_length" << YAML::Value << c.r_max;
    e << YAML::Key << "spread_length" << YAML::Value << c.spread;
    e << YAML::Key << "seed" << YAML::Value << c.pair_seed;
    e << YAML::EndMap;
    std::vector<std::string> vs;
    for (Variant v : c.variants) vs.push_back(to_string(v));
    e << YAML::Key << "variants" << YAML::Value << YAML::Flow << vs;
    e << YAML::Key << "inverter" << YAML::Value << c.inverter;
    e << YAML::Key << "born_max" << YAML::Value << c.born_max;
    e << YAML::Key << "validate_inversion" << YAML::Value << c.validate_inversion;
    e << YAML::Key << "fit" << YAML::Value << YAML::BeginMap << YAML::Key << "t_min_time" << YAML::Value << c.fit_t_min
      << YAML::Key << "t_max_time" << YAML::Value << c.fit_t_max << YAML::EndMap;
    e << YAML::Key << "tolerances" << YAML::Value << YAML::BeginMap;
    e << YAML::Key << "hermitian" << YAML::Value << c.tol.hermitian;
    e << YAML::Key << "null_rel" << YAML::Value << c.tol.null_rel;
    e << YAML::Key << "null_gap" << YAML::Value << c.tol.null_gap;
    e << YAML::Key << "cond_max" << YAML::Value << c.tol.cond_max;
    e << YAML::EndMap;
    e << YAML::Key << "output" << YAML::Value << YAML::BeginMap << YAML::Key << "dir" << YAML::Value << c.out_dir
      << YAML::EndMap;
    e << YAML::EndMap;
    return std::string(e.c_str()) + "\n";
}

// git blob hash: sha1("blob <size>\0" + content)
inline std::string content_hash(const std::string& content) {
    const std::string blob = "blob " + std::to_string(content.size()) + std::string(1, '\0') + content;
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_Digest(blob.data(), blob.size(), md, &len, EVP_sha1(), nullptr);
    std::string hex;
    char buf[3];
    for (unsigned int i = 0; i < len; ++i) {
        std::snprintf(buf, sizeof buf, "%02x", md[i]);
        hex += buf;
    }
    return hex;
}

// ---------------------------------------------------------------- experiment

inline json to_json(const ThresholdReport& r) {
    return {{"regular", r.regular},
            {"kind", to_string(r.kind)},
            {"dim_S1", r.dim_S1},
            {"dim_S2", r.dim_S2},
            {"rank_Q", r.rank_Q},
            {"smallest_singular_values", r.smallest_singular_values},
            {"reliable", r.reliable},
            {"sigma_max", r.sigma_max},
            {"null_residual", r.null_residual},
            {"s1d0_defect", r.s1d0_defect},
            {"s2_vg1_orthogonality", r.orthogonality},
            {"s2t2s2_definite", r.s2t2s2_definite}};
}

// JN + Feshbach against dense inverses and the near-threshold ratio tests
inline json inversion_validation(const ThresholdAnalysis& a) {
    const BSSpace& s = *a.space;
    json out;
    const auto zs = log_spaced(1e-4, 1e-2, 9);
    auto opnorm = [](const MatX& m) {
        Eigen::SelfAdjointEigenSolver<MatX> es(m.adjoint() * m, Eigen::EigenvaluesOnly);
        return std::sqrt(std::max(0.0, es.eigenvalues().maxCoeff()));
    };
    if (a.report.dim_S1 > 0) {
        double worst = 0.0;
        for (double z : {1e-4, 1e-3, 1e-2, 1e-1})
            for (Branch b : {Branch::plus, Branch::minus}) {
                const MatX dMf = to_frame(a.s1, assemble_delta_M(z, b, s));
                const MatX jn = jensen_nenciu_inverse(a, dMf).inverse, dense = frame_direct_inverse(a, dMf);
                worst = std::max(worst, (jn - dense).norm() / dense.norm());
            }
        out["jn_vs_dense_rel"] = worst;
    }
    std::vector<double> dnorm, scaled;
    for (double z : zs) {
        const MatX dM = assemble_delta_M(z, Branch::plus, s);
        const MatX Mp = a.T0 + dM, Mm = a.T0 + MatX(dM.adjoint());
        const MatX ip = Mp.partialPivLu().inverse(), im = Mm.partialPivLu().inverse();
        if (a.report.regular) {
            // M+^-1 - M-^-1 = -M+^-1 (dM+ - dM-) M-^-1
            dnorm.push_back(opnorm(ip * (dM - MatX(dM.adjoint())) * im));
        } else {
            scaled.push_back(z * z * opnorm(ip));
        }
    }
    if (a.report.regular) {
        const RegularExpansion rex = invert_regular(a);
        std::vector<double> rem;
        for (double z : zs) rem.push_back(opnorm(rex.remainder(a, assemble_delta_M(z, Branch::plus, s), z, Branch::plus)));
        out["regular_remainder_slope"] = fit_decay(zs, rem, FitModel::power).value;
        out["plus_minus_difference_slope"] = fit_decay(zs, dnorm, FitModel::power).value;
    } else if (a.report.kind == ResonanceKind::first) {
        double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
        for (std::size_t i = 0; i < zs.size(); ++i) {
            const double v = scaled[i] * std::abs(std::log(zs[i]));
            lo = std::min(lo, v);
            hi = std::max(hi, v);
        }
        out["kind_first_z2_logz_norm_range"] = {lo, hi};
    } else {
        const double d2 = opnorm(a.s2.S2.basis * a.D2() * a.s2.S2.basis.adjoint());
        out["z2_norm_over_D2"] = scaled.front() / d2;
    }
    return out;
}

struct CsvRow {
    std::string variant;
    double t = 0.0, r = 0.0, max_abs = 0.0;
    int pair = 0;
    std::string window, inverter;
};

struct Report {
    json doc;
    std::vector<CsvRow> rows;
    bool failed = false;

    std::string csv() const {
        std::string out = "variant,t,r,max_abs_entry,pair,window,inverter\n";
        char buf[256];
        for (const auto& r : rows) {
            std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g,%d,%s,%s\n", r.variant.c_str(), r.t, r.r, r.max_abs,
                          r.pair, r.window.c_str(), r.inverter.c_str());
            out += buf;
        }
        return out;
    }
};

struct RunOptions {
    bool classify = true, inversion = true, propagate = true, fits = true, dyadic = true;
};

inline Report run(const ExperimentConfig& cfg, const RunOptions& opt = {}) {
    Report rep;
    json& d = rep.doc;
    const std::string yaml = to_yaml(cfg);
    d["config_echo"] = yaml;
    d["content_hash"] = content_hash(yaml);
    d["name"] = cfg.name;
    d["timings"] = json::object();
    d["stages"] = json::object();
    d["decay_fits"] = json::array();
    auto stage = [&](const std::string& name, const std::function<void()>& f) {
        const auto t0 = std::chrono::steady_clock::now();
        try {
            f();
            d["stages"][name] = "ok";
        } catch (const std::exception& e) {
            d["stages"][name] = std::string("failed: ") + e.what();
            rep.failed = true;
        }
        d["timings"][name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    };

    QuadratureGrid grid;
    std::vector<PointFactorization> pot;
    BSSpace space;
    ThresholdAnalysis an;
    double c = cfg.coupling;
    bool have_space = false, have_analysis = false;
    stage("setup", [&] {
        grid = build_grid(cfg.generator, cfg.nodes, cfg.radius, cfg.grid_seed);
        if (cfg.coupling_at_crossing >= 0) {
            const auto sc = coupling_scan(cfg.potential(1.0), grid, cfg.mass, cfg.scan_c_min, cfg.scan_c_max,
                                          cfg.scan_samples, DiagonalRule::subtraction, false);
            require(static_cast<int>(sc.crossings.size()) > cfg.coupling_at_crossing, ErrorKind::classification,
                    "coupling scan found too few crossings");
            c = sc.crossings[static_cast<std::size_t>(cfg.coupling_at_crossing)].c;
            json cs = json::array();
            for (const auto& x : sc.crossings) cs.push_back({{"c", x.c}, {"multiplicity", x.multiplicity}});
            d["coupling_scan"] = cs;
        }
        d["coupling"] = c;
        pot = sample_potential(cfg.potential(c), grid, cfg.tol);
        space = make_bs_space(grid, pot, cfg.mass);
        d["bs_dimension"] = space.dim;
        have_space = true;
    });
    if (!have_space) return rep;
    if (opt.classify)
        stage("classify", [&] {
            an = analyze_threshold(space, cfg.tol);
            d["threshold_report"] = to_json(an.report);
            have_analysis = true;
        });
    if (opt.inversion && cfg.validate_inversion && have_analysis && space.dim > 0)
        stage("inversion_validation", [&] { d["inversion_validation"] = inversion_validation(an); });

    std::map<std::string, std::vector<double>> sup; // per variant over t
    const auto ts = cfg.times();
    std::vector<int> ft_rank;
    if (opt.propagate)
        stage("propagate", [&] {
            const auto pairs = sample_pairs(cfg.pair_count, cfg.pair_seed, cfg.r_min, cfg.r_max, cfg.spread);
            const auto w = EnergyWindow::low(cfg.z1, cfg.z_min);
            const bool perturbed = space.dim > 0 && (cfg.wants(Variant::full_low) || cfg.wants(Variant::born) ||
                                                     cfg.wants(Variant::tail) || cfg.wants(Variant::residual) ||
                                                     cfg.wants(Variant::Ft));
            PerturbedOptions po;
            const bool regular = !have_analysis || an.report.regular;
            if (cfg.inverter == "auto") po.inverter = regular ? Inverter::direct : Inverter::jensen_nenciu;
            else po.inverter = detail::inverter_from(cfg.inverter);
            po.full = cfg.wants(Variant::full_low) || cfg.wants(Variant::tail) || cfg.wants(Variant::residual) ||
                      cfg.wants(Variant::Ft);
            po.born_max = cfg.wants(Variant::born) || cfg.wants(Variant::tail) ? std::max(cfg.born_max, 1) : 0;
            if (cfg.wants(Variant::tail)) po.born_max = 6;
            po.ft = have_analysis && (an.report.kind == ResonanceKind::first || an.report.kind == ResonanceKind::third) &&
                    (cfg.wants(Variant::Ft) || cfg.wants(Variant::residual));
            d["inverter"] = to_string(po.inverter);
            auto add = [&](const std::string& v, double t, const std::vector<Mat4>& ks) {
                double mx = 0.0;
                for (std::size_t p = 0; p < ks.size(); ++p) {
                    const double e = max_abs_entry(ks[p]);
                    mx = std::max(mx, e);
                    rep.rows.push_back({v, t, pairs[p].r, e, static_cast<int>(p), w.label(), to_string(po.inverter)});
                }
                sup[v].push_back(mx);
            };
            if (!perturbed) {
                for (double t : ts) {
                    std::vector<Mat4> ks;
                    for (const auto& p : pairs) ks.push_back(free_kernel(t, p.x, p.y, cfg.mass, w));
                    add("free", t, ks);
                }
                return;
            }
            const auto amps = perturbed_amplitudes(space, pairs, w, po, have_analysis ? &an : nullptr);
            d["z_grid_nodes"] = amps.zgrid.size();
            d["amplitude_seconds"] = amps.seconds;
            if (!amps.z2_minv_norm.empty() && po.full)
                d["z2_minv_norm_at_z_min"] = amps.z2_minv_norm.front();
            for (double t : ts) {
                const auto k = stone_kernels(amps, t);
                if (cfg.wants(Variant::free)) add("free", t, k.free);
                if (cfg.wants(Variant::born))
                    for (std::size_t b = 0; b < std::min<std::size_t>(k.born.size(), std::max(cfg.born_max, 1)); ++b)
                        add("born-" + std::to_string(b + 1), t, k.born[b]);
                if (cfg.wants(Variant::tail) && !k.tail.empty()) add("tail", t, k.tail);
                if (cfg.wants(Variant::full_low)) add("full-low", t, k.full);
                if (po.ft) {
                    if (cfg.wants(Variant::Ft)) add("F_t", t, k.ft);
                    ft_rank.push_back(k.ft_rank);
                }
                if (cfg.wants(Variant::residual)) add("residual", t, k.residual);
            }
            if (!ft_rank.empty()) d["Ft_rank"] = *std::max_element(ft_rank.begin(), ft_rank.end());
        });
    if (opt.fits && !sup.empty())
        stage("fits", [&] {
            for (const auto& [v, vals] : sup) {
                DecayFit f = fit_decay(ts, vals, v == "F_t" ? FitModel::inverse_log : FitModel::power, cfg.fit_t_min,
                                       cfg.fit_t_max);
                f.variant = v;
                json j = to_json(f);
                if (v == "F_t") {
                    double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
                    for (std::size_t i = 0; i < ts.size(); ++i)
                        if (ts[i] >= cfg.fit_t_min && ts[i] <= cfg.fit_t_max) {
                            lo = std::min(lo, vals[i] * std::log(ts[i]));
                            hi = std::max(hi, vals[i] * std::log(ts[i]));
                        }
                    j["log_t_band"] = {lo, hi};
                }
                d["decay_fits"].push_back(j);
            }
        });
    if (opt.dyadic && !cfg.dyadic_j.empty())
        stage("dyadic", [&] {
            const auto pairs = sample_pairs(cfg.pair_count, cfg.pair_seed, cfg.r_min, cfg.r_max, cfg.spread);
            json rows = json::array();
            double cfree = 0.0, cborn = 0.0;
            for (int j : cfg.dyadic_j) {
                const auto w = EnergyWindow::dyadic(j);
                std::vector<double> born_sup(cfg.dyadic_times.size(), 0.0);
                if (cfg.dyadic_born && space.dim > 0) {
                    std::vector<SamplePair> sub(pairs.begin(), pairs.begin() + std::min<int>(cfg.dyadic_pairs, pairs.size()));
                    PerturbedOptions po;
                    po.full = false;
                    po.born_max = 1;
                    const auto amps = perturbed_amplitudes(space, sub, w, po);
                    for (std::size_t i = 0; i < cfg.dyadic_times.size(); ++i)
                        born_sup[i] = sup_entry(stone_kernels(amps, cfg.dyadic_times[i]).born[0]);
                }
                for (std::size_t i = 0; i < cfg.dyadic_times.size(); ++i) {
                    const double t = cfg.dyadic_times[i];
                    double mx = 0.0;
                    for (const auto& p : pairs) mx = std::max(mx, max_abs_entry(free_kernel(t, p.x, p.y, cfg.mass, w)));
                    json row{{"j", j}, {"t", t}, {"free_sup", mx}, {"free_ratio", mx / free_dyadic_bound(j, t)}};
                    cfree = std::max(cfree, mx / free_dyadic_bound(j, t));
                    if (cfg.dyadic_born && space.dim > 0) {
                        row["born1_sup"] = born_sup[i];
                        row["born1_ratio"] = born_sup[i] / born1_dyadic_bound(j, t);
                        cborn = std::max(cborn, born_sup[i] / born1_dyadic_bound(j, t));
                    }
                    rows.push_back(row);
                }
            }
            d["dyadic"] = {{"rows", rows}, {"free_ratio_max", cfree}};
            if (cfg.dyadic_born) d["dyadic"]["born1_ratio_max"] = cborn;
        });
    d["failed"] = rep.failed;
    return rep;
}

inline void write_report(const Report& rep, const std::string& dir) {
    std::filesystem::create_directories(dir);
    std::ofstream(dir + "/report.json") << rep.doc.dump(2) << "\n";
    std::ofstream(dir + "/kernels.csv") << rep.csv();
}

// reads variant,t,max_abs_entry from a kernels.csv and returns the per-variant sup over pairs
inline std::map<std::string, std::map<double, double>> read_sup_table(const std::string& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorKind::parse, "cannot read " + path);
    std::string line;
    std::getline(in, line);
    require(line.rfind("variant,t,r,max_abs_entry", 0) == 0, ErrorKind::parse, "unexpected CSV header in " + path);
    std::map<std::string, std::map<double, double>> out;
    while (std::getline(in, line)) {
        std::stringstream ss(line);
        std::string v, t, r, e;
        std::getline(ss, v, ',');
        std::getline(ss, t, ',');
        std::getline(ss, r, ',');
        std::getline(ss, e, ',');
        double& slot = out[v][std::stod(t)];
        slot = std::max(slot, std::stod(e));
    }
    return out;
}

} // namespace dirac4d
