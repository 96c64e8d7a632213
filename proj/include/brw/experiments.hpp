#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "brw/emptyball.hpp"
#include "brw/engine.hpp"
#include "brw/laws.hpp"
#include "brw/maxdisp.hpp"
#include "brw/parallel.hpp"
#include "brw/sbmpde.hpp"
#include "brw/spine.hpp"
#include "brw/stats.hpp"

namespace brw {

// Flat experiment description; round-trips through a canonical string so runs
// can be reproduced from their output metadata alone.
struct ExperimentConfig {
    std::string subcommand = "emptyball";
    std::string offspring = "binary";
    std::string step = "gauss:d=2,eta2=1";
    int dim = 2;
    std::int64_t n = 100;
    std::string regime = "auto";  // auto | diffusive | smallball | fixed
    std::vector<double> r_grid = {0.25, 0.5, 0.75, 1.0};
    std::vector<double> x_grid = {2.5, 5.0, 10.0, 20.0};
    std::uint64_t replicates = 100000;
    std::uint64_t direct_replicates = 20000;
    std::string estimator = "both";  // occupation | direct | both
    std::int64_t gen_cap = 0;        // 0 = sized from x_grid
    std::uint64_t seed = 1;
    int workers = 0;  // 0 = BRWLAB_WORKERS or hardware
    std::int64_t generation_cap = 1'000'000;
    std::int64_t progeny_cap = 1'000'000'000;
    std::string out_dir = ".";
    // spine
    int spine_K = 64;
    int y_samples = 256;
    // pde
    std::string mech = "";  // empty = calibrated from the offspring law
    double eta2 = 1.0;
    double T = 1.0;
    double pde_r = 0.5;
    int pde_cells = 4096;
    double rho_max = 0.0;
    double theta = kInf;
    bool with_pde = false;

    Caps caps() const { return Caps{generation_cap, progeny_cap}; }
    int resolved_workers() const { return workers > 0 ? workers : default_workers(); }

    std::string canonical_string() const {
        std::map<std::string, std::string> kv;
        kv["subcommand"] = subcommand;
        kv["offspring"] = offspring;
        kv["step"] = step;
        kv["dim"] = std::to_string(dim);
        kv["n"] = std::to_string(n);
        kv["regime"] = regime;
        kv["r_grid"] = join(r_grid);
        kv["x_grid"] = join(x_grid);
        kv["replicates"] = std::to_string(replicates);
        kv["direct_replicates"] = std::to_string(direct_replicates);
        kv["estimator"] = estimator;
        kv["gen_cap"] = std::to_string(gen_cap);
        kv["seed"] = std::to_string(seed);
        kv["workers"] = std::to_string(workers);
        kv["generation_cap"] = std::to_string(generation_cap);
        kv["progeny_cap"] = std::to_string(progeny_cap);
        kv["out_dir"] = out_dir;
        kv["spine_K"] = std::to_string(spine_K);
        kv["y_samples"] = std::to_string(y_samples);
        kv["mech"] = mech;
        kv["eta2"] = fmt_g17(eta2);
        kv["T"] = fmt_g17(T);
        kv["pde_r"] = fmt_g17(pde_r);
        kv["pde_cells"] = std::to_string(pde_cells);
        kv["rho_max"] = fmt_g17(rho_max);
        kv["theta"] = fmt_g17(theta);
        kv["with_pde"] = with_pde ? "1" : "0";
        std::string s;
        for (const auto& [k, v] : kv) {
            if (!s.empty()) s += ";";
            s += k + "=" + v;
        }
        return s;
    }

    static ExperimentConfig from_canonical_string(const std::string& s) {
        ExperimentConfig c;
        std::map<std::string, std::string> kv;
        size_t pos = 0;
        while (pos < s.size()) {
            size_t semi = s.find(';', pos);
            if (semi == std::string::npos) semi = s.size();
            const std::string item = s.substr(pos, semi - pos);
            const size_t eq = item.find('=');
            if (eq == std::string::npos)
                throw std::invalid_argument("bad config item: " + item);
            kv[item.substr(0, eq)] = item.substr(eq + 1);
            pos = semi + 1;
        }
        auto get = [&](const char* k) -> const std::string& { return kv.at(k); };
        c.subcommand = get("subcommand");
        c.offspring = get("offspring");
        c.step = get("step");
        c.dim = detail::to_int(get("dim"));
        c.n = std::stoll(get("n"));
        c.regime = get("regime");
        c.r_grid = split(get("r_grid"));
        c.x_grid = split(get("x_grid"));
        c.replicates = std::stoull(get("replicates"));
        c.direct_replicates = std::stoull(get("direct_replicates"));
        c.estimator = get("estimator");
        c.gen_cap = std::stoll(get("gen_cap"));
        c.seed = std::stoull(get("seed"));
        c.workers = detail::to_int(get("workers"));
        c.generation_cap = std::stoll(get("generation_cap"));
        c.progeny_cap = std::stoll(get("progeny_cap"));
        c.out_dir = get("out_dir");
        c.spine_K = detail::to_int(get("spine_K"));
        c.y_samples = detail::to_int(get("y_samples"));
        c.mech = get("mech");
        c.eta2 = detail::to_double(get("eta2"));
        c.T = detail::to_double(get("T"));
        c.pde_r = detail::to_double(get("pde_r"));
        c.pde_cells = detail::to_int(get("pde_cells"));
        c.rho_max = detail::to_double(get("rho_max"));
        c.theta = get("theta") == "inf" ? kInf : detail::to_double(get("theta"));
        c.with_pde = get("with_pde") == "1";
        return c;
    }

    static std::string join(const std::vector<double>& v) {
        std::string s;
        for (double x : v) {
            if (!s.empty()) s += ",";
            s += fmt_g17(x);
        }
        return s;
    }
    static std::vector<double> split(const std::string& s) {
        std::vector<double> v;
        size_t pos = 0;
        while (pos < s.size()) {
            size_t comma = s.find(',', pos);
            if (comma == std::string::npos) comma = s.size();
            v.push_back(detail::to_double(s.substr(pos, comma - pos)));
            pos = comma + 1;
        }
        return v;
    }
};

inline RegimeKind resolve_regime(const std::string& name, const OffspringLaw& off, int dim) {
    if (name == "diffusive") return RegimeKind::diffusive;
    if (name == "smallball") return RegimeKind::smallball;
    if (name == "fixed") return RegimeKind::fixed;
    if (name != "auto") throw std::invalid_argument("unknown regime: " + name);
    const double bd = off.tail_index() * dim;
    if (!off.finite_variance() && bd < 2.0) return RegimeKind::smallball;
    if ((off.finite_variance() && dim == 2) || std::fabs(bd - 2.0) < 1e-12)
        return RegimeKind::diffusive;
    return RegimeKind::fixed;
}

// --- survival ---

struct SurvivalResult {
    double q_n = 0.0;
    double scaled = 0.0;  // n^{1/beta} Q_n
    double limit = 0.0;   // 2/sigma^2 or ((1+beta)/beta)^{1/beta}
};

inline SurvivalResult run_survival(const ExperimentConfig& cfg) {
    const auto off = OffspringLaw::parse(cfg.offspring);
    SurvivalResult res;
    res.q_n = survival_recursion(off, cfg.n);
    const double beta = off.tail_index();
    res.scaled = std::pow(static_cast<double>(cfg.n), 1.0 / beta) * res.q_n;
    res.limit = off.finite_variance()
                    ? 2.0 / off.variance()
                    : std::pow((1.0 + beta) / beta, 1.0 / beta);
    std::string csv = "offspring,n,q_n,scaled,limit\n";
    csv += off.to_string() + "," + std::to_string(cfg.n) + "," + fmt_g17(res.q_n) + "," +
           fmt_g17(res.scaled) + "," + fmt_g17(res.limit) + "\n";
    std::filesystem::create_directories(cfg.out_dir);
    write_file(cfg.out_dir + "/survival.csv", csv);
    return res;
}

// --- maxdisp ---

inline std::vector<TailEstimate> run_maxdisp(const ExperimentConfig& cfg) {
    const auto off = OffspringLaw::parse(cfg.offspring);
    const auto step = StepLaw::parse(cfg.step);
    std::int64_t cap = cfg.gen_cap;
    if (cap <= 0) {
        const double x_max = *std::max_element(cfg.x_grid.begin(), cfg.x_grid.end());
        cap = static_cast<std::int64_t>(100.0 * x_max * x_max);
    }
    const auto tails = estimate_M_tail(off, step, cfg.x_grid, cfg.replicates, cap,
                                       cfg.caps(), cfg.seed, cfg.resolved_workers());
    std::string csv = "x,p_hat,se,bias_bound,scaled_value,target_constant\n";
    for (const auto& t : tails)
        csv += fmt_g17(t.x) + "," + fmt_g17(t.p_hat) + "," + fmt_g17(t.se) + "," +
               fmt_g17(t.truncation_bias_bound) + "," + fmt_g17(t.scaled_value) + "," +
               fmt_g17(t.target_constant) + "\n";
    std::filesystem::create_directories(cfg.out_dir);
    write_file(cfg.out_dir + "/maxdisp.csv", csv);
    return tails;
}

// --- emptyball ---

struct EmptyballRow {
    std::string estimator;
    double r = 0.0;
    double p_hat = 0.0;
    double se = 0.0;
    double bias_budget = 0.0;
    std::optional<double> predicted;
    std::string pred_source;
};

struct EmptyballResult {
    ScalingRegime regime;
    std::vector<EmptyballRow> rows;
    std::string csv;
};

inline EmptyballResult run_emptyball(const ExperimentConfig& cfg) {
    const auto off = OffspringLaw::parse(cfg.offspring);
    const auto step = StepLaw::parse(cfg.step);
    if (step.dim() != cfg.dim)
        throw std::invalid_argument("step dimension differs from --dim");
    const RegimeKind kind = resolve_regime(cfg.regime, off, cfg.dim);
    EmptyballResult res;
    res.regime = ScalingRegime::make(kind, cfg.n, off, cfg.dim);

    // closed-form prediction in the smallball regime
    std::optional<double> closed;
    if (kind == RegimeKind::smallball) {
        const double beta = off.tail_index();
        closed = std::pow(1.0 / beta, 1.0 / beta);
    }
    // calibrated PDE prediction (diffusive regime, isotropic steps)
    std::map<double, double> pde_pred;
    if (cfg.with_pde) {
        if (kind != RegimeKind::diffusive)
            throw std::invalid_argument("PDE predictions apply to the diffusive regime");
        const auto cal = calibrate_b(off);
        const auto mech = cfg.mech.empty()
                              ? BranchingMechanism{cal.b, off.tail_index()}
                              : BranchingMechanism::parse(cfg.mech);
        PdeGrid grid;
        grid.cells = cfg.pde_cells;
        for (double r : cfg.r_grid) {
            const auto prof =
                extinction_profile(cfg.dim, mech, step.eta2(), r, 1.0, grid);
            pde_pred[r] = std::exp(-compute_F(prof));
        }
    }

    if (cfg.estimator == "occupation" || cfg.estimator == "both") {
        const auto occ = estimate_F(res.regime, off, step, cfg.r_grid, cfg.replicates,
                                    cfg.caps(), {}, cfg.seed, cfg.resolved_workers());
        for (const auto& e : occ) {
            EmptyballRow row;
            row.estimator = "occupation";
            row.r = e.r;
            row.p_hat = e.p_pred;
            row.se = e.se_p;
            row.bias_budget = e.truncated_fraction;
            if (closed) {
                row.predicted = std::exp(-ball_volume(cfg.dim, e.r) * *closed);
                row.pred_source = "closed-form";
            } else if (pde_pred.count(e.r)) {
                row.predicted = pde_pred[e.r];
                row.pred_source = "pde";
            }
            res.rows.push_back(row);
        }
    }
    if (cfg.estimator == "direct" || cfg.estimator == "both") {
        const auto direct =
            estimate_direct(res.regime, off, step, cfg.r_grid, cfg.direct_replicates, {},
                            cfg.caps(), cfg.seed, cfg.resolved_workers());
        for (const auto& e : direct.estimates) {
            EmptyballRow row;
            row.estimator = "direct";
            row.r = e.r;
            row.p_hat = e.p_hat;
            row.se = e.se;
            row.bias_budget = e.bias_budget;
            if (closed) {
                row.predicted = std::exp(-ball_volume(cfg.dim, e.r) * *closed);
                row.pred_source = "closed-form";
            } else if (pde_pred.count(e.r)) {
                row.predicted = pde_pred[e.r];
                row.pred_source = "pde";
            }
            res.rows.push_back(row);
        }
    }

    std::string csv = "regime,d,n,r,estimator,p_hat,se,bias_budget,predicted,pred_source\n";
    for (const auto& row : res.rows) {
        csv += std::string(regime_name(kind)) + "," + std::to_string(cfg.dim) + "," +
               std::to_string(cfg.n) + "," + fmt_g17(row.r) + "," + row.estimator + "," +
               fmt_g17(row.p_hat) + "," + fmt_g17(row.se) + "," + fmt_g17(row.bias_budget) +
               "," + (row.predicted ? fmt_g17(*row.predicted) : "") + "," +
               row.pred_source + "\n";
    }
    res.csv = csv;
    std::filesystem::create_directories(cfg.out_dir);
    write_file(cfg.out_dir + "/emptyball.csv", csv);
    return res;
}

// --- spine ---

inline IFunctionalEstimate run_spine(const ExperimentConfig& cfg) {
    const auto off = OffspringLaw::parse(cfg.offspring);
    const auto step = StepLaw::parse(cfg.step);
    const double r = cfg.r_grid.empty() ? 1.0 : cfg.r_grid.front();
    const auto est = estimate_I(off, step, r, cfg.spine_K, cfg.replicates, cfg.y_samples,
                                cfg.caps(), cfg.seed, cfg.resolved_workers());
    std::string csv = "r,K,I_hat,se,trunc_bound,exp_neg_I\n";
    csv += fmt_g17(est.r) + "," + std::to_string(est.K) + "," + fmt_g17(est.I_hat) + "," +
           fmt_g17(est.se) + "," + fmt_g17(est.truncation_bound) + "," +
           fmt_g17(std::exp(-est.I_hat)) + "\n";
    std::filesystem::create_directories(cfg.out_dir);
    write_file(cfg.out_dir + "/spine.csv", csv);
    nlohmann::ordered_json fit;
    fit["c"] = fmt_g17(est.fit_c);
    fit["exponent"] = fmt_g17(est.fit_exponent);
    fit["activation_fraction"] = fmt_g17(est.activation_fraction);
    fit["I_half_K"] = fmt_g17(est.I_half);
    write_file(cfg.out_dir + "/spine_fit.json", fit.dump(2) + "\n");
    return est;
}

// --- pde ---

struct PdeResult {
    RadialProfile profile;
    double F = 0.0;
};

inline PdeResult run_pde(const ExperimentConfig& cfg) {
    if (cfg.mech.empty()) throw std::invalid_argument("pde needs --mech (e.g. quad:b=0.5)");
    const auto mech = BranchingMechanism::parse(cfg.mech);
    PdeGrid grid;
    grid.cells = cfg.pde_cells;
    grid.rho_max = cfg.rho_max;
    PdeResult res;
    if (std::isinf(cfg.theta)) {
        res.profile = extinction_profile(cfg.dim, mech, cfg.eta2, cfg.pde_r, cfg.T, grid);
        res.F = compute_F(res.profile);
    } else {
        res.profile =
            solve_log_laplace(cfg.dim, mech, cfg.eta2, cfg.pde_r, cfg.theta, grid, cfg.T);
        res.F = 0.0;
    }
    std::string prof_csv = "rho,v\n";
    for (std::size_t i = 0; i < res.profile.rho.size(); ++i)
        prof_csv += fmt_g17(res.profile.rho[i]) + "," + fmt_g17(res.profile.values[i]) + "\n";
    std::filesystem::create_directories(cfg.out_dir);
    write_file(cfg.out_dir + "/pde_profile.csv", prof_csv);
    std::string f_csv = "d,r,T,b,beta,F,exp_neg_F\n";
    f_csv += std::to_string(cfg.dim) + "," + fmt_g17(cfg.pde_r) + "," + fmt_g17(cfg.T) + "," +
             fmt_g17(mech.b) + "," + fmt_g17(mech.beta) + "," + fmt_g17(res.F) + "," +
             fmt_g17(std::isinf(cfg.theta) ? std::exp(-res.F) : 0.0) + "\n";
    write_file(cfg.out_dir + "/pde_F.csv", f_csv);
    return res;
}

// --- compare: simulation vs theory with explicit tolerance rules ---

inline ComparisonReport run_compare(const ExperimentConfig& cfg) {
    ExperimentConfig ecfg = cfg;
    ecfg.estimator = "both";
    const auto res = run_emptyball(ecfg);

    ComparisonReport rep;
    rep.meta["config"] = cfg.canonical_string();
    rep.meta["regime"] = regime_name(res.regime.kind);
    // occupation vs direct per r, and each vs prediction when present
    std::map<double, const EmptyballRow*> occ, dir;
    for (const auto& row : res.rows)
        (row.estimator == "occupation" ? occ : dir)[row.r] = &row;
    for (const auto& [r, o] : occ) {
        if (!dir.count(r)) continue;
        const auto* dptr = dir[r];
        ComparisonItem item;
        item.name = "estimator_agreement_r=" + fmt_g17(r);
        item.observed = o->p_hat;
        item.predicted = dptr->p_hat;
        item.se = std::sqrt(o->se * o->se + dptr->se * dptr->se);
        item.bias = o->bias_budget + dptr->bias_budget;
        item.rule = ToleranceRule{3.0, 1.0, 0.0};
        item.pass = std::fabs(item.observed - item.predicted) <=
                    item.rule.evaluate(item.se, item.bias);
        rep.items.push_back(item);
        if (o->predicted) {
            ComparisonItem p;
            p.name = "occupation_vs_" + o->pred_source + "_r=" + fmt_g17(r);
            p.observed = o->p_hat;
            p.predicted = *o->predicted;
            p.se = o->se;
            p.bias = o->bias_budget;
            p.rule = ToleranceRule{3.0, 1.0, 0.05};
            p.pass = std::fabs(p.observed - p.predicted) <= p.rule.evaluate(p.se, p.bias);
            rep.items.push_back(p);
        }
    }
    std::filesystem::create_directories(cfg.out_dir);
    write_file(cfg.out_dir + "/compare.json", rep.to_json().dump(2) + "\n");
    write_file(cfg.out_dir + "/compare.csv", rep.to_csv());
    return rep;
}

}  // namespace brw
