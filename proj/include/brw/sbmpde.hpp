#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "brw/engine.hpp"
#include "brw/laws.hpp"

namespace brw {

// psi(u) = b u^{1+beta}; quadratic mechanisms have beta = 1.
struct BranchingMechanism {
    double b = 1.0;
    double beta = 1.0;

    double operator()(double u) const { return b * std::pow(u, 1.0 + beta); }
    static BranchingMechanism quadratic(double b) { return {b, 1.0}; }
    static BranchingMechanism stable(double b, double beta) { return {b, beta}; }
    static BranchingMechanism parse(std::string_view spec) {
        const size_t colon = spec.find(':');
        const std::string_view name = spec.substr(0, colon);
        auto kv = colon == std::string_view::npos
                      ? std::map<std::string, std::string>{}
                      : detail::parse_kv(spec.substr(colon + 1));
        if (name == "quad") return quadratic(detail::to_double(kv.at("b")));
        if (name == "stable")
            return stable(detail::to_double(kv.at("b")), detail::to_double(kv.at("beta")));
        throw std::invalid_argument("unknown mechanism: " + std::string(spec));
    }
    std::string to_string() const {
        if (beta == 1.0) return "quad:b=" + std::to_string(b);
        return "stable:b=" + std::to_string(b) + ",beta=" + std::to_string(beta);
    }
};

// Total-mass solution of u' = -psi(u), u(0) = theta:
// u(t) = (b beta t + theta^{-beta})^{-1/beta}; theta = inf gives (b beta t)^{-1/beta}.
inline double mass_ode(const BranchingMechanism& mech, double t, double theta) {
    if (!(t > 0.0)) throw std::invalid_argument("mass_ode needs t > 0");
    const double base = mech.b * mech.beta * t +
                        (std::isinf(theta) ? 0.0 : std::pow(theta, -mech.beta));
    return std::pow(base, -1.0 / mech.beta);
}

struct PdeGrid {
    int cells = 4096;                 // nodes 0..cells, node spacing rho_max/cells
    double rho_max = 0.0;             // 0 = auto: r + 12 sqrt(eta2 T)
    double cfl = 0.1;                 // reaction CFL: dt <= cfl / (b(1+beta) u_max^beta)
    int min_time_steps = 4000;        // caps dt at T / min_time_steps
    double boundary_tol = 1e-8;       // sizing check on u near rho_max at t = T
};

// u(t, rho) on [0, rho_max], one solve; theta == inf is tagged by the
// extinction_profile ladder.
struct RadialProfile {
    int dim = 2;
    double time = 0.0;
    double theta = 0.0;
    double ball_radius = 0.0;
    double eta2 = 1.0;
    BranchingMechanism mech;
    std::vector<double> rho;
    std::vector<double> values;
    double mass_bound_violation = 0.0;  // max over steps of (u_max - mass ODE bound)
};

// Semilinear log-Laplace equation in radial coordinates,
//   du/dt = (eta2/2)(u'' + (d-1)/rho u') - psi(u),  u(0,.) = theta 1_{[0,r)},
// node-centered second-order differences with the d*u'' origin rule, IMEX
// stepping (backward-Euler diffusion via the Thomas solve, explicit reaction).
// Indicator data enters as a volume-weighted cell average.
inline RadialProfile solve_log_laplace(int d, const BranchingMechanism& mech, double eta2,
                                       double r, double theta, const PdeGrid& grid,
                                       double T) {
    if (d < 2) throw std::invalid_argument("radial solver covers d >= 2");
    if (!(r > 0.0) || !(theta > 0.0) || !(T > 0.0) || !(eta2 > 0.0))
        throw std::invalid_argument("need r, theta, T, eta2 > 0");
    if (std::isinf(theta))
        throw std::invalid_argument("theta = inf is reached through extinction_profile");
    const int m = grid.cells;
    if (m < 16 || m % 2 != 0) throw std::invalid_argument("grid cells must be even, >= 16");
    const double rho_max =
        grid.rho_max > 0.0 ? grid.rho_max : r + 12.0 * std::sqrt(eta2 * T);
    if (rho_max <= r)
        throw std::runtime_error("rho_max below the indicator radius; enlarge the grid");
    const double h = rho_max / m;

    RadialProfile prof;
    prof.dim = d;
    prof.theta = theta;
    prof.ball_radius = r;
    prof.eta2 = eta2;
    prof.mech = mech;
    prof.rho.resize(m + 1);
    for (int i = 0; i <= m; ++i) prof.rho[i] = i * h;

    // volume-weighted overlap of the node cell with [0, r)
    std::vector<double>& u = prof.values;
    u.assign(m + 1, 0.0);
    for (int i = 0; i < m; ++i) {
        const double lo = std::max(0.0, prof.rho[i] - 0.5 * h);
        const double hi = std::min(rho_max, prof.rho[i] + 0.5 * h);
        const double olo = std::min(lo, r), ohi = std::min(hi, r);
        const double cell = std::pow(hi, d) - std::pow(lo, d);
        const double overlap = std::max(0.0, std::pow(ohi, d) - std::pow(olo, d));
        u[i] = theta * std::min(1.0, overlap / cell);
    }

    const double D = 0.5 * eta2;
    std::vector<double> lower(m, 0.0), upper(m, 0.0), diag(m, 0.0);
    diag[0] = -2.0 * d * D / (h * h);
    upper[0] = 2.0 * d * D / (h * h);
    for (int i = 1; i < m; ++i) {
        const double rr = prof.rho[i];
        lower[i] = D * (1.0 / (h * h) - (d - 1) / (2.0 * h * rr));
        upper[i] = D * (1.0 / (h * h) + (d - 1) / (2.0 * h * rr));
        diag[i] = -2.0 * D / (h * h);
    }

    std::vector<double> a(m), b(m), c(m), rhs(m), cp(m), dp(m);
    double t = 0.0;
    while (t < T) {
        double umax = 0.0;
        for (int i = 0; i < m; ++i) umax = std::max(umax, u[i]);
        double dt = T / grid.min_time_steps;
        if (umax > 0.0)
            dt = std::min(dt, grid.cfl / (mech.b * (1.0 + mech.beta) *
                                          std::pow(umax, mech.beta)));
        dt = std::min(dt, T - t);

        for (int i = 0; i < m; ++i) {
            rhs[i] = u[i] - dt * mech(u[i]);
            a[i] = -dt * lower[i];
            b[i] = 1.0 - dt * diag[i];
            c[i] = -dt * upper[i];
        }
        c[m - 1] = 0.0;  // Dirichlet u[m] = 0
        cp[0] = c[0] / b[0];
        dp[0] = rhs[0] / b[0];
        for (int i = 1; i < m; ++i) {
            const double den = b[i] - a[i] * cp[i - 1];
            cp[i] = c[i] / den;
            dp[i] = (rhs[i] - a[i] * dp[i - 1]) / den;
        }
        u[m - 1] = dp[m - 1];
        for (int i = m - 2; i >= 0; --i) u[i] = dp[i] - cp[i] * u[i + 1];
        u[m] = 0.0;
        t += dt;

        double unew_max = 0.0;
        for (int i = 0; i <= m; ++i) {
            if (std::isnan(u[i]) || u[i] < -1e-12)
                throw std::runtime_error(
                    "instability in the log-Laplace solve (value " + std::to_string(u[i]) +
                    " at t=" + std::to_string(t) + "); refine the time step");
            if (u[i] < 0.0) u[i] = 0.0;
            unew_max = std::max(unew_max, u[i]);
        }
        prof.mass_bound_violation =
            std::max(prof.mass_bound_violation, unew_max - mass_ode(mech, t, theta));
    }
    prof.time = T;

    // rho_max sizing: the solution must have died out well before the boundary
    double near_boundary = 0.0;
    for (int i = m - std::max(2, m / 50); i <= m; ++i)
        near_boundary = std::max(near_boundary, u[i]);
    if (near_boundary > grid.boundary_tol * std::max(1.0, theta))
        throw std::runtime_error("solution reaches the grid boundary; enlarge rho_max");
    return prof;
}

struct ThetaLadder {
    double start = 100.0;
    double factor = 10.0;
    double max = 1e8;
    double sup_tol = 1e-4;
};

// theta -> inf limit: climb the ladder until the sup-norm change drops below
// sup_tol, then one Richardson step in 1/theta. Tagged theta = inf.
inline RadialProfile extinction_profile(int d, const BranchingMechanism& mech, double eta2,
                                        double r, double T, const PdeGrid& grid,
                                        const ThetaLadder& ladder = {}) {
    RadialProfile prev, cur;
    double theta = ladder.start;
    double change = kInf;
    std::string trail;
    for (;;) {
        cur = solve_log_laplace(d, mech, eta2, r, theta, grid, T);
        if (!prev.values.empty()) {
            change = 0.0;
            for (std::size_t i = 0; i < cur.values.size(); ++i)
                change = std::max(change, std::fabs(cur.values[i] - prev.values[i]));
            trail += " " + std::to_string(theta) + ":" + std::to_string(change);
            if (change < ladder.sup_tol) break;
            if (theta * ladder.factor > ladder.max)
                throw std::runtime_error("theta ladder did not converge:" + trail);
        }
        prev = cur;
        theta *= ladder.factor;
    }
    // v_theta = v_inf - c theta^{-beta}; one Richardson step on the observed pair
    RadialProfile out = cur;
    const double w = 1.0 / (std::pow(ladder.factor, mech.beta) - 1.0);
    for (std::size_t i = 0; i < out.values.size(); ++i)
        out.values[i] = cur.values[i] + w * (cur.values[i] - prev.values[i]);
    out.theta = kInf;
    return out;
}

// F = surface(d) * int_0^rho_max v(T, rho) rho^{d-1} drho (composite Simpson)
// plus a fitted Gaussian-tail extrapolation beyond the grid.
inline double compute_F(const RadialProfile& prof) {
    if (!std::isinf(prof.theta))
        throw std::invalid_argument("compute_F expects the theta = inf profile");
    const int m = static_cast<int>(prof.values.size()) - 1;
    const double h = prof.rho[1] - prof.rho[0];
    const int d = prof.dim;
    auto g = [&](int i) { return prof.values[i] * std::pow(prof.rho[i], d - 1); };
    double simpson = g(0) + g(m);
    for (int i = 1; i < m; i += 2) simpson += 4.0 * g(i);
    for (int i = 2; i < m; i += 2) simpson += 2.0 * g(i);
    const double F_grid = sphere_surface(d) * simpson * h / 3.0;

    // tail beyond rho_max: fit log v = a + lambda rho^2 on the outer decade
    double tail = 0.0;
    {
        std::vector<std::pair<double, double>> pts;  // (rho^2, log v)
        for (int i = m * 9 / 10; i <= m; ++i)
            if (prof.values[i] > 1e-250)
                pts.push_back({prof.rho[i] * prof.rho[i], std::log(prof.values[i])});
        if (pts.size() >= 8) {
            double sx = 0, sy = 0, sxx = 0, sxy = 0;
            for (auto& [x, y] : pts) {
                sx += x;
                sy += y;
                sxx += x * x;
                sxy += x * y;
            }
            const double n = static_cast<double>(pts.size());
            const double lambda = (n * sxy - sx * sy) / (n * sxx - sx * sx);
            const double aa = (sy - lambda * sx) / n;
            if (lambda < 0.0) {
                const double rmax = prof.rho[m];
                double rho = rmax, acc = 0.0;
                for (;;) {
                    const double v = std::exp(aa + lambda * rho * rho);
                    const double term = v * std::pow(rho, d - 1) * h;
                    acc += term;
                    rho += h;
                    if (term < 1e-18 * std::max(acc, 1e-300) || rho > 10.0 * rmax) break;
                }
                tail = sphere_surface(d) * acc;
            } else {
                tail = kInf;  // no decay detected
            }
        }
    }
    if (!(tail <= 0.01 * std::max(F_grid, 1e-300)))
        throw std::runtime_error("tail extrapolation above 1% of F; enlarge rho_max");
    return F_grid + tail;
}

struct ScaleInvarianceReport {
    double r = 0.0;
    double F_direct = 0.0;  // T = 1, radius r
    double F_scaled = 0.0;  // T = r^{-2}, radius 1
    double rel_diff = 0.0;
};

// d = 2, quadratic mechanism: F(T=1, radius r) must equal F(T=r^{-2}, radius 1)
// by the lambda-initial-measure scale invariance.
inline ScaleInvarianceReport scale_invariance_check(const BranchingMechanism& mech,
                                                    double eta2, double r,
                                                    const PdeGrid& grid,
                                                    const ThetaLadder& ladder = {}) {
    if (mech.beta != 1.0)
        throw std::invalid_argument("the scale-invariance identity is for quadratic psi");
    ScaleInvarianceReport rep;
    rep.r = r;
    rep.F_direct = compute_F(extinction_profile(2, mech, eta2, r, 1.0, grid, ladder));
    rep.F_scaled =
        compute_F(extinction_profile(2, mech, eta2, 1.0, 1.0 / (r * r), grid, ladder));
    rep.rel_diff = std::fabs(rep.F_direct - rep.F_scaled) /
                   std::max(std::fabs(rep.F_direct), 1e-300);
    return rep;
}

struct CalibrationResult {
    double b = 0.0;            // matched against the survival recursion
    double scaled_limit = 0.0; // n^{1/beta} Q_n at the calibration n
    double paper_value = 0.0;  // (1/beta) kappa Gamma(1-beta) (stable) or sigma^2 (thm 1.1)
    double half_sigma2 = 0.0;  // sigma^2/2 candidate (finite variance only)
};

// Matches the SBM total-mass extinction exponent (b beta)^{-1/beta} to the
// exact survival recursion limit n^{1/beta} Q_n, so PDE-vs-simulation
// comparisons are convention-proof. Finite variance: b -> sigma^2/2;
// stable(beta): b -> (1/beta) kappa(beta) Gamma(1-beta) = 1/(1+beta).
inline CalibrationResult calibrate_b(const OffspringLaw& off, std::int64_t n = 10000) {
    CalibrationResult res;
    const double beta = off.tail_index();
    const double q = survival_recursion(off, n);
    res.scaled_limit = std::pow(static_cast<double>(n), 1.0 / beta) * q;
    res.b = std::pow(res.scaled_limit, -beta) / beta;
    if (off.finite_variance()) {
        res.paper_value = off.variance();  // Theorem 1.1 states psi(u) = sigma^2 u^2
        res.half_sigma2 = 0.5 * off.variance();
    } else {
        res.paper_value = off.kappa() * std::tgamma(1.0 - beta) / beta;
    }
    return res;
}

}  // namespace brw
