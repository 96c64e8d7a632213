#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "brw/engine.hpp"
#include "brw/parallel.hpp"

namespace brw {

// One point of the tail of M = max_{n>=0} max_{u in Z_n} S_u (d=1).
struct TailEstimate {
    double x = 0.0;
    double p_hat = 0.0;
    double se = 0.0;
    std::uint64_t replicates = 0;
    double truncation_bias_bound = 0.0;  // Q_{gen cap}, exact recursion value
    double scaled_value = 0.0;           // x^{2/beta} * p_hat (beta = 1 if sigma^2 < inf)
    double target_constant = 0.0;
};

// lim x^{2/beta} P(M >= x): 6 eta^2/sigma^2 (finite variance) or the stable
// constant ((beta+2) eta^2 / (beta kappa Gamma(1-beta)))^{1/beta}.
inline double m_tail_constant(const OffspringLaw& off, const StepLaw& step) {
    const double eta2 = step.eta2();
    if (off.finite_variance()) return 6.0 * eta2 / off.variance();
    const double beta = off.tail_index();
    const double kg = off.kappa() * std::tgamma(1.0 - beta);
    return std::pow((beta + 2.0) * eta2 / (beta * kg), 1.0 / beta);
}

// P(M >= x) for every x in the grid, all thresholds read off the same trees.
// Trees run to extinction or gen_cap; the cap bias is bracketed by Q_{gen_cap}.
inline std::vector<TailEstimate> estimate_M_tail(const OffspringLaw& off, const StepLaw& step,
                                                 const std::vector<double>& x_grid,
                                                 std::uint64_t replicates,
                                                 std::int64_t gen_cap, const Caps& caps,
                                                 std::uint64_t seed, int workers,
                                                 std::string_view tag = "maxdisp") {
    if (step.dim() != 1) throw std::invalid_argument("maximal displacement needs d = 1");
    if (x_grid.empty() || replicates == 0) throw std::invalid_argument("empty request");
    const double x_max = *std::max_element(x_grid.begin(), x_grid.end());
    const double beta = off.tail_index();
    const double target = m_tail_constant(off, step);
    const double q_cap = survival_recursion(off, gen_cap);
    // cap sizing against the asymptotic tail at the largest threshold
    const double expected_tail = target / std::pow(x_max, 2.0 / beta);
    if (q_cap > 0.01 * expected_tail) {
        const std::int64_t needed =
            generations_until_survival_below(off, 0.01 * expected_tail);
        throw std::runtime_error("generation cap too small for x_max=" +
                                 std::to_string(x_max) + ": need gen_cap >= " +
                                 std::to_string(needed));
    }

    Caps run_caps = caps;
    run_caps.generation_cap = std::min(run_caps.generation_cap, gen_cap);
    struct Chunk {
        std::vector<std::uint64_t> ge;
    };
    const std::uint64_t tag_hash = fnv1a(tag);
    const auto chunks = parallel_chunks<Chunk>(
        replicates, 2048, workers, [&](std::uint64_t, std::uint64_t b, std::uint64_t e) {
            Chunk ch;
            ch.ge.assign(x_grid.size(), 0);
            TreeWorkspace ws;
            TreeRunOptions opt;
            opt.track_running_max = true;
            opt.keep_final = false;
            for (std::uint64_t i = b; i < e; ++i) {
                Rng rng(seed, tag_hash, i);
                const TreeRunStats stats =
                    run_tree(off, step, gen_cap, run_caps, rng, opt, &ws);
                const double m = stats.running_max[0];
                for (std::size_t k = 0; k < x_grid.size(); ++k)
                    ch.ge[k] += m >= x_grid[k] ? 1u : 0u;
            }
            return ch;
        });

    std::vector<TailEstimate> out(x_grid.size());
    for (std::size_t k = 0; k < x_grid.size(); ++k) {
        std::uint64_t ge = 0;
        for (const auto& ch : chunks) ge += ch.ge[k];
        auto& est = out[k];
        est.x = x_grid[k];
        est.replicates = replicates;
        est.p_hat = static_cast<double>(ge) / static_cast<double>(replicates);
        est.se = std::sqrt(est.p_hat * (1.0 - est.p_hat) / static_cast<double>(replicates));
        est.truncation_bias_bound = q_cap;
        est.scaled_value = std::pow(est.x, 2.0 / beta) * est.p_hat;
        est.target_constant = target;
    }
    return out;
}

// phi(y) = (1 + sigma y / (sqrt(6) eta))^{-2}, the tail profile
// u(x + y/sqrt(u(x)))/u(x) -> phi(y).
inline double phi_profile(double y, double sigma2, double eta2) {
    if (y < 0.0 || !(sigma2 > 0.0) || !(eta2 > 0.0))
        throw std::invalid_argument("phi_profile needs y >= 0, sigma2 > 0, eta2 > 0");
    const double t = 1.0 + std::sqrt(sigma2) * y / (std::sqrt(6.0) * std::sqrt(eta2));
    return 1.0 / (t * t);
}

struct MnScaledEstimate {
    double statistic = 0.0;  // n^{1/beta} * p_hat(M_{floor(n r)} > x sqrt(n))
    double se = 0.0;
    double p_hat = 0.0;
    std::uint64_t replicates = 0;
};

// Generation-exact maximum: statistic n^{1/beta} P(M_{floor(n r)} > x sqrt(n)),
// bounded by C_beta r / x^{2+2/beta} uniformly in n.
inline MnScaledEstimate estimate_Mn_scaled(const OffspringLaw& off, const StepLaw& step,
                                           std::int64_t n, double r, double x,
                                           std::uint64_t replicates, const Caps& caps,
                                           std::uint64_t seed, int workers,
                                           std::string_view tag = "maxdisp.Mn") {
    if (step.dim() != 1) throw std::invalid_argument("M_n statistic needs d = 1");
    if (n < 1 || !(r > 0.0) || !(x > 0.0)) throw std::invalid_argument("need n>=1, r>0, x>0");
    const std::int64_t gens = static_cast<std::int64_t>(static_cast<double>(n) * r);
    const double threshold = x * std::sqrt(static_cast<double>(n));
    const std::uint64_t tag_hash = fnv1a(tag);
    const auto chunks = parallel_chunks<std::uint64_t>(
        replicates, 2048, workers, [&](std::uint64_t, std::uint64_t b, std::uint64_t e) {
            std::uint64_t over = 0;
            TreeWorkspace ws;
            TreeRunOptions opt;
            opt.keep_final = true;
            for (std::uint64_t i = b; i < e; ++i) {
                Rng rng(seed, tag_hash, i);
                const TreeRunStats stats = run_tree(off, step, gens, caps, rng, opt, &ws);
                const auto& buf = stats.final_buffer;
                double m = -kInf;
                for (double v : buf.positions) m = std::max(m, v);
                over += m > threshold ? 1u : 0u;
            }
            return over;
        });
    std::uint64_t over = 0;
    for (const auto c : chunks) over += c;
    MnScaledEstimate est;
    est.replicates = replicates;
    est.p_hat = static_cast<double>(over) / static_cast<double>(replicates);
    const double scale = std::pow(static_cast<double>(n), 1.0 / off.tail_index());
    est.statistic = scale * est.p_hat;
    est.se = scale * std::sqrt(est.p_hat * (1.0 - est.p_hat) /
                               static_cast<double>(replicates));
    return est;
}

}  // namespace brw
