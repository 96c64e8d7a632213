#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "brw/engine.hpp"
#include "brw/parallel.hpp"

namespace brw {

// Draw from the size-biased offspring law p*_k = k p_k (never 0 for critical laws).
inline std::uint64_t sample_size_biased_offspring(const OffspringLaw& off, Rng& rng) {
    return off.sample_size_biased(rng);
}

// One realization of the size-biased tree along a spine of depth K.
// Level k (1-based) holds the brothers of w_{k+1}: their displacements X_u
// from the spine position S_{w_k}, and each brother's subtree particles at
// depth k-1, stored relative to the brother's own root.
struct SpineRealization {
    int dim = 1;
    int K = 0;
    std::vector<double> spine_positions;  // K * d, S_{w_1} .. S_{w_K}
    struct Level {
        std::vector<double> brother_displacements;  // nb * d
        std::vector<double> subtree_offsets;        // concatenated, relative to each root
        std::vector<std::uint32_t> subtree_sizes;   // per brother
        bool truncated = false;
    };
    std::vector<Level> levels;  // levels[k-1] for k = 1..K
};

inline SpineRealization grow_spine(const OffspringLaw& off, const StepLaw& step, int K,
                                   const Caps& caps, Rng& rng, TreeWorkspace* ws = nullptr) {
    if (K < 1) throw std::invalid_argument("spine depth K >= 1");
    const int d = step.dim();
    SpineRealization sr;
    sr.dim = d;
    sr.K = K;
    sr.spine_positions.assign(static_cast<std::size_t>(K) * d, 0.0);
    sr.levels.resize(K);
    TreeWorkspace local;
    if (!ws) ws = &local;

    double pos[StepLaw::kMaxDim] = {0.0};
    double dx[StepLaw::kMaxDim];
    TreeRunOptions opt;
    opt.keep_final = true;
    for (int k = 1; k <= K; ++k) {
        // the chosen child's displacement is an unbiased step
        step.sample(rng, dx);
        for (int j = 0; j < d; ++j) {
            pos[j] += dx[j];
            sr.spine_positions[static_cast<std::size_t>(k - 1) * d + j] = pos[j];
        }
        auto& level = sr.levels[k - 1];
        const std::uint64_t children = off.sample_size_biased(rng);
        const std::uint64_t brothers = children - 1;
        for (std::uint64_t u = 0; u < brothers; ++u) {
            step.sample(rng, dx);
            for (int j = 0; j < d; ++j) level.brother_displacements.push_back(dx[j]);
            const TreeRunStats sub = run_tree(off, step, k - 1, caps, rng, opt, ws);
            if (sub.truncated) level.truncated = true;
            level.subtree_sizes.push_back(
                static_cast<std::uint32_t>(sub.final_buffer.count()));
            level.subtree_offsets.insert(level.subtree_offsets.end(),
                                         sub.final_buffer.positions.begin(),
                                         sub.final_buffer.positions.end());
        }
    }
    return sr;
}

struct IFunctionalEstimate {
    double r = 0.0;
    int K = 0;
    double I_hat = 0.0;
    double se = 0.0;
    double truncation_bound = 0.0;  // bound on the dropped sum_{k>K} contribution
    std::uint64_t samples = 0;
    double I_half = 0.0;            // same realizations, spine truncated at K/2
    double fit_c = 0.0;             // activation fit q_k ~ c k^{-d beta/2}
    double fit_exponent = 0.0;
    double activation_fraction = 0.0;  // realizations with any active level <= K
};

namespace detail {

inline double zeta_tail(double a, double from) {
    // sum_{k > from} k^{-a}, a > 1
    double s = 0.0;
    double k = from + 1.0;
    for (; k <= from + 1e6; k += 1.0) {
        const double t = std::pow(k, -a);
        s += t;
        if (t < 1e-16 * s) return s;
    }
    return s + std::pow(k, 1.0 - a) / (a - 1.0);
}

}  // namespace detail

// Monte Carlo for I_{B(r)} = E_{Q*}[ int_{B(r)} (1 + sum_k Y_k(y - S_{w_k}))^{-1} dy ],
// spine truncated at K with an empirically calibrated bound on the dropped
// levels. Dropping levels can only increase the integrand, so the point
// estimate brackets the limit as [I_hat - bound, I_hat].
inline IFunctionalEstimate estimate_I(const OffspringLaw& off, const StepLaw& step, double r,
                                      int K, std::uint64_t samples, int y_samples,
                                      const Caps& caps, std::uint64_t seed, int workers,
                                      std::string_view tag = "spine") {
    const int d = step.dim();
    const double beta = off.tail_index();
    if (!(beta * d > 2.0))
        throw std::invalid_argument(
            "I_{B(r)} needs beta*d > 2 (series over spine levels not summable otherwise)");
    if (K < 2 || samples == 0 || y_samples < 1 || !(r > 0.0))
        throw std::invalid_argument("bad spine estimate request");

    const double vd = ball_volume(d, r);
    const int k_half = K / 2;
    struct Chunk {
        double sum_full = 0.0, sum2_full = 0.0, sum_half = 0.0;
        std::vector<std::uint64_t> activations;  // per level
        std::uint64_t any_active = 0;
    };
    const std::uint64_t tag_hash = fnv1a(tag);
    const auto chunks = parallel_chunks<Chunk>(
        samples, 512, workers, [&](std::uint64_t, std::uint64_t b, std::uint64_t e) {
            Chunk ch;
            ch.activations.assign(K, 0);
            TreeWorkspace ws;
            std::vector<double> near_all;   // flat zeta = X_u + xi - S_{w_k}, filtered
            std::vector<int> near_begin;    // per level offsets into near_all
            std::vector<double> ys;
            std::vector<double> s_count;
            for (std::uint64_t i = b; i < e; ++i) {
                Rng rng(seed, tag_hash, i);
                const SpineRealization sr = grow_spine(off, step, K, caps, rng, &ws);
                // per level, keep only zeta with |zeta - S_{w_k}| < 2r; those are the
                // only points any y in B(r) can see
                near_all.clear();
                near_begin.assign(K + 1, 0);
                bool any = false;
                for (int k = 1; k <= K; ++k) {
                    const auto& lv = sr.levels[k - 1];
                    const double* sw = &sr.spine_positions[(k - 1) * d];
                    std::size_t zi = 0;
                    for (std::size_t u = 0; u < lv.subtree_sizes.size(); ++u) {
                        const double* xu = &lv.brother_displacements[u * d];
                        for (std::uint32_t m = 0; m < lv.subtree_sizes[u]; ++m, ++zi) {
                            const double* xi = &lv.subtree_offsets[zi * d];
                            double dist2 = 0.0;
                            for (int j = 0; j < d; ++j) {
                                const double z = xi[j] + xu[j] - sw[j];
                                dist2 += z * z;
                            }
                            if (dist2 < 4.0 * r * r)
                                for (int j = 0; j < d; ++j)
                                    near_all.push_back(xi[j] + xu[j] - sw[j]);
                        }
                    }
                    near_begin[k] = static_cast<int>(near_all.size() / d);
                    if (near_begin[k] > near_begin[k - 1]) {
                        ++ch.activations[k - 1];
                        any = true;
                    }
                }
                if (any) ++ch.any_active;

                // integrate over shared y points
                double acc_full = 0.0, acc_half = 0.0;
                if (!any) {
                    acc_full = acc_half = 1.0;
                } else {
                    ys.resize(static_cast<std::size_t>(y_samples) * d);
                    for (int q = 0; q < y_samples; ++q) {
                        double* y = &ys[static_cast<std::size_t>(q) * d];
                        double norm2 = 0.0;
                        for (int j = 0; j < d; ++j) {
                            y[j] = rng.normal();
                            norm2 += y[j] * y[j];
                        }
                        const double scale =
                            r * std::pow(rng.u01_pos(), 1.0 / d) / std::sqrt(norm2);
                        for (int j = 0; j < d; ++j) y[j] *= scale;
                    }
                    s_count.assign(y_samples, 0.0);
                    for (int k = 1; k <= K; ++k) {
                        if (k - 1 == k_half)
                            for (int q = 0; q < y_samples; ++q)
                                acc_half += 1.0 / (1.0 + s_count[q]);
                        for (int zi = near_begin[k - 1]; zi < near_begin[k]; ++zi) {
                            const double* z = &near_all[static_cast<std::size_t>(zi) * d];
                            for (int q = 0; q < y_samples; ++q) {
                                const double* y = &ys[static_cast<std::size_t>(q) * d];
                                double dist2 = 0.0;
                                for (int j = 0; j < d; ++j) {
                                    const double t = z[j] + y[j];
                                    dist2 += t * t;
                                }
                                if (dist2 < r * r) s_count[q] += 1.0;
                            }
                        }
                    }
                    for (int q = 0; q < y_samples; ++q) acc_full += 1.0 / (1.0 + s_count[q]);
                    acc_full /= y_samples;
                    acc_half /= y_samples;
                }
                ch.sum_full += acc_full;
                ch.sum2_full += acc_full * acc_full;
                ch.sum_half += acc_half;
            }
            return ch;
        });

    double sum_full = 0.0, sum2_full = 0.0, sum_half = 0.0, any_active = 0.0;
    std::vector<double> act(K, 0.0);
    for (const auto& ch : chunks) {
        sum_full += ch.sum_full;
        sum2_full += ch.sum2_full;
        sum_half += ch.sum_half;
        any_active += static_cast<double>(ch.any_active);
        for (int k = 0; k < K; ++k) act[k] += static_cast<double>(ch.activations[k]);
    }
    const double ns = static_cast<double>(samples);
    IFunctionalEstimate est;
    est.r = r;
    est.K = K;
    est.samples = samples;
    const double mean = sum_full / ns;
    est.I_hat = vd * mean;
    est.I_half = vd * sum_half / ns;
    est.se = vd * std::sqrt(std::max(0.0, sum2_full / ns - mean * mean) / ns);
    est.activation_fraction = any_active / ns;
    // calibrate q_k ~ c k^{-d beta / 2} on the top half of the levels and bound
    // the dropped tail by a union bound
    est.fit_exponent = 0.5 * d * beta;
    double act_sum = 0.0, model_sum = 0.0;
    for (int k = std::max(1, k_half); k <= K; ++k) {
        act_sum += act[k - 1] / ns;
        model_sum += std::pow(static_cast<double>(k), -est.fit_exponent);
    }
    est.fit_c = model_sum > 0.0 ? act_sum / model_sum : 0.0;
    est.truncation_bound =
        vd * est.fit_c * detail::zeta_tail(est.fit_exponent, static_cast<double>(K));
    return est;
}

}  // namespace brw
