#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "brw/engine.hpp"
#include "brw/laws.hpp"
#include "brw/parallel.hpp"
#include "brw/rng.hpp"

namespace brw {

enum class RegimeKind { diffusive, smallball, fixed };

inline const char* regime_name(RegimeKind k) {
    switch (k) {
        case RegimeKind::diffusive: return "diffusive";
        case RegimeKind::smallball: return "smallball";
        case RegimeKind::fixed: return "fixed";
    }
    return "?";
}

// Scaling regime for P(R_n >= rho_n * r): rho_n = sqrt(n) (diffusive),
// b_n = [n/(1+beta)]^{1/(beta d)} (smallball, beta*d < 2), or 1 (fixed).
struct ScalingRegime {
    RegimeKind kind = RegimeKind::fixed;
    std::int64_t n = 0;
    int dim = 1;
    double rho = 1.0;
    double b_n = std::numeric_limits<double>::quiet_NaN();
    // alternative b_n through Slack's limit, [ (1/beta)^{1/beta} / Q_n ]^{1/d}
    double b_n_slack = std::numeric_limits<double>::quiet_NaN();

    static ScalingRegime make(RegimeKind kind, std::int64_t n, const OffspringLaw& off,
                              int dim) {
        if (n < 0) throw std::invalid_argument("regime needs n >= 0");
        ScalingRegime reg;
        reg.kind = kind;
        reg.n = n;
        reg.dim = dim;
        const double beta = off.tail_index();
        const double bd = beta * dim;
        switch (kind) {
            case RegimeKind::diffusive:
                if (!((off.finite_variance() && dim == 2) || std::fabs(bd - 2.0) < 1e-12))
                    throw std::invalid_argument(
                        "diffusive regime needs d=2 with finite variance or beta*d=2");
                reg.rho = n == 0 ? 1.0 : std::sqrt(static_cast<double>(n));
                break;
            case RegimeKind::smallball: {
                if (off.finite_variance() || !(bd < 2.0))
                    throw std::invalid_argument(
                        "smallball regime needs a stable offspring law with beta*d < 2");
                reg.b_n = n == 0 ? 1.0
                                 : std::pow(static_cast<double>(n) / (1.0 + beta), 1.0 / bd);
                reg.rho = reg.b_n;
                if (n > 0) {
                    const double q = survival_recursion(off, n);
                    reg.b_n_slack = std::pow(std::pow(1.0 / beta, 1.0 / beta) / q, 1.0 / dim);
                }
                break;
            }
            case RegimeKind::fixed:
                if (!(bd > 2.0))
                    throw std::invalid_argument("fixed regime needs beta*d > 2");
                reg.rho = 1.0;
                break;
        }
        return reg;
    }
};

struct CdfEstimate {
    double r = 0.0;
    double p_hat = 0.0;
    double se = 0.0;
    std::uint64_t replicates = 0;
    double bias_budget = 0.0;
    double predicted = std::numeric_limits<double>::quiet_NaN();
    std::string pred_source;
};

struct UnionVolumeParams {
    double target_rel_se = 0.01;
    std::uint64_t min_samples = 4096;
    std::uint64_t max_samples = 1 << 22;
    std::uint64_t batch = 4096;
};

namespace detail {

// spatial hash on cells of side `cell`; queries scan the 3^d neighborhood
class BallGrid {
  public:
    BallGrid(const std::vector<double>& pts, int d, double radius)
        : pts_(pts), d_(d), r2_(radius * radius), inv_cell_(1.0 / radius) {
        const std::size_t n = pts.size() / d;
        cells_.reserve(n * 2);
        for (std::size_t i = 0; i < n; ++i)
            cells_[key(&pts_[i * d_])].push_back(static_cast<std::uint32_t>(i));
    }

    bool covered(const double* x) const {
        std::int64_t base[StepLaw::kMaxDim];
        for (int j = 0; j < d_; ++j)
            base[j] = static_cast<std::int64_t>(std::floor(x[j] * inv_cell_));
        std::int64_t nb[StepLaw::kMaxDim];
        return scan(x, base, nb, 0);
    }

  private:
    bool scan(const double* x, const std::int64_t* base, std::int64_t* nb, int depth) const {
        if (depth == d_) {
            const auto it = cells_.find(hash(nb));
            if (it == cells_.end()) return false;
            for (const std::uint32_t i : it->second) {
                double dist2 = 0.0;
                const double* p = &pts_[i * d_];
                for (int j = 0; j < d_; ++j) {
                    const double dx = x[j] - p[j];
                    dist2 += dx * dx;
                }
                if (dist2 < r2_) return true;
            }
            return false;
        }
        for (std::int64_t off = -1; off <= 1; ++off) {
            nb[depth] = base[depth] + off;
            if (scan(x, base, nb, depth + 1)) return true;
        }
        return false;
    }

    std::uint64_t key(const double* p) const {
        std::int64_t c[StepLaw::kMaxDim];
        for (int j = 0; j < d_; ++j)
            c[j] = static_cast<std::int64_t>(std::floor(p[j] * inv_cell_));
        return hash(c);
    }

    static std::uint64_t hash_mix(std::uint64_t h, std::int64_t v) {
        h ^= static_cast<std::uint64_t>(v) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2);
        return h;
    }

    std::uint64_t hash(const std::int64_t* c) const {
        std::uint64_t h = 1469598103934665603ULL;
        for (int j = 0; j < d_; ++j) h = hash_mix(h, c[j]);
        return h;
    }

    const std::vector<double>& pts_;
    int d_;
    double r2_;
    double inv_cell_;
    std::unordered_map<std::uint64_t, std::vector<std::uint32_t>> cells_;
};

}  // namespace detail

// Lebesgue volume of the union of radius-balls centered at the buffer's
// particles. d=1 is exact (interval merging); d>=2 is estimated by uniform
// sampling in the bounding box until the relative SE target is met.
inline double occupation_volume(const GenerationBuffer& buf, double radius,
                                const UnionVolumeParams& params, Rng& rng) {
    if (!(radius > 0.0)) throw std::invalid_argument("occupation_volume needs radius > 0");
    const int d = buf.dim;
    const std::size_t n = buf.count();
    if (n == 0) return 0.0;
    if (n == 1) return ball_volume(d, radius);

    if (d == 1) {
        std::vector<double> xs(buf.positions);
        std::sort(xs.begin(), xs.end());
        double total = 0.0;
        double lo = xs[0] - radius, hi = xs[0] + radius;
        for (std::size_t i = 1; i < n; ++i) {
            if (xs[i] - radius > hi) {
                total += hi - lo;
                lo = xs[i] - radius;
            }
            hi = xs[i] + radius;
        }
        return total + (hi - lo);
    }

    double lo[StepLaw::kMaxDim], hi[StepLaw::kMaxDim];
    for (int j = 0; j < d; ++j) {
        lo[j] = kInf;
        hi[j] = -kInf;
    }
    for (std::size_t i = 0; i < n; ++i)
        for (int j = 0; j < d; ++j) {
            lo[j] = std::min(lo[j], buf.positions[i * d + j]);
            hi[j] = std::max(hi[j], buf.positions[i * d + j]);
        }
    double box_vol = 1.0;
    for (int j = 0; j < d; ++j) {
        lo[j] -= radius;
        hi[j] += radius;
        box_vol *= hi[j] - lo[j];
    }

    detail::BallGrid grid(buf.positions, d, radius);
    std::uint64_t hits = 0, samples = 0;
    double x[StepLaw::kMaxDim];
    while (samples < params.max_samples) {
        for (std::uint64_t b = 0; b < params.batch; ++b) {
            for (int j = 0; j < d; ++j) x[j] = rng.uniform(lo[j], hi[j]);
            hits += grid.covered(x) ? 1u : 0u;
        }
        samples += params.batch;
        if (samples >= params.min_samples && hits > 0) {
            const double p = static_cast<double>(hits) / static_cast<double>(samples);
            const double rel_se = std::sqrt((1.0 - p) / static_cast<double>(hits));
            if (rel_se <= params.target_rel_se) break;
        }
    }
    return box_vol * static_cast<double>(hits) / static_cast<double>(samples);
}

struct OccupationEstimate {
    double r = 0.0;
    double F_hat = 0.0;   // mean occupation volume at ball radius rho_n * r
    double se_F = 0.0;
    double p_pred = 0.0;  // exp(-F_hat)
    double se_p = 0.0;    // delta method
    std::uint64_t replicates = 0;
    double truncated_fraction = 0.0;
};

// Single-tree occupation-volume estimator: P(R_n >= rho_n r) = exp(-F) with
// F = E[ vol( U_u B(S_u, rho_n r) ) ] over one tree from the origin. All radii
// in the grid are evaluated on the same tree runs.
inline std::vector<OccupationEstimate> estimate_F(
    const ScalingRegime& regime, const OffspringLaw& off, const StepLaw& step,
    const std::vector<double>& r_grid, std::uint64_t replicates, const Caps& caps,
    const UnionVolumeParams& uv, std::uint64_t seed, int workers,
    std::string_view tag = "emptyball.occupation") {
    if (step.dim() != regime.dim) throw std::invalid_argument("step/regime dim mismatch");
    if (replicates == 0) throw std::invalid_argument("need replicates >= 1");
    struct Chunk {
        std::vector<double> sum, sum2;
        std::uint64_t truncated = 0;
    };
    const std::uint64_t tag_hash = fnv1a(tag);
    const auto chunks = parallel_chunks<Chunk>(
        replicates, 2048, workers, [&](std::uint64_t, std::uint64_t b, std::uint64_t e) {
            Chunk ch;
            ch.sum.assign(r_grid.size(), 0.0);
            ch.sum2.assign(r_grid.size(), 0.0);
            TreeWorkspace ws;
            TreeRunOptions opt;
            opt.keep_final = true;
            for (std::uint64_t i = b; i < e; ++i) {
                Rng rng(seed, tag_hash, i);
                const TreeRunStats stats = run_tree(off, step, regime.n, caps, rng, opt, &ws);
                if (stats.truncated) {
                    ++ch.truncated;
                    continue;
                }
                for (std::size_t k = 0; k < r_grid.size(); ++k) {
                    const double v = stats.final_buffer.empty()
                                         ? 0.0
                                         : occupation_volume(stats.final_buffer,
                                                             regime.rho * r_grid[k], uv, rng);
                    ch.sum[k] += v;
                    ch.sum2[k] += v * v;
                }
            }
            return ch;
        });

    std::vector<double> sum(r_grid.size(), 0.0), sum2(r_grid.size(), 0.0);
    std::uint64_t truncated = 0;
    for (const auto& ch : chunks) {
        for (std::size_t k = 0; k < r_grid.size(); ++k) {
            sum[k] += ch.sum[k];
            sum2[k] += ch.sum2[k];
        }
        truncated += ch.truncated;
    }
    std::vector<OccupationEstimate> out(r_grid.size());
    const double nrep = static_cast<double>(replicates);
    for (std::size_t k = 0; k < r_grid.size(); ++k) {
        auto& est = out[k];
        est.r = r_grid[k];
        est.replicates = replicates;
        est.truncated_fraction = static_cast<double>(truncated) / nrep;
        est.F_hat = sum[k] / nrep;
        const double var = std::max(0.0, sum2[k] / nrep - est.F_hat * est.F_hat);
        est.se_F = std::sqrt(var / nrep);
        est.p_pred = std::exp(-est.F_hat);
        est.se_p = est.p_pred * est.se_F;
    }
    return out;
}

struct DirectEstimateResult {
    std::vector<CdfEstimate> estimates;  // aligned with the r-grid
    double slack = 0.0;                  // accepted window slack
    double window_radius = 0.0;
    double window_delta = 0.0;           // predicted p-change left outside the window
};

struct DirectParams {
    double initial_slack = 1.0;
    double epsilon = 0.01;   // adaptive rule: double slack until delta < epsilon/2
    int max_doublings = 5;
    std::uint64_t pilot_replicates = 20000;
    double max_expected_initial = 5e7;
};

namespace detail {

// window radius covering ball rho*r plus `slack` diffusive spreads
inline double field_window(const ScalingRegime& reg, double r_max, const StepLaw& step,
                           double slack) {
    const double spread =
        std::sqrt(static_cast<double>(reg.n) * step.max_coord_variance() *
                  static_cast<double>(reg.dim));
    return reg.rho * r_max + std::max(slack * spread, 1.0);
}

}  // namespace detail

// Direct field estimator of the empty-ball law: p_hat(r) = fraction of
// windowed Poisson-field runs with r_min >= rho_n r.
//
// Window sizing uses the Poisson-Laplace identity: ancestors outside B(0,W)
// shift the exponent by Delta_F(W) = E[vol of the occupation union outside
// B(0,W)], measurable from cheap single-tree pilot runs (one tree set scores
// every candidate window at once). The slack is doubled until the predicted
// probability shift exp(-F+Delta_F) - exp(-F) drops below epsilon/2; the
// residual prediction goes into the bias budget. Window truncation is
// one-sided: it can only inflate p_hat.
inline DirectEstimateResult estimate_direct(const ScalingRegime& regime,
                                            const OffspringLaw& off, const StepLaw& step,
                                            const std::vector<double>& r_grid,
                                            std::uint64_t replicates, const DirectParams& dp,
                                            const Caps& caps, std::uint64_t seed, int workers,
                                            std::string_view tag = "emptyball.direct") {
    if (step.dim() != regime.dim) throw std::invalid_argument("step/regime dim mismatch");
    if (r_grid.empty()) throw std::invalid_argument("empty r grid");
    const double r_max = *std::max_element(r_grid.begin(), r_grid.end());
    const int d = regime.dim;

    std::vector<double> windows;  // candidate window radii, slack doubling ladder
    for (int j = 0; j < dp.max_doublings; ++j)
        windows.push_back(detail::field_window(regime, r_max, step,
                                               dp.initial_slack * std::pow(2.0, j)));

    struct PilotChunk {
        std::vector<double> full;     // per r: sum of union volumes
        std::vector<double> outside;  // per (r, window): sum of volume outside B(W)
    };
    const std::uint64_t pilot_tag = fnv1a(std::string(tag) + ".pilot");
    const std::size_t nr = r_grid.size(), nw = windows.size();
    const auto pchunks = parallel_chunks<PilotChunk>(
        dp.pilot_replicates, 2048, workers,
        [&](std::uint64_t, std::uint64_t b, std::uint64_t e) {
            PilotChunk ch;
            ch.full.assign(nr, 0.0);
            ch.outside.assign(nr * nw, 0.0);
            TreeWorkspace ws;
            TreeRunOptions opt;
            opt.keep_final = true;
            UnionVolumeParams uv;
            for (std::uint64_t i = b; i < e; ++i) {
                Rng rng(seed, pilot_tag, i);
                const TreeRunStats stats = run_tree(off, step, regime.n, caps, rng, opt, &ws);
                const auto& buf = stats.final_buffer;
                if (buf.empty()) continue;
                for (std::size_t k = 0; k < nr; ++k) {
                    const double radius = regime.rho * r_grid[k];
                    // max particle norm decides cheaply which windows see mass
                    double max_norm2 = 0.0;
                    for (std::size_t p = 0; p < buf.count(); ++p) {
                        double n2 = 0.0;
                        for (int j = 0; j < d; ++j) {
                            const double x = buf.positions[p * d + j];
                            n2 += x * x;
                        }
                        max_norm2 = std::max(max_norm2, n2);
                    }
                    const double reach = std::sqrt(max_norm2) + radius;
                    ch.full[k] += occupation_volume(buf, radius, uv, rng);
                    if (reach <= windows[0]) continue;
                    // sample the union again, splitting hits by window shell
                    double lo[StepLaw::kMaxDim], hi[StepLaw::kMaxDim];
                    for (int j = 0; j < d; ++j) {
                        lo[j] = kInf;
                        hi[j] = -kInf;
                    }
                    for (std::size_t p = 0; p < buf.count(); ++p)
                        for (int j = 0; j < d; ++j) {
                            lo[j] = std::min(lo[j], buf.positions[p * d + j]);
                            hi[j] = std::max(hi[j], buf.positions[p * d + j]);
                        }
                    double box = 1.0;
                    for (int j = 0; j < d; ++j) {
                        lo[j] -= radius;
                        hi[j] += radius;
                        box *= hi[j] - lo[j];
                    }
                    detail::BallGrid grid(buf.positions, d, radius);
                    const std::uint64_t m = 16384;
                    std::vector<std::uint64_t> out_hits(nw, 0);
                    double x[StepLaw::kMaxDim];
                    for (std::uint64_t s = 0; s < m; ++s) {
                        double n2 = 0.0;
                        for (int j = 0; j < d; ++j) {
                            x[j] = rng.uniform(lo[j], hi[j]);
                            n2 += x[j] * x[j];
                        }
                        if (n2 <= windows[0] * windows[0]) continue;
                        if (!grid.covered(x)) continue;
                        for (std::size_t w = 0; w < nw; ++w)
                            out_hits[w] += n2 > windows[w] * windows[w] ? 1u : 0u;
                    }
                    for (std::size_t w = 0; w < nw; ++w)
                        ch.outside[k * nw + w] +=
                            box * static_cast<double>(out_hits[w]) / static_cast<double>(m);
                }
            }
            return ch;
        });

    std::vector<double> F(nr, 0.0), dF(nr * nw, 0.0);
    for (const auto& ch : pchunks) {
        for (std::size_t k = 0; k < nr; ++k) F[k] += ch.full[k];
        for (std::size_t kw = 0; kw < nr * nw; ++kw) dF[kw] += ch.outside[kw];
    }
    for (auto& v : F) v /= static_cast<double>(dp.pilot_replicates);
    for (auto& v : dF) v /= static_cast<double>(dp.pilot_replicates);

    std::size_t accepted = nw;
    double delta = kInf;
    for (std::size_t w = 0; w < nw; ++w) {
        double dmax = 0.0;
        for (std::size_t k = 0; k < nr; ++k)
            dmax = std::max(dmax, std::exp(-F[k]) * std::expm1(dF[k * nw + w]));
        if (dmax < dp.epsilon / 2.0) {
            accepted = w;
            delta = dmax;
            break;
        }
    }
    if (accepted == nw)
        throw std::runtime_error(
            "window slack did not stabilize the field estimate within " +
            std::to_string(dp.max_doublings) + " doublings");
    const double window = windows[accepted];
    if (ball_volume(d, window) > dp.max_expected_initial)
        throw std::runtime_error("accepted field window exceeds the memory budget");
    struct Chunk {
        std::vector<std::uint64_t> ge;
        std::uint64_t truncated = 0;
    };
    const std::uint64_t tag_hash = fnv1a(tag);
    const auto chunks = parallel_chunks<Chunk>(
        replicates, 64, workers, [&](std::uint64_t, std::uint64_t b, std::uint64_t e) {
            Chunk ch;
            ch.ge.assign(r_grid.size(), 0);
            TreeWorkspace ws;
            FieldRunOptions fo;
            fo.max_expected_initial = dp.max_expected_initial;
            for (std::uint64_t i = b; i < e; ++i) {
                Rng rng(seed, tag_hash, i);
                const FieldRun run = run_field(off, step, regime.n, window, caps, rng, fo, &ws);
                if (run.truncated) ++ch.truncated;
                for (std::size_t k = 0; k < r_grid.size(); ++k)
                    ch.ge[k] += run.r_min >= regime.rho * r_grid[k] ? 1u : 0u;
            }
            return ch;
        });

    DirectEstimateResult res;
    res.slack = slack;
    res.window_radius = window;
    res.window_delta = delta;
    std::uint64_t truncated = 0;
    std::vector<std::uint64_t> ge(r_grid.size(), 0);
    for (const auto& ch : chunks) {
        truncated += ch.truncated;
        for (std::size_t k = 0; k < r_grid.size(); ++k) ge[k] += ch.ge[k];
    }
    for (std::size_t k = 0; k < r_grid.size(); ++k) {
        CdfEstimate est;
        est.r = r_grid[k];
        est.replicates = replicates;
        est.p_hat = static_cast<double>(ge[k]) / static_cast<double>(replicates);
        est.se = std::sqrt(est.p_hat * (1.0 - est.p_hat) / static_cast<double>(replicates));
        est.bias_budget =
            delta + dp.epsilon / 2.0 +
            static_cast<double>(truncated) / static_cast<double>(replicates);
        res.estimates.push_back(est);
    }
    return res;
}

}  // namespace brw
