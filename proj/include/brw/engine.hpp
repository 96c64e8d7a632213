#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "brw/laws.hpp"
#include "brw/rng.hpp"

namespace brw {

// Flat storage of one generation of particle positions.
struct GenerationBuffer {
    int dim = 1;
    std::int64_t generation = 0;
    std::vector<double> positions;  // count * dim, row-major per particle

    std::size_t count() const { return positions.size() / static_cast<std::size_t>(dim); }
    bool empty() const { return positions.empty(); }
    void reset(int d, std::int64_t gen = 0) {
        dim = d;
        generation = gen;
        positions.clear();
    }
};

struct Caps {
    std::int64_t generation_cap = 1'000'000;
    std::int64_t progeny_cap = 1'000'000'000;
};

// One parent-generation step: every particle at x spawns k ~ offspring law
// children at x + iid steps. Returns false when the progeny budget was hit,
// in which case `out` holds the children produced so far and the caller owns
// the truncation accounting.
inline bool evolve_generation(const GenerationBuffer& in, GenerationBuffer& out,
                              const OffspringLaw& off, const StepLaw& step, Rng& rng,
                              std::int64_t progeny_budget =
                                  std::numeric_limits<std::int64_t>::max()) {
    if (in.dim != step.dim()) throw std::invalid_argument("buffer/step dimension mismatch");
    const int d = in.dim;
    out.reset(d, in.generation + 1);
    out.positions.reserve(in.positions.size() + in.positions.size() / 4);
    double dx[StepLaw::kMaxDim];
    const std::size_t n = in.count();
    std::int64_t produced = 0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* parent = in.positions.data() + i * d;
        const std::uint64_t k = off.sample(rng);
        for (std::uint64_t c = 0; c < k; ++c) {
            if (produced >= progeny_budget) return false;
            step.sample(rng, dx);
            for (int j = 0; j < d; ++j) out.positions.push_back(parent[j] + dx[j]);
            ++produced;
        }
    }
    return true;
}

struct TreeRunStats {
    std::int64_t generations_survived = 0;  // last generation with a particle alive
    std::int64_t total_progeny = 0;         // particles over all generations, root included
    GenerationBuffer final_buffer;          // generation-n particles (empty if extinct)
    std::vector<double> running_max;        // per-coordinate max over all generations
    bool truncated = false;
};

struct TreeRunOptions {
    bool track_running_max = false;
    bool keep_final = true;
};

// Scratch buffers so hot loops do not reallocate per replicate.
struct TreeWorkspace {
    GenerationBuffer a, b;
};

// Single ancestor at the origin, evolved n generations or to extinction.
// Deterministic given (law specs, rng stream).
inline TreeRunStats run_tree(const OffspringLaw& off, const StepLaw& step, std::int64_t n,
                             const Caps& caps, Rng& rng, const TreeRunOptions& opt = {},
                             TreeWorkspace* ws = nullptr) {
    TreeWorkspace local;
    if (!ws) ws = &local;
    const int d = step.dim();
    GenerationBuffer* cur = &ws->a;
    GenerationBuffer* nxt = &ws->b;
    cur->reset(d, 0);
    cur->positions.assign(static_cast<std::size_t>(d), 0.0);

    TreeRunStats stats;
    stats.total_progeny = 1;
    if (opt.track_running_max) stats.running_max.assign(d, 0.0);

    const std::int64_t gens = std::min<std::int64_t>(n, caps.generation_cap);
    for (std::int64_t g = 0; g < gens && !cur->empty(); ++g) {
        if (!evolve_generation(*cur, *nxt, off, step, rng,
                               caps.progeny_cap - stats.total_progeny)) {
            stats.truncated = true;
            stats.total_progeny += static_cast<std::int64_t>(nxt->count());
            break;
        }
        std::swap(cur, nxt);
        stats.total_progeny += static_cast<std::int64_t>(cur->count());
        if (!cur->empty()) stats.generations_survived = cur->generation;
        if (opt.track_running_max) {
            const std::size_t cnt = cur->count();
            for (std::size_t i = 0; i < cnt; ++i)
                for (int j = 0; j < d; ++j)
                    stats.running_max[j] =
                        std::max(stats.running_max[j], cur->positions[i * d + j]);
        }
    }
    if (gens < n && !cur->empty()) stats.truncated = true;  // hit the generation cap alive
    if (opt.keep_final && !stats.truncated) stats.final_buffer = *cur;
    stats.final_buffer.dim = d;
    return stats;
}

// Exact Q_n = P_{delta_0}(|Z_n| > 0) by pgf iteration, computed in the
// cancellation-free form Q_{k+1} = Q_k (1 - H(Q_k)).
inline double survival_recursion(const OffspringLaw& off, std::int64_t n) {
    if (n < 0) throw std::invalid_argument("survival_recursion needs n >= 0");
    double q = 1.0;
    for (std::int64_t k = 0; k < n; ++k) q *= (1.0 - off.hfun(q));
    return q;
}

// Smallest n with Q_n <= target (for cap sizing); throws if not reached by nmax.
inline std::int64_t generations_until_survival_below(const OffspringLaw& off, double target,
                                                     std::int64_t nmax = 100'000'000) {
    double q = 1.0;
    for (std::int64_t k = 0; k <= nmax; ++k) {
        if (q <= target) return k;
        q *= (1.0 - off.hfun(q));
    }
    throw std::runtime_error("survival does not drop below target within nmax generations");
}

struct FieldRun {
    double window_radius = 0.0;
    std::int64_t initial_count = 0;
    GenerationBuffer final_buffer;  // populated only when requested
    double r_min = kInf;            // min |position| over the final generation
    bool truncated = false;
};

struct FieldRunOptions {
    bool keep_final = false;
    // reject runs whose expected initial particle count exceeds this
    double max_expected_initial = 5e7;
};

// Poisson(Lebesgue) ancestors restricted to the ball B(0, W), every initial
// particle's subtree evolved n generations; r_min is R_n of the windowed field.
inline FieldRun run_field(const OffspringLaw& off, const StepLaw& step, std::int64_t n,
                          double window_radius, const Caps& caps, Rng& rng,
                          const FieldRunOptions& opt = {}, TreeWorkspace* ws = nullptr) {
    if (!(window_radius > 0.0) || !std::isfinite(window_radius))
        throw std::invalid_argument("window radius must be positive and finite");
    const int d = step.dim();
    const double mean_count = ball_volume(d, window_radius);
    if (mean_count > opt.max_expected_initial)
        throw std::runtime_error(
            "field window needs ~" + std::to_string(static_cast<long long>(mean_count)) +
            " initial particles, above the memory budget of " +
            std::to_string(static_cast<long long>(opt.max_expected_initial)));

    TreeWorkspace local;
    if (!ws) ws = &local;
    GenerationBuffer* cur = &ws->a;
    GenerationBuffer* nxt = &ws->b;
    cur->reset(d, 0);

    FieldRun run;
    run.window_radius = window_radius;
    run.initial_count = static_cast<std::int64_t>(rng.poisson(mean_count));
    cur->positions.resize(static_cast<std::size_t>(run.initial_count) * d);
    for (std::int64_t i = 0; i < run.initial_count; ++i) {
        // uniform in the ball: gaussian direction, radial inversion
        double* p = cur->positions.data() + static_cast<std::size_t>(i) * d;
        double norm2 = 0.0;
        for (int j = 0; j < d; ++j) {
            p[j] = rng.normal();
            norm2 += p[j] * p[j];
        }
        const double scale =
            window_radius * std::pow(rng.u01_pos(), 1.0 / d) / std::sqrt(norm2);
        for (int j = 0; j < d; ++j) p[j] *= scale;
    }

    std::int64_t progeny = run.initial_count;
    const std::int64_t gens = std::min<std::int64_t>(n, caps.generation_cap);
    for (std::int64_t g = 0; g < gens && !cur->empty(); ++g) {
        if (!evolve_generation(*cur, *nxt, off, step, rng, caps.progeny_cap - progeny)) {
            run.truncated = true;
            break;
        }
        std::swap(cur, nxt);
        progeny += static_cast<std::int64_t>(cur->count());
    }
    if (gens < n && !cur->empty()) run.truncated = true;

    const std::size_t cnt = cur->count();
    for (std::size_t i = 0; i < cnt; ++i) {
        double norm2 = 0.0;
        for (int j = 0; j < d; ++j) {
            const double x = cur->positions[i * d + j];
            norm2 += x * x;
        }
        run.r_min = std::min(run.r_min, std::sqrt(norm2));
    }
    if (opt.keep_final) run.final_buffer = *cur;
    run.final_buffer.dim = d;
    return run;
}

}  // namespace brw
