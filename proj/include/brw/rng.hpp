#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace brw {

// 64-bit FNV-1a, used to turn module tags into stream keys.
constexpr std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (char c : s) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

constexpr std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Per-replicate random stream. The state is derived deterministically from
// (root seed, module tag, replicate index), so results do not depend on how
// replicates are assigned to workers. Core generator is xoshiro256++ seeded
// through splitmix64 over the three key words.
class Rng {
  public:
    Rng(std::uint64_t root_seed, std::string_view tag, std::uint64_t index)
        : Rng(root_seed, fnv1a(tag), index) {}

    Rng(std::uint64_t root_seed, std::uint64_t tag_hash, std::uint64_t index) {
        std::uint64_t x = root_seed;
        (void)splitmix64(x);
        x ^= tag_hash;
        (void)splitmix64(x);
        x ^= index * 0xda942042e4dd58b5ULL;
        for (auto& w : s_) w = splitmix64(x);
    }

    std::uint64_t next_u64() {
        const std::uint64_t result = rotl(s_[0] + s_[3], 23) + s_[0];
        const std::uint64_t t = s_[1] << 17;
        s_[2] ^= s_[0];
        s_[3] ^= s_[1];
        s_[1] ^= s_[2];
        s_[0] ^= s_[3];
        s_[2] ^= t;
        s_[3] = rotl(s_[3], 45);
        return result;
    }

    // uniform on [0,1), 53-bit resolution
    double u01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform on (0,1], safe under log()
    double u01_pos() { return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * u01(); }

    // standard normal, Marsaglia polar with one cached value
    double normal() {
        if (have_cache_) {
            have_cache_ = false;
            return cache_;
        }
        double u, v, q;
        do {
            u = 2.0 * u01() - 1.0;
            v = 2.0 * u01() - 1.0;
            q = u * u + v * v;
        } while (q >= 1.0 || q == 0.0);
        const double f = std::sqrt(-2.0 * std::log(q) / q);
        cache_ = v * f;
        have_cache_ = true;
        return u * f;
    }

    // exact Poisson: inversion below 10, Hormann's PTRD transformed rejection above
    std::uint64_t poisson(double mean) {
        if (mean < 10.0) {
            const double g = std::exp(-mean);
            std::uint64_t k = 0;
            double t = u01_pos();
            while (t > g) {
                ++k;
                t *= u01_pos();
            }
            return k;
        }
        return poisson_ptrd(mean);
    }

  private:
    static constexpr std::uint64_t rotl(std::uint64_t x, int k) {
        return (x << k) | (x >> (64 - k));
    }

    std::uint64_t poisson_ptrd(double mu) {
        const double smu = std::sqrt(mu);
        const double b = 0.931 + 2.53 * smu;
        const double a = -0.059 + 0.02483 * b;
        const double inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        const double v_r = 0.9277 - 3.6224 / (b - 2.0);
        const double lmu = std::log(mu);
        for (;;) {
            double u = u01() - 0.5;
            double v = u01_pos();
            const double us = 0.5 - std::fabs(u);
            const double kf = std::floor((2.0 * a / us + b) * u + mu + 0.43);
            if (us >= 0.07 && v <= v_r) return static_cast<std::uint64_t>(kf);
            if (kf < 0.0 || (us < 0.013 && v > us)) continue;
            const double k = kf;
            if (std::log(v * inv_alpha / (a / (us * us) + b)) <=
                k * lmu - mu - std::lgamma(k + 1.0))
                return static_cast<std::uint64_t>(kf);
        }
    }

    std::uint64_t s_[4];
    double cache_ = 0.0;
    bool have_cache_ = false;
};

}  // namespace brw
