#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "brw/rng.hpp"

namespace brw {

inline constexpr double kInf = std::numeric_limits<double>::infinity();

// volume of the d-dimensional ball of radius r
inline double ball_volume(int d, double r) {
    return std::pow(M_PI, 0.5 * d) * std::pow(r, d) / std::tgamma(0.5 * d + 1.0);
}

// surface area of the unit (d-1)-sphere
inline double sphere_surface(int d) {
    return 2.0 * std::pow(M_PI, 0.5 * d) / std::tgamma(0.5 * d);
}

namespace detail {

// (1-s)^k - 1 + k*s without cancellation; this is the building block of
// H(s) = sum_k p_k [(1-s)^k - 1 + k s] / s for laws given by a finite table.
inline double one_minus_s_pow_k_rem(std::uint64_t k, double s) {
    if (k == 0) return 0.0;
    const double ks = static_cast<double>(k) * s;
    if (ks >= 0.5) {
        double v = std::pow(1.0 - s, static_cast<double>(k)) - 1.0 + ks;
        return v;
    }
    // binomial series from the quadratic term on
    double term = 1.0;
    double sum = 0.0;
    for (std::uint64_t j = 1; j <= k; ++j) {
        term *= -s * static_cast<double>(k - j + 1) / static_cast<double>(j);
        if (j >= 2) {
            sum += term;
            if (std::fabs(term) < 1e-18 * std::fabs(sum)) break;
        }
    }
    return sum;
}

inline std::map<std::string, std::string> parse_kv(std::string_view body) {
    std::map<std::string, std::string> kv;
    size_t pos = 0;
    while (pos < body.size()) {
        size_t comma = body.find(',', pos);
        if (comma == std::string_view::npos) comma = body.size();
        std::string_view item = body.substr(pos, comma - pos);
        size_t eq = item.find('=');
        if (eq == std::string_view::npos)
            throw std::invalid_argument("expected key=value in spec: " + std::string(item));
        kv.emplace(std::string(item.substr(0, eq)), std::string(item.substr(eq + 1)));
        pos = comma + 1;
    }
    return kv;
}

inline double to_double(const std::string& s) {
    size_t n = 0;
    double v = std::stod(s, &n);
    if (n != s.size()) throw std::invalid_argument("bad number: " + s);
    return v;
}

inline int to_int(const std::string& s) {
    size_t n = 0;
    int v = std::stoi(s, &n);
    if (n != s.size()) throw std::invalid_argument("bad integer: " + s);
    return v;
}

}  // namespace detail

enum class OffspringFamily { binary, geometric, poisson1, stable, table };

// A critical offspring law (mean exactly 1) with its generating-function
// quantities. Immutable after construction; safe to share across workers.
class OffspringLaw {
  public:
    static OffspringLaw binary() {
        OffspringLaw law(OffspringFamily::binary);
        law.pmf_ = {0.5, 0.0, 0.5};
        law.variance_ = 1.0;
        law.finalize_table_cdf();
        return law;
    }

    // p_k = (1/2)^{k+1}; the only critical geometric
    static OffspringLaw geometric() {
        OffspringLaw law(OffspringFamily::geometric);
        law.pmf_.resize(48);
        double p = 0.5;
        for (auto& q : law.pmf_) {
            q = p;
            p *= 0.5;
        }
        law.variance_ = 2.0;
        return law;
    }

    static OffspringLaw poisson1() {
        OffspringLaw law(OffspringFamily::poisson1);
        double p = std::exp(-1.0);
        for (int k = 0; p > 1e-18 || k < 2; ++k) {
            law.pmf_.push_back(p);
            p /= static_cast<double>(k + 1);
        }
        law.variance_ = 1.0;
        return law;
    }

    // f(s) = s + (1+beta)^{-1} (1-s)^{1+beta}; sigma^2 = inf, tail index beta
    static OffspringLaw stable(double beta) {
        if (!(beta > 0.0 && beta < 1.0))
            throw std::invalid_argument("stable offspring law needs beta in (0,1)");
        OffspringLaw law(OffspringFamily::stable);
        law.beta_ = beta;
        law.variance_ = kInf;
        law.kappa_ = beta / ((1.0 + beta) * std::tgamma(1.0 - beta));
        // prefix p_0..p_K via the recurrence p_{k+1} = p_k (k-1-beta)/(k+1),
        // extended until the analytic tail P(K>=n) drops below 1e-6
        law.pmf_ = {1.0 / (1.0 + beta), 0.0, beta / 2.0};
        double tail = law.stable_tail(static_cast<double>(law.pmf_.size()));
        while (tail >= 1e-6 && law.pmf_.size() < (1u << 16)) {
            const double k = static_cast<double>(law.pmf_.size() - 1);
            law.pmf_.push_back(law.pmf_.back() * (k - 1.0 - beta) / (k + 1.0));
            tail = law.stable_tail(static_cast<double>(law.pmf_.size()));
        }
        law.finalize_table_cdf();
        law.finalize_size_biased_cdf();
        return law;
    }

    static OffspringLaw table(std::vector<double> pmf) {
        OffspringLaw law(OffspringFamily::table);
        law.pmf_ = std::move(pmf);
        while (!law.pmf_.empty() && law.pmf_.back() == 0.0) law.pmf_.pop_back();
        if (law.pmf_.empty()) throw std::invalid_argument("empty offspring table");
        double sum = 0.0, mean = 0.0, m2 = 0.0;
        for (size_t k = 0; k < law.pmf_.size(); ++k) {
            const double p = law.pmf_[k];
            if (p < 0.0) throw std::invalid_argument("negative offspring probability");
            sum += p;
            mean += static_cast<double>(k) * p;
            m2 += static_cast<double>(k) * static_cast<double>(k) * p;
        }
        if (std::fabs(sum - 1.0) > 1e-12)
            throw std::invalid_argument("offspring table does not sum to 1");
        if (std::fabs(mean - 1.0) > 1e-10)
            throw std::invalid_argument("offspring table is not critical (mean != 1)");
        law.variance_ = m2 - 1.0;
        law.finalize_table_cdf();
        return law;
    }

    // `binary`, `geometric`, `poisson1`, `stable:beta=0.5`, `table:p0=..,p2=..`
    static OffspringLaw parse(std::string_view spec) {
        const size_t colon = spec.find(':');
        const std::string_view name = spec.substr(0, colon);
        if (name == "binary") return binary();
        if (name == "geometric") return geometric();
        if (name == "poisson1") return poisson1();
        if (name == "stable") {
            if (colon == std::string_view::npos)
                throw std::invalid_argument("stable law needs beta, e.g. stable:beta=0.5");
            auto kv = detail::parse_kv(spec.substr(colon + 1));
            return stable(detail::to_double(kv.at("beta")));
        }
        if (name == "table") {
            if (colon == std::string_view::npos)
                throw std::invalid_argument("table law needs entries, e.g. table:p0=0.5,p2=0.5");
            auto kv = detail::parse_kv(spec.substr(colon + 1));
            std::vector<double> pmf;
            for (auto& [key, val] : kv) {
                if (key.size() < 2 || key[0] != 'p')
                    throw std::invalid_argument("table keys look like p0,p1,...: " + key);
                const int k = detail::to_int(key.substr(1));
                if (k < 0) throw std::invalid_argument("negative offspring index");
                if (pmf.size() <= static_cast<size_t>(k)) pmf.resize(k + 1, 0.0);
                pmf[k] = detail::to_double(val);
            }
            return table(std::move(pmf));
        }
        throw std::invalid_argument("unknown offspring law: " + std::string(spec));
    }

    OffspringFamily family() const { return family_; }
    double mean() const { return 1.0; }
    double variance() const { return variance_; }
    bool finite_variance() const { return std::isfinite(variance_); }
    // beta in (0,1) for the stable family, 1 otherwise
    double tail_index() const { return finite_variance() ? 1.0 : beta_; }
    const std::vector<double>& pmf_prefix() const { return pmf_; }

    // kappa(beta) = beta * lim H(r)/r^beta / Gamma(1-beta); stable family only
    double kappa() const {
        if (finite_variance())
            throw std::invalid_argument("kappa(beta) undefined for finite-variance laws");
        return kappa_;
    }

    // f(s) = E[s^{Z_1}]
    double pgf(double s) const {
        if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("pgf needs s in [0,1]");
        switch (family_) {
            case OffspringFamily::binary: return 0.5 * (1.0 + s * s);
            case OffspringFamily::geometric: return 1.0 / (2.0 - s);
            case OffspringFamily::poisson1: return std::exp(s - 1.0);
            case OffspringFamily::stable:
                return s + std::pow(1.0 - s, 1.0 + beta_) / (1.0 + beta_);
            case OffspringFamily::table: {
                double v = 0.0;
                for (size_t k = pmf_.size(); k-- > 0;) v = v * s + pmf_[k];
                return v;
            }
        }
        return 0.0;
    }

    // H(s) = [s - 1 + f(1-s)]/s, evaluated in a cancellation-free form;
    // H(0) = 0 by continuity, H(s) in [0,1] on [0,1].
    double hfun(double s) const {
        if (!(s >= 0.0 && s <= 1.0)) throw std::invalid_argument("H needs s in [0,1]");
        if (s == 0.0) return 0.0;
        switch (family_) {
            case OffspringFamily::binary: return 0.5 * s;
            case OffspringFamily::geometric: return s / (1.0 + s);
            case OffspringFamily::poisson1: return (std::expm1(-s) + s) / s;
            case OffspringFamily::stable: return std::pow(s, beta_) / (1.0 + beta_);
            case OffspringFamily::table: {
                double acc = 0.0;
                for (size_t k = 2; k < pmf_.size(); ++k)
                    if (pmf_[k] != 0.0) acc += pmf_[k] * detail::one_minus_s_pow_k_rem(k, s);
                return acc / s;
            }
        }
        return 0.0;
    }

    std::uint64_t sample(Rng& rng) const {
        switch (family_) {
            case OffspringFamily::binary:
                return rng.u01() < 0.5 ? 0u : 2u;
            case OffspringFamily::geometric: {
                // count of leading zero... geometric(1/2) on {0,1,...} via bit scan
                std::uint64_t k = 0;
                for (;;) {
                    std::uint64_t bits = rng.next_u64();
                    if (bits != ~0ull) {
                        while (bits & 1ull) {
                            ++k;
                            bits >>= 1;
                        }
                        return k;
                    }
                    k += 64;
                }
            }
            case OffspringFamily::poisson1:
                return rng.poisson(1.0);
            case OffspringFamily::stable: {
                const double u = rng.u01();
                if (u < cdf_.back()) return sample_table(u);
                return stable_tail_quantile(1.0 - u, /*size_biased=*/false);
            }
            case OffspringFamily::table:
                return sample_table(rng.u01());
        }
        return 0;
    }

    // draw from p*_k = k p_k (size-biased law; never 0 for critical laws)
    std::uint64_t sample_size_biased(Rng& rng) const {
        switch (family_) {
            case OffspringFamily::binary:
                return 2u;
            case OffspringFamily::geometric:
                // k p_k = pmf of 1 + NegBin(2,1/2) = 1 + G + G'
                return 1u + sample_geom_half(rng) + sample_geom_half(rng);
            case OffspringFamily::poisson1:
                return 1u + rng.poisson(1.0);
            case OffspringFamily::stable: {
                const double u = rng.u01();
                if (u < sb_cdf_.back()) {
                    const auto it = std::upper_bound(sb_cdf_.begin(), sb_cdf_.end(), u);
                    return static_cast<std::uint64_t>(it - sb_cdf_.begin());
                }
                return stable_tail_quantile(1.0 - u, /*size_biased=*/true);
            }
            case OffspringFamily::table: {
                const double u = rng.u01();
                double acc = 0.0;
                for (size_t k = 1; k < pmf_.size(); ++k) {
                    acc += static_cast<double>(k) * pmf_[k];
                    if (u < acc) return k;
                }
                return pmf_.size() - 1;
            }
        }
        return 1;
    }

    // P(Z_1 >= n) with the exact analytic tail beyond the stored prefix
    double tail_sum(double n) const {
        if (n <= 0.0) return 1.0;
        if (family_ == OffspringFamily::stable) return stable_tail(n);
        double acc = 0.0;
        for (size_t k = 0; k < pmf_.size() && k < static_cast<size_t>(n); ++k) acc += pmf_[k];
        if (family_ == OffspringFamily::geometric) return std::pow(0.5, std::floor(n));
        return std::max(0.0, 1.0 - acc);
    }

    std::string to_string() const {
        switch (family_) {
            case OffspringFamily::binary: return "binary";
            case OffspringFamily::geometric: return "geometric";
            case OffspringFamily::poisson1: return "poisson1";
            case OffspringFamily::stable: return "stable:beta=" + fmt(beta_);
            case OffspringFamily::table: {
                std::string s = "table";
                char sep = ':';
                for (size_t k = 0; k < pmf_.size(); ++k)
                    if (pmf_[k] != 0.0) {
                        s += sep;
                        sep = ',';
                        s += "p" + std::to_string(k) + "=" + fmt(pmf_[k]);
                    }
                return s;
            }
        }
        return "?";
    }

    // P(K >= n) for the stable family: T_1 = beta/(1+beta) and
    // T_n = beta Gamma(n-1-beta) / ((1+beta) Gamma(1-beta) Gamma(n)) for n >= 2,
    // from (1 - f(s))/(1-s) = 1 - (1+beta)^{-1}(1-s)^beta.
    double stable_tail(double n) const {
        if (n <= 1.0) return n <= 0.0 ? 1.0 : beta_ / (1.0 + beta_);
        if (n <= 2.0) return beta_ / (1.0 + beta_);
        return beta_ / (1.0 + beta_) *
               std::exp(std::lgamma(n - 1.0 - beta_) - std::lgamma(1.0 - beta_) -
                        std::lgamma(n));
    }

    // sum_{k>=n} k p_k = Gamma(n-1-beta)/(Gamma(1-beta) Gamma(n-1)) for n >= 2
    double stable_tail_size_biased(double n) const {
        if (n <= 2.0) return 1.0;  // p*_1 = 0
        return std::exp(std::lgamma(n - 1.0 - beta_) - std::lgamma(1.0 - beta_) -
                        std::lgamma(n - 1.0));
    }

  private:
    explicit OffspringLaw(OffspringFamily f) : family_(f) {}

    static std::string fmt(double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return buf;
    }

    static std::uint64_t sample_geom_half(Rng& rng) {
        std::uint64_t k = 0;
        while (rng.u01() < 0.5) ++k;
        return k;
    }

    void finalize_table_cdf() {
        cdf_.resize(pmf_.size());
        double acc = 0.0;
        for (size_t k = 0; k < pmf_.size(); ++k) {
            acc += pmf_[k];
            cdf_[k] = acc;
        }
    }

    void finalize_size_biased_cdf() {
        sb_cdf_.resize(pmf_.size());
        double acc = 0.0;
        for (size_t k = 0; k < pmf_.size(); ++k) {
            acc += static_cast<double>(k) * pmf_[k];
            sb_cdf_[k] = acc;
        }
    }

    std::uint64_t sample_table(double u) const {
        const auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
        return static_cast<std::uint64_t>(it - cdf_.begin());
    }

    // smallest n with T(n+1) < v <= T(n), searched on the closed-form tail
    std::uint64_t stable_tail_quantile(double v, bool size_biased) const {
        auto tail = [&](double n) {
            return size_biased ? stable_tail_size_biased(n) : stable_tail(n);
        };
        std::uint64_t lo = pmf_.size();  // tail(lo) >= v by construction
        std::uint64_t hi = lo;
        while (tail(static_cast<double>(hi) + 1.0) >= v) {
            lo = hi;
            if (hi > (1ull << 62)) break;
            hi *= 2;
        }
        while (lo < hi) {
            const std::uint64_t mid = lo + (hi - lo + 1) / 2;
            if (tail(static_cast<double>(mid)) >= v)
                lo = mid;
            else
                hi = mid - 1;
        }
        return lo;
    }

    OffspringFamily family_;
    double beta_ = 1.0;
    double variance_ = kInf;
    double kappa_ = 0.0;
    std::vector<double> pmf_;
    std::vector<double> cdf_;
    std::vector<double> sb_cdf_;
};

enum class StepFamily { gauss_isotropic, gauss_cov, uniform_ball, rademacher };

// Centered d-dimensional displacement law with positive definite covariance.
class StepLaw {
  public:
    static StepLaw gauss(int d, double eta2) {
        check_dim(d);
        if (!(eta2 > 0.0)) throw std::invalid_argument("eta2 must be positive");
        StepLaw law(StepFamily::gauss_isotropic, d);
        law.eta2_ = eta2;
        law.sigma_ = std::sqrt(eta2);
        law.cov_.assign(d * d, 0.0);
        for (int i = 0; i < d; ++i) law.cov_[i * d + i] = eta2;
        return law;
    }

    static StepLaw gauss_cov(int d, std::vector<double> cov) {
        check_dim(d);
        if (cov.size() != static_cast<size_t>(d) * d)
            throw std::invalid_argument("covariance must be d x d");
        StepLaw law(StepFamily::gauss_cov, d);
        law.cov_ = std::move(cov);
        law.chol_ = cholesky(law.cov_, d);
        return law;
    }

    static StepLaw uniform_ball(int d, double eta2) {
        check_dim(d);
        if (!(eta2 > 0.0)) throw std::invalid_argument("eta2 must be positive");
        StepLaw law(StepFamily::uniform_ball, d);
        law.eta2_ = eta2;
        // per-coordinate variance of the uniform ball of radius R is R^2/(d+2)
        law.radius_ = std::sqrt(eta2 * (d + 2));
        law.cov_.assign(d * d, 0.0);
        for (int i = 0; i < d; ++i) law.cov_[i * d + i] = eta2;
        return law;
    }

    static StepLaw rademacher(int d) {
        check_dim(d);
        StepLaw law(StepFamily::rademacher, d);
        law.eta2_ = 1.0;
        law.cov_.assign(d * d, 0.0);
        for (int i = 0; i < d; ++i) law.cov_[i * d + i] = 1.0;
        return law;
    }

    // `gauss:d=2,eta2=1`, `gausscov:d=2,c11=..,c12=..,c22=..`,
    // `uniball:d=3,eta2=1`, `rademacher:d=1`
    static StepLaw parse(std::string_view spec) {
        const size_t colon = spec.find(':');
        const std::string_view name = spec.substr(0, colon);
        auto kv = colon == std::string_view::npos
                      ? std::map<std::string, std::string>{}
                      : detail::parse_kv(spec.substr(colon + 1));
        auto dim_of = [&] {
            if (!kv.count("d")) throw std::invalid_argument("step spec needs d=");
            return detail::to_int(kv.at("d"));
        };
        if (name == "gauss") return gauss(dim_of(), detail::to_double(kv.at("eta2")));
        if (name == "uniball") return uniform_ball(dim_of(), detail::to_double(kv.at("eta2")));
        if (name == "rademacher") return rademacher(dim_of());
        if (name == "gausscov") {
            const int d = dim_of();
            std::vector<double> cov(d * d, 0.0);
            for (int i = 1; i <= d; ++i)
                for (int j = i; j <= d; ++j) {
                    const std::string key = "c" + std::to_string(i) + std::to_string(j);
                    if (!kv.count(key)) throw std::invalid_argument("gausscov needs " + key);
                    cov[(i - 1) * d + (j - 1)] = cov[(j - 1) * d + (i - 1)] =
                        detail::to_double(kv.at(key));
                }
            return gauss_cov(d, std::move(cov));
        }
        throw std::invalid_argument("unknown step law: " + std::string(spec));
    }

    int dim() const { return dim_; }
    StepFamily family() const { return family_; }
    const std::vector<double>& covariance() const { return cov_; }
    bool isotropic() const { return family_ != StepFamily::gauss_cov; }
    // per-coordinate variance; defined for the isotropic families
    double eta2() const {
        if (!isotropic())
            throw std::invalid_argument("eta2 is defined for isotropic step laws only");
        return eta2_;
    }
    double max_coord_variance() const {
        double m = 0.0;
        for (int i = 0; i < dim_; ++i) m = std::max(m, cov_[i * dim_ + i]);
        return m;
    }

    void sample(Rng& rng, double* out) const {
        switch (family_) {
            case StepFamily::gauss_isotropic:
                for (int i = 0; i < dim_; ++i) out[i] = sigma_ * rng.normal();
                return;
            case StepFamily::gauss_cov: {
                double z[kMaxDim];
                for (int i = 0; i < dim_; ++i) z[i] = rng.normal();
                for (int i = 0; i < dim_; ++i) {
                    double acc = 0.0;
                    for (int j = 0; j <= i; ++j) acc += chol_[i * dim_ + j] * z[j];
                    out[i] = acc;
                }
                return;
            }
            case StepFamily::uniform_ball: {
                // gaussian direction, radial inversion
                double norm2 = 0.0;
                for (int i = 0; i < dim_; ++i) {
                    out[i] = rng.normal();
                    norm2 += out[i] * out[i];
                }
                const double scale =
                    radius_ * std::pow(rng.u01_pos(), 1.0 / dim_) / std::sqrt(norm2);
                for (int i = 0; i < dim_; ++i) out[i] *= scale;
                return;
            }
            case StepFamily::rademacher: {
                std::uint64_t bits = rng.next_u64();
                for (int i = 0; i < dim_; ++i) {
                    out[i] = (bits & 1ull) ? 1.0 : -1.0;
                    bits >>= 1;
                }
                return;
            }
        }
    }

    std::string to_string() const {
        const std::string d = "d=" + std::to_string(dim_);
        switch (family_) {
            case StepFamily::gauss_isotropic: return "gauss:" + d + ",eta2=" + fmt(eta2_);
            case StepFamily::uniform_ball: return "uniball:" + d + ",eta2=" + fmt(eta2_);
            case StepFamily::rademacher: return "rademacher:" + d;
            case StepFamily::gauss_cov: {
                std::string s = "gausscov:" + d;
                for (int i = 1; i <= dim_; ++i)
                    for (int j = i; j <= dim_; ++j)
                        s += ",c" + std::to_string(i) + std::to_string(j) + "=" +
                             fmt(cov_[(i - 1) * dim_ + (j - 1)]);
                return s;
            }
        }
        return "?";
    }

    static constexpr int kMaxDim = 16;

  private:
    StepLaw(StepFamily f, int d) : family_(f), dim_(d) {}

    static void check_dim(int d) {
        if (d < 1 || d > kMaxDim) throw std::invalid_argument("step dimension out of range");
    }

    static std::string fmt(double v) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%.17g", v);
        return buf;
    }

    static std::vector<double> cholesky(const std::vector<double>& a, int d) {
        std::vector<double> L(d * d, 0.0);
        for (int i = 0; i < d; ++i) {
            for (int j = 0; j <= i; ++j) {
                double acc = a[i * d + j];
                for (int k = 0; k < j; ++k) acc -= L[i * d + k] * L[j * d + k];
                if (i == j) {
                    if (acc <= 0.0)
                        throw std::invalid_argument("covariance is not positive definite");
                    L[i * d + i] = std::sqrt(acc);
                } else {
                    L[i * d + j] = acc / L[j * d + j];
                }
            }
        }
        return L;
    }

    StepFamily family_;
    int dim_;
    double eta2_ = std::numeric_limits<double>::quiet_NaN();
    double sigma_ = 0.0;
    double radius_ = 0.0;
    std::vector<double> cov_;
    std::vector<double> chol_;
};

}  // namespace brw
