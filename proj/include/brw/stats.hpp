#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

namespace brw {

inline std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

// standard normal quantile (Acklam's rational approximation, ~1e-9 absolute)
inline double normal_quantile(double p) {
    if (!(p > 0.0 && p < 1.0)) throw std::invalid_argument("quantile needs p in (0,1)");
    static const double a[] = {-3.969683028665376e+01, 2.209460984245205e+02,
                               -2.759285104469687e+02, 1.383577518672690e+02,
                               -3.066479806614716e+01, 2.506628277459239e+00};
    static const double b[] = {-5.447609879822406e+01, 1.615858368580409e+02,
                               -1.556989798598866e+02, 6.680131188771972e+01,
                               -1.328068155288572e+01};
    static const double c[] = {-7.784894002430293e-03, -3.223964580411365e-01,
                               -2.400758277161838e+00, -2.549732539343734e+00,
                               4.374664141464968e+00,  2.938163982698783e+00};
    static const double d[] = {7.784695709041462e-03, 3.224671290700398e-01,
                               2.445134137142996e+00, 3.754408661907416e+00};
    const double plow = 0.02425;
    if (p < plow) {
        const double q = std::sqrt(-2.0 * std::log(p));
        return (((((c[0] * q + c[1]) * q + c[2]) * q + c[3]) * q + c[4]) * q + c[5]) /
               ((((d[0] * q + d[1]) * q + d[2]) * q + d[3]) * q + 1.0);
    }
    if (p > 1.0 - plow) return -normal_quantile(1.0 - p);
    const double q = p - 0.5, r = q * q;
    return (((((a[0] * r + a[1]) * r + a[2]) * r + a[3]) * r + a[4]) * r + a[5]) * q /
           (((((b[0] * r + b[1]) * r + b[2]) * r + b[3]) * r + b[4]) * r + 1.0);
}

// Wilson score interval for a binomial proportion.
inline std::pair<double, double> wilson_ci(std::uint64_t successes, std::uint64_t trials,
                                           double level) {
    if (trials == 0) throw std::invalid_argument("wilson_ci needs trials >= 1");
    if (successes > trials) throw std::invalid_argument("successes exceed trials");
    if (!(level > 0.0 && level < 1.0)) throw std::invalid_argument("level in (0,1)");
    const double z = normal_quantile(0.5 + level / 2.0);
    const double n = static_cast<double>(trials);
    const double p = static_cast<double>(successes) / n;
    const double z2n = z * z / n;
    const double center = (p + z2n / 2.0) / (1.0 + z2n);
    const double half = z * std::sqrt(p * (1.0 - p) / n + z2n / (4.0 * n)) / (1.0 + z2n);
    return {std::max(0.0, center - half), std::min(1.0, center + half)};
}

// Tolerance rules are data: |observed - predicted| <= k_se * se + bias + abs.
struct ToleranceRule {
    double k_se = 3.0;
    double bias_mult = 1.0;
    double abs = 0.0;

    double evaluate(double se, double bias) const { return k_se * se + bias_mult * bias + abs; }
    std::string to_string() const {
        return fmt_g17(k_se) + "*se+" + fmt_g17(bias_mult) + "*bias+" + fmt_g17(abs);
    }
};

struct ComparisonItem {
    std::string name;
    double observed = 0.0;
    double predicted = 0.0;
    double se = 0.0;
    double bias = 0.0;
    ToleranceRule rule;
    bool pass = false;
};

struct ComparisonReport {
    std::vector<ComparisonItem> items;
    nlohmann::ordered_json meta;

    bool all_pass() const {
        for (const auto& it : items)
            if (!it.pass) return false;
        return true;
    }

    nlohmann::ordered_json to_json() const {
        nlohmann::ordered_json j;
        j["meta"] = meta.is_null() ? nlohmann::ordered_json::object() : meta;
        auto arr = nlohmann::ordered_json::array();
        for (const auto& it : items) {
            nlohmann::ordered_json e;
            e["name"] = it.name;
            e["observed"] = fmt_g17(it.observed);
            e["predicted"] = fmt_g17(it.predicted);
            e["se"] = fmt_g17(it.se);
            e["bias"] = fmt_g17(it.bias);
            e["rule"] = it.rule.to_string();
            e["verdict"] = it.pass ? "pass" : "fail";
            arr.push_back(std::move(e));
        }
        j["items"] = std::move(arr);
        return j;
    }

    std::string to_csv() const {
        std::string s = "name,observed,predicted,se,bias,rule,verdict\n";
        for (const auto& it : items) {
            s += it.name + "," + fmt_g17(it.observed) + "," + fmt_g17(it.predicted) + "," +
                 fmt_g17(it.se) + "," + fmt_g17(it.bias) + "," + it.rule.to_string() + "," +
                 (it.pass ? "pass" : "fail") + "\n";
        }
        return s;
    }
};

// Aligns observed/predicted series by name and applies each rule.
inline ComparisonReport compare_report(
    const std::vector<std::tuple<std::string, double, double, double>>& observed,
    const std::vector<std::pair<std::string, double>>& predicted,
    const std::vector<std::pair<std::string, ToleranceRule>>& rules) {
    ComparisonReport rep;
    for (const auto& [name, obs, se, bias] : observed) {
        const auto pit = std::find_if(predicted.begin(), predicted.end(),
                                      [&](const auto& p) { return p.first == name; });
        if (pit == predicted.end())
            throw std::invalid_argument("no prediction for series key: " + name);
        ToleranceRule rule;
        const auto rit = std::find_if(rules.begin(), rules.end(),
                                      [&](const auto& r) { return r.first == name; });
        if (rit != rules.end()) rule = rit->second;
        ComparisonItem item{name, obs, pit->second, se, bias, rule, false};
        item.pass = std::fabs(obs - pit->second) <= rule.evaluate(se, bias);
        rep.items.push_back(std::move(item));
    }
    return rep;
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path);
    out << content;
}

}  // namespace brw
