#pragma once

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "latcert/latent.hpp"
#include "latcert/model_checker.hpp"

namespace latcert {

struct PacParams {
    double epsilon = 0.01;
    double delta = 0.005;
    double gamma = 0.99;

    void validate() const {
        if (!(epsilon > 0.0 && epsilon < 1.0))
            throw std::invalid_argument("pac: epsilon must be in (0,1)");
        if (!(delta > 0.0 && delta < 1.0))
            throw std::invalid_argument("pac: delta must be in (0,1)");
        if (!(gamma >= 0.0 && gamma < 1.0))
            throw std::invalid_argument("pac: gamma must be in [0,1)");
    }
};

// Hoeffding sample size for the loss estimators (natural log).
inline long long required_samples_loss(const PacParams& p) {
    p.validate();
    return static_cast<long long>(std::ceil(-std::log(p.delta / 4.0) / (2.0 * p.epsilon * p.epsilon)));
}

// Sample size for the value-difference bound.
inline long long required_samples_value(const PacParams& p, double KV) {
    p.validate();
    if (KV < 0.0) throw std::invalid_argument("pac: KV must be nonnegative");
    double num = -std::log(p.delta / 4.0) * std::pow(1.0 + p.gamma * KV, 2);
    double den = 2.0 * p.epsilon * p.epsilon * std::pow(1.0 - p.gamma, 2);
    return static_cast<long long>(std::ceil(num / den));
}

struct LossEstimate {
    double L_R_hat = 0.0;
    double L_P_hat = 0.0;
    long long T_used = 0;
    PacParams params;
};

// Empirical local losses over an embedded on-policy sequence:
//   L_R_hat = mean |r_t - R(z_t, a_t)|
//   L_P_hat = mean [1 - P(z_{t+1} | z_t, a_t)]
// The first burn_in transitions are discarded to approach stationarity and
// every thin-th transition is kept thereafter.
inline LossEstimate estimate_losses(const std::vector<LatentTransition>& seq, const LatentMdp& m,
                                    const PacParams& params, std::size_t burn_in = 0,
                                    std::size_t thin = 1) {
    params.validate();
    if (thin < 1) throw std::invalid_argument("estimate_losses: thin must be >= 1");
    double sum_r = 0.0, sum_p = 0.0;
    long long T = 0;
    for (std::size_t t = burn_in; t < seq.size(); t += thin) {
        const LatentTransition& tr = seq[t];
        sum_r += std::abs(tr.r - m.reward(tr.s, tr.a));
        sum_p += 1.0 - m.prob(tr.s_next, tr.s, tr.a);
        ++T;
    }
    if (T == 0) throw std::invalid_argument("estimate_losses: no transitions after burn-in");
    long long required = required_samples_loss(params);
    if (T < required)
        throw std::runtime_error("estimate_losses: " + std::to_string(T) +
                                 " samples, but the PAC guarantee needs " +
                                 std::to_string(required));
    LossEstimate est;
    est.L_R_hat = sum_r / static_cast<double>(T);
    est.L_P_hat = sum_p / static_cast<double>(T);
    est.T_used = T;
    est.params = params;
    return est;
}

struct CertificateBounds {
    double value_diff_return = 0.0;
    double value_diff_reach = 0.0;
    double bisim_reward = 0.0;
    double bisim_label = 0.0;
    bool vacuous = false;
};

struct CertificateReport {
    LossEstimate estimate;
    LipschitzConstants constants;
    CertificateBounds bounds;
    std::vector<std::string> warnings;
    std::map<std::string, std::string> provenance;

    nlohmann::json to_json() const {
        auto num = [](double x) -> nlohmann::json {
            if (std::isinf(x)) return nullptr;
            return x;
        };
        return {{"params",
                 {{"epsilon", estimate.params.epsilon},
                  {"delta", estimate.params.delta},
                  {"gamma", estimate.params.gamma}}},
                {"T", estimate.T_used},
                {"losses", {{"LR", estimate.L_R_hat}, {"LP", estimate.L_P_hat}}},
                {"constants",
                 {{"KR", constants.KR},
                  {"KP", constants.KP},
                  {"KV", constants.KV},
                  {"Rmax", constants.Rmax}}},
                {"bounds",
                 {{"value_diff_return", num(bounds.value_diff_return)},
                  {"value_diff_reach", num(bounds.value_diff_reach)},
                  {"bisim_reward", num(bounds.bisim_reward)},
                  {"bisim_label", num(bounds.bisim_label)},
                  {"vacuous", bounds.vacuous}}},
                {"warnings", warnings},
                {"provenance", provenance}};
    }
};

// Pure arithmetic from the PAC estimates to the four bound families. The
// bisimulation bounds carry the epsilon slack on both losses; a bound past
// its trivial ceiling is still reported but flagged vacuous.
inline CertificateBounds certificate_bounds(const LossEstimate& est,
                                            const LipschitzConstants& k,
                                            std::vector<std::string>* warnings = nullptr) {
    double eps = est.params.epsilon, gamma = est.params.gamma;
    double LR = est.L_R_hat, LP = est.L_P_hat;
    CertificateBounds b;
    b.value_diff_return = (LR + gamma * k.KV * LP) / (1.0 - gamma) + eps;
    b.value_diff_reach = gamma * LP / (1.0 - gamma) + gamma * eps / (1.0 + gamma * k.KV);
    if (gamma * k.KP < 1.0) {
        b.bisim_reward = (LR + eps) + gamma * (LP + eps) * k.KR / (1.0 - gamma * k.KP);
    } else {
        b.bisim_reward = std::numeric_limits<double>::infinity();
        if (warnings)
            warnings->push_back(
                "gamma*KP >= 1: the reward-bisimulation bound degenerates; KV falls back to "
                "Rmax/(1-gamma)");
    }
    b.bisim_label = gamma * (LP + eps) / (1.0 - gamma);
    b.vacuous = b.value_diff_return > k.Rmax / (1.0 - gamma) || b.value_diff_reach > 1.0 ||
                b.bisim_reward > 1.0 || b.bisim_label > 1.0;
    return b;
}

inline CertificateReport assemble_certificate(const LossEstimate& est,
                                              const LipschitzConstants& k,
                                              std::map<std::string, std::string> provenance = {}) {
    long long required = required_samples_value(est.params, k.KV);
    if (est.T_used < required)
        throw std::runtime_error("assemble_certificate: " + std::to_string(est.T_used) +
                                 " samples, but the value-difference guarantee needs " +
                                 std::to_string(required));
    CertificateReport report;
    report.estimate = est;
    report.constants = k;
    if (k.kv_fallback)
        report.warnings.push_back("gamma*KP >= 1: KV uses the Rmax/(1-gamma) branch");
    report.bounds = certificate_bounds(est, k, &report.warnings);
    report.provenance = std::move(provenance);
    return report;
}

struct PointwiseBounds {
    double bisim_reward = 0.0;      // pointwise reward-bisimulation distance bound
    double value_diff_return = 0.0; // pointwise value-difference bound
};

// Pointwise bounds for two ground states sharing a representation, in the
// discrete oracle setting where the stationary distribution xi is computable.
// Both are the expected bounds scaled by (1/xi(s1) + 1/xi(s2)).
inline PointwiseBounds pointwise_bounds(std::size_t s1, std::size_t s2,
                                        const std::vector<double>& xi, const LossEstimate& est,
                                        const LipschitzConstants& k) {
    if (s1 >= xi.size() || s2 >= xi.size())
        throw std::invalid_argument("pointwise_bounds: state index out of range");
    if (xi[s1] <= 0.0 || xi[s2] <= 0.0)
        throw std::invalid_argument("pointwise_bounds: states must have positive stationary mass");
    double factor = 1.0 / xi[s1] + 1.0 / xi[s2];
    double eps = est.params.epsilon, gamma = est.params.gamma;
    double LR = est.L_R_hat + eps, LP = est.L_P_hat + eps;
    PointwiseBounds out;
    out.bisim_reward = gamma * k.KP < 1.0
                           ? (LR + gamma * LP * k.KR / (1.0 - gamma * k.KP)) * factor
                           : std::numeric_limits<double>::infinity();
    out.value_diff_return = (LR + gamma * k.KV * LP) / (1.0 - gamma) * factor;
    return out;
}

}  // namespace latcert
