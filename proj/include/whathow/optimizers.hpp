#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "whathow/params.hpp"
#include "whathow/tensor.hpp"

namespace whathow {

/// Factorized Gaussian over a parameter vector.
struct GaussianParams {
    ParamVector mu;
    ParamVector sigma;
    double sigma0 = 0.0;
};

struct BgdConfig {
    double eta = 1.0;   // mean learning rate
    int mc_samples = 10;
    double sigma0 = 0.05;

    void validate() const {
        if (eta <= 0.0) throw std::invalid_argument("BgdConfig: eta must be positive");
        if (mc_samples < 1) throw std::invalid_argument("BgdConfig: mc_samples must be >= 1");
        if (sigma0 <= 0.0) throw std::invalid_argument("BgdConfig: sigma0 must be positive");
    }
};

inline GaussianParams init_gaussian(ParamVector mu, double sigma0) {
    if (sigma0 <= 0.0) throw std::invalid_argument("init_gaussian: sigma0 must be positive");
    GaussianParams g;
    g.sigma = mu.like(sigma0);
    g.mu = std::move(mu);
    g.sigma0 = sigma0;
    return g;
}

struct ParamSample {
    ParamVector theta;  // mu + sigma * eps
    ParamVector eps;    // standard normal draws, kept for the sigma update
};

/// Reparametrized draw theta = mu + sigma * eps, eps ~ N(0, 1).
inline ParamSample sample_params(const GaussianParams& g, Rng& rng) {
    ParamSample s;
    s.theta = g.mu;
    s.eps = g.mu.like(0.0);
    for (std::size_t i = 0; i < s.theta.size(); ++i) {
        auto& th = s.theta[i].tensor.data;
        auto& ep = s.eps[i].tensor.data;
        const auto& sg = g.sigma[i].tensor.data;
        for (std::size_t j = 0; j < th.size(); ++j) {
            ep[j] = rng.normal();
            th[j] += sg[j] * ep[j];
        }
    }
    return s;
}

struct McEstimates {
    ParamVector g_mu;     // mean_k grad_k
    ParamVector g_sigma;  // mean_k grad_k * eps_k
};

/// Monte Carlo estimates of the two expectations in the BGD update, from K
/// aligned (gradient, eps) sample pairs. Reduction is in sample order, so the
/// result does not depend on how samples were computed.
inline McEstimates mc_estimates(std::span<const ParamVector> grads, std::span<const ParamVector> eps) {
    if (grads.empty()) throw std::invalid_argument("mc_estimates: no samples");
    if (grads.size() != eps.size()) throw std::invalid_argument("mc_estimates: grads/eps sample counts differ");
    McEstimates est;
    est.g_mu = grads[0].like(0.0);
    est.g_sigma = grads[0].like(0.0);
    const double inv_k = 1.0 / static_cast<double>(grads.size());
    for (std::size_t k = 0; k < grads.size(); ++k) {
        for (std::size_t i = 0; i < est.g_mu.size(); ++i) {
            auto& gm = est.g_mu[i].tensor.data;
            auto& gs = est.g_sigma[i].tensor.data;
            const auto& g = grads[k][i].tensor.data;
            const auto& e = eps[k][i].tensor.data;
            for (std::size_t j = 0; j < gm.size(); ++j) {
                gm[j] += inv_k * g[j];
                gs[j] += inv_k * g[j] * e[j];
            }
        }
    }
    return est;
}

inline constexpr double kSigmaFloor = 1e-12;

/// One BGD update:
///   mu    <- mu - eta * sigma^2 * g_mu
///   sigma <- sigma * sqrt(1 + a^2) - sigma * a,   a = sigma * g_sigma / 2
/// The sigma update is positive for every finite a; a floor guards float
/// underflow only.
inline void bgd_step(GaussianParams& g, const McEstimates& est, double eta) {
    if (!g.mu.congruent(est.g_mu) || !g.mu.congruent(est.g_sigma))
        throw std::invalid_argument("bgd_step: estimate shapes do not match the distribution");
    for (std::size_t i = 0; i < g.mu.size(); ++i) {
        auto& mu = g.mu[i].tensor.data;
        auto& sg = g.sigma[i].tensor.data;
        const auto& gm = est.g_mu[i].tensor.data;
        const auto& gs = est.g_sigma[i].tensor.data;
        for (std::size_t j = 0; j < mu.size(); ++j) {
            if (!std::isfinite(gm[j]) || !std::isfinite(gs[j]))
                throw std::runtime_error("bgd_step: non-finite gradient estimate at parameter " + g.mu[i].name +
                                         "[" + std::to_string(j) + "]");
            mu[j] -= eta * sg[j] * sg[j] * gm[j];
            const double a = 0.5 * sg[j] * gs[j];
            sg[j] = sg[j] * (std::sqrt(1.0 + a * a) - a);
            if (sg[j] < kSigmaFloor) sg[j] = kSigmaFloor;
        }
    }
}

struct AdamConfig {
    double lr = 1e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    ParamVector m;
    ParamVector v;
    long step = 0;

    static AdamState like(const ParamVector& params) { return AdamState{params.like(0.0), params.like(0.0), 0}; }
};

/// Standard bias-corrected Adam update, in place.
inline void adam_step(AdamState& state, ParamVector& params, const ParamVector& grads, const AdamConfig& cfg = {}) {
    if (!params.congruent(grads)) throw std::invalid_argument("adam_step: gradient shapes do not match parameters");
    state.step += 1;
    const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
    const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& p = params[i].tensor.data;
        auto& m = state.m[i].tensor.data;
        auto& v = state.v[i].tensor.data;
        const auto& g = grads[i].tensor.data;
        for (std::size_t j = 0; j < p.size(); ++j) {
            if (!std::isfinite(g[j]))
                throw std::runtime_error("adam_step: non-finite gradient at parameter " + params[i].name + "[" +
                                         std::to_string(j) + "]");
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            const double mhat = m[j] / bc1;
            const double vhat = v[j] / bc2;
            p[j] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
        }
    }
}

}  // namespace whathow
