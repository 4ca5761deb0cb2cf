#pragma once

#include <deque>
#include <thread>

#include "acdm/objectives.hpp"

namespace acdm {

/// DDPM posterior mean with the fixed-variance parameterization:
/// mu = (d_r - beta_r / sqrt(1 - alpha_bar_r) * eps_hat) / sqrt(alpha_r).
inline double ddpm_posterior_mean(double d_r, double eps_hat, int r, const DiffusionSchedule& s) {
    if (r <= 0) throw std::invalid_argument("reverse_step: r must be >= 1");
    return (d_r - s.beta[r] / std::sqrt(1.0 - s.alpha_bar[r]) * eps_hat) / std::sqrt(s.alpha[r]);
}

/// Brute-force q-posterior mean q(x_{r-1} | x_r, x_0) used as the algebraic
/// oracle for the reverse step.
inline double q_posterior_mean(double x0, double x_r, int r, const DiffusionSchedule& s) {
    double ab_prev = s.alpha_bar[r - 1];
    double coef0 = std::sqrt(ab_prev) * s.beta[r] / (1.0 - s.alpha_bar[r]);
    double coefr = std::sqrt(s.alpha[r]) * (1.0 - ab_prev) / (1.0 - s.alpha_bar[r]);
    return coef0 * x0 + coefr * x_r;
}

/// One reverse-process update on a data slot: posterior mean plus
/// sqrt(beta_r) * z for r > 1, no noise at the terminal step
/// (Sigma_theta fixed to beta_r * I).
template <class Real>
void reverse_update(std::vector<Real>& d, const Real* eps_hat, int r, const DiffusionSchedule& s,
                    Rng* rng) {
    if (r <= 0) throw std::invalid_argument("reverse_step: r must be >= 1");
    double inv_sqrt_a = 1.0 / std::sqrt(s.alpha[r]);
    double coef = s.beta[r] / std::sqrt(1.0 - s.alpha_bar[r]);
    double sig = r > 1 ? std::sqrt(s.beta[r]) : 0.0;
    for (size_t i = 0; i < d.size(); ++i) {
        double mu = (static_cast<double>(d[i]) - coef * static_cast<double>(eps_hat[i])) * inv_sqrt_a;
        d[i] = static_cast<Real>(sig > 0 ? mu + sig * rng->normal() : mu);
    }
}

/// Inference configuration for the autoregressive simulation rollout.
struct RolloutConfig {
    int horizon = 20;
    int k = 2;
    ObjectiveKind variant = ObjectiveKind::acdm;
    int R = 20;                      // diffusion steps / refinement rounds
    double refiner_sigma_min = 1e-6;
    int ensemble_size = 1;
    uint64_t seed = 0;
    int jobs = 1;  // concurrent ensemble members
    // Known parameter values per generated step (normalized units), one entry
    // per parameter channel; empty = hold the last conditioning values.
    std::vector<std::vector<double>> param_series;

    void validate() const {
        if (horizon < 1) throw std::invalid_argument("rollout: horizon must be >= 1");
        if (ensemble_size < 1) throw std::invalid_argument("rollout: ensemble size must be >= 1");
        if (k < 1) throw std::invalid_argument("rollout: k must be >= 1");
    }

    bool stochastic() const {
        return variant == ObjectiveKind::acdm || variant == ObjectiveKind::acdm_ncn ||
               variant == ObjectiveKind::refiner;
    }
};

namespace detail {

template <class Real>
TensorPtr<Real> stack_states(const std::deque<FlowState>& states, int extra_channels = 0) {
    const auto& s0 = states.front();
    auto t = tensor<Real>({1, static_cast<int>(states.size()) * s0.c + extra_channels, s0.h, s0.w});
    size_t off = 0;
    for (const auto& s : states) {
        for (size_t i = 0; i < s.data.size(); ++i) t->data[off + i] = static_cast<Real>(s.data[i]);
        off += s.data.size();
    }
    return t;
}

inline void overwrite_params(FlowState& s, int field_channels, const std::vector<double>& values) {
    if (static_cast<int>(values.size()) != s.c - field_channels)
        throw std::invalid_argument("rollout: parameter override has " + std::to_string(values.size()) +
                                    " values for " + std::to_string(s.c - field_channels) +
                                    " parameter channels");
    for (int c = field_channels; c < s.c; ++c) {
        double* ch = s.channel(c);
        std::fill(ch, ch + s.plane(), values[c - field_channels]);
    }
}

}  // namespace detail

/// Full reverse chain for one simulation step: start from d_R ~ N(0,I),
/// rebuild the conditioning at every r (fresh forward-process noise per
/// step, or frozen c_0 when ncn), run the model R times.
/// RNG order: d_R draw, then per r: conditioning noise (when enabled), then
/// the posterior noise z for r > 1.
template <class Real>
FlowState acdm_predict_step(const Model<Real>& model, const std::deque<FlowState>& cond,
                            const DiffusionSchedule& sched, Rng& rng, bool noise_conditioning) {
    NoGradGuard ng;
    const auto& s0 = cond.front();
    const int C = s0.c, H = s0.h, W = s0.w, k = static_cast<int>(cond.size());
    const size_t state_sz = static_cast<size_t>(C) * H * W;

    std::vector<Real> d(state_sz);
    for (auto& v : d) v = static_cast<Real>(rng.normal());

    std::vector<double> eps(state_sz), noised(state_sz);
    auto x = tensor<Real>({1, (k + 1) * C, H, W});
    for (int r = sched.R; r >= 1; --r) {
        for (int s = 0; s < k; ++s) {
            const auto& c0 = cond[s];
            Real* dst = x->data.data() + static_cast<size_t>(s) * state_sz;
            if (noise_conditioning) {
                for (size_t j = 0; j < state_sz; ++j) eps[j] = rng.normal();
                forward_diffuse(c0.data.data(), eps.data(), state_sz, r, sched, noised.data());
                for (size_t j = 0; j < state_sz; ++j) dst[j] = static_cast<Real>(noised[j]);
            } else {
                for (size_t j = 0; j < state_sz; ++j) dst[j] = static_cast<Real>(c0.data[j]);
            }
        }
        std::copy(d.begin(), d.end(), x->data.data() + static_cast<size_t>(k) * state_sz);
        auto out = model.forward(x, {r});
        auto eps_hat = data_slot(out, k * C, C);
        reverse_update(d, eps_hat->data.data(), r, sched, &rng);
    }
    FlowState next(C, H, W);
    for (size_t i = 0; i < state_sz; ++i) next.data[i] = static_cast<double>(d[i]);
    return next;
}

/// PDE-Refiner inference: deterministic prediction with a zeroed data slot at
/// r = R, then R rounds of add-noise / predict-noise / subtract with
/// exponentially decreasing scale.
template <class Real>
FlowState refiner_predict_step(const Model<Real>& model, const std::deque<FlowState>& cond, int R,
                               double sigma_min, Rng& rng) {
    if (sigma_min <= 0 || sigma_min >= 1)
        throw std::invalid_argument("refiner: sigma_min must be in (0,1)");
    NoGradGuard ng;
    const auto& s0 = cond.front();
    const int C = s0.c, H = s0.h, W = s0.w, k = static_cast<int>(cond.size());
    const size_t state_sz = static_cast<size_t>(C) * H * W;

    auto x = tensor<Real>({1, (k + 1) * C, H, W});
    size_t off = 0;
    for (const auto& s : cond) {
        for (size_t i = 0; i < state_sz; ++i) x->data[off + i] = static_cast<Real>(s.data[i]);
        off += state_sz;
    }
    std::fill_n(x->data.data() + static_cast<size_t>(k) * state_sz, state_sz, Real(0));
    auto pred = data_slot(model.forward(x, {R}), k * C, C);
    std::vector<Real> d(pred->data.begin(), pred->data.end());

    for (int r = R - 1; r >= 0; --r) {
        double sig = refiner_sigma(r, R, sigma_min);
        Real* dslot = x->data.data() + static_cast<size_t>(k) * state_sz;
        for (size_t i = 0; i < state_sz; ++i) dslot[i] = d[i] + static_cast<Real>(sig * rng.normal());
        auto eps_hat = data_slot(model.forward(x, {r}), k * C, C);
        for (size_t i = 0; i < state_sz; ++i)
            d[i] = dslot[i] - static_cast<Real>(sig) * eps_hat->data[i];
    }
    FlowState next(C, H, W);
    for (size_t i = 0; i < state_sz; ++i) next.data[i] = static_cast<double>(d[i]);
    return next;
}

/// Deterministic single-pass prediction (U-Net / ResNet / FNO inference).
template <class Real>
FlowState nextstep_predict(const Model<Real>& model, const std::deque<FlowState>& cond) {
    NoGradGuard ng;
    const auto& s0 = cond.front();
    auto x = detail::stack_states<Real>(cond);
    auto pred = data_slot(model.forward(x), 0, s0.c);
    FlowState next(s0.c, s0.h, s0.w);
    for (size_t i = 0; i < next.data.size(); ++i) next.data[i] = static_cast<double>(pred->data[i]);
    return next;
}

/// Autoregressive simulation rollout: the conditioning window shifts by one
/// generated state per step; parameter channels are overwritten with the
/// known values after every prediction. The returned trajectory carries the
/// k initial states followed by `horizon` generated ones.
template <class Real>
Trajectory rollout(const Model<Real>& model, const Trajectory& context,
                   const DiffusionSchedule* sched, const RolloutConfig& cfg) {
    cfg.validate();
    if (static_cast<int>(context.states.size()) < cfg.k)
        throw std::invalid_argument("rollout: context provides fewer than k states");
    const int n_params = context.channels() - context.field_channels;

    std::deque<FlowState> window(context.states.begin(), context.states.begin() + cfg.k);
    Rng rng(cfg.seed);

    Trajectory out;
    out.dt = context.dt;
    out.channel_names = context.channel_names;
    out.field_channels = context.field_channels;
    out.cylinder = context.cylinder;
    out.stats_ref = context.stats_ref;
    out.seed = cfg.seed;
    out.source = "rollout:" + to_string(cfg.variant);
    out.states = {window.begin(), window.end()};

    auto last_params = [&]() {
        std::vector<double> v(n_params);
        for (int c = 0; c < n_params; ++c) v[c] = window.back().channel(context.field_channels + c)[0];
        return v;
    };

    for (int t = 0; t < cfg.horizon; ++t) {
        FlowState next;
        switch (cfg.variant) {
            case ObjectiveKind::acdm:
                next = acdm_predict_step(model, window, *sched, rng, true);
                break;
            case ObjectiveKind::acdm_ncn:
                next = acdm_predict_step(model, window, *sched, rng, false);
                break;
            case ObjectiveKind::refiner:
                next = refiner_predict_step(model, window, cfg.R, cfg.refiner_sigma_min, rng);
                break;
            default:
                next = nextstep_predict(model, window);
        }
        std::vector<double> pv = cfg.param_series.empty()
                                     ? last_params()
                                     : cfg.param_series[std::min<size_t>(t, cfg.param_series.size() - 1)];
        if (n_params > 0) detail::overwrite_params(next, context.field_channels, pv);
        out.states.push_back(next);
        window.pop_front();
        window.push_back(std::move(next));
    }
    return out;
}

/// Independent posterior samples for one initial condition. Member i uses
/// seed base+i; members run concurrently on read-only weights when jobs > 1.
template <class Real>
std::vector<Trajectory> posterior_ensemble(const Model<Real>& model, const Trajectory& context,
                                           const DiffusionSchedule* sched, const RolloutConfig& cfg) {
    cfg.validate();
    std::vector<Trajectory> members(cfg.ensemble_size);
    auto run_member = [&](int i) {
        RolloutConfig mc = cfg;
        mc.seed = cfg.seed + static_cast<uint64_t>(i);
        mc.ensemble_size = 1;
        members[i] = rollout(model, context, sched, mc);
    };
    int jobs = std::max(1, cfg.jobs);
    if (jobs == 1) {
        for (int i = 0; i < cfg.ensemble_size; ++i) run_member(i);
    } else {
        for (int base = 0; base < cfg.ensemble_size; base += jobs) {
            std::vector<std::thread> pool;
            for (int i = base; i < std::min(cfg.ensemble_size, base + jobs); ++i)
                pool.emplace_back(run_member, i);
            for (auto& th : pool) th.join();
        }
    }
    return members;
}

}  // namespace acdm
