#pragma once

#include <cmath>
#include <deque>
#include <stdexcept>
#include <vector>

#include "acdm/backbones.hpp"
#include "acdm/flow_data.hpp"
#include "acdm/ops.hpp"
#include "acdm/rng.hpp"

namespace acdm {

// ---------------------------------------------------------------------------
// Diffusion schedule
// ---------------------------------------------------------------------------

/// Linear variance schedule beta[1..R] with alpha_bar[0..R] cumulative
/// products (alpha_bar[0] = 1).
struct DiffusionSchedule {
    int R = 0;
    std::vector<double> beta;       // index 1..R (index 0 unused)
    std::vector<double> alpha;      // 1 - beta
    std::vector<double> alpha_bar;  // index 0..R
};

/// Builds the schedule with endpoints scaled as 1e-4*(500/R) .. 0.02*(500/R).
/// R < 10 is rejected (the scaled endpoint leaves the valid variance range);
/// at R = 10 the endpoint hits 1 exactly and is capped just below so the
/// reverse-process coefficients stay finite.
inline DiffusionSchedule make_schedule(int R) {
    if (R < 2) throw std::invalid_argument("make_schedule: R must be >= 2");
    // 1e-4 * (500/R) and 0.02 * (500/R), written as single correctly-rounded
    // divisions so the R = 500 and R = 20 endpoints are bit-exact.
    double beta1 = 0.05 / R;
    double betaR = 10.0 / R;
    if (betaR > 1.0)
        throw std::invalid_argument("make_schedule: R = " + std::to_string(R) +
                                    " puts the scaled beta_R at " + std::to_string(betaR) +
                                    " >= 1; R must be at least 10");
    if (betaR >= 1.0) betaR = 1.0 - 1e-3;  // R == 10 exactly
    DiffusionSchedule s;
    s.R = R;
    s.beta.assign(R + 1, 0.0);
    s.alpha.assign(R + 1, 1.0);
    s.alpha_bar.assign(R + 1, 1.0);
    for (int r = 1; r <= R; ++r) {
        double f = R > 1 ? static_cast<double>(r - 1) / (R - 1) : 0.0;
        s.beta[r] = beta1 + f * (betaR - beta1);
        s.alpha[r] = 1.0 - s.beta[r];
        s.alpha_bar[r] = s.alpha_bar[r - 1] * s.alpha[r];
    }
    return s;
}

/// Closed-form forward marginal x_r = sqrt(ab_r) x0 + sqrt(1-ab_r) eps.
inline void forward_diffuse(const double* x0, const double* eps, size_t n, int r,
                            const DiffusionSchedule& s, double* out) {
    if (r < 0 || r > s.R)
        throw std::invalid_argument("forward_diffuse: r = " + std::to_string(r) + " outside [0," +
                                    std::to_string(s.R) + "]");
    double a = std::sqrt(s.alpha_bar[r]);
    double b = std::sqrt(1.0 - s.alpha_bar[r]);
    for (size_t i = 0; i < n; ++i) out[i] = a * x0[i] + (eps ? b * eps[i] : 0.0);
}

inline std::vector<double> forward_diffuse(const std::vector<double>& x0,
                                           const std::vector<double>& eps, int r,
                                           const DiffusionSchedule& s) {
    if (!eps.empty() && eps.size() != x0.size())
        throw std::invalid_argument("forward_diffuse: eps shape mismatch");
    std::vector<double> out(x0.size());
    forward_diffuse(x0.data(), eps.empty() ? nullptr : eps.data(), x0.size(), r, s, out.data());
    return out;
}

// ---------------------------------------------------------------------------
// Objective configuration
// ---------------------------------------------------------------------------

enum class ObjectiveKind { acdm, acdm_ncn, next_step, unrolled, train_noise, refiner };

inline std::string to_string(ObjectiveKind k) {
    switch (k) {
        case ObjectiveKind::acdm: return "acdm";
        case ObjectiveKind::acdm_ncn: return "acdm-ncn";
        case ObjectiveKind::next_step: return "next-step";
        case ObjectiveKind::unrolled: return "unrolled";
        case ObjectiveKind::train_noise: return "train-noise";
        case ObjectiveKind::refiner: return "refiner";
    }
    return "?";
}

inline ObjectiveKind objective_kind_from(const std::string& s) {
    if (s == "acdm") return ObjectiveKind::acdm;
    if (s == "acdm-ncn") return ObjectiveKind::acdm_ncn;
    if (s == "next-step") return ObjectiveKind::next_step;
    if (s == "unrolled") return ObjectiveKind::unrolled;
    if (s == "train-noise") return ObjectiveKind::train_noise;
    if (s == "refiner") return ObjectiveKind::refiner;
    throw std::invalid_argument("unknown objective '" + s + "'");
}

enum class LossKind { huber, mse };

struct ObjectiveConfig {
    ObjectiveKind variant = ObjectiveKind::acdm;
    int k = 2;  // conditioning steps
    LossKind loss = LossKind::huber;
    double huber_delta = 1.0;
    int R = 20;                      // diffusion steps (acdm variants)
    int unroll_m = 8;                // unrolled
    double noise_std = 1e-2;         // train-noise
    int refiner_R = 4;               // refinement rounds
    double refiner_sigma_min = 1e-6; // minimum noise variance

    bool is_diffusion() const { return variant == ObjectiveKind::acdm || variant == ObjectiveKind::acdm_ncn; }
    int target_steps() const { return variant == ObjectiveKind::unrolled ? unroll_m : 1; }

    void validate() const {
        if (k < 1) throw std::invalid_argument("objective: k must be >= 1");
        if (variant == ObjectiveKind::unrolled && unroll_m < 2)
            throw std::invalid_argument("objective: unrolled training needs m >= 2");
        if (variant == ObjectiveKind::train_noise && noise_std <= 0)
            throw std::invalid_argument("objective: training noise needs n > 0");
        if (variant == ObjectiveKind::refiner &&
            (refiner_sigma_min <= 0 || refiner_sigma_min >= 1))
            throw std::invalid_argument("objective: refiner sigma_min must be in (0,1)");
        if (variant == ObjectiveKind::refiner && refiner_R < 0)
            throw std::invalid_argument("objective: refiner R must be >= 0");
    }
};

// ---------------------------------------------------------------------------
// Batch assembly
// ---------------------------------------------------------------------------

/// Stacked training windows: conditioning [N, k*C, H, W] (oldest state first)
/// and targets [N, m*C, H, W].
template <class Real>
struct TrainBatch {
    TensorPtr<Real> cond;
    TensorPtr<Real> targets;
    int k = 1, m = 1, C = 0, H = 0, W = 0;

    TensorPtr<Real> target_state(int i) const { return slice_channels(targets, i * C, C); }
};

template <class Real>
TrainBatch<Real> make_batch(const std::vector<Window>& windows) {
    if (windows.empty()) throw std::invalid_argument("make_batch: no windows");
    const auto& w0 = windows.front();
    const Trajectory& t0 = *w0.traj;
    TrainBatch<Real> b;
    b.k = w0.k;
    b.m = w0.targets;
    b.C = t0.channels();
    b.H = t0.height();
    b.W = t0.width();
    int n = static_cast<int>(windows.size());
    b.cond = tensor<Real>({n, b.k * b.C, b.H, b.W});
    b.targets = tensor<Real>({n, b.m * b.C, b.H, b.W});
    size_t state_sz = static_cast<size_t>(b.C) * b.H * b.W;
    for (int i = 0; i < n; ++i) {
        const Window& w = windows[i];
        if (w.k != b.k || w.targets != b.m) throw std::invalid_argument("make_batch: inhomogeneous windows");
        for (int s = 0; s < b.k; ++s) {
            const auto& st = w.traj->states[w.cond_index(s)];
            for (size_t j = 0; j < state_sz; ++j)
                b.cond->data[(static_cast<size_t>(i) * b.k + s) * state_sz + j] = static_cast<Real>(st.data[j]);
        }
        for (int s = 0; s < b.m; ++s) {
            const auto& st = w.traj->states[w.target_index(s)];
            for (size_t j = 0; j < state_sz; ++j)
                b.targets->data[(static_cast<size_t>(i) * b.m + s) * state_sz + j] = static_cast<Real>(st.data[j]);
        }
    }
    return b;
}

template <class Real>
TensorPtr<Real> apply_loss(const TensorPtr<Real>& pred, const TensorPtr<Real>& target,
                           LossKind kind, double delta) {
    return kind == LossKind::huber ? huber_loss(pred, target, static_cast<Real>(delta))
                                   : mse_loss(pred, target);
}

// ---------------------------------------------------------------------------
// ACDM diffusion training
// ---------------------------------------------------------------------------

/// One noised diffusion element x_r = concat(c_r, d_r) with its injected
/// noise; the channel partition (conditioning first, data last) is fixed.
template <class Real>
struct DiffusionState {
    TensorPtr<Real> x_r;    // [N, (k+1)*C, H, W]
    TensorPtr<Real> eps_d;  // [N, C, H, W] noise injected on the data slot
    std::vector<int> r;     // per-sample diffusion step
    int cond_channels = 0, data_channels = 0;
};

/// Noising stage of an ACDM training step. Per sample: draw r ~ U{1..R},
/// noise the target via the closed-form marginal, and noise the conditioning
/// the same way unless noise_conditioning is off (the ncn ablation).
/// RNG consumption order per sample: r, eps_d, then eps_c per conditioning state.
template <class Real>
DiffusionState<Real> acdm_noise_batch(const TrainBatch<Real>& batch, const DiffusionSchedule& sched,
                                      Rng& rng, bool noise_conditioning) {
    if (batch.m != 1) throw std::invalid_argument("acdm: exactly one target state per window");
    int n = batch.cond->shape[0];
    size_t state_sz = static_cast<size_t>(batch.C) * batch.H * batch.W;
    DiffusionState<Real> ds;
    ds.cond_channels = batch.k * batch.C;
    ds.data_channels = batch.C;
    ds.r.resize(n);
    ds.x_r = tensor<Real>({n, (batch.k + 1) * batch.C, batch.H, batch.W});
    ds.eps_d = tensor<Real>({n, batch.C, batch.H, batch.W});

    std::vector<double> eps(state_sz), noised(state_sz), x0(state_sz);
    for (int i = 0; i < n; ++i) {
        int r = static_cast<int>(rng.uniform_int(1, sched.R));
        ds.r[i] = r;
        // data slot
        for (size_t j = 0; j < state_sz; ++j) {
            eps[j] = rng.normal();
            x0[j] = static_cast<double>(batch.targets->data[static_cast<size_t>(i) * state_sz + j]);
            ds.eps_d->data[static_cast<size_t>(i) * state_sz + j] = static_cast<Real>(eps[j]);
        }
        forward_diffuse(x0.data(), eps.data(), state_sz, r, sched, noised.data());
        Real* xr = ds.x_r->data.data() + static_cast<size_t>(i) * (batch.k + 1) * state_sz;
        for (size_t j = 0; j < state_sz; ++j) xr[batch.k * state_sz + j] = static_cast<Real>(noised[j]);
        // conditioning slots
        for (int s = 0; s < batch.k; ++s) {
            const Real* c0 = batch.cond->data.data() + (static_cast<size_t>(i) * batch.k + s) * state_sz;
            if (noise_conditioning) {
                for (size_t j = 0; j < state_sz; ++j) {
                    eps[j] = rng.normal();
                    x0[j] = static_cast<double>(c0[j]);
                }
                forward_diffuse(x0.data(), eps.data(), state_sz, r, sched, noised.data());
                for (size_t j = 0; j < state_sz; ++j) xr[s * state_sz + j] = static_cast<Real>(noised[j]);
            } else {
                for (size_t j = 0; j < state_sz; ++j) xr[s * state_sz + j] = c0[j];
            }
        }
    }
    return ds;
}

/// Takes the data-slot slice of a model output: either the model emits the
/// noise estimate for the d channels directly, or a full x-shaped estimate
/// whose conditioning part is discarded.
template <class Real>
TensorPtr<Real> data_slot(const TensorPtr<Real>& out, int cond_channels, int data_channels) {
    int oc = out->shape[1];
    if (oc == data_channels) return out;
    if (oc == cond_channels + data_channels) return slice_channels(out, cond_channels, data_channels);
    throw std::invalid_argument("objective: model output channels " + std::to_string(oc) +
                                " match neither d (" + std::to_string(data_channels) + ") nor x (" +
                                std::to_string(cond_channels + data_channels) + ")");
}

template <class Real>
TensorPtr<Real> acdm_loss(const Model<Real>& model, const DiffusionState<Real>& ds,
                          LossKind loss, double delta) {
    auto out = model.forward(ds.x_r, ds.r);
    auto eps_hat = data_slot(out, ds.cond_channels, ds.data_channels);
    return apply_loss(eps_hat, ds.eps_d, loss, delta);
}

/// Full ACDM training step: noise, predict, Huber/MSE on the injected noise.
template <class Real>
TensorPtr<Real> acdm_train_step(const Model<Real>& model, const TrainBatch<Real>& batch,
                                const DiffusionSchedule& sched, Rng& rng, bool noise_conditioning,
                                LossKind loss = LossKind::huber, double delta = 1.0) {
    auto ds = acdm_noise_batch(batch, sched, rng, noise_conditioning);
    return acdm_loss(model, ds, loss, delta);
}

// ---------------------------------------------------------------------------
// Deterministic baselines
// ---------------------------------------------------------------------------

/// Single-step MSE on the next state.
template <class Real>
TensorPtr<Real> nextstep_train_step(const Model<Real>& model, const TrainBatch<Real>& batch) {
    auto pred = data_slot(model.forward(batch.cond), 0, batch.C);
    return mse_loss(pred, batch.target_state(0));
}

/// Autoregressive m-step rollout inside the graph; per-step MSE averaged.
/// The gradient flows through every intermediate prediction.
template <class Real>
TensorPtr<Real> unrolled_train_step(const Model<Real>& model, const TrainBatch<Real>& batch, int m) {
    if (m < 1) throw std::invalid_argument("unrolled: m must be >= 1");
    if (m > batch.m)
        throw std::invalid_argument("unrolled: m = " + std::to_string(m) + " exceeds the window's " +
                                    std::to_string(batch.m) + " target states");
    std::deque<TensorPtr<Real>> window;
    for (int s = 0; s < batch.k; ++s) window.push_back(slice_channels(batch.cond, s * batch.C, batch.C));
    TensorPtr<Real> total;
    for (int i = 0; i < m; ++i) {
        auto x = window.size() == 1 ? window.front()
                                    : concat_channels(std::vector<TensorPtr<Real>>(window.begin(), window.end()));
        auto pred = data_slot(model.forward(x), 0, batch.C);
        auto li = mse_loss(pred, batch.target_state(i));
        total = total ? add(total, li) : li;
        window.pop_front();
        window.push_back(pred);
    }
    return scale(total, Real(1.0 / m));
}

/// Next-step MSE with N(0, n^2) perturbation of the inputs; targets stay clean.
template <class Real>
TensorPtr<Real> noisy_train_step(const Model<Real>& model, const TrainBatch<Real>& batch, double n,
                                 Rng& rng) {
    if (n < 0) throw std::invalid_argument("train-noise: n must be >= 0");
    auto noisy = tensor<Real>(batch.cond->shape);
    for (size_t i = 0; i < noisy->data.size(); ++i)
        noisy->data[i] = batch.cond->data[i] + static_cast<Real>(rng.normal() * n);
    auto pred = data_slot(model.forward(noisy), 0, batch.C);
    return mse_loss(pred, batch.target_state(0));
}

// ---------------------------------------------------------------------------
// PDE-Refiner training
// ---------------------------------------------------------------------------

/// Noise scale of refinement step r (r < R): sigma_r^2 = (sigma_min^2)^((R-r)/R).
inline double refiner_sigma(int r, int R, double sigma_min) {
    return std::pow(sigma_min, static_cast<double>(R - r) / R);
}

template <class Real>
struct RefinerSample {
    TensorPtr<Real> input;   // [N, (k+1)*C, H, W]: conditioning + d-slot
    TensorPtr<Real> target;  // [N, C, H, W]: next state (r=R) or injected noise (r<R)
    std::vector<int> r;
};

/// Per sample: draw r ~ U{0..R}. r = R: d-slot zeroed, predict the next
/// state. r < R: d-slot holds the target perturbed at level sigma_r, predict
/// the injected unit noise.
template <class Real>
RefinerSample<Real> refiner_noise_batch(const TrainBatch<Real>& batch, int R, double sigma_min, Rng& rng) {
    if (sigma_min <= 0 || sigma_min >= 1)
        throw std::invalid_argument("refiner: sigma_min must be in (0,1)");
    if (batch.m != 1) throw std::invalid_argument("refiner: exactly one target state per window");
    int n = batch.cond->shape[0];
    size_t state_sz = static_cast<size_t>(batch.C) * batch.H * batch.W;
    RefinerSample<Real> rs;
    rs.r.resize(n);
    rs.input = tensor<Real>({n, (batch.k + 1) * batch.C, batch.H, batch.W});
    rs.target = tensor<Real>({n, batch.C, batch.H, batch.W});
    for (int i = 0; i < n; ++i) {
        int r = static_cast<int>(rng.uniform_int(0, R));
        rs.r[i] = r;
        Real* in = rs.input->data.data() + static_cast<size_t>(i) * (batch.k + 1) * state_sz;
        for (int s = 0; s < batch.k; ++s)
            std::copy_n(batch.cond->data.data() + (static_cast<size_t>(i) * batch.k + s) * state_sz,
                        state_sz, in + s * state_sz);
        const Real* tgt = batch.targets->data.data() + static_cast<size_t>(i) * state_sz;
        Real* dslot = in + batch.k * state_sz;
        Real* out = rs.target->data.data() + static_cast<size_t>(i) * state_sz;
        if (r == R) {
            std::fill_n(dslot, state_sz, Real(0));
            std::copy_n(tgt, state_sz, out);
        } else {
            double sig = refiner_sigma(r, R, sigma_min);
            for (size_t j = 0; j < state_sz; ++j) {
                double e = rng.normal();
                dslot[j] = tgt[j] + static_cast<Real>(sig * e);
                out[j] = static_cast<Real>(e);
            }
        }
    }
    return rs;
}

template <class Real>
TensorPtr<Real> refiner_loss(const Model<Real>& model, const RefinerSample<Real>& rs, int k, int C) {
    auto out = data_slot(model.forward(rs.input, rs.r), k * C, C);
    return mse_loss(out, rs.target);
}

template <class Real>
TensorPtr<Real> refiner_train_step(const Model<Real>& model, const TrainBatch<Real>& batch, int R,
                                   double sigma_min, Rng& rng) {
    auto rs = refiner_noise_batch(batch, R, sigma_min, rng);
    return refiner_loss(model, rs, batch.k, batch.C);
}

// ---------------------------------------------------------------------------
// Dispatch
// ---------------------------------------------------------------------------

template <class Real>
TensorPtr<Real> objective_train_step(const Model<Real>& model, const TrainBatch<Real>& batch,
                                     const ObjectiveConfig& cfg, const DiffusionSchedule* sched,
                                     Rng& rng) {
    switch (cfg.variant) {
        case ObjectiveKind::acdm:
            return acdm_train_step(model, batch, *sched, rng, true, cfg.loss, cfg.huber_delta);
        case ObjectiveKind::acdm_ncn:
            return acdm_train_step(model, batch, *sched, rng, false, cfg.loss, cfg.huber_delta);
        case ObjectiveKind::next_step:
            return nextstep_train_step(model, batch);
        case ObjectiveKind::unrolled:
            return unrolled_train_step(model, batch, cfg.unroll_m);
        case ObjectiveKind::train_noise:
            return noisy_train_step(model, batch, cfg.noise_std, rng);
        case ObjectiveKind::refiner:
            return refiner_train_step(model, batch, cfg.refiner_R, cfg.refiner_sigma_min, rng);
    }
    throw std::logic_error("unreachable objective kind");
}

}  // namespace acdm
