#include <catch2/catch_amalgamated.hpp>

#include "acdm/sampler.hpp"
#include "gradcheck.hpp"

using namespace acdm;
using Catch::Approx;

namespace {

Trajectory context_trajectory(int states, int c, int h, int w, uint64_t seed, double re = 0.3) {
    Trajectory t;
    t.dt = 0.1;
    t.channel_names = {"velocity-x", "velocity-y", "pressure", "reynolds"};
    t.field_channels = 3;
    Rng rng(seed);
    for (int s = 0; s < states; ++s) {
        FlowState f(c, h, w);
        for (int ci = 0; ci < 3; ++ci)
            for (size_t i = 0; i < f.plane(); ++i) f.channel(ci)[i] = rng.normal();
        for (size_t i = 0; i < f.plane(); ++i) f.channel(3)[i] = re;
        t.states.push_back(std::move(f));
    }
    return t;
}

Model<double> diffusion_stub(int out_channels, double value = 0.0) {
    Model<double> m;
    m.spec.kind = BackboneKind::unet;
    m.spec.step_embed_dim = 2;
    m.fwd = [out_channels, value](const TensorPtr<double>& x, const TensorPtr<double>&) {
        return tensor<double>({x->shape[0], out_channels, x->shape[2], x->shape[3]}, value);
    };
    return m;
}

Model<double> small_unet(int in_ch, int out_ch, uint64_t seed, int emb = 8) {
    BackboneSpec spec;
    spec.kind = BackboneKind::unet;
    spec.in_channels = in_ch;
    spec.out_channels = out_ch;
    spec.width = 4;
    spec.unet_levels = 2;
    spec.step_embed_dim = emb;
    return build_backbone<double>(spec, seed);
}

}  // namespace

TEST_CASE("reverse step mean matches the q-posterior identity", "[sampler]") {
    auto sched = make_schedule(20);
    Rng rng(71);
    for (int trial = 0; trial < 100; ++trial) {
        double x0 = rng.normal();
        int r = static_cast<int>(rng.uniform_int(1, sched.R));
        double eps = rng.normal();
        double x_r = std::sqrt(sched.alpha_bar[r]) * x0 + std::sqrt(1.0 - sched.alpha_bar[r]) * eps;
        // oracle noise estimate recovers exactly the injected eps
        double eps_hat = (x_r - std::sqrt(sched.alpha_bar[r]) * x0) / std::sqrt(1.0 - sched.alpha_bar[r]);
        double mu = ddpm_posterior_mean(x_r, eps_hat, r, sched);
        double mu_q = q_posterior_mean(x0, x_r, r, sched);
        REQUIRE(std::abs(mu - mu_q) <= 1e-10);
    }
    REQUIRE_THROWS_AS(ddpm_posterior_mean(0.1, 0.0, 0, sched), std::invalid_argument);
}

TEST_CASE("oracle denoiser chain reconstructs x0", "[sampler]") {
    // forward_diffuse -> reverse chain with z = 0 and the oracle eps-hat.
    auto sched = make_schedule(20);
    Rng rng(72);
    for (int trial = 0; trial < 20; ++trial) {
        double x0 = rng.normal() * 2.0;
        double eps = rng.normal();
        double d = std::sqrt(sched.alpha_bar[sched.R]) * x0 + std::sqrt(1.0 - sched.alpha_bar[sched.R]) * eps;
        for (int r = sched.R; r >= 1; --r) {
            double eps_hat = (d - std::sqrt(sched.alpha_bar[r]) * x0) / std::sqrt(1.0 - sched.alpha_bar[r]);
            d = ddpm_posterior_mean(d, eps_hat, r, sched);
        }
        REQUIRE(std::abs(d - x0) <= 1e-6);
    }
}

TEST_CASE("reverse update adds no noise at the terminal step", "[sampler]") {
    auto sched = make_schedule(20);
    std::vector<double> d1{0.4, -0.2}, d2{0.4, -0.2};
    std::vector<double> eps{0.1, 0.3};
    Rng rng_a(1), rng_b(999);  // different z streams
    reverse_update(d1, eps.data(), 1, sched, &rng_a);
    reverse_update(d2, eps.data(), 1, sched, &rng_b);
    REQUIRE(d1 == d2);  // bit-exact: r=1 consumes no noise

    // beta -> 0 limit: d_{r-1} ~ d_r when eps_hat = 0
    DiffusionSchedule tiny;
    tiny.R = 2;
    tiny.beta = {0.0, 1e-12, 1e-12};
    tiny.alpha = {1.0, 1.0 - 1e-12, 1.0 - 1e-12};
    tiny.alpha_bar = {1.0, 1.0 - 1e-12, (1.0 - 1e-12) * (1.0 - 1e-12)};
    std::vector<double> d{0.7};
    std::vector<double> zero{0.0};
    reverse_update(d, zero.data(), 1, tiny, nullptr);
    CHECK(std::abs(d[0] - 0.7) <= 1e-8);
}

TEST_CASE("acdm predict step is seed-deterministic and r-count exact", "[sampler]") {
    auto ctx = context_trajectory(3, 4, 8, 16, 5);
    std::deque<FlowState> cond(ctx.states.begin(), ctx.states.begin() + 2);
    auto model = small_unet(12, 4, 3);
    auto sched = make_schedule(15);

    model.eval_count = 0;
    Rng r1(9);
    auto a = acdm_predict_step(model, cond, sched, r1, true);
    CHECK(model.eval_count == 15);  // exactly R model evaluations

    Rng r2(9);
    auto b = acdm_predict_step(model, cond, sched, r2, true);
    REQUIRE(a.data == b.data);  // same seed, identical states

    Rng r3(10);
    auto c = acdm_predict_step(model, cond, sched, r3, true);
    double l2 = 0;
    for (size_t i = 0; i < a.data.size(); ++i) l2 += (a.data[i] - c.data[i]) * (a.data[i] - c.data[i]);
    CHECK(l2 > 0.0);  // different seeds diverge
}

TEST_CASE("ncn freezes the conditioning across all reverse steps", "[sampler]") {
    auto ctx = context_trajectory(3, 4, 6, 12, 6);
    std::deque<FlowState> cond(ctx.states.begin(), ctx.states.begin() + 2);
    auto sched = make_schedule(12);

    // capture every model input's conditioning channels
    std::vector<std::vector<double>> seen;
    Model<double> capture;
    capture.spec.kind = BackboneKind::unet;
    capture.spec.step_embed_dim = 2;
    capture.fwd = [&seen](const TensorPtr<double>& x, const TensorPtr<double>&) {
        size_t state = static_cast<size_t>(4) * 6 * 12;
        seen.emplace_back(x->data.begin(), x->data.begin() + 2 * state);
        return tensor<double>({1, 4, 6, 12}, 0.0);
    };

    Rng rng(3);
    acdm_predict_step(capture, cond, sched, rng, false);
    REQUIRE(seen.size() == 12);
    std::vector<double> c0;
    for (const auto& s : cond) c0.insert(c0.end(), s.data.begin(), s.data.end());
    for (const auto& s : seen) REQUIRE(s == c0);  // bit-equal at every r

    seen.clear();
    Rng rng2(3);
    acdm_predict_step(capture, cond, sched, rng2, true);
    for (size_t i = 0; i < seen.size(); ++i)
        if (i + 1 < seen.size())  // r > 0 within the chain
            REQUIRE(seen[i] != c0);
}

TEST_CASE("rollout horizon 1 equals a single predict step", "[sampler]") {
    auto ctx = context_trajectory(4, 4, 8, 16, 7);
    auto model = small_unet(12, 4, 4);
    auto sched = make_schedule(10);
    RolloutConfig cfg;
    cfg.horizon = 1;
    cfg.k = 2;
    cfg.seed = 11;
    auto traj = rollout(model, ctx, &sched, cfg);
    REQUIRE(traj.states.size() == 3);  // k initial + 1 generated

    std::deque<FlowState> cond(ctx.states.begin(), ctx.states.begin() + 2);
    Rng rng(11);
    auto single = acdm_predict_step(model, cond, sched, rng, true);
    detail::overwrite_params(single, 3, {ctx.states[1].channel(3)[0]});
    REQUIRE(traj.states[2].data == single.data);
}

TEST_CASE("deterministic variants give identical rollouts", "[sampler]") {
    auto ctx = context_trajectory(3, 4, 8, 16, 8);
    BackboneSpec spec;
    spec.kind = BackboneKind::resnet;
    spec.in_channels = 4;
    spec.out_channels = 4;
    spec.width = 4;
    spec.resnet_blocks = 1;
    spec.resnet_layers = 2;
    spec.dilation = {1, 1};
    auto model = build_backbone<double>(spec, 12);
    RolloutConfig cfg;
    cfg.horizon = 4;
    cfg.k = 1;
    cfg.variant = ObjectiveKind::next_step;
    cfg.seed = 1;
    auto a = rollout(model, ctx, nullptr, cfg);
    cfg.seed = 2;  // seed is irrelevant for deterministic variants
    auto b = rollout(model, ctx, nullptr, cfg);
    REQUIRE(a.states.size() == b.states.size());
    for (size_t i = 0; i < a.states.size(); ++i) REQUIRE(a.states[i].data == b.states[i].data);
}

TEST_CASE("identity model yields a constant trajectory", "[sampler]") {
    auto ctx = context_trajectory(2, 4, 6, 12, 9);
    Model<double> identity;
    identity.spec.kind = BackboneKind::resnet;
    identity.fwd = [](const TensorPtr<double>& x, const TensorPtr<double>&) {
        return slice_channels(x, 0, 4);
    };
    RolloutConfig cfg;
    cfg.horizon = 5;
    cfg.k = 1;
    cfg.variant = ObjectiveKind::next_step;
    auto traj = rollout(identity, ctx, nullptr, cfg);
    for (size_t t = 1; t < traj.states.size(); ++t) REQUIRE(traj.states[t].data == traj.states[0].data);
}

TEST_CASE("generated parameter channels equal the override series", "[sampler]") {
    auto ctx = context_trajectory(3, 4, 6, 12, 10);
    auto model = small_unet(12, 4, 5);
    auto sched = make_schedule(10);
    RolloutConfig cfg;
    cfg.horizon = 3;
    cfg.k = 2;
    cfg.param_series = {{0.11}, {0.22}, {0.33}};
    auto traj = rollout(model, ctx, &sched, cfg);
    for (int t = 0; t < 3; ++t) {
        const auto& s = traj.states[2 + t];
        for (size_t i = 0; i < s.plane(); ++i) REQUIRE(s.channel(3)[i] == cfg.param_series[t][0]);
    }
}

TEST_CASE("refiner predict step: R=0 is the pure one-step prediction", "[sampler]") {
    auto ctx = context_trajectory(2, 4, 6, 12, 11);
    std::deque<FlowState> cond{ctx.states[0]};
    auto model = small_unet(8, 4, 6);
    Rng rng(4);
    auto a = refiner_predict_step(model, cond, 0, 1e-6, rng);

    // manual one-pass with a zeroed d slot
    auto x = tensor<double>({1, 8, 6, 12});
    for (size_t i = 0; i < cond[0].data.size(); ++i) x->data[i] = cond[0].data[i];
    NoGradGuard ng;
    auto manual = model.forward(x, {0});
    for (size_t i = 0; i < a.data.size(); ++i) REQUIRE(a.data[i] == manual->data[i]);

    REQUIRE_THROWS_AS(refiner_predict_step(model, cond, 4, 1.0, rng), std::invalid_argument);
}

TEST_CASE("refiner refinement rounds are identity in expectation for a zero oracle", "[sampler]") {
    // A noise predictor with no information predicts E[eps] = 0; the rounds
    // then add sigma_r * z with zero mean. Mean drift over many trials stays
    // inside the 3-sigma Monte-Carlo band.
    auto ctx = context_trajectory(2, 4, 4, 8, 12);
    std::deque<FlowState> cond{ctx.states[0]};
    const int R = 4;
    const double smin = 1e-2;
    Model<double> zero_after_first;
    zero_after_first.spec.kind = BackboneKind::unet;
    zero_after_first.spec.step_embed_dim = 2;
    double first_value = 0.37;
    zero_after_first.fwd = [first_value](const TensorPtr<double>& x, const TensorPtr<double>&) {
        // r=R call produces the base prediction; refinement calls predict 0
        size_t state = static_cast<size_t>(4) * 4 * 8;
        bool dslot_zero = true;
        for (size_t i = state; i < 2 * state; ++i)
            if (x->data[i] != 0.0) dslot_zero = false;
        return tensor<double>({1, 4, 4, 8}, dslot_zero ? first_value : 0.0);
    };

    const int trials = 1000;
    double total_sigma2 = 0;
    for (int r = 0; r < R; ++r) total_sigma2 += std::pow(refiner_sigma(r, R, smin), 2);
    double cell_se = std::sqrt(total_sigma2 / trials);

    size_t cells = 4 * 4 * 8;
    std::vector<double> mean(cells, 0.0);
    for (int trial = 0; trial < trials; ++trial) {
        Rng rng(1000 + trial);
        auto out = refiner_predict_step(zero_after_first, cond, R, smin, rng);
        for (size_t i = 0; i < cells; ++i) mean[i] += out.data[i];
    }
    double worst = 0;
    for (size_t i = 0; i < cells; ++i) worst = std::max(worst, std::abs(mean[i] / trials - first_value));
    CHECK(worst <= 4.0 * cell_se);  // mean drift bounded (4 sigma over 128 cells)
}

TEST_CASE("posterior ensembles: seeds, distinctness, determinism", "[sampler]") {
    auto ctx = context_trajectory(3, 4, 8, 16, 13);
    auto model = small_unet(12, 4, 7);
    auto sched = make_schedule(10);
    RolloutConfig cfg;
    cfg.horizon = 2;
    cfg.k = 2;
    cfg.ensemble_size = 3;
    cfg.seed = 40;

    auto members = posterior_ensemble(model, ctx, &sched, cfg);
    REQUIRE(members.size() == 3);
    for (int i = 0; i < 3; ++i) CHECK(members[i].seed == 40 + i);
    for (int i = 0; i < 3; ++i)
        for (int j = i + 1; j < 3; ++j) REQUIRE(members[i].states[2].data != members[j].states[2].data);

    // ensemble of one equals a plain rollout
    cfg.ensemble_size = 1;
    auto single = posterior_ensemble(model, ctx, &sched, cfg);
    auto direct = rollout(model, ctx, &sched, cfg);
    REQUIRE(single[0].states[2].data == direct.states[2].data);

    // concurrent execution is bit-identical to serial
    cfg.ensemble_size = 3;
    cfg.jobs = 3;
    auto parallel = posterior_ensemble(model, ctx, &sched, cfg);
    for (int i = 0; i < 3; ++i) REQUIRE(parallel[i].states[2].data == members[i].states[2].data);

    // deterministic variants: members identical
    BackboneSpec spec;
    spec.kind = BackboneKind::resnet;
    spec.in_channels = 8;
    spec.out_channels = 4;
    spec.width = 4;
    spec.resnet_blocks = 1;
    spec.resnet_layers = 2;
    spec.dilation = {1, 1};
    auto det = build_backbone<double>(spec, 5);
    RolloutConfig dcfg;
    dcfg.horizon = 2;
    dcfg.k = 2;
    dcfg.variant = ObjectiveKind::next_step;
    dcfg.ensemble_size = 3;
    auto dmembers = posterior_ensemble(det, ctx, nullptr, dcfg);
    for (int i = 1; i < 3; ++i) REQUIRE(dmembers[i].states.back().data == dmembers[0].states.back().data);
}
